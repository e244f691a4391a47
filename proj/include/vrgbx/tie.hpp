// SPDX-License-Identifier: Apache-2.0
#pragma once

// Temporal-aware intrinsic embedding. Each frame's modality selects a column
// of the type encoder W (d x 4); the four frame embeddings of a latent chunk
// are concatenated in temporal order into one 4d vector, and that vector is
// broadcast-added to every spatial token of the chunk.

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vrgbx/latentizer.hpp"
#include "vrgbx/modality.hpp"

namespace vrgbx::tie {

/// W is stored row-major as d x 4, so column m is W[i * 4 + m].
template <typename Real>
std::vector<Real> embed_modality(ModalityId m, std::span<const Real> type_encoder, int d) {
    if (static_cast<int>(type_encoder.size()) != d * kModalityCount)
        throw std::invalid_argument("type encoder must be d x 4");
    std::vector<Real> e(d);
    for (int i = 0; i < d; ++i) e[i] = type_encoder[i * kModalityCount + code(m)];
    return e;
}

/// Packed embeddings, K x 4d row-major; chunk k, slot j holds the embedding
/// of frame_of_slot(k, j).
template <typename Real>
std::vector<Real> pack_chunk_embeddings(std::span<const ModalityId> plan, std::span<const Real> type_encoder, int d) {
    const int frames = static_cast<int>(plan.size());
    if (frames < 1 || frames % 4 != 1)
        throw std::invalid_argument("plan length " + std::to_string(frames) + " violates T = 1 (mod 4)");
    if (static_cast<int>(type_encoder.size()) != d * kModalityCount)
        throw std::invalid_argument("type encoder must be d x 4");
    const auto table = chunk_frame_table(frames);
    const int width = kSlotsPerChunk * d;
    std::vector<Real> packed(table.size() * width);
    for (std::size_t k = 0; k < table.size(); ++k)
        for (int j = 0; j < kSlotsPerChunk; ++j) {
            const int m = code(plan[table[k][j]]);
            Real* slot = packed.data() + k * width + j * d;
            for (int i = 0; i < d; ++i) slot[i] = type_encoder[i * kModalityCount + m];
        }
    return packed;
}

/// Adjoint of pack_chunk_embeddings: accumulates d(loss)/dW.
template <typename Real>
void pack_chunk_embeddings_backward(std::span<const ModalityId> plan, std::span<const Real> d_packed, int d,
                                    std::span<Real> d_type_encoder) {
    const auto table = chunk_frame_table(static_cast<int>(plan.size()));
    const int width = kSlotsPerChunk * d;
    for (std::size_t k = 0; k < table.size(); ++k)
        for (int j = 0; j < kSlotsPerChunk; ++j) {
            const int m = code(plan[table[k][j]]);
            const Real* slot = d_packed.data() + k * width + j * d;
            for (int i = 0; i < d; ++i) d_type_encoder[i * kModalityCount + m] += slot[i];
        }
}

/// tokens: K * tokens_per_chunk rows of `width` features, chunk-major.
/// Every token of chunk k gets gamma * packed[k] added.
template <typename Real>
void modulate(std::span<Real> tokens, int tokens_per_chunk, int width, std::span<const Real> packed, Real gamma) {
    if (packed.size() % width != 0 || width <= 0)
        throw std::invalid_argument("packed embedding width does not match token width " + std::to_string(width));
    const std::size_t chunks = packed.size() / width;
    if (tokens.size() != chunks * tokens_per_chunk * width)
        throw std::invalid_argument("token count does not match packed chunks");
    for (std::size_t k = 0; k < chunks; ++k)
        for (int s = 0; s < tokens_per_chunk; ++s) {
            Real* row = tokens.data() + (k * tokens_per_chunk + s) * width;
            const Real* e = packed.data() + k * width;
            for (int i = 0; i < width; ++i) row[i] += gamma * e[i];
        }
}

}  // namespace vrgbx::tie
