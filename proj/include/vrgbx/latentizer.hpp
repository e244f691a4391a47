// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "vrgbx/tensor.hpp"

namespace vrgbx {

// Frames are grouped into latent chunks the way a causal video VAE does:
// chunk 0 holds frame 0 alone (replicated into all four slots), chunk k > 0
// holds frames 4(k-1)+1 .. 4(k-1)+4. Indices here are 0-based.
inline constexpr int kSlotsPerChunk = 4;

int chunk_count(int frames);

/// Frame stored in `slot` of `chunk`.
int frame_of_slot(int chunk, int slot);

/// Chunk that owns `frame` (frame 0 maps to chunk 0).
int chunk_of_frame(int frame);

/// table[k][j] = frame_of_slot(k, j), for every chunk of a T-frame clip.
std::vector<std::array<int, kSlotsPerChunk>> chunk_frame_table(int frames);

/// Lossless latent: tensor [K, 12 p^2, H/p, W/p].
struct LatentGrid {
    Tensor tensor;
    int patch = 1;

    int chunks() const { return tensor.dim(0); }
    int channels() const { return tensor.dim(1); }
    int height() const { return tensor.dim(2); }
    int width() const { return tensor.dim(3); }
};

inline int latent_channels(int patch) { return 3 * kSlotsPerChunk * patch * patch; }

/// Bijective space-to-depth plus 1-then-4 temporal chunking.
LatentGrid encode(const Tensor& video, int patch);

struct DecodeDiagnostics {
    bool replicas_disagree = false;
    float max_replica_gap = 0.f;
};

/// Exact inverse of encode. If the four chunk-0 replicas differ, frame 0 is
/// their average and the disagreement is reported (and logged at warn level
/// unless `diag` is supplied).
Tensor decode(const LatentGrid& latent, DecodeDiagnostics* diag = nullptr);

/// Per-frame binary flags laid out like a latent: [K, 4, H', W'].
Tensor presence_latent(std::span<const std::uint8_t> presence, int latent_height, int latent_width);

}  // namespace vrgbx
