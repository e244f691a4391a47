// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/latentizer.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace vrgbx {

namespace {

void check_frames(int frames) {
    if (frames < 1 || frames % 4 != 1)
        throw std::invalid_argument("frame count " + std::to_string(frames) + " violates T = 1 (mod 4)");
}

}  // namespace

int chunk_count(int frames) {
    check_frames(frames);
    return 1 + (frames - 1) / 4;
}

int frame_of_slot(int chunk, int slot) { return chunk == 0 ? 0 : 4 * (chunk - 1) + 1 + slot; }

int chunk_of_frame(int frame) { return frame == 0 ? 0 : (frame - 1) / 4 + 1; }

std::vector<std::array<int, kSlotsPerChunk>> chunk_frame_table(int frames) {
    std::vector<std::array<int, kSlotsPerChunk>> table(chunk_count(frames));
    for (int k = 0; k < static_cast<int>(table.size()); ++k)
        for (int j = 0; j < kSlotsPerChunk; ++j) table[k][j] = frame_of_slot(k, j);
    return table;
}

LatentGrid encode(const Tensor& video, int patch) {
    const VideoDims d = video_dims(video);
    check_frames(d.frames);
    if (patch < 1) throw std::invalid_argument("patch size must be positive");
    if (d.height % patch != 0)
        throw std::invalid_argument("height " + std::to_string(d.height) + " not divisible by patch " + std::to_string(patch));
    if (d.width % patch != 0)
        throw std::invalid_argument("width " + std::to_string(d.width) + " not divisible by patch " + std::to_string(patch));
    const int K = chunk_count(d.frames);
    const int hp = d.height / patch;
    const int wp = d.width / patch;
    LatentGrid g{Tensor({K, latent_channels(patch), hp, wp}), patch};
    for (int k = 0; k < K; ++k) {
        for (int j = 0; j < kSlotsPerChunk; ++j) {
            const int f = frame_of_slot(k, j);
            for (int ch = 0; ch < 3; ++ch)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px) {
                        const int c = ((j * 3 + ch) * patch + py) * patch + px;
                        for (int y = 0; y < hp; ++y)
                            for (int x = 0; x < wp; ++x)
                                g.tensor.at(k, c, y, x) = video.at(f, ch, y * patch + py, x * patch + px);
                    }
        }
    }
    return g;
}

Tensor decode(const LatentGrid& latent, DecodeDiagnostics* diag) {
    const Tensor& z = latent.tensor;
    const int p = latent.patch;
    if (z.rank() != 4 || z.dim(1) != latent_channels(p))
        throw std::invalid_argument("latent shape " + shape_string(z.shape()) + " inconsistent with patch " + std::to_string(p));
    const int K = z.dim(0);
    const int hp = z.dim(2);
    const int wp = z.dim(3);
    const int T = 1 + 4 * (K - 1);
    Tensor video({T, 3, hp * p, wp * p});
    float gap = 0.f;
    for (int k = 0; k < K; ++k) {
        for (int ch = 0; ch < 3; ++ch)
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    for (int y = 0; y < hp; ++y)
                        for (int x = 0; x < wp; ++x) {
                            auto chan = [&](int j) { return ((j * 3 + ch) * p + py) * p + px; };
                            if (k == 0) {
                                const float a = z.at(0, chan(0), y, x);
                                const float b = z.at(0, chan(1), y, x);
                                const float c = z.at(0, chan(2), y, x);
                                const float e = z.at(0, chan(3), y, x);
                                float v = a;
                                if (!(a == b && a == c && a == e)) {
                                    v = (a + b + c + e) / 4.f;
                                    gap = std::max({gap, std::abs(a - v), std::abs(b - v), std::abs(c - v), std::abs(e - v)});
                                }
                                video.at(0, ch, y * p + py, x * p + px) = v;
                            } else {
                                for (int j = 0; j < kSlotsPerChunk; ++j)
                                    video.at(frame_of_slot(k, j), ch, y * p + py, x * p + px) = z.at(k, chan(j), y, x);
                            }
                        }
    }
    if (diag) {
        diag->replicas_disagree = gap > 0.f;
        diag->max_replica_gap = gap;
    } else if (gap > 0.f) {
        spdlog::warn("latent chunk 0 replicas disagree (max gap {:.3g}); frame 0 uses their average", gap);
    }
    return video;
}

Tensor presence_latent(std::span<const std::uint8_t> presence, int latent_height, int latent_width) {
    const int T = static_cast<int>(presence.size());
    const int K = chunk_count(T);
    Tensor m({K, kSlotsPerChunk, latent_height, latent_width});
    for (int k = 0; k < K; ++k)
        for (int j = 0; j < kSlotsPerChunk; ++j) {
            const std::uint8_t flag = presence[frame_of_slot(k, j)];
            if (flag > 1) throw std::invalid_argument("presence flags must be 0 or 1");
            for (int y = 0; y < latent_height; ++y)
                for (int x = 0; x < latent_width; ++x) m.at(k, j, y, x) = flag;
        }
    return m;
}

}  // namespace vrgbx
