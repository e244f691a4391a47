// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrgbx/tensor.hpp"

namespace vrgbx::metrics {

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// 10 log10(1 / MSE) for unit-range data, capped at 99 dB.
double psnr(const Tensor& a, const Tensor& b);

/// PSNR over the elements where `mask` is nonzero; `mask` has the shape of a.
double masked_psnr(const Tensor& a, const Tensor& b, const std::vector<std::uint8_t>& mask);

/// Mean SSIM with a uniform `window` x `window` box over all valid window
/// positions, averaged over channels and then frames. Accepts [3, H, W] images
/// or [T, 3, H, W] videos.
double ssim(const Tensor& a, const Tensor& b, int window = 8);

struct AlbedoScale {
    Tensor scaled;
    std::array<double, 3> scale{1, 1, 1};
    std::array<bool, 3> zero_energy{false, false, false};
};

/// Per-channel least-squares scale s_c = sum(pred_c gt_c) / sum(pred_c^2).
AlbedoScale albedo_scale(const Tensor& pred, const Tensor& gt);

/// 1 - mean_t mean((f_{t+1} - f_t)^2).
double smoothness(const Tensor& video);

struct ClipMetrics {
    std::string clip_id;
    double psnr = 0;
    double ssim = 0;
    double smoothness = 0;
    std::map<std::string, double> per_modality;  // modality name -> PSNR
};

ClipMetrics evaluate_clip(const std::string& clip_id, const Tensor& pred, const Tensor& gt);

struct Aggregate {
    double psnr = 0;
    double ssim = 0;
    double smoothness = 0;
    std::map<std::string, double> per_modality;
    int clips = 0;
};

/// Arithmetic means over clips.
Aggregate aggregate(const std::vector<ClipMetrics>& clips);

nlohmann::json to_json(const ClipMetrics& m);
nlohmann::json to_json(const Aggregate& a);

}  // namespace vrgbx::metrics
