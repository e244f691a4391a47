// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace vrgbx::metrics {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
}

double psnr_from_mse(double mse) {
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Sum over the box [y, y+w) x [x, x+w) of an (H+1) x (W+1) integral image.
inline double box(const std::vector<double>& s, int stride, int y, int x, int w) {
    return s[(y + w) * stride + x + w] - s[y * stride + x + w] - s[(y + w) * stride + x] + s[y * stride + x];
}

double ssim_plane(const float* a, const float* b, int h, int w, int window) {
    const int stride = w + 1;
    std::vector<double> sa((h + 1) * stride, 0.0), sb(sa.size(), 0.0), saa(sa.size(), 0.0), sbb(sa.size(), 0.0),
        sab(sa.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double va = a[y * w + x];
            const double vb = b[y * w + x];
            const int i = (y + 1) * stride + x + 1;
            const int up = y * stride + x + 1;
            const int left = (y + 1) * stride + x;
            const int diag = y * stride + x;
            sa[i] = va + sa[up] + sa[left] - sa[diag];
            sb[i] = vb + sb[up] + sb[left] - sb[diag];
            saa[i] = va * va + saa[up] + saa[left] - saa[diag];
            sbb[i] = vb * vb + sbb[up] + sbb[left] - sbb[diag];
            sab[i] = va * vb + sab[up] + sab[left] - sab[diag];
        }
    const double n = static_cast<double>(window) * window;
    double total = 0;
    for (int y = 0; y + window <= h; ++y)
        for (int x = 0; x + window <= w; ++x) {
            const double ma = box(sa, stride, y, x, window) / n;
            const double mb = box(sb, stride, y, x, window) / n;
            const double va = box(saa, stride, y, x, window) / n - ma * ma;
            const double vb = box(sbb, stride, y, x, window) / n - mb * mb;
            const double cov = box(sab, stride, y, x, window) / n - ma * mb;
            total += ((2 * ma * mb + kSsimC1) * (2 * cov + kSsimC2)) /
                     ((ma * ma + mb * mb + kSsimC1) * (va + vb + kSsimC2));
        }
    return total / (static_cast<double>(h - window + 1) * (w - window + 1));
}

}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "psnr");
    if (a.empty()) throw std::invalid_argument("psnr: empty input");
    double sum = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        sum += d * d;
    }
    return psnr_from_mse(sum / static_cast<double>(a.size()));
}

double masked_psnr(const Tensor& a, const Tensor& b, const std::vector<std::uint8_t>& mask) {
    require_same_shape(a, b, "masked_psnr");
    if (mask.size() != a.size()) throw std::invalid_argument("masked_psnr: mask size mismatch");
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (!mask[i]) continue;
        const double d = static_cast<double>(a[i]) - b[i];
        sum += d * d;
        ++n;
    }
    if (n == 0) throw std::invalid_argument("masked_psnr: empty mask");
    return psnr_from_mse(sum / static_cast<double>(n));
}

double ssim(const Tensor& a, const Tensor& b, int window) {
    require_same_shape(a, b, "ssim");
    if (window < 1) throw std::invalid_argument("ssim: window must be positive");
    int frames = 1;
    int channels = 0;
    int h = 0;
    int w = 0;
    if (a.rank() == 3) {
        channels = a.dim(0);
        h = a.dim(1);
        w = a.dim(2);
    } else if (a.rank() == 4) {
        frames = a.dim(0);
        channels = a.dim(1);
        h = a.dim(2);
        w = a.dim(3);
    } else {
        throw std::invalid_argument("ssim: expected [C, H, W] or [T, C, H, W], got " + shape_string(a.shape()));
    }
    if (h < window || w < window)
        throw std::invalid_argument("ssim: input " + std::to_string(h) + "x" + std::to_string(w) +
                                    " is smaller than the " + std::to_string(window) + "x" + std::to_string(window) +
                                    " window");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    double total = 0;
    for (int t = 0; t < frames; ++t) {
        double frame = 0;
        for (int c = 0; c < channels; ++c) {
            const std::size_t off = (static_cast<std::size_t>(t) * channels + c) * plane;
            frame += ssim_plane(a.data() + off, b.data() + off, h, w, window);
        }
        total += frame / channels;
    }
    return total / frames;
}

AlbedoScale albedo_scale(const Tensor& pred, const Tensor& gt) {
    require_same_shape(pred, gt, "albedo_scale");
    const bool video = pred.rank() == 4;
    if (!video && pred.rank() != 3) throw std::invalid_argument("albedo_scale: expected an image or video");
    const int channel_axis = video ? 1 : 0;
    if (pred.dim(channel_axis) != 3) throw std::invalid_argument("albedo_scale: expected 3 channels");
    const int frames = video ? pred.dim(0) : 1;
    const std::size_t plane = pred.size() / (static_cast<std::size_t>(frames) * 3);

    AlbedoScale out;
    out.scaled = pred;
    for (int c = 0; c < 3; ++c) {
        double pg = 0;
        double pp = 0;
        for (int t = 0; t < frames; ++t) {
            const std::size_t off = (static_cast<std::size_t>(t) * 3 + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                pg += static_cast<double>(pred[off + i]) * gt[off + i];
                pp += static_cast<double>(pred[off + i]) * pred[off + i];
            }
        }
        if (pp == 0) {
            out.zero_energy[c] = true;
            continue;
        }
        out.scale[c] = pg / pp;
        for (int t = 0; t < frames; ++t) {
            const std::size_t off = (static_cast<std::size_t>(t) * 3 + c) * plane;
            for (std::size_t i = 0; i < plane; ++i)
                out.scaled[off + i] = static_cast<float>(out.scale[c] * pred[off + i]);
        }
    }
    return out;
}

double smoothness(const Tensor& video) {
    const VideoDims d = video_dims(video);
    if (d.frames < 2) throw std::invalid_argument("smoothness: needs at least 2 frames");
    const std::size_t frame = video.size() / d.frames;
    double total = 0;
    for (int t = 0; t + 1 < d.frames; ++t) {
        double sum = 0;
        for (std::size_t i = 0; i < frame; ++i) {
            const double diff = static_cast<double>(video[(t + 1) * frame + i]) - video[t * frame + i];
            sum += diff * diff;
        }
        total += sum / static_cast<double>(frame);
    }
    return 1.0 - total / (d.frames - 1);
}

ClipMetrics evaluate_clip(const std::string& clip_id, const Tensor& pred, const Tensor& gt) {
    ClipMetrics m;
    m.clip_id = clip_id;
    m.psnr = psnr(pred, gt);
    m.ssim = ssim(pred, gt);
    m.smoothness = smoothness(pred);
    return m;
}

Aggregate aggregate(const std::vector<ClipMetrics>& clips) {
    Aggregate a;
    a.clips = static_cast<int>(clips.size());
    if (clips.empty()) return a;
    std::map<std::string, int> counts;
    for (const auto& c : clips) {
        a.psnr += c.psnr;
        a.ssim += c.ssim;
        a.smoothness += c.smoothness;
        for (const auto& [k, v] : c.per_modality) {
            a.per_modality[k] += v;
            ++counts[k];
        }
    }
    a.psnr /= a.clips;
    a.ssim /= a.clips;
    a.smoothness /= a.clips;
    for (auto& [k, v] : a.per_modality) v /= counts[k];
    return a;
}

nlohmann::json to_json(const ClipMetrics& m) {
    return {{"clip_id", m.clip_id},
            {"psnr", m.psnr},
            {"ssim", m.ssim},
            {"smoothness", m.smoothness},
            {"per_modality", m.per_modality}};
}

nlohmann::json to_json(const Aggregate& a) {
    return {{"clips", a.clips},
            {"psnr", a.psnr},
            {"ssim", a.ssim},
            {"smoothness", a.smoothness},
            {"per_modality", a.per_modality}};
}

}  // namespace vrgbx::metrics
