// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/oracle_edit.hpp"

#include <cmath>

#include "vrgbx/image_io.hpp"
#include "vrgbx/rng.hpp"

namespace vrgbx {

EditKind edit_kind_from_string(const std::string& s) {
    if (s == "recolor_albedo") return EditKind::RecolorAlbedo;
    if (s == "set_light_color") return EditKind::SetLightColor;
    throw ValidationError("edit.kind", "unknown edit kind '" + s + "' (expected recolor_albedo or set_light_color)");
}

namespace {

double distance(const Rgb& a, const Rgb& b) {
    double s = 0;
    for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
    return std::sqrt(s);
}

Rgb draw_far(Rng& rng, const Rgb& from, double lo, double hi, double min_distance) {
    Rgb out{};
    for (int attempt = 0; attempt < 1000; ++attempt) {
        for (auto& c : out) c = rng.uniform(lo, hi);
        if (distance(out, from) >= min_distance) return out;
    }
    // Unreachable for the ranges used here; fall back to the mirrored color.
    for (int c = 0; c < 3; ++c) out[c] = lo + hi - from[c];
    return out;
}

}  // namespace

EditOp random_edit_op(const SceneSpec& scene, EditKind kind, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "oracle-edit"));
    if (kind == EditKind::RecolorAlbedo) {
        std::vector<int> discs;
        for (const auto& o : scene.objects)
            if (o.shape == ShapeKind::Disc) discs.push_back(o.id);
        if (discs.empty()) throw ValidationError("scene.objects", "no disc to recolor");
        const SceneObject* target = scene.find(discs[rng.index(static_cast<int>(discs.size()))]);
        return {RecolorAlbedo{target->id, draw_far(rng, target->albedo, 0.1, 0.9, 0.45)}};
    }
    return {SetLightColor{draw_far(rng, scene.light.color.front(), 0.3, 1.0, 0.35)}};
}

std::vector<std::uint8_t> edit_footprint(const Tensor& original, const Tensor& edited) {
    const VideoDims d = video_dims(original);
    if (video_dims(edited) != d) throw std::invalid_argument("footprint videos differ in shape");
    const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(d.frames) * plane, 0);
    for (int t = 0; t < d.frames; ++t)
        for (int c = 0; c < 3; ++c) {
            const std::size_t base = (static_cast<std::size_t>(t) * 3 + c) * plane;
            for (std::size_t i = 0; i < plane; ++i)
                if (std::abs(original[base + i] - edited[base + i]) > 1.5f / 255.f) mask[t * plane + i] = 1;
        }
    return mask;
}

OracleEdit make_oracle_edit(const SceneSpec& scene, const EditOp& op, const std::vector<int>& keyframes) {
    OracleEdit out;
    out.op = op;
    out.original = quantized(render_scene(scene).rgb);
    RenderResult e = render_scene(apply_edit(scene, op));
    out.edited.rgb = quantized(e.rgb);
    for (ModalityId m : kAllModalities) out.edited.gt.channel(m) = quantized(e.gt.channel(m));
    out.edited.specular = std::move(e.specular);
    out.footprint = edit_footprint(out.original, out.edited.rgb);

    const ModalitySet touched = op.touched_modalities();
    const VideoDims d = scene.dims;
    auto frame_of = [&](const Tensor& v, int t) {
        Tensor img({3, d.height, d.width});
        std::copy(v.slice(t).begin(), v.slice(t).end(), img.values().begin());
        return img;
    };
    for (int f : keyframes) {
        if (f < 0 || f >= d.frames) throw ValidationError("keyframes", "frame " + std::to_string(f + 1) + " outside the clip");
        KeyframeEdit k;
        k.frame = f;
        k.modalities = touched;
        for (ModalityId m : touched.members()) k.intrinsics[m] = frame_of(out.edited.gt.channel(m), f);
        k.rgb = frame_of(out.edited.rgb, f);
        out.spec.keyframes.push_back(std::move(k));
    }
    std::sort(out.spec.keyframes.begin(), out.spec.keyframes.end(),
              [](const KeyframeEdit& a, const KeyframeEdit& b) { return a.frame < b.frame; });
    out.spec.validate(d);
    return out;
}

}  // namespace vrgbx
