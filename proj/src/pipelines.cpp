// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/pipelines.hpp"

#include <algorithm>
#include <set>

#include "vrgbx/latentizer.hpp"
#include "vrgbx/metrics.hpp"
#include "vrgbx/rng.hpp"

namespace vrgbx {

namespace {

void require_task(const Renderer& r, TaskMode want, const char* role) {
    if (r.task != want)
        throw std::invalid_argument(std::string(role) + " model was trained for " + to_string(r.task) + ", expected " +
                                    to_string(want));
}

void require_dims(const Renderer& r, VideoDims dims) {
    if (r.model.config().video() != dims)
        throw std::invalid_argument("video " + shape_string(dims.shape()) + " does not match the model's " +
                                    shape_string(r.model.config().video().shape()));
}

diffusion::SamplerConfig with_seed(diffusion::SamplerConfig s, std::uint64_t seed) {
    s.seed = seed;
    return s;
}

}  // namespace

int ReferenceSequence::keyframe_count() const {
    return static_cast<int>(std::count(presence.begin(), presence.end(), std::uint8_t{1}));
}

ReferenceSequence build_reference(const std::vector<std::pair<int, Tensor>>& keyframes, VideoDims dims) {
    ReferenceSequence ref{Tensor(dims.shape()), std::vector<std::uint8_t>(dims.frames, 0)};
    const std::vector<int> image{3, dims.height, dims.width};
    for (const auto& [frame, img] : keyframes) {
        if (frame < 0 || frame >= dims.frames)
            throw ValidationError("keyframes", "index " + std::to_string(frame + 1) + " outside 1.." + std::to_string(dims.frames));
        if (ref.presence[frame]) throw ValidationError("keyframes", "duplicate index " + std::to_string(frame + 1));
        if (img.shape() != image)
            throw ValidationError("keyframes", "image " + shape_string(img.shape()) + " expected " + shape_string(image));
        ref.presence[frame] = 1;
        std::copy(img.values().begin(), img.values().end(), ref.video.slice(frame).begin());
    }
    return ref;
}

Tensor to_model_space(const Tensor& video) {
    Tensor out(video.shape());
    for (std::size_t i = 0; i < video.size(); ++i) out[i] = 2.f * video[i] - 1.f;
    return out;
}

Tensor from_model_space(const Tensor& video) {
    Tensor out(video.shape());
    for (std::size_t i = 0; i < video.size(); ++i) out[i] = std::clamp(0.5f * (video[i] + 1.f), 0.f, 1.f);
    return out;
}

Tensor video_latent(const Tensor& video, int patch) { return encode(to_model_space(video), patch).tensor; }

Tensor reference_latent(const ReferenceSequence& ref, int patch) {
    const VideoDims d = video_dims(ref.video);
    Tensor v(ref.video.shape());
    for (int t = 0; t < d.frames; ++t) {
        if (!ref.presence[t]) continue;
        auto src = ref.video.slice(t);
        auto dst = v.slice(t);
        for (std::size_t i = 0; i < src.size(); ++i) dst[i] = 2.f * src[i] - 1.f;
    }
    return encode(v, patch).tensor;
}

Tensor presence_mask_latent(const ReferenceSequence& ref, int patch) {
    const VideoDims d = video_dims(ref.video);
    return presence_latent(ref.presence, d.height / patch, d.width / patch);
}

Tensor latent_to_video(const Tensor& latent, int patch) {
    DecodeDiagnostics diag;  // chunk-0 replicas are averaged; expected for sampled latents
    return from_model_space(decode({latent, patch}, &diag));
}

Tensor decompose(const Renderer& inverse, const Tensor& rgb, ModalityId modality, const diffusion::SamplerConfig& sampler) {
    require_task(inverse, TaskMode::Inverse, "decompose");
    require_dims(inverse, video_dims(rgb));
    const int p = inverse.model.config().patch;
    diffusion::Conditioning c;
    c.cond = video_latent(rgb, p);
    c.mode = TaskMode::Inverse;
    c.target = modality;
    const Tensor x0 = diffusion::euler_sample(inverse.model, c, with_seed(sampler, derive_seed(sampler.seed, "decompose", code(modality))));
    return latent_to_video(x0, p);
}

IntrinsicStack decompose_all(const Renderer& inverse, const Tensor& rgb, const diffusion::SamplerConfig& sampler) {
    IntrinsicStack out;
    for (ModalityId m : kAllModalities) out.channel(m) = decompose(inverse, rgb, m, sampler);
    return out;
}

Tensor render_video(const Renderer& forward, const ConditioningPlan& plan, const ReferenceSequence& reference,
                    const diffusion::SamplerConfig& sampler) {
    require_task(forward, TaskMode::Forward, "render");
    const VideoDims d = video_dims(plan.video);
    require_dims(forward, d);
    if (plan.frames() != d.frames) throw ValidationError("plan", "modality list length differs from the conditioning video");
    if (reference.video.shape() != plan.video.shape() || static_cast<int>(reference.presence.size()) != d.frames)
        throw ValidationError("reference", "dims differ from the conditioning video");
    const int p = forward.model.config().patch;
    diffusion::Conditioning c;
    c.cond = video_latent(plan.video, p);
    c.ref = reference_latent(reference, p);
    c.mask = presence_mask_latent(reference, p);
    c.mode = TaskMode::Forward;
    c.plan = plan.modality;
    const Tensor x0 = diffusion::euler_sample(forward.model, c, with_seed(sampler, derive_seed(sampler.seed, "render")));
    return latent_to_video(x0, p);
}

PropagationResult propagate_edit(const Renderer& inverse, const Renderer& forward, const Tensor& input,
                                 const EditSpec& edit, const diffusion::SamplerConfig& sampler, std::uint64_t seed,
                                 PropagationOptions options) {
    const VideoDims d = video_dims(input);
    edit.validate(d);
    PropagationResult r;
    r.decomposed = decompose_all(inverse, input, with_seed(sampler, seed));
    r.plan = sample_plan(d.frames, edit, r.decomposed, seed, options.plan);
    r.plan.video = assemble_conditioning(r.plan, r.decomposed, edit);
    std::vector<std::pair<int, Tensor>> keyframes;
    if (edit.empty()) {
        keyframes.emplace_back(0, Tensor({3, d.height, d.width}, std::vector<float>(input.slice(0).begin(), input.slice(0).end())));
    } else {
        for (const auto& k : edit.keyframes) keyframes.emplace_back(k.frame, k.rgb);
    }
    r.reference = build_reference(keyframes, d);
    r.video = render_video(forward, r.plan, r.reference, with_seed(sampler, seed));
    return r;
}

PropagationResult cycle(const Renderer& inverse, const Renderer& forward, const Tensor& rgb,
                        const diffusion::SamplerConfig& sampler, std::uint64_t seed) {
    const VideoDims d = video_dims(rgb);
    PropagationResult r;
    r.decomposed = decompose_all(inverse, rgb, with_seed(sampler, seed));
    r.plan = sample_plan(d.frames, EditSpec{}, r.decomposed, seed);
    r.plan.video = assemble_conditioning(r.plan, r.decomposed, EditSpec{});
    Tensor first({3, d.height, d.width});
    std::copy(rgb.slice(0).begin(), rgb.slice(0).end(), first.values().begin());
    r.reference = build_reference({{0, first}}, d);
    r.video = render_video(forward, r.plan, r.reference, with_seed(sampler, seed));
    return r;
}

Tensor repeat_first_frame(const Tensor& video) {
    const VideoDims d = video_dims(video);
    Tensor out(video.shape());
    for (int t = 0; t < d.frames; ++t) std::copy(video.slice(0).begin(), video.slice(0).end(), out.slice(t).begin());
    return out;
}

double intrinsic_psnr(ModalityId modality, const Tensor& pred, const Tensor& gt) {
    if (modality == ModalityId::Albedo) return metrics::psnr(metrics::albedo_scale(pred, gt).scaled, gt);
    return metrics::psnr(pred, gt);
}

}  // namespace vrgbx
