// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "vrgbx/conditioning.hpp"
#include "vrgbx/diffusion.hpp"
#include "vrgbx/dit_model.hpp"
#include "vrgbx/scene_oracle.hpp"

namespace vrgbx {

/// A trained backbone together with the task it was trained for.
struct Renderer {
    TaskMode task;
    DiT<float> model;
};

/// Keyframe RGB images at their frame indices, zeros elsewhere.
struct ReferenceSequence {
    Tensor video;                       // [T, 3, H, W]
    std::vector<std::uint8_t> presence;  // one flag per frame

    int keyframe_count() const;
};

/// `keyframes` pairs a 0-based frame index with a [3, H, W] image.
ReferenceSequence build_reference(const std::vector<std::pair<int, Tensor>>& keyframes, VideoDims dims);

/// Pixel values in [0,1] map to [-1,1] in model space.
Tensor to_model_space(const Tensor& video);
Tensor from_model_space(const Tensor& video);

/// Model-space latents of the pipeline inputs.
Tensor video_latent(const Tensor& video, int patch);
Tensor reference_latent(const ReferenceSequence& ref, int patch);
Tensor presence_mask_latent(const ReferenceSequence& ref, int patch);

/// Decodes a model-space latent back to a clamped [0,1] video.
Tensor latent_to_video(const Tensor& latent, int patch);

/// RGB -> one intrinsic channel.
Tensor decompose(const Renderer& inverse, const Tensor& rgb, ModalityId modality, const diffusion::SamplerConfig& sampler);

/// RGB -> all four intrinsic channels, one sampler run per modality.
IntrinsicStack decompose_all(const Renderer& inverse, const Tensor& rgb, const diffusion::SamplerConfig& sampler);

/// Interleaved intrinsic conditioning (+ optional keyframes) -> RGB.
Tensor render_video(const Renderer& forward, const ConditioningPlan& plan, const ReferenceSequence& reference,
                    const diffusion::SamplerConfig& sampler);

struct PropagationResult {
    Tensor video;
    IntrinsicStack decomposed;
    ConditioningPlan plan;
    ReferenceSequence reference;
};

struct PropagationOptions {
    PlanOptions plan;
};

/// Decompose -> conflicted set -> plan -> assemble -> keyframe reference ->
/// render. An empty edit uses the input's first frame as the keyframe.
PropagationResult propagate_edit(const Renderer& inverse, const Renderer& forward, const Tensor& input,
                                 const EditSpec& edit, const diffusion::SamplerConfig& sampler, std::uint64_t seed,
                                 PropagationOptions options = {});

/// RGB -> X -> RGB with the first input frame as the keyframe.
PropagationResult cycle(const Renderer& inverse, const Renderer& forward, const Tensor& rgb,
                        const diffusion::SamplerConfig& sampler, std::uint64_t seed);

/// Baseline that repeats frame 0 for every frame.
Tensor repeat_first_frame(const Tensor& video);

/// PSNR of a decomposed channel against ground truth; albedo is compared
/// after per-channel least-squares scaling.
double intrinsic_psnr(ModalityId modality, const Tensor& pred, const Tensor& gt);

}  // namespace vrgbx
