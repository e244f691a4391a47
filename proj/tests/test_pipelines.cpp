// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "vrgbx/metrics.hpp"
#include "vrgbx/pipelines.hpp"

using namespace vrgbx;

namespace {

Renderer random_renderer(TaskMode task, std::uint64_t seed) {
    const ModelConfig cfg = oracle::tiny_config();
    DiT<double> reference(cfg);
    reference.randomize_all(seed, 0.1);
    Renderer r{task, DiT<float>(cfg)};
    for (std::size_t i = 0; i < r.model.params().size(); ++i) r.model.params()[i] = static_cast<float>(reference.params()[i]);
    return r;
}

const VideoDims kDims{5, 8, 8};

diffusion::SamplerConfig fast_sampler() {
    diffusion::SamplerConfig s;
    s.steps = 3;
    s.cfg_scale = 1.5f;
    return s;
}

void expect_unit_range(const Tensor& v) {
    for (float x : v.values()) {
        ASSERT_TRUE(std::isfinite(x));
        ASSERT_GE(x, 0.f);
        ASSERT_LE(x, 1.f);
    }
}

}  // namespace

TEST(Pipelines, BuildReferenceExamples) {
    const Tensor img = oracle::random_tensor({3, 8, 8}, 1);
    const VideoDims dims{17, 8, 8};
    const ReferenceSequence one = build_reference({{0, img}}, dims);
    EXPECT_EQ(one.presence[0], 1);
    EXPECT_EQ(one.keyframe_count(), 1);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(one.video.slice(0)[i], img[i]);
    for (int t = 1; t < 17; ++t)
        for (float v : one.video.slice(t)) ASSERT_EQ(v, 0.f);

    const ReferenceSequence none = build_reference({}, dims);
    EXPECT_EQ(none.keyframe_count(), 0);
    for (float v : none.video.values()) ASSERT_EQ(v, 0.f);

    const ReferenceSequence two = build_reference({{0, img}, {8, img}}, dims);
    for (int t = 0; t < 17; ++t) {
        bool nonzero = false;
        for (float v : two.video.slice(t)) nonzero |= v != 0.f;
        EXPECT_EQ(nonzero, t == 0 || t == 8) << t;
        EXPECT_EQ(two.presence[t], t == 0 || t == 8);
    }
}

TEST(Pipelines, BuildReferenceErrors) {
    const Tensor img = oracle::random_tensor({3, 8, 8}, 2);
    EXPECT_THROW(build_reference({{0, img}, {0, img}}, kDims), ValidationError);
    EXPECT_THROW(build_reference({{5, img}}, kDims), ValidationError);
    EXPECT_THROW(build_reference({{-1, img}}, kDims), ValidationError);
    EXPECT_THROW(build_reference({{1, Tensor({3, 4, 8})}}, kDims), ValidationError);
}

TEST(Pipelines, ModelSpaceRoundTrip) {
    const Tensor v = oracle::random_tensor({5, 3, 8, 8}, 3);
    const Tensor back = from_model_space(to_model_space(v));
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(back[i], v[i], 1e-7);
    EXPECT_EQ(latent_to_video(video_latent(v, 2), 2).shape(), v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(latent_to_video(video_latent(v, 2), 2)[i], v[i], 1e-7);
}

TEST(Pipelines, ReferenceLatentIgnoresAbsentFrames) {
    const Tensor img = oracle::random_tensor({3, 8, 8}, 4);
    ReferenceSequence ref = build_reference({{2, img}}, kDims);
    const Tensor a = reference_latent(ref, 2);
    // Absent frames are zero in model space too, not -1.
    const auto pos = oracle::latent_position(0, 0, 0, 0, 2);
    EXPECT_EQ(a.at(pos[0], pos[1], pos[2], pos[3]), 0.f);
    const auto key = oracle::latent_position(2, 1, 3, 5, 2);
    EXPECT_FLOAT_EQ(a.at(key[0], key[1], key[2], key[3]), 2.f * img[(1 * 8 + 3) * 8 + 5] - 1.f);
}

TEST(Pipelines, DecomposeIsDeterministicAndBounded) {
    const Renderer inverse = random_renderer(TaskMode::Inverse, 5);
    const Tensor rgb = oracle::random_tensor({5, 3, 8, 8}, 6);
    const Tensor a = decompose(inverse, rgb, ModalityId::Normal, fast_sampler());
    EXPECT_EQ(a.shape(), rgb.shape());
    expect_unit_range(a);
    EXPECT_EQ(decompose(inverse, rgb, ModalityId::Normal, fast_sampler()), a);
    EXPECT_NE(decompose(inverse, rgb, ModalityId::Albedo, fast_sampler()), a);
}

TEST(Pipelines, TaskAndDimMismatchesAreErrors) {
    const Renderer inverse = random_renderer(TaskMode::Inverse, 7);
    const Renderer forward = random_renderer(TaskMode::Forward, 8);
    const Tensor rgb = oracle::random_tensor({5, 3, 8, 8}, 9);
    EXPECT_THROW(decompose(forward, rgb, ModalityId::Albedo, fast_sampler()), std::invalid_argument);
    EXPECT_THROW(decompose(inverse, oracle::random_tensor({9, 3, 8, 8}, 9), ModalityId::Albedo, fast_sampler()),
                 std::invalid_argument);
    ConditioningPlan plan = make_eval_plan(5, FullRandom{}, 1);
    plan.video = rgb;
    EXPECT_THROW(render_video(inverse, plan, build_reference({}, kDims), fast_sampler()), std::invalid_argument);
    EXPECT_THROW(render_video(forward, plan, build_reference({}, {5, 8, 16}), fast_sampler()), ValidationError);
}

TEST(Pipelines, RenderWithoutKeyframesIsFinite) {
    const Renderer forward = random_renderer(TaskMode::Forward, 10);
    ConditioningPlan plan = make_eval_plan(5, FullRandom{}, 2);
    plan.video = oracle::random_tensor({5, 3, 8, 8}, 11);
    diffusion::SamplerConfig s = fast_sampler();
    s.cfg_scale = 0.f;
    const Tensor out = render_video(forward, plan, build_reference({}, kDims), s);
    EXPECT_EQ(out.shape(), plan.video.shape());
    expect_unit_range(out);
}

TEST(Pipelines, EmptyEditEqualsCycle) {
    const Renderer inverse = random_renderer(TaskMode::Inverse, 12);
    const Renderer forward = random_renderer(TaskMode::Forward, 13);
    const Tensor rgb = oracle::random_tensor({5, 3, 8, 8}, 14);
    for (std::uint64_t seed : {1u, 2u}) {
        const PropagationResult a = propagate_edit(inverse, forward, rgb, EditSpec{}, fast_sampler(), seed);
        const PropagationResult b = cycle(inverse, forward, rgb, fast_sampler(), seed);
        EXPECT_EQ(a.video, b.video);
        EXPECT_EQ(a.plan.modality, b.plan.modality);
        EXPECT_EQ(a.reference.presence, b.reference.presence);
        expect_unit_range(a.video);
    }
}

TEST(Pipelines, PropagationUsesEditedKeyframe) {
    const Renderer inverse = random_renderer(TaskMode::Inverse, 15);
    const Renderer forward = random_renderer(TaskMode::Forward, 16);
    const Tensor rgb = oracle::random_tensor({5, 3, 8, 8}, 17);
    EditSpec edit;
    KeyframeEdit k;
    k.frame = 0;
    k.modalities = ModalitySet{ModalityId::Albedo};
    k.intrinsics[ModalityId::Albedo] = oracle::random_tensor({3, 8, 8}, 18);
    k.rgb = oracle::random_tensor({3, 8, 8}, 19);
    edit.keyframes.push_back(k);
    const PropagationResult r = propagate_edit(inverse, forward, rgb, edit, fast_sampler(), 3);
    EXPECT_EQ(r.plan.modality[0], ModalityId::Albedo);
    EXPECT_EQ(r.plan.source[0], FrameSource::Edited);
    for (int t = 1; t < 5; ++t) EXPECT_NE(r.plan.modality[t], ModalityId::Albedo);
    for (std::size_t i = 0; i < k.rgb.size(); ++i) ASSERT_EQ(r.reference.video.slice(0)[i], k.rgb[i]);
    EXPECT_EQ(r.video.shape(), rgb.shape());
    expect_unit_range(r.video);
    EXPECT_EQ(propagate_edit(inverse, forward, rgb, edit, fast_sampler(), 3).video, r.video);
}

TEST(Pipelines, RepeatFirstFrameAndIntrinsicPsnr) {
    const Tensor v = oracle::random_tensor({5, 3, 8, 8}, 20);
    const Tensor r = repeat_first_frame(v);
    for (int t = 0; t < 5; ++t)
        for (std::size_t i = 0; i < v.slice(0).size(); ++i) ASSERT_EQ(r.slice(t)[i], v.slice(0)[i]);
    Tensor half = v;
    for (float& x : half.span()) x *= 0.5f;
    EXPECT_GT(intrinsic_psnr(ModalityId::Albedo, half, v), 90.0);  // scale-invariant
    EXPECT_LT(intrinsic_psnr(ModalityId::Irradiance, half, v), 30.0);
}
