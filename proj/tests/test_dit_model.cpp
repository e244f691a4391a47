// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "support/oracles.hpp"
#include "vrgbx/dit_model.hpp"

using namespace vrgbx;

namespace {

double analytic_vs_numeric(DiT<double>& model, const ModelInput<double>& in, std::size_t index, double* analytic_out,
                           double* numeric_out = nullptr) {
    typename DiT<double>::Tape tape;
    const auto out = model.forward(in, &tape);
    BasicTensor<double> d(out.shape());
    for (std::size_t i = 0; i < out.size(); ++i) d[i] = 2.0 * out[i] / static_cast<double>(out.size());
    std::vector<double> grads(model.params().size(), 0.0);
    model.backward(tape, d, grads);
    const double analytic = grads[index];

    const double h = 1e-3;
    const double saved = model.params()[index];
    model.params()[index] = saved + h;
    const double up = oracle::mean_square_output(model, in);
    model.params()[index] = saved - h;
    const double down = oracle::mean_square_output(model, in);
    model.params()[index] = saved;
    const double numeric = (up - down) / (2 * h);
    if (analytic_out) *analytic_out = analytic;
    if (numeric_out) *numeric_out = numeric;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-10});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace

TEST(ModelInput, ConcatenationOrderAndWidth) {
    const std::vector<int> s{2, 192, 4, 4};
    const Tensor noisy = oracle::random_tensor(s, 1), cond = oracle::random_tensor(s, 2), ref = oracle::random_tensor(s, 3);
    const Tensor mask = oracle::random_tensor({2, 4, 4, 4}, 4);
    const Tensor z = build_model_input(noisy, cond, ref, mask);
    ASSERT_EQ(z.dim(1), 3 * 192 + 4);
    for (int k = 0; k < 2; ++k)
        for (int c = 0; c < z.dim(1); ++c)
            for (int y = 0; y < 4; ++y)
                for (int x = 0; x < 4; ++x) {
                    const float got = z.at(k, c, y, x);
                    const float want = c < 192   ? noisy.at(k, c, y, x)
                                       : c < 384 ? cond.at(k, c - 192, y, x)
                                       : c < 576 ? ref.at(k, c - 384, y, x)
                                                 : mask.at(k, c - 576, y, x);
                    ASSERT_EQ(got, want);
                }
}

TEST(ModelInput, ZeroReferenceSlabStaysZero) {
    const std::vector<int> s{2, 12, 3, 3};
    const Tensor z = build_model_input(oracle::random_tensor(s, 1), oracle::random_tensor(s, 2), Tensor(s), Tensor({2, 4, 3, 3}));
    for (int k = 0; k < 2; ++k)
        for (int c = 24; c < 40; ++c)
            for (int i = 0; i < 9; ++i) EXPECT_EQ(z.at(k, c, i / 3, i % 3), 0.f);
}

TEST(ModelInput, ShapeMismatchNamesTensor) {
    const std::vector<int> s{2, 12, 3, 3};
    try {
        build_model_input(Tensor(s), Tensor(s), Tensor({2, 12, 3, 4}), Tensor({2, 4, 3, 3}));
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("ref"), std::string::npos);
    }
}

TEST(ModelConfig, RejectsInvalid) {
    ModelConfig c = oracle::tiny_config();
    c.heads = 5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = oracle::tiny_config();
    c.tie_width = 5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = oracle::tiny_config();
    c.frames = 6;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    EXPECT_EQ(model_config_from_json(to_json(oracle::tiny_config())), oracle::tiny_config());
}

TEST(DiT, OutputShapeAndDeterminism) {
    const ModelConfig c = oracle::tiny_config();
    DiT<float> model(c);
    model.randomize_all(3, 0.1);
    ModelInput<float> in;
    in.z = oracle::random_tensor({c.chunks(), c.input_channels(), c.latent_height(), c.latent_width()}, 5, -1, 1);
    in.t = 0.4f;
    in.plan.assign(c.frames, ModalityId::Normal);
    const Tensor a = model.forward(in);
    const Tensor b = model.forward(in);
    EXPECT_EQ(a.shape(), (std::vector<int>{c.chunks(), c.latent_channels(), c.latent_height(), c.latent_width()}));
    EXPECT_EQ(a, b);
}

TEST(DiT, ZeroInitializedHeadGivesZeroVelocity) {
    const ModelConfig c = oracle::tiny_config();
    DiT<float> model(c);
    ModelInput<float> in;
    in.z = oracle::random_tensor({c.chunks(), c.input_channels(), c.latent_height(), c.latent_width()}, 5, -1, 1);
    in.plan.assign(c.frames, ModalityId::Albedo);
    const Tensor v = model.forward(in);
    EXPECT_TRUE(std::all_of(v.values().begin(), v.values().end(), [](float x) { return x == 0.f; }));
    for (const auto& p : model.layout()) {
        if (p.name == "patch.weight") {
            const auto w = model.param(p.name);
            EXPECT_TRUE(std::any_of(w.begin(), w.end(), [](float x) { return x != 0.f; }));
            EXPECT_TRUE(std::all_of(w.begin(), w.end(), [](float x) { return std::abs(x) <= 0.04f; }));
        }
    }
}

TEST(DiT, GradientMatchesFiniteDifferences) {
    for (TaskMode mode : {TaskMode::Forward, TaskMode::Inverse}) {
        DiT<double> model(oracle::tiny_config());
        model.randomize_all(17, 0.2);
        const auto in = oracle::random_input(model.config(), mode, 23);
        Rng pick(99);
        int checked = 0;
        while (checked < 20) {
            const std::size_t index = static_cast<std::size_t>(pick.index(static_cast<int>(model.params().size())));
            double analytic = 0;
            double numeric = 0;
            const double rel = analytic_vs_numeric(model, in, index, &analytic, &numeric);
            if (std::abs(analytic) < 1e-12) {
                // Parameters unused in this mode (or key biases) must also be
                // flat numerically.
                EXPECT_LT(std::abs(numeric), 1e-9) << "param " << index;
                continue;
            }
            EXPECT_LT(rel, 1e-3) << "mode " << to_string(mode) << " param " << index << " analytic " << analytic;
            ++checked;
        }
    }
}

TEST(DiT, GradientCoversEveryTensor) {
    DiT<double> model(oracle::tiny_config());
    model.randomize_all(5, 0.2);
    for (TaskMode mode : {TaskMode::Forward, TaskMode::Inverse}) {
        const auto in = oracle::random_input(model.config(), mode, 8);
        for (const auto& p : model.layout()) {
            if (mode == TaskMode::Inverse && p.name == "tie.type_encoder") continue;
            if (mode == TaskMode::Forward && p.name == "modality_embed") continue;
            // Key biases shift every attention logit of a row equally, so their
            // gradient is exactly zero; probe query biases instead.
            std::size_t index = p.name.ends_with("qkv.bias") ? p.offset + 1 : p.offset + p.size / 2;
            if (p.name == "modality_embed") index = p.offset + static_cast<std::size_t>(code(in.target)) * 24 + 3;
            if (p.name == "tie.type_encoder") index = p.offset + 4 * 2 + code(in.plan[0]);
            const double rel = analytic_vs_numeric(model, in, index, nullptr);
            EXPECT_LT(rel, 1e-3) << p.name << " (" << to_string(mode) << ")";
        }
    }
}

TEST(DiT, SpatialPermutationEquivariance) {
    ModelConfig c = oracle::tiny_config();
    DiT<double> model(c);
    model.randomize_all(31, 0.2);
    std::fill(model.positional_encoding().begin(), model.positional_encoding().end(), 0.0);
    auto in = oracle::random_input(c, TaskMode::Forward, 4);
    const auto out = model.forward(in);

    const int S = c.tokens_per_chunk();
    std::vector<int> perm(S);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(2);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    auto permute = [&](const BasicTensor<double>& x) {
        BasicTensor<double> y(x.shape());
        for (int k = 0; k < x.dim(0); ++k)
            for (int ch = 0; ch < x.dim(1); ++ch)
                for (int s = 0; s < S; ++s)
                    y[(static_cast<std::size_t>(k) * x.dim(1) + ch) * S + perm[s]] =
                        x[(static_cast<std::size_t>(k) * x.dim(1) + ch) * S + s];
        return y;
    };
    in.z = permute(in.z);
    const auto out_p = model.forward(in);
    const auto expected = permute(out);
    for (std::size_t i = 0; i < out_p.size(); ++i) ASSERT_NEAR(out_p[i], expected[i], 1e-10);
}

TEST(DiT, HeadOutputIsLinearInHeadWeights) {
    const ModelConfig c = oracle::tiny_config();
    DiT<double> model(c);
    model.randomize_all(41, 0.2);
    const auto in = oracle::random_input(c, TaskMode::Inverse, 6);
    auto head = model.param("head.weight");
    const std::vector<double> w0(head.begin(), head.end());
    const auto base = model.forward(in);
    for (auto& v : head) v *= 2;
    const auto doubled = model.forward(in);
    std::fill(head.begin(), head.end(), 0.0);
    const auto zero = model.forward(in);
    std::copy(w0.begin(), w0.end(), head.begin());
    for (std::size_t i = 0; i < base.size(); ++i) ASSERT_NEAR(doubled[i] - zero[i], 2 * (base[i] - zero[i]), 1e-10);
}

TEST(DiT, ZeroedReferenceSlabHasNoHiddenState) {
    const ModelConfig c = oracle::tiny_config();
    DiT<float> model(c);
    model.randomize_all(3, 0.1);
    ModelInput<float> in;
    in.z = oracle::random_tensor({c.chunks(), c.input_channels(), c.latent_height(), c.latent_width()}, 5, -1, 1);
    in.plan.assign(c.frames, ModalityId::Irradiance);
    const int C = c.latent_channels();
    auto zero_ref = [&](ModelInput<float>& x) {
        for (int k = 0; k < c.chunks(); ++k)
            for (int ch = 2 * C; ch < c.input_channels(); ++ch)
                for (int y = 0; y < c.latent_height(); ++y)
                    for (int xx = 0; xx < c.latent_width(); ++xx) x.z.at(k, ch, y, xx) = 0.f;
    };
    zero_ref(in);
    const Tensor a = model.forward(in);
    ModelInput<float> garbage = in;
    const Tensor scribble = oracle::random_tensor(in.z.shape(), 77, -3, 3);
    for (std::size_t i = 0; i < garbage.z.size(); ++i) garbage.z[i] = scribble[i];
    (void)model.forward(garbage);
    garbage = in;
    for (int k = 0; k < c.chunks(); ++k)
        for (int ch = 2 * C; ch < c.input_channels(); ++ch)
            for (int y = 0; y < c.latent_height(); ++y)
                for (int xx = 0; xx < c.latent_width(); ++xx) garbage.z.at(k, ch, y, xx) = scribble.at(k, ch, y, xx);
    (void)model.forward(garbage);
    zero_ref(garbage);
    EXPECT_EQ(model.forward(garbage), a);
}

TEST(DiT, NonFiniteActivationReportsLayer) {
    const ModelConfig c = oracle::tiny_config();
    DiT<float> model(c);
    model.randomize_all(3, 0.1);
    auto w = model.param("blocks.1.fc2.bias");
    w[0] = std::numeric_limits<float>::infinity();
    ModelInput<float> in;
    in.z = Tensor({c.chunks(), c.input_channels(), c.latent_height(), c.latent_width()});
    in.plan.assign(c.frames, ModalityId::Albedo);
    try {
        (void)model.forward(in);
        FAIL();
    } catch (const NonFiniteError& e) {
        EXPECT_EQ(e.layer(), 1);
    }
}

TEST(DiT, TaskModeNeedsPlanInForwardMode) {
    const ModelConfig c = oracle::tiny_config();
    DiT<float> model(c);
    ModelInput<float> in;
    in.z = Tensor({c.chunks(), c.input_channels(), c.latent_height(), c.latent_width()});
    EXPECT_THROW((void)model.forward(in), std::invalid_argument);
    in.mode = TaskMode::Inverse;
    EXPECT_NO_THROW((void)model.forward(in));
}
