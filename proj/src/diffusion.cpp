// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/diffusion.hpp"

#include <cmath>
#include <sstream>

namespace vrgbx::diffusion {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                                    shape_string(b.shape()));
}

bool all_finite(const Tensor& x) {
    for (float v : x.values())
        if (!std::isfinite(v)) return false;
    return true;
}

bool all_zero(const Tensor& x) {
    for (float v : x.values())
        if (v != 0.f) return false;
    return true;
}

}  // namespace

Corruption corrupt(const Tensor& x0, float t, const Tensor& eps) {
    if (!(t >= 0.f && t <= 1.f)) throw std::invalid_argument("corrupt: t must lie in [0, 1]");
    require_same_shape(x0, eps, "corrupt");
    Corruption out{Tensor(x0.shape()), Tensor(x0.shape())};
    for (std::size_t i = 0; i < x0.size(); ++i) {
        out.x_t[i] = (1.f - t) * x0[i] + t * eps[i];
        out.v[i] = eps[i] - x0[i];
    }
    return out;
}

Corruption corrupt(const Tensor& x0, float t, Rng& rng) {
    Tensor eps(x0.shape());
    rng.fill_normal(eps.span());
    return corrupt(x0, t, eps);
}

Tensor recover_data(const Tensor& x_t, const Tensor& v, float t) {
    require_same_shape(x_t, v, "recover_data");
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x_t[i] - t * v[i];
    return out;
}

Tensor recover_noise(const Tensor& x_t, const Tensor& v, float t) {
    require_same_shape(x_t, v, "recover_noise");
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x_t[i] + (1.f - t) * v[i];
    return out;
}

Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, float scale) {
    require_same_shape(uncond, cond, "cfg_combine");
    if (scale == 1.f) return cond;
    if (scale == 0.f) return uncond;
    Tensor out(cond.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
    return out;
}

void SamplerConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("sampler.steps: must be at least 1");
    if (!(cfg_scale >= 0.f) || !std::isfinite(cfg_scale)) throw std::invalid_argument("sampler.cfg_scale: must be >= 0");
}

Tensor euler_integrate(const Tensor& x1, const VelocityFn& velocity, const EulerOptions& options) {
    if (options.steps < 1) throw std::invalid_argument("sampler.steps: must be at least 1");
    Tensor x = x1;
    const bool need_uncond = options.guided && options.cfg_scale != 1.f;
    const bool need_cond = !(options.guided && options.cfg_scale == 0.f);
    for (int i = 0; i < options.steps; ++i) {
        const double t_now = 1.0 - static_cast<double>(i) / options.steps;
        const double t_next = 1.0 - static_cast<double>(i + 1) / options.steps;
        const float t = static_cast<float>(t_now);
        Tensor v;
        if (need_cond && need_uncond) {
            v = cfg_combine(velocity(x, t, Branch::Unconditional), velocity(x, t, Branch::Conditional), options.cfg_scale);
        } else if (need_cond) {
            v = velocity(x, t, Branch::Conditional);
        } else {
            v = velocity(x, t, Branch::Unconditional);
        }
        require_same_shape(x, v, "velocity");
        const float dt = static_cast<float>(t_next - t_now);
        for (std::size_t j = 0; j < x.size(); ++j) x[j] += dt * v[j];
        if (!all_finite(x)) throw SamplerError(i, "non-finite state");
    }
    return x;
}

Tensor euler_sample(const DiT<float>& model, const Conditioning& c, const SamplerConfig& config) {
    config.validate();
    const ModelConfig& mc = model.config();
    const std::vector<int> latent{mc.chunks(), mc.latent_channels(), mc.latent_height(), mc.latent_width()};
    if (c.cond.shape() != latent)
        throw std::invalid_argument("conditioning latent " + shape_string(c.cond.shape()) + " does not match model " +
                                    shape_string(latent));
    Tensor zero_ref(latent);
    Tensor zero_mask({mc.chunks(), kSlotsPerChunk, mc.latent_height(), mc.latent_width()});
    const Tensor& ref = c.ref.empty() ? zero_ref : c.ref;
    const Tensor& mask = c.mask.empty() ? zero_mask : c.mask;
    const bool has_reference = !(all_zero(ref) && all_zero(mask));

    ModelInput<float> in;
    in.mode = c.mode;
    in.plan = c.plan;
    in.target = c.target;
    const VelocityFn fn = [&](const Tensor& x_t, float t, Branch branch) {
        const bool uncond = branch == Branch::Unconditional;
        in.z = build_model_input(x_t, c.cond, uncond ? zero_ref : ref, uncond ? zero_mask : mask);
        in.t = t;
        return model.forward(in);
    };

    Tensor x1(latent);
    Rng noise(derive_seed(config.seed, "sampler-noise"));
    noise.fill_normal(x1.span());
    return euler_integrate(x1, fn, {config.steps, config.cfg_scale, has_reference});
}

LossResult training_loss(const DiT<float>& model, const Tensor& x0, const Conditioning& c, Rng& rng,
                         DiT<float>::Tape* tape) {
    LossResult r;
    r.t = static_cast<float>(rng.uniform());
    Corruption k = corrupt(x0, r.t, rng);
    ModelInput<float> in;
    in.z = build_model_input(k.x_t, c.cond, c.ref, c.mask);
    in.t = r.t;
    in.mode = c.mode;
    in.plan = c.plan;
    in.target = c.target;
    try {
        r.prediction = model.forward(in, tape);
    } catch (const NonFiniteError& e) {
        throw NonFiniteLossError(std::string(e.what()) + " (t=" + std::to_string(r.t) + ")");
    }
    r.target = std::move(k.v);
    double sum = 0;
    for (std::size_t i = 0; i < r.target.size(); ++i) {
        const double d = static_cast<double>(r.prediction[i]) - r.target[i];
        sum += d * d;
    }
    r.loss = sum / static_cast<double>(r.target.size());
    if (!std::isfinite(r.loss)) {
        std::ostringstream msg;
        msg << "non-finite training loss (t=" << r.t << ", mode=" << to_string(c.mode)
            << ", latent=" << shape_string(x0.shape()) << ")";
        throw NonFiniteLossError(msg.str());
    }
    return r;
}

Tensor mse_gradient(const Tensor& prediction, const Tensor& target) {
    require_same_shape(prediction, target, "mse_gradient");
    Tensor g(prediction.shape());
    const float scale = 2.f / static_cast<float>(prediction.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = scale * (prediction[i] - target[i]);
    return g;
}

}  // namespace vrgbx::diffusion
