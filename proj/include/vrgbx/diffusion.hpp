// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include "vrgbx/dit_model.hpp"
#include "vrgbx/rng.hpp"
#include "vrgbx/tensor.hpp"

// Rectified flow: x_t = (1 - t) x0 + t eps, velocity v = eps - x0, t = 0 is
// data and t = 1 is noise.

namespace vrgbx::diffusion {

struct Corruption {
    Tensor x_t;
    Tensor v;  // regression target
};

Corruption corrupt(const Tensor& x0, float t, const Tensor& eps);

/// Draws eps ~ N(0, I) from `rng`.
Corruption corrupt(const Tensor& x0, float t, Rng& rng);

/// x0 = x_t - t v
Tensor recover_data(const Tensor& x_t, const Tensor& v, float t);
/// eps = x_t + (1 - t) v
Tensor recover_noise(const Tensor& x_t, const Tensor& v, float t);

/// uncond + s (cond - uncond); s = 1 and s = 0 return the branch unchanged.
Tensor cfg_combine(const Tensor& uncond, const Tensor& cond, float scale);

struct SamplerConfig {
    int steps = 50;
    float cfg_scale = 1.5f;
    std::uint64_t seed = 0;

    void validate() const;
};

class SamplerError : public std::runtime_error {
public:
    SamplerError(int step, const std::string& what)
        : std::runtime_error("sampler step " + std::to_string(step) + ": " + what), step_(step) {}
    int step() const noexcept { return step_; }

private:
    int step_;
};

enum class Branch { Conditional, Unconditional };

/// Velocity at (x_t, t) for one guidance branch.
using VelocityFn = std::function<Tensor(const Tensor& x_t, float t, Branch branch)>;

struct EulerOptions {
    int steps = 50;
    float cfg_scale = 1.5f;
    /// False when both branches are identical (no reference), so only the
    /// conditional branch is evaluated.
    bool guided = true;
};

/// Uniform grid t_i = 1 - i/N; x <- x + (t_{i+1} - t_i) v(x, t_i).
Tensor euler_integrate(const Tensor& x1, const VelocityFn& velocity, const EulerOptions& options);

/// Model conditioning shared by both branches; the unconditional branch
/// zeros `ref` and `mask`.
struct Conditioning {
    Tensor cond;
    Tensor ref;
    Tensor mask;
    TaskMode mode = TaskMode::Forward;
    std::vector<ModalityId> plan;
    ModalityId target = ModalityId::Albedo;
};

/// Samples an x0 latent from the model. Initial noise comes from the
/// "sampler-noise" stream of `config.seed`.
Tensor euler_sample(const DiT<float>& model, const Conditioning& c, const SamplerConfig& config);

class NonFiniteLossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct LossResult {
    double loss = 0;
    float t = 0;
    Tensor prediction;
    Tensor target;
};

/// Draws t ~ U[0,1] and then eps from `rng`, predicts v and returns the mean
/// squared error. With `tape`, the forward activations are recorded.
LossResult training_loss(const DiT<float>& model, const Tensor& x0, const Conditioning& c, Rng& rng,
                         DiT<float>::Tape* tape = nullptr);

/// d(mean squared error)/d(prediction).
Tensor mse_gradient(const Tensor& prediction, const Tensor& target);

}  // namespace vrgbx::diffusion
