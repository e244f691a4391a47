// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrgbx/latentizer.hpp"
#include "vrgbx/modality.hpp"
#include "vrgbx/tensor.hpp"

namespace vrgbx {

struct ModelConfig {
    int model_width = 128;
    int layers = 4;
    int heads = 4;
    int patch = 4;
    int tie_width = 32;  // d; 4d must equal model_width
    int mlp_ratio = 4;
    int frames = 17;
    int height = 64;
    int width = 64;
    std::uint64_t param_seed = 0;
    double gamma = 1.0;  // TIE modulation scale

    void validate() const;
    int chunks() const { return chunk_count(frames); }
    int latent_channels() const { return vrgbx::latent_channels(patch); }
    int latent_height() const { return height / patch; }
    int latent_width() const { return width / patch; }
    int tokens_per_chunk() const { return latent_height() * latent_width(); }
    int tokens() const { return chunks() * tokens_per_chunk(); }
    /// [noisy | cond | ref | presence mask]
    int input_channels() const { return 3 * latent_channels() + kSlotsPerChunk; }
    VideoDims video() const { return {frames, height, width}; }

    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class TaskMode { Inverse, Forward };

std::string to_string(TaskMode mode);
TaskMode task_mode_from_string(const std::string& s);

/// Concatenates [noisy, cond, ref, mask] along channels. All latents are
/// [K, C, H', W']; mask is [K, 4, H', W'].
template <typename Real>
BasicTensor<Real> build_model_input(const BasicTensor<Real>& noisy, const BasicTensor<Real>& cond,
                                    const BasicTensor<Real>& ref, const BasicTensor<Real>& mask);

template <typename Real>
struct ModelInput {
    BasicTensor<Real> z;  // [K, 3C+4, H', W']
    Real t = 0;
    TaskMode mode = TaskMode::Forward;
    std::vector<ModalityId> plan;  // forward mode: per-frame modality (TIE)
    ModalityId target = ModalityId::Albedo;  // inverse mode
};

class NonFiniteError : public std::runtime_error {
public:
    NonFiniteError(int layer, const std::string& where)
        : std::runtime_error("non-finite activation at layer " + std::to_string(layer) + " (" + where + ")"),
          layer_(layer) {}
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

struct ParamInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

/// Name, shape and offset of every trainable tensor in the flat buffer.
std::vector<ParamInfo> param_layout(const ModelConfig& config);

/// Diffusion transformer over lossless latent chunks. Inputs are patch-projected
/// token-wise, receive a fixed 3D sinusoidal position code and the TIE chunk
/// embedding, then pass through adaLN-Zero blocks (full self-attention + MLP)
/// conditioned on the timestep (plus the target-modality embedding in
/// inverse mode). The velocity head adds a timestep-gated per-channel copy of
/// the noisy input, so the noise component does not have to squeeze through
/// the token width.
template <typename Real>
class DiT {
public:
    struct BlockTape {
        std::vector<Real> h_in, n1, rstd1, a, qkv, probs, ctx, o, h1, n2, rstd2, m, u, g, f, mod;
    };
    /// Activations recorded by forward() for backward().
    struct Tape {
        std::vector<Real> x, temb0, a1, s1, temb, c;
        std::vector<BlockTape> blocks;
        std::vector<Real> h_final, nf, rstd_f, y, fmod, gain;
        TaskMode mode = TaskMode::Forward;
        std::vector<ModalityId> plan;
        ModalityId target = ModalityId::Albedo;
    };

    explicit DiT(const ModelConfig& config);

    const ModelConfig& config() const noexcept { return config_; }
    const std::vector<ParamInfo>& layout() const noexcept { return layout_; }
    std::span<Real> params() noexcept { return params_; }
    std::span<const Real> params() const noexcept { return params_; }
    std::span<Real> param(const std::string& name);
    std::span<const Real> param(const std::string& name) const;

    /// Velocity prediction [K, C, H', W']. With `tape`, activations needed by
    /// backward() are recorded.
    BasicTensor<Real> forward(const ModelInput<Real>& input, Tape* tape = nullptr) const;

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
    void backward(const Tape& tape, const BasicTensor<Real>& d_output, std::span<Real> grads) const;

    /// Fixed positional code, tokens x width. Tests may overwrite it.
    std::vector<Real>& positional_encoding() noexcept { return pos_; }

    /// Replaces every parameter (including zero-initialized ones) with
    /// N(0, sigma^2) draws; used by gradient checks.
    void randomize_all(std::uint64_t seed, double sigma);

private:
    void init_params();

    ModelConfig config_;
    std::vector<ParamInfo> layout_;
    std::vector<Real> params_;
    std::vector<Real> pos_;
};

/// Converts between precisions with an identical layout.
DiT<double> to_double(const DiT<float>& model);

}  // namespace vrgbx
