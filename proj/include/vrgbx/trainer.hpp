// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrgbx/diffusion.hpp"
#include "vrgbx/dit_model.hpp"
#include "vrgbx/pipelines.hpp"
#include "vrgbx/scene_oracle.hpp"

namespace vrgbx {

struct OptimizerConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int warmup_steps = 0;
    double grad_clip = 1.0;  // global norm; 0 disables
};

struct RunConfig {
    TaskMode task = TaskMode::Forward;
    std::filesystem::path dataset;
    ModelConfig model;
    OptimizerConfig optim;
    int steps = 6000;
    int batch_size = 1;
    double p_drop = 0.3;
    std::uint64_t seed = 0;  // also determines model.param_seed
    int checkpoint_every = 1000;
    std::filesystem::path out_dir;
    bool deterministic = false;
    int clip_begin = 0;  // training subset [clip_begin, clip_end) of the manifest
    int clip_end = -1;   // -1: through the last clip

    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults; relative paths resolve against `base`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base = {});

/// Loads dataset clips once and keeps them as 8-bit planes. Every disk read
/// is reported to `on_access` as (clip id, channel directory).
class ClipStore {
public:
    using AccessHook = std::function<void(const std::string& clip, const std::string& channel)>;

    ClipStore(std::filesystem::path root, AccessHook on_access = {});

    const DatasetManifest& manifest() const noexcept { return manifest_; }
    int size() const noexcept { return static_cast<int>(manifest_.clips.size()); }

    Tensor rgb(int clip);
    Tensor intrinsic(int clip, ModalityId m);
    IntrinsicStack intrinsics(int clip);

private:
    struct Packed {
        std::array<std::vector<std::uint8_t>, 1 + kModalityCount> planes;
        std::array<bool, 1 + kModalityCount> loaded{};
    };
    Tensor channel(int clip, int slot);

    std::filesystem::path root_;
    DatasetManifest manifest_;
    AccessHook on_access_;
    std::map<int, Packed> cache_;
};

struct TrainingSample {
    int clip = 0;
    Tensor x0;  // target latent, model space
    diffusion::Conditioning cond;
    std::vector<int> keyframes;  // 0-based, before dropout
    bool reference_dropped = false;
    Rng rng;  // continues into the diffusion draws (t, then eps)
};

struct Batch {
    int step = 0;
    std::vector<TrainingSample> samples;
};

/// Per-sample streams depend only on (seed, step, sample index).
Batch assemble_batch(const RunConfig& config, ClipStore& store, int step);

/// Cosine decay to zero after an optional linear warmup; `step` is 0-based.
double learning_rate(const OptimizerConfig& o, int step, int total_steps);

/// Decoupled-weight-decay Adam. Weight decay applies to ".weight" tensors.
class AdamW {
public:
    AdamW(const std::vector<ParamInfo>& layout, OptimizerConfig config);

    void step(std::span<float> params, std::span<const float> grads, double lr);

    std::vector<float>& m() noexcept { return m_; }
    std::vector<float>& v() noexcept { return v_; }
    const std::vector<float>& m() const noexcept { return m_; }
    const std::vector<float>& v() const noexcept { return v_; }
    std::int64_t& t() noexcept { return t_; }
    std::int64_t t() const noexcept { return t_; }

private:
    OptimizerConfig config_;
    std::vector<std::uint8_t> decay_;
    std::vector<float> m_;
    std::vector<float> v_;
    std::int64_t t_ = 0;
};

// Checkpoint file: u64 little-endian header length, JSON header, then raw
// little-endian float32 tensor data.
inline constexpr const char* kCheckpointFormat = "vrgbx-ckpt/1";

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    ModelConfig config;
    TaskMode task = TaskMode::Forward;
    std::vector<float> params;
    int step = 0;
    std::optional<std::int64_t> optimizer_t;  // present with optimizer moments
    std::vector<float> adam_m;
    std::vector<float> adam_v;
    nlohmann::json run = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loads parameters into a model built from `expected`; a checkpoint with a
/// different layout is refused with a per-tensor shape report.
Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

Renderer load_renderer(const std::filesystem::path& path);

struct TrainHooks {
    std::function<void(const Batch&)> on_batch;
    ClipStore::AccessHook on_access;
    std::function<void(int step, double loss)> on_step;
};

struct TrainResult {
    std::filesystem::path final_checkpoint;
    std::vector<double> losses;  // steps run by this call
};

/// Trains from scratch, or continues from `resume` (a checkpoint written by
/// an earlier run of the same config).
TrainResult train(const RunConfig& config, const TrainHooks& hooks = {},
                  const std::optional<std::filesystem::path>& resume = std::nullopt);

}  // namespace vrgbx
