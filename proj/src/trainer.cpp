// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/trainer.hpp"

#include <spdlog/spdlog.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "vrgbx/image_io.hpp"
#include "vrgbx/kernels.hpp"
#include "vrgbx/latentizer.hpp"
#include "vrgbx/rng.hpp"

namespace vrgbx {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void RunConfig::validate() const {
    model.validate();
    if (!(p_drop >= 0.0 && p_drop <= 1.0)) throw ValidationError("p_drop", "must lie in [0, 1]");
    if (steps < 1) throw ValidationError("steps", "must be at least 1");
    if (!(optim.lr > 0.0)) throw ValidationError("optim.lr", "must be positive");
    if (batch_size < 1) throw ValidationError("batch_size", "must be at least 1");
    if (checkpoint_every < 0) throw ValidationError("checkpoint_every", "must be non-negative");
    if (optim.warmup_steps < 0) throw ValidationError("optim.warmup_steps", "must be non-negative");
    if (clip_begin < 0 || (clip_end >= 0 && clip_end <= clip_begin))
        throw ValidationError("clip_end", "training clip range is empty");
}

json to_json(const RunConfig& c) {
    return {{"task", to_string(c.task)},
            {"dataset", c.dataset.string()},
            {"model", to_json(c.model)},
            {"optim",
             {{"lr", c.optim.lr},
              {"beta1", c.optim.beta1},
              {"beta2", c.optim.beta2},
              {"eps", c.optim.eps},
              {"weight_decay", c.optim.weight_decay},
              {"warmup_steps", c.optim.warmup_steps},
              {"grad_clip", c.optim.grad_clip}}},
            {"steps", c.steps},
            {"batch_size", c.batch_size},
            {"p_drop", c.p_drop},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"out_dir", c.out_dir.string()},
            {"deterministic", c.deterministic},
            {"clip_begin", c.clip_begin},
            {"clip_end", c.clip_end}};
}

RunConfig run_config_from_json(const json& j, const fs::path& base) {
    RunConfig c;
    auto path = [&](const char* key, fs::path& out) {
        if (!j.contains(key)) return;
        fs::path p = j.at(key).get<std::string>();
        out = p.is_relative() && !base.empty() ? base / p : p;
    };
    try {
        if (j.contains("task")) c.task = task_mode_from_string(j.at("task").get<std::string>());
        path("dataset", c.dataset);
        path("out_dir", c.out_dir);
        if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
        if (j.contains("optim")) {
            const json& o = j.at("optim");
            c.optim.lr = o.value("lr", c.optim.lr);
            c.optim.beta1 = o.value("beta1", c.optim.beta1);
            c.optim.beta2 = o.value("beta2", c.optim.beta2);
            c.optim.eps = o.value("eps", c.optim.eps);
            c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
            c.optim.warmup_steps = o.value("warmup_steps", c.optim.warmup_steps);
            c.optim.grad_clip = o.value("grad_clip", c.optim.grad_clip);
        }
        c.steps = j.value("steps", c.steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.p_drop = j.value("p_drop", c.p_drop);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.deterministic = j.value("deterministic", c.deterministic);
        c.clip_begin = j.value("clip_begin", c.clip_begin);
        c.clip_end = j.value("clip_end", c.clip_end);
    } catch (const json::exception& e) {
        throw ValidationError("config", e.what());
    }
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Dataset access

ClipStore::ClipStore(fs::path root, AccessHook on_access) : root_(std::move(root)), on_access_(std::move(on_access)) {
    manifest_ = load_manifest(root_);
    for (std::size_t i = 0; i < manifest_.clips.size(); ++i)
        if (!manifest_.clips[i].valid)
            throw ValidationError("manifest.clips[" + std::to_string(i) + "]", "clip is marked invalid");
}

Tensor ClipStore::channel(int clip, int slot) {
    if (clip < 0 || clip >= size()) throw std::out_of_range("clip index " + std::to_string(clip) + " outside the dataset");
    Packed& p = cache_[clip];
    const VideoDims d = manifest_.dims;
    if (!p.loaded[slot]) {
        const std::string id = manifest_.clips[clip].id;
        const std::string name = slot == 0 ? "rgb" : std::string(to_string(modality_from_code(slot - 1)));
        if (on_access_) on_access_(id, name);
        const Tensor v = read_video(root_ / id / name, d.frames);
        if (video_dims(v) != d) throw IoError(root_ / id / name, "frames disagree with the manifest dims");
        p.planes[slot].resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) p.planes[slot][i] = static_cast<std::uint8_t>(std::lround(v[i] * 255.f));
        p.loaded[slot] = true;
    }
    Tensor out(d.shape());
    const auto& plane = p.planes[slot];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = plane[i] / 255.f;
    return out;
}

Tensor ClipStore::rgb(int clip) { return channel(clip, 0); }

Tensor ClipStore::intrinsic(int clip, ModalityId m) { return channel(clip, 1 + code(m)); }

IntrinsicStack ClipStore::intrinsics(int clip) {
    IntrinsicStack s;
    for (ModalityId m : kAllModalities) s.channel(m) = intrinsic(clip, m);
    return s;
}

// ---------------------------------------------------------------------------
// Batches

namespace {

std::pair<int, int> clip_range(const RunConfig& c, const ClipStore& store) {
    const int end = c.clip_end < 0 ? store.size() : c.clip_end;
    if (end > store.size() || c.clip_begin >= end)
        throw ValidationError("clip_end", "training range [" + std::to_string(c.clip_begin) + ", " + std::to_string(end) +
                                              ") does not fit a dataset of " + std::to_string(store.size()) + " clips");
    return {c.clip_begin, end};
}

}  // namespace

Batch assemble_batch(const RunConfig& config, ClipStore& store, int step) {
    const auto [begin, end] = clip_range(config, store);
    const ModelConfig& mc = config.model;
    const int p = mc.patch;
    Batch batch;
    batch.step = step;
    for (int i = 0; i < config.batch_size; ++i) {
        TrainingSample s;
        s.rng = Rng(derive_seed(config.seed, "sample", static_cast<std::uint64_t>(step) * config.batch_size + i));
        s.clip = begin + s.rng.index(end - begin);
        s.cond.mode = config.task;
        if (config.task == TaskMode::Inverse) {
            s.cond.target = modality_from_code(s.rng.index(kModalityCount));
            s.x0 = video_latent(store.intrinsic(s.clip, s.cond.target), p);
            s.cond.cond = video_latent(store.rgb(s.clip), p);
            s.cond.ref = Tensor(s.x0.shape());
            s.cond.mask = Tensor({mc.chunks(), kSlotsPerChunk, mc.latent_height(), mc.latent_width()});
        } else {
            const Tensor rgb = store.rgb(s.clip);
            const IntrinsicStack gt = store.intrinsics(s.clip);
            ConditioningPlan plan = make_eval_plan(mc.frames, FullRandom{}, s.rng.engine()());
            plan.video = assemble_conditioning(plan, gt, EditSpec{});
            const int n_keys = 1 + s.rng.index(2);
            while (static_cast<int>(s.keyframes.size()) < n_keys) {
                const int f = s.rng.index(mc.frames);
                if (std::find(s.keyframes.begin(), s.keyframes.end(), f) == s.keyframes.end()) s.keyframes.push_back(f);
            }
            std::sort(s.keyframes.begin(), s.keyframes.end());
            s.reference_dropped = s.rng.bernoulli(config.p_drop);
            std::vector<std::pair<int, Tensor>> keys;
            if (!s.reference_dropped) {
                for (int f : s.keyframes) {
                    Tensor img({3, mc.height, mc.width});
                    std::copy(rgb.slice(f).begin(), rgb.slice(f).end(), img.values().begin());
                    keys.emplace_back(f, std::move(img));
                }
            }
            const ReferenceSequence ref = build_reference(keys, mc.video());
            s.x0 = video_latent(rgb, p);
            s.cond.cond = video_latent(plan.video, p);
            s.cond.ref = reference_latent(ref, p);
            s.cond.mask = presence_mask_latent(ref, p);
            s.cond.plan = plan.modality;
        }
        batch.samples.push_back(std::move(s));
    }
    return batch;
}

double learning_rate(const OptimizerConfig& o, int step, int total_steps) {
    if (o.warmup_steps > 0 && step < o.warmup_steps) return o.lr * (step + 1) / o.warmup_steps;
    const int span = std::max(1, total_steps - o.warmup_steps);
    const double progress = std::clamp(static_cast<double>(step - o.warmup_steps) / span, 0.0, 1.0);
    return o.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const std::vector<ParamInfo>& layout, OptimizerConfig config) : config_(config) {
    const std::size_t n = layout.empty() ? 0 : layout.back().offset + layout.back().size;
    decay_.assign(n, 0);
    m_.assign(n, 0.f);
    v_.assign(n, 0.f);
    for (const auto& p : layout)
        if (p.name.ends_with(".weight"))
            std::fill(decay_.begin() + static_cast<long>(p.offset), decay_.begin() + static_cast<long>(p.offset + p.size), 1);
}

void AdamW::step(std::span<float> params, std::span<const float> grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) throw std::invalid_argument("optimizer size mismatch");
    ++t_;
    const double b1 = config_.beta1;
    const double b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const float step_size = static_cast<float>(lr / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float decay = static_cast<float>(lr * config_.weight_decay);
    const float eps = static_cast<float>(config_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const float g = grads[i];
        m_[i] = static_cast<float>(b1) * m_[i] + static_cast<float>(1 - b1) * g;
        v_[i] = static_cast<float>(b2) * v_[i] + static_cast<float>(1 - b2) * g * g;
        if (decay_[i]) params[i] -= decay * params[i];
        params[i] -= step_size * m_[i] / (std::sqrt(v_[i] * inv_c2) + eps);
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

struct TensorEntry {
    std::vector<int> shape;
    std::size_t offset = 0;  // in floats, relative to the data section
    std::size_t count = 0;
};

void put_tensor(json& dir, std::vector<float>& data, const std::string& name, const std::vector<int>& shape,
                std::span<const float> values) {
    dir[name] = {{"dtype", "f32"}, {"shape", shape}, {"offset", data.size() * sizeof(float)}};
    data.insert(data.end(), values.begin(), values.end());
}

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    const auto layout = param_layout(ckpt.config);
    const std::size_t n = layout.back().offset + layout.back().size;
    if (ckpt.params.size() != n) throw CheckpointError("parameter count does not match the model config");
    const bool with_optim = ckpt.optimizer_t.has_value();
    if (with_optim && (ckpt.adam_m.size() != n || ckpt.adam_v.size() != n))
        throw CheckpointError("optimizer state size does not match the model config");

    json dir = json::object();
    std::vector<float> data;
    data.reserve(with_optim ? 3 * n : n);
    std::span<const float> all(ckpt.params);
    for (const auto& p : layout) put_tensor(dir, data, p.name, p.shape, all.subspan(p.offset, p.size));
    if (with_optim) {
        for (const auto& p : layout)
            put_tensor(dir, data, "optimizer.m." + p.name, p.shape, std::span<const float>(ckpt.adam_m).subspan(p.offset, p.size));
        for (const auto& p : layout)
            put_tensor(dir, data, "optimizer.v." + p.name, p.shape, std::span<const float>(ckpt.adam_v).subspan(p.offset, p.size));
    }
    json header = {{"format", kCheckpointFormat},
                   {"model", to_json(ckpt.config)},
                   {"task", to_string(ckpt.task)},
                   {"step", ckpt.step},
                   {"tensors", dir},
                   {"run", ckpt.run}};
    if (with_optim) header["optimizer"] = {{"t", *ckpt.optimizer_t}};
    const std::string text = header.dump();

    std::string bytes(8, '\0');
    const std::uint64_t len = text.size();
    std::memcpy(bytes.data(), &len, sizeof len);
    bytes += text;
    bytes.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
    write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::vector<unsigned char> bytes;
    try {
        bytes = read_file_bytes(path);
    } catch (const IoError& e) {
        throw CheckpointError(e.what());
    }
    const std::string where = path.string() + ": ";
    if (bytes.size() < 8) throw CheckpointError(where + "truncated file (no header length)");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data(), sizeof len);
    if (len > bytes.size() - 8) throw CheckpointError(where + "truncated file or corrupt header length");
    json header;
    try {
        header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(len));
    } catch (const json::exception& e) {
        throw CheckpointError(where + "header parse error: " + e.what());
    }
    const std::size_t data_begin = 8 + len;
    const std::size_t data_bytes = bytes.size() - data_begin;

    Checkpoint ck;
    std::map<std::string, TensorEntry> entries;
    try {
        const std::string format = header.at("format").get<std::string>();
        if (format != kCheckpointFormat)
            throw CheckpointError(where + "version mismatch: expected " + std::string(kCheckpointFormat) + ", found " + format);
        ck.config = model_config_from_json(header.at("model"));
        ck.task = task_mode_from_string(header.at("task").get<std::string>());
        ck.step = header.at("step").get<int>();
        if (header.contains("run")) ck.run = header.at("run");
        if (header.contains("optimizer")) ck.optimizer_t = header.at("optimizer").at("t").get<std::int64_t>();
        for (const auto& [name, e] : header.at("tensors").items()) {
            if (e.at("dtype").get<std::string>() != "f32") throw CheckpointError(where + name + ": unsupported dtype");
            TensorEntry t;
            t.shape = e.at("shape").get<std::vector<int>>();
            const std::size_t off = e.at("offset").get<std::size_t>();
            if (off % sizeof(float) != 0) throw CheckpointError(where + name + ": misaligned offset");
            t.offset = off / sizeof(float);
            t.count = BasicTensor<float>::count(t.shape);
            if (t.offset > data_bytes / sizeof(float) || t.count > data_bytes / sizeof(float) - t.offset)
                throw CheckpointError(where + name + ": data truncated");
            entries.emplace(name, std::move(t));
        }
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        throw CheckpointError(where + "invalid header: " + e.what());
    }

    const auto layout = param_layout(ck.config);
    const std::size_t n = layout.back().offset + layout.back().size;
    std::string mismatches;
    auto gather = [&](const std::string& prefix, std::vector<float>& out) {
        out.assign(n, 0.f);
        for (const auto& p : layout) {
            auto it = entries.find(prefix + p.name);
            if (it == entries.end()) {
                mismatches += " " + prefix + p.name + " missing;";
                continue;
            }
            if (it->second.shape != p.shape) {
                mismatches += " " + prefix + p.name + " has " + shape_string(it->second.shape) + ", expected " +
                              shape_string(p.shape) + ";";
                continue;
            }
            std::memcpy(out.data() + p.offset, bytes.data() + data_begin + it->second.offset * sizeof(float),
                        p.size * sizeof(float));
        }
    };
    gather("", ck.params);
    if (ck.optimizer_t) {
        gather("optimizer.m.", ck.adam_m);
        gather("optimizer.v.", ck.adam_v);
    }
    if (!mismatches.empty()) throw CheckpointError(where + "tensor directory inconsistent with its model config:" + mismatches);
    return ck;
}

Checkpoint load_checkpoint(const fs::path& path, const ModelConfig& expected) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.config == expected) return ck;
    const auto want = param_layout(expected);
    const auto have = param_layout(ck.config);
    std::map<std::string, std::vector<int>> have_shapes;
    for (const auto& p : have) have_shapes[p.name] = p.shape;
    std::string report;
    for (const auto& p : want) {
        auto it = have_shapes.find(p.name);
        if (it == have_shapes.end())
            report += " " + p.name + " missing;";
        else if (it->second != p.shape)
            report += " " + p.name + " checkpoint " + shape_string(it->second) + " vs model " + shape_string(p.shape) + ";";
    }
    if (report.empty()) report = " model config differs (" + to_json(ck.config).dump() + ")";
    throw CheckpointError(path.string() + ": shape mismatch:" + report);
}

Renderer load_renderer(const fs::path& path) {
    Checkpoint ck = load_checkpoint(path);
    Renderer r{ck.task, DiT<float>(ck.config)};
    std::copy(ck.params.begin(), ck.params.end(), r.model.params().begin());
    return r;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string checkpoint_name(int step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%06d.ckpt", step);
    return buf;
}

}  // namespace

TrainResult train(const RunConfig& config_in, const TrainHooks& hooks, const std::optional<fs::path>& resume) {
    RunConfig config = config_in;
    config.model.param_seed = derive_seed(config.seed, "model-params");
    config.validate();
    if (config.out_dir.empty()) throw ValidationError("out_dir", "required");
    if (config.deterministic) kernels::set_thread_count(1);

    // Validate the dataset before any step.
    ClipStore store(config.dataset, hooks.on_access);
    if (store.manifest().dims != config.model.video())
        throw ValidationError("dataset", "clip dims " + shape_string(store.manifest().dims.shape()) +
                                             " do not match the model config " + shape_string(config.model.video().shape()));
    (void)clip_range(config, store);

    std::error_code ec;
    fs::create_directories(config.out_dir, ec);
    if (ec) throw IoError(config.out_dir, "cannot create directory: " + ec.message());

    DiT<float> model(config.model);
    AdamW optim(model.layout(), config.optim);
    int start = 0;
    if (resume) {
        Checkpoint ck = load_checkpoint(*resume, config.model);
        if (ck.task != config.task) throw CheckpointError(resume->string() + ": checkpoint task differs from the run config");
        std::copy(ck.params.begin(), ck.params.end(), model.params().begin());
        if (ck.optimizer_t) {
            optim.m() = ck.adam_m;
            optim.v() = ck.adam_v;
            optim.t() = *ck.optimizer_t;
        }
        start = ck.step;
    }
    write_file_atomic(config.out_dir / "run_config.json", to_json(config).dump(2));

    std::ofstream log(config.out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError(config.out_dir / "train_log.jsonl", "cannot open for writing");

    auto snapshot = [&](int step) {
        Checkpoint ck;
        ck.config = config.model;
        ck.task = config.task;
        ck.params.assign(model.params().begin(), model.params().end());
        ck.step = step;
        ck.optimizer_t = optim.t();
        ck.adam_m = optim.m();
        ck.adam_v = optim.v();
        json run = to_json(config);
        run.erase("out_dir");
        run.erase("dataset");
        ck.run = run;
        return ck;
    };

    TrainResult result;
    std::vector<float> grads(model.params().size());
    DiT<float>::Tape tape;
    for (int step = start; step < config.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        Batch batch = assemble_batch(config, store, step);
        if (hooks.on_batch) hooks.on_batch(batch);
        std::fill(grads.begin(), grads.end(), 0.f);
        double loss = 0;
        for (auto& s : batch.samples) {
            diffusion::LossResult lr;
            try {
                lr = diffusion::training_loss(model, s.x0, s.cond, s.rng, &tape);
            } catch (const diffusion::NonFiniteLossError& e) {
                throw diffusion::NonFiniteLossError(std::string(e.what()) + " at step " + std::to_string(step + 1) +
                                                    ", clip " + store.manifest().clips[s.clip].id);
            }
            Tensor g = diffusion::mse_gradient(lr.prediction, lr.target);
            for (auto& v : g.values()) v /= static_cast<float>(batch.samples.size());
            model.backward(tape, g, grads);
            loss += lr.loss / static_cast<double>(batch.samples.size());
        }
        if (config.optim.grad_clip > 0) {
            double norm = 0;
            for (float g : grads) norm += static_cast<double>(g) * g;
            norm = std::sqrt(norm);
            if (!std::isfinite(norm))
                throw diffusion::NonFiniteLossError("non-finite gradient at step " + std::to_string(step + 1));
            if (norm > config.optim.grad_clip) {
                const float scale = static_cast<float>(config.optim.grad_clip / norm);
                for (auto& g : grads) g *= scale;
            }
        }
        const double lr = learning_rate(config.optim, step, config.steps);
        optim.step(model.params(), grads, lr);

        const double wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        log << json{{"step", step + 1}, {"loss", loss}, {"lr", lr}, {"wall_ms", wall_ms}}.dump() << '\n';
        log.flush();
        result.losses.push_back(loss);
        if (hooks.on_step) hooks.on_step(step + 1, loss);
        if ((step + 1) % 100 == 0) spdlog::info("{} step {}/{} loss {:.5f}", to_string(config.task), step + 1, config.steps, loss);

        const bool last = step + 1 == config.steps;
        if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && !last)
            save_checkpoint(config.out_dir / checkpoint_name(step + 1), snapshot(step + 1));
    }
    result.final_checkpoint = config.out_dir / "final.ckpt";
    save_checkpoint(result.final_checkpoint, snapshot(config.steps));
    return result;
}

}  // namespace vrgbx
