// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/cli.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "vrgbx/conditioning.hpp"
#include "vrgbx/image_io.hpp"
#include "vrgbx/kernels.hpp"
#include "vrgbx/metrics.hpp"
#include "vrgbx/oracle_edit.hpp"
#include "vrgbx/pipelines.hpp"
#include "vrgbx/rng.hpp"
#include "vrgbx/trainer.hpp"

#ifndef VRGBX_GIT_DESCRIBE
#define VRGBX_GIT_DESCRIBE "unknown"
#endif

namespace vrgbx::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string version() { return std::string("vrgbx ") + VRGBX_GIT_DESCRIBE; }

namespace {

struct Globals {
    std::uint64_t seed = 0;
    fs::path config;
    int workers = 1;
    fs::path out;
    std::string log_level = "info";
    bool deterministic = false;
};

bool deterministic_env() {
    const char* v = std::getenv("VRGBX_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

json read_json(const fs::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw ValidationError(path.string(), std::string("JSON parse error: ") + e.what());
    }
}

std::string hex(std::uint64_t h) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::uint64_t hash_file(const fs::path& p, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto bytes = read_file_bytes(p);
    return fnv1a(std::span<const unsigned char>(bytes), h);
}

/// Digest over relative paths and contents, visited in sorted order.
std::uint64_t hash_tree(const fs::path& root, std::uint64_t h = 0xcbf29ce484222325ULL) {
    if (fs::is_regular_file(root)) return hash_file(root, h);
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        h = fnv1a(fs::relative(f, root).generic_string(), h);
        h = hash_file(f, h);
    }
    return h;
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
}

void write_run_manifest(const fs::path& out, const std::string& command, const std::vector<std::string>& args,
                        const Globals& g, const json& config, const json& inputs) {
    json m = {{"command", command},
              {"argv", args},
              {"version", version()},
              {"seed", g.seed},
              {"deterministic", g.deterministic},
              {"config", config},
              {"inputs", inputs}};
    ensure_dir(out);
    write_json(out / "run_manifest.json", m);
}

// ---------------------------------------------------------------------------
// Clip selection and the per-clip worker pool

struct Selection {
    fs::path root;
    DatasetManifest manifest;
    std::vector<int> indices;
};

std::pair<int, int> parse_range(const std::string& text, int n) {
    if (text.empty()) return {0, n};
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw ValidationError("--range", "expected BEGIN:END, got '" + text + "'");
    try {
        const std::string a = text.substr(0, colon);
        const std::string b = text.substr(colon + 1);
        const int begin = a.empty() ? 0 : std::stoi(a);
        const int end = b.empty() ? n : std::stoi(b);
        if (begin < 0 || end > n || begin >= end)
            throw ValidationError("--range", "'" + text + "' is empty or outside [0, " + std::to_string(n) + ")");
        return {begin, end};
    } catch (const std::logic_error& e) {
        if (dynamic_cast<const ValidationError*>(&e)) throw;
        throw ValidationError("--range", "expected BEGIN:END, got '" + text + "'");
    }
}

Selection select_clips(const fs::path& root, const std::string& range, const std::vector<std::string>& ids) {
    if (root.empty()) throw ValidationError("--data", "required");
    Selection s;
    s.root = root;
    s.manifest = load_manifest(root);
    const int n = static_cast<int>(s.manifest.clips.size());
    if (!ids.empty()) {
        for (const auto& id : ids) {
            auto it = std::find_if(s.manifest.clips.begin(), s.manifest.clips.end(),
                                   [&](const ClipEntry& c) { return c.id == id; });
            if (it == s.manifest.clips.end()) throw ValidationError("--video", "clip '" + id + "' is not in " + root.string());
            s.indices.push_back(static_cast<int>(it - s.manifest.clips.begin()));
        }
    } else {
        const auto [begin, end] = parse_range(range, n);
        for (int i = begin; i < end; ++i) s.indices.push_back(i);
    }
    return s;
}

std::string clip_id(const Selection& s, int index) { return s.manifest.clips[index].id; }

json dataset_inputs(const Selection& s) {
    std::uint64_t h = hash_file(s.root / "manifest.json");
    for (int i : s.indices) h = hash_tree(s.root / clip_id(s, i), h);
    return {{"data", {{"path", s.root.string()}, {"clips", s.indices.size()}, {"fnv1a", hex(h)}}}};
}

/// Runs body(k) for k in [0, n) on up to `workers` threads; results must be
/// written by index so the schedule cannot change them.
template <typename F>
void for_each_index(int n, int workers, F&& body) {
    workers = std::clamp(workers, 1, std::max(1, n));
    if (workers == 1) {
        for (int k = 0; k < n; ++k) body(k);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int k = next++; k < n; k = next++) {
                try {
                    body(k);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

std::uint64_t clip_seed_for(std::uint64_t seed, int index) { return derive_seed(seed, "clip", static_cast<std::uint64_t>(index)); }

// ---------------------------------------------------------------------------
// Shared evaluation options

struct EvalOptions {
    fs::path data;
    std::string range;
    std::vector<std::string> videos;
    int sampler_steps = 50;
    double cfg_scale = 1.5;
};

void add_eval_options(CLI::App* cmd, EvalOptions& o) {
    cmd->add_option("--data", o.data, "Dataset root");
    cmd->add_option("--range", o.range, "Clip index range BEGIN:END within the manifest");
    cmd->add_option("--video", o.videos, "Clip id (repeatable)");
    cmd->add_option("--sampler-steps,--steps", o.sampler_steps, "Euler steps");
    cmd->add_option("--cfg-scale", o.cfg_scale, "Guidance scale");
}

/// Values from the --config file fill in options that were not given on the
/// command line.
void apply_eval_config(const json& cfg, CLI::App* cmd, EvalOptions& o) {
    if (!cfg.is_object()) return;
    try {
        if (cfg.contains("sampler")) {
            const json& s = cfg.at("sampler");
            if (cmd->count("--sampler-steps") == 0) o.sampler_steps = s.value("steps", o.sampler_steps);
            if (cmd->count("--cfg-scale") == 0) o.cfg_scale = s.value("cfg_scale", o.cfg_scale);
        }
        if (cmd->count("--data") == 0 && cfg.contains("data")) o.data = cfg.at("data").get<std::string>();
        if (cmd->count("--range") == 0 && cfg.contains("range")) o.range = cfg.at("range").get<std::string>();
    } catch (const json::exception& e) {
        throw ValidationError("config", e.what());
    }
}

diffusion::SamplerConfig sampler_config(const EvalOptions& o, std::uint64_t seed) {
    diffusion::SamplerConfig s;
    s.steps = o.sampler_steps;
    s.cfg_scale = o.cfg_scale;
    s.seed = seed;
    s.validate();
    return s;
}

json eval_config_json(const EvalOptions& o) {
    return {{"data", o.data.string()},
            {"range", o.range},
            {"videos", o.videos},
            {"sampler", {{"steps", o.sampler_steps}, {"cfg_scale", o.cfg_scale}}}};
}

Renderer load_model(const fs::path& path, TaskMode expected, const std::string& flag) {
    if (path.empty()) throw ValidationError(flag, "checkpoint path required");
    Renderer r = load_renderer(path);
    if (r.task != expected)
        throw ValidationError(flag, "checkpoint " + path.string() + " was trained for " + to_string(r.task) + ", expected " +
                                        to_string(expected));
    return r;
}

void check_dims(const Renderer& r, const DatasetManifest& m, const std::string& flag) {
    if (r.model.config().video() != m.dims)
        throw ValidationError(flag, "model clip dims " + shape_string(r.model.config().video().shape()) +
                                        " differ from the dataset's " + shape_string(m.dims.shape()));
}

Tensor frame_image(const Tensor& video, int t) {
    Tensor img({video.dim(1), video.dim(2), video.dim(3)});
    std::copy(video.slice(t).begin(), video.slice(t).end(), img.values().begin());
    return img;
}

std::vector<int> parse_keyframes(const std::vector<int>& one_based, int frames) {
    std::vector<int> out;
    for (int f : one_based) {
        if (f < 1 || f > frames)
            throw ValidationError("--keyframes", "frame " + std::to_string(f) + " outside [1, " + std::to_string(frames) + "]");
        out.push_back(f - 1);
    }
    return out;
}

json aggregate_json(const std::vector<metrics::ClipMetrics>& clips) { return metrics::to_json(metrics::aggregate(clips)); }

json clip_result(const metrics::ClipMetrics& m, const std::string& task, const json& plan, std::uint64_t seed,
                 std::uint64_t clip_seed) {
    json j = metrics::to_json(m);
    j["task"] = task;
    j["plan"] = plan;
    j["seed"] = seed;
    j["clip_seed"] = clip_seed;
    return j;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_data(const Globals& g, int clips, int frames, int size, const std::vector<std::string>& args) {
    if (g.out.empty()) throw ValidationError("--out", "required");
    const VideoDims dims{frames, size, size};
    spdlog::info("generating {} clips of {} into {}", clips, shape_string(dims.shape()), g.out.string());
    const DatasetManifest m = generate_dataset(g.seed, clips, dims, g.out, g.workers);
    const json config = {{"clips", clips}, {"frames", frames}, {"size", size}, {"workers", g.workers}};
    write_run_manifest(g.out, "gen-data", args, g, config, json::object());
    spdlog::info("wrote {} clips", m.clips.size());
    return 0;
}

struct TrainFlags {
    std::string task;
    fs::path data;
    std::optional<int> steps;
    std::optional<double> lr;
    std::optional<int> batch_size;
    std::optional<double> p_drop;
    std::optional<int> checkpoint_every;
    std::string range;
    fs::path resume;
};

int cmd_train(const Globals& g, CLI::App* root_app, const TrainFlags& f, const std::vector<std::string>& args) {
    json cfg = g.config.empty() ? json::object() : read_json(g.config);
    const fs::path base = g.config.empty() ? fs::path() : g.config.parent_path();
    if (!f.task.empty()) cfg["task"] = f.task;
    if (!f.data.empty()) cfg["dataset"] = fs::absolute(f.data).string();
    if (!g.out.empty()) cfg["out_dir"] = fs::absolute(g.out).string();
    if (f.steps) cfg["steps"] = *f.steps;
    if (f.lr) cfg["optim"]["lr"] = *f.lr;
    if (f.batch_size) cfg["batch_size"] = *f.batch_size;
    if (f.p_drop) cfg["p_drop"] = *f.p_drop;
    if (f.checkpoint_every) cfg["checkpoint_every"] = *f.checkpoint_every;
    if (root_app->count("--seed") > 0 || !cfg.contains("seed")) cfg["seed"] = g.seed;
    if (g.deterministic) cfg["deterministic"] = true;
    if (!cfg.contains("task")) throw ValidationError("task", "required (rgb2x or x2rgb)");
    if (!cfg.contains("dataset")) throw ValidationError("dataset", "required (--data)");

    // Clip dims default to the dataset's.
    fs::path dataset = cfg.at("dataset").get<std::string>();
    if (dataset.is_relative() && !base.empty()) dataset = base / dataset;
    const DatasetManifest manifest = load_manifest(dataset);
    json& model = cfg["model"];
    if (!model.is_object()) model = json::object();
    if (!model.contains("frames")) model["frames"] = manifest.dims.frames;
    if (!model.contains("height")) model["height"] = manifest.dims.height;
    if (!model.contains("width")) model["width"] = manifest.dims.width;
    if (!f.range.empty()) {
        const auto [b, e] = parse_range(f.range, static_cast<int>(manifest.clips.size()));
        cfg["clip_begin"] = b;
        cfg["clip_end"] = e;
    }

    RunConfig run = run_config_from_json(cfg, base);
    if (run.out_dir.empty()) throw ValidationError("out_dir", "required (--out)");
    run.deterministic = run.deterministic || g.deterministic;

    json inputs = {{"data", {{"path", run.dataset.string()}, {"fnv1a", hex(hash_tree(run.dataset))}}}};
    std::optional<fs::path> resume;
    if (!f.resume.empty()) {
        resume = f.resume;
        inputs["resume"] = {{"path", f.resume.string()}, {"fnv1a", hex(hash_file(f.resume))}};
    }
    write_run_manifest(run.out_dir, "train", args, g, to_json(run), inputs);
    const TrainResult r = train(run, {}, resume);
    spdlog::info("final checkpoint {}", r.final_checkpoint.string());
    std::cout << r.final_checkpoint.string() << "\n";
    return 0;
}

int cmd_decompose(const Globals& g, const EvalOptions& o, const fs::path& ckpt, const std::string& modality,
                  const std::vector<std::string>& args) {
    if (g.out.empty()) throw ValidationError("--out", "required");
    const Selection sel = select_clips(o.data, o.range, o.videos);
    const Renderer inv = load_model(ckpt, TaskMode::Inverse, "--rgb2x");
    check_dims(inv, sel.manifest, "--rgb2x");
    std::vector<ModalityId> mods;
    if (modality == "all")
        mods.assign(kAllModalities.begin(), kAllModalities.end());
    else
        mods.push_back(modality_from_string(modality));

    json config = eval_config_json(o);
    config["modality"] = modality;
    json inputs = dataset_inputs(sel);
    inputs["rgb2x"] = {{"path", ckpt.string()}, {"fnv1a", hex(hash_file(ckpt))}};
    write_run_manifest(g.out, "decompose", args, g, config, inputs);

    const int n = static_cast<int>(sel.indices.size());
    std::vector<metrics::ClipMetrics> results(n);
    for_each_index(n, g.workers, [&](int k) {
        const int idx = sel.indices[k];
        const std::string id = clip_id(sel, idx);
        const StoredClip clip = load_clip(sel.root / id);
        const std::uint64_t cs = clip_seed_for(g.seed, idx);
        metrics::ClipMetrics m;
        m.clip_id = id;
        double ssim_sum = 0;
        double smooth_sum = 0;
        for (ModalityId mod : mods) {
            const Tensor pred = decompose(inv, clip.rgb, mod, sampler_config(o, cs));
            const Tensor& gt = clip.gt.channel(mod);
            write_video(g.out / id / std::string(to_string(mod)), pred);
            m.per_modality[std::string(to_string(mod))] = intrinsic_psnr(mod, pred, gt);
            const Tensor cmp = mod == ModalityId::Albedo ? metrics::albedo_scale(pred, gt).scaled : pred;
            ssim_sum += metrics::ssim(cmp, gt);
            smooth_sum += metrics::smoothness(pred);
        }
        double psnr_sum = 0;
        for (const auto& [name, v] : m.per_modality) psnr_sum += v;
        m.psnr = psnr_sum / mods.size();
        m.ssim = ssim_sum / mods.size();
        m.smoothness = smooth_sum / mods.size();
        write_json(g.out / id / "result.json", clip_result(m, "rgb2x", json::array(), g.seed, cs));
        results[k] = std::move(m);
        spdlog::info("decompose {} psnr {:.2f}", id, results[k].psnr);
    });
    write_json(g.out / "report.json", {{"task", "rgb2x"}, {"aggregate", aggregate_json(results)}, {"seed", g.seed}});
    return 0;
}

EvalScheme parse_scheme(const std::string& mode, const std::string& chan) {
    if (mode == "random") return FullRandom{};
    if (chan.empty()) throw ValidationError("--chan", "required for --mode " + mode);
    const ModalityId m = modality_from_string(chan);
    if (mode == "drop") return DropModality{m};
    if (mode == "first-frame") return FirstFrameOnly{m};
    throw ValidationError("--mode", "unknown mode '" + mode + "' (expected random, drop or first-frame)");
}

int cmd_render(const Globals& g, const EvalOptions& o, const fs::path& ckpt, const std::string& mode,
               const std::string& chan, const std::vector<int>& keyframes_1b, const std::vector<std::string>& args) {
    if (g.out.empty()) throw ValidationError("--out", "required");
    const EvalScheme scheme = parse_scheme(mode, chan);
    const Selection sel = select_clips(o.data, o.range, o.videos);
    const Renderer fwd = load_model(ckpt, TaskMode::Forward, "--x2rgb");
    check_dims(fwd, sel.manifest, "--x2rgb");
    const std::vector<int> keyframes = parse_keyframes(keyframes_1b, sel.manifest.dims.frames);

    json config = eval_config_json(o);
    config["mode"] = mode;
    config["chan"] = chan;
    config["scheme"] = scheme_name(scheme);
    config["keyframes"] = keyframes_1b;
    json inputs = dataset_inputs(sel);
    inputs["x2rgb"] = {{"path", ckpt.string()}, {"fnv1a", hex(hash_file(ckpt))}};
    write_run_manifest(g.out, "render", args, g, config, inputs);

    const int n = static_cast<int>(sel.indices.size());
    const std::array<std::string, 2> rows{"with_ref", "without_ref"};
    std::array<std::vector<metrics::ClipMetrics>, 2> results;
    for (auto& r : results) r.resize(n);
    for_each_index(n, g.workers, [&](int k) {
        const int idx = sel.indices[k];
        const std::string id = clip_id(sel, idx);
        const StoredClip clip = load_clip(sel.root / id);
        const std::uint64_t cs = clip_seed_for(g.seed, idx);
        ConditioningPlan plan = make_eval_plan(sel.manifest.dims.frames, scheme, derive_seed(cs, "eval-plan"));
        plan.video = assemble_conditioning(plan, clip.gt, EditSpec{});
        for (int row = 0; row < 2; ++row) {
            std::vector<std::pair<int, Tensor>> keys;
            if (row == 0)
                for (int f : keyframes) keys.emplace_back(f, frame_image(clip.rgb, f));
            const ReferenceSequence ref = build_reference(keys, sel.manifest.dims);
            const Tensor out = render_video(fwd, plan, ref, sampler_config(o, cs));
            const fs::path dir = g.out / rows[row] / id;
            write_video(dir / "rgb", out);
            metrics::ClipMetrics m = metrics::evaluate_clip(id, out, clip.rgb);
            json res = clip_result(m, "x2rgb", plan_to_json(plan), g.seed, cs);
            res["scheme"] = scheme_name(scheme);
            res["reference"] = rows[row];
            write_json(dir / "result.json", res);
            spdlog::info("render {} {} {} psnr {:.2f}", scheme_name(scheme), rows[row], id, m.psnr);
            results[row][k] = std::move(m);
        }
    });
    json report = {{"task", "x2rgb"}, {"scheme", scheme_name(scheme)}, {"seed", g.seed}, {"rows", json::object()}};
    for (int row = 0; row < 2; ++row) report["rows"][rows[row]] = aggregate_json(results[row]);
    write_json(g.out / "report.json", report);
    return 0;
}

int cmd_cycle_eval(const Globals& g, const EvalOptions& o, const fs::path& inv_path, const fs::path& fwd_path,
                   const std::vector<std::string>& args) {
    if (g.out.empty()) throw ValidationError("--out", "required");
    const Selection sel = select_clips(o.data, o.range, o.videos);
    const Renderer inv = load_model(inv_path, TaskMode::Inverse, "--rgb2x");
    const Renderer fwd = load_model(fwd_path, TaskMode::Forward, "--x2rgb");
    check_dims(inv, sel.manifest, "--rgb2x");
    check_dims(fwd, sel.manifest, "--x2rgb");

    json inputs = dataset_inputs(sel);
    inputs["rgb2x"] = {{"path", inv_path.string()}, {"fnv1a", hex(hash_file(inv_path))}};
    inputs["x2rgb"] = {{"path", fwd_path.string()}, {"fnv1a", hex(hash_file(fwd_path))}};
    write_run_manifest(g.out, "cycle-eval", args, g, eval_config_json(o), inputs);

    const int n = static_cast<int>(sel.indices.size());
    std::vector<metrics::ClipMetrics> results(n);
    std::vector<metrics::ClipMetrics> baseline(n);
    for_each_index(n, g.workers, [&](int k) {
        const int idx = sel.indices[k];
        const std::string id = clip_id(sel, idx);
        const StoredClip clip = load_clip(sel.root / id);
        const std::uint64_t cs = clip_seed_for(g.seed, idx);
        const PropagationResult r = cycle(inv, fwd, clip.rgb, sampler_config(o, cs), cs);
        write_video(g.out / id / "rgb", r.video);
        for (ModalityId m : kAllModalities) write_video(g.out / id / std::string(to_string(m)), r.decomposed.channel(m));
        metrics::ClipMetrics m = metrics::evaluate_clip(id, r.video, clip.rgb);
        for (ModalityId mod : kAllModalities)
            m.per_modality[std::string(to_string(mod))] = intrinsic_psnr(mod, r.decomposed.channel(mod), clip.gt.channel(mod));
        baseline[k] = metrics::evaluate_clip(id, repeat_first_frame(clip.rgb), clip.rgb);
        json res = clip_result(m, "cycle", plan_to_json(r.plan), g.seed, cs);
        res["baseline_repeat_first_frame"] = {{"psnr", baseline[k].psnr}, {"ssim", baseline[k].ssim}};
        write_json(g.out / id / "result.json", res);
        spdlog::info("cycle {} psnr {:.2f} (baseline {:.2f})", id, m.psnr, baseline[k].psnr);
        results[k] = std::move(m);
    });
    write_json(g.out / "report.json", {{"task", "cycle"},
                                       {"seed", g.seed},
                                       {"aggregate", aggregate_json(results)},
                                       {"baseline_repeat_first_frame", aggregate_json(baseline)}});
    return 0;
}

void expand_mask(const std::vector<std::uint8_t>& footprint, VideoDims d, std::vector<std::uint8_t>& out) {
    const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
    out.assign(static_cast<std::size_t>(d.frames) * 3 * plane, 0);
    for (int t = 0; t < d.frames; ++t)
        for (int c = 0; c < 3; ++c)
            std::copy_n(footprint.begin() + static_cast<long>(t * plane), plane,
                        out.begin() + static_cast<long>((t * 3 + c) * plane));
}

int cmd_edit_propagate(const Globals& g, const EvalOptions& o, const fs::path& inv_path, const fs::path& fwd_path,
                       const fs::path& edit_path, bool allow_degenerate, const std::vector<std::string>& args) {
    if (g.out.empty()) throw ValidationError("--out", "required");
    if (o.videos.size() != 1) throw ValidationError("--video", "exactly one clip id required");
    const Selection sel = select_clips(o.data, "", o.videos);
    const Renderer inv = load_model(inv_path, TaskMode::Inverse, "--rgb2x");
    const Renderer fwd = load_model(fwd_path, TaskMode::Forward, "--x2rgb");
    check_dims(inv, sel.manifest, "--rgb2x");
    check_dims(fwd, sel.manifest, "--x2rgb");
    if (edit_path.empty()) throw ValidationError("--edit", "required");
    const EditSpec edit = load_edit_spec(edit_path);
    edit.validate(sel.manifest.dims);
    const json edit_json = read_json(edit_path);

    json config = eval_config_json(o);
    config["allow_degenerate_plans"] = allow_degenerate;
    json inputs = dataset_inputs(sel);
    inputs["rgb2x"] = {{"path", inv_path.string()}, {"fnv1a", hex(hash_file(inv_path))}};
    inputs["x2rgb"] = {{"path", fwd_path.string()}, {"fnv1a", hex(hash_file(fwd_path))}};
    inputs["edit"] = {{"path", edit_path.string()}, {"fnv1a", hex(hash_tree(edit_path.parent_path()))}};
    write_run_manifest(g.out, "edit-propagate", args, g, config, inputs);

    const int idx = sel.indices.front();
    const std::string id = clip_id(sel, idx);
    const StoredClip clip = load_clip(sel.root / id);
    const std::uint64_t cs = clip_seed_for(g.seed, idx);
    PropagationOptions popts;
    popts.plan.allow_degenerate_plans = allow_degenerate;
    const diffusion::SamplerConfig sampler = sampler_config(o, cs);
    const PropagationResult r = propagate_edit(inv, fwd, clip.rgb, edit, sampler, cs, popts);
    write_video(g.out / "rgb", r.video);

    // Decompose the output again to see which channels moved.
    const IntrinsicStack redecomposed = decompose_all(inv, r.video, sampler_config(o, derive_seed(cs, "redecompose")));
    metrics::ClipMetrics m = metrics::evaluate_clip(id, r.video, clip.rgb);
    for (ModalityId mod : kAllModalities)
        m.per_modality[std::string(to_string(mod))] =
            metrics::psnr(redecomposed.channel(mod), r.decomposed.channel(mod));

    json res = clip_result(m, "edit-propagate", plan_to_json(r.plan), g.seed, cs);
    json touched = json::array();
    for (ModalityId mod : conflicted_set(edit).members()) touched.push_back(to_string(mod));
    res["edit"] = {{"path", edit_path.string()}, {"conflicted", touched}, {"keyframes", edit.keyframes.size()}};

    if (edit_json.contains("oracle")) {
        const json& oj = edit_json.at("oracle");
        const fs::path edit_dir = edit_path.parent_path();
        const VideoDims d = sel.manifest.dims;
        const Tensor oracle_rgb = read_video(edit_dir / oj.at("rgb").get<std::string>(), d.frames);
        const std::vector<std::uint8_t> footprint = edit_footprint(clip.rgb, oracle_rgb);
        std::vector<std::uint8_t> mask;
        expand_mask(footprint, d, mask);
        const auto pixels = std::count(footprint.begin(), footprint.end(), 1);
        json oracle = {{"psnr_vs_edited", metrics::psnr(r.video, oracle_rgb)},
                       {"psnr_vs_original", metrics::psnr(r.video, clip.rgb)},
                       {"footprint_pixels", pixels}};
        if (pixels > 0) {
            oracle["footprint_psnr_vs_edited"] = metrics::masked_psnr(r.video, oracle_rgb, mask);
            oracle["footprint_psnr_vs_original"] = metrics::masked_psnr(r.video, clip.rgb, mask);
        }
        if (oj.contains("intrinsics")) {
            json per = json::object();
            for (const auto& [name, dir] : oj.at("intrinsics").items()) {
                const ModalityId mod = modality_from_string(name);
                const Tensor edited_gt = read_video(edit_dir / dir.get<std::string>(), d.frames);
                per[name] = {{"psnr_vs_edited", intrinsic_psnr(mod, redecomposed.channel(mod), edited_gt)},
                             {"psnr_vs_original", intrinsic_psnr(mod, redecomposed.channel(mod), clip.gt.channel(mod))}};
            }
            oracle["decomposed_output"] = per;
        }
        if (oj.contains("op")) oracle["op"] = oj.at("op");
        res["oracle"] = oracle;
    }
    write_json(g.out / "result.json", res);
    spdlog::info("edit-propagate {} psnr vs input {:.2f}", id, m.psnr);
    return 0;
}

int cmd_make_edit(const Globals& g, const fs::path& data, const std::string& video, const std::string& kind,
                  const std::vector<int>& keyframes_1b, const std::vector<std::string>& args) {
    if (g.out.empty()) throw ValidationError("--out", "required");
    const Selection sel = select_clips(data, "", {video});
    const int idx = sel.indices.front();
    const StoredClip clip = load_clip(sel.root / clip_id(sel, idx));
    const std::vector<int> keyframes = parse_keyframes(keyframes_1b, sel.manifest.dims.frames);
    ensure_dir(g.out);

    json extra = {{"oracle", {{"clip", video}, {"rgb", "oracle/rgb"}, {"intrinsics", json::object()}}}};
    EditSpec spec;
    Tensor oracle_rgb;
    IntrinsicStack oracle_gt;
    if (kind == "identity") {
        for (int f : keyframes) {
            KeyframeEdit k;
            k.frame = f;
            k.modalities = {ModalityId::Albedo};
            k.intrinsics[ModalityId::Albedo] = frame_image(clip.gt.albedo, f);
            k.rgb = frame_image(clip.rgb, f);
            spec.keyframes.push_back(std::move(k));
        }
        oracle_rgb = clip.rgb;
        oracle_gt = clip.gt;
        extra["oracle"]["op"] = {{"op", "identity"}};
    } else {
        const EditOp op = random_edit_op(clip.spec, edit_kind_from_string(kind), derive_seed(g.seed, "make-edit"));
        OracleEdit oe = make_oracle_edit(clip.spec, op, keyframes);
        spec = std::move(oe.spec);
        oracle_rgb = std::move(oe.edited.rgb);
        oracle_gt = std::move(oe.edited.gt);
        extra["oracle"]["op"] = to_json(op);
    }
    write_video(g.out / "oracle" / "rgb", oracle_rgb);
    for (ModalityId m : kAllModalities) {
        const std::string name(to_string(m));
        write_video(g.out / "oracle" / name, oracle_gt.channel(m));
        extra["oracle"]["intrinsics"][name] = "oracle/" + name;
    }
    save_edit_spec(g.out / "edit.json", spec, extra);
    const json config = {{"data", data.string()}, {"video", video}, {"kind", kind}, {"keyframes", keyframes_1b}};
    write_run_manifest(g.out, "make-edit", args, g, config, dataset_inputs(sel));
    std::cout << (g.out / "edit.json").string() << "\n";
    return 0;
}

int count_frames(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError(dir, "not a directory");
    int n = 0;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".png") ++n;
    if (n == 0) throw IoError(dir, "no PNG frames");
    return n;
}

int cmd_metrics(const Globals& g, const fs::path& pred_dir, const fs::path& gt_dir, bool albedo,
                const std::vector<std::string>& args) {
    const int frames = count_frames(pred_dir);
    if (count_frames(gt_dir) != frames) throw ValidationError("--gt", "frame count differs from --pred");
    const Tensor pred = read_video(pred_dir, frames);
    const Tensor gt = read_video(gt_dir, frames);
    if (pred.shape() != gt.shape()) throw ValidationError("--gt", "frame size differs from --pred");
    const Tensor cmp = albedo ? metrics::albedo_scale(pred, gt).scaled : pred;
    metrics::ClipMetrics m;
    m.clip_id = pred_dir.filename().string();
    m.psnr = metrics::psnr(cmp, gt);
    m.ssim = metrics::ssim(cmp, gt);
    m.smoothness = frames >= 2 ? metrics::smoothness(pred) : 1.0;
    json res = clip_result(m, albedo ? "metrics-albedo" : "metrics", json::array(), g.seed, 0);
    if (!g.out.empty()) {
        const json inputs = {{"pred", {{"path", pred_dir.string()}, {"fnv1a", hex(hash_tree(pred_dir))}}},
                             {"gt", {{"path", gt_dir.string()}, {"fnv1a", hex(hash_tree(gt_dir))}}}};
        write_run_manifest(g.out, "metrics", args, g, {{"albedo_scaling", albedo}}, inputs);
        write_json(g.out / "result.json", res);
    }
    std::cout << res.dump() << "\n";
    return 0;
}

std::shared_ptr<spdlog::logger> stderr_logger() {
    static auto logger = [] {
        auto l = std::make_shared<spdlog::logger>("vrgbx", std::make_shared<spdlog::sinks::stderr_color_sink_mt>());
        l->set_pattern("[%H:%M:%S] %v");
        return l;
    }();
    return logger;
}

std::string one_line(std::string s) {
    std::replace(s.begin(), s.end(), '\n', ' ');
    return s;
}

int report_error(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", kind}, {"message", one_line(message)}, {"exit_code", code}}.dump() << std::endl;
    return code;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"Intrinsic-aware video rendering and editing at toy scale", "vrgbx"};
    app.require_subcommand(1);
    app.set_version_flag("--version", version());
    Globals g;
    app.add_option("--seed", g.seed, "Root seed; every random choice derives from it")->capture_default_str();
    app.add_option("--config", g.config, "JSON configuration file");
    app.add_option("--workers", g.workers, "Parallel clips")->check(CLI::PositiveNumber);
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off");
    app.fallthrough();

    int gen_clips = 500;
    int gen_frames = 17;
    int gen_size = 64;
    auto* gen = app.add_subcommand("gen-data", "Generate the procedural toy dataset");
    gen->add_option("--clips", gen_clips, "Number of clips")->check(CLI::PositiveNumber);
    gen->add_option("--frames", gen_frames, "Frames per clip (T = 1 mod 4)");
    gen->add_option("--size", gen_size, "Frame height and width");

    TrainFlags tf;
    auto* tr = app.add_subcommand("train", "Train an inverse (rgb2x) or forward (x2rgb) renderer");
    tr->add_option("--task", tf.task, "rgb2x or x2rgb");
    tr->add_option("--data", tf.data, "Dataset root");
    tr->add_option("--steps", tf.steps, "Optimizer steps");
    tr->add_option("--lr", tf.lr, "Peak learning rate");
    tr->add_option("--batch-size", tf.batch_size, "Samples per step");
    tr->add_option("--p-drop", tf.p_drop, "Reference dropout probability");
    tr->add_option("--checkpoint-every", tf.checkpoint_every, "Checkpoint cadence in steps");
    tr->add_option("--range", tf.range, "Training clip range BEGIN:END");
    tr->add_option("--resume", tf.resume, "Continue from a checkpoint of the same run");

    EvalOptions dec_o;
    fs::path dec_ckpt;
    std::string dec_mod = "all";
    auto* dec = app.add_subcommand("decompose", "RGB to intrinsic channels");
    add_eval_options(dec, dec_o);
    dec->add_option("--rgb2x", dec_ckpt, "Inverse renderer checkpoint")->required();
    dec->add_option("--modality", dec_mod, "albedo|normal|material|irradiance|all");

    EvalOptions ren_o;
    fs::path ren_ckpt;
    std::string ren_mode = "random";
    std::string ren_chan;
    std::vector<int> ren_keys{1};
    auto* ren = app.add_subcommand("render", "Intrinsic conditioning to RGB, with and without keyframe reference");
    add_eval_options(ren, ren_o);
    ren->add_option("--x2rgb", ren_ckpt, "Forward renderer checkpoint")->required();
    ren->add_option("--mode", ren_mode, "random|drop|first-frame");
    ren->add_option("--chan", ren_chan, "Modality for drop and first-frame modes");
    ren->add_option("--keyframes", ren_keys, "1-based reference frames");

    EvalOptions cyc_o;
    fs::path cyc_inv;
    fs::path cyc_fwd;
    auto* cyc = app.add_subcommand("cycle-eval", "RGB to X to RGB reconstruction on held-out clips");
    add_eval_options(cyc, cyc_o);
    cyc->add_option("--rgb2x", cyc_inv, "Inverse renderer checkpoint")->required();
    cyc->add_option("--x2rgb", cyc_fwd, "Forward renderer checkpoint")->required();

    EvalOptions ed_o;
    fs::path ed_inv;
    fs::path ed_fwd;
    fs::path ed_edit;
    bool ed_degenerate = false;
    auto* ed = app.add_subcommand("edit-propagate", "Propagate keyframe edits through a clip");
    add_eval_options(ed, ed_o);
    ed->add_option("--rgb2x", ed_inv, "Inverse renderer checkpoint")->required();
    ed->add_option("--x2rgb", ed_fwd, "Forward renderer checkpoint")->required();
    ed->add_option("--edit", ed_edit, "EditSpec JSON")->required();
    ed->add_flag("--allow-degenerate-plans", ed_degenerate, "Permit plans when every modality is edited");

    fs::path me_data;
    std::string me_video;
    std::string me_kind = "recolor_albedo";
    std::vector<int> me_keys{1};
    auto* me = app.add_subcommand("make-edit", "Write an oracle-rendered EditSpec for a dataset clip");
    me->add_option("--data", me_data, "Dataset root")->required();
    me->add_option("--video", me_video, "Clip id")->required();
    me->add_option("--kind", me_kind, "recolor_albedo|set_light_color|identity");
    me->add_option("--keyframes", me_keys, "1-based keyframes");

    fs::path mt_pred;
    fs::path mt_gt;
    bool mt_albedo = false;
    auto* mt = app.add_subcommand("metrics", "PSNR, SSIM and smoothness of a frame directory against ground truth");
    mt->add_option("--pred", mt_pred, "Predicted frames")->required();
    mt->add_option("--gt", mt_gt, "Ground-truth frames")->required();
    mt->add_flag("--albedo", mt_albedo, "Apply least-squares per-channel scaling first");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    if (!reversed.empty()) reversed.pop_back();
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        std::cout << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        std::cout << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::CallForVersion&) {
        std::cout << version() << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cout << app.help();
        return report_error("usage", e.what(), 2);
    }

    spdlog::set_default_logger(stderr_logger());
    spdlog::set_level(spdlog::level::from_str(g.log_level));
    g.deterministic = deterministic_env();
    if (g.deterministic) kernels::set_thread_count(1);

    try {
        json cfg = json::object();
        if (!g.config.empty() && !tr->parsed()) cfg = read_json(g.config);
        if (gen->parsed()) return cmd_gen_data(g, gen_clips, gen_frames, gen_size, args);
        if (tr->parsed()) return cmd_train(g, &app, tf, args);
        if (dec->parsed()) {
            apply_eval_config(cfg, dec, dec_o);
            return cmd_decompose(g, dec_o, dec_ckpt, dec_mod, args);
        }
        if (ren->parsed()) {
            apply_eval_config(cfg, ren, ren_o);
            return cmd_render(g, ren_o, ren_ckpt, ren_mode, ren_chan, ren_keys, args);
        }
        if (cyc->parsed()) {
            apply_eval_config(cfg, cyc, cyc_o);
            return cmd_cycle_eval(g, cyc_o, cyc_inv, cyc_fwd, args);
        }
        if (ed->parsed()) {
            apply_eval_config(cfg, ed, ed_o);
            return cmd_edit_propagate(g, ed_o, ed_inv, ed_fwd, ed_edit, ed_degenerate, args);
        }
        if (me->parsed()) return cmd_make_edit(g, me_data, me_video, me_kind, me_keys, args);
        if (mt->parsed()) return cmd_metrics(g, mt_pred, mt_gt, mt_albedo, args);
        return report_error("usage", "no subcommand", 2);
    } catch (const ValidationError& e) {
        return report_error("validation", e.what(), 1);
    } catch (const CheckpointError& e) {
        return report_error("checkpoint", e.what(), 1);
    } catch (const PlanError& e) {
        return report_error("plan", e.what(), 1);
    } catch (const IoError& e) {
        return report_error("io", e.what(), 1);
    } catch (const std::invalid_argument& e) {
        return report_error("validation", e.what(), 1);
    } catch (const std::out_of_range& e) {
        return report_error("validation", e.what(), 1);
    } catch (const std::exception& e) {
        return report_error("runtime", e.what(), 3);
    }
}

int run(int argc, const char* const* argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace vrgbx::cli
