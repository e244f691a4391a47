// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner. Each criterion prints one line
//   CRITERION <n>: PASS|FAIL <details>
// Training-backed criteria drive the vrgbx executable and cache their
// artifacts under --work, keyed by the exact command line.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "support/oracles.hpp"
#include "vrgbx/conditioning.hpp"
#include "vrgbx/diffusion.hpp"
#include "vrgbx/dit_model.hpp"
#include "vrgbx/latentizer.hpp"
#include "vrgbx/metrics.hpp"
#include "vrgbx/rng.hpp"
#include "vrgbx/tie.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vrgbx;

#ifndef VRGBX_CLI_PATH
#error "VRGBX_CLI_PATH must name the vrgbx executable"
#endif

namespace {

// Pinned tolerances and budgets.
constexpr double kRoundTripTol = 1e-6;
constexpr double kGradRelTol = 1e-3;
constexpr int kGradParams = 20;
constexpr double kGradBudgetSeconds = 120;
constexpr double kMechanismBudgetSeconds = 300;
constexpr double kOverfitLossRatio = 0.10;
constexpr double kOverfitDecomposeDb = 35;
constexpr double kOverfitCycleDb = 30;
constexpr double kOverfitBudgetSeconds = 2 * 3600;
constexpr double kCycleMarginDb = 5;
constexpr double kEditMarginDb = 3;
constexpr double kIdentityTolDb = 1;
constexpr double kMetricTol = 1e-6;

// Evaluation sampler steps for the trained-model criteria.
constexpr int kEvalSteps = 20;

struct TrainSetup {
    std::string task;
    int steps;
    double lr;
    int batch;
    int warmup;
};

// Single-clip overfit runs.
const TrainSetup kOverfitInverse{"rgb2x", 500, 2e-3, 4, 20};
const TrainSetup kOverfitForward{"x2rgb", 500, 2e-3, 4, 20};

// Toy generalization runs.
const TrainSetup kToyInverse{"rgb2x", 6000, 1e-3, 1, 100};
const TrainSetup kToyForward{"x2rgb", 4000, 1e-3, 1, 100};
constexpr int kToyClips = 500;
constexpr int kToyTrainEnd = 450;
const std::vector<std::uint64_t> kToySeeds{1, 2};

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(read_text(p)); }

void write_text(const fs::path& p, const std::string& s) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << s;
}

std::string quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 3) {
    std::ostringstream s;
    s.precision(precision);
    s << std::fixed << v;
    return s.str();
}

std::string sci(double v) {
    std::ostringstream s;
    s.precision(2);
    s << std::scientific << v;
    return s.str();
}

struct Verdict {
    bool pass = true;
    std::vector<std::string> notes;

    void check(bool ok, const std::string& note) {
        pass = pass && ok;
        notes.push_back((ok ? "" : "!") + note);
    }
    std::string details() const {
        std::string s;
        for (const auto& n : notes) s += (s.empty() ? "" : "; ") + n;
        return s;
    }
};

/// Runs the CLI and caches its output directory. The stamp holds the command
/// line plus the contents of any files it depends on.
class Runner {
public:
    explicit Runner(fs::path work) : work_(std::move(work)) { fs::create_directories(work_); }

    const fs::path& work() const { return work_; }

    fs::path step(const std::string& name, std::vector<std::string> args, const std::vector<fs::path>& deps = {}) {
        const fs::path out = work_ / name;
        args.push_back("--out");
        args.push_back(out.string());
        std::string stamp;
        for (const auto& a : args) stamp += a + "\n";
        for (const auto& d : deps) stamp += "--\n" + read_text(d);
        const fs::path stamp_file = work_ / ".stamps" / (name + ".txt");
        if (fs::exists(stamp_file) && read_text(stamp_file) == stamp && fs::exists(out)) return out;
        fs::remove_all(out);
        run(name, args);
        write_text(stamp_file, stamp);
        return out;
    }

    /// Uncached run into `out`.
    void run_into(const std::string& log_name, std::vector<std::string> args, const fs::path& out) {
        fs::remove_all(out);
        args.push_back("--out");
        args.push_back(out.string());
        run(log_name, args);
    }

    fs::path config(const std::string& name, const json& j) {
        const fs::path p = work_ / "configs" / (name + ".json");
        const std::string text = j.dump(2) + "\n";
        if (!fs::exists(p) || read_text(p) != text) write_text(p, text);
        return p;
    }

private:
    void run(const std::string& name, const std::vector<std::string>& args) {
        const fs::path log = work_ / "logs" / (name + ".log");
        fs::create_directories(log.parent_path());
        std::string cmd = quote(VRGBX_CLI_PATH);
        for (const auto& a : args) cmd += " " + quote(a);
        cmd += " > " + quote(log.string()) + " 2>&1";
        std::cerr << "[acceptance] " << name << "\n";
        const int status = std::system(cmd.c_str());
        if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
            throw std::runtime_error(name + " failed, see " + log.string());
    }

    fs::path work_;
};

// ---------------------------------------------------------------- criterion 1

Tensor normal_tensor(std::vector<int> shape, std::uint64_t seed) {
    Tensor t(std::move(shape));
    Rng rng(seed);
    rng.fill_normal(t.span());
    return t;
}

bool same_span(std::span<const float> a, std::span<const float> b) {
    return std::equal(a.begin(), a.end(), b.begin(), b.end());
}

bool latentizer_bijective(int trials) {
    Rng rng(2024);
    for (int trial = 0; trial < trials; ++trial) {
        const int p = 1 + rng.index(4);
        const int frames = 1 + 4 * rng.index(6);
        const int h = p * (1 + rng.index(6));
        const int w = p * (1 + rng.index(6));
        const Tensor v = oracle::random_tensor({frames, 3, h, w}, 100 + trial, -3.f, 3.f);
        DecodeDiagnostics diag;
        if (!(decode(encode(v, p), &diag) == v) || diag.replicas_disagree) return false;
    }
    return true;
}

IntrinsicStack random_stack(VideoDims d, std::uint64_t seed) {
    IntrinsicStack s;
    for (ModalityId m : kAllModalities) s.channel(m) = oracle::random_tensor(d.shape(), seed + 17 * code(m));
    return s;
}

/// Returns the number of plans checked; -1 on a leak.
int conflicted_exclusion(int trials) {
    Rng rng(31337);
    int checked = 0;
    for (int trial = 0; trial < trials; ++trial) {
        const int frames = 1 + 4 * (1 + rng.index(4));
        const VideoDims d{frames, 2, 3};
        const IntrinsicStack gt = random_stack(d, 1000 + trial);
        EditSpec e;
        std::vector<int> keys;
        const int n_keys = rng.index(4);
        while (static_cast<int>(keys.size()) < n_keys) {
            const int f = rng.index(frames);
            if (std::find(keys.begin(), keys.end(), f) == keys.end()) keys.push_back(f);
        }
        std::sort(keys.begin(), keys.end());
        for (int f : keys) {
            KeyframeEdit k;
            k.frame = f;
            while (k.modalities.empty())
                for (ModalityId m : kAllModalities)
                    if (rng.bernoulli(0.3)) k.modalities.insert(m);
            for (ModalityId m : k.modalities.members())
                k.intrinsics[m] = oracle::random_tensor({3, 2, 3}, 5000 + 10 * trial + f + code(m));
            k.rgb = oracle::random_tensor({3, 2, 3}, 7000 + 10 * trial + f);
            e.keyframes.push_back(std::move(k));
        }
        const ModalitySet conflicted = conflicted_set(e);
        ConditioningPlan plan;
        try {
            plan = sample_plan(frames, e, gt, trial);
        } catch (const PlanError&) {
            if (!(conflicted.full() && n_keys < frames)) return -1;
            continue;
        }
        const Tensor v = assemble_conditioning(plan, gt, e);
        for (int t = 0; t < frames; ++t) {
            const KeyframeEdit* k = e.at_frame(t);
            if (k) {
                if (!k->modalities.contains(plan.modality[t])) return -1;
                if (!same_span(v.slice(t), k->intrinsics.at(plan.modality[t]).span())) return -1;
            } else {
                if (conflicted.contains(plan.modality[t])) return -1;
                if (!same_span(v.slice(t), gt.channel(plan.modality[t]).slice(t))) return -1;
            }
        }
        ++checked;
    }
    return checked;
}

/// Chunk 0 holds frame 0 in all four slots; chunk k >= 1 holds frames
/// 4(k-1)+1 .. 4k in slot order.
bool tie_packing(int trials) {
    Rng rng(4);
    for (int trial = 0; trial < trials; ++trial) {
        const int frames = 1 + 4 * rng.index(8);
        const int d = 1 + rng.index(6);
        std::vector<double> w(static_cast<std::size_t>(d) * kModalityCount);
        for (auto& x : w) x = rng.normal();
        std::vector<ModalityId> plan(frames);
        for (auto& m : plan) m = modality_from_code(rng.index(4));
        const auto packed = tie::pack_chunk_embeddings<double>(plan, w, d);
        const int chunks = 1 + (frames - 1) / 4;
        if (packed.size() != static_cast<std::size_t>(chunks) * 4 * d) return false;
        for (int k = 0; k < chunks; ++k)
            for (int j = 0; j < 4; ++j) {
                const int frame = k == 0 ? 0 : 4 * (k - 1) + 1 + j;
                const int m = code(plan[frame]);
                for (int i = 0; i < d; ++i)
                    if (packed[(k * 4 + j) * d + i] != w[static_cast<std::size_t>(i) * kModalityCount + m]) return false;
            }
    }
    return true;
}

bool cfg_identities(int trials) {
    for (int i = 0; i < trials; ++i) {
        const Tensor u = normal_tensor({3, 7, 5}, 10 + i);
        const Tensor c = normal_tensor({3, 7, 5}, 500 + i);
        if (!(diffusion::cfg_combine(u, c, 1.f) == c) || !(diffusion::cfg_combine(u, c, 0.f) == u)) return false;
    }
    return true;
}

double corrupt_round_trip(int trials) {
    Rng rng(3);
    double worst = 0;
    for (int trial = 0; trial < trials; ++trial) {
        const Tensor x0 = normal_tensor({3, 5, 2, 2}, 10 + trial);
        const Tensor eps = normal_tensor({3, 5, 2, 2}, 100 + trial);
        const float t = static_cast<float>(rng.uniform());
        const auto c = diffusion::corrupt(x0, t, eps);
        const Tensor xb = diffusion::recover_data(c.x_t, c.v, t);
        const Tensor eb = diffusion::recover_noise(c.x_t, c.v, t);
        for (std::size_t i = 0; i < x0.size(); ++i) {
            worst = std::max(worst, static_cast<double>(std::abs(xb[i] - x0[i]) / std::max(1.f, std::abs(x0[i]))));
            worst = std::max(worst, static_cast<double>(std::abs(eb[i] - eps[i]) / std::max(1.f, std::abs(eps[i]))));
        }
    }
    return worst;
}

/// Worst error of Euler with the true velocity, in units of the float
/// rounding bound (steps + 1) eps_f (|x1| + |v| + 1).
double euler_oracle(int steps) {
    const Tensor x0 = normal_tensor({2, 12, 3, 3}, 7);
    const Tensor eps = normal_tensor({2, 12, 3, 3}, 8);
    Tensor v(x0.shape());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = eps[i] - x0[i];
    diffusion::EulerOptions o;
    o.steps = steps;
    o.guided = false;
    const Tensor out = diffusion::euler_integrate(eps, [&](const Tensor&, float, diffusion::Branch) { return v; }, o);
    double worst = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        const double bound =
            (steps + 1) * std::numeric_limits<float>::epsilon() * (std::abs(eps[i]) + std::abs(v[i]) + 1.0);
        worst = std::max(worst, std::abs(static_cast<double>(out[i]) - x0[i]) / bound);
    }
    return worst;
}

Verdict criterion1() {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    v.check(latentizer_bijective(100), "latentizer bit-exact over 100 shapes");
    const int plans = conflicted_exclusion(1000);
    v.check(plans > 0, "conflicted modalities excluded (" + std::to_string(plans) + "/1000 feasible specs)");
    v.check(tie_packing(100), "TIE packing order and chunk-0 repetition");
    v.check(cfg_identities(20), "cfg s=0,1 bit-exact");
    const double rt = corrupt_round_trip(50);
    v.check(rt <= kRoundTripTol, "corrupt round trip " + sci(rt));
    for (int n : {1, 50}) {
        const double e = euler_oracle(n);
        v.check(e <= 1.0, "Euler N=" + std::to_string(n) + " error/rounding bound " + fmt(e));
    }
    const double s = seconds_since(t0);
    v.check(s < kMechanismBudgetSeconds, fmt(s, 1) + " s");
    return v;
}

// ---------------------------------------------------------------- criterion 2

Verdict criterion2() {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    double worst = 0;
    int checked = 0;
    int flat_violations = 0;
    for (TaskMode mode : {TaskMode::Forward, TaskMode::Inverse}) {
        DiT<double> model(oracle::tiny_config());
        model.randomize_all(17, 0.2);
        const auto in = oracle::random_input(model.config(), mode, 23);
        typename DiT<double>::Tape tape;
        const auto out = model.forward(in, &tape);
        BasicTensor<double> d(out.shape());
        for (std::size_t i = 0; i < out.size(); ++i) d[i] = 2.0 * out[i] / static_cast<double>(out.size());
        std::vector<double> grads(model.params().size(), 0.0);
        model.backward(tape, d, grads);

        Rng pick(mode == TaskMode::Forward ? 99 : 199);
        int n = 0;
        while (n < kGradParams / 2) {
            const std::size_t k = static_cast<std::size_t>(pick.index(static_cast<int>(grads.size())));
            const double h = 1e-3;
            const double saved = model.params()[k];
            model.params()[k] = saved + h;
            const double up = oracle::mean_square_output(model, in);
            model.params()[k] = saved - h;
            const double down = oracle::mean_square_output(model, in);
            model.params()[k] = saved;
            const double numeric = (up - down) / (2 * h);
            if (std::abs(grads[k]) < 1e-12) {
                flat_violations += std::abs(numeric) > 1e-9;
                continue;
            }
            worst = std::max(worst, std::abs(grads[k] - numeric) /
                                        std::max({std::abs(grads[k]), std::abs(numeric), 1e-10}));
            ++n;
        }
        checked += n;
    }
    v.check(worst < kGradRelTol, std::to_string(checked) + " params, max rel err " + sci(worst));
    v.check(flat_violations == 0, "unused params flat");
    const double s = seconds_since(t0);
    v.check(s < kGradBudgetSeconds, fmt(s, 1) + " s");
    return v;
}

// ---------------------------------------------------------------- training

json train_config(const TrainSetup& s) {
    return {{"checkpoint_every", 0},
            {"batch_size", s.batch},
            {"optim", {{"lr", s.lr}, {"warmup_steps", s.warmup}}}};
}

fs::path train(Runner& r, const std::string& name, const fs::path& data, const TrainSetup& s, std::uint64_t seed,
               const std::string& range) {
    const fs::path cfg = r.config(name, train_config(s));
    return r.step(name,
                  {"--seed", std::to_string(seed), "--config", cfg.string(), "--log-level", "warn", "train", "--task",
                   s.task, "--data", data.string(), "--steps", std::to_string(s.steps), "--range", range},
                  {cfg});
}

std::vector<double> losses(const fs::path& run) {
    std::vector<double> out;
    std::istringstream in(read_text(run / "train_log.jsonl"));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(json::parse(line).at("loss").get<double>());
    return out;
}

/// Mean of the last 50 logged losses over the first one.
double loss_ratio(const std::vector<double>& l, bool* finite) {
    *finite = !l.empty() && std::all_of(l.begin(), l.end(), [](double x) { return std::isfinite(x); });
    if (l.size() < 2) return std::numeric_limits<double>::infinity();
    const std::size_t n = std::min<std::size_t>(50, l.size());
    double tail = 0;
    for (std::size_t i = l.size() - n; i < l.size(); ++i) tail += l[i];
    return tail / n / l.front();
}

std::vector<std::string> eval_args(const std::string& cmd, const fs::path& data, const std::string& range) {
    return {"--log-level", "warn", cmd, "--data", data.string(), "--range", range, "--steps", std::to_string(kEvalSteps)};
}

// ---------------------------------------------------------------- criterion 3

Verdict criterion3(Runner& r) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    const fs::path data =
        r.step("c3_data", {"--seed", "7", "gen-data", "--clips", "1", "--frames", "17", "--size", "64"});
    const fs::path inv = train(r, "c3_rgb2x", data, kOverfitInverse, 0, "0:1");
    const fs::path fwd = train(r, "c3_x2rgb", data, kOverfitForward, 0, "0:1");
    for (const auto& [name, dir] : {std::pair{"rgb2x", inv}, std::pair{"x2rgb", fwd}}) {
        bool finite = false;
        const double ratio = loss_ratio(losses(dir), &finite);
        v.check(finite && ratio < kOverfitLossRatio, std::string(name) + " loss ratio " + fmt(ratio));
    }
    auto dec_args = eval_args("decompose", data, "0:1");
    dec_args.insert(dec_args.end(), {"--rgb2x", (inv / "final.ckpt").string(), "--modality", "all"});
    const json dec = read_json(r.step("c3_decompose", dec_args, {inv / "final.ckpt"}) / "report.json");
    for (const auto& [mod, db] : dec.at("aggregate").at("per_modality").items())
        v.check(db.get<double>() >= kOverfitDecomposeDb, mod + " " + fmt(db.get<double>(), 2) + " dB");
    auto cyc_args = eval_args("cycle-eval", data, "0:1");
    cyc_args.insert(cyc_args.end(),
                    {"--rgb2x", (inv / "final.ckpt").string(), "--x2rgb", (fwd / "final.ckpt").string()});
    const json cyc = read_json(r.step("c3_cycle", cyc_args, {inv / "final.ckpt", fwd / "final.ckpt"}) / "report.json");
    const double cycle_db = cyc.at("aggregate").at("psnr").get<double>();
    v.check(cycle_db >= kOverfitCycleDb, "cycle " + fmt(cycle_db, 2) + " dB");
    const double s = seconds_since(t0);
    v.check(s <= kOverfitBudgetSeconds, fmt(s, 0) + " s");
    return v;
}

// ---------------------------------------------------------------- criterion 4

struct ToyModels {
    fs::path data;
    fs::path inv;  // final.ckpt paths
    fs::path fwd;
};

fs::path toy_data(Runner& r) {
    return r.step("toy_data",
                  {"--seed", "7", "--log-level", "warn", "gen-data", "--clips", std::to_string(kToyClips), "--frames",
                   "17", "--size", "64"});
}

const std::string kHeldOut = std::to_string(kToyTrainEnd) + ":" + std::to_string(kToyClips);

ToyModels toy_models(Runner& r, std::uint64_t seed) {
    ToyModels m;
    m.data = toy_data(r);
    const std::string range = "0:" + std::to_string(kToyTrainEnd);
    const std::string tag = "s" + std::to_string(seed);
    m.inv = train(r, "toy_rgb2x_" + tag, m.data, kToyInverse, seed, range) / "final.ckpt";
    m.fwd = train(r, "toy_x2rgb_" + tag, m.data, kToyForward, seed, range) / "final.ckpt";
    return m;
}

fs::path toy_cycle(Runner& r, const ToyModels& m, std::uint64_t seed) {
    auto args = eval_args("cycle-eval", m.data, kHeldOut);
    args.insert(args.end(), {"--rgb2x", m.inv.string(), "--x2rgb", m.fwd.string()});
    return r.step("toy_cycle_s" + std::to_string(seed), args, {m.inv, m.fwd});
}

json toy_render(Runner& r, const ToyModels& m, std::uint64_t seed, const std::string& mode, const std::string& chan) {
    auto args = eval_args("render", m.data, kHeldOut);
    args.insert(args.end(), {"--x2rgb", m.fwd.string(), "--mode", mode});
    if (!chan.empty()) args.insert(args.end(), {"--chan", chan});
    const std::string name = "toy_render_" + mode + (chan.empty() ? "" : "_" + chan) + "_s" + std::to_string(seed);
    return read_json(r.step(name, args, {m.fwd}) / "report.json").at("rows");
}

Verdict criterion4(Runner& r) {
    Verdict v;
    for (std::uint64_t seed : kToySeeds) {
        const std::string tag = "seed " + std::to_string(seed) + " ";
        const ToyModels m = toy_models(r, seed);
        for (const auto& dir : {m.inv.parent_path(), m.fwd.parent_path()}) {
            bool finite = false;
            loss_ratio(losses(dir), &finite);
            v.check(finite, tag + dir.filename().string() + " losses finite");
        }
        const json cyc = read_json(toy_cycle(r, m, seed) / "report.json");
        const double cycle_db = cyc.at("aggregate").at("psnr").get<double>();
        const double base_db = cyc.at("baseline_repeat_first_frame").at("psnr").get<double>();
        v.check(cycle_db - base_db >= kCycleMarginDb,
                tag + "cycle " + fmt(cycle_db, 2) + " vs repeat-frame " + fmt(base_db, 2) + " dB");

        std::map<std::string, json> rows;
        rows["random"] = toy_render(r, m, seed, "random", "");
        for (const char* chan : {"albedo", "irradiance"}) {
            rows[std::string("drop_") + chan] = toy_render(r, m, seed, "drop", chan);
            rows[std::string("first_") + chan] = toy_render(r, m, seed, "first-frame", chan);
        }
        auto db = [&](const std::string& mode, const char* row) { return rows.at(mode).at(row).at("psnr").get<double>(); };
        for (const auto& [mode, row] : rows) {
            const double with = db(mode, "with_ref");
            const double without = db(mode, "without_ref");
            v.check(with >= without, tag + mode + " with-ref " + fmt(with, 2) + " >= without " + fmt(without, 2));
        }
        for (const char* chan : {"albedo", "irradiance"})
            for (const char* row : {"with_ref", "without_ref"}) {
                const double first = db(std::string("first_") + chan, row);
                const double drop = db(std::string("drop_") + chan, row);
                v.check(first >= drop, tag + chan + " " + row + " first-frame " + fmt(first, 2) + " >= drop " + fmt(drop, 2));
            }
    }
    return v;
}

// ---------------------------------------------------------------- criterion 5

Verdict criterion5(Runner& r) {
    Verdict v;
    const std::uint64_t seed = kToySeeds.front();
    const ToyModels m = toy_models(r, seed);
    const json manifest = read_json(m.data / "manifest.json");
    auto clip_name = [&](int idx) { return manifest.at("clips").at(idx).at("id").get<std::string>(); };

    struct Kind {
        std::string name;
        std::string touched;
        int first_clip;
    };
    const std::vector<Kind> kinds{{"recolor_albedo", "albedo", kToyTrainEnd},
                                  {"set_light_color", "irradiance", kToyTrainEnd + 10}};
    for (const Kind& k : kinds) {
        double margin = 0;
        int counted = 0;
        std::map<std::string, double> preserved;
        for (int i = 0; i < 10; ++i) {
            const std::string clip = clip_name(k.first_clip + i);
            const std::string tag = k.name + "_" + std::to_string(i);
            const fs::path edit = r.step("edit_spec_" + tag, {"--seed", std::to_string(100 + i), "--log-level", "warn",
                                                               "make-edit", "--data", m.data.string(), "--video", clip,
                                                               "--kind", k.name, "--keyframes", "1"});
            const fs::path out = r.step(
                "edit_out_" + tag,
                {"--log-level", "warn", "edit-propagate", "--rgb2x", m.inv.string(), "--x2rgb", m.fwd.string(),
                 "--data", m.data.string(), "--video", clip, "--edit", (edit / "edit.json").string(), "--steps",
                 std::to_string(kEvalSteps)},
                {m.inv, m.fwd, edit / "edit.json"});
            const json res = read_json(out / "result.json");
            const json& o = res.at("oracle");
            if (o.contains("footprint_psnr_vs_edited")) {
                margin += o.at("footprint_psnr_vs_edited").get<double>() - o.at("footprint_psnr_vs_original").get<double>();
                ++counted;
            }
            for (const auto& [mod, db] : res.at("per_modality").items()) preserved[mod] += db.get<double>() / 10;
        }
        margin /= std::max(counted, 1);
        v.check(counted > 0 && margin >= kEditMarginDb,
                k.name + " footprint PSNR edited-minus-original " + fmt(margin, 2) + " dB over " + std::to_string(counted));
        bool closer = true;
        std::string worst_untouched;
        double worst = std::numeric_limits<double>::infinity();
        for (const auto& [mod, db] : preserved)
            if (mod != k.touched && db < worst) {
                worst = db;
                worst_untouched = mod;
            }
        closer = worst > preserved.at(k.touched);
        v.check(closer, k.name + " untouched min " + worst_untouched + " " + fmt(worst, 2) + " > " + k.touched + " " +
                            fmt(preserved.at(k.touched), 2) + " dB");
    }

    // Identity edits against the cycle output of the same clip and seed.
    const fs::path cyc = toy_cycle(r, m, seed);
    double worst_gap = 0;
    for (int i = 0; i < 5; ++i) {
        const std::string clip = clip_name(kToyTrainEnd + 20 + i);
        const std::string tag = "identity_" + std::to_string(i);
        const fs::path edit = r.step("edit_spec_" + tag, {"--log-level", "warn", "make-edit", "--data", m.data.string(),
                                                           "--video", clip, "--kind", "identity", "--keyframes", "1"});
        const fs::path out =
            r.step("edit_out_" + tag,
                   {"--log-level", "warn", "edit-propagate", "--rgb2x", m.inv.string(), "--x2rgb", m.fwd.string(),
                    "--data", m.data.string(), "--video", clip, "--edit", (edit / "edit.json").string(), "--steps",
                    std::to_string(kEvalSteps)},
                   {m.inv, m.fwd, edit / "edit.json"});
        const double edited = read_json(out / "result.json").at("psnr").get<double>();
        const double cycled = read_json(cyc / clip / "result.json").at("psnr").get<double>();
        worst_gap = std::max(worst_gap, std::abs(edited - cycled));
    }
    v.check(worst_gap <= kIdentityTolDb, "identity vs cycle max gap " + fmt(worst_gap, 2) + " dB");
    return v;
}

// ---------------------------------------------------------------- criterion 6

json metric_fields(const json& res) {
    json out = json::object();
    for (const char* k : {"psnr", "ssim", "smoothness", "per_modality", "plan"})
        if (res.contains(k)) out[k] = res.at(k);
    return out;
}

Verdict criterion6(Runner& r) {
    Verdict v;
    const fs::path base = r.work() / "c6";
    fs::remove_all(base);
    const fs::path cfg = r.config("c6_model", {{"model", {{"model_width", 32}, {"tie_width", 8}, {"heads", 2},
                                                          {"layers", 1}, {"patch", 4}, {"mlp_ratio", 2}}},
                                               {"checkpoint_every", 0}});
    auto gen = [&](const fs::path& out) {
        r.run_into("c6_gen", {"--seed", "11", "--log-level", "warn", "gen-data", "--clips", "3", "--frames", "9",
                              "--size", "16"},
                   out);
    };
    gen(base / "data_a");
    gen(base / "data_b");
    bool same_data = true;
    for (const auto& e : fs::recursive_directory_iterator(base / "data_a")) {
        if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
        const fs::path other = base / "data_b" / fs::relative(e.path(), base / "data_a");
        same_data = same_data && fs::exists(other) && read_text(other) == read_text(e.path());
    }
    v.check(same_data, "gen-data byte-identical");
    const fs::path data = base / "data_a";

    bool same_ckpt = true;
    for (const char* task : {"rgb2x", "x2rgb"})
        for (const char* run : {"a", "b"})
            r.run_into(std::string("c6_train_") + task,
                       {"--seed", "4", "--config", cfg.string(), "--log-level", "warn", "train", "--task", task,
                        "--data", data.string(), "--steps", "5", "--range", "0:2"},
                       base / (std::string(task) + "_" + run));
    for (const char* task : {"rgb2x", "x2rgb"})
        same_ckpt = same_ckpt && read_text(base / (std::string(task) + "_a") / "final.ckpt") ==
                                     read_text(base / (std::string(task) + "_b") / "final.ckpt");
    v.check(same_ckpt, "training checkpoints byte-identical");

    const std::string inv = (base / "rgb2x_a" / "final.ckpt").string();
    const std::string fwd = (base / "x2rgb_a" / "final.ckpt").string();
    const std::map<std::string, std::vector<std::string>> commands{
        {"decompose", {"decompose", "--rgb2x", inv, "--data", data.string(), "--range", "2:3", "--steps", "3"}},
        {"render", {"render", "--x2rgb", fwd, "--data", data.string(), "--range", "2:3", "--steps", "3"}},
        {"cycle-eval", {"cycle-eval", "--rgb2x", inv, "--x2rgb", fwd, "--data", data.string(), "--range", "2:3",
                        "--steps", "3"}}};
    for (const auto& [name, cmd] : commands) {
        std::vector<std::string> args{"--seed", "6", "--log-level", "warn"};
        args.insert(args.end(), cmd.begin(), cmd.end());
        r.run_into("c6_" + name, args, base / (name + "_a"));
        r.run_into("c6_" + name, args, base / (name + "_b"));
        bool same = true;
        int files = 0;
        for (const auto& e : fs::recursive_directory_iterator(base / (name + "_a"))) {
            if (e.path().filename() != "result.json") continue;
            const fs::path other = base / (name + "_b") / fs::relative(e.path(), base / (name + "_a"));
            same = same && fs::exists(other) && metric_fields(read_json(e.path())) == metric_fields(read_json(other));
            ++files;
        }
        v.check(same && files > 0, name + " result.json identical (" + std::to_string(files) + " files)");
    }
    return v;
}

// ---------------------------------------------------------------- criterion 7

Verdict criterion7() {
    Verdict v;
    double psnr_err = 0;
    double ssim_err = 0;
    double scale_err = 0;
    for (int i = 0; i < 100; ++i) {
        const Tensor a = oracle::random_tensor({2, 3, 12, 10}, 10000 + i);
        Tensor b = oracle::random_tensor({2, 3, 12, 10}, 20000 + i);
        for (std::size_t k = 0; k < b.size(); ++k) b[k] = 0.6f * a[k] + 0.4f * b[k];
        psnr_err = std::max(psnr_err, std::abs(metrics::psnr(a, b) - oracle::psnr(a, b)));
        ssim_err = std::max(ssim_err, std::abs(metrics::ssim(a, b) - oracle::ssim(a, b)));
        const Tensor pred = oracle::random_tensor({2, 3, 6, 6}, 30000 + i, 0.05f, 1.f);
        const Tensor gt = oracle::random_tensor({2, 3, 6, 6}, 40000 + i);
        const auto s = metrics::albedo_scale(pred, gt).scale;
        const auto ref = oracle::grid_search_scale(pred, gt);
        for (int c = 0; c < 3; ++c) scale_err = std::max(scale_err, std::abs(s[c] - ref[c]));
    }
    v.check(psnr_err <= kMetricTol, "psnr max diff " + sci(psnr_err) + " dB");
    v.check(ssim_err <= kMetricTol, "ssim max diff " + sci(ssim_err));
    v.check(scale_err <= kMetricTol, "albedo scale max diff " + sci(scale_err));
    return v;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vrgbx acceptance criteria"};
    std::vector<int> criteria;
    std::string work = "acceptance_work";
    bool strict = false;
    app.add_option("--criterion", criteria, "Criterion number 1-7 (repeatable; default all)")->check(CLI::Range(1, 7));
    app.add_option("--work", work, "Artifact cache directory");
    app.add_flag("--strict", strict, "Exit non-zero when a criterion fails");
    CLI11_PARSE(app, argc, argv);
    if (criteria.empty()) criteria = {1, 2, 3, 4, 5, 6, 7};

    setenv("VRGBX_DETERMINISTIC", "1", 1);
    Runner runner{fs::absolute(work)};
    const std::map<int, std::function<Verdict()>> table{
        {1, [] { return criterion1(); }},
        {2, [] { return criterion2(); }},
        {3, [&] { return criterion3(runner); }},
        {4, [&] { return criterion4(runner); }},
        {5, [&] { return criterion5(runner); }},
        {6, [&] { return criterion6(runner); }},
        {7, [] { return criterion7(); }},
    };
    bool all = true;
    for (int c : criteria) {
        Verdict v;
        try {
            v = table.at(c)();
        } catch (const std::exception& e) {
            v.check(false, std::string("error: ") + e.what());
        }
        all = all && v.pass;
        std::cout << "CRITERION " << c << ": " << (v.pass ? "PASS" : "FAIL") << " " << v.details() << std::endl;
    }
    return strict && !all ? 1 : 0;
}
