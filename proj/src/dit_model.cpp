// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/dit_model.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "vrgbx/kernels.hpp"
#include "vrgbx/rng.hpp"
#include "vrgbx/tie.hpp"

namespace vrgbx {

using nlohmann::json;
namespace k = kernels;

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) { throw std::invalid_argument("model." + field + ": " + why); };
    if (model_width < 8) fail("model_width", "must be at least 8");
    if (heads < 1 || model_width % heads != 0) fail("heads", "model_width must be divisible by heads");
    if (layers < 0) fail("layers", "must be non-negative");
    if (tie_width * 4 != model_width) fail("tie_width", "4 * tie_width must equal model_width");
    if (mlp_ratio < 1) fail("mlp_ratio", "must be positive");
    if (frames < 1 || frames % 4 != 1) fail("frames", "must satisfy T = 1 (mod 4)");
    if (patch < 1 || height % patch != 0) fail("height", "must be divisible by patch");
    if (width % patch != 0) fail("width", "must be divisible by patch");
}

json to_json(const ModelConfig& c) {
    return {{"model_width", c.model_width}, {"layers", c.layers},   {"heads", c.heads},
            {"patch", c.patch},             {"tie_width", c.tie_width}, {"mlp_ratio", c.mlp_ratio},
            {"frames", c.frames},           {"height", c.height},   {"width", c.width},
            {"param_seed", c.param_seed},   {"gamma", c.gamma}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.model_width = j.value("model_width", c.model_width);
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.patch = j.value("patch", c.patch);
    c.tie_width = j.value("tie_width", c.model_width / 4);
    c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
    c.frames = j.value("frames", c.frames);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    c.param_seed = j.value("param_seed", c.param_seed);
    c.gamma = j.value("gamma", c.gamma);
    c.validate();
    return c;
}

std::string to_string(TaskMode mode) { return mode == TaskMode::Inverse ? "rgb2x" : "x2rgb"; }

TaskMode task_mode_from_string(const std::string& s) {
    if (s == "rgb2x" || s == "inverse") return TaskMode::Inverse;
    if (s == "x2rgb" || s == "forward") return TaskMode::Forward;
    throw std::invalid_argument("unknown task '" + s + "' (expected rgb2x or x2rgb)");
}

template <typename Real>
BasicTensor<Real> build_model_input(const BasicTensor<Real>& noisy, const BasicTensor<Real>& cond,
                                    const BasicTensor<Real>& ref, const BasicTensor<Real>& mask) {
    auto check = [&](const BasicTensor<Real>& t, const char* name, int channels) {
        if (t.rank() != 4 || t.dim(0) != noisy.dim(0) || t.dim(2) != noisy.dim(2) || t.dim(3) != noisy.dim(3) ||
            (channels > 0 && t.dim(1) != channels))
            throw std::invalid_argument(std::string("build_model_input: ") + name + " has shape " + shape_string(t.shape()) +
                                        ", incompatible with noisy " + shape_string(noisy.shape()));
    };
    if (noisy.rank() != 4) throw std::invalid_argument("build_model_input: noisy must be [K, C, H', W']");
    const int C = noisy.dim(1);
    check(cond, "cond", C);
    check(ref, "ref", C);
    check(mask, "mask", kSlotsPerChunk);
    const int K = noisy.dim(0);
    const int S = noisy.dim(2) * noisy.dim(3);
    BasicTensor<Real> z({K, 3 * C + kSlotsPerChunk, noisy.dim(2), noisy.dim(3)});
    for (int kk = 0; kk < K; ++kk) {
        Real* dst = z.data() + static_cast<std::size_t>(kk) * z.dim(1) * S;
        auto put = [&](const BasicTensor<Real>& src, int ch) {
            const Real* s = src.data() + static_cast<std::size_t>(kk) * ch * S;
            dst = std::copy(s, s + static_cast<std::size_t>(ch) * S, dst);
        };
        put(noisy, C);
        put(cond, C);
        put(ref, C);
        put(mask, kSlotsPerChunk);
    }
    return z;
}

template BasicTensor<float> build_model_input(const BasicTensor<float>&, const BasicTensor<float>&,
                                              const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> build_model_input(const BasicTensor<double>&, const BasicTensor<double>&,
                                               const BasicTensor<double>&, const BasicTensor<double>&);

std::vector<ParamInfo> param_layout(const ModelConfig& c) {
    c.validate();
    const int D = c.model_width;
    const int F = c.mlp_ratio * D;
    const int C = c.latent_channels();
    std::vector<ParamInfo> out;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<int> shape) {
        const std::size_t n = BasicTensor<float>::count(shape);
        out.push_back({std::move(name), std::move(shape), offset, n});
        offset += n;
    };
    add("patch.weight", {c.input_channels(), D});
    add("patch.bias", {D});
    add("time.fc1.weight", {D, D});
    add("time.fc1.bias", {D});
    add("time.fc2.weight", {D, D});
    add("time.fc2.bias", {D});
    add("modality_embed", {kModalityCount, D});
    add("tie.type_encoder", {c.tie_width, kModalityCount});
    for (int l = 0; l < c.layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        add(p + "ada.weight", {D, 6 * D});
        add(p + "ada.bias", {6 * D});
        add(p + "qkv.weight", {D, 3 * D});
        add(p + "qkv.bias", {3 * D});
        add(p + "proj.weight", {D, D});
        add(p + "proj.bias", {D});
        add(p + "fc1.weight", {D, F});
        add(p + "fc1.bias", {F});
        add(p + "fc2.weight", {F, D});
        add(p + "fc2.bias", {D});
    }
    add("final.ada.weight", {D, 2 * D});
    add("final.ada.bias", {2 * D});
    add("head.weight", {D, C});
    add("head.bias", {C});
    add("skip.weight", {D, C});
    add("skip.bias", {C});
    return out;
}

namespace {

struct BlockOffsets {
    std::size_t ada_w, ada_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

struct Offsets {
    std::size_t patch_w, patch_b, t1_w, t1_b, t2_w, t2_b, modality, tie, fada_w, fada_b, head_w, head_b, skip_w, skip_b;
    std::vector<BlockOffsets> blocks;
};

Offsets resolve_offsets(const std::vector<ParamInfo>& layout, int layers) {
    std::unordered_map<std::string, std::size_t> at;
    for (const auto& p : layout) at.emplace(p.name, p.offset);
    Offsets o{};
    o.patch_w = at.at("patch.weight");
    o.patch_b = at.at("patch.bias");
    o.t1_w = at.at("time.fc1.weight");
    o.t1_b = at.at("time.fc1.bias");
    o.t2_w = at.at("time.fc2.weight");
    o.t2_b = at.at("time.fc2.bias");
    o.modality = at.at("modality_embed");
    o.tie = at.at("tie.type_encoder");
    o.fada_w = at.at("final.ada.weight");
    o.fada_b = at.at("final.ada.bias");
    o.head_w = at.at("head.weight");
    o.head_b = at.at("head.bias");
    o.skip_w = at.at("skip.weight");
    o.skip_b = at.at("skip.bias");
    for (int l = 0; l < layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        o.blocks.push_back({at.at(p + "ada.weight"), at.at(p + "ada.bias"), at.at(p + "qkv.weight"),
                            at.at(p + "qkv.bias"), at.at(p + "proj.weight"), at.at(p + "proj.bias"),
                            at.at(p + "fc1.weight"), at.at(p + "fc1.bias"), at.at(p + "fc2.weight"),
                            at.at(p + "fc2.bias")});
    }
    return o;
}

bool zero_initialized(const std::string& name) {
    const bool is_bias = name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0;
    return is_bias || name.find("ada.") != std::string::npos || name.rfind("head.", 0) == 0 ||
           name.rfind("skip.", 0) == 0;
}

template <typename Real>
std::vector<Real> positional_code(const ModelConfig& c) {
    const int D = c.model_width;
    const int per_axis = 2 * (D / 6);
    const int half = per_axis / 2;
    std::vector<Real> pe(static_cast<std::size_t>(c.tokens()) * D, Real(0));
    const int hp = c.latent_height();
    const int wp = c.latent_width();
    for (int kk = 0; kk < c.chunks(); ++kk)
        for (int y = 0; y < hp; ++y)
            for (int x = 0; x < wp; ++x) {
                Real* row = pe.data() + static_cast<std::size_t>((kk * hp + y) * wp + x) * D;
                const int coords[3] = {kk, y, x};
                for (int axis = 0; axis < 3; ++axis)
                    for (int i = 0; i < half; ++i) {
                        const double freq = std::pow(100.0, -static_cast<double>(i) / std::max(1, half));
                        row[axis * per_axis + i] = static_cast<Real>(std::sin(coords[axis] * freq));
                        row[axis * per_axis + half + i] = static_cast<Real>(std::cos(coords[axis] * freq));
                    }
            }
    return pe;
}

template <typename Real>
std::vector<Real> timestep_code(Real t, int width) {
    const int half = width / 2;
    std::vector<Real> e(width, Real(0));
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        const double arg = 1000.0 * static_cast<double>(t) * freq;
        e[i] = static_cast<Real>(std::cos(arg));
        e[half + i] = static_cast<Real>(std::sin(arg));
    }
    return e;
}

template <typename Real>
void check_finite(const std::vector<Real>& v, int layer, const char* where) {
    for (Real x : v)
        if (!std::isfinite(x)) throw NonFiniteError(layer, where);
}

/// out[1 x n] = v[1 x m] * W[m x n] + b
template <typename Real>
void vec_mat(const Real* v, const Real* w, const Real* b, int m, int n, Real* out) {
    std::copy(b, b + n, out);
    k::gemm<Real>(false, false, 1, n, m, Real(1), v, m, w, n, Real(1), out, n);
}

/// dW[m x n] += v^T dout; db += dout; dv += W dout
template <typename Real>
void vec_mat_backward(const Real* v, const Real* w, const Real* dout, int m, int n, Real* dw, Real* db, Real* dv) {
    k::gemm<Real>(true, false, m, n, 1, Real(1), v, m, dout, n, Real(1), dw, n);
    for (int i = 0; i < n; ++i) db[i] += dout[i];
    k::gemm<Real>(false, true, 1, m, n, Real(1), dout, n, w, n, Real(1), dv, m);
}

}  // namespace

template <typename Real>
DiT<Real>::DiT(const ModelConfig& config) : config_(config), layout_(param_layout(config)) {
    params_.assign(layout_.back().offset + layout_.back().size, Real(0));
    pos_ = positional_code<Real>(config_);
    init_params();
}

template <typename Real>
void DiT<Real>::init_params() {
    Rng rng(derive_seed(config_.param_seed, "dit-init"));
    for (const auto& p : layout_) {
        Real* dst = params_.data() + p.offset;
        if (zero_initialized(p.name)) {
            std::fill(dst, dst + p.size, Real(0));
            continue;
        }
        for (std::size_t i = 0; i < p.size; ++i) {
            double v = 0;
            do {
                v = rng.normal();
            } while (std::abs(v) > 2.0);
            dst[i] = static_cast<Real>(0.02 * v);
        }
    }
}

template <typename Real>
void DiT<Real>::randomize_all(std::uint64_t seed, double sigma) {
    Rng rng(seed);
    for (auto& v : params_) v = static_cast<Real>(sigma * rng.normal());
}

template <typename Real>
std::span<Real> DiT<Real>::param(const std::string& name) {
    for (const auto& p : layout_)
        if (p.name == name) return std::span<Real>(params_).subspan(p.offset, p.size);
    throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename Real>
std::span<const Real> DiT<Real>::param(const std::string& name) const {
    return const_cast<DiT*>(this)->param(name);
}

template <typename Real>
BasicTensor<Real> DiT<Real>::forward(const ModelInput<Real>& in, Tape* tape) const {
    const ModelConfig& c = config_;
    const int K = c.chunks();
    const int S = c.tokens_per_chunk();
    const int N = c.tokens();
    const int D = c.model_width;
    const int F = c.mlp_ratio * D;
    const int C = c.latent_channels();
    const int Cin = c.input_channels();
    const int heads = c.heads;
    const int dh = D / heads;
    const Real attn_scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const std::vector<int> want{K, Cin, c.latent_height(), c.latent_width()};
    if (in.z.shape() != want)
        throw std::invalid_argument("model input shape " + shape_string(in.z.shape()) + ", expected " + shape_string(want));
    if (in.mode == TaskMode::Forward && static_cast<int>(in.plan.size()) != c.frames)
        throw std::invalid_argument("forward mode needs a per-frame modality plan of length " + std::to_string(c.frames));
    const Offsets off = resolve_offsets(layout_, c.layers);
    const Real* P = params_.data();

    // Tokens: row n = (k, y, x), features = input channels.
    std::vector<Real> x(static_cast<std::size_t>(N) * Cin);
    for (int kk = 0; kk < K; ++kk)
        for (int ch = 0; ch < Cin; ++ch) {
            const Real* src = in.z.data() + (static_cast<std::size_t>(kk) * Cin + ch) * S;
            for (int s = 0; s < S; ++s) x[static_cast<std::size_t>(kk * S + s) * Cin + ch] = src[s];
        }

    std::vector<Real> h(static_cast<std::size_t>(N) * D);
    k::gemm<Real>(false, false, N, D, Cin, Real(1), x.data(), Cin, P + off.patch_w, D, Real(0), h.data(), D);
    k::add_bias_rows(h.data(), P + off.patch_b, N, D);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += pos_[i];
    if (in.mode == TaskMode::Forward) {
        const auto packed = tie::pack_chunk_embeddings<Real>(
            in.plan, std::span<const Real>(P + off.tie, static_cast<std::size_t>(c.tie_width) * kModalityCount), c.tie_width);
        tie::modulate<Real>(h, S, D, packed, static_cast<Real>(c.gamma));
    }

    // Timestep (and target-modality) conditioning vector.
    std::vector<Real> temb0 = timestep_code<Real>(in.t, D);
    std::vector<Real> a1(D), s1(D), temb(D), cvec(D);
    vec_mat(temb0.data(), P + off.t1_w, P + off.t1_b, D, D, a1.data());
    k::silu_forward(a1.data(), s1.data(), D);
    vec_mat(s1.data(), P + off.t2_w, P + off.t2_b, D, D, temb.data());
    if (in.mode == TaskMode::Inverse) {
        const Real* e = P + off.modality + static_cast<std::size_t>(code(in.target)) * D;
        for (int i = 0; i < D; ++i) temb[i] += e[i];
    }
    k::silu_forward(temb.data(), cvec.data(), D);

    std::vector<Real> n1(h.size()), rstd1(N), mean(N), a(h.size()), qkv(static_cast<std::size_t>(N) * 3 * D);
    std::vector<Real> probs_scratch, ctx(h.size()), o(h.size()), n2(h.size()), rstd2(N), m(h.size());
    std::vector<Real> u(static_cast<std::size_t>(N) * F), g(u.size()), f(h.size()), mod(6 * D);
    if (!tape) probs_scratch.resize(static_cast<std::size_t>(N) * N);
    if (tape) {
        tape->x = x;
        tape->temb0 = temb0;
        tape->a1 = a1;
        tape->s1 = s1;
        tape->temb = temb;
        tape->c = cvec;
        tape->blocks.assign(c.layers, {});
        tape->mode = in.mode;
        tape->plan = in.plan;
        tape->target = in.target;
    }

    for (int l = 0; l < c.layers; ++l) {
        const BlockOffsets& b = off.blocks[l];
        vec_mat(cvec.data(), P + b.ada_w, P + b.ada_b, D, 6 * D, mod.data());
        const Real* shift1 = mod.data();
        const Real* scale1 = mod.data() + D;
        const Real* gate1 = mod.data() + 2 * D;
        const Real* shift2 = mod.data() + 3 * D;
        const Real* scale2 = mod.data() + 4 * D;
        const Real* gate2 = mod.data() + 5 * D;
        BlockTape* bt = tape ? &tape->blocks[l] : nullptr;
        if (bt) bt->h_in = h;

        k::layer_norm_forward(h.data(), N, D, Real(1e-6), n1.data(), mean.data(), rstd1.data());
        k::modulate_forward(n1.data(), shift1, scale1, N, D, a.data());
        k::gemm<Real>(false, false, N, 3 * D, D, Real(1), a.data(), D, P + b.qkv_w, 3 * D, Real(0), qkv.data(), 3 * D);
        k::add_bias_rows(qkv.data(), P + b.qkv_b, N, 3 * D);

        std::vector<Real>& probs = bt ? bt->probs : probs_scratch;
        if (bt) probs.resize(static_cast<std::size_t>(heads) * N * N);
        for (int hh = 0; hh < heads; ++hh) {
            Real* ph = bt ? probs.data() + static_cast<std::size_t>(hh) * N * N : probs.data();
            const Real* q = qkv.data() + hh * dh;
            const Real* kx = qkv.data() + D + hh * dh;
            const Real* v = qkv.data() + 2 * D + hh * dh;
            k::gemm<Real>(false, true, N, N, dh, attn_scale, q, 3 * D, kx, 3 * D, Real(0), ph, N);
            k::softmax_rows(ph, N, N);
            k::gemm<Real>(false, false, N, dh, N, Real(1), ph, N, v, 3 * D, Real(0), ctx.data() + hh * dh, D);
        }
        k::gemm<Real>(false, false, N, D, D, Real(1), ctx.data(), D, P + b.proj_w, D, Real(0), o.data(), D);
        k::add_bias_rows(o.data(), P + b.proj_b, N, D);
        k::gated_residual_forward(h.data(), gate1, o.data(), N, D);
        if (bt) bt->h1 = h;

        k::layer_norm_forward(h.data(), N, D, Real(1e-6), n2.data(), mean.data(), rstd2.data());
        k::modulate_forward(n2.data(), shift2, scale2, N, D, m.data());
        k::gemm<Real>(false, false, N, F, D, Real(1), m.data(), D, P + b.fc1_w, F, Real(0), u.data(), F);
        k::add_bias_rows(u.data(), P + b.fc1_b, N, F);
        k::gelu_forward(u.data(), g.data(), static_cast<long>(u.size()));
        k::gemm<Real>(false, false, N, D, F, Real(1), g.data(), F, P + b.fc2_w, D, Real(0), f.data(), D);
        k::add_bias_rows(f.data(), P + b.fc2_b, N, D);
        k::gated_residual_forward(h.data(), gate2, f.data(), N, D);
        check_finite(h, l, "block output");

        if (bt) {
            bt->n1 = n1;
            bt->rstd1 = rstd1;
            bt->a = a;
            bt->qkv = qkv;
            bt->ctx = ctx;
            bt->o = o;
            bt->n2 = n2;
            bt->rstd2 = rstd2;
            bt->m = m;
            bt->u = u;
            bt->g = g;
            bt->f = f;
            bt->mod = mod;
        }
    }

    std::vector<Real> fmod(2 * D), nf(h.size()), rstdf(N), y(h.size()), out(static_cast<std::size_t>(N) * C), gain(C);
    vec_mat(cvec.data(), P + off.fada_w, P + off.fada_b, D, 2 * D, fmod.data());
    k::layer_norm_forward(h.data(), N, D, Real(1e-6), nf.data(), mean.data(), rstdf.data());
    k::modulate_forward(nf.data(), fmod.data(), fmod.data() + D, N, D, y.data());
    k::gemm<Real>(false, false, N, C, D, Real(1), y.data(), D, P + off.head_w, C, Real(0), out.data(), C);
    k::add_bias_rows(out.data(), P + off.head_b, N, C);
    vec_mat(cvec.data(), P + off.skip_w, P + off.skip_b, D, C, gain.data());
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch)
            out[static_cast<std::size_t>(n) * C + ch] += gain[ch] * x[static_cast<std::size_t>(n) * Cin + ch];
    check_finite(out, c.layers, "velocity head");

    if (tape) {
        tape->h_final = h;
        tape->nf = nf;
        tape->rstd_f = rstdf;
        tape->y = y;
        tape->fmod = fmod;
        tape->gain = gain;
    }

    BasicTensor<Real> v({K, C, c.latent_height(), c.latent_width()});
    for (int kk = 0; kk < K; ++kk)
        for (int ch = 0; ch < C; ++ch) {
            Real* dst = v.data() + (static_cast<std::size_t>(kk) * C + ch) * S;
            for (int s = 0; s < S; ++s) dst[s] = out[static_cast<std::size_t>(kk * S + s) * C + ch];
        }
    return v;
}

template <typename Real>
void DiT<Real>::backward(const Tape& tape, const BasicTensor<Real>& d_output, std::span<Real> grads) const {
    const ModelConfig& c = config_;
    const int K = c.chunks();
    const int S = c.tokens_per_chunk();
    const int N = c.tokens();
    const int D = c.model_width;
    const int F = c.mlp_ratio * D;
    const int C = c.latent_channels();
    const int Cin = c.input_channels();
    const int heads = c.heads;
    const int head_dim = D / heads;
    const Real attn_scale = Real(1) / std::sqrt(static_cast<Real>(head_dim));
    if (grads.size() != params_.size()) throw std::invalid_argument("gradient buffer size mismatch");
    if (static_cast<int>(tape.blocks.size()) != c.layers) throw std::invalid_argument("tape does not match the model");
    const Offsets off = resolve_offsets(layout_, c.layers);
    const Real* P = params_.data();
    Real* G = grads.data();

    std::vector<Real> dout(static_cast<std::size_t>(N) * C);
    for (int kk = 0; kk < K; ++kk)
        for (int ch = 0; ch < C; ++ch) {
            const Real* src = d_output.data() + (static_cast<std::size_t>(kk) * C + ch) * S;
            for (int s = 0; s < S; ++s) dout[static_cast<std::size_t>(kk * S + s) * C + ch] = src[s];
        }

    std::vector<Real> dc(D, Real(0));

    // Skip gain.
    std::vector<Real> dgain(C, Real(0));
    for (int n = 0; n < N; ++n)
        for (int ch = 0; ch < C; ++ch)
            dgain[ch] += dout[static_cast<std::size_t>(n) * C + ch] * tape.x[static_cast<std::size_t>(n) * Cin + ch];
    vec_mat_backward(tape.c.data(), P + off.skip_w, dgain.data(), D, C, G + off.skip_w, G + off.skip_b, dc.data());

    // Head and final adaptive norm.
    k::gemm<Real>(true, false, D, C, N, Real(1), tape.y.data(), D, dout.data(), C, Real(1), G + off.head_w, C);
    k::accumulate_column_sums(dout.data(), N, C, G + off.head_b);
    std::vector<Real> dy(static_cast<std::size_t>(N) * D);
    k::gemm<Real>(false, true, N, D, C, Real(1), dout.data(), C, P + off.head_w, C, Real(0), dy.data(), D);
    std::vector<Real> dfmod(2 * D, Real(0)), dn(dy.size());
    k::modulate_backward(dy.data(), tape.nf.data(), tape.fmod.data() + D, N, D, dn.data(), dfmod.data(), dfmod.data() + D);
    std::vector<Real> dh(dy.size(), Real(0));
    k::layer_norm_backward(dn.data(), tape.nf.data(), tape.rstd_f.data(), N, D, dh.data());
    vec_mat_backward(tape.c.data(), P + off.fada_w, dfmod.data(), D, 2 * D, G + off.fada_w, G + off.fada_b, dc.data());

    std::vector<Real> df(dh.size()), dg(static_cast<std::size_t>(N) * F), du(dg.size()), dm(dh.size());
    std::vector<Real> dctx(dh.size()), dqkv(static_cast<std::size_t>(N) * 3 * D), da(dh.size()), dp(static_cast<std::size_t>(N) * N);
    std::vector<Real> dmod(6 * D);

    for (int l = c.layers - 1; l >= 0; --l) {
        const BlockOffsets& b = off.blocks[l];
        const BlockTape& bt = tape.blocks[l];
        const Real* scale1 = bt.mod.data() + D;
        const Real* gate1 = bt.mod.data() + 2 * D;
        const Real* scale2 = bt.mod.data() + 4 * D;
        const Real* gate2 = bt.mod.data() + 5 * D;
        std::fill(dmod.begin(), dmod.end(), Real(0));
        Real* dshift1 = dmod.data();
        Real* dscale1 = dmod.data() + D;
        Real* dgate1 = dmod.data() + 2 * D;
        Real* dshift2 = dmod.data() + 3 * D;
        Real* dscale2 = dmod.data() + 4 * D;
        Real* dgate2 = dmod.data() + 5 * D;

        // MLP branch; dh holds d/d(block output) and keeps flowing as the residual.
        k::gated_residual_backward(dh.data(), gate2, bt.f.data(), N, D, df.data(), dgate2);
        k::gemm<Real>(true, false, F, D, N, Real(1), bt.g.data(), F, df.data(), D, Real(1), G + b.fc2_w, D);
        k::accumulate_column_sums(df.data(), N, D, G + b.fc2_b);
        k::gemm<Real>(false, true, N, F, D, Real(1), df.data(), D, P + b.fc2_w, D, Real(0), dg.data(), F);
        k::gelu_backward(bt.u.data(), dg.data(), du.data(), static_cast<long>(du.size()));
        k::gemm<Real>(true, false, D, F, N, Real(1), bt.m.data(), D, du.data(), F, Real(1), G + b.fc1_w, F);
        k::accumulate_column_sums(du.data(), N, F, G + b.fc1_b);
        k::gemm<Real>(false, true, N, D, F, Real(1), du.data(), F, P + b.fc1_w, F, Real(0), dm.data(), D);
        k::modulate_backward(dm.data(), bt.n2.data(), scale2, N, D, dn.data(), dshift2, dscale2);
        k::layer_norm_backward(dn.data(), bt.n2.data(), bt.rstd2.data(), N, D, dh.data());

        // Attention branch.
        k::gated_residual_backward(dh.data(), gate1, bt.o.data(), N, D, df.data(), dgate1);
        k::gemm<Real>(true, false, D, D, N, Real(1), bt.ctx.data(), D, df.data(), D, Real(1), G + b.proj_w, D);
        k::accumulate_column_sums(df.data(), N, D, G + b.proj_b);
        k::gemm<Real>(false, true, N, D, D, Real(1), df.data(), D, P + b.proj_w, D, Real(0), dctx.data(), D);
        for (int hh = 0; hh < heads; ++hh) {
            const Real* ph = bt.probs.data() + static_cast<std::size_t>(hh) * N * N;
            const Real* q = bt.qkv.data() + hh * head_dim;
            const Real* kx = bt.qkv.data() + D + hh * head_dim;
            const Real* v = bt.qkv.data() + 2 * D + hh * head_dim;
            const Real* dctx_h = dctx.data() + hh * head_dim;
            k::gemm<Real>(false, true, N, N, head_dim, Real(1), dctx_h, D, v, 3 * D, Real(0), dp.data(), N);
            k::gemm<Real>(true, false, N, head_dim, N, Real(1), ph, N, dctx_h, D, Real(0), dqkv.data() + 2 * D + hh * head_dim, 3 * D);
            k::softmax_backward_rows(ph, dp.data(), N, N);
            k::gemm<Real>(false, false, N, head_dim, N, attn_scale, dp.data(), N, kx, 3 * D, Real(0), dqkv.data() + hh * head_dim, 3 * D);
            k::gemm<Real>(true, false, N, head_dim, N, attn_scale, dp.data(), N, q, 3 * D, Real(0), dqkv.data() + D + hh * head_dim, 3 * D);
        }
        k::gemm<Real>(true, false, D, 3 * D, N, Real(1), bt.a.data(), D, dqkv.data(), 3 * D, Real(1), G + b.qkv_w, 3 * D);
        k::accumulate_column_sums(dqkv.data(), N, 3 * D, G + b.qkv_b);
        k::gemm<Real>(false, true, N, D, 3 * D, Real(1), dqkv.data(), 3 * D, P + b.qkv_w, 3 * D, Real(0), da.data(), D);
        k::modulate_backward(da.data(), bt.n1.data(), scale1, N, D, dn.data(), dshift1, dscale1);
        k::layer_norm_backward(dn.data(), bt.n1.data(), bt.rstd1.data(), N, D, dh.data());

        vec_mat_backward(tape.c.data(), P + b.ada_w, dmod.data(), D, 6 * D, G + b.ada_w, G + b.ada_b, dc.data());
    }

    // dh is now d/d(embedded tokens).
    if (tape.mode == TaskMode::Forward) {
        std::vector<Real> dpacked(static_cast<std::size_t>(K) * D, Real(0));
        const Real gamma = static_cast<Real>(c.gamma);
        for (int kk = 0; kk < K; ++kk)
            for (int s = 0; s < S; ++s) {
                const Real* row = dh.data() + static_cast<std::size_t>(kk * S + s) * D;
                for (int i = 0; i < D; ++i) dpacked[static_cast<std::size_t>(kk) * D + i] += gamma * row[i];
            }
        tie::pack_chunk_embeddings_backward<Real>(
            tape.plan, dpacked, c.tie_width,
            std::span<Real>(G + off.tie, static_cast<std::size_t>(c.tie_width) * kModalityCount));
    }
    k::gemm<Real>(true, false, Cin, D, N, Real(1), tape.x.data(), Cin, dh.data(), D, Real(1), G + off.patch_w, D);
    k::accumulate_column_sums(dh.data(), N, D, G + off.patch_b);

    // Timestep MLP.
    std::vector<Real> dtemb(D), ds1(D, Real(0)), da1(D);
    k::silu_backward(tape.temb.data(), dc.data(), dtemb.data(), D);
    if (tape.mode == TaskMode::Inverse) {
        Real* de = G + off.modality + static_cast<std::size_t>(code(tape.target)) * D;
        for (int i = 0; i < D; ++i) de[i] += dtemb[i];
    }
    vec_mat_backward(tape.s1.data(), P + off.t2_w, dtemb.data(), D, D, G + off.t2_w, G + off.t2_b, ds1.data());
    k::silu_backward(tape.a1.data(), ds1.data(), da1.data(), D);
    std::vector<Real> dtemb0(D, Real(0));
    vec_mat_backward(tape.temb0.data(), P + off.t1_w, da1.data(), D, D, G + off.t1_w, G + off.t1_b, dtemb0.data());
}

DiT<double> to_double(const DiT<float>& model) {
    DiT<double> out(model.config());
    std::copy(model.params().begin(), model.params().end(), out.params().begin());
    return out;
}

template class DiT<float>;
template class DiT<double>;

}  // namespace vrgbx
