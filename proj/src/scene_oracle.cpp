// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/scene_oracle.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include "vrgbx/image_io.hpp"
#include "vrgbx/rng.hpp"

namespace vrgbx {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 normalized(const Vec3& v) {
    const double n = std::sqrt(dot(v, v));
    return {v[0] / n, v[1] / n, v[2] / n};
}

bool in_unit(double v) { return v >= 0.0 && v <= 1.0 && std::isfinite(v); }

void check_rgb(const Rgb& c, const std::string& field) {
    for (double v : c)
        if (!in_unit(v)) throw ValidationError(field, "component " + std::to_string(v) + " outside [0,1]");
}

void check_unit(double v, const std::string& field) {
    if (!in_unit(v)) throw ValidationError(field, "value " + std::to_string(v) + " outside [0,1]");
}

void check_direction(const Vec3& d, const std::string& field) {
    const double n = std::sqrt(dot(d, d));
    if (!std::isfinite(n) || std::abs(n - 1.0) >= 1e-6) throw ValidationError(field, "not unit-norm");
}

std::string idx(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

std::string shape_name(ShapeKind s) { return s == ShapeKind::Disc ? "disc" : "background_plane"; }

ShapeKind shape_from_name(const std::string& s) {
    if (s == "disc") return ShapeKind::Disc;
    if (s == "background_plane") return ShapeKind::BackgroundPlane;
    throw ValidationError("objects.shape", "unknown shape '" + s + "'");
}

}  // namespace

const SceneObject* SceneSpec::find(int object_id) const {
    for (const auto& o : objects)
        if (o.id == object_id) return &o;
    return nullptr;
}

SceneObject* SceneSpec::find(int object_id) {
    for (auto& o : objects)
        if (o.id == object_id) return &o;
    return nullptr;
}

bool SceneSpec::operator==(const SceneSpec& other) const { return to_json(*this) == to_json(other); }

Tensor& IntrinsicStack::channel(ModalityId m) {
    switch (m) {
        case ModalityId::Albedo: return albedo;
        case ModalityId::Normal: return normal;
        case ModalityId::Material: return material;
        case ModalityId::Irradiance: return irradiance;
    }
    throw std::out_of_range("modality");
}

const Tensor& IntrinsicStack::channel(ModalityId m) const {
    return const_cast<IntrinsicStack*>(this)->channel(m);
}

void validate(const SceneSpec& spec) {
    const VideoDims& d = spec.dims;
    if (d.frames < 1 || d.frames % 4 != 1) throw ValidationError("dims.T", "frame count must satisfy T = 1 (mod 4)");
    if (d.height < 1) throw ValidationError("dims.H", "must be positive");
    if (d.width < 1) throw ValidationError("dims.W", "must be positive");
    std::set<int> ids;
    for (std::size_t i = 0; i < spec.objects.size(); ++i) {
        const SceneObject& o = spec.objects[i];
        const std::string base = idx("objects", i);
        if (!ids.insert(o.id).second) throw ValidationError(base + ".id", "duplicate object id");
        if (o.shape == ShapeKind::Disc) {
            if (!(o.radius > 0) || !std::isfinite(o.radius)) throw ValidationError(base + ".radius", "must be positive");
            if (static_cast<int>(o.center.size()) != d.frames)
                throw ValidationError(base + ".center", "trajectory length differs from T");
            for (std::size_t t = 0; t < o.center.size(); ++t) {
                const Vec2& c = o.center[t];
                if (!(c[0] >= 0 && c[0] <= d.width && c[1] >= 0 && c[1] <= d.height))
                    throw ValidationError(idx(base + ".center", t), "outside the frame");
            }
        }
        check_rgb(o.albedo, base + ".albedo");
        check_unit(o.roughness, base + ".roughness");
        check_unit(o.metallic, base + ".metallic");
        check_unit(o.ao, base + ".ao");
    }
    if (static_cast<int>(spec.light.direction.size()) != d.frames)
        throw ValidationError("light.direction", "trajectory length differs from T");
    if (static_cast<int>(spec.light.color.size()) != d.frames)
        throw ValidationError("light.color", "trajectory length differs from T");
    for (std::size_t t = 0; t < spec.light.direction.size(); ++t)
        check_direction(spec.light.direction[t], idx("light.direction", t));
    for (std::size_t t = 0; t < spec.light.color.size(); ++t) check_rgb(spec.light.color[t], idx("light.color", t));
    check_rgb(spec.light.ambient, "light.ambient");
}

RenderResult render_scene(const SceneSpec& spec) {
    validate(spec);
    const VideoDims d = spec.dims;
    const std::size_t plane = static_cast<std::size_t>(d.height) * d.width;
    RenderResult r;
    r.rgb = Tensor(d.shape());
    r.specular = Tensor(d.shape());
    r.gt.albedo = Tensor(d.shape());
    r.gt.normal = Tensor(d.shape());
    r.gt.material = Tensor(d.shape());
    r.gt.irradiance = Tensor(d.shape());

#pragma omp parallel for schedule(static)
    for (int t = 0; t < d.frames; ++t) {
        // Painter's pass: top-most object index and its normal per pixel.
        std::vector<int> top(plane, -1);
        std::vector<Vec3> normal(plane, Vec3{0.0, 0.0, 1.0});
        for (std::size_t oi = 0; oi < spec.objects.size(); ++oi) {
            const SceneObject& o = spec.objects[oi];
            if (o.shape == ShapeKind::BackgroundPlane) {
                std::fill(top.begin(), top.end(), static_cast<int>(oi));
                std::fill(normal.begin(), normal.end(), Vec3{0.0, 0.0, 1.0});
                continue;
            }
            const double cx = o.center[t][0];
            const double cy = o.center[t][1];
            const double rs = kCapSphereScale * o.radius;
            const int y0 = std::max(0, static_cast<int>(std::floor(cy - o.radius)));
            const int y1 = std::min(d.height - 1, static_cast<int>(std::ceil(cy + o.radius)));
            const int x0 = std::max(0, static_cast<int>(std::floor(cx - o.radius)));
            const int x1 = std::min(d.width - 1, static_cast<int>(std::ceil(cx + o.radius)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double px = x + 0.5 - cx;
                    const double py = y + 0.5 - cy;
                    if (px * px + py * py >= o.radius * o.radius) continue;
                    const double nx = px / rs;
                    const double ny = -py / rs;
                    const std::size_t q = static_cast<std::size_t>(y) * d.width + x;
                    top[q] = static_cast<int>(oi);
                    normal[q] = {nx, ny, std::sqrt(std::max(0.0, 1.0 - nx * nx - ny * ny))};
                }
            }
        }

        const Vec3& l = spec.light.direction[t];
        const Rgb& lc = spec.light.color[t];
        const Rgb& amb = spec.light.ambient;
        const Vec3 h = normalized({l[0] + kViewDirection[0], l[1] + kViewDirection[1], l[2] + kViewDirection[2]});
        const std::size_t base = static_cast<std::size_t>(t) * 3 * plane;
        for (std::size_t q = 0; q < plane; ++q) {
            const Vec3& n = normal[q];
            const double ndl = std::max(0.0, dot(n, l));
            const double ndh = std::max(0.0, dot(n, h));
            Rgb albedo{0.0, 0.0, 0.0};
            double rough = 1.0;
            double metal = 0.0;
            double ao = 1.0;
            if (top[q] >= 0) {
                const SceneObject& o = spec.objects[top[q]];
                albedo = o.albedo;
                rough = o.roughness;
                metal = o.metallic;
                ao = o.ao;
            }
            const double lobe = metal * (1.0 - rough) * std::pow(ndh, specular_exponent(rough));
            for (int c = 0; c < 3; ++c) {
                const double irr = ao * std::clamp(amb[c] + lc[c] * ndl, 0.0, 1.0);
                const double spec_c = lobe * lc[c];
                const std::size_t i = base + c * plane + q;
                r.gt.irradiance[i] = static_cast<float>(irr);
                r.gt.albedo[i] = static_cast<float>(albedo[c]);
                r.gt.normal[i] = static_cast<float>((n[c] + 1.0) / 2.0);
                r.specular[i] = static_cast<float>(spec_c);
                r.rgb[i] = static_cast<float>(std::clamp(albedo[c] * irr + spec_c, 0.0, 1.0));
            }
            r.gt.material[base + 0 * plane + q] = static_cast<float>(rough);
            r.gt.material[base + 1 * plane + q] = static_cast<float>(metal);
            r.gt.material[base + 2 * plane + q] = static_cast<float>(ao);
        }
    }
    return r;
}

ModalitySet EditOp::touched_modalities() const {
    return std::visit(
        [](const auto& op) -> ModalitySet {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, RecolorAlbedo>) return {ModalityId::Albedo};
            if constexpr (std::is_same_v<T, SetRoughness>) return {ModalityId::Material};
            return {ModalityId::Irradiance};
        },
        kind);
}

std::string EditOp::name() const {
    return std::visit(
        [](const auto& op) -> std::string {
            using T = std::decay_t<decltype(op)>;
            if constexpr (std::is_same_v<T, RecolorAlbedo>) return "recolor_albedo";
            if constexpr (std::is_same_v<T, SetLightColor>) return "set_light_color";
            if constexpr (std::is_same_v<T, SetLightDirection>) return "set_light_direction";
            return "set_roughness";
        },
        kind);
}

SceneSpec apply_edit(const SceneSpec& spec, const EditOp& op) {
    SceneSpec out = spec;
    std::visit(
        [&](const auto& e) {
            using T = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<T, RecolorAlbedo>) {
                check_rgb(e.rgb, "edit.rgb");
                SceneObject* o = out.find(e.object_id);
                if (!o) throw ValidationError("edit.object_id", "unknown object " + std::to_string(e.object_id));
                o->albedo = e.rgb;
            } else if constexpr (std::is_same_v<T, SetLightColor>) {
                check_rgb(e.rgb, "edit.rgb");
                std::fill(out.light.color.begin(), out.light.color.end(), e.rgb);
            } else if constexpr (std::is_same_v<T, SetLightDirection>) {
                check_direction(e.direction, "edit.direction");
                std::fill(out.light.direction.begin(), out.light.direction.end(), e.direction);
            } else {
                check_unit(e.roughness, "edit.roughness");
                SceneObject* o = out.find(e.object_id);
                if (!o) throw ValidationError("edit.object_id", "unknown object " + std::to_string(e.object_id));
                o->roughness = e.roughness;
            }
        },
        op.kind);
    return out;
}

SceneSpec sample_scene_spec(std::uint64_t seed, VideoDims dims) {
    if (dims.frames < 1 || dims.frames % 4 != 1) throw ValidationError("dims.T", "frame count must satisfy T = 1 (mod 4)");
    if (dims.height < 8 || dims.width < 8) throw ValidationError("dims", "frames must be at least 8x8");
    Rng rng(derive_seed(seed, "scene"));
    const int T = dims.frames;
    const double W = dims.width;
    const double H = dims.height;
    const double span = std::min(W, H);
    auto phase = [&](int t) { return T > 1 ? static_cast<double>(t) / (T - 1) : 0.0; };

    SceneSpec spec;
    spec.dims = dims;
    spec.seed = seed;

    SceneObject bg;
    bg.id = 0;
    bg.shape = ShapeKind::BackgroundPlane;
    for (auto& c : bg.albedo) c = rng.uniform(0.25, 0.75);
    bg.roughness = rng.uniform(0.5, 1.0);
    bg.metallic = 0.0;
    bg.ao = rng.uniform(0.85, 1.0);
    spec.objects.push_back(bg);

    const int n_discs = 1 + rng.index(4);
    for (int i = 0; i < n_discs; ++i) {
        SceneObject o;
        o.id = i + 1;
        o.shape = ShapeKind::Disc;
        o.radius = rng.uniform(0.12, 0.22) * span;
        for (auto& c : o.albedo) c = rng.uniform(0.1, 0.9);
        o.roughness = rng.uniform(0.15, 0.9);
        o.metallic = rng.bernoulli(0.5) ? 0.0 : rng.uniform(0.4, 1.0);
        o.ao = rng.uniform(0.6, 1.0);
        const double lo_x = o.radius;
        const double hi_x = W - o.radius;
        const double lo_y = o.radius;
        const double hi_y = H - o.radius;
        if (rng.bernoulli(0.5)) {
            const Vec2 p0{rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)};
            const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double len = rng.uniform(0.1, 0.35) * span;
            const Vec2 p1{std::clamp(p0[0] + len * std::cos(ang), lo_x, hi_x),
                          std::clamp(p0[1] + len * std::sin(ang), lo_y, hi_y)};
            for (int t = 0; t < T; ++t) {
                const double a = phase(t);
                o.center.push_back({p0[0] + a * (p1[0] - p0[0]), p0[1] + a * (p1[1] - p0[1])});
            }
        } else {
            const double orbit = rng.uniform(0.05, 0.15) * span;
            const Vec2 c{rng.uniform(lo_x + orbit, hi_x - orbit), rng.uniform(lo_y + orbit, hi_y - orbit)};
            const double phi0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double sweep = rng.uniform(0.25, 1.0) * std::numbers::pi * (rng.bernoulli(0.5) ? 1.0 : -1.0);
            for (int t = 0; t < T; ++t) {
                const double phi = phi0 + sweep * phase(t);
                o.center.push_back({c[0] + orbit * std::cos(phi), c[1] + orbit * std::sin(phi)});
            }
        }
        spec.objects.push_back(std::move(o));
    }

    const double elev0 = rng.uniform(15.0, 50.0) * std::numbers::pi / 180.0;
    const double elev1 = std::clamp(elev0 + rng.uniform(-0.2, 0.2), 0.1, 1.0);
    const double az0 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double az_sweep = rng.uniform(-0.5, 0.5) * std::numbers::pi;
    Rgb col0;
    Rgb col1;
    for (auto& c : col0) c = rng.uniform(0.6, 1.0);
    for (auto& c : col1) c = rng.uniform(0.6, 1.0);
    const double amb = rng.uniform(0.05, 0.25);
    for (int c = 0; c < 3; ++c) spec.light.ambient[c] = std::clamp(amb + rng.uniform(-0.03, 0.03), 0.0, 1.0);
    for (int t = 0; t < T; ++t) {
        const double a = phase(t);
        const double s = a * a * (3.0 - 2.0 * a);
        const double elev = elev0 + s * (elev1 - elev0);
        const double az = az0 + s * az_sweep;
        spec.light.direction.push_back(
            normalized({std::sin(elev) * std::cos(az), std::sin(elev) * std::sin(az), std::cos(elev)}));
        Rgb col;
        for (int c = 0; c < 3; ++c) col[c] = col0[c] + s * (col1[c] - col0[c]);
        spec.light.color.push_back(col);
    }
    validate(spec);
    return spec;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const SceneSpec& spec) {
    json objs = json::array();
    for (const auto& o : spec.objects) {
        json centers = json::array();
        for (const auto& c : o.center) centers.push_back({c[0], c[1]});
        objs.push_back({{"id", o.id},
                        {"shape", shape_name(o.shape)},
                        {"center", centers},
                        {"radius", o.radius},
                        {"albedo", o.albedo},
                        {"roughness", o.roughness},
                        {"metallic", o.metallic},
                        {"ao", o.ao}});
    }
    return {{"objects", objs},
            {"light",
             {{"direction", spec.light.direction}, {"color", spec.light.color}, {"ambient", spec.light.ambient}}},
            {"dims", {{"T", spec.dims.frames}, {"H", spec.dims.height}, {"W", spec.dims.width}}},
            {"seed", spec.seed}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
    SceneSpec spec;
    try {
        for (const auto& jo : j.at("objects")) {
            SceneObject o;
            o.id = jo.at("id").get<int>();
            o.shape = shape_from_name(jo.at("shape").get<std::string>());
            for (const auto& c : jo.at("center")) o.center.push_back(c.get<Vec2>());
            o.radius = jo.at("radius").get<double>();
            o.albedo = jo.at("albedo").get<Rgb>();
            o.roughness = jo.at("roughness").get<double>();
            o.metallic = jo.at("metallic").get<double>();
            o.ao = jo.at("ao").get<double>();
            spec.objects.push_back(std::move(o));
        }
        const json& jl = j.at("light");
        spec.light.direction = jl.at("direction").get<std::vector<Vec3>>();
        spec.light.color = jl.at("color").get<std::vector<Rgb>>();
        spec.light.ambient = jl.at("ambient").get<Rgb>();
        const json& jd = j.at("dims");
        spec.dims = {jd.at("T").get<int>(), jd.at("H").get<int>(), jd.at("W").get<int>()};
        spec.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw ValidationError("scene", e.what());
    }
    validate(spec);
    return spec;
}

nlohmann::json to_json(const EditOp& op) {
    json j = {{"kind", op.name()}};
    std::visit(
        [&](const auto& e) {
            using T = std::decay_t<decltype(e)>;
            if constexpr (std::is_same_v<T, RecolorAlbedo>) {
                j["object_id"] = e.object_id;
                j["rgb"] = e.rgb;
            } else if constexpr (std::is_same_v<T, SetLightColor>) {
                j["rgb"] = e.rgb;
            } else if constexpr (std::is_same_v<T, SetLightDirection>) {
                j["direction"] = e.direction;
            } else {
                j["object_id"] = e.object_id;
                j["roughness"] = e.roughness;
            }
        },
        op.kind);
    return j;
}

EditOp edit_op_from_json(const nlohmann::json& j) {
    try {
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "recolor_albedo") return {RecolorAlbedo{j.at("object_id").get<int>(), j.at("rgb").get<Rgb>()}};
        if (kind == "set_light_color") return {SetLightColor{j.at("rgb").get<Rgb>()}};
        if (kind == "set_light_direction") return {SetLightDirection{j.at("direction").get<Vec3>()}};
        if (kind == "set_roughness") return {SetRoughness{j.at("object_id").get<int>(), j.at("roughness").get<double>()}};
        throw ValidationError("edit.kind", "unknown edit kind '" + kind + "'");
    } catch (const json::exception& e) {
        throw ValidationError("edit", e.what());
    }
}

// ---------------------------------------------------------------------------
// Dataset

std::string clip_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "clip_%05d", index);
    return buf;
}

std::uint64_t clip_seed(std::uint64_t dataset_seed, int clip_index) {
    return derive_seed(dataset_seed, "clip", static_cast<std::uint64_t>(clip_index));
}

nlohmann::json to_json(const DatasetManifest& m) {
    json clips = json::array();
    for (const auto& c : m.clips) clips.push_back({{"id", c.id}, {"seed", c.seed}, {"valid", c.valid}});
    return {{"format", m.format},
            {"dataset_seed", m.dataset_seed},
            {"dims", {{"T", m.dims.frames}, {"H", m.dims.height}, {"W", m.dims.width}}},
            {"clips", clips}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.format = j.at("format").get<std::string>();
        m.dataset_seed = j.at("dataset_seed").get<std::uint64_t>();
        const json& jd = j.at("dims");
        m.dims = {jd.at("T").get<int>(), jd.at("H").get<int>(), jd.at("W").get<int>()};
        for (const auto& c : j.at("clips"))
            m.clips.push_back({c.at("id").get<std::string>(), c.at("seed").get<std::uint64_t>(), c.at("valid").get<bool>()});
    } catch (const json::exception& e) {
        throw ValidationError("manifest", e.what());
    }
    if (m.format != kDatasetFormat)
        throw ValidationError("manifest.format", "expected " + std::string(kDatasetFormat) + ", found " + m.format);
    return m;
}

DatasetManifest load_manifest(const fs::path& root) {
    const auto bytes = read_file_bytes(root / "manifest.json");
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw IoError(root / "manifest.json", e.what());
    }
    return manifest_from_json(j);
}

void write_clip(const fs::path& clip_dir, const SceneSpec& spec, const RenderResult& r) {
    std::error_code ec;
    fs::create_directories(clip_dir, ec);
    if (ec) throw IoError(clip_dir, "cannot create directory: " + ec.message());
    write_file_atomic(clip_dir / "scene.json", to_json(spec).dump(1));
    write_video(clip_dir / "rgb", r.rgb);
    for (ModalityId m : kAllModalities) write_video(clip_dir / std::string(to_string(m)), r.gt.channel(m));
}

StoredClip load_clip(const fs::path& clip_dir) {
    StoredClip clip;
    const auto bytes = read_file_bytes(clip_dir / "scene.json");
    try {
        clip.spec = scene_from_json(json::parse(bytes.begin(), bytes.end()));
    } catch (const json::exception& e) {
        throw IoError(clip_dir / "scene.json", e.what());
    }
    const int T = clip.spec.dims.frames;
    clip.rgb = read_video(clip_dir / "rgb", T);
    for (ModalityId m : kAllModalities) clip.gt.channel(m) = read_video(clip_dir / std::string(to_string(m)), T);
    if (video_dims(clip.rgb) != clip.spec.dims) throw IoError(clip_dir, "stored frames disagree with scene dims");
    return clip;
}

DatasetManifest generate_dataset(std::uint64_t seed, int n_clips, VideoDims dims, const fs::path& out_dir,
                                 int workers) {
    if (n_clips < 0) throw ValidationError("n_clips", "must be non-negative");
    if (dims.frames < 1 || dims.frames % 4 != 1) throw ValidationError("dims.T", "frame count must satisfy T = 1 (mod 4)");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError(out_dir, "cannot create directory: " + ec.message());

    DatasetManifest manifest;
    manifest.dataset_seed = seed;
    manifest.dims = dims;
    manifest.clips.resize(n_clips);
    std::vector<std::string> errors(n_clips);

#pragma omp parallel for schedule(dynamic) num_threads(std::max(1, workers))
    for (int i = 0; i < n_clips; ++i) {
        ClipEntry& entry = manifest.clips[i];
        entry.id = clip_name(i);
        entry.seed = clip_seed(seed, i);
        const fs::path final_dir = out_dir / entry.id;
        const fs::path partial = out_dir / (entry.id + ".partial");
        try {
            const SceneSpec spec = sample_scene_spec(entry.seed, dims);
            const RenderResult r = render_scene(spec);
            std::error_code e2;
            fs::remove_all(partial, e2);
            fs::remove_all(final_dir, e2);
            write_clip(partial, spec, r);
            fs::rename(partial, final_dir);
        } catch (const std::exception& e) {
            std::error_code e2;
            fs::remove_all(partial, e2);
            entry.valid = false;
            errors[i] = e.what();
        }
    }
    write_file_atomic(out_dir / "manifest.json", to_json(manifest).dump(1));
    for (const auto& e : errors)
        if (!e.empty()) throw IoError(out_dir, "clip generation failed: " + e);
    return manifest;
}

}  // namespace vrgbx
