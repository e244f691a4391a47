// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/conditioning.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <set>

#include "vrgbx/image_io.hpp"
#include "vrgbx/rng.hpp"

namespace vrgbx {

namespace fs = std::filesystem;
using nlohmann::json;

const KeyframeEdit* EditSpec::at_frame(int frame) const {
    for (const auto& k : keyframes)
        if (k.frame == frame) return &k;
    return nullptr;
}

void EditSpec::validate(VideoDims dims) const {
    std::set<int> seen;
    const std::vector<int> image_shape{3, dims.height, dims.width};
    for (std::size_t i = 0; i < keyframes.size(); ++i) {
        const KeyframeEdit& k = keyframes[i];
        const std::string base = "keyframes[" + std::to_string(i) + "]";
        if (k.frame < 0 || k.frame >= dims.frames) throw ValidationError(base + ".frame", "outside the clip");
        if (!seen.insert(k.frame).second) throw ValidationError(base + ".frame", "duplicate keyframe index");
        if (i > 0 && k.frame < keyframes[i - 1].frame) throw ValidationError(base + ".frame", "keyframes not sorted");
        if (k.modalities.empty()) throw ValidationError(base + ".modalities", "edited modality set is empty");
        for (ModalityId m : k.modalities.members()) {
            auto it = k.intrinsics.find(m);
            if (it == k.intrinsics.end())
                throw ValidationError(base + ".intrinsics." + std::string(to_string(m)), "missing edited frame");
            if (it->second.shape() != image_shape)
                throw ValidationError(base + ".intrinsics." + std::string(to_string(m)), "image shape mismatch");
        }
        if (k.rgb.shape() != image_shape) throw ValidationError(base + ".rgb", "missing or mis-shaped edited RGB keyframe");
    }
}

ModalitySet conflicted_set(const EditSpec& edit) {
    ModalitySet out;
    for (const auto& k : edit.keyframes) out = out | k.modalities;
    return out;
}

ConditioningPlan sample_plan(int frames, const EditSpec& edit, const IntrinsicStack& gt, std::uint64_t seed,
                             PlanOptions options) {
    const VideoDims dims = video_dims(gt.albedo);
    if (dims.frames != frames) throw ValidationError("frames", "plan length differs from the intrinsic stack");
    edit.validate(dims);

    const ModalitySet conflicted = conflicted_set(edit);
    std::vector<ModalityId> admissible = conflicted.complement().members();
    const bool has_plain_frames = static_cast<int>(edit.keyframes.size()) < frames;
    if (admissible.empty() && has_plain_frames) {
        if (!options.allow_degenerate_plans) {
            throw PlanError(
                "every modality is edited at some keyframe, leaving no conflict-free conditioning for the other "
                "frames; add keyframes or set allow_degenerate_plans");
        }
        std::array<int, kModalityCount> uses{};
        for (const auto& k : edit.keyframes)
            for (ModalityId m : k.modalities.members()) ++uses[code(m)];
        const int least = static_cast<int>(std::min_element(uses.begin(), uses.end()) - uses.begin());
        admissible = {modality_from_code(least)};
    }

    Rng rng(derive_seed(seed, "plan"));
    ConditioningPlan plan;
    plan.modality.resize(frames);
    plan.source.resize(frames);
    for (int t = 0; t < frames; ++t) {
        if (const KeyframeEdit* k = edit.at_frame(t)) {
            const auto members = k->modalities.members();
            plan.modality[t] = members[rng.index(static_cast<int>(members.size()))];
            plan.source[t] = FrameSource::Edited;
        } else {
            plan.modality[t] = admissible[rng.index(static_cast<int>(admissible.size()))];
            plan.source[t] = FrameSource::Original;
        }
    }
    return plan;
}

Tensor assemble_conditioning(const ConditioningPlan& plan, const IntrinsicStack& gt, const EditSpec& edit) {
    const VideoDims dims = video_dims(gt.albedo);
    if (plan.frames() != dims.frames || static_cast<int>(plan.source.size()) != dims.frames)
        throw ValidationError("plan", "length differs from the intrinsic stack");
    Tensor out(dims.shape());
    for (int t = 0; t < dims.frames; ++t) {
        const ModalityId m = plan.modality[t];
        std::span<const float> src;
        if (plan.source[t] == FrameSource::Edited) {
            const KeyframeEdit* k = edit.at_frame(t);
            if (!k) throw ValidationError("plan.source", "frame " + std::to_string(t) + " marked edited but is not a keyframe");
            auto it = k->intrinsics.find(m);
            if (it == k->intrinsics.end())
                throw ValidationError("edit.intrinsics", "keyframe " + std::to_string(t) + " has no edited " +
                                                             std::string(to_string(m)) + " frame");
            src = it->second.span();
        } else {
            src = gt.channel(m).slice(t);
        }
        if (src.size() != out.slice(t).size()) throw ValidationError("edit.intrinsics", "image shape mismatch");
        std::copy(src.begin(), src.end(), out.slice(t).begin());
    }
    return out;
}

ConditioningPlan make_eval_plan(int frames, const EvalScheme& scheme, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "eval-plan"));
    ConditioningPlan plan;
    plan.modality.resize(frames);
    plan.source.assign(frames, FrameSource::Original);
    auto pick_from = [&](ModalitySet allowed) {
        const auto members = allowed.members();
        return members[rng.index(static_cast<int>(members.size()))];
    };
    std::visit(
        [&](const auto& s) {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, FullRandom>) {
                for (int t = 0; t < frames; ++t) plan.modality[t] = modality_from_code(rng.index(kModalityCount));
            } else if constexpr (std::is_same_v<S, DropModality>) {
                const ModalitySet allowed = ModalitySet{s.modality}.complement();
                for (int t = 0; t < frames; ++t) plan.modality[t] = pick_from(allowed);
            } else {
                const ModalitySet rest = ModalitySet{s.modality}.complement();
                for (int t = 0; t < frames; ++t) plan.modality[t] = t == 0 ? s.modality : pick_from(rest);
            }
        },
        scheme);
    return plan;
}

std::string scheme_name(const EvalScheme& scheme) {
    return std::visit(
        [](const auto& s) -> std::string {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, FullRandom>) return "full_random";
            else if constexpr (std::is_same_v<S, DropModality>) return "drop_" + std::string(to_string(s.modality));
            else return "first_frame_" + std::string(to_string(s.modality));
        },
        scheme);
}

nlohmann::json plan_to_json(const ConditioningPlan& plan) {
    json out = json::array();
    for (int t = 0; t < plan.frames(); ++t) {
        out.push_back({{"frame", t + 1},
                       {"modality", to_string(plan.modality[t])},
                       {"source", plan.source[t] == FrameSource::Edited ? "edited" : "original"}});
    }
    return out;
}

namespace {

Tensor read_image(const fs::path& path) {
    int h = 0;
    int w = 0;
    std::vector<float> px = read_png(path, h, w);
    return Tensor({3, h, w}, std::move(px));
}

std::string keyframe_file(int frame1, std::string_view what) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "kf%03d_%.*s.png", frame1, static_cast<int>(what.size()), what.data());
    return buf;
}

}  // namespace

EditSpec load_edit_spec(const fs::path& json_path) {
    const auto bytes = read_file_bytes(json_path);
    json j;
    try {
        j = json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw IoError(json_path, e.what());
    }
    const fs::path dir = json_path.parent_path();
    EditSpec edit;
    try {
        if (j.value("format", std::string()) != kEditFormat)
            throw ValidationError("format", "expected " + std::string(kEditFormat));
        for (const auto& jk : j.at("keyframes")) {
            KeyframeEdit k;
            k.frame = jk.at("frame").get<int>() - 1;
            for (const auto& m : jk.at("modalities")) k.modalities.insert(modality_from_string(m.get<std::string>()));
            for (const auto& [name, file] : jk.at("intrinsics").items())
                k.intrinsics[modality_from_string(name)] = read_image(dir / file.get<std::string>());
            k.rgb = read_image(dir / jk.at("rgb").get<std::string>());
            edit.keyframes.push_back(std::move(k));
        }
    } catch (const json::exception& e) {
        throw ValidationError("edit", e.what());
    }
    std::sort(edit.keyframes.begin(), edit.keyframes.end(),
              [](const KeyframeEdit& a, const KeyframeEdit& b) { return a.frame < b.frame; });
    return edit;
}

void save_edit_spec(const fs::path& json_path, const EditSpec& edit, const nlohmann::json& extra) {
    const fs::path dir = json_path.parent_path();
    std::error_code ec;
    if (!dir.empty()) fs::create_directories(dir, ec);
    json j = extra;
    j["format"] = kEditFormat;
    json kfs = json::array();
    for (const auto& k : edit.keyframes) {
        const int f1 = k.frame + 1;
        json mods = json::array();
        for (ModalityId m : k.modalities.members()) mods.push_back(to_string(m));
        json intr = json::object();
        for (const auto& [m, img] : k.intrinsics) {
            const std::string file = keyframe_file(f1, to_string(m));
            write_png(dir / file, img.span(), img.dim(1), img.dim(2));
            intr[std::string(to_string(m))] = file;
        }
        const std::string rgb_file = keyframe_file(f1, "rgb");
        write_png(dir / rgb_file, k.rgb.span(), k.rgb.dim(1), k.rgb.dim(2));
        kfs.push_back({{"frame", f1}, {"modalities", mods}, {"intrinsics", intr}, {"rgb", rgb_file}});
    }
    j["keyframes"] = kfs;
    write_file_atomic(json_path, j.dump(1));
}

}  // namespace vrgbx
