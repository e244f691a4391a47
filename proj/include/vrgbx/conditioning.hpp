// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrgbx/modality.hpp"
#include "vrgbx/scene_oracle.hpp"
#include "vrgbx/tensor.hpp"

namespace vrgbx {

/// One edited keyframe. Images are [3, H, W] in [0,1]; `frame` is 0-based.
struct KeyframeEdit {
    int frame = 0;
    ModalitySet modalities;
    std::map<ModalityId, Tensor> intrinsics;
    Tensor rgb;
};

struct EditSpec {
    std::vector<KeyframeEdit> keyframes;  // sorted by frame

    bool empty() const { return keyframes.empty(); }
    const KeyframeEdit* at_frame(int frame) const;

    /// Throws ValidationError when indices, modality sets, or images are
    /// inconsistent with a clip of the given dims.
    void validate(VideoDims dims) const;
};

/// Union of the edited modality sets over all keyframes.
ModalitySet conflicted_set(const EditSpec& edit);

enum class FrameSource { Original, Edited };

/// Per-frame modality choice and the assembled single-stream conditioning
/// video (empty until assemble_conditioning runs).
struct ConditioningPlan {
    std::vector<ModalityId> modality;
    std::vector<FrameSource> source;
    Tensor video;

    int frames() const { return static_cast<int>(modality.size()); }
};

struct PlanOptions {
    /// When every modality is conflicted, fall back to the least-edited one
    /// for non-keyframes instead of failing.
    bool allow_degenerate_plans = false;
};

class PlanError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Keyframes draw uniformly from their edited set; other frames draw
/// uniformly from the non-conflicted modalities.
ConditioningPlan sample_plan(int frames, const EditSpec& edit, const IntrinsicStack& gt, std::uint64_t seed,
                             PlanOptions options = {});

/// Frame t of the result is the chosen modality's frame: the edited image at
/// keyframes, the original intrinsic frame elsewhere.
Tensor assemble_conditioning(const ConditioningPlan& plan, const IntrinsicStack& gt, const EditSpec& edit);

struct FullRandom {};
struct DropModality {
    ModalityId modality;
};
struct FirstFrameOnly {
    ModalityId modality;
};
using EvalScheme = std::variant<FullRandom, DropModality, FirstFrameOnly>;

ConditioningPlan make_eval_plan(int frames, const EvalScheme& scheme, std::uint64_t seed);

std::string scheme_name(const EvalScheme& scheme);
nlohmann::json plan_to_json(const ConditioningPlan& plan);

// EditSpec file: JSON naming 1-based keyframe indices, edited modalities and
// PNG paths relative to the JSON file.
inline constexpr const char* kEditFormat = "vrgbx-edit/1";

EditSpec load_edit_spec(const std::filesystem::path& json_path);
void save_edit_spec(const std::filesystem::path& json_path, const EditSpec& edit,
                    const nlohmann::json& extra = nlohmann::json::object());

}  // namespace vrgbx
