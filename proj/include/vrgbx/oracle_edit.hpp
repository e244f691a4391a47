// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "vrgbx/conditioning.hpp"
#include "vrgbx/scene_oracle.hpp"

namespace vrgbx {

enum class EditKind { RecolorAlbedo, SetLightColor };

EditKind edit_kind_from_string(const std::string& s);

/// A random edit of the given kind that visibly changes the scene: a new
/// albedo for one disc, or a new constant light color.
EditOp random_edit_op(const SceneSpec& scene, EditKind kind, std::uint64_t seed);

/// Everything the oracle knows about an edited clip.
struct OracleEdit {
    EditOp op;
    EditSpec spec;                       // edited keyframes, 8-bit quantized
    Tensor original;                     // original rgb, quantized
    RenderResult edited;                 // edited rgb and intrinsics, quantized
    std::vector<std::uint8_t> footprint;  // [T, H, W]; 1 where the edit changes rgb
};

/// Renders `scene` before and after `op`; `keyframes` are 0-based.
OracleEdit make_oracle_edit(const SceneSpec& scene, const EditOp& op, const std::vector<int>& keyframes);

/// Pixels whose quantized rgb differs by more than one code value.
std::vector<std::uint8_t> edit_footprint(const Tensor& original, const Tensor& edited);

}  // namespace vrgbx
