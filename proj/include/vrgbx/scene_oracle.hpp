// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrgbx/modality.hpp"
#include "vrgbx/tensor.hpp"

namespace vrgbx {

using Rgb = std::array<double, 3>;
using Vec2 = std::array<double, 2>;
using Vec3 = std::array<double, 3>;

/// Raised when a SceneSpec or EditOp violates its invariants. `field()`
/// names the offending field path, e.g. "objects[2].albedo".
class ValidationError : public std::invalid_argument {
public:
    ValidationError(std::string field, const std::string& what)
        : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

enum class ShapeKind { Disc, BackgroundPlane };

struct SceneObject {
    int id = 0;
    ShapeKind shape = ShapeKind::Disc;
    std::vector<Vec2> center;  // per-frame (x, y) in pixels
    double radius = 0;         // pixels
    Rgb albedo{};
    double roughness = 0.5;
    double metallic = 0;
    double ao = 1;
};

struct LightSpec {
    std::vector<Vec3> direction;  // per-frame unit vectors
    std::vector<Rgb> color;       // per-frame
    Rgb ambient{};
};

struct SceneSpec {
    std::vector<SceneObject> objects;  // painter's order, later objects on top
    LightSpec light;
    VideoDims dims;
    std::uint64_t seed = 0;

    const SceneObject* find(int object_id) const;
    SceneObject* find(int object_id);
    bool operator==(const SceneSpec&) const;
};

/// Throws ValidationError naming the first violated field.
void validate(const SceneSpec& spec);

/// Per-modality videos aligned with an RGB clip, each [T, 3, H, W].
struct IntrinsicStack {
    Tensor albedo;
    Tensor normal;      // (n + 1) / 2
    Tensor material;    // (roughness, metallic, ao)
    Tensor irradiance;

    Tensor& channel(ModalityId m);
    const Tensor& channel(ModalityId m) const;
    bool operator==(const IntrinsicStack&) const = default;
};

struct RenderResult {
    Tensor rgb;
    IntrinsicStack gt;
    Tensor specular;  // additive specular term before the final clamp
};

/// Shading constants shared by the renderer and its tests.
inline constexpr Vec3 kViewDirection{0.0, 0.0, 1.0};
inline constexpr double kCapSphereScale = 1.25;  // cap sphere radius / disc radius

inline double specular_exponent(double roughness) { return 2.0 / (roughness + 0.05); }

/// Deterministic analytic renderer: diffuse irradiance plus an additive
/// Blinn-Phong-style specular lobe with a fixed viewer at +z.
RenderResult render_scene(const SceneSpec& spec);

struct RecolorAlbedo {
    int object_id;
    Rgb rgb;
};
struct SetLightColor {
    Rgb rgb;
};
struct SetLightDirection {
    Vec3 direction;
};
struct SetRoughness {
    int object_id;
    double roughness;
};

struct EditOp {
    std::variant<RecolorAlbedo, SetLightColor, SetLightDirection, SetRoughness> kind;

    ModalitySet touched_modalities() const;
    std::string name() const;
};

/// Returns a copy of `spec` with the edit applied to every frame.
SceneSpec apply_edit(const SceneSpec& spec, const EditOp& op);

/// Random scene: a background plane plus 1-4 discs on linear or circular
/// paths, with a smoothly varying light.
SceneSpec sample_scene_spec(std::uint64_t seed, VideoDims dims);

nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EditOp& op);
EditOp edit_op_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// On-disk toy dataset.

inline constexpr const char* kDatasetFormat = "vrgbx-toy/1";

struct ClipEntry {
    std::string id;
    std::uint64_t seed = 0;
    bool valid = true;
};

struct DatasetManifest {
    std::string format = kDatasetFormat;
    std::uint64_t dataset_seed = 0;
    VideoDims dims;
    std::vector<ClipEntry> clips;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
DatasetManifest load_manifest(const std::filesystem::path& root);

std::string clip_name(int index);
std::uint64_t clip_seed(std::uint64_t dataset_seed, int clip_index);

/// Writes `<out_dir>/clip_{i:05}/{scene.json, rgb/, albedo/, ...}` and
/// `<out_dir>/manifest.json`. Output is independent of `workers`.
DatasetManifest generate_dataset(std::uint64_t seed, int n_clips, VideoDims dims,
                                 const std::filesystem::path& out_dir, int workers = 1);

/// Writes one rendered clip (scene.json + five PNG channel directories).
void write_clip(const std::filesystem::path& clip_dir, const SceneSpec& spec, const RenderResult& r);

/// Loads a clip's frames as stored on disk (8-bit quantized).
struct StoredClip {
    SceneSpec spec;
    Tensor rgb;
    IntrinsicStack gt;
};
StoredClip load_clip(const std::filesystem::path& clip_dir);

}  // namespace vrgbx
