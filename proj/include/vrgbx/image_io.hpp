// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vrgbx/tensor.hpp"

namespace vrgbx {

class IoError : public std::runtime_error {
public:
    IoError(const std::filesystem::path& path, const std::string& what)
        : std::runtime_error(path.string() + ": " + what), path_(path) {}
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
};

/// 8-bit quantization used for every stored image.
inline std::uint8_t quantize(float v) {
    const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    return static_cast<std::uint8_t>(c * 255.f + 0.5f);
}

/// Writes a planar 3xHxW image in [0,1] as an 8-bit RGB PNG.
void write_png(const std::filesystem::path& path, std::span<const float> chw, int height, int width);

/// Reads an 8-bit RGB PNG into planar 3xHxW floats in [0,1].
std::vector<float> read_png(const std::filesystem::path& path, int& height, int& width);

/// Frames `{t:03}.png`, t = 0..T-1.
void write_video(const std::filesystem::path& dir, const Tensor& video);
Tensor read_video(const std::filesystem::path& dir, int frames);

/// Rounds every value to the nearest 8-bit level.
Tensor quantized(const Tensor& video);

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace vrgbx
