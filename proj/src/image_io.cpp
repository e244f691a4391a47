// SPDX-License-Identifier: Apache-2.0
#include "vrgbx/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace vrgbx {

namespace fs = std::filesystem;

void write_png(const fs::path& path, std::span<const float> chw, int height, int width) {
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    if (chw.size() != 3 * plane) throw IoError(path, "image buffer does not match 3xHxW");
    std::vector<std::uint8_t> interleaved(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) interleaved[3 * i + c] = quantize(chw[c * plane + i]);
    }
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width);
    image.height = static_cast<png_uint_32>(height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, interleaved.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError(path, "png write failed: " + msg);
    }
}

std::vector<float> read_png(const fs::path& path, int& height, int& width) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw IoError(path, std::string("png read failed: ") + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> interleaved(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, interleaved.data(), 0, nullptr)) {
        std::string msg = image.message;
        png_image_free(&image);
        throw IoError(path, "png decode failed: " + msg);
    }
    height = static_cast<int>(image.height);
    width = static_cast<int>(image.width);
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    std::vector<float> chw(3 * plane);
    for (std::size_t i = 0; i < plane; ++i) {
        for (int c = 0; c < 3; ++c) chw[c * plane + i] = interleaved[3 * i + c] / 255.f;
    }
    return chw;
}

namespace {
std::string frame_file(int t) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d.png", t);
    return buf;
}
}  // namespace

void write_video(const fs::path& dir, const Tensor& video) {
    const VideoDims d = video_dims(video);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
    for (int t = 0; t < d.frames; ++t) write_png(dir / frame_file(t), video.slice(t), d.height, d.width);
}

Tensor read_video(const fs::path& dir, int frames) {
    Tensor video;
    for (int t = 0; t < frames; ++t) {
        int h = 0;
        int w = 0;
        std::vector<float> img = read_png(dir / frame_file(t), h, w);
        if (t == 0) video = Tensor({frames, 3, h, w});
        if (h != video.dim(2) || w != video.dim(3)) throw IoError(dir / frame_file(t), "frame size differs from frame 0");
        std::copy(img.begin(), img.end(), video.slice(t).begin());
    }
    return video;
}

Tensor quantized(const Tensor& video) {
    Tensor out = video;
    for (auto& v : out.values()) v = quantize(v) / 255.f;
    return out;
}

std::vector<unsigned char> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path, "cannot open for reading");
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const fs::path& path, const std::string& content) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(tmp, "cannot open for writing");
        out << content;
        if (!out) throw IoError(tmp, "write failed");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError(path, "rename failed");
    }
}

}  // namespace vrgbx
