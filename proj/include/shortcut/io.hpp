#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "shortcut/tensor.hpp"

namespace shortcut::io {

// 8-bit PNG. Grayscale for one channel, RGB for three. Values in [0, 1] are
// scaled to 0..255 and rounded; out-of-range values are clamped.
void write_png(const std::filesystem::path& path, const Tensor& image);  // [C, H, W]
Tensor read_png(const std::filesystem::path& path);                      // [C, H, W] in [0, 1]

// Raw interleaved RGB bytes, row-major.
void write_png_rgb(const std::filesystem::path& path, std::size_t height, std::size_t width,
                   const std::vector<std::uint8_t>& rgb);
// Same, encoded in memory.
std::string encode_png_rgb(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& rgb);

// One CSV row per leading index: [R, T] or any [R, ...] flattened per row.
// Values are written with 17 significant digits so doubles round-trip.
void write_csv(const std::filesystem::path& path, const Tensor& rows);
Tensor read_csv(const std::filesystem::path& path);  // [R, T]

}  // namespace shortcut::io
