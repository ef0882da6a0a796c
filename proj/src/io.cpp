#include "shortcut/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>

namespace shortcut::io {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

void append_bytes(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void flush_nothing(png_structp) {}

std::string encode_rows(std::size_t height, std::size_t width, int color_type,
                        const std::vector<std::uint8_t>& bytes) {
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng encode failed");
  }
  png_set_write_fn(png, &out, append_bytes, flush_nothing);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = bytes.size() / height;
  for (std::size_t r = 0; r < height; ++r) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + r * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_rows(const std::filesystem::path& path, std::size_t height, std::size_t width,
                int color_type, const std::vector<std::uint8_t>& bytes) {
  const std::string encoded = encode_rows(height, width, color_type, bytes);
  File f = open(path, "wb");
  if (std::fwrite(encoded.data(), 1, encoded.size(), f.get()) != encoded.size()) {
    throw std::runtime_error("short write to " + path.string());
  }
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw std::invalid_argument("write_png expects [1|3, H, W], got " +
                                shape_string(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> bytes(c * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) {
        const double v = std::clamp(image[(k * h + y) * w + x], 0.0, 1.0);
        bytes[(y * w + x) * c + k] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  write_rows(path, h, w, c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, bytes);
}

std::string encode_png_rgb(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != height * width * 3) throw std::invalid_argument("encode_png_rgb: size");
  return encode_rows(height, width, PNG_COLOR_TYPE_RGB, rgb);
}

void write_png_rgb(const std::filesystem::path& path, std::size_t height, std::size_t width,
                   const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != height * width * 3) throw std::invalid_argument("write_png_rgb: size");
  write_rows(path, height, width, PNG_COLOR_TYPE_RGB, rgb);
}

Tensor read_png(const std::filesystem::path& path) {
  File f = open(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("cannot decode PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  // Normalize to 8-bit gray or RGB without alpha.
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  const std::size_t c = png_get_channels(png, info);
  std::vector<std::uint8_t> bytes(h * w * c);
  for (std::size_t r = 0; r < h; ++r) png_read_row(png, bytes.data() + r * w * c, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor out({c, h, w});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) {
        out[(k * h + y) * w + x] = bytes[(y * w + x) * c + k] / 255.0;
      }
    }
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const Tensor& rows) {
  if (rows.rank() == 0) throw std::invalid_argument("write_csv: scalar");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t r = rows.dim(0), t = rows.size() / std::max<std::size_t>(r, 1);
  char buf[32];
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < t; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", rows[i * t + j]);
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
}

Tensor read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::size_t count = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw std::runtime_error(path.string() + ": bad number '" + cell + "' on row " +
                                 std::to_string(rows + 1));
      }
      ++count;
    }
    if (rows == 0) cols = count;
    if (count != cols) throw std::runtime_error(path.string() + ": ragged CSV rows");
    ++rows;
  }
  return Tensor({rows, cols}, std::move(values));
}

}  // namespace shortcut::io
