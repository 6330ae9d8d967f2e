#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "coiba/tensor.hpp"

namespace coiba {

struct SyntheticSample {
  Tensor image;  // [H, W, C] in [0, 1]
  std::size_t label = 0;
  Tensor mask;   // [H, W], 1 inside the glyph cell
  std::size_t cell = 0;  // row-major patch index of the glyph
  std::uint64_t seed = 0;
};

// Smooth textured background plus one class glyph filling a random patch
// cell. Labels cycle 0..classes-1 so the histogram is balanced within one.
std::vector<SyntheticSample> generate_dataset(std::size_t n, std::size_t classes = 8,
                                              std::size_t image_size = 32,
                                              std::uint64_t seed = 0,
                                              std::size_t patch_size = 8,
                                              std::size_t channels = 1);

// Netpbm P5 (grey) or P6 (RGB), 8- or 16-bit. Values scaled to [0, 1];
// result is [H, W, C].
Tensor load_image(const std::filesystem::path& path);
Tensor parse_netpbm(std::string_view bytes);

// depth is 8 or 16. PGM takes [H, W] or [H, W, 1]; PPM takes [H, W, 3].
std::string encode_pgm(const Tensor& image, int depth);
std::string encode_ppm(const Tensor& image, int depth);
void save_pgm(const std::filesystem::path& path, const Tensor& image, int depth = 16);
void save_ppm(const std::filesystem::path& path, const Tensor& image, int depth = 8);

// Writes to a sibling temp file, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

std::string fnv1a_hex(std::string_view bytes);

// Dataset directory: manifest.csv (id,image,mask,label,cell) plus PGM files.
void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples);
std::vector<SyntheticSample> load_manifest(const std::filesystem::path& manifest);

}  // namespace coiba
