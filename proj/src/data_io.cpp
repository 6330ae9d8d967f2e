#include "coiba/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "coiba/errors.hpp"
#include "coiba/rng.hpp"

namespace coiba {

namespace {

constexpr std::size_t kMaxGlyphs = 10;
constexpr double kGlyphOn = 0.92;
constexpr double kGlyphOff = 0.08;

bool glyph_pixel(std::size_t cls, std::size_t x, std::size_t y, std::size_t s) {
  const std::size_t mid = s / 2;
  switch (cls) {
    case 0: return y % 2 == 0;
    case 1: return x % 2 == 0;
    case 2: return (x + y) % 4 < 2;
    case 3: return (x + s * 4 - y) % 4 < 2;
    case 4: return (x + y) % 2 == 0;
    case 5: return x == 0 || y == 0 || x + 1 == s || y + 1 == s;
    case 6: return x + 1 == mid || x == mid || y + 1 == mid || y == mid;
    case 7: return (y / 2) % 2 == 0;
    case 8: return (x / 2) % 2 == 0;
    case 9: return x + 2 >= mid && x < mid + 2 && y + 2 >= mid && y < mid + 2;
    default: return false;
  }
}

// Bilinear upsampling of a coarse random grid plus fine pixel noise.
std::vector<double> background(std::size_t size, Rng& rng) {
  const std::size_t coarse = size / 8 + 2;
  std::vector<double> grid(coarse * coarse);
  for (double& g : grid) g = rng.uniform(0.25, 0.6);
  std::vector<double> out(size * size);
  const double step = static_cast<double>(coarse - 1) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double gy = (static_cast<double>(y) + 0.5) * step;
    const auto y0 = static_cast<std::size_t>(gy);
    const double fy = gy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double gx = (static_cast<double>(x) + 0.5) * step;
      const auto x0 = static_cast<std::size_t>(gx);
      const double fx = gx - static_cast<double>(x0);
      const double top = grid[y0 * coarse + x0] * (1 - fx) + grid[y0 * coarse + x0 + 1] * fx;
      const double bottom = grid[(y0 + 1) * coarse + x0] * (1 - fx) + grid[(y0 + 1) * coarse + x0 + 1] * fx;
      const double v = top * (1 - fy) + bottom * fy + rng.normal(0.0, 0.04);
      out[y * size + x] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

std::size_t parse_size(const std::string& text, const std::string& what) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    fail(ErrorKind::Parse, "manifest: bad " + what + " '" + text + "'");
  }
}

}  // namespace

std::vector<SyntheticSample> generate_dataset(std::size_t n, std::size_t classes,
                                              std::size_t image_size, std::uint64_t seed,
                                              std::size_t patch_size, std::size_t channels) {
  if (classes < 2 || classes > kMaxGlyphs) {
    fail(ErrorKind::Config, "classes must be in [2, " + std::to_string(kMaxGlyphs) + "]");
  }
  if (n < classes) fail(ErrorKind::Config, "dataset size must be >= number of classes");
  if (patch_size < 4 || image_size % patch_size != 0) {
    fail(ErrorKind::Config, "image_size must be a multiple of patch_size (>= 4)");
  }
  if (channels == 0) fail(ErrorKind::Config, "channels must be >= 1");
  const std::size_t grid = image_size / patch_size;
  std::vector<SyntheticSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSample s;
    s.seed = derive_seed(seed, i);
    s.label = i % classes;
    Rng rng(s.seed);
    s.cell = rng.index(grid * grid);
    std::vector<double> grey = background(image_size, rng);
    std::vector<double> mask(image_size * image_size, 0.0);
    const std::size_t cy = (s.cell / grid) * patch_size;
    const std::size_t cx = (s.cell % grid) * patch_size;
    for (std::size_t y = 0; y < patch_size; ++y) {
      for (std::size_t x = 0; x < patch_size; ++x) {
        const std::size_t idx = (cy + y) * image_size + cx + x;
        grey[idx] = glyph_pixel(s.label, x, y, patch_size) ? kGlyphOn : kGlyphOff;
        mask[idx] = 1.0;
      }
    }
    std::vector<double> pixels(image_size * image_size * channels);
    for (std::size_t p = 0; p < grey.size(); ++p) {
      for (std::size_t c = 0; c < channels; ++c) pixels[p * channels + c] = grey[p];
    }
    s.image = Tensor::from_data({image_size, image_size, channels}, std::move(pixels));
    s.mask = Tensor::from_data({image_size, image_size}, std::move(mask));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm

Tensor parse_netpbm(std::string_view bytes) {
  std::size_t pos = 0;
  auto error = [&](const std::string& what) -> void {
    fail(ErrorKind::Parse, "netpbm: " + what + " at byte " + std::to_string(pos));
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    error("expected P5 or P6 magic");
  }
  const std::size_t channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_number = [&](const char* what) {
    skip_space();
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') error(std::string("expected ") + what);
    std::size_t value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > 1u << 20) error(std::string(what) + " too large");
      ++pos;
    }
    return value;
  };
  const std::size_t width = read_number("width");
  const std::size_t height = read_number("height");
  const std::size_t maxval = read_number("maxval");
  if (width == 0 || height == 0) error("zero image dimension");
  if (maxval == 0 || maxval > 65535) error("maxval outside [1, 65535]");
  if (pos >= bytes.size()) error("missing raster");
  ++pos;  // single whitespace before the raster
  const std::size_t sample_bytes = maxval < 256 ? 1 : 2;
  const std::size_t count = width * height * channels;
  if (bytes.size() - pos < count * sample_bytes) {
    pos = bytes.size();
    error("raster truncated (need " + std::to_string(count * sample_bytes) + " bytes)");
  }
  std::vector<double> values(count);
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t v = sample_bytes == 1 ? raw[i] : (static_cast<std::size_t>(raw[2 * i]) << 8) | raw[2 * i + 1];
    values[i] = static_cast<double>(std::min(v, maxval)) / static_cast<double>(maxval);
  }
  return Tensor::from_data({height, width, channels}, std::move(values));
}

namespace {

std::string encode_netpbm(const Tensor& image, int depth, std::size_t channels) {
  if (depth != 8 && depth != 16) fail(ErrorKind::Config, "netpbm depth must be 8 or 16");
  const Shape& s = image.shape();
  const bool ok = (s.size() == 3 && s[2] == channels) || (channels == 1 && s.size() == 2);
  if (!ok) {
    fail(ErrorKind::Dimension, "cannot write image of shape " + shape_string(s) + " with " +
                                   std::to_string(channels) + " channel(s)");
  }
  const std::size_t maxval = depth == 8 ? 255 : 65535;
  std::string out = (channels == 1 ? "P5\n" : "P6\n") + std::to_string(s[1]) + " " + std::to_string(s[0]) +
                    "\n" + std::to_string(maxval) + "\n";
  for (double v : image.data()) {
    const double clamped = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    const auto q = static_cast<std::size_t>(std::lround(clamped * static_cast<double>(maxval)));
    if (depth == 16) out.push_back(static_cast<char>((q >> 8) & 0xFF));
    out.push_back(static_cast<char>(q & 0xFF));
  }
  return out;
}

}  // namespace

std::string encode_pgm(const Tensor& image, int depth) { return encode_netpbm(image, depth, 1); }
std::string encode_ppm(const Tensor& image, int depth) { return encode_netpbm(image, depth, 3); }

void save_pgm(const std::filesystem::path& path, const Tensor& image, int depth) {
  write_file_atomic(path, encode_pgm(image, depth));
}

void save_ppm(const std::filesystem::path& path, const Tensor& image, int depth) {
  write_file_atomic(path, encode_ppm(image, depth));
}

Tensor load_image(const std::filesystem::path& path) { return parse_netpbm(read_file(path)); }

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename '" + tmp.string() + "': " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  manifest << "id,image,mask,label,cell\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "sample_%05zu", i);
    const std::string image_name = std::string(id) + ".pgm";
    const std::string mask_name = std::string(id) + "_mask.pgm";
    const SyntheticSample& s = samples[i];
    if (s.image.size(-1) == 1) save_pgm(dir / image_name, s.image, 16);
    else save_ppm(dir / image_name, s.image, 16);
    save_pgm(dir / mask_name, s.mask, 8);
    manifest << id << ',' << image_name << ',' << mask_name << ',' << s.label << ',' << s.cell << '\n';
  }
  write_file_atomic(dir / "manifest.csv", manifest.str());
}

std::vector<SyntheticSample> load_manifest(const std::filesystem::path& manifest) {
  std::istringstream in(read_file(manifest));
  const std::filesystem::path base = manifest.parent_path();
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,image", 0) != 0) {
    fail(ErrorKind::Parse, "manifest '" + manifest.string() + "' lacks the id,image,... header");
  }
  std::vector<SyntheticSample> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream row(line);
    std::string field;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() != 5) fail(ErrorKind::Parse, "manifest row needs 5 fields: '" + line + "'");
    SyntheticSample s;
    s.image = load_image(base / fields[1]);
    if (!fields[2].empty()) {
      const Tensor m = load_image(base / fields[2]);
      std::vector<double> values(m.data().begin(), m.data().end());
      for (double& v : values) v = v > 0.5 ? 1.0 : 0.0;
      s.mask = Tensor::from_data({m.shape()[0], m.shape()[1]}, std::move(values));
    }
    s.label = parse_size(fields[3], "label");
    s.cell = parse_size(fields[4], "cell");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace coiba
