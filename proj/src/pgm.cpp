#include "xfsl/pgm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "xfsl/error.hpp"

namespace xfsl::pgm {

namespace {

bool is_space(std::uint8_t c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

struct Cursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void skip_space() {
    const std::size_t start = pos;
    while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
    if (pos == start) {
      throw ParseError("pgm: expected whitespace at byte " + std::to_string(pos), pos);
    }
  }

  std::size_t number(const char* what) {
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1u << 24)) throw ParseError(std::string("pgm: ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) {
      throw ParseError(std::string("pgm: expected ") + what + " at byte " + std::to_string(pos),
                       pos);
    }
    return v;
  }
};

}  // namespace

Greymap parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') {
    throw ParseError("pgm: missing P5 magic", 0);
  }
  Cursor c{bytes, 2};
  c.skip_space();
  Greymap map;
  map.width = c.number("width");
  c.skip_space();
  map.height = c.number("height");
  c.skip_space();
  const std::size_t maxval_at = c.pos;
  const std::size_t maxval = c.number("maxval");
  if (maxval != 255) {
    throw ParseError("pgm: maxval " + std::to_string(maxval) + " unsupported (need 255)",
                     maxval_at);
  }
  if (map.width == 0 || map.height == 0) throw ParseError("pgm: zero extent", maxval_at);
  if (c.pos >= bytes.size() || !is_space(bytes[c.pos])) {
    throw ParseError("pgm: expected one whitespace byte after maxval", c.pos);
  }
  ++c.pos;
  const std::size_t need = map.width * map.height;
  if (bytes.size() - c.pos < need) {
    throw ParseError("pgm: truncated payload, expected " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - c.pos),
                     bytes.size());
  }
  if (bytes.size() - c.pos > need) {
    throw ParseError("pgm: trailing bytes after payload", c.pos + need);
  }
  map.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(c.pos), bytes.end());
  return map;
}

std::vector<std::uint8_t> encode(const Greymap& map) {
  if (map.pixels.size() != map.width * map.height) {
    throw ValidationError("pgm: pixel count does not match extent");
  }
  const std::string header =
      "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), map.pixels.begin(), map.pixels.end());
  return out;
}

Greymap read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("pgm: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return parse(bytes);
  } catch (const ParseError& e) {
    throw ParseError(std::string(e.what()) + " in " + path.string(), e.offset());
  }
}

void write(const Greymap& map, const std::filesystem::path& path) {
  const auto bytes = encode(map);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("pgm: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("pgm: write failed for " + path.string());
}

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
}

Greymap from_unit(std::span<const double> values, std::size_t height, std::size_t width) {
  if (values.size() != height * width) {
    throw ValidationError("pgm: " + std::to_string(values.size()) + " values for a " +
                          std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  Greymap map{width, height, {}};
  map.pixels.reserve(values.size());
  for (double v : values) map.pixels.push_back(quantize(v));
  return map;
}

std::vector<double> to_unit(const Greymap& map) {
  std::vector<double> out;
  out.reserve(map.pixels.size());
  for (std::uint8_t p : map.pixels) out.push_back(p / 255.0);
  return out;
}

}  // namespace xfsl::pgm
