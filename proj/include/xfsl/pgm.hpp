#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace xfsl::pgm {

// 8-bit binary greymap (P5, maxval 255).
struct Greymap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// Header is "P5", width, height, maxval separated by whitespace runs, then
// exactly one whitespace byte before the payload. Comments are not accepted.
// Throws ParseError carrying the byte offset of the problem.
Greymap parse(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode(const Greymap& map);

Greymap read(const std::filesystem::path& path);
void write(const Greymap& map, const std::filesystem::path& path);

// Unit-interval grid <-> bytes: byte = round(255 * clamp(v, 0, 1)).
Greymap from_unit(std::span<const double> values, std::size_t height, std::size_t width);
std::vector<double> to_unit(const Greymap& map);
std::uint8_t quantize(double v);

}  // namespace xfsl::pgm
