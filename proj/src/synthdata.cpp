#include "xfsl/synthdata.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <random>
#include <set>

#include "xfsl/error.hpp"
#include "xfsl/pgm.hpp"

namespace xfsl {

void validate_sample(const Sample& s) {
  const Image& im = s.image;
  if (im.values.size() != im.channels * im.height * im.width) {
    throw ShapeError("sample " + s.id + ": image holds " + std::to_string(im.values.size()) +
                     " values, expected " + std::to_string(im.channels * im.height * im.width));
  }
  if (s.mask.empty()) return;
  if (s.mask.size() != im.height * im.width) {
    throw ShapeError("sample " + s.id + ": mask extent " + std::to_string(s.mask.size()) +
                     " differs from image extent " + std::to_string(im.height * im.width));
  }
  for (double v : s.mask) {
    if (v != 0.0 && v != 1.0) throw ValidationError("sample " + s.id + ": mask is not binary");
  }
}

namespace synth {

namespace {

using json = nlohmann::json;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Box {
  long y0, x0, y1, x1;  // inclusive
  bool overlaps(const Box& o) const {
    return !(x1 < o.x0 || o.x1 < x0 || y1 < o.y0 || o.y1 < y0);
  }
};

Box corner_box(int corner, long size, long tag) {
  const long y0 = corner < 2 ? 0 : size - tag;
  const long x0 = (corner % 2 == 0) ? 0 : size - tag;
  return {y0, x0, y0 + tag - 1, x0 + tag - 1};
}

std::string sample_id(Split split, std::size_t index) {
  const char* prefix = split == Split::train_pool        ? "train"
                       : split == Split::test_confounded ? "testc"
                                                         : "testd";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", prefix, index);
  return buf;
}

SynthSample make_sample(const SynthConfig& cfg, Split split, std::size_t index, double rate) {
  std::mt19937_64 rng(splitmix(cfg.seed ^ splitmix((static_cast<std::uint64_t>(split) << 32) + index)));
  const std::size_t label = index % cfg.n_classes;
  const long size = static_cast<long>(cfg.image_size);
  const long tag = static_cast<long>(cfg.tag_size);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  int corner = static_cast<int>(label);
  if (unit(rng) >= rate) {
    // One of the other three corners.
    std::uniform_int_distribution<int> other(0, 2);
    const int k = other(rng);
    corner = k >= static_cast<int>(label) ? k + 1 : k;
  }

  std::uniform_int_distribution<long> rdist(static_cast<long>(cfg.radius_min),
                                            static_cast<long>(cfg.radius_max));
  const long radius = rdist(rng);
  std::uniform_int_distribution<long> cdist(radius, size - 1 - radius);
  long cy = 0, cx = 0;
  for (;;) {
    cy = cdist(rng);
    cx = cdist(rng);
    // One pixel of clearance around every possible tag location.
    const Box lesion{cy - radius - 1, cx - radius - 1, cy + radius + 1, cx + radius + 1};
    bool clear = true;
    for (int c = 0; c < 4; ++c) clear = clear && !lesion.overlaps(corner_box(c, size, tag));
    if (clear) break;
  }

  const auto shape = static_cast<Shape>(label % 3);
  std::vector<double> mask = rasterize(shape, cfg.image_size, cy, cx, radius);
  const Box tag_box = corner_box(corner, size, tag);

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  const std::size_t hw = cfg.image_size * cfg.image_size;
  SynthSample out;
  out.split = split;
  out.tag_corner = corner;
  Sample& s = out.sample;
  s.id = sample_id(split, index);
  s.label = label;
  s.image = {cfg.channels, cfg.image_size, cfg.image_size, std::vector<double>(cfg.channels * hw)};
  for (std::size_t c = 0; c < cfg.channels; ++c) {
    for (long y = 0; y < size; ++y) {
      for (long x = 0; x < size; ++x) {
        const std::size_t p = static_cast<std::size_t>(y * size + x);
        double v = cfg.background + noise(rng) + cfg.lesion_contrast * mask[p];
        if (y >= tag_box.y0 && y <= tag_box.y1 && x >= tag_box.x0 && x <= tag_box.x1) {
          v = cfg.background + cfg.tag_contrast;
        }
        s.image.values[c * hw + p] = pgm::quantize(v) / 255.0;
      }
    }
  }
  s.mask = std::move(mask);
  return out;
}

json entry_to_json(const ManifestEntry& e) {
  return json{{"id", e.id},         {"image", e.image_path}, {"mask", e.mask_path},
              {"label", e.label},   {"split", to_string(e.split)},
              {"tag_corner", e.tag_corner}};
}

}  // namespace

const char* to_string(Split split) {
  switch (split) {
    case Split::train_pool: return "train_pool";
    case Split::test_confounded: return "test_confounded";
    case Split::test_deconfounded: return "test_deconfounded";
  }
  return "unknown";
}

Split split_from_string(const std::string& name) {
  if (name == "train_pool") return Split::train_pool;
  if (name == "test_confounded") return Split::test_confounded;
  if (name == "test_deconfounded") return Split::test_deconfounded;
  throw ValidationError("unknown split '" + name + "'");
}

void SynthConfig::validate() const {
  if (n_classes < 1 || n_classes > 3) throw ConfigError("synth: n_classes must be in [1, 3]");
  if (channels == 0) throw ConfigError("synth: channels must be positive");
  if (radius_min < 1 || radius_min > radius_max) throw ConfigError("synth: bad radius range");
  if (!(spurious_rate >= 0.0 && spurious_rate <= 1.0) ||
      !(deconfounded_rate >= 0.0 && deconfounded_rate <= 1.0)) {
    throw ConfigError("synth: tag rates must lie in [0, 1]");
  }
  // The lesion box plus clearance must fit between the corner tags somewhere.
  const std::size_t need = 2 * radius_max + 1 + 2 * (tag_size + 1);
  if (image_size < need) {
    throw ConfigError("synth: image_size " + std::to_string(image_size) +
                      " too small for radius " + std::to_string(radius_max) + " and tag " +
                      std::to_string(tag_size));
  }
}

std::vector<double> rasterize(Shape shape, std::size_t size, long cy, long cx, long radius) {
  std::vector<double> mask(size * size, 0.0);
  const long inner = radius / 2;
  const long arm = std::max(1L, (radius + 2) / 4);
  for (long y = cy - radius; y <= cy + radius; ++y) {
    for (long x = cx - radius; x <= cx + radius; ++x) {
      if (y < 0 || x < 0 || y >= static_cast<long>(size) || x >= static_cast<long>(size)) continue;
      const long dy = y - cy, dx = x - cx;
      const long d2 = dy * dy + dx * dx;
      bool on = false;
      switch (shape) {
        case Shape::disc: on = d2 <= radius * radius; break;
        case Shape::annulus: on = d2 <= radius * radius && d2 > inner * inner; break;
        case Shape::cross: on = std::abs(dx) <= arm || std::abs(dy) <= arm; break;
      }
      if (on) mask[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)] = 1.0;
    }
  }
  return mask;
}

std::vector<SynthSample> synthesize(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<SynthSample> out;
  for (std::size_t i = 0; i < cfg.train_per_class * cfg.n_classes; ++i) {
    out.push_back(make_sample(cfg, Split::train_pool, i, cfg.spurious_rate));
  }
  if (cfg.confounded_test) {
    for (std::size_t i = 0; i < cfg.test_per_class * cfg.n_classes; ++i) {
      out.push_back(make_sample(cfg, Split::test_confounded, i, cfg.spurious_rate));
    }
  }
  for (std::size_t i = 0; i < cfg.test_per_class * cfg.n_classes; ++i) {
    out.push_back(make_sample(cfg, Split::test_deconfounded, i, cfg.deconfounded_rate));
  }
  return out;
}

Manifest generate(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  const auto samples = synthesize(cfg);
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec || !fs::is_directory(out_dir / "images") || !fs::is_directory(out_dir / "masks")) {
    throw IoError("synth: cannot create dataset directories under " + out_dir.string());
  }
  Manifest manifest;
  manifest.root = out_dir;
  for (const SynthSample& ss : samples) {
    const Sample& s = ss.sample;
    ManifestEntry e;
    e.id = s.id;
    e.image_path = "images/" + s.id + ".pgm";
    e.mask_path = "masks/" + s.id + ".pgm";
    e.label = s.label;
    e.split = ss.split;
    e.tag_corner = ss.tag_corner;
    // Channels are stacked vertically in one greymap.
    pgm::write(pgm::from_unit(s.image.values, s.image.channels * s.image.height, s.image.width),
               out_dir / e.image_path);
    pgm::write(pgm::from_unit(s.mask, s.image.height, s.image.width), out_dir / e.mask_path);
    manifest.entries.push_back(std::move(e));
  }
  write_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("manifest: cannot open " + path.string() + " for writing");
  for (const ManifestEntry& e : manifest.entries) out << entry_to_json(e).dump() << '\n';
  if (!out) throw IoError("manifest: write failed for " + path.string());
}

Manifest load_manifest(const std::filesystem::path& path, std::size_t n_classes) {
  std::ifstream in(path);
  if (!in) throw IoError("manifest: cannot open " + path.string());
  Manifest manifest;
  manifest.root = path.parent_path();
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto fail = [&](const std::string& why) -> ParseError {
      return ParseError("manifest " + path.string() + " line " + std::to_string(line_no) + ": " +
                            why,
                        line_no);
    };
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& ex) {
      throw fail(std::string("invalid JSON (") + ex.what() + ")");
    }
    ManifestEntry e;
    try {
      e.id = j.at("id").get<std::string>();
      e.image_path = j.at("image").get<std::string>();
      e.mask_path = j.at("mask").get<std::string>();
      const auto label = j.at("label").get<long long>();
      if (label < 0 || static_cast<std::size_t>(label) >= n_classes) {
        throw fail("label " + std::to_string(label) + " out of range [0, " +
                   std::to_string(n_classes) + ")");
      }
      e.label = static_cast<std::size_t>(label);
      e.split = split_from_string(j.at("split").get<std::string>());
      e.tag_corner = j.value("tag_corner", -1);
    } catch (const json::exception& ex) {
      throw fail(std::string("bad field (") + ex.what() + ")");
    } catch (const ParseError&) {
      throw;
    } catch (const ValidationError& ex) {
      throw fail(ex.what());
    }
    if (!seen.insert(e.id).second) throw fail("duplicate id '" + e.id + "'");
    for (const std::string& rel : {e.image_path, e.mask_path}) {
      if (!std::filesystem::is_regular_file(manifest.root / rel)) {
        throw fail("missing file '" + rel + "'");
      }
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

Sample load_sample(const Manifest& manifest, const ManifestEntry& e) {
  const pgm::Greymap mask = pgm::read(manifest.root / e.mask_path);
  const pgm::Greymap image = pgm::read(manifest.root / e.image_path);
  if (image.width != mask.width || image.height % mask.height != 0) {
    throw ShapeError("sample " + e.id + ": image " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " incompatible with mask " +
                     std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  Sample s;
  s.id = e.id;
  s.label = e.label;
  s.image = {image.height / mask.height, mask.height, mask.width, pgm::to_unit(image)};
  s.mask.reserve(mask.pixels.size());
  for (std::uint8_t p : mask.pixels) {
    if (p != 0 && p != 255) {
      throw ValidationError("sample " + e.id + ": mask pixel value " + std::to_string(p) +
                            " is not 0 or 255");
    }
    s.mask.push_back(p == 255 ? 1.0 : 0.0);
  }
  return s;
}

std::vector<Sample> load_split(const Manifest& manifest, Split split) {
  std::vector<Sample> out;
  for (const ManifestEntry& e : manifest.entries) {
    if (e.split == split) out.push_back(load_sample(manifest, e));
  }
  return out;
}

}  // namespace synth
}  // namespace xfsl
