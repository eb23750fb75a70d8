#include "xfsl/encoder.hpp"

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "xfsl/error.hpp"

namespace xfsl {

namespace {

constexpr std::array<char, 8> kMagic = {'X', 'F', 'S', 'L', 'C', 'K', 'P', 'T'};

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint32_t crc_of(const unsigned char* data, std::size_t len) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (len > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(len, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    len -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

void EncoderConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) {
    throw ConfigError("encoder: input extents must be positive");
  }
  if (embedding_dim < 2) throw ConfigError("encoder: embedding_dim must be >= 2");
  if (blocks.empty()) throw ConfigError("encoder: at least one conv block is required");
  last_conv_shape();
}

ad::Shape EncoderConfig::last_conv_shape() const {
  std::size_t c = channels, h = height, w = width;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const ConvBlockSpec& s = blocks[b];
    if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0 || s.pool == 0) {
      throw ConfigError("encoder: block " + std::to_string(b) + " has a zero extent");
    }
    const std::size_t pad = s.kernel / 2;
    if (h + 2 * pad < s.kernel || w + 2 * pad < s.kernel) {
      throw ConfigError("encoder: block " + std::to_string(b) + " kernel exceeds the " +
                        std::to_string(h) + "x" + std::to_string(w) + " input");
    }
    h = (h + 2 * pad - s.kernel) / s.stride + 1;
    w = (w + 2 * pad - s.kernel) / s.stride + 1;
    if (s.pool > 1) {
      if (h < s.pool || w < s.pool) {
        throw ConfigError("encoder: spatial extent collapses below 1x1 at block " +
                          std::to_string(b));
      }
      h = (h - s.pool) / s.pool + 1;
      w = (w - s.pool) / s.pool + 1;
    }
    c = s.out_channels;
  }
  return {c, h, w};
}

Encoder::Encoder(EncoderConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  auto fill_uniform = [&](ad::Tensor& t, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.values) v = dist(rng);
  };
  std::size_t in_c = config_.channels;
  for (const ConvBlockSpec& s : config_.blocks) {
    auto w = ad::Tensor::zeros({s.out_channels, in_c, s.kernel, s.kernel}, true);
    fill_uniform(w, in_c * s.kernel * s.kernel);
    conv_weights_.push_back(std::move(w));
    conv_biases_.push_back(ad::Tensor::zeros({s.out_channels}, true));
    in_c = s.out_channels;
  }
  proj_weight_ = ad::Tensor::zeros({config_.embedding_dim, in_c}, true);
  fill_uniform(proj_weight_, in_c);
  proj_bias_ = ad::Tensor::zeros({config_.embedding_dim}, true);
}

template <class Self, class Leaf>
EncoderOutput Encoder::build(Self& self, ad::Graph& g, ad::NodeId image, Leaf leaf) {
  if (g.shape(image) != self.config_.input_shape()) {
    throw ShapeError("encode: image shape " + ad::to_string(g.shape(image)) + ", expected " +
                     ad::to_string(self.config_.input_shape()));
  }
  ad::NodeId x = image;
  for (std::size_t b = 0; b < self.config_.blocks.size(); ++b) {
    const ConvBlockSpec& s = self.config_.blocks[b];
    x = g.conv2d(x, leaf(self.conv_weights_[b]), leaf(self.conv_biases_[b]),
                 {s.stride, s.kernel / 2});
    x = g.relu(x);
    if (s.pool > 1) x = g.maxpool2d(x, s.pool, s.pool);
  }
  const ad::NodeId pooled = g.global_avg_pool(x);
  const ad::NodeId emb = g.dense_affine(pooled, leaf(self.proj_weight_), leaf(self.proj_bias_));
  return {emb, x};
}

EncoderOutput Encoder::encode(ad::Graph& g, ad::NodeId image) {
  return build(*this, g, image, [&](ad::Tensor& t) { return g.parameter(t); });
}

EncoderOutput Encoder::encode_frozen(ad::Graph& g, ad::NodeId image) const {
  return build(*this, g, image, [&](const ad::Tensor& t) { return g.frozen(t); });
}

std::vector<ad::Tensor*> Encoder::parameters() {
  std::vector<ad::Tensor*> out;
  for (std::size_t b = 0; b < conv_weights_.size(); ++b) {
    out.push_back(&conv_weights_[b]);
    out.push_back(&conv_biases_[b]);
  }
  out.push_back(&proj_weight_);
  out.push_back(&proj_bias_);
  return out;
}

std::vector<const ad::Tensor*> Encoder::parameters() const {
  std::vector<const ad::Tensor*> out;
  for (std::size_t b = 0; b < conv_weights_.size(); ++b) {
    out.push_back(&conv_weights_[b]);
    out.push_back(&conv_biases_[b]);
  }
  out.push_back(&proj_weight_);
  out.push_back(&proj_bias_);
  return out;
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const ad::Tensor* t : parameters()) n += t->size();
  return n;
}

std::vector<double> Encoder::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const ad::Tensor* t : parameters()) flat.insert(flat.end(), t->values.begin(), t->values.end());
  return flat;
}

void Encoder::load_flat(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw ShapeError("encoder: expected " + std::to_string(parameter_count()) +
                     " parameters, got " + std::to_string(flat.size()));
  }
  std::size_t off = 0;
  for (ad::Tensor* t : parameters()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t->size(), t->values.begin());
    off += t->size();
  }
}

void Encoder::zero_grads() {
  for (ad::Tensor* t : parameters()) t->zero_grad();
}

void Encoder::save_checkpoint(const std::filesystem::path& path) const {
  const std::vector<double> flat = flatten();
  std::vector<unsigned char> bytes(kMagic.begin(), kMagic.end());
  put_u64(bytes, flat.size());
  const std::size_t payload_at = bytes.size();
  for (double v : flat) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof bits);
    put_u64(bytes, bits);
  }
  const std::uint32_t crc = crc_of(bytes.data() + payload_at, bytes.size() - payload_at);
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<unsigned char>(crc >> (8 * i)));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("checkpoint: write failed for " + path.string());
}

void Encoder::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw ParseError("checkpoint: missing XFSLCKPT magic in " + path.string(), 0);
  }
  const std::uint64_t count = get_u64(bytes.data() + 8);
  const std::size_t expected = 16 + count * 8 + 4;
  if (count > (bytes.size() / 8) || bytes.size() != expected) {
    throw ParseError("checkpoint: size " + std::to_string(bytes.size()) + " does not match count " +
                         std::to_string(count),
                     std::min<std::size_t>(bytes.size(), expected));
  }
  const std::size_t crc_at = 16 + count * 8;
  std::uint32_t stored = 0;
  for (int i = 3; i >= 0; --i) stored = (stored << 8) | bytes[crc_at + static_cast<std::size_t>(i)];
  if (crc_of(bytes.data() + 16, count * 8) != stored) {
    throw ParseError("checkpoint: CRC mismatch in " + path.string(), crc_at);
  }
  std::vector<double> flat(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t bits = get_u64(bytes.data() + 16 + 8 * i);
    std::memcpy(&flat[i], &bits, sizeof bits);
  }
  load_flat(flat);
}

}  // namespace xfsl
