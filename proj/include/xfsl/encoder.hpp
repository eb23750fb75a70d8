#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "xfsl/autodiff.hpp"

namespace xfsl {

// conv (kernel x kernel, zero padding kernel/2) -> ReLU -> maxpool (pool x pool)
struct ConvBlockSpec {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pool = 2;  // 1 disables pooling
};

struct EncoderConfig {
  std::size_t channels = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<ConvBlockSpec> blocks = {{16, 3, 1, 2}, {32, 3, 1, 2}, {64, 3, 1, 2}};
  std::size_t embedding_dim = 64;
  std::uint64_t seed = 0;

  // Throws ConfigError when the blocks collapse the spatial extent below 1x1
  // or embedding_dim < 2.
  void validate() const;
  // (C, h, w) of the block stack output, i.e. the Grad-CAM target layer.
  ad::Shape last_conv_shape() const;
  ad::Shape input_shape() const { return {channels, height, width}; }
};

struct EncoderOutput {
  ad::NodeId embedding;   // (d)
  ad::NodeId last_conv;   // (C, h, w), input of the global average pool
};

// Compact convolutional embedding network: conv blocks, global average pool,
// dense projection to embedding_dim. No normalization layers, so encode is a
// pure function of (parameters, image).
class Encoder {
 public:
  explicit Encoder(EncoderConfig config);

  const EncoderConfig& config() const { return config_; }

  // Trainable encode: parameter gradients accumulate on Graph::backward.
  EncoderOutput encode(ad::Graph& g, ad::NodeId image);
  // Read-only encode; safe to call concurrently on distinct graphs.
  EncoderOutput encode_frozen(ad::Graph& g, ad::NodeId image) const;

  // Parameters in declaration order: per block weight then bias, then the
  // projection weight and bias.
  std::vector<ad::Tensor*> parameters();
  std::vector<const ad::Tensor*> parameters() const;
  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  void load_flat(std::span<const double> flat);
  void zero_grads();

  // Flat binary checkpoint: "XFSLCKPT", u64 LE count, count f64 LE values,
  // u32 LE CRC-32 of the value bytes.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  template <class Self, class Leaf>
  static EncoderOutput build(Self& self, ad::Graph& g, ad::NodeId image, Leaf leaf);

  EncoderConfig config_;
  std::vector<ad::Tensor> conv_weights_;
  std::vector<ad::Tensor> conv_biases_;
  ad::Tensor proj_weight_;
  ad::Tensor proj_bias_;
};

}  // namespace xfsl
