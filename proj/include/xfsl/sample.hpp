#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace xfsl {

// Row-major (channels, height, width) image with values in [0, 1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
};

// One labelled example. `mask` is the binary expert region over the image's
// (height, width) grid; it is empty when the sample carries no annotation.
struct Sample {
  std::string id;
  Image image;
  std::vector<double> mask;
  std::size_t label = 0;

  bool has_mask() const { return !mask.empty(); }
};

// Throws ValidationError if the mask is non-binary or its extent differs from
// the image's spatial extent.
void validate_sample(const Sample& sample);

}  // namespace xfsl
