#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segadv/tensor.hpp"

namespace segadv {

/// B×C×H×W images with values in [0,1], C ∈ {1,3}.
struct ImageBatch {
  Tensor data;
  std::vector<std::string> source_ids;

  int batch() const { return data.dim(0); }
  int channels() const { return data.dim(1); }
  int height() const { return data.dim(2); }
  int width() const { return data.dim(3); }

  /// Throws ShapeError/DataError when the batch breaks its invariants for a
  /// generator with `n_levels` decoder levels.
  void validate(int n_levels) const;
};

/// B×H×W integer class ids in [0, n_classes).
struct MaskBatch {
  int batch = 0;
  int height = 0;
  int width = 0;
  int n_classes = 2;
  std::vector<std::int32_t> labels;

  MaskBatch() = default;
  MaskBatch(int batch, int height, int width, int n_classes, std::int32_t fill = 0);

  std::int32_t& at(int b, int y, int x) {
    return labels[(static_cast<std::size_t>(b) * height + y) * width + x];
  }
  std::int32_t at(int b, int y, int x) const {
    return labels[(static_cast<std::size_t>(b) * height + y) * width + x];
  }
  std::size_t pixels() const { return labels.size(); }

  void validate() const;
  /// Also checks batch and spatial agreement with the paired images.
  void validate_against(const ImageBatch& images) const;

  bool operator==(const MaskBatch&) const = default;
};

/// B×K×H×W one-hot encoding of a mask batch.
Tensor one_hot(const MaskBatch& masks);

/// Per-pixel argmax over the class axis of B×K×H×W scores; ties resolve to the
/// lower class index.
MaskBatch argmax_classes(const Tensor& scores);

}  // namespace segadv
