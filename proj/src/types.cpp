#include "segadv/types.hpp"

#include <cmath>

#include "segadv/errors.hpp"

namespace segadv {

void ImageBatch::validate(int n_levels) const {
  if (data.rank() != 4) throw ShapeError("image batch must be B×C×H×W, got " + shape_str(data.shape()));
  if (channels() != 1 && channels() != 3) {
    throw ShapeError("image batch must have 1 or 3 channels, got " + std::to_string(channels()));
  }
  if (!source_ids.empty() && static_cast<int>(source_ids.size()) != batch()) {
    throw ShapeError("image batch has " + std::to_string(batch()) + " samples but " +
                     std::to_string(source_ids.size()) + " source ids");
  }
  const int multiple = 1 << (n_levels - 1);
  if (height() % multiple || width() % multiple) {
    throw ShapeError("image size " + std::to_string(height()) + "x" + std::to_string(width()) +
                     " is not divisible by 2^(n_levels-1) = " + std::to_string(multiple));
  }
  for (float v : data.values()) {
    if (!std::isfinite(v) || v < 0.0f || v > 1.0f) throw DataError("image values must be finite and within [0,1]");
  }
}

MaskBatch::MaskBatch(int batch_, int height_, int width_, int n_classes_, std::int32_t fill)
    : batch(batch_),
      height(height_),
      width(width_),
      n_classes(n_classes_),
      labels(static_cast<std::size_t>(batch_) * height_ * width_, fill) {}

void MaskBatch::validate() const {
  if (labels.size() != static_cast<std::size_t>(batch) * height * width) {
    throw ShapeError("mask batch label count does not match its B×H×W extent");
  }
  for (auto v : labels) {
    if (v < 0 || v >= n_classes) {
      throw DataError("mask class id " + std::to_string(v) + " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
}

void MaskBatch::validate_against(const ImageBatch& images) const {
  validate();
  if (batch != images.batch() || height != images.height() || width != images.width()) {
    throw ShapeError("mask batch " + std::to_string(batch) + "x" + std::to_string(height) + "x" +
                     std::to_string(width) + " does not match image batch " + shape_str(images.data.shape()));
  }
}

Tensor one_hot(const MaskBatch& masks) {
  Tensor out({masks.batch, masks.n_classes, masks.height, masks.width}, 0.0f);
  for (int b = 0; b < masks.batch; ++b)
    for (int y = 0; y < masks.height; ++y)
      for (int x = 0; x < masks.width; ++x) {
        const int c = masks.at(b, y, x);
        if (c < 0 || c >= masks.n_classes) throw DataError("mask class id out of range in one_hot");
        out.at(b, c, y, x) = 1.0f;
      }
  return out;
}

MaskBatch argmax_classes(const Tensor& scores) {
  if (scores.rank() != 4) throw ShapeError("argmax_classes expects B×K×H×W, got " + shape_str(scores.shape()));
  const int n = scores.dim(0), k = scores.dim(1), h = scores.dim(2), w = scores.dim(3);
  MaskBatch out(n, h, w, k);
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int best = 0;
        for (int c = 1; c < k; ++c)
          if (scores.at(b, c, y, x) > scores.at(b, best, y, x)) best = c;
        out.at(b, y, x) = best;
      }
  return out;
}

}  // namespace segadv
