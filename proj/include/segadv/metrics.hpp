#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segadv/types.hpp"

namespace segadv {

/// K×K pixel counts; at(g, p) = pixels of ground-truth class g predicted as p.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int n_classes = 2);

  int n_classes() const { return n_classes_; }
  std::uint64_t& at(int gt, int pred) { return counts_[index(gt, pred)]; }
  std::uint64_t at(int gt, int pred) const { return counts_[index(gt, pred)]; }

  std::uint64_t total() const;
  std::uint64_t row_sum(int c) const;  // ground-truth pixels of class c
  std::uint64_t col_sum(int c) const;  // predicted pixels of class c

  /// Elementwise sum; both matrices must have the same class count.
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);

  /// nullopt for classes whose denominator is zero (absent from both GT and
  /// prediction).
  std::vector<std::optional<double>> per_class_iou() const;
  std::vector<std::optional<double>> per_class_dice() const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t index(int gt, int pred) const {
    return static_cast<std::size_t>(gt) * static_cast<std::size_t>(n_classes_) + static_cast<std::size_t>(pred);
  }

  int n_classes_;
  std::vector<std::uint64_t> counts_;
};

/// Adds per-pixel (gt, pred) counts to `acc`. Throws on shape mismatch or a
/// class id outside the matrix.
ConfusionMatrix accumulate_confusion(const MaskBatch& pred, const MaskBatch& gt, ConfusionMatrix acc);

/// Mean IoU over classes with a non-zero denominator. Throws DataError when
/// no class qualifies.
double mean_iou(const ConfusionMatrix& conf);

/// Mean Dice over classes with a non-zero denominator.
double dice_coefficient(const ConfusionMatrix& conf);

/// Mean Dice over the foreground classes 1..K-1 only.
double foreground_dice(const ConfusionMatrix& conf);

struct EvalReport {
  std::string dataset_id;
  int n_images = 0;
  double miou = 0.0;
  double dice = 0.0;
  double dice_foreground = 0.0;
  std::vector<std::optional<double>> per_class_iou;
  ConfusionMatrix confusion;
  std::string config_hash;
  int step = 0;

  bool operator==(const EvalReport&) const = default;
};

EvalReport make_report(std::string dataset_id, int n_images, const ConfusionMatrix& conf, std::string config_hash,
                       int step);

nlohmann::json to_json(const EvalReport& report);

}  // namespace segadv
