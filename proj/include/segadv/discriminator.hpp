#pragma once

#include <vector>

#include "segadv/config.hpp"
#include "segadv/layers.hpp"

namespace segadv {

/// Scores how closely a K-channel mask-like map resembles ground truth.
/// Strided conv stack (BN on all but the first conv), 1×1 conv to a single
/// channel, global average pooling, sigmoid.
class Discriminator {
 public:
  Discriminator(int n_classes, int height, int width, int base_width, nn::InitStream& init);

  /// maps: B×K×h×w -> scores: B, each strictly inside (0,1).
  nn::Var forward(const nn::Var& maps, nn::Mode mode);
  nn::StateList state() const;

  int height() const { return height_; }
  int width() const { return width_; }
  int n_classes() const { return n_classes_; }
  int depth() const { return static_cast<int>(convs_.size()); }

 private:
  int n_classes_;
  int height_;
  int width_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm2d> norms_;  // norms_[j] follows convs_[j + 1]
  nn::Conv2d head_;
};

/// Number of stride-2 convolutions for a member seeing h×w inputs: one per
/// halving down to 4×4, and at least one.
int discriminator_depth(int height, int width);

/// One discriminator per decoder level; member i sees (H/2^i)×(W/2^i).
class DiscriminatorBank {
 public:
  DiscriminatorBank() = default;
  explicit DiscriminatorBank(std::vector<Discriminator> members) : members_(std::move(members)) {}

  int size() const { return static_cast<int>(members_.size()); }
  Discriminator& member(int level);
  const Discriminator& member(int level) const;

  /// Every member's state, prefixed "level<i>." with i 1-based.
  nn::StateList state() const;

 private:
  std::vector<Discriminator> members_;
};

DiscriminatorBank build_bank(const RunConfig& config, int height, int width);

/// Scores a batch of maps with member `level` (0 = full resolution).
/// Throws ShapeError on an out-of-range level or a map of the wrong shape.
nn::Var discriminate(DiscriminatorBank& bank, int level, const nn::Var& maps, nn::Mode mode = nn::Mode::train);

}  // namespace segadv
