#include "segadv/discriminator.hpp"

#include <algorithm>

#include "segadv/errors.hpp"

namespace segadv {

namespace {
constexpr std::uint64_t kBankStreamBase = 100;
constexpr float kLeakySlope = 0.2f;
}  // namespace

int discriminator_depth(int height, int width) {
  int side = std::min(height, width);
  if (side < 1) throw ShapeError("discriminator input " + std::to_string(height) + "x" + std::to_string(width) +
                                 " is below 1x1");
  int log2 = 0;
  while (side > 1) {
    side >>= 1;
    ++log2;
  }
  return std::max(1, log2 - 2);
}

Discriminator::Discriminator(int n_classes, int height, int width, int base_width, nn::InitStream& init)
    : n_classes_(n_classes), height_(height), width_(width) {
  const int depth = discriminator_depth(height, width);
  int in = n_classes;
  for (int j = 0; j < depth; ++j) {
    const int out = base_width << std::min(j, 3);
    convs_.emplace_back(in, out, 3, 2, 1, j == 0, init);
    if (j > 0) norms_.emplace_back(out);
    in = out;
  }
  head_ = nn::Conv2d(in, 1, 1, 1, 0, true, init);
}

nn::Var Discriminator::forward(const nn::Var& maps, nn::Mode mode) {
  nn::Var h = nn::leaky_relu(convs_[0].forward(maps), kLeakySlope);
  for (std::size_t j = 1; j < convs_.size(); ++j) {
    h = nn::leaky_relu(norms_[j - 1].forward(convs_[j].forward(h), mode), kLeakySlope);
  }
  auto pooled = nn::global_avg_pool(head_.forward(h));
  return nn::sigmoid(nn::reshape(pooled, {maps.dim(0)}));
}

nn::StateList Discriminator::state() const {
  nn::StateList s;
  for (std::size_t j = 0; j < convs_.size(); ++j) {
    s.append("conv" + std::to_string(j) + ".", convs_[j].state());
    if (j > 0) s.append("bn" + std::to_string(j) + ".", norms_[j - 1].state());
  }
  s.append("head.", head_.state());
  return s;
}

Discriminator& DiscriminatorBank::member(int level) {
  if (level < 0 || level >= size()) {
    throw ShapeError("discriminator level " + std::to_string(level + 1) + " outside 1.." + std::to_string(size()));
  }
  return members_[static_cast<std::size_t>(level)];
}

const Discriminator& DiscriminatorBank::member(int level) const {
  return const_cast<DiscriminatorBank*>(this)->member(level);
}

nn::StateList DiscriminatorBank::state() const {
  nn::StateList s;
  for (int i = 0; i < size(); ++i) s.append("level" + std::to_string(i + 1) + ".", members_[i].state());
  return s;
}

DiscriminatorBank build_bank(const RunConfig& config, int height, int width) {
  const int multiple = config.size_multiple();
  if (height <= 0 || width <= 0 || height % multiple || width % multiple) {
    throw ShapeError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by 2^(n_levels-1) = " + std::to_string(multiple));
  }
  std::vector<Discriminator> members;
  for (int i = 0; i < config.n_levels; ++i) {
    nn::InitStream init(nn::derive_seed(config.seed, kBankStreamBase + static_cast<std::uint64_t>(i)));
    members.emplace_back(config.n_classes, height >> i, width >> i, config.base_width, init);
  }
  return DiscriminatorBank(std::move(members));
}

nn::Var discriminate(DiscriminatorBank& bank, int level, const nn::Var& maps, nn::Mode mode) {
  Discriminator& d = bank.member(level);
  const Shape& s = maps.shape();
  if (s.size() != 4 || s[1] != d.n_classes() || s[2] != d.height() || s[3] != d.width() || s[0] < 1) {
    throw ShapeError("discriminator level " + std::to_string(level + 1) + " expects B×" +
                     std::to_string(d.n_classes()) + "×" + std::to_string(d.height()) + "×" +
                     std::to_string(d.width()) + ", got " + shape_str(s));
  }
  return d.forward(maps, mode);
}

}  // namespace segadv
