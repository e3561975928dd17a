#include "segadv/supervision.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <sstream>

#include "segadv/errors.hpp"

namespace segadv {

namespace {

std::vector<double> to_double(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor to_tensor(const Shape& shape, const std::vector<double>& values) {
  Tensor t(shape);
  for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<float>(values[i]);
  return t;
}

void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

void require_finite_term(double value, int level, const char* term) {
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "non-finite loss at level " << level + 1 << ", term " << term << " (" << value << ")";
    throw NumericError(os.str());
  }
}

Tensor downsample(const Tensor& in, DownsampleMode mode) {
  const int n = in.dim(0), k = in.dim(1), h = in.dim(2) / 2, w = in.dim(3) / 2;
  Tensor out({n, k, h, w});
  for (int b = 0; b < n; ++b)
    for (int c = 0; c < k; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (mode == DownsampleMode::nearest) {
            out.at(b, c, y, x) = in.at(b, c, 2 * y, 2 * x);
          } else {
            out.at(b, c, y, x) = 0.25f * (in.at(b, c, 2 * y, 2 * x) + in.at(b, c, 2 * y, 2 * x + 1) +
                                          in.at(b, c, 2 * y + 1, 2 * x) + in.at(b, c, 2 * y + 1, 2 * x + 1));
          }
        }
  return out;
}

}  // namespace

GtPyramid build_gt_pyramid(const MaskBatch& gt, int n_levels, DownsampleMode mode) {
  if (n_levels < 1) throw ShapeError("n_levels must be >= 1");
  const int multiple = 1 << (n_levels - 1);
  if (gt.height % multiple || gt.width % multiple) {
    throw ShapeError("mask size " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                     " is not divisible by 2^(n_levels-1) = " + std::to_string(multiple));
  }
  GtPyramid pyramid;
  pyramid.levels.push_back(one_hot(gt));
  for (int i = 1; i < n_levels; ++i) pyramid.levels.push_back(downsample(pyramid.levels.back(), mode));
  return pyramid;
}

double dice_loss(std::span<const double> pred, std::span<const double> target, int batch, int n_classes,
                 std::size_t plane, std::span<double> grad) {
  const std::size_t count = static_cast<std::size_t>(batch) * n_classes * plane;
  if (pred.size() != count || target.size() != count) throw ShapeError("dice_loss: shape mismatch");
  if (!grad.empty() && grad.size() != count) throw ShapeError("dice_loss: gradient buffer has the wrong size");
  require_finite(pred, "dice_loss");
  require_finite(target, "dice_loss");

  const int first = n_classes > 1 ? 1 : 0;
  double inter = 0.0, sum_pred = 0.0, sum_target = 0.0;
  for (int b = 0; b < batch; ++b)
    for (int c = first; c < n_classes; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * n_classes + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        inter += pred[off + i] * target[off + i];
        sum_pred += pred[off + i];
        sum_target += target[off + i];
      }
    }
  const double num = 2.0 * inter + kDiceSmoothing;
  const double den = sum_pred + sum_target + kDiceSmoothing;

  if (!grad.empty()) {
    std::fill(grad.begin(), grad.end(), 0.0);
    for (int b = 0; b < batch; ++b)
      for (int c = first; c < n_classes; ++c) {
        const std::size_t off = (static_cast<std::size_t>(b) * n_classes + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) grad[off + i] = (num - 2.0 * target[off + i] * den) / (den * den);
      }
  }
  return 1.0 - num / den;
}

double dice_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.rank() != 4) {
    throw ShapeError("dice_loss: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()) +
                     " do not match");
  }
  const auto p = to_double(pred), t = to_double(target);
  return dice_loss(p, t, pred.dim(0), pred.dim(1), static_cast<std::size_t>(pred.dim(2)) * pred.dim(3));
}

double adversarial_mse(std::span<const double> scores, double target, std::span<double> grad) {
  if (scores.empty()) throw ShapeError("adversarial_mse: empty batch");
  if (!grad.empty() && grad.size() != scores.size()) throw ShapeError("adversarial_mse: gradient buffer size");
  const double n = static_cast<double>(scores.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double d = scores[i] - target;
    sum += d * d;
    if (!grad.empty()) grad[i] = 2.0 * d / n;
  }
  return sum / n;
}

double cross_entropy_with_logits(std::span<const double> logits, std::span<const double> target, int batch,
                                 int n_classes, std::size_t plane, std::span<double> grad) {
  const std::size_t count = static_cast<std::size_t>(batch) * n_classes * plane;
  if (logits.size() != count || target.size() != count) throw ShapeError("cross_entropy: shape mismatch");
  const double m = static_cast<double>(batch) * static_cast<double>(plane);
  double total = 0.0;
  std::vector<double> prob(static_cast<std::size_t>(n_classes));
  for (int b = 0; b < batch; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * n_classes * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      double mx = logits[base + i];
      for (int c = 1; c < n_classes; ++c) mx = std::max(mx, logits[base + c * plane + i]);
      double z = 0.0;
      for (int c = 0; c < n_classes; ++c) {
        prob[c] = std::exp(logits[base + c * plane + i] - mx);
        z += prob[c];
      }
      const double lse = mx + std::log(z);
      double tsum = 0.0;
      for (int c = 0; c < n_classes; ++c) {
        const double t = target[base + c * plane + i];
        total += t * (lse - logits[base + c * plane + i]);
        tsum += t;
      }
      if (!grad.empty()) {
        for (int c = 0; c < n_classes; ++c) {
          grad[base + c * plane + i] = (prob[c] / z * tsum - target[base + c * plane + i]) / m;
        }
      }
    }
  }
  return total / m;
}

nn::Var dice_loss(const nn::Var& pred, const Tensor& target, double& value) {
  const Tensor& p = pred.value();
  if (p.shape() != target.shape() || p.rank() != 4) {
    throw ShapeError("dice_loss: shapes " + shape_str(p.shape()) + " and " + shape_str(target.shape()) +
                     " do not match");
  }
  const auto pd = to_double(p), td = to_double(target);
  std::vector<double> g(pd.size());
  value = dice_loss(pd, td, p.dim(0), p.dim(1), static_cast<std::size_t>(p.dim(2)) * p.dim(3), g);
  return nn::scalar_with_gradient(pred, value, to_tensor(p.shape(), g));
}

nn::Var adversarial_mse(const nn::Var& scores, double target, double& value) {
  const auto sd = to_double(scores.value());
  std::vector<double> g(sd.size());
  value = adversarial_mse(sd, target, g);
  return nn::scalar_with_gradient(scores, value, to_tensor(scores.shape(), g));
}

nn::Var cross_entropy_with_logits(const nn::Var& logits, const Tensor& target, double& value) {
  const Tensor& l = logits.value();
  if (l.shape() != target.shape() || l.rank() != 4) {
    throw ShapeError("cross_entropy: shapes " + shape_str(l.shape()) + " and " + shape_str(target.shape()) +
                     " do not match");
  }
  const auto ld = to_double(l), td = to_double(target);
  std::vector<double> g(ld.size());
  value = cross_entropy_with_logits(ld, td, l.dim(0), l.dim(1), static_cast<std::size_t>(l.dim(2)) * l.dim(3), g);
  return nn::scalar_with_gradient(logits, value, to_tensor(l.shape(), g));
}

double LossBreakdown::recompute_total(const LossCoefficients& coefficients) const {
  double t = ori;
  for (std::size_t i = 0; i < coefficients.size(); ++i) {
    t += coefficients[i] * (per_level_mse.at(i) + per_level_dice.at(i));
  }
  return t;
}

GeneratorLoss generator_loss(const DecoderOutputs& outputs, const GtPyramid& pyramid, DiscriminatorBank& bank,
                             const LossCoefficients& coefficients, nn::Mode bank_mode, bool adversarial) {
  const int n = outputs.levels();
  if (static_cast<int>(coefficients.size()) != n) {
    throw ShapeError("coefficient count " + std::to_string(coefficients.size()) + " does not match " +
                     std::to_string(n) + " decoder levels");
  }
  if (pyramid.size() != n || bank.size() != n) {
    throw ShapeError("pyramid (" + std::to_string(pyramid.size()) + ") and bank (" + std::to_string(bank.size()) +
                     ") must both have " + std::to_string(n) + " levels");
  }

  GeneratorLoss result;
  LossBreakdown& br = result.breakdown;
  br.per_level_mse.assign(static_cast<std::size_t>(n), 0.0);
  br.per_level_dice.assign(static_cast<std::size_t>(n), 0.0);
  br.per_level_disc.assign(static_cast<std::size_t>(n), 0.0);

  std::vector<nn::Var> terms;
  std::vector<double> weights;
  terms.push_back(cross_entropy_with_logits(outputs.logits[0], pyramid.levels[0], br.ori));
  weights.push_back(1.0);
  require_finite_term(br.ori, 0, "ori");

  for (int i = 0; i < n; ++i) {
    const double l = coefficients[i];
    if (l == 0.0) continue;
    if (adversarial) {
      auto scores = discriminate(bank, i, outputs.probs[i], bank_mode);
      terms.push_back(adversarial_mse(scores, 1.0, br.per_level_mse[i]));
      weights.push_back(l);
      require_finite_term(br.per_level_mse[i], i, "mse");
    }
    try {
      terms.push_back(dice_loss(outputs.probs[i], pyramid.levels[i], br.per_level_dice[i]));
    } catch (const NumericError&) {
      require_finite_term(std::numeric_limits<double>::quiet_NaN(), i, "dice");
    }
    weights.push_back(l);
    require_finite_term(br.per_level_dice[i], i, "dice");
  }
  br.total = br.recompute_total(coefficients);
  result.total = nn::weighted_sum(terms, weights);
  return result;
}

DiscriminatorLoss discriminator_loss(DiscriminatorBank& bank, int level, const Tensor& real, const Tensor& fake,
                                     nn::Mode mode) {
  if (real.shape() != fake.shape()) {
    throw ShapeError("discriminator_loss: real " + shape_str(real.shape()) + " vs fake " + shape_str(fake.shape()));
  }
  double real_term = 0.0, fake_term = 0.0;
  auto real_loss = adversarial_mse(discriminate(bank, level, nn::Var(real), mode), 1.0, real_term);
  auto fake_loss = adversarial_mse(discriminate(bank, level, nn::Var(fake), mode), 0.0, fake_term);
  DiscriminatorLoss out;
  out.value = real_term + fake_term;
  out.var = nn::weighted_sum({real_loss, fake_loss}, {1.0, 1.0});
  return out;
}

}  // namespace segadv
