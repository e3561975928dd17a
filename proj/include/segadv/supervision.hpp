#pragma once

#include <span>
#include <vector>

#include "segadv/config.hpp"
#include "segadv/discriminator.hpp"
#include "segadv/generator.hpp"
#include "segadv/types.hpp"

namespace segadv {

/// Ground truth resampled to every decoder level. levels[0] is the one-hot
/// mask; levels[i] is B×K×(H/2^i)×(W/2^i) and stays on the probability simplex.
struct GtPyramid {
  std::vector<Tensor> levels;

  int size() const { return static_cast<int>(levels.size()); }
};

/// average: 2×2 mean pooling per halving. nearest: top-left sample of each
/// 2×2 cell.
GtPyramid build_gt_pyramid(const MaskBatch& gt, int n_levels, DownsampleMode mode);

/// Smoothing constant of the soft Dice loss.
inline constexpr double kDiceSmoothing = 1.0;

/// Soft Dice loss over the foreground channels (1..K-1; channel 0 when K = 1)
/// of B×K×plane data, pooled over batch and pixels:
///   1 − (2·Σ p·t + ε) / (Σ p + Σ t + ε).
/// When `grad` is non-empty it receives d loss / d pred.
double dice_loss(std::span<const double> pred, std::span<const double> target, int batch, int n_classes,
                 std::size_t plane, std::span<double> grad = {});
double dice_loss(const Tensor& pred, const Tensor& target);

/// Mean over the batch of (score − target)². Throws on an empty batch.
double adversarial_mse(std::span<const double> scores, double target, std::span<double> grad = {});

/// Pixel-mean cross-entropy between softmax(logits) and a soft target, both
/// B×K×plane. `grad` receives d loss / d logits.
double cross_entropy_with_logits(std::span<const double> logits, std::span<const double> target, int batch,
                                 int n_classes, std::size_t plane, std::span<double> grad = {});

// Graph-recording versions of the kernels above. `value` receives the
// double-precision loss.
nn::Var dice_loss(const nn::Var& pred, const Tensor& target, double& value);
nn::Var adversarial_mse(const nn::Var& scores, double target, double& value);
nn::Var cross_entropy_with_logits(const nn::Var& logits, const Tensor& target, double& value);

/// Per-step loss record. Levels with a zero coefficient carry 0 in both
/// per-level vectors.
struct LossBreakdown {
  double ori = 0.0;
  std::vector<double> per_level_mse;
  std::vector<double> per_level_dice;
  double total = 0.0;
  /// Discriminator-phase losses per level (0 when skipped).
  std::vector<double> per_level_disc;

  /// ori + Σ l_i·(mse_i + dice_i), summed in level order.
  double recompute_total(const LossCoefficients& coefficients) const;
  bool operator==(const LossBreakdown&) const = default;
};

struct GeneratorLoss {
  LossBreakdown breakdown;
  nn::Var total;  // differentiable with respect to generator and bank
};

/// ori = cross-entropy of the full-resolution output; each level with
/// l_i > 0 adds l_i·(adversarial_mse(D_i(output_i), 1) + dice_loss(output_i,
/// pyramid_i)). Levels with l_i = 0 are skipped without a discriminator pass.
/// Throws NumericError naming the level and term if any term is non-finite.
/// With `adversarial` false the discriminators are never consulted and every
/// mse term is 0 (plain deep-supervised Dice + cross-entropy).
GeneratorLoss generator_loss(const DecoderOutputs& outputs, const GtPyramid& pyramid, DiscriminatorBank& bank,
                             const LossCoefficients& coefficients, nn::Mode bank_mode = nn::Mode::train_frozen,
                             bool adversarial = true);

struct DiscriminatorLoss {
  double value = 0.0;
  nn::Var var;
};

/// adversarial_mse(D(real), 1) + adversarial_mse(D(fake), 0). `fake` is a
/// plain tensor so no gradient reaches the generator.
DiscriminatorLoss discriminator_loss(DiscriminatorBank& bank, int level, const Tensor& real, const Tensor& fake,
                                     nn::Mode mode = nn::Mode::train);

}  // namespace segadv
