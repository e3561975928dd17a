#include <doctest.h>

#include <cmath>

#include "segadv/discriminator.hpp"
#include "segadv/errors.hpp"
#include "segadv/ops.hpp"
#include "segadv/supervision.hpp"
#include "test_support.hpp"

using namespace segadv;

namespace {

// Independent oracles written directly from the loss definitions.
double oracle_dice(const Tensor& p, const Tensor& t) {
  double inter = 0, sp = 0, st = 0;
  for (int b = 0; b < p.dim(0); ++b)
    for (int c = 1; c < p.dim(1); ++c)
      for (int y = 0; y < p.dim(2); ++y)
        for (int x = 0; x < p.dim(3); ++x) {
          inter += double(p.at(b, c, y, x)) * t.at(b, c, y, x);
          sp += p.at(b, c, y, x);
          st += t.at(b, c, y, x);
        }
  return 1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0);
}

double oracle_ce(const Tensor& logits, const Tensor& t) {
  double total = 0;
  const int B = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  for (int b = 0; b < B; ++b)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double z = 0;
        for (int c = 0; c < K; ++c) z += std::exp(double(logits.at(b, c, y, x)));
        for (int c = 0; c < K; ++c) total -= t.at(b, c, y, x) * std::log(std::exp(double(logits.at(b, c, y, x))) / z);
      }
  return total / (B * H * W);
}

double oracle_mse(const Tensor& s, double target) {
  double sum = 0;
  for (std::size_t i = 0; i < s.numel(); ++i) sum += (s[i] - target) * (s[i] - target);
  return sum / s.numel();
}

Tensor disjoint_maps(int first_row) {
  // 2 classes, 8x8 map; rows [first_row, first_row+1) are foreground: 8 pixels.
  Tensor t({1, 2, 8, 8});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      const bool fg = y == first_row;
      t.at(0, 1, y, x) = fg ? 1.0f : 0.0f;
      t.at(0, 0, y, x) = fg ? 0.0f : 1.0f;
    }
  return t;
}

RunConfig bank_config(int n_levels) {
  RunConfig cfg;
  cfg.n_levels = n_levels;
  cfg.coefficients = LossCoefficients::full_resolution_only(n_levels);
  cfg.base_width = 4;
  return cfg;
}

DecoderOutputs fabricated_outputs(int n_levels, int size, std::mt19937_64& rng, bool requires_grad = false) {
  DecoderOutputs out;
  for (int i = 0; i < n_levels; ++i) {
    nn::Var logits(testing::random_tensor({2, 2, size >> i, size >> i}, rng, -2.0f, 2.0f), requires_grad);
    out.logits.push_back(logits);
    out.probs.push_back(nn::softmax_channels(logits));
  }
  return out;
}

MaskBatch random_mask(int b, int h, int w, std::mt19937_64& rng) {
  MaskBatch m(b, h, w, 2);
  for (auto& v : m.labels) v = static_cast<int>(rng() % 4 == 0);
  return m;
}

}  // namespace

TEST_CASE("pyramid of an all-background mask") {
  MaskBatch m(1, 64, 64, 2);
  auto p = build_gt_pyramid(m, 5, DownsampleMode::average);
  REQUIRE(p.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(p.levels[i].shape() == Shape{1, 2, 64 >> i, 64 >> i});
    for (int y = 0; y < (64 >> i); ++y) {
      CHECK(p.levels[i].at(0, 0, y, 0) == 1.0f);
      CHECK(p.levels[i].at(0, 1, y, 0) == 0.0f);
    }
  }
}

TEST_CASE("average pyramid of a 2x2 checkerboard is an even split") {
  MaskBatch m(1, 2, 2, 2);
  m.at(0, 0, 1) = 1;
  m.at(0, 1, 0) = 1;
  auto p = build_gt_pyramid(m, 2, DownsampleMode::average);
  CHECK(p.levels[1].at(0, 0, 0, 0) == doctest::Approx(0.5));
  CHECK(p.levels[1].at(0, 1, 0, 0) == doctest::Approx(0.5));
}

TEST_CASE("nearest pyramid samples the top-left pixel") {
  std::mt19937_64 rng(1);
  auto m = random_mask(2, 8, 8, rng);
  auto p = build_gt_pyramid(m, 2, DownsampleMode::nearest);
  for (int b = 0; b < 2; ++b)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < 2; ++c) CHECK(p.levels[1].at(b, c, y, x) == p.levels[0].at(b, c, 2 * y, 2 * x));
}

TEST_CASE("pyramid rejects indivisible masks") {
  MaskBatch m(1, 24, 24, 2);
  CHECK_THROWS_AS(build_gt_pyramid(m, 5, DownsampleMode::average), ShapeError);
}

TEST_CASE("dice loss hand-computed values") {
  CHECK(dice_loss(disjoint_maps(0), disjoint_maps(3)) == doctest::Approx(1.0 - 1.0 / 17.0).epsilon(1e-12));
  Tensor single({1, 2, 4, 4});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) single.at(0, 0, y, x) = 1.0f;
  single.at(0, 0, 2, 1) = 0.0f;
  single.at(0, 1, 2, 1) = 1.0f;
  CHECK(dice_loss(single, single) == doctest::Approx(0.0).epsilon(1e-12));

  MaskBatch m(1, 32, 32, 2);
  for (int x = 0; x < 32; ++x) m.at(0, 5, x) = 1;
  const Tensor oh = one_hot(m);
  CHECK(dice_loss(oh, oh) < 1e-3);
}

TEST_CASE("dice loss matches the oracle, is symmetric and bounded") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = testing::random_tensor({2, 3, 4, 4}, rng, 0.0f, 1.0f);
    auto b = testing::random_tensor({2, 3, 4, 4}, rng, 0.0f, 1.0f);
    const double d = dice_loss(a, b);
    CHECK(d == doctest::Approx(oracle_dice(a, b)).epsilon(1e-12));
    CHECK(d == dice_loss(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
  }
  CHECK_THROWS_AS(dice_loss(Tensor({1, 2, 4, 4}), Tensor({1, 2, 4, 2})), ShapeError);
  Tensor bad({1, 2, 2, 2}, 0.5f);
  bad[3] = std::nanf("");
  CHECK_THROWS_AS(dice_loss(bad, Tensor({1, 2, 2, 2}, 0.5f)), NumericError);
}

TEST_CASE("adversarial mse hand-computed values") {
  const std::vector<double> half{0.5, 0.5};
  CHECK(adversarial_mse(half, 1.0) == doctest::Approx(0.25));
  CHECK(adversarial_mse(half, 0.5) == 0.0);
  const std::vector<double> three{0.2, 0.6, 1.0 - 1e-6};
  const double expect = (0.04 + 0.36 + (1.0 - 1e-6) * (1.0 - 1e-6)) / 3.0;
  CHECK(adversarial_mse(three, 0.0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(adversarial_mse(std::vector<double>{}, 1.0), ShapeError);
}

TEST_CASE("loss gradients match central differences at step 1e-3") {
  std::mt19937_64 rng(3);
  const double h = 1e-3;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> p(2 * 2 * 16), t(2 * 2 * 16), g(p.size());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : p) v = u(rng);
    for (auto& v : t) v = u(rng);
    dice_loss(p, t, 2, 2, 16, g);
    double worst = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      auto q = p;
      q[i] += h;
      const double plus = dice_loss(q, t, 2, 2, 16);
      q[i] -= 2 * h;
      const double fd = (plus - dice_loss(q, t, 2, 2, 16)) / (2 * h);
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(std::abs(fd), 1e-8));
    }
    CHECK(worst < 1e-4);

    std::vector<double> s(4), gs(4);
    for (auto& v : s) v = u(rng);
    adversarial_mse(s, 1.0, gs);
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto q = s;
      q[i] += h;
      const double plus = adversarial_mse(q, 1.0);
      q[i] -= 2 * h;
      const double fd = (plus - adversarial_mse(q, 1.0)) / (2 * h);
      CHECK(std::abs(fd - gs[i]) / std::max(std::abs(fd), 1e-8) < 1e-4);
    }

    std::vector<double> logits(p.size()), gl(p.size());
    for (auto& v : logits) v = 4.0 * u(rng) - 2.0;
    cross_entropy_with_logits(logits, t, 2, 2, 16, gl);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      auto q = logits;
      q[i] += h;
      const double plus = cross_entropy_with_logits(q, t, 2, 2, 16);
      q[i] -= 2 * h;
      const double fd = (plus - cross_entropy_with_logits(q, t, 2, 2, 16)) / (2 * h);
      CHECK(std::abs(fd - gl[i]) < 1e-7);
    }
  }
}

TEST_CASE("generator loss equals a hand-summed total") {
  std::mt19937_64 rng(4);
  auto bank = build_bank(bank_config(3), 4, 4);
  auto outputs = fabricated_outputs(3, 4, rng);
  auto pyramid = build_gt_pyramid(random_mask(2, 4, 4, rng), 3, DownsampleMode::average);
  LossCoefficients coeffs{{1.0, 0.3, 0.1}};
  auto loss = generator_loss(outputs, pyramid, bank, coeffs);

  double expect = oracle_ce(outputs.logits[0].value(), pyramid.levels[0]);
  CHECK(loss.breakdown.ori == doctest::Approx(expect).epsilon(1e-9));
  for (int i = 0; i < 3; ++i) {
    auto scores = discriminate(bank, i, outputs.probs[i], nn::Mode::train_frozen);
    const double mse = oracle_mse(scores.value(), 1.0);
    const double dice = oracle_dice(outputs.probs[i].value(), pyramid.levels[i]);
    CHECK(loss.breakdown.per_level_mse[i] == doctest::Approx(mse).epsilon(1e-9));
    CHECK(loss.breakdown.per_level_dice[i] == doctest::Approx(dice).epsilon(1e-9));
    expect += coeffs[i] * (mse + dice);
  }
  CHECK(std::abs(loss.breakdown.total - expect) < 1e-6);
  CHECK(std::abs(loss.total.item() - expect) < 1e-5);
  CHECK(loss.breakdown.recompute_total(coeffs) == loss.breakdown.total);
}

TEST_CASE("full-resolution-only coefficients reduce the loss to one level") {
  std::mt19937_64 rng(5);
  auto bank = build_bank(bank_config(5), 32, 32);
  auto outputs = fabricated_outputs(5, 32, rng);
  auto pyramid = build_gt_pyramid(random_mask(2, 32, 32, rng), 5, DownsampleMode::average);
  const auto before = nn::hash_state(bank.state().buffers);
  auto loss = generator_loss(outputs, pyramid, bank, LossCoefficients::full_resolution_only(5), nn::Mode::train);
  const auto& br = loss.breakdown;
  CHECK(std::abs(br.total - (br.ori + br.per_level_mse[0] + br.per_level_dice[0])) < 1e-6);
  for (int i = 1; i < 5; ++i) {
    CHECK(br.per_level_mse[i] == 0.0);
    CHECK(br.per_level_dice[i] == 0.0);
  }
  // Only level 1 ran a forward pass in train mode, so only its running statistics moved.
  auto after = bank.state().buffers;
  auto initial = build_bank(bank_config(5), 32, 32).state().buffers;
  CHECK(nn::hash_state(after) != before);
  for (std::size_t k = 0; k < after.size(); ++k) {
    if (after[k].first.rfind("level1.", 0) == 0) continue;
    CHECK(after[k].second.value() == initial[k].second.value());
  }
}

TEST_CASE("total is monotone in every coefficient") {
  std::mt19937_64 rng(6);
  LossBreakdown br;
  br.ori = 0.7;
  br.per_level_mse = {0.2, 0.3, 0.1};
  br.per_level_dice = {0.5, 0.4, 0.6};
  LossCoefficients c{{1.0, 0.3, 0.1}};
  const double base = br.recompute_total(c);
  for (std::size_t i = 0; i < 3; ++i) {
    auto bigger = c;
    bigger.values[i] += 0.25;
    CHECK(br.recompute_total(bigger) >= base);
  }
}

TEST_CASE("generator loss rejects mismatched coefficient counts") {
  std::mt19937_64 rng(7);
  auto bank = build_bank(bank_config(3), 8, 8);
  auto outputs = fabricated_outputs(3, 8, rng);
  auto pyramid = build_gt_pyramid(random_mask(2, 8, 8, rng), 3, DownsampleMode::average);
  CHECK_THROWS_AS(generator_loss(outputs, pyramid, bank, LossCoefficients{{1.0, 0.3}}), ShapeError);
}

TEST_CASE("non-finite loss names the failing level and term") {
  std::mt19937_64 rng(8);
  auto bank = build_bank(bank_config(2), 8, 8);
  auto outputs = fabricated_outputs(2, 8, rng);
  outputs.probs[1].mutable_value()[0] = std::nanf("");
  auto pyramid = build_gt_pyramid(random_mask(2, 8, 8, rng), 2, DownsampleMode::average);
  try {
    generator_loss(outputs, pyramid, bank, LossCoefficients{{1.0, 0.3}}, nn::Mode::train_frozen, false);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("level 2") != std::string::npos);
  }
}

TEST_CASE("discriminator loss arithmetic and detachment") {
  std::mt19937_64 rng(9);
  auto bank = build_bank(bank_config(1), 8, 8);
  auto real = testing::random_tensor({3, 2, 8, 8}, rng, 0.0f, 1.0f);
  auto fake = testing::random_tensor({3, 2, 8, 8}, rng, 0.0f, 1.0f);
  auto loss = discriminator_loss(bank, 0, real, fake, nn::Mode::train_frozen);
  auto sr = discriminate(bank, 0, nn::Var(real), nn::Mode::train_frozen);
  auto sf = discriminate(bank, 0, nn::Var(fake), nn::Mode::train_frozen);
  CHECK(loss.value == doctest::Approx(oracle_mse(sr.value(), 1.0) + oracle_mse(sf.value(), 0.0)).epsilon(1e-9));
  CHECK(loss.value >= 0.0);
  nn::backward(loss.var);
  for (auto& [name, p] : bank.state().parameters) CHECK_MESSAGE(p.has_grad(), name);
  CHECK_THROWS_AS(discriminator_loss(bank, 0, real, Tensor({3, 2, 4, 4})), ShapeError);
  CHECK_THROWS(discriminator_loss(bank, 1, real, fake));
}
