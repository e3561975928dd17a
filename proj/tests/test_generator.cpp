#include <doctest.h>

#include "segadv/errors.hpp"
#include "segadv/generator.hpp"
#include "test_support.hpp"

using namespace segadv;

namespace {

RunConfig small_config(int n_levels, GeneratorArch arch = GeneratorArch::unet, int n_classes = 2) {
  RunConfig cfg;
  cfg.n_levels = n_levels;
  cfg.n_classes = n_classes;
  cfg.coefficients = LossCoefficients::full_resolution_only(n_levels);
  cfg.generator_arch = arch;
  cfg.base_width = 4;
  return cfg;
}

ImageBatch random_images(int b, int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ImageBatch{testing::random_tensor({b, 3, h, w}, rng, 0.0f, 1.0f), std::vector<std::string>(b, "x")};
}

}  // namespace

TEST_CASE("decoder outputs halve per level and are distributions") {
  for (auto arch : {GeneratorArch::unet, GeneratorArch::nested_unet}) {
    for (int n : {1, 3, 5}) {
      auto gen = build_generator(small_config(n, arch));
      auto images = random_images(2, 32, 48, 1);
      auto out = forward_multiscale(*gen, images);
      REQUIRE(out.levels() == n);
      for (int i = 0; i < n; ++i) {
        CHECK(out.probs[i].shape() == Shape{2, 2, 32 >> i, 48 >> i});
        CHECK(out.logits[i].shape() == out.probs[i].shape());
      }
      CHECK_NOTHROW(check_decoder_outputs(out, 2, 2, 32, 48, n));
    }
  }
}

TEST_CASE("three-class generator emits three channels per level") {
  auto gen = build_generator(small_config(3, GeneratorArch::unet, 3));
  auto out = forward_multiscale(*gen, random_images(1, 16, 16, 2));
  for (int i = 0; i < 3; ++i) CHECK(out.probs[i].dim(1) == 3);
}

TEST_CASE("generator initialisation is a pure function of the seed") {
  auto cfg = small_config(3);
  auto a = build_generator(cfg);
  auto b = build_generator(cfg);
  CHECK(nn::hash_state(a->state().parameters) == nn::hash_state(b->state().parameters));
  cfg.seed = 1;
  auto c = build_generator(cfg);
  CHECK(nn::hash_state(a->state().parameters) != nn::hash_state(c->state().parameters));
}

TEST_CASE("eval forward is deterministic and leaves running statistics untouched") {
  auto gen = build_generator(small_config(3));
  auto images = random_images(2, 16, 16, 3);
  const auto buffers = nn::hash_state(gen->state().buffers);
  auto first = forward_multiscale(*gen, images);
  auto second = forward_multiscale(*gen, images);
  CHECK(nn::hash_state(gen->state().buffers) == buffers);
  for (int i = 0; i < 3; ++i) CHECK(first.probs[i].value() == second.probs[i].value());
  gen->forward(images.data, nn::Mode::train);
  CHECK(nn::hash_state(gen->state().buffers) != buffers);
}

TEST_CASE("indivisible input sizes are rejected") {
  auto gen = build_generator(small_config(5));
  CHECK_THROWS(forward_multiscale(*gen, random_images(1, 24, 32, 4)));
}

TEST_CASE("check_decoder_outputs flags wrong level counts") {
  auto gen = build_generator(small_config(3));
  auto out = forward_multiscale(*gen, random_images(1, 16, 16, 5));
  CHECK_THROWS(check_decoder_outputs(out, 1, 2, 16, 16, 4));
  CHECK_THROWS(check_decoder_outputs(out, 1, 2, 32, 16, 3));
}
