#include <doctest.h>

#include <fstream>
#include <sstream>

#include "segadv/data.hpp"
#include "segadv/errors.hpp"
#include "segadv/pipeline.hpp"
#include "segadv/supervision.hpp"
#include "test_support.hpp"

using namespace segadv;

namespace {

RunConfig tiny_config(int steps = 4) {
  RunConfig cfg;
  cfg.n_levels = 3;
  cfg.coefficients = LossCoefficients{{1.0, 0.3, 0.1}};
  cfg.base_width = 4;
  cfg.batch_size = 4;
  cfg.steps = steps;
  cfg.eval_interval = 2;
  cfg.seed = 3;
  return cfg;
}

struct TinyData {
  Dataset train{"train", synth_corpus(21, 10, 16, 16, 0.1, 4)};
  Dataset val{"val", synth_corpus(21, 4, 16, 16, 0.1, 4, 10)};
};

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("every step records a breakdown whose total is re-derivable") {
  TinyData d;
  auto cfg = tiny_config();
  auto state = init_train_state(cfg, 3, 16, 16);
  BatchIterator it(d.train, cfg.batch_size, state.data_seed, false);
  for (int s = 0; s < 3; ++s) {
    auto [images, masks] = it.next();
    const auto& br = train_step(state, images, masks);
    CHECK(std::abs(br.total - br.recompute_total(cfg.coefficients)) < 1e-6);
    CHECK(br.per_level_disc.size() == 3);
    CHECK(br.per_level_disc[0] > 0.0);
  }
  CHECK(state.step == 3);
  CHECK(state.history.size() == 3);
}

TEST_CASE("bank phase never changes generator parameters and generator phase never changes bank parameters") {
  TinyData d;
  auto cfg = tiny_config();
  auto [images, masks] = make_batch(d.train, 0, 4);

  auto state = init_train_state(cfg, 3, 16, 16);
  state.generator_optimizer = nn::Adam(state.generator->state().parameters, nn::AdamOptions{.lr = 0.0});
  const auto gen_before = nn::hash_state(state.generator->state().parameters);
  const auto bank_before = nn::hash_state(state.bank.state().parameters);
  train_step(state, images, masks);
  CHECK(nn::hash_state(state.generator->state().parameters) == gen_before);
  CHECK(nn::hash_state(state.bank.state().parameters) != bank_before);

  auto frozen = init_train_state(cfg, 3, 16, 16);
  const auto bank_params = nn::hash_state(frozen.bank.state().parameters);
  const auto bank_buffers = nn::hash_state(frozen.bank.state().buffers);
  const auto gen_params = nn::hash_state(frozen.generator->state().parameters);
  train_step(frozen, images, masks, StepOptions{.update_bank = false});
  CHECK(nn::hash_state(frozen.bank.state().parameters) == bank_params);
  CHECK(nn::hash_state(frozen.bank.state().buffers) == bank_buffers);
  CHECK(nn::hash_state(frozen.generator->state().parameters) != gen_params);
}

TEST_CASE("zero-coefficient bank members receive no updates") {
  TinyData d;
  auto cfg = tiny_config();
  cfg.coefficients = LossCoefficients::full_resolution_only(3);
  auto state = init_train_state(cfg, 3, 16, 16);
  auto initial = init_train_state(cfg, 3, 16, 16);
  BatchIterator it(d.train, cfg.batch_size, state.data_seed, false);
  for (int s = 0; s < 5; ++s) {
    auto [images, masks] = it.next();
    train_step(state, images, masks);
  }
  for (int level = 1; level < 3; ++level) {
    CHECK(nn::hash_state(state.bank.member(level).state().parameters) ==
          nn::hash_state(initial.bank.member(level).state().parameters));
  }
  CHECK(nn::hash_state(state.bank.member(0).state().parameters) !=
        nn::hash_state(initial.bank.member(0).state().parameters));
}

TEST_CASE("full-resolution-only training without adversarial terms matches a plain CE+Dice loop") {
  TinyData d;
  auto cfg = tiny_config();
  cfg.coefficients = LossCoefficients::full_resolution_only(3);
  auto state = init_train_state(cfg, 3, 16, 16);

  auto reference = build_generator(cfg, 3);
  nn::Adam opt(reference->state().parameters, nn::AdamOptions{.lr = cfg.lr_generator});
  BatchIterator it(d.train, cfg.batch_size, state.data_seed, false);
  for (int s = 0; s < 6; ++s) {
    auto [images, masks] = it.next();
    const auto& br = train_step(state, images, masks, StepOptions{.update_bank = false, .adversarial = false});

    opt.zero_grad();
    auto out = reference->forward(images.data, nn::Mode::train);
    const Tensor target = one_hot(masks);
    double ce = 0.0, dice = 0.0;
    auto total = nn::weighted_sum({cross_entropy_with_logits(out.logits[0], target, ce), dice_loss(out.probs[0], target, dice)},
                                  {1.0, 1.0});
    nn::backward(total);
    opt.step();

    CHECK(std::abs(br.total - (ce + dice)) < 1e-6);
    CHECK(br.per_level_mse[0] == 0.0);
  }
  CHECK(nn::hash_state(state.generator->state().parameters) == nn::hash_state(reference->state().parameters));
}

TEST_CASE("training is deterministic") {
  TinyData d;
  auto a = train(tiny_config(), d.train, d.val);
  auto b = train(tiny_config(), d.train, d.val);
  CHECK(a.state.history == b.state.history);
  CHECK(a.report == b.report);
  CHECK(a.state.evals.size() == 2);
  auto other = tiny_config();
  other.seed = 4;
  auto c = train(other, d.train, d.val);
  CHECK_FALSE(a.state.history == c.state.history);
}

TEST_CASE("zero steps reports the untrained model") {
  TinyData d;
  auto cfg = tiny_config(0);
  auto r = train(cfg, d.train, d.val);
  CHECK(r.state.step == 0);
  CHECK(r.state.history.empty());
  auto fresh = init_train_state(cfg, 3, 16, 16);
  CHECK(r.report == evaluate(*fresh.generator, d.val, 2, model_config_hash(cfg), 0));
}

TEST_CASE("resumed run reproduces the uninterrupted run") {
  TinyData d;
  testing::TempDir dir("resume");
  auto full = train(tiny_config(6), d.train, d.val);

  TrainOptions first;
  first.out_dir = dir.path();
  train(tiny_config(3), d.train, d.val, std::move(first));
  auto loaded = load_checkpoint(dir.path() / "checkpoint.bin");
  CHECK(loaded.step == 3);
  CHECK(loaded.history.size() == 3);
  TrainOptions second;
  second.resume = std::move(loaded);
  auto resumed = train(tiny_config(6), d.train, d.val, std::move(second));

  CHECK(resumed.state.history == full.state.history);
  CHECK(resumed.report == full.report);
  CHECK(nn::hash_state(resumed.state.generator->state().parameters) ==
        nn::hash_state(full.state.generator->state().parameters));
  CHECK(nn::hash_state(resumed.state.bank.state().parameters) == nn::hash_state(full.state.bank.state().parameters));
}

TEST_CASE("checkpoint round-trips parameters, buffers, optimiser state and history") {
  TinyData d;
  testing::TempDir dir("ckpt");
  TrainOptions opts;
  opts.out_dir = dir.path();
  auto r = train(tiny_config(2), d.train, d.val, std::move(opts));
  auto back = load_checkpoint(dir.path() / "checkpoint.bin", tiny_config(2));
  CHECK(back.config == r.state.config);
  CHECK(back.history == r.state.history);
  CHECK(back.evals == r.state.evals);
  CHECK(back.data_seed == r.state.data_seed);
  CHECK(nn::hash_state(back.generator->state().parameters) == nn::hash_state(r.state.generator->state().parameters));
  CHECK(nn::hash_state(back.generator->state().buffers) == nn::hash_state(r.state.generator->state().buffers));
  CHECK(back.generator_optimizer.step_counts() == r.state.generator_optimizer.step_counts());

  auto incompatible = tiny_config(2);
  incompatible.n_classes = 3;
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "checkpoint.bin", incompatible), ConfigError);

  std::ofstream(dir.path() / "junk.bin") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "junk.bin"), DataError);
  CHECK_THROWS_AS(load_checkpoint(dir.path() / "absent.bin"), DataError);
}

TEST_CASE("loss log has one record per step and round-trips") {
  TinyData d;
  testing::TempDir dir("log");
  TrainOptions opts;
  opts.out_dir = dir.path();
  auto r = train(tiny_config(3), d.train, d.val, std::move(opts));
  std::ifstream in(dir.path() / "loss_log.jsonl");
  std::string line;
  std::vector<LossBreakdown> back;
  while (std::getline(in, line)) back.push_back(breakdown_from_json(nlohmann::json::parse(line)));
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].total == r.state.history[i].total);
    CHECK(back[i].per_level_dice == r.state.history[i].per_level_dice);
  }
}

TEST_CASE("report hash ignores the step budget but tracks the model config") {
  auto a = tiny_config(5), b = tiny_config(50);
  CHECK(model_config_hash(a) == model_config_hash(b));
  b.coefficients = LossCoefficients::full_resolution_only(3);
  CHECK(model_config_hash(a) != model_config_hash(b));
}

TEST_CASE("evaluation of an oracle predictor and a constant predictor") {
  TinyData d;
  auto perfect = evaluate_with(
      [&](const ImageBatch& images) {
        MaskBatch m(images.batch(), images.height(), images.width(), 2);
        for (int b = 0; b < images.batch(); ++b) {
          const auto it = std::find_if(d.val.samples.begin(), d.val.samples.end(),
                                       [&](const Sample& s) { return s.id == images.source_ids[b]; });
          for (int p = 0; p < images.height() * images.width(); ++p) m.labels[b * images.height() * images.width() + p] = it->mask[p];
        }
        return m;
      },
      d.val, 2);
  CHECK(perfect.miou == 1.0);
  CHECK(perfect.dice == 1.0);
  auto background = evaluate_with(
      [](const ImageBatch& images) { return MaskBatch(images.batch(), images.height(), images.width(), 2); }, d.val, 2);
  REQUIRE(background.per_class_iou[1].has_value());
  CHECK(*background.per_class_iou[1] == 0.0);

  auto state = init_train_state(tiny_config(), 3, 16, 16);
  CHECK(evaluate(*state.generator, d.val, 2) == evaluate(*state.generator, d.val, 2));
  CHECK_THROWS_AS(evaluate(*state.generator, d.val, 3), ConfigError);
}

TEST_CASE("ablation grid keeps row order and records failed cells") {
  TinyData d;
  auto base = tiny_config(2);
  std::vector<LossCoefficients> grid{{{1.0, 0.0, 0.0}}, {{1.0, 0.3, 0.1}}, {{1.0, 0.3}}};
  auto table = run_ablation_grid(base, grid, {1, 2}, d.train, d.val, 2);
  REQUIRE(table.rows.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(table.rows[i].coefficients == grid[i]);
  CHECK(table.rows[0].succeeded == 2);
  CHECK(table.rows[2].succeeded == 0);
  CHECK_FALSE(table.rows[2].cells[0].ok);
  CHECK(table.rows[2].cells[0].error.find("does not match n_levels") != std::string::npos);
  CHECK(table.succeeded() == 4);

  auto serial = run_ablation_grid(base, grid, {1, 2}, d.train, d.val, 1);
  CHECK(serial.to_json() == table.to_json());
  CHECK(table.to_text().find("failed") != std::string::npos);

  auto single = run_ablation_grid(base, {grid[0]}, {5}, d.train, d.val);
  CHECK(single.rows.size() == 1);
  CHECK(single.rows[0].cells.size() == 1);
  CHECK_THROWS_AS(run_ablation_grid(base, {}, {1}, d.train, d.val), ConfigError);
}

TEST_CASE("grid files parse rows, separators and comments") {
  testing::TempDir dir("grid");
  std::ofstream(dir.path() / "g.txt") << "# header\n1 0.3 0.1\n\n1,0,0  # trailing\n";
  auto g = read_grid(dir.path() / "g.txt");
  REQUIRE(g.size() == 2);
  CHECK(g[0] == LossCoefficients{{1.0, 0.3, 0.1}});
  CHECK(g[1] == LossCoefficients{{1.0, 0.0, 0.0}});
  std::ofstream(dir.path() / "bad.txt") << "1 x 0\n";
  CHECK_THROWS_AS(read_grid(dir.path() / "bad.txt"), ConfigError);
}
