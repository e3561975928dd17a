#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "segadv/config.hpp"
#include "segadv/data.hpp"
#include "segadv/discriminator.hpp"
#include "segadv/generator.hpp"
#include "segadv/layers.hpp"
#include "segadv/metrics.hpp"
#include "segadv/supervision.hpp"

namespace segadv {

/// Everything a run needs to continue exactly where it stopped. Batch order
/// and augmentation are pure functions of (data_seed, step), so the pair is
/// the run's whole random state.
struct TrainState {
  RunConfig config;
  int in_channels = 3;
  int height = 0;
  int width = 0;
  std::unique_ptr<Generator> generator;
  DiscriminatorBank bank;
  nn::Adam generator_optimizer;
  nn::Adam bank_optimizer;
  std::int64_t step = 0;
  std::uint64_t data_seed = 0;
  std::vector<LossBreakdown> history;
  std::vector<EvalReport> evals;
};

TrainState init_train_state(const RunConfig& config, int in_channels, int height, int width);

struct StepOptions {
  bool update_bank = true;   // run the discriminator phase
  bool adversarial = true;   // include the adversarial terms in the generator loss
};

/// One alternating update: forward, GT pyramid, one bank update over the
/// levels with l_i > 0, one generator update with the bank frozen. Appends
/// the generator-phase breakdown to the history. Throws NumericError on a
/// non-finite loss.
const LossBreakdown& train_step(TrainState& state, const ImageBatch& images, const MaskBatch& gt,
                                StepOptions options = {});

/// Argmax of level-1 outputs against the masks, one global confusion matrix.
EvalReport evaluate(Generator& generator, const Dataset& data, int n_classes, const std::string& config_hash = {},
                    int step = 0, int batch_size = 8);

using Predictor = std::function<MaskBatch(const ImageBatch&)>;
EvalReport evaluate_with(const Predictor& predict, const Dataset& data, int n_classes,
                         const std::string& config_hash = {}, int step = 0, int batch_size = 8);

struct TrainOptions {
  /// When set: checkpoint.bin and loss_log.jsonl are written here.
  std::optional<std::filesystem::path> out_dir;
  std::optional<TrainState> resume;
  StepOptions step_options;
};

struct TrainResult {
  TrainState state;
  EvalReport report;  // validation report at the final step
};

/// Runs train_step until config.steps, evaluating on `val` every
/// config.eval_interval steps.
TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& val_set,
                  TrainOptions options = {});

/// Hash used in reports: the configuration with the run length left out, so a
/// resumed run reports like the uninterrupted one.
std::string model_config_hash(const RunConfig& config);

nlohmann::json to_json(const LossBreakdown& breakdown, std::int64_t step);
LossBreakdown breakdown_from_json(const nlohmann::json& j);
void write_loss_log(const std::filesystem::path& path, const std::vector<LossBreakdown>& history);

// Checkpoint archive: "SEGADVCK", u32 version, u64 header length, JSON header
// (config, geometry, step, seeds, history, evals, tensor index), raw float32
// little-endian tensor data.
void save_checkpoint(const std::filesystem::path& path, TrainState& state);
/// When `expected` is given, the stored architecture (n_levels, n_classes,
/// generator_arch, base_width) must match it or ConfigError is thrown.
TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<RunConfig>& expected = {});

struct AblationCell {
  std::uint64_t seed = 0;
  bool ok = false;
  double miou = 0.0;
  double dice = 0.0;
  std::string error;
};

struct AblationRow {
  LossCoefficients coefficients;
  std::vector<AblationCell> cells;
  double miou_mean = 0.0, miou_std = 0.0;
  double dice_mean = 0.0, dice_std = 0.0;
  int succeeded = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  int succeeded() const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

/// Trains and evaluates every (coefficients, seed) cell. A failing cell is
/// recorded and the rest still run. `jobs` worker threads; results are
/// placed by grid order.
AblationTable run_ablation_grid(const RunConfig& base, const std::vector<LossCoefficients>& grid,
                                const std::vector<std::uint64_t>& seeds, const Dataset& train_set,
                                const Dataset& val_set, int jobs = 1);

/// Whitespace- or comma-separated coefficient rows; `#` starts a comment.
std::vector<LossCoefficients> read_grid(const std::filesystem::path& path);

}  // namespace segadv
