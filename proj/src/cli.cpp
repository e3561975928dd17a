#include "segadv/cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "segadv/config.hpp"
#include "segadv/data.hpp"
#include "segadv/errors.hpp"
#include "segadv/pipeline.hpp"
#include "segadv/plot.hpp"

namespace segadv::cli {

namespace fs = std::filesystem;

namespace {

// Maps the library's exception types onto exit codes with a one-line message.
template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericError& e) {
    err << "runtime error: " << e.what() << '\n';
    return kRuntimeError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

RunConfig resolve_config(const CommandInvocation& inv) {
  std::vector<std::string> overrides = inv.overrides;
  if (inv.steps) overrides.push_back("steps=" + std::to_string(*inv.steps));
  if (inv.seeds.size() == 1) overrides.push_back("seed=" + std::to_string(inv.seeds.front()));
  return load_config(inv.config_path, overrides);
}

std::vector<SampleRecord> read_records(const CommandInvocation& inv) {
  if (inv.data_root.empty()) throw DataError("--data ROOT is required");
  const fs::path manifest = inv.manifest.empty() ? inv.data_root / "manifest.tsv" : inv.manifest;
  return load_corpus(inv.data_root, manifest);
}

Dataset pick_split(const std::vector<SampleRecord>& records, std::initializer_list<const char*> names) {
  for (const char* name : names) {
    for (const auto& r : records) {
      if (r.split == name) return load_split(records, name);
    }
  }
  throw DataError(std::string("manifest has no '") + *names.begin() + "' split");
}

void prepare_out_dir(const fs::path& dir) {
  if (dir.empty()) throw DataError("--out DIR is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create output directory " + dir.string());
  const fs::path probe = dir / ".write_probe";
  std::ofstream(probe) << "";
  if (!fs::exists(probe)) throw DataError("output directory " + dir.string() + " is not writable");
  fs::remove(probe, ec);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace

int cmd_train(const CommandInvocation& inv, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (inv.seeds.size() > 1) throw ConfigError("train takes a single --seed");
    const RunConfig config = resolve_config(inv);
    const auto records = read_records(inv);
    const Dataset train_set = pick_split(records, {"train"});
    const Dataset val_set = pick_split(records, {"val", "test"});
    prepare_out_dir(inv.out_dir);

    TrainOptions options;
    options.out_dir = inv.out_dir;
    const auto result = train(config, train_set, val_set, std::move(options));

    write_json(inv.out_dir / "config.json", to_json(config));
    write_json(inv.out_dir / "eval_report.json", to_json(result.report));
    std::ofstream evals(inv.out_dir / "eval_history.jsonl");
    for (const auto& e : result.state.evals) evals << to_json(e).dump() << '\n';
    write_loss_plot(inv.out_dir / "loss_curve.png", result.state.history);

    out << "trained " << result.state.step << " steps; " << val_set.id << " mIoU=" << result.report.miou
        << " Dice=" << result.report.dice << '\n';
    return kOk;
  });
}

int cmd_eval(const CommandInvocation& inv, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (inv.checkpoint.empty()) throw DataError("a checkpoint path is required");
    if (!fs::exists(inv.checkpoint)) throw DataError("missing checkpoint " + inv.checkpoint.string());
    std::optional<RunConfig> expected;
    if (!inv.config_path.empty() || !inv.overrides.empty()) expected = load_config(inv.config_path, inv.overrides);
    TrainState state = load_checkpoint(inv.checkpoint, expected);

    const auto records = read_records(inv);
    const fs::path out_dir = inv.out_dir.empty() ? inv.checkpoint.parent_path() : inv.out_dir;
    prepare_out_dir(out_dir.empty() ? fs::path(".") : out_dir);

    std::vector<std::string> splits;
    for (const auto& r : records) {
      if (std::find(splits.begin(), splits.end(), r.split) == splits.end()) splits.push_back(r.split);
    }
    if (splits.empty()) throw DataError("manifest lists no samples");
    const std::string hash = model_config_hash(state.config);
    for (const auto& split : splits) {
      const Dataset data = load_split(records, split);
      if (data.channels() != state.in_channels || data.height() != state.height || data.width() != state.width) {
        throw DataError("split '" + split + "' images do not match the checkpoint's " +
                        std::to_string(state.in_channels) + "x" + std::to_string(state.height) + "x" +
                        std::to_string(state.width) + " input");
      }
      const auto report =
          evaluate(*state.generator, data, state.config.n_classes, hash, static_cast<int>(state.step));
      write_json((out_dir.empty() ? fs::path(".") : out_dir) / ("eval_report_" + split + ".json"), to_json(report));
      out << split << ": mIoU=" << report.miou << " Dice=" << report.dice << " (" << report.n_images << " images)\n";
    }
    return kOk;
  });
}

int cmd_ablate(const CommandInvocation& inv, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (inv.grid_path.empty()) throw ConfigError("--grid PATH is required");
    const auto grid = read_grid(inv.grid_path);
    if (grid.empty()) throw ConfigError("grid file " + inv.grid_path.string() + " lists no coefficient rows");
    CommandInvocation base_inv = inv;
    base_inv.seeds.clear();
    const RunConfig base = resolve_config(base_inv);
    const std::vector<std::uint64_t> seeds = inv.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : inv.seeds;

    const auto records = read_records(inv);
    const Dataset train_set = pick_split(records, {"train"});
    const Dataset val_set = pick_split(records, {"val", "test"});
    prepare_out_dir(inv.out_dir);

    const auto table = run_ablation_grid(base, grid, seeds, train_set, val_set, inv.jobs);
    write_json(inv.out_dir / "ablation.json", table.to_json());
    std::ofstream md(inv.out_dir / "ablation.md");
    md << table.to_text();
    if (!md) throw DataError("cannot write ablation table");
    out << table.to_text();
    if (table.succeeded() == 0) {
      err << "runtime error: every ablation cell failed\n";
      return kRuntimeError;
    }
    return kOk;
  });
}

int cmd_synth(const CommandInvocation& inv, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (inv.seeds.size() > 1) throw ConfigError("synth takes a single --seed");
    const std::uint64_t seed = inv.seeds.empty() ? 0 : inv.seeds.front();
    if (inv.count < 1 || inv.val_count < 1) throw ConfigError("--count and --val-count must be >= 1");
    prepare_out_dir(inv.out_dir);
    Dataset train_set{"train", synth_corpus(seed, inv.count, inv.size, inv.size, inv.density)};
    Dataset val_set{"val", synth_corpus(seed, inv.val_count, inv.size, inv.size, inv.density, 16,
                                        static_cast<std::uint64_t>(inv.count))};
    const auto manifest = write_corpus(inv.out_dir, {{"train", &train_set}, {"val", &val_set}});
    out << "wrote " << inv.count + inv.val_count << " samples; manifest " << manifest.string() << '\n';
    return kOk;
  });
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarially deep-supervised encoder-decoder segmentation"};
  app.require_subcommand(1);

  CommandInvocation inv;
  auto add_common = [&inv](CLI::App* sub) {
    sub->add_option("--config", inv.config_path, "Run config (JSON)");
    sub->add_option("--set", inv.overrides, "Config override KEY=VALUE (repeatable; l<i> sets one coefficient)");
  };
  auto add_data = [&inv](CLI::App* sub) {
    sub->add_option("--data", inv.data_root, "Corpus root directory");
    sub->add_option("--manifest", inv.manifest, "Manifest file (default ROOT/manifest.tsv)");
  };

  auto* train_cmd = app.add_subcommand("train", "Train and write checkpoint, loss log, report and plot");
  add_common(train_cmd);
  add_data(train_cmd);
  train_cmd->add_option("--out", inv.out_dir, "Output directory")->required();
  train_cmd->add_option("--seed", inv.seeds, "Run seed");
  train_cmd->add_option("--steps", inv.steps, "Training steps");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on every split of a manifest");
  eval_cmd->add_option("checkpoint", inv.checkpoint, "Checkpoint file")->required();
  add_common(eval_cmd);
  add_data(eval_cmd);
  eval_cmd->add_option("--out", inv.out_dir, "Report directory (default: next to the checkpoint)");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train/evaluate every coefficient row of a grid file");
  add_common(ablate_cmd);
  add_data(ablate_cmd);
  ablate_cmd->add_option("--grid", inv.grid_path, "Grid file, one coefficient row per line")->required();
  ablate_cmd->add_option("--out", inv.out_dir, "Output directory")->required();
  ablate_cmd->add_option("--seed", inv.seeds, "Seeds (repeatable or comma-separated)")->delimiter(',');
  ablate_cmd->add_option("--steps", inv.steps, "Training steps per cell");
  ablate_cmd->add_option("--jobs", inv.jobs, "Cells trained in parallel")->check(CLI::PositiveNumber);

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic crack corpus and manifest");
  synth_cmd->add_option("--out", inv.out_dir, "Corpus directory")->required();
  synth_cmd->add_option("--seed", inv.seeds, "Corpus seed");
  synth_cmd->add_option("--count", inv.count, "Training samples");
  synth_cmd->add_option("--val-count", inv.val_count, "Validation samples");
  synth_cmd->add_option("--size", inv.size, "Square image side (multiple of 16)");
  synth_cmd->add_option("--density", inv.density, "Target crack pixel fraction, in (0, 0.5)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  }

  if (train_cmd->parsed()) return cmd_train(inv, out, err);
  if (eval_cmd->parsed()) return cmd_eval(inv, out, err);
  if (ablate_cmd->parsed()) return cmd_ablate(inv, out, err);
  return cmd_synth(inv, out, err);
}

}  // namespace segadv::cli
