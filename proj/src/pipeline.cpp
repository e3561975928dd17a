#include "segadv/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "segadv/errors.hpp"
#include "segadv/random.hpp"

namespace segadv {

namespace {
constexpr std::uint64_t kDataStream = 7;
}

TrainState init_train_state(const RunConfig& config, int in_channels, int height, int width) {
  TrainState s;
  s.config = config;
  s.in_channels = in_channels;
  s.height = height;
  s.width = width;
  s.generator = build_generator(config, in_channels);
  s.bank = build_bank(config, height, width);
  s.generator_optimizer = nn::Adam(s.generator->state().parameters, {.lr = config.lr_generator});
  s.bank_optimizer = nn::Adam(s.bank.state().parameters, {.lr = config.lr_discriminator});
  s.data_seed = derive_seed(config.seed, kDataStream);
  return s;
}

const LossBreakdown& train_step(TrainState& state, const ImageBatch& images, const MaskBatch& gt,
                                StepOptions options) {
  const RunConfig& cfg = state.config;
  gt.validate_against(images);
  if (gt.n_classes != cfg.n_classes) {
    throw ShapeError("mask batch has " + std::to_string(gt.n_classes) + " classes, config has " +
                     std::to_string(cfg.n_classes));
  }
  if (images.height() != state.height || images.width() != state.width) {
    throw ShapeError("batch size " + std::to_string(images.height()) + "x" + std::to_string(images.width()) +
                     " does not match the run's " + std::to_string(state.height) + "x" + std::to_string(state.width));
  }

  auto outputs = forward_multiscale(*state.generator, images, nn::Mode::train);
  const auto pyramid = build_gt_pyramid(gt, cfg.n_levels, cfg.downsample_mode);

  std::vector<double> disc(static_cast<std::size_t>(cfg.n_levels), 0.0);
  if (options.update_bank) {
    state.bank_optimizer.zero_grad();
    std::vector<nn::Var> terms;
    for (int i = 0; i < cfg.n_levels; ++i) {
      if (cfg.coefficients[i] == 0.0) continue;
      auto d = discriminator_loss(state.bank, i, pyramid.levels[i], outputs.probs[i].value(), nn::Mode::train);
      if (!std::isfinite(d.value)) {
        throw NumericError("non-finite loss at level " + std::to_string(i + 1) + ", term discriminator");
      }
      disc[i] = d.value;
      terms.push_back(d.var);
    }
    if (!terms.empty()) nn::backward(nn::weighted_sum(terms, std::vector<double>(terms.size(), 1.0)));
    state.bank_optimizer.step();
  }

  state.generator_optimizer.zero_grad();
  state.bank_optimizer.zero_grad();
  auto loss = generator_loss(outputs, pyramid, state.bank, cfg.coefficients, nn::Mode::train_frozen,
                             options.adversarial);
  nn::backward(loss.total);
  state.generator_optimizer.step();
  // The bank is frozen in this phase; drop what flowed into it.
  state.bank_optimizer.zero_grad();

  if (std::abs(loss.breakdown.total - loss.breakdown.recompute_total(cfg.coefficients)) > 1e-6) {
    throw NumericError("loss breakdown total is inconsistent with its terms at step " + std::to_string(state.step + 1));
  }
  loss.breakdown.per_level_disc = std::move(disc);
  state.history.push_back(std::move(loss.breakdown));
  ++state.step;
  return state.history.back();
}

EvalReport evaluate_with(const Predictor& predict, const Dataset& data, int n_classes, const std::string& config_hash,
                         int step, int batch_size) {
  if (data.empty()) throw DataError("cannot evaluate an empty dataset");
  ConfusionMatrix conf(n_classes);
  for (std::size_t first = 0; first < data.size(); first += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min(static_cast<std::size_t>(batch_size), data.size() - first);
    auto [images, masks] = make_batch(data, first, count, n_classes);
    conf = accumulate_confusion(predict(images), masks, std::move(conf));
  }
  return make_report(data.id, static_cast<int>(data.size()), conf, config_hash, step);
}

EvalReport evaluate(Generator& generator, const Dataset& data, int n_classes, const std::string& config_hash,
                    int step, int batch_size) {
  if (generator.n_classes() != n_classes) {
    throw ConfigError("generator predicts " + std::to_string(generator.n_classes()) + " classes, evaluation expects " +
                      std::to_string(n_classes));
  }
  return evaluate_with(
      [&generator](const ImageBatch& images) {
        auto outputs = forward_multiscale(generator, images, nn::Mode::eval);
        return argmax_classes(outputs.probs[0].value());
      },
      data, n_classes, config_hash, step, batch_size);
}

std::string model_config_hash(const RunConfig& config) {
  RunConfig c = config;
  c.steps = 0;
  return config_hash(c);
}

namespace {

void check_dataset(const RunConfig& config, const Dataset& data, const char* role) {
  if (data.empty()) throw DataError(std::string(role) + " set is empty");
  data.validate(config.size_multiple());
  if (config.image_size && ((*config.image_size)[0] != data.height() || (*config.image_size)[1] != data.width())) {
    throw ShapeError(std::string(role) + " images are " + std::to_string(data.height()) + "x" +
                     std::to_string(data.width()) + " but the config declares " +
                     std::to_string((*config.image_size)[0]) + "x" + std::to_string((*config.image_size)[1]));
  }
}

}  // namespace

TrainResult train(const RunConfig& config, const Dataset& train_set, const Dataset& val_set, TrainOptions options) {
  check_dataset(config, train_set, "training");
  check_dataset(config, val_set, "validation");
  if (train_set.channels() != val_set.channels() || train_set.height() != val_set.height() ||
      train_set.width() != val_set.width()) {
    throw DataError("training and validation sets differ in image size or channels");
  }

  TrainState state;
  if (options.resume) {
    state = std::move(*options.resume);
    const RunConfig& stored = state.config;
    if (stored.n_levels != config.n_levels || stored.n_classes != config.n_classes ||
        stored.generator_arch != config.generator_arch || stored.base_width != config.base_width ||
        stored.seed != config.seed) {
      throw ConfigError("resumed state was built from an incompatible config");
    }
    state.config = config;
    if (state.in_channels != train_set.channels() || state.height != train_set.height() ||
        state.width != train_set.width()) {
      throw ShapeError("resumed state does not match the dataset geometry");
    }
  } else {
    state = init_train_state(config, train_set.channels(), train_set.height(), train_set.width());
  }

  const std::string hash = model_config_hash(config);
  BatchIterator batches(train_set, config.batch_size, state.data_seed, config.augment, config.n_classes);
  while (state.step < config.steps) {
    auto [images, masks] = batches.batch(state.step);
    train_step(state, images, masks, options.step_options);
    if (state.step % config.eval_interval == 0) {
      state.evals.push_back(evaluate(*state.generator, val_set, config.n_classes, hash, static_cast<int>(state.step)));
    }
  }

  EvalReport report = !state.evals.empty() && state.evals.back().step == state.step
                          ? state.evals.back()
                          : evaluate(*state.generator, val_set, config.n_classes, hash, static_cast<int>(state.step));

  if (options.out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*options.out_dir, ec);
    save_checkpoint(*options.out_dir / "checkpoint.bin", state);
    write_loss_log(*options.out_dir / "loss_log.jsonl", state.history);
  }
  return {std::move(state), std::move(report)};
}

nlohmann::json to_json(const LossBreakdown& b, std::int64_t step) {
  nlohmann::json j;
  j["step"] = step;
  j["ori"] = b.ori;
  j["mse"] = b.per_level_mse;
  j["dice"] = b.per_level_dice;
  j["total"] = b.total;
  j["disc"] = b.per_level_disc;
  return j;
}

LossBreakdown breakdown_from_json(const nlohmann::json& j) {
  LossBreakdown b;
  b.ori = j.at("ori").get<double>();
  b.per_level_mse = j.at("mse").get<std::vector<double>>();
  b.per_level_dice = j.at("dice").get<std::vector<double>>();
  b.total = j.at("total").get<double>();
  b.per_level_disc = j.at("disc").get<std::vector<double>>();
  return b;
}

void write_loss_log(const std::filesystem::path& path, const std::vector<LossBreakdown>& history) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < history.size(); ++i) out << to_json(history[i], static_cast<std::int64_t>(i + 1)).dump() << '\n';
  if (!out) throw DataError("cannot write " + path.string());
}

namespace {

constexpr char kMagic[8] = {'S', 'E', 'G', 'A', 'D', 'V', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

std::vector<std::pair<std::string, Tensor*>> checkpoint_tensors(TrainState& s) {
  std::vector<std::pair<std::string, Tensor*>> out;
  auto add_state = [&out](const std::string& prefix, const nn::StateList& list) {
    for (const auto& [name, v] : list.parameters) out.emplace_back(prefix + name, &const_cast<nn::Var&>(v).mutable_value());
    for (const auto& [name, v] : list.buffers) out.emplace_back(prefix + name, &const_cast<nn::Var&>(v).mutable_value());
  };
  add_state("generator/", s.generator->state());
  add_state("bank/", s.bank.state());
  for (auto& [name, t] : s.generator_optimizer.moments()) out.emplace_back("adam.generator/" + name, t);
  for (auto& [name, t] : s.bank_optimizer.moments()) out.emplace_back("adam.bank/" + name, t);
  return out;
}

EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.dataset_id = j.at("dataset_id").get<std::string>();
  r.n_images = j.at("n_images").get<int>();
  r.step = j.at("step").get<int>();
  r.miou = j.at("miou").get<double>();
  r.dice = j.at("dice").get<double>();
  r.dice_foreground = j.at("dice_foreground").get<double>();
  for (const auto& v : j.at("per_class_iou")) {
    r.per_class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  const auto& rows = j.at("confusion");
  r.confusion = ConfusionMatrix(static_cast<int>(rows.size()));
  for (std::size_t g = 0; g < rows.size(); ++g)
    for (std::size_t p = 0; p < rows[g].size(); ++p) {
      r.confusion.at(static_cast<int>(g), static_cast<int>(p)) = rows[g][p].get<std::uint64_t>();
    }
  r.config_hash = j.at("config_hash").get<std::string>();
  return r;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, TrainState& state) {
  nlohmann::json header;
  header["format"] = "segadv-checkpoint";
  header["config"] = to_json(state.config);
  header["in_channels"] = state.in_channels;
  header["height"] = state.height;
  header["width"] = state.width;
  header["step"] = state.step;
  header["data_seed"] = state.data_seed;
  header["adam_steps"] = {{"generator", state.generator_optimizer.step_counts()},
                          {"bank", state.bank_optimizer.step_counts()}};
  auto history = nlohmann::json::array();
  for (std::size_t i = 0; i < state.history.size(); ++i) history.push_back(to_json(state.history[i], static_cast<std::int64_t>(i + 1)));
  header["history"] = history;
  auto evals = nlohmann::json::array();
  for (const auto& e : state.evals) evals.push_back(to_json(e));
  header["evals"] = evals;

  const auto tensors = checkpoint_tensors(state);
  auto index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    index.push_back({{"name", name}, {"shape", t->shape()}, {"offset", offset}});
    offset += t->numel();
  }
  header["tensors"] = index;

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&kVersion), sizeof kVersion);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(t->numel() * sizeof(float)));
  }
  if (!out) throw DataError("cannot write checkpoint " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path, const std::optional<RunConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kMagic)) || version != kVersion ||
      len > (1ULL << 32)) {
    throw DataError(path.string() + " is not a segadv checkpoint");
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const auto header = nlohmann::json::parse(text, nullptr, false);
  if (!in || header.is_discarded()) throw DataError("corrupt checkpoint header in " + path.string());

  try {
    const RunConfig config = validate_config(header.at("config"));
    if (expected) {
      const RunConfig& e = *expected;
      if (e.n_levels != config.n_levels || e.n_classes != config.n_classes ||
          e.generator_arch != config.generator_arch || e.base_width != config.base_width) {
        throw ConfigError("checkpoint " + path.string() + " was built with n_levels=" + std::to_string(config.n_levels) +
                          ", n_classes=" + std::to_string(config.n_classes) + ", generator_arch=" +
                          to_string(config.generator_arch) + ", base_width=" + std::to_string(config.base_width) +
                          ", incompatible with the requested config");
      }
    }
    TrainState state = init_train_state(config, header.at("in_channels").get<int>(), header.at("height").get<int>(),
                                        header.at("width").get<int>());
    state.step = header.at("step").get<std::int64_t>();
    state.data_seed = header.at("data_seed").get<std::uint64_t>();
    state.generator_optimizer.step_counts() = header.at("adam_steps").at("generator").get<std::vector<std::int64_t>>();
    state.bank_optimizer.step_counts() = header.at("adam_steps").at("bank").get<std::vector<std::int64_t>>();
    if (state.generator_optimizer.step_counts().size() != state.generator_optimizer.parameters().size() ||
        state.bank_optimizer.step_counts().size() != state.bank_optimizer.parameters().size()) {
      throw DataError("checkpoint optimizer state does not match the architecture");
    }
    for (const auto& h : header.at("history")) state.history.push_back(breakdown_from_json(h));
    for (const auto& e : header.at("evals")) state.evals.push_back(report_from_json(e));
    if (static_cast<std::int64_t>(state.history.size()) != state.step) {
      throw DataError("checkpoint history length disagrees with its step counter");
    }

    const auto targets = checkpoint_tensors(state);
    const auto& index = header.at("tensors");
    if (index.size() != targets.size()) throw DataError("checkpoint tensor count does not match the architecture");
    const auto data_start = in.tellg();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const auto& [name, t] = targets[i];
      const auto& entry = index[i];
      if (entry.at("name").get<std::string>() != name || entry.at("shape").get<Shape>() != t->shape()) {
        throw DataError("checkpoint tensor '" + entry.at("name").get<std::string>() + "' does not match '" + name +
                        "' " + shape_str(t->shape()));
      }
      in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>() * sizeof(float)));
      in.read(reinterpret_cast<char*>(t->ptr()), static_cast<std::streamsize>(t->numel() * sizeof(float)));
      if (!in) throw DataError("checkpoint " + path.string() + " is truncated");
    }
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint header in " + path.string() + ": " + e.what());
  }
}

int AblationTable::succeeded() const {
  int n = 0;
  for (const auto& r : rows) n += r.succeeded;
  return n;
}

nlohmann::json AblationTable::to_json() const {
  auto rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json row;
    row["coefficients"] = r.coefficients.values;
    auto cells = nlohmann::json::array();
    for (const auto& c : r.cells) {
      nlohmann::json cell{{"seed", c.seed}, {"status", c.ok ? "ok" : "failed"}};
      if (c.ok) {
        cell["miou"] = c.miou;
        cell["dice"] = c.dice;
      } else {
        cell["error"] = c.error;
      }
      cells.push_back(cell);
    }
    row["cells"] = cells;
    row["succeeded"] = r.succeeded;
    if (r.succeeded > 0) {
      row["miou_mean"] = r.miou_mean;
      row["miou_std"] = r.miou_std;
      row["dice_mean"] = r.dice_mean;
      row["dice_std"] = r.dice_std;
    }
    rows_json.push_back(row);
  }
  return {{"rows", rows_json}};
}

namespace {

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

}  // namespace

std::string AblationTable::to_text() const {
  std::size_t levels = 0;
  for (const auto& r : rows) levels = std::max(levels, r.coefficients.size());
  std::ostringstream os;
  os << '|';
  for (std::size_t i = 0; i < levels; ++i) os << " l" << i + 1 << " |";
  os << " seed | mIoU | Dice |\n|";
  for (std::size_t i = 0; i < levels + 3; ++i) os << "---|";
  os << '\n';
  for (const auto& r : rows) {
    for (const auto& c : r.cells) {
      os << '|';
      for (std::size_t i = 0; i < levels; ++i) os << ' ' << (i < r.coefficients.size() ? fmt("%g", r.coefficients[i]) : "") << " |";
      os << ' ' << c.seed << " | ";
      if (c.ok) {
        os << fmt("%.4f", c.miou) << " | " << fmt("%.4f", c.dice) << " |\n";
      } else {
        os << "FAILED | " << c.error << " |\n";
      }
    }
  }
  os << "\nPer-row mean ± std over seeds:\n";
  for (const auto& r : rows) {
    os << '(';
    for (std::size_t i = 0; i < r.coefficients.size(); ++i) os << (i ? ", " : "") << fmt("%g", r.coefficients[i]);
    os << "): ";
    if (r.succeeded == 0) {
      os << "all cells failed\n";
    } else {
      os << "mIoU " << fmt("%.4f", r.miou_mean) << " ± " << fmt("%.4f", r.miou_std) << ", Dice "
         << fmt("%.4f", r.dice_mean) << " ± " << fmt("%.4f", r.dice_std) << " (" << r.succeeded << '/'
         << r.cells.size() << " cells)\n";
    }
  }
  return os.str();
}

AblationTable run_ablation_grid(const RunConfig& base, const std::vector<LossCoefficients>& grid,
                                const std::vector<std::uint64_t>& seeds, const Dataset& train_set,
                                const Dataset& val_set, int jobs) {
  if (grid.empty()) throw ConfigError("ablation grid is empty");
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");

  AblationTable table;
  for (const auto& coeffs : grid) {
    AblationRow row;
    row.coefficients = coeffs;
    for (auto seed : seeds) { AblationCell cell; cell.seed = seed; row.cells.push_back(std::move(cell)); }
    table.rows.push_back(std::move(row));
  }

  const std::size_t n_cells = grid.size() * seeds.size();
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t k = next++; k < n_cells; k = next++) {
      AblationRow& row = table.rows[k / seeds.size()];
      AblationCell& cell = row.cells[k % seeds.size()];
      try {
        RunConfig cfg = base;
        cfg.coefficients = row.coefficients;
        cfg.seed = cell.seed;
        cfg = validate_config(to_json(cfg));
        const auto result = train(cfg, train_set, val_set);
        cell.miou = result.report.miou;
        cell.dice = result.report.dice;
        cell.ok = true;
      } catch (const std::exception& e) {
        cell.ok = false;
        cell.error = e.what();
      }
    }
  };
  const int n_threads = std::clamp(jobs, 1, static_cast<int>(n_cells));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (auto& row : table.rows) {
    std::vector<double> mi, di;
    for (const auto& c : row.cells)
      if (c.ok) {
        mi.push_back(c.miou);
        di.push_back(c.dice);
      }
    row.succeeded = static_cast<int>(mi.size());
    auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
      if (v.empty()) return;
      double s = 0.0;
      for (double x : v) s += x;
      mean = s / static_cast<double>(v.size());
      double q = 0.0;
      for (double x : v) q += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(q / static_cast<double>(v.size() - 1)) : 0.0;
    };
    stats(mi, row.miou_mean, row.miou_std);
    stats(di, row.dice_mean, row.dice_std);
  }
  return table;
}

std::vector<LossCoefficients> read_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read grid file " + path.string());
  std::vector<LossCoefficients> grid;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream is(line);
    LossCoefficients row;
    std::string token;
    while (is >> token) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(token, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != token.size()) {
        throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": '" + token + "' is not a number");
      }
      row.values.push_back(v);
    }
    if (!row.values.empty()) grid.push_back(std::move(row));
  }
  return grid;
}

}  // namespace segadv
