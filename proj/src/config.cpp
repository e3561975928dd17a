#include "segadv/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "segadv/errors.hpp"

namespace segadv {

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "n_levels",   "n_classes",       "coefficients", "generator_arch", "lr_generator",
      "lr_discriminator", "batch_size", "steps",        "seed",           "downsample_mode",
      "base_width", "eval_interval",   "augment",      "image_size"};
  return keys;
}

int read_int(const nlohmann::json& raw, const char* key, int fallback, int minimum) {
  if (!raw.contains(key)) return fallback;
  const auto& v = raw.at(key);
  if (!v.is_number_integer()) throw ConfigError(std::string(key) + " must be an integer");
  const auto value = v.get<std::int64_t>();
  if (value < minimum) {
    throw ConfigError(std::string(key) + " must be >= " + std::to_string(minimum) + " (got " +
                      std::to_string(value) + ")");
  }
  if (value > 1'000'000'000) throw ConfigError(std::string(key) + " is out of range");
  return static_cast<int>(value);
}

double read_positive(const nlohmann::json& raw, const char* key, double fallback) {
  if (!raw.contains(key)) return fallback;
  const auto& v = raw.at(key);
  if (!v.is_number()) throw ConfigError(std::string(key) + " must be a number");
  const double value = v.get<double>();
  if (!std::isfinite(value) || value <= 0.0) throw ConfigError(std::string(key) + " must be > 0");
  return value;
}

std::string read_string(const nlohmann::json& raw, const char* key, const std::string& fallback) {
  if (!raw.contains(key)) return fallback;
  if (!raw.at(key).is_string()) throw ConfigError(std::string(key) + " must be a string");
  return raw.at(key).get<std::string>();
}

LossCoefficients default_coefficients(int n_levels) {
  const auto best = LossCoefficients::best_schedule();
  if (n_levels > static_cast<int>(best.size())) {
    throw ConfigError("coefficients must be given explicitly when n_levels > " + std::to_string(best.size()));
  }
  return {{best.values.begin(), best.values.begin() + n_levels}};
}

}  // namespace

LossCoefficients LossCoefficients::best_schedule() { return {{1.0, 0.3, 0.1, 0.05, 0.01}}; }

LossCoefficients LossCoefficients::full_resolution_only(int n_levels) {
  LossCoefficients c{std::vector<double>(static_cast<std::size_t>(n_levels), 0.0)};
  c.values.at(0) = 1.0;
  return c;
}

std::string to_string(GeneratorArch arch) { return arch == GeneratorArch::unet ? "unet" : "nested_unet"; }
std::string to_string(DownsampleMode mode) { return mode == DownsampleMode::average ? "average" : "nearest"; }

RunConfig validate_config(const nlohmann::json& raw) {
  if (!raw.is_object()) throw ConfigError("config document must be a key-value object");
  for (const auto& [key, value] : raw.items()) {
    if (!known_keys().count(key)) throw ConfigError("unknown config key '" + key + "'");
  }

  RunConfig c;
  c.n_levels = read_int(raw, "n_levels", c.n_levels, 1);
  if (c.n_levels > 12) throw ConfigError("n_levels must be <= 12");
  c.n_classes = read_int(raw, "n_classes", c.n_classes, 2);
  if (c.n_classes > 255) throw ConfigError("n_classes must be <= 255");

  if (raw.contains("coefficients")) {
    const auto& list = raw.at("coefficients");
    if (!list.is_array()) throw ConfigError("coefficients must be a list of numbers");
    c.coefficients.values.clear();
    for (const auto& v : list) {
      if (!v.is_number()) throw ConfigError("coefficients must be a list of numbers");
      c.coefficients.values.push_back(v.get<double>());
    }
  } else {
    c.coefficients = default_coefficients(c.n_levels);
  }
  if (static_cast<int>(c.coefficients.size()) != c.n_levels) {
    throw ConfigError("coefficient count " + std::to_string(c.coefficients.size()) + " does not match n_levels " +
                      std::to_string(c.n_levels));
  }
  for (std::size_t i = 0; i < c.coefficients.size(); ++i) {
    const double v = c.coefficients[i];
    if (!std::isfinite(v) || v < 0.0) {
      std::ostringstream os;
      os << "coefficient l" << i + 1 << " must be non-negative (got " << v << ")";
      throw ConfigError(os.str());
    }
  }
  if (c.coefficients[0] == 0.0) throw ConfigError("coefficient l1 must be positive");

  const std::string arch = read_string(raw, "generator_arch", "unet");
  if (arch == "unet") {
    c.generator_arch = GeneratorArch::unet;
  } else if (arch == "nested_unet") {
    c.generator_arch = GeneratorArch::nested_unet;
  } else {
    throw ConfigError("generator_arch must be 'unet' or 'nested_unet' (got '" + arch + "')");
  }

  c.lr_generator = read_positive(raw, "lr_generator", c.lr_generator);
  c.lr_discriminator = read_positive(raw, "lr_discriminator", c.lr_discriminator);
  c.batch_size = read_int(raw, "batch_size", c.batch_size, 1);
  c.steps = read_int(raw, "steps", c.steps, 0);

  if (raw.contains("seed")) {
    const auto& s = raw.at("seed");
    if (!s.is_number_integer() || (s.is_number_integer() && !s.is_number_unsigned() && s.get<std::int64_t>() < 0)) {
      throw ConfigError("seed must be a non-negative integer");
    }
    c.seed = s.get<std::uint64_t>();
  }

  const std::string mode = read_string(raw, "downsample_mode", "average");
  if (mode == "average") {
    c.downsample_mode = DownsampleMode::average;
  } else if (mode == "nearest") {
    c.downsample_mode = DownsampleMode::nearest;
  } else {
    throw ConfigError("downsample_mode must be 'average' or 'nearest' (got '" + mode + "')");
  }

  c.base_width = read_int(raw, "base_width", c.base_width, 1);
  c.eval_interval = read_int(raw, "eval_interval", c.eval_interval, 1);
  if (raw.contains("augment")) {
    if (!raw.at("augment").is_boolean()) throw ConfigError("augment must be true or false");
    c.augment = raw.at("augment").get<bool>();
  }
  if (raw.contains("image_size")) {
    const auto& s = raw.at("image_size");
    if (!s.is_array() || s.size() != 2 || !s[0].is_number_integer() || !s[1].is_number_integer()) {
      throw ConfigError("image_size must be a list [height, width]");
    }
    const int h = s[0].get<int>(), w = s[1].get<int>();
    if (h <= 0 || w <= 0) throw ConfigError("image_size entries must be positive");
    if (h % c.size_multiple() || w % c.size_multiple()) {
      throw ConfigError("image_size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by 2^(n_levels-1) = " +
                        std::to_string(c.size_multiple()));
    }
    c.image_size = std::array<int, 2>{h, w};
  }
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["n_levels"] = c.n_levels;
  j["n_classes"] = c.n_classes;
  j["coefficients"] = c.coefficients.values;
  j["generator_arch"] = to_string(c.generator_arch);
  j["lr_generator"] = c.lr_generator;
  j["lr_discriminator"] = c.lr_discriminator;
  j["batch_size"] = c.batch_size;
  j["steps"] = c.steps;
  j["seed"] = c.seed;
  j["downsample_mode"] = to_string(c.downsample_mode);
  j["base_width"] = c.base_width;
  j["eval_interval"] = c.eval_interval;
  j["augment"] = c.augment;
  if (c.image_size) j["image_size"] = {(*c.image_size)[0], (*c.image_size)[1]};
  return j;
}

void apply_override(nlohmann::json& raw, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not of the form KEY=VALUE");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));

  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) {
    if (text.find(',') != std::string::npos) {
      value = nlohmann::json::parse("[" + text + "]", nullptr, false);
    }
    if (value.is_discarded()) value = text;
  }

  if (!raw.is_object()) raw = nlohmann::json::object();
  if (key.size() > 1 && key[0] == 'l' && key.find_first_not_of("0123456789", 1) == std::string::npos) {
    const int index = std::stoi(key.substr(1));
    if (!raw.contains("coefficients")) {
      const int n = raw.contains("n_levels") && raw["n_levels"].is_number_integer() ? raw["n_levels"].get<int>() : 5;
      raw["coefficients"] = default_coefficients(n).values;
    }
    auto& list = raw["coefficients"];
    if (index < 1 || index > static_cast<int>(list.size())) {
      throw ConfigError("override " + key + " refers to a level outside 1.." + std::to_string(list.size()));
    }
    list[static_cast<std::size_t>(index - 1)] = value;
    return;
  }
  if (!known_keys().count(key)) throw ConfigError("override key '" + key + "' is not a config key");
  raw[key] = value;
}

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  nlohmann::json raw = nlohmann::json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    raw = nlohmann::json::parse(in, nullptr, false, true);
    if (raw.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(raw, o);
  return validate_config(raw);
}

std::string config_hash(const RunConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace segadv
