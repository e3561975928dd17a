#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace segadv {

/// Per-level weights l1..ln on the adversarial + Dice terms.
struct LossCoefficients {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  bool operator==(const LossCoefficients&) const = default;

  /// (1, 0.3, 0.1, 0.05, 0.01), the best-performing five-level schedule.
  static LossCoefficients best_schedule();
  /// (1, 0, ..., 0): only the full-resolution level is supervised.
  static LossCoefficients full_resolution_only(int n_levels);
};

enum class GeneratorArch { unet, nested_unet };
enum class DownsampleMode { average, nearest };

std::string to_string(GeneratorArch arch);
std::string to_string(DownsampleMode mode);

struct RunConfig {
  int n_levels = 5;
  int n_classes = 2;
  LossCoefficients coefficients = LossCoefficients::best_schedule();
  GeneratorArch generator_arch = GeneratorArch::unet;
  double lr_generator = 2e-4;
  double lr_discriminator = 2e-4;
  int batch_size = 8;
  int steps = 300;
  std::uint64_t seed = 0;
  DownsampleMode downsample_mode = DownsampleMode::average;

  // Optional keys.
  int base_width = 16;
  int eval_interval = 50;
  bool augment = false;
  std::optional<std::array<int, 2>> image_size;

  bool operator==(const RunConfig&) const = default;

  /// 2^(n_levels-1): spatial sizes must be multiples of this.
  int size_multiple() const { return 1 << (n_levels - 1); }
};

/// Parses and checks a key-value document, filling defaults for absent keys.
/// Throws ConfigError on unknown keys, wrong types, or inconsistent values.
RunConfig validate_config(const nlohmann::json& raw);

/// Full document with every key present; re-validates to an equal config.
nlohmann::json to_json(const RunConfig& config);

/// Applies one `KEY=VALUE` override to a raw document. KEY is any schema key
/// or `l<i>` (1-based coefficient index).
void apply_override(nlohmann::json& raw, std::string_view assignment);

RunConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Stable 16-hex-digit hash of the canonical serialization.
std::string config_hash(const RunConfig& config);

}  // namespace segadv
