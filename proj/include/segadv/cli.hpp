#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace segadv::cli {

enum ExitCode : int {
  kOk = 0,
  kUsageError = 1,
  kConfigError = 2,
  kDataError = 3,
  kRuntimeError = 4,
};

enum class Command { train, eval, ablate, synth };

struct CommandInvocation {
  Command command = Command::train;
  std::filesystem::path config_path;
  std::filesystem::path data_root;
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  std::filesystem::path grid_path;
  std::filesystem::path checkpoint;
  std::vector<std::uint64_t> seeds;
  std::optional<int> steps;
  int jobs = 1;
  std::vector<std::string> overrides;

  // synth only
  int count = 128;
  int val_count = 32;
  int size = 64;
  double density = 0.05;
};

int cmd_train(const CommandInvocation& inv, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandInvocation& inv, std::ostream& out, std::ostream& err);
int cmd_ablate(const CommandInvocation& inv, std::ostream& out, std::ostream& err);
int cmd_synth(const CommandInvocation& inv, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches; returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace segadv::cli
