#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "segadv/ops.hpp"
#include "segadv/random.hpp"

namespace segadv::nn {

using NamedVar = std::pair<std::string, Var>;

/// Trainable tensors plus non-trainable buffers (batch-norm running
/// statistics), each under a dotted name.
struct StateList {
  std::vector<NamedVar> parameters;
  std::vector<NamedVar> buffers;

  void append(const std::string& prefix, const StateList& other);
};

/// 64-bit FNV-1a over names, shapes and raw bytes of every entry.
std::uint64_t hash_state(const std::vector<NamedVar>& entries);

/// Parameter initialisation draws.
class InitStream {
 public:
  explicit InitStream(std::uint64_t seed) : rng_(seed) {}
  /// Uniform in [-bound, bound).
  float uniform(float bound) { return static_cast<float>(rng_.uniform(-bound, bound)); }

 private:
  SplitMix64 rng_;
};

using segadv::derive_seed;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool with_bias, InitStream& init);

  Var forward(const Var& x) const;
  StateList state() const;
  int out_channels() const { return weight_.dim(0); }

 private:
  Var weight_;
  Var bias_;
  int stride_ = 1;
  int padding_ = 0;
};

class ConvTranspose2x2 {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(int in_channels, int out_channels, InitStream& init);

  Var forward(const Var& x) const;
  StateList state() const;

 private:
  Var weight_;
  Var bias_;
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Var forward(const Var& x, Mode mode);
  StateList state() const;

 private:
  Var gamma_;
  Var beta_;
  Var running_mean_;
  Var running_var_;
};

struct AdamOptions {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment descent with per-parameter step counts. A parameter whose
/// gradient is empty at step() time is left untouched, moments included.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<NamedVar> parameters, AdamOptions options);

  void zero_grad();
  void step();

  const std::vector<NamedVar>& parameters() const { return params_; }
  /// Moment tensors named "m.<param>" and "v.<param>".
  std::vector<std::pair<std::string, Tensor*>> moments();
  std::vector<std::int64_t>& step_counts() { return steps_; }
  const AdamOptions& options() const { return options_; }

 private:
  std::vector<NamedVar> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::vector<std::int64_t> steps_;
  AdamOptions options_;
};

}  // namespace segadv::nn
