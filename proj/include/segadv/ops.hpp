#pragma once

#include <vector>

#include "segadv/autograd.hpp"

namespace segadv::nn {

/// How batch normalization treats its statistics during a forward pass.
enum class Mode {
  train,         ///< batch statistics, running buffers updated
  train_frozen,  ///< batch statistics, running buffers left untouched
  eval,          ///< running statistics
};

/// 2-D convolution, square kernel. `bias` may be undefined.
/// x: N×Ci×H×W, weight: Co×Ci×k×k, bias: Co.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding);

/// Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
/// x: N×Ci×H×W, weight: Ci×Co×2×2, bias: Co.
Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias);

struct BatchNormState {
  Tensor* running_mean;
  Tensor* running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;
};

/// Per-channel batch normalization over N×H×W.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState state, Mode mode);

Var relu(const Var& x);
Var leaky_relu(const Var& x, float slope);
Var sigmoid(const Var& x);

/// 2×2 max pooling with stride 2; H and W must be even.
Var max_pool2x2(const Var& x);

/// Concatenation along the channel axis of N×C×H×W tensors.
Var concat_channels(const std::vector<Var>& xs);

/// Softmax across the channel axis at every pixel.
Var softmax_channels(const Var& x);

/// Mean over H×W: N×C×H×W -> N×C.
Var global_avg_pool(const Var& x);

Var reshape(const Var& x, Shape shape);

/// Σ weights[i]·terms[i] over one-element tensors. The forward value is
/// accumulated in double.
Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights);

/// One-element node with an externally computed value and gradient with
/// respect to `input` (the gradient is scaled by the incoming seed).
Var scalar_with_gradient(const Var& input, double value, Tensor gradient);

}  // namespace segadv::nn
