#include "segadv/layers.hpp"

#include <cmath>
#include <cstring>

namespace segadv::nn {

void StateList::append(const std::string& prefix, const StateList& other) {
  for (const auto& [name, v] : other.parameters) parameters.emplace_back(prefix + name, v);
  for (const auto& [name, v] : other.buffers) buffers.emplace_back(prefix + name, v);
}

std::uint64_t hash_state(const std::vector<NamedVar>& entries) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [name, v] : entries) {
    feed(name.data(), name.size());
    for (int d : v.shape()) feed(&d, sizeof d);
    feed(v.value().ptr(), v.value().numel() * sizeof(float));
  }
  return h;
}

namespace {

Var uniform_parameter(Shape shape, float bound, InitStream& init) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = init.uniform(bound);
  return Var(std::move(t), true);
}

}  // namespace

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool with_bias,
               InitStream& init)
    : stride_(stride), padding_(padding) {
  const int fan_in = in_channels * kernel * kernel;
  // He-uniform for the weights, the usual 1/sqrt(fan_in) for the bias.
  weight_ = uniform_parameter({out_channels, in_channels, kernel, kernel}, std::sqrt(6.0f / fan_in), init);
  if (with_bias) bias_ = uniform_parameter({out_channels}, 1.0f / std::sqrt(static_cast<float>(fan_in)), init);
}

Var Conv2d::forward(const Var& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

StateList Conv2d::state() const {
  StateList s;
  s.parameters.emplace_back("weight", weight_);
  if (bias_.defined()) s.parameters.emplace_back("bias", bias_);
  return s;
}

ConvTranspose2x2::ConvTranspose2x2(int in_channels, int out_channels, InitStream& init) {
  const int fan_in = in_channels;
  weight_ = uniform_parameter({in_channels, out_channels, 2, 2}, std::sqrt(6.0f / fan_in), init);
  bias_ = uniform_parameter({out_channels}, 1.0f / std::sqrt(static_cast<float>(fan_in)), init);
}

Var ConvTranspose2x2::forward(const Var& x) const { return conv_transpose2x2(x, weight_, bias_); }

StateList ConvTranspose2x2::state() const {
  StateList s;
  s.parameters.emplace_back("weight", weight_);
  s.parameters.emplace_back("bias", bias_);
  return s;
}

BatchNorm2d::BatchNorm2d(int channels)
    : gamma_(Tensor({channels}, 1.0f), true),
      beta_(Tensor({channels}, 0.0f), true),
      running_mean_(Tensor({channels}, 0.0f)),
      running_var_(Tensor({channels}, 1.0f)) {}

Var BatchNorm2d::forward(const Var& x, Mode mode) {
  return batch_norm(x, gamma_, beta_, {&running_mean_.mutable_value(), &running_var_.mutable_value()}, mode);
}

StateList BatchNorm2d::state() const {
  StateList s;
  s.parameters.emplace_back("gamma", gamma_);
  s.parameters.emplace_back("beta", beta_);
  s.buffers.emplace_back("running_mean", running_mean_);
  s.buffers.emplace_back("running_var", running_var_);
  return s;
}

Adam::Adam(std::vector<NamedVar> parameters, AdamOptions options)
    : params_(std::move(parameters)), steps_(params_.size(), 0), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.shape(), 0.0f);
    v_.emplace_back(p.shape(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

void Adam::step() {
  const double b1 = options_.beta1, b2 = options_.beta2;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i].second;
    if (!p.has_grad()) continue;
    const std::int64_t t = ++steps_[i];
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    const float step_size = static_cast<float>(options_.lr / c1);
    const float sqrt_c2 = static_cast<float>(std::sqrt(c2));
    const float eps = static_cast<float>(options_.eps);
    Tensor& value = p.mutable_value();
    const Tensor& g = p.grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t k = 0; k < value.numel(); ++k) {
      m[k] = static_cast<float>(b1) * m[k] + static_cast<float>(1.0 - b1) * g[k];
      v[k] = static_cast<float>(b2) * v[k] + static_cast<float>(1.0 - b2) * g[k] * g[k];
      value[k] -= step_size * m[k] / (std::sqrt(v[k]) / sqrt_c2 + eps);
    }
  }
}

std::vector<std::pair<std::string, Tensor*>> Adam::moments() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.emplace_back("m." + params_[i].first, &m_[i]);
    out.emplace_back("v." + params_[i].first, &v_[i]);
  }
  return out;
}

}  // namespace segadv::nn
