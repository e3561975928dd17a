#include "segadv/generator.hpp"

#include <cmath>
#include <optional>

#include "segadv/errors.hpp"

namespace segadv {

namespace {

constexpr std::uint64_t kGeneratorStream = 1;

// conv3x3 -> BN -> ReLU, twice. Convolutions feeding BN carry no bias.
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(int in, int out, nn::InitStream& init)
      : conv1_(in, out, 3, 1, 1, false, init), bn1_(out), conv2_(out, out, 3, 1, 1, false, init), bn2_(out) {}

  nn::Var forward(const nn::Var& x, nn::Mode mode) {
    auto h = nn::relu(bn1_.forward(conv1_.forward(x), mode));
    return nn::relu(bn2_.forward(conv2_.forward(h), mode));
  }

  nn::StateList state() const {
    nn::StateList s;
    s.append("conv1.", conv1_.state());
    s.append("bn1.", bn1_.state());
    s.append("conv2.", conv2_.state());
    s.append("bn2.", bn2_.state());
    return s;
  }

 private:
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::Conv2d conv2_;
  nn::BatchNorm2d bn2_;
};

std::vector<int> level_widths(int base, int n_levels) {
  std::vector<int> w;
  for (int i = 0; i < n_levels; ++i) w.push_back(base << i);
  return w;
}

DecoderOutputs apply_heads(std::vector<nn::Conv2d>& heads, const std::vector<nn::Var>& features) {
  DecoderOutputs out;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    out.logits.push_back(heads[i].forward(features[i]));
    out.probs.push_back(nn::softmax_channels(out.logits.back()));
  }
  return out;
}

class UNet final : public Generator {
 public:
  UNet(const RunConfig& config, int in_channels) : Generator(config.n_levels, config.n_classes, in_channels) {
    nn::InitStream init(nn::derive_seed(config.seed, kGeneratorStream));
    const auto w = level_widths(config.base_width, config.n_levels);
    const int n = config.n_levels;
    for (int i = 0; i < n; ++i) encoder_.emplace_back(i == 0 ? in_channels : w[i - 1], w[i], init);
    for (int i = 0; i + 1 < n; ++i) {
      up_.emplace_back(w[i + 1], w[i], init);
      decoder_.emplace_back(2 * w[i], w[i], init);
    }
    for (int i = 0; i < n; ++i) heads_.emplace_back(w[i], config.n_classes, 1, 1, 0, true, init);
  }

  DecoderOutputs forward(const Tensor& images, nn::Mode mode) override {
    const int n = n_levels();
    std::vector<nn::Var> skips;
    nn::Var x(images);
    for (int i = 0; i < n; ++i) {
      if (i > 0) x = nn::max_pool2x2(x);
      x = encoder_[i].forward(x, mode);
      skips.push_back(x);
    }
    std::vector<nn::Var> features(n);
    features[n - 1] = skips[n - 1];
    for (int i = n - 2; i >= 0; --i) {
      auto up = up_[i].forward(features[i + 1]);
      features[i] = decoder_[i].forward(nn::concat_channels({skips[i], up}), mode);
    }
    return apply_heads(heads_, features);
  }

  nn::StateList state() const override {
    nn::StateList s;
    for (std::size_t i = 0; i < encoder_.size(); ++i) s.append("enc" + std::to_string(i) + ".", encoder_[i].state());
    for (std::size_t i = 0; i < up_.size(); ++i) {
      s.append("up" + std::to_string(i) + ".", up_[i].state());
      s.append("dec" + std::to_string(i) + ".", decoder_[i].state());
    }
    for (std::size_t i = 0; i < heads_.size(); ++i) s.append("head" + std::to_string(i) + ".", heads_[i].state());
    return s;
  }

 private:
  std::vector<ConvBlock> encoder_;
  std::vector<nn::ConvTranspose2x2> up_;
  std::vector<ConvBlock> decoder_;
  std::vector<nn::Conv2d> heads_;
};

// Nested skip topology: node (i, j) at depth i sees every earlier node of its
// row plus the upsampled node (i+1, j-1). Level i's head reads node (i, n-1-i).
class NestedUNet final : public Generator {
 public:
  NestedUNet(const RunConfig& config, int in_channels) : Generator(config.n_levels, config.n_classes, in_channels) {
    nn::InitStream init(nn::derive_seed(config.seed, kGeneratorStream));
    const auto w = level_widths(config.base_width, config.n_levels);
    const int n = config.n_levels;
    nodes_.resize(n);
    ups_.resize(n);
    for (int i = 0; i < n; ++i) nodes_[i].emplace_back(i == 0 ? in_channels : w[i - 1], w[i], init);
    for (int j = 1; j < n; ++j)
      for (int i = 0; i + j < n; ++i) {
        ups_[i].emplace_back(w[i + 1], w[i], init);
        nodes_[i].emplace_back((j + 1) * w[i], w[i], init);
      }
    for (int i = 0; i < n; ++i) heads_.emplace_back(w[i], config.n_classes, 1, 1, 0, true, init);
  }

  DecoderOutputs forward(const Tensor& images, nn::Mode mode) override {
    const int n = n_levels();
    std::vector<std::vector<nn::Var>> x(n);
    nn::Var in(images);
    for (int i = 0; i < n; ++i) {
      if (i > 0) in = nn::max_pool2x2(in);
      in = nodes_[i][0].forward(in, mode);
      x[i].push_back(in);
    }
    for (int j = 1; j < n; ++j)
      for (int i = 0; i + j < n; ++i) {
        std::vector<nn::Var> parts(x[i].begin(), x[i].begin() + j);
        parts.push_back(ups_[i][j - 1].forward(x[i + 1][j - 1]));
        x[i].push_back(nodes_[i][j].forward(nn::concat_channels(parts), mode));
      }
    std::vector<nn::Var> features;
    for (int i = 0; i < n; ++i) features.push_back(x[i][n - 1 - i]);
    return apply_heads(heads_, features);
  }

  nn::StateList state() const override {
    nn::StateList s;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      for (std::size_t j = 0; j < nodes_[i].size(); ++j) {
        s.append("x" + std::to_string(i) + "_" + std::to_string(j) + ".", nodes_[i][j].state());
      }
      for (std::size_t j = 0; j < ups_[i].size(); ++j) {
        s.append("up" + std::to_string(i) + "_" + std::to_string(j + 1) + ".", ups_[i][j].state());
      }
    }
    for (std::size_t i = 0; i < heads_.size(); ++i) s.append("head" + std::to_string(i) + ".", heads_[i].state());
    return s;
  }

 private:
  std::vector<std::vector<ConvBlock>> nodes_;
  std::vector<std::vector<nn::ConvTranspose2x2>> ups_;
  std::vector<nn::Conv2d> heads_;
};

}  // namespace

void check_decoder_outputs(const DecoderOutputs& outputs, int batch, int n_classes, int height, int width,
                           int n_levels, double tolerance) {
  if (outputs.levels() != n_levels || outputs.logits.size() != outputs.probs.size()) {
    throw ShapeError("expected " + std::to_string(n_levels) + " decoder outputs, got " +
                     std::to_string(outputs.levels()));
  }
  for (int i = 0; i < n_levels; ++i) {
    const Shape expected{batch, n_classes, height >> i, width >> i};
    const Tensor& p = outputs.probs[i].value();
    if (p.shape() != expected) {
      throw ShapeError("decoder level " + std::to_string(i + 1) + " has shape " + shape_str(p.shape()) +
                       ", expected " + shape_str(expected));
    }
    const std::size_t plane = static_cast<std::size_t>(expected[2]) * expected[3];
    for (int b = 0; b < batch; ++b)
      for (std::size_t q = 0; q < plane; ++q) {
        double sum = 0.0;
        for (int c = 0; c < n_classes; ++c) sum += p[(static_cast<std::size_t>(b) * n_classes + c) * plane + q];
        if (std::abs(sum - 1.0) > tolerance) {
          throw ShapeError("decoder level " + std::to_string(i + 1) + " class probabilities sum to " +
                           std::to_string(sum));
        }
      }
  }
}

std::unique_ptr<Generator> build_generator(const RunConfig& config, int in_channels) {
  if (in_channels != 1 && in_channels != 3) {
    throw ConfigError("generator input must have 1 or 3 channels, got " + std::to_string(in_channels));
  }
  switch (config.generator_arch) {
    case GeneratorArch::unet:
      return std::make_unique<UNet>(config, in_channels);
    case GeneratorArch::nested_unet:
      return std::make_unique<NestedUNet>(config, in_channels);
  }
  throw ConfigError("unsupported generator_arch");
}

DecoderOutputs forward_multiscale(Generator& generator, const ImageBatch& images, nn::Mode mode) {
  images.validate(generator.n_levels());
  if (images.channels() != generator.in_channels()) {
    throw ShapeError("generator expects " + std::to_string(generator.in_channels()) + "-channel images, got " +
                     std::to_string(images.channels()));
  }
  std::optional<nn::NoGradGuard> guard;
  if (mode == nn::Mode::eval) guard.emplace();
  return generator.forward(images.data, mode);
}

}  // namespace segadv
