#pragma once

#include <memory>
#include <vector>

#include "segadv/config.hpp"
#include "segadv/layers.hpp"
#include "segadv/types.hpp"

namespace segadv {

/// One soft prediction map per decoder level. Level index 0 is full
/// resolution; level i has spatial size H/2^i × W/2^i.
struct DecoderOutputs {
  std::vector<nn::Var> logits;
  std::vector<nn::Var> probs;  // softmax of logits across classes

  int levels() const { return static_cast<int>(probs.size()); }
};

/// Throws ShapeError unless `outputs` has `n_levels` entries of shape
/// B×K×(H/2^i)×(W/2^i) whose per-pixel class sums are 1 within `tolerance`.
void check_decoder_outputs(const DecoderOutputs& outputs, int batch, int n_classes, int height, int width,
                           int n_levels, double tolerance = 1e-5);

/// Encoder-decoder segmentation network with a 1×1 prediction head at every
/// decoder level.
class Generator {
 public:
  virtual ~Generator() = default;

  virtual DecoderOutputs forward(const Tensor& images, nn::Mode mode) = 0;
  virtual nn::StateList state() const = 0;

  int n_levels() const { return n_levels_; }
  int n_classes() const { return n_classes_; }
  int in_channels() const { return in_channels_; }

 protected:
  Generator(int n_levels, int n_classes, int in_channels)
      : n_levels_(n_levels), n_classes_(n_classes), in_channels_(in_channels) {}

 private:
  int n_levels_;
  int n_classes_;
  int in_channels_;
};

/// Builds the architecture named by config.generator_arch with parameters
/// drawn deterministically from config.seed.
std::unique_ptr<Generator> build_generator(const RunConfig& config, int in_channels = 3);

/// Validates the batch and runs the generator. In eval mode no graph is
/// recorded.
DecoderOutputs forward_multiscale(Generator& generator, const ImageBatch& images, nn::Mode mode = nn::Mode::eval);

}  // namespace segadv
