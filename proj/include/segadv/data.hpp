#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "segadv/types.hpp"

namespace segadv {

/// One line of a corpus manifest.
struct SampleRecord {
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
  std::string split;
  std::string id;
};

/// A decoded image/mask pair. image: C×H×W in [0,1]; mask: H×W class ids.
struct Sample {
  std::string id;
  Tensor image;
  std::vector<std::uint8_t> mask;

  int channels() const { return image.dim(0); }
  int height() const { return image.dim(1); }
  int width() const { return image.dim(2); }
  std::size_t foreground_pixels() const;
};

/// In-memory samples that share one spatial size and channel count.
struct Dataset {
  std::string id;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  int channels() const { return samples.at(0).channels(); }
  int height() const { return samples.at(0).height(); }
  int width() const { return samples.at(0).width(); }

  /// Throws DataError on mixed sizes or channel counts, ShapeError when
  /// sizes are not multiples of `size_multiple`.
  void validate(int size_multiple = 1) const;
};

/// Reads `<split>\t<image_relpath>\t<mask_relpath>` lines (blank lines and
/// `#` comments ignored), relative to `root`. Every pair is decoded once to
/// check that it exists and that image and mask sizes agree.
std::vector<SampleRecord> load_corpus(const std::filesystem::path& root, const std::filesystem::path& manifest);

/// Decodes a record. Mask pixels are binarized: nonzero -> 1.
Sample decode_sample(const SampleRecord& record);

/// Decodes every record tagged `split`. Throws DataError for an empty split.
Dataset load_split(const std::vector<SampleRecord>& records, const std::string& split);

/// Deterministic synthetic crack sample; a pure function of (seed, index).
Sample synth_sample(std::uint64_t seed, std::uint64_t index, int height, int width, double crack_density);

/// `n` samples with indices [first_index, first_index + n). Size must be a
/// multiple of `size_multiple`; density must lie in (0, 0.5).
std::vector<Sample> synth_corpus(std::uint64_t seed, int n, int height, int width, double crack_density,
                                 int size_multiple = 16, std::uint64_t first_index = 0);

/// Writes 8-bit PNGs under `dir/images`, `dir/masks` (mask values 0/255) and
/// `dir/manifest.tsv`. Returns the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& dir,
                                   const std::vector<std::pair<std::string, const Dataset*>>& splits);

/// Seeded, epoch-wise shuffled batches. Batch k is a pure function of
/// (seed, k): epoch = k / batches_per_epoch, and the permutation and flips of
/// an epoch derive from (seed, epoch).
class BatchIterator {
 public:
  BatchIterator(const Dataset& data, int batch_size, std::uint64_t seed, bool augment, int n_classes = 2);

  int batches_per_epoch() const;
  std::pair<ImageBatch, MaskBatch> batch(std::int64_t index) const;
  std::pair<ImageBatch, MaskBatch> next() { return batch(position_++); }

  std::int64_t position() const { return position_; }
  void seek(std::int64_t position) { position_ = position; }

 private:
  std::vector<std::size_t> permutation(std::int64_t epoch) const;

  const Dataset* data_;
  int batch_size_;
  std::uint64_t seed_;
  bool augment_;
  int n_classes_;
  std::int64_t position_ = 0;
};

/// Stacks samples [first, first + count) without shuffling or flips.
std::pair<ImageBatch, MaskBatch> make_batch(const Dataset& data, std::size_t first, std::size_t count,
                                            int n_classes = 2);

}  // namespace segadv
