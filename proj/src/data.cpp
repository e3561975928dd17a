#include "segadv/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <sstream>

#include "segadv/errors.hpp"
#include "segadv/random.hpp"

namespace segadv {

namespace fs = std::filesystem;

std::size_t Sample::foreground_pixels() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

void Dataset::validate(int size_multiple) const {
  if (samples.empty()) throw DataError("dataset '" + id + "' is empty");
  const int c = channels(), h = height(), w = width();
  if (c != 1 && c != 3) throw DataError("dataset '" + id + "' images must have 1 or 3 channels");
  if (h % size_multiple || w % size_multiple) {
    throw ShapeError("dataset '" + id + "' image size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by " + std::to_string(size_multiple));
  }
  for (const auto& s : samples) {
    if (s.channels() != c || s.height() != h || s.width() != w) {
      throw DataError("sample '" + s.id + "' differs in size or channels from the rest of '" + id + "'");
    }
    if (s.mask.size() != static_cast<std::size_t>(h) * w) throw DataError("sample '" + s.id + "' mask size mismatch");
  }
}

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, '\t')) fields.push_back(field);
  return fields;
}

cv::Mat read_png(const fs::path& path, const std::string& id, const char* what) {
  if (!fs::exists(path)) throw DataError("sample '" + id + "': missing " + what + " file " + path.string());
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("sample '" + id + "': cannot decode " + what + " " + path.string());
  if (m.depth() != CV_8U) throw DataError("sample '" + id + "': " + what + " is not 8-bit");
  return m;
}

}  // namespace

Sample decode_sample(const SampleRecord& record) {
  cv::Mat img = read_png(record.image_path, record.id, "image");
  cv::Mat mask = read_png(record.mask_path, record.id, "mask");
  if (img.rows != mask.rows || img.cols != mask.cols) {
    throw DataError("sample '" + record.id + "': image " + std::to_string(img.cols) + "x" + std::to_string(img.rows) +
                    " and mask " + std::to_string(mask.cols) + "x" + std::to_string(mask.rows) + " differ in size");
  }
  if (img.channels() == 4) cv::cvtColor(img, img, cv::COLOR_BGRA2BGR);
  if (img.channels() != 1 && img.channels() != 3) {
    throw DataError("sample '" + record.id + "': image must have 1 or 3 channels");
  }

  Sample s;
  s.id = record.id;
  const int c = img.channels(), h = img.rows, w = img.cols;
  s.image = Tensor({c, h, w});
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* row = img.ptr<std::uint8_t>(y);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        // OpenCV stores BGR; tensors hold RGB.
        const int src = c == 3 ? 2 - ch : 0;
        s.image[(static_cast<std::size_t>(ch) * h + y) * w + x] = row[x * c + src] / 255.0f;
      }
  }
  s.mask.resize(static_cast<std::size_t>(h) * w);
  const int mc = mask.channels();
  for (int y = 0; y < h; ++y) {
    const std::uint8_t* row = mask.ptr<std::uint8_t>(y);
    for (int x = 0; x < w; ++x) {
      bool crack = false;
      for (int ch = 0; ch < mc; ++ch) crack = crack || row[x * mc + ch] != 0;
      s.mask[static_cast<std::size_t>(y) * w + x] = crack ? 1 : 0;
    }
  }
  return s;
}

std::vector<SampleRecord> load_corpus(const fs::path& root, const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot read manifest " + manifest.string());
  std::vector<SampleRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty()) {
      throw DataError(manifest.string() + ":" + std::to_string(line_no) +
                      ": expected <split>\\t<image>\\t<mask>");
    }
    SampleRecord r;
    r.split = fields[0];
    r.image_path = root / fields[1];
    r.mask_path = root / fields[2];
    r.id = fs::path(fields[1]).stem().string();
    decode_sample(r);
    records.push_back(std::move(r));
  }
  return records;
}

Dataset load_split(const std::vector<SampleRecord>& records, const std::string& split) {
  Dataset d;
  d.id = split;
  for (const auto& r : records) {
    if (r.split == split) d.samples.push_back(decode_sample(r));
  }
  if (d.samples.empty()) throw DataError("split '" + split + "' has no samples");
  d.validate();
  return d;
}

namespace {

struct Point {
  double x, y, half_width;
};

// Bilinear upsampling of a coarse random grid: smooth low-frequency shading.
std::vector<double> value_noise(SplitMix64& rng, int height, int width, int cells) {
  std::vector<double> grid(static_cast<std::size_t>(cells + 1) * (cells + 1));
  for (auto& g : grid) g = rng.uniform(-1.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double gy = (y + 0.5) / height * cells, gx = (x + 0.5) / width * cells;
      const int iy = std::min(static_cast<int>(gy), cells - 1), ix = std::min(static_cast<int>(gx), cells - 1);
      const double fy = gy - iy, fx = gx - ix;
      auto at = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy) * (cells + 1) + xx]; };
      out[static_cast<std::size_t>(y) * width + x] = (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix + 1)) +
                                                     fy * ((1 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
    }
  return out;
}

// Anti-aliased coverage of a polyline with per-vertex half widths: a pixel
// centre at distance d from the stroke axis gets clamp(hw + 0.5 - d, 0, 1).
void render_polyline(const std::vector<Point>& pts, int height, int width, std::vector<double>& coverage) {
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const Point& a = pts[k];
    const Point& b = pts[k + 1];
    const double reach = std::max(a.half_width, b.half_width) + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - reach)));
    const int x1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - reach)));
    const int y1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + reach)));
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        double t = len2 > 0 ? ((px - a.x) * dx + (py - a.y) * dy) / len2 : 0.0;
        t = std::clamp(t, 0.0, 1.0);
        const double cx = a.x + t * dx, cy = a.y + t * dy;
        const double d = std::hypot(px - cx, py - cy);
        const double hw = a.half_width + t * (b.half_width - a.half_width);
        const double c = std::clamp(hw + 0.5 - d, 0.0, 1.0);
        double& cov = coverage[static_cast<std::size_t>(y) * width + x];
        cov = std::max(cov, c);
      }
  }
}

}  // namespace

Sample synth_sample(std::uint64_t seed, std::uint64_t index, int height, int width, double crack_density) {
  SplitMix64 rng(derive_seed(seed, index));
  const std::size_t plane = static_cast<std::size_t>(height) * width;

  // Crack strokes: 1-3 random walks sharing a length budget so that the
  // expected foreground fraction tracks crack_density.
  constexpr double kMeanWidth = 2.2;
  constexpr double kStep = 1.5;
  const int n_cracks = 1 + static_cast<int>(rng.below(3));
  const double budget = crack_density * static_cast<double>(plane) / kMeanWidth;
  std::vector<double> coverage(plane, 0.0);
  for (int k = 0; k < n_cracks; ++k) {
    const int steps = std::max(2, static_cast<int>(budget / n_cracks / kStep));
    Point p{rng.uniform(0.15, 0.85) * width, rng.uniform(0.15, 0.85) * height, rng.uniform(0.6, 1.5)};
    double heading = rng.uniform(0.0, 2.0 * M_PI);
    std::vector<Point> pts{p};
    for (int s = 0; s < steps; ++s) {
      heading += rng.uniform(-0.45, 0.45);
      double nx = p.x + kStep * std::cos(heading), ny = p.y + kStep * std::sin(heading);
      if (nx < 1.0 || nx > width - 1.0 || ny < 1.0 || ny > height - 1.0) {
        heading += M_PI;
        nx = std::clamp(p.x + kStep * std::cos(heading), 1.0, width - 1.0);
        ny = std::clamp(p.y + kStep * std::sin(heading), 1.0, height - 1.0);
      }
      p = {nx, ny, std::clamp(p.half_width + rng.uniform(-0.15, 0.15), 0.6, 1.6)};
      pts.push_back(p);
    }
    render_polyline(pts, height, width, coverage);
  }

  // Textured pavement: base tone, smooth shading, per-pixel grain, and a
  // couple of faint stains that are not cracks.
  const double base = rng.uniform(0.45, 0.75);
  const auto shading = value_noise(rng, height, width, 6);
  std::vector<double> stains(plane, 0.0);
  const int n_stains = static_cast<int>(rng.below(3));
  for (int k = 0; k < n_stains; ++k) {
    const double cx = rng.uniform(0, width), cy = rng.uniform(0, height), r = rng.uniform(3.0, 8.0);
    const double depth = rng.uniform(0.05, 0.15);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double d2 = ((x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy)) / (r * r);
        stains[static_cast<std::size_t>(y) * width + x] += depth * std::exp(-d2);
      }
  }
  double tint[3];
  for (double& t : tint) t = rng.uniform(-0.03, 0.03);
  const double crack_darkening = rng.uniform(0.55, 0.75);

  Sample s;
  s.id = "synth_" + std::to_string(seed) + "_" + std::to_string(index);
  s.image = Tensor({3, height, width});
  s.mask.resize(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const double grain = rng.uniform(-0.06, 0.06);
    const double bg = base + 0.12 * shading[i] + grain - stains[i];
    const double v = bg * (1.0 - crack_darkening * coverage[i]);
    for (int c = 0; c < 3; ++c) s.image[c * plane + i] = static_cast<float>(std::clamp(v + tint[c], 0.0, 1.0));
    s.mask[i] = coverage[i] >= 0.5 ? 1 : 0;
  }
  return s;
}

std::vector<Sample> synth_corpus(std::uint64_t seed, int n, int height, int width, double crack_density,
                                 int size_multiple, std::uint64_t first_index) {
  if (n < 0) throw DataError("sample count must be non-negative");
  if (height <= 0 || width <= 0 || size_multiple <= 0 || height % size_multiple || width % size_multiple) {
    throw ShapeError("synthetic size " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not a positive multiple of " + std::to_string(size_multiple));
  }
  if (!(crack_density > 0.0 && crack_density < 0.5)) throw DataError("crack_density must lie in (0, 0.5)");
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(synth_sample(seed, first_index + i, height, width, crack_density));
  return out;
}

fs::path write_corpus(const fs::path& dir, const std::vector<std::pair<std::string, const Dataset*>>& splits) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw DataError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  const fs::path manifest = dir / "manifest.tsv";
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write " + manifest.string());
  for (const auto& [split, data] : splits) {
    for (const auto& s : data->samples) {
      const int c = s.channels(), h = s.height(), w = s.width();
      cv::Mat img(h, w, c == 3 ? CV_8UC3 : CV_8UC1);
      cv::Mat mask(h, w, CV_8UC1);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          for (int ch = 0; ch < c; ++ch) {
            const float v = s.image[(static_cast<std::size_t>(ch) * h + y) * w + x];
            const int dst = c == 3 ? 2 - ch : 0;
            img.ptr<std::uint8_t>(y)[x * c + dst] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
          }
          mask.ptr<std::uint8_t>(y)[x] = s.mask[static_cast<std::size_t>(y) * w + x] ? 255 : 0;
        }
      const std::string image_rel = "images/" + s.id + ".png";
      const std::string mask_rel = "masks/" + s.id + ".png";
      if (!cv::imwrite((dir / image_rel).string(), img) || !cv::imwrite((dir / mask_rel).string(), mask)) {
        throw DataError("cannot write PNG for sample '" + s.id + "' under " + dir.string());
      }
      out << split << '\t' << image_rel << '\t' << mask_rel << '\n';
    }
  }
  if (!out) throw DataError("cannot write " + manifest.string());
  return manifest;
}

BatchIterator::BatchIterator(const Dataset& data, int batch_size, std::uint64_t seed, bool augment, int n_classes)
    : data_(&data), batch_size_(batch_size), seed_(seed), augment_(augment), n_classes_(n_classes) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (data.empty()) throw DataError("cannot iterate an empty dataset");
}

int BatchIterator::batches_per_epoch() const {
  return static_cast<int>((data_->size() + static_cast<std::size_t>(batch_size_) - 1) / batch_size_);
}

std::vector<std::size_t> BatchIterator::permutation(std::int64_t epoch) const {
  std::vector<std::size_t> order(data_->size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SplitMix64 rng(derive_seed(seed_, static_cast<std::uint64_t>(epoch) * 2));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

namespace {

void copy_sample(const Sample& s, bool flip_h, bool flip_v, int slot, ImageBatch& images, MaskBatch& masks) {
  const int c = s.channels(), h = s.height(), w = s.width();
  for (int y = 0; y < h; ++y) {
    const int sy = flip_v ? h - 1 - y : y;
    for (int x = 0; x < w; ++x) {
      const int sx = flip_h ? w - 1 - x : x;
      for (int ch = 0; ch < c; ++ch) {
        images.data.at(slot, ch, y, x) = s.image[(static_cast<std::size_t>(ch) * h + sy) * w + sx];
      }
      masks.at(slot, y, x) = s.mask[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  images.source_ids.push_back(s.id);
}

}  // namespace

std::pair<ImageBatch, MaskBatch> BatchIterator::batch(std::int64_t index) const {
  const int per_epoch = batches_per_epoch();
  const std::int64_t epoch = index / per_epoch;
  const std::size_t first = static_cast<std::size_t>(index % per_epoch) * batch_size_;
  const std::size_t count = std::min(static_cast<std::size_t>(batch_size_), data_->size() - first);
  const auto order = permutation(epoch);
  SplitMix64 flips(derive_seed(seed_, static_cast<std::uint64_t>(epoch) * 2 + 1));
  // Advance past earlier batches of this epoch so each sample's flips are fixed.
  for (std::size_t i = 0; i < first; ++i) flips.next_u64();

  ImageBatch images{Tensor({static_cast<int>(count), data_->channels(), data_->height(), data_->width()}), {}};
  MaskBatch masks(static_cast<int>(count), data_->height(), data_->width(), n_classes_);
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t bits = flips.next_u64();
    const bool flip_h = augment_ && (bits & 1);
    const bool flip_v = augment_ && (bits & 2);
    copy_sample(data_->samples[order[first + k]], flip_h, flip_v, static_cast<int>(k), images, masks);
  }
  return {std::move(images), std::move(masks)};
}

std::pair<ImageBatch, MaskBatch> make_batch(const Dataset& data, std::size_t first, std::size_t count, int n_classes) {
  if (first + count > data.size()) throw DataError("batch range exceeds dataset size");
  ImageBatch images{Tensor({static_cast<int>(count), data.channels(), data.height(), data.width()}), {}};
  MaskBatch masks(static_cast<int>(count), data.height(), data.width(), n_classes);
  for (std::size_t k = 0; k < count; ++k) {
    copy_sample(data.samples[first + k], false, false, static_cast<int>(k), images, masks);
  }
  return {std::move(images), std::move(masks)};
}

}  // namespace segadv
