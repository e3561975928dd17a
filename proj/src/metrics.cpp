#include "segadv/metrics.hpp"

#include "segadv/errors.hpp"

namespace segadv {

ConfusionMatrix::ConfusionMatrix(int n_classes)
    : n_classes_(n_classes), counts_(static_cast<std::size_t>(n_classes) * n_classes, 0) {
  if (n_classes < 1) throw ShapeError("confusion matrix needs at least one class");
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(int c) const {
  std::uint64_t s = 0;
  for (int p = 0; p < n_classes_; ++p) s += at(c, p);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(int c) const {
  std::uint64_t s = 0;
  for (int g = 0; g < n_classes_; ++g) s += at(g, c);
  return s;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.n_classes_ != n_classes_) throw ShapeError("cannot merge confusion matrices of different class counts");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

std::vector<std::optional<double>> ConfusionMatrix::per_class_iou() const {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(n_classes_));
  for (int c = 0; c < n_classes_; ++c) {
    const std::uint64_t inter = at(c, c);
    const std::uint64_t uni = row_sum(c) + col_sum(c) - inter;
    if (uni > 0) out[c] = static_cast<double>(inter) / static_cast<double>(uni);
  }
  return out;
}

std::vector<std::optional<double>> ConfusionMatrix::per_class_dice() const {
  std::vector<std::optional<double>> out(static_cast<std::size_t>(n_classes_));
  for (int c = 0; c < n_classes_; ++c) {
    const std::uint64_t den = row_sum(c) + col_sum(c);
    if (den > 0) out[c] = 2.0 * static_cast<double>(at(c, c)) / static_cast<double>(den);
  }
  return out;
}

ConfusionMatrix accumulate_confusion(const MaskBatch& pred, const MaskBatch& gt, ConfusionMatrix acc) {
  if (pred.batch != gt.batch || pred.height != gt.height || pred.width != gt.width ||
      pred.labels.size() != gt.labels.size()) {
    throw ShapeError("prediction and ground-truth masks differ in shape");
  }
  const int k = acc.n_classes();
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int g = gt.labels[i], p = pred.labels[i];
    if (g < 0 || g >= k || p < 0 || p >= k) {
      throw DataError("class id " + std::to_string(g < 0 || g >= k ? g : p) + " outside [0, " + std::to_string(k) +
                      ")");
    }
    ++acc.at(g, p);
  }
  return acc;
}

namespace {

double mean_defined(const std::vector<std::optional<double>>& values, std::size_t first, const char* what) {
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = first; i < values.size(); ++i) {
    if (values[i]) {
      sum += *values[i];
      ++count;
    }
  }
  if (count == 0) throw DataError(std::string(what) + ": empty evaluation (no class has a non-zero denominator)");
  return sum / count;
}

}  // namespace

double mean_iou(const ConfusionMatrix& conf) { return mean_defined(conf.per_class_iou(), 0, "mean_iou"); }

double dice_coefficient(const ConfusionMatrix& conf) { return mean_defined(conf.per_class_dice(), 0, "dice"); }

double foreground_dice(const ConfusionMatrix& conf) {
  const auto d = conf.per_class_dice();
  // With no foreground present in either mask there is nothing to miss.
  bool any = false;
  for (std::size_t i = 1; i < d.size(); ++i) any = any || d[i].has_value();
  return any ? mean_defined(d, 1, "foreground dice") : 1.0;
}

EvalReport make_report(std::string dataset_id, int n_images, const ConfusionMatrix& conf, std::string config_hash,
                       int step) {
  EvalReport r;
  r.dataset_id = std::move(dataset_id);
  r.n_images = n_images;
  r.miou = mean_iou(conf);
  r.dice = dice_coefficient(conf);
  r.dice_foreground = foreground_dice(conf);
  r.per_class_iou = conf.per_class_iou();
  r.confusion = conf;
  r.config_hash = std::move(config_hash);
  r.step = step;
  return r;
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["dataset_id"] = r.dataset_id;
  j["n_images"] = r.n_images;
  j["step"] = r.step;
  j["miou"] = r.miou;
  j["dice"] = r.dice;
  j["dice_foreground"] = r.dice_foreground;
  auto per_class = nlohmann::json::array();
  for (const auto& v : r.per_class_iou) per_class.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  j["per_class_iou"] = per_class;
  auto rows = nlohmann::json::array();
  for (int g = 0; g < r.confusion.n_classes(); ++g) {
    auto row = nlohmann::json::array();
    for (int p = 0; p < r.confusion.n_classes(); ++p) row.push_back(r.confusion.at(g, p));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  j["config_hash"] = r.config_hash;
  return j;
}

}  // namespace segadv
