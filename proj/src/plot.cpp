#include "segadv/plot.hpp"

#include <algorithm>
#include <cstdio>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "segadv/errors.hpp"

namespace segadv {

void write_loss_plot(const std::filesystem::path& path, const std::vector<LossBreakdown>& history) {
  constexpr int kWidth = 720, kHeight = 420, kLeft = 70, kRight = 20, kTop = 30, kBottom = 50;
  cv::Mat img(kHeight, kWidth, CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Point origin(kLeft, kHeight - kBottom);
  cv::line(img, origin, {kWidth - kRight, kHeight - kBottom}, cv::Scalar(0, 0, 0), 1);
  cv::line(img, origin, {kLeft, kTop}, cv::Scalar(0, 0, 0), 1);

  double hi = 1e-12;
  for (const auto& b : history) hi = std::max({hi, b.total, b.ori});
  const int n = static_cast<int>(history.size());
  auto to_px = [&](int i, double v) {
    const double fx = n > 1 ? static_cast<double>(i) / (n - 1) : 0.0;
    const double fy = std::clamp(v / hi, 0.0, 1.0);
    return cv::Point(kLeft + static_cast<int>(fx * (kWidth - kLeft - kRight)),
                     kHeight - kBottom - static_cast<int>(fy * (kHeight - kTop - kBottom)));
  };
  std::vector<cv::Point> total, ori;
  for (int i = 0; i < n; ++i) {
    total.push_back(to_px(i, history[i].total));
    ori.push_back(to_px(i, history[i].ori));
  }
  if (n > 1) {
    cv::polylines(img, total, false, cv::Scalar(200, 80, 0), 2, cv::LINE_AA);
    cv::polylines(img, ori, false, cv::Scalar(0, 0, 200), 1, cv::LINE_AA);
  }

  char label[64];
  std::snprintf(label, sizeof label, "%.3g", hi);
  cv::putText(img, label, {5, kTop + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1, cv::LINE_AA);
  cv::putText(img, "0", {kLeft - 20, kHeight - kBottom}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1);
  std::snprintf(label, sizeof label, "step %d", n);
  cv::putText(img, label, {kWidth - kRight - 90, kHeight - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0), 1,
              cv::LINE_AA);
  cv::putText(img, "total", {kWidth - 160, kTop}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(200, 80, 0), 1, cv::LINE_AA);
  cv::putText(img, "cross-entropy", {kWidth - 160, kTop + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 200), 1,
              cv::LINE_AA);
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write plot " + path.string());
}

}  // namespace segadv
