#include "segadv/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "segadv/errors.hpp"

namespace segadv::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

void require_rank4(const Var& x, const char* op) {
  if (x.value().rank() != 4) {
    throw ShapeError(std::string(op) + ": expected N×C×H×W input, got " + shape_str(x.shape()));
  }
}

struct ConvGeometry {
  int channels, height, width, kernel, stride, padding, out_h, out_w;
  int rows() const { return channels * kernel * kernel; }
  int cols() const { return out_h * out_w; }
  bool identity() const { return kernel == 1 && stride == 1 && padding == 0; }
};

void im2col(const float* img, const ConvGeometry& g, float* col) {
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        float* row = col + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        const float* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          float* dst = row + static_cast<std::size_t>(oy) * g.out_w;
          if (iy < 0 || iy >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeometry& g, float* img) {
  for (int c = 0; c < g.channels; ++c) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const float* row = col + static_cast<std::size_t>((c * g.kernel + ky) * g.kernel + kx) * g.cols();
        float* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oy = 0; oy < g.out_h; ++oy) {
          const int iy = oy * g.stride - g.padding + ky;
          if (iy < 0 || iy >= g.height) continue;
          const float* src = row + static_cast<std::size_t>(oy) * g.out_w;
          float* dst = plane + static_cast<std::size_t>(iy) * g.width;
          for (int ox = 0; ox < g.out_w; ++ox) {
            const int ix = ox * g.stride - g.padding + kx;
            if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int padding) {
  require_rank4(x, "conv2d");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (wv.rank() != 4 || wv.dim(1) != ci || wv.dim(2) != wv.dim(3)) {
    throw ShapeError("conv2d: weight " + shape_str(wv.shape()) + " incompatible with input " + shape_str(xv.shape()));
  }
  const int co = wv.dim(0), k = wv.dim(2);
  const int oh = (h + 2 * padding - k) / stride + 1;
  const int ow = (w + 2 * padding - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " too small for kernel");
  const ConvGeometry g{ci, h, w, k, stride, padding, oh, ow};

  Tensor out({n, co, oh, ow});
  MapCM wm(wv.ptr(), co, g.rows());
  std::vector<float> col(g.identity() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
  const std::size_t in_stride = static_cast<std::size_t>(ci) * h * w;
  const std::size_t out_stride = static_cast<std::size_t>(co) * oh * ow;
  for (int b = 0; b < n; ++b) {
    const float* src = xv.ptr() + b * in_stride;
    if (!g.identity()) im2col(src, g, col.data());
    MapCM cm(g.identity() ? src : col.data(), g.rows(), g.cols());
    MapM om(out.ptr() + b * out_stride, co, g.cols());
    om.noalias() = wm * cm;
    if (bias.defined()) om.colwise() += Eigen::Map<const Eigen::VectorXf>(bias.value().ptr(), co);
  }

  return make_result(std::move(out), {x, weight, bias}, [g, n, co](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    Node* bn = self.inputs.size() > 2 && self.inputs[2] ? self.inputs[2].get() : nullptr;
    const std::size_t in_stride = static_cast<std::size_t>(g.channels) * g.height * g.width;
    const std::size_t out_stride = static_cast<std::size_t>(co) * g.cols();
    std::vector<float> col(g.identity() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
    std::vector<float> dcol(static_cast<std::size_t>(g.rows()) * g.cols());
    MapCM wm(wn.value.ptr(), co, g.rows());
    for (int b = 0; b < n; ++b) {
      MapCM dy(self.grad.ptr() + b * out_stride, co, g.cols());
      if (wn.requires_grad) {
        const float* src = xn.value.ptr() + b * in_stride;
        if (!g.identity()) im2col(src, g, col.data());
        MapCM cm(g.identity() ? src : col.data(), g.rows(), g.cols());
        MapM dw(wn.grad_buffer().ptr(), co, g.rows());
        dw.noalias() += dy * cm.transpose();
      }
      if (bn && bn->requires_grad) {
        Eigen::Map<Eigen::VectorXf>(bn->grad_buffer().ptr(), co) += dy.rowwise().sum();
      }
      if (xn.requires_grad) {
        float* dx = xn.grad_buffer().ptr() + b * in_stride;
        if (g.identity()) {
          MapM(dx, g.rows(), g.cols()).noalias() += wm.transpose() * dy;
        } else {
          MapM(dcol.data(), g.rows(), g.cols()).noalias() = wm.transpose() * dy;
          col2im_add(dcol.data(), g, dx);
        }
      }
    }
  });
}

Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias) {
  require_rank4(x, "conv_transpose2x2");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const int n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (wv.rank() != 4 || wv.dim(0) != ci || wv.dim(2) != 2 || wv.dim(3) != 2) {
    throw ShapeError("conv_transpose2x2: weight " + shape_str(wv.shape()) + " incompatible with input " +
                     shape_str(xv.shape()));
  }
  const int co = wv.dim(1);
  const int hw = h * w;
  Tensor out({n, co, 2 * h, 2 * w});
  MapCM wm(wv.ptr(), ci, co * 4);
  MatRM tmp(co * 4, hw);
  for (int b = 0; b < n; ++b) {
    MapCM xm(xv.ptr() + static_cast<std::size_t>(b) * ci * hw, ci, hw);
    tmp.noalias() = wm.transpose() * xm;
    for (int c = 0; c < co; ++c) {
      const float bv = bias.defined() ? bias.value()[c] : 0.0f;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const float* row = tmp.data() + static_cast<std::size_t>(c * 4 + dy * 2 + dx) * hw;
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) out.at(b, c, 2 * y + dy, 2 * xx + dx) = row[y * w + xx] + bv;
        }
    }
  }

  return make_result(std::move(out), {x, weight, bias}, [n, ci, co, h, w](Node& self) {
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    Node* bn = self.inputs.size() > 2 && self.inputs[2] ? self.inputs[2].get() : nullptr;
    const int hw = h * w;
    MatRM gathered(co * 4, hw);
    MapCM wm(wn.value.ptr(), ci, co * 4);
    for (int b = 0; b < n; ++b) {
      for (int c = 0; c < co; ++c)
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            float* row = gathered.data() + static_cast<std::size_t>(c * 4 + dy * 2 + dx) * hw;
            for (int y = 0; y < h; ++y)
              for (int xx = 0; xx < w; ++xx) row[y * w + xx] = self.grad.at(b, c, 2 * y + dy, 2 * xx + dx);
          }
      if (bn && bn->requires_grad) {
        float* db = bn->grad_buffer().ptr();
        for (int c = 0; c < co; ++c) db[c] += gathered.middleRows(c * 4, 4).sum();
      }
      if (wn.requires_grad) {
        MapCM xm(xn.value.ptr() + static_cast<std::size_t>(b) * ci * hw, ci, hw);
        MapM(wn.grad_buffer().ptr(), ci, co * 4).noalias() += xm * gathered.transpose();
      }
      if (xn.requires_grad) {
        MapM(xn.grad_buffer().ptr() + static_cast<std::size_t>(b) * ci * hw, ci, hw).noalias() += wm * gathered;
      }
    }
  });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState state, Mode mode) {
  require_rank4(x, "batch_norm");
  const Tensor& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  const std::size_t count = static_cast<std::size_t>(n) * plane;
  Tensor out(xv.shape());
  std::vector<float> inv_std(c), mean(c);

  if (mode == Mode::eval) {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = (*state.running_mean)[ch];
      inv_std[ch] = 1.0f / std::sqrt((*state.running_var)[ch] + state.eps);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (int b = 0; b < n; ++b) {
        const float* p = xv.ptr() + (static_cast<std::size_t>(b) * c + ch) * plane;
        for (int i = 0; i < plane; ++i) sum += p[i];
      }
      const double mu = sum / static_cast<double>(count);
      double sq = 0.0;
      for (int b = 0; b < n; ++b) {
        const float* p = xv.ptr() + (static_cast<std::size_t>(b) * c + ch) * plane;
        for (int i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      const double var = sq / static_cast<double>(count);
      mean[ch] = static_cast<float>(mu);
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + state.eps));
      if (mode == Mode::train) {
        const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
        float& rm = (*state.running_mean)[ch];
        float& rv = (*state.running_var)[ch];
        rm = (1.0f - state.momentum) * rm + state.momentum * static_cast<float>(mu);
        rv = (1.0f - state.momentum) * rv + state.momentum * static_cast<float>(unbiased);
      }
    }
  }

  Tensor xhat(xv.shape());
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
      const float g = gamma.value()[ch], be = beta.value()[ch];
      for (int i = 0; i < plane; ++i) {
        const float xh = (xv[off + i] - mean[ch]) * inv_std[ch];
        xhat[off + i] = xh;
        out[off + i] = g * xh + be;
      }
    }

  const bool batch_stats = mode != Mode::eval;
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, plane, batch_stats](Node& self) {
                       Node& xn = *self.inputs[0];
                       Node& gn = *self.inputs[1];
                       Node& bn = *self.inputs[2];
                       const double m = static_cast<double>(n) * plane;
                       for (int ch = 0; ch < c; ++ch) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (int b = 0; b < n; ++b) {
                           const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
                           for (int i = 0; i < plane; ++i) {
                             sum_dy += self.grad[off + i];
                             sum_dy_xhat += self.grad[off + i] * xhat[off + i];
                           }
                         }
                         if (gn.requires_grad) gn.grad_buffer()[ch] += static_cast<float>(sum_dy_xhat);
                         if (bn.requires_grad) bn.grad_buffer()[ch] += static_cast<float>(sum_dy);
                         if (!xn.requires_grad) continue;
                         const float g = gn.value[ch];
                         Tensor& dx = xn.grad_buffer();
                         for (int b = 0; b < n; ++b) {
                           const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
                           for (int i = 0; i < plane; ++i) {
                             double d = self.grad[off + i];
                             if (batch_stats) d -= (sum_dy + xhat[off + i] * sum_dy_xhat) / m;
                             dx[off + i] += static_cast<float>(g * inv_std[ch] * d);
                           }
                         }
                       }
                     });
}

Var relu(const Var& x) { return leaky_relu(x, 0.0f); }

Var leaky_relu(const Var& x, float slope) {
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > 0.0f ? xv[i] : slope * xv[i];
  return make_result(std::move(out), {x}, [slope](Node& self) {
    Node& xn = *self.inputs[0];
    Tensor& dx = xn.grad_buffer();
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += xn.value[i] > 0.0f ? self.grad[i] : slope * self.grad[i];
  });
}

Var sigmoid(const Var& x) {
  // Clamped so that scores stay strictly inside (0,1) in float.
  constexpr float kLo = 1e-6f, kHi = 1.0f - 1e-6f;
  Tensor out(x.shape());
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const float s = xv[i] >= 0.0f ? 1.0f / (1.0f + std::exp(-xv[i])) : std::exp(xv[i]) / (1.0f + std::exp(xv[i]));
    out[i] = std::clamp(s, kLo, kHi);
  }
  return make_result(std::move(out), {x}, [](Node& self) {
    Node& xn = *self.inputs[0];
    Tensor& dx = xn.grad_buffer();
    for (std::size_t i = 0; i < dx.numel(); ++i) {
      const float s = self.value[i];
      dx[i] += self.grad[i] * s * (1.0f - s);
    }
  });
}

Var max_pool2x2(const Var& x) {
  require_rank4(x, "max_pool2x2");
  const Tensor& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % 2 || w % 2) throw ShapeError("max_pool2x2: odd spatial size " + shape_str(xv.shape()));
  Tensor out({n, c, h / 2, w / 2});
  std::vector<std::uint32_t> argmax(out.numel());
  std::size_t o = 0;
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(b) * c + ch) * h * w;
      for (int y = 0; y < h / 2; ++y)
        for (int xx = 0; xx < w / 2; ++xx, ++o) {
          std::size_t best = base + static_cast<std::size_t>(2 * y) * w + 2 * xx;
          for (std::size_t cand : {best + 1, best + w, best + w + 1})
            if (xv[cand] > xv[best]) best = cand;
          argmax[o] = static_cast<std::uint32_t>(best);
          out[o] = xv[best];
        }
    }
  return make_result(std::move(out), {x}, [argmax = std::move(argmax)](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += self.grad[i];
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& x : xs) require_rank4(x, "concat_channels");
  const int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int total = 0;
  for (const auto& x : xs) {
    if (x.dim(0) != n || x.dim(2) != h || x.dim(3) != w) {
      throw ShapeError("concat_channels: mismatched " + shape_str(xs[0].shape()) + " and " + shape_str(x.shape()));
    }
    total += x.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out({n, total, h, w});
  for (int b = 0; b < n; ++b) {
    float* dst = out.ptr() + static_cast<std::size_t>(b) * total * plane;
    for (const auto& x : xs) {
      const std::size_t len = static_cast<std::size_t>(x.dim(1)) * plane;
      const float* src = x.value().ptr() + b * len;
      dst = std::copy(src, src + len, dst);
    }
  }
  return make_result(std::move(out), xs, [n, total, plane](Node& self) {
    for (int b = 0; b < n; ++b) {
      const float* src = self.grad.ptr() + static_cast<std::size_t>(b) * total * plane;
      for (auto& in : self.inputs) {
        const std::size_t len = static_cast<std::size_t>(in->value.dim(1)) * plane;
        if (in->requires_grad) {
          float* dst = in->grad_buffer().ptr() + b * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
        }
        src += len;
      }
    }
  });
}

Var softmax_channels(const Var& x) {
  require_rank4(x, "softmax_channels");
  const Tensor& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor out(xv.shape());
  for (int b = 0; b < n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      float mx = xv[base + p];
      for (int ch = 1; ch < c; ++ch) mx = std::max(mx, xv[base + ch * plane + p]);
      double sum = 0.0;
      for (int ch = 0; ch < c; ++ch) sum += std::exp(static_cast<double>(xv[base + ch * plane + p] - mx));
      for (int ch = 0; ch < c; ++ch) {
        out[base + ch * plane + p] = static_cast<float>(std::exp(static_cast<double>(xv[base + ch * plane + p] - mx)) / sum);
      }
    }
  }
  return make_result(std::move(out), {x}, [n, c, plane](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (int b = 0; b < n; ++b) {
      const std::size_t base = static_cast<std::size_t>(b) * c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        double dot = 0.0;
        for (int ch = 0; ch < c; ++ch) dot += self.value[base + ch * plane + p] * self.grad[base + ch * plane + p];
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t i = base + ch * plane + p;
          dx[i] += static_cast<float>(self.value[i] * (self.grad[i] - dot));
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank4(x, "global_avg_pool");
  const Tensor& xv = x.value();
  const int n = xv.dim(0), c = xv.dim(1);
  const std::size_t plane = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < out.numel(); ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += xv[i * plane + p];
    out[i] = static_cast<float>(s / static_cast<double>(plane));
  }
  return make_result(std::move(out), {x}, [plane](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    const float scale = 1.0f / static_cast<float>(plane);
    for (std::size_t i = 0; i < self.grad.numel(); ++i)
      for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] += self.grad[i] * scale;
  });
}

Var reshape(const Var& x, Shape shape) {
  return make_result(x.value().reshaped(std::move(shape)), {x}, [](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i];
  });
}

Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: term/weight count mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * static_cast<double>(terms[i].item());
  return make_result(Tensor({1}, static_cast<float>(total)), terms, [weights](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      if (self.inputs[i]->requires_grad) {
        self.inputs[i]->grad_buffer()[0] += static_cast<float>(weights[i]) * self.grad[0];
      }
    }
  });
}

Var scalar_with_gradient(const Var& input, double value, Tensor gradient) {
  if (gradient.shape() != input.shape()) {
    throw ShapeError("scalar_with_gradient: gradient " + shape_str(gradient.shape()) + " vs input " +
                     shape_str(input.shape()));
  }
  return make_result(Tensor({1}, static_cast<float>(value)), {input}, [gradient = std::move(gradient)](Node& self) {
    Tensor& dx = self.inputs[0]->grad_buffer();
    const float seed = self.grad[0];
    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += seed * gradient[i];
  });
}

}  // namespace segadv::nn
