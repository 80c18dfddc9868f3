#include "mrir/metrics.hpp"

#include <cmath>
#include <limits>

#include "mrir/image.hpp"

namespace mrir::metrics {

namespace {

void require_pair(const Tensor& a, const Tensor& b, const char* op) {
  image::require_image(a, op);
  if (!a.same_shape(b)) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  if (a.shape()[0] != 3) throw ArgumentError(std::string(op) + ": expected RGB images");
}

// Valid-mode separable filter of an [H, W] plane with a 1-D kernel.
Tensor filter_valid(const Tensor& plane, const std::vector<double>& k) {
  const int h = plane.shape()[0], w = plane.shape()[1], n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  Tensor rows({h, ow});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * plane.at(y, x + i);
      rows.at(y, x) = acc;
    }
  }
  Tensor out({oh, ow});
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) acc += k[i] * rows.at(y + i, x);
      out.at(y, x) = acc;
    }
  }
  return out;
}

}  // namespace

Tensor luma_y(const Tensor& rgb) {
  image::require_image(rgb, "luma_y");
  if (rgb.shape()[0] != 3) throw ArgumentError("luma_y: expected an RGB image");
  const int h = rgb.shape()[1], w = rgb.shape()[2];
  Tensor y({h, w});
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      y.at(i, j) = 16.0 + 65.481 * rgb.at(0, i, j) + 128.553 * rgb.at(1, i, j) + 24.966 * rgb.at(2, i, j);
    }
  }
  return y;
}

double psnr_y(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "psnr_y");
  const Tensor ya = luma_y(a), yb = luma_y(b);
  double sse = 0.0;
  for (std::size_t i = 0; i < ya.size(); ++i) {
    const double d = ya[i] - yb[i];
    sse += d * d;
  }
  const double mse = sse / static_cast<double>(ya.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim_y(const Tensor& a, const Tensor& b) {
  require_pair(a, b, "ssim_y");
  if (a.shape()[1] < kSsimWindow || a.shape()[2] < kSsimWindow) {
    throw ArgumentError("ssim_y: image " + shape_str(a.shape()) + " smaller than the 11x11 window");
  }
  const Tensor x = luma_y(a), y = luma_y(b);
  Tensor xx(x.shape()), yy(x.shape()), xy(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto k = image::gaussian_kernel_1d(kSsimWindow, kSsimSigma);
  const Tensor mx = filter_valid(x, k), my = filter_valid(y, k);
  const Tensor sxx = filter_valid(xx, k), syy = filter_valid(yy, k), sxy = filter_valid(xy, k);
  const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  const double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
           ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.size());
}

}  // namespace mrir::metrics
