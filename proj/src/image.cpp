#include "mrir/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>

namespace mrir::image {

int height(const Tensor& img) { return img.shape()[1]; }
int width(const Tensor& img) { return img.shape()[2]; }

void require_image(const Tensor& img, const char* op) {
  if (img.rank() != 3 || img.shape()[0] < 1 || img.shape()[1] < 1 || img.shape()[2] < 1) {
    throw ArgumentError(std::string(op) + ": expected a [C, H, W] image, got " + shape_str(img.shape()));
  }
}

namespace {

// Per-output-sample source taps and weights along one axis.
struct AxisTaps {
  std::vector<std::vector<std::pair<int, double>>> taps;
};

AxisTaps nearest_taps(int in, int out) {
  AxisTaps t;
  t.taps.resize(out);
  const double s = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    int src = static_cast<int>(std::floor((i + 0.5) * s));
    t.taps[i].push_back({std::clamp(src, 0, in - 1), 1.0});
  }
  return t;
}

AxisTaps bilinear_taps(int in, int out) {
  AxisTaps t;
  t.taps.resize(out);
  const double s = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = std::clamp((i + 0.5) * s - 0.5, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    const double f = src - i0;
    if (i1 == i0 || f == 0.0) {
      t.taps[i].push_back({i0, 1.0});
    } else {
      t.taps[i].push_back({i0, 1.0 - f});
      t.taps[i].push_back({i1, f});
    }
  }
  return t;
}

AxisTaps area_taps(int in, int out) {
  AxisTaps t;
  t.taps.resize(out);
  if (in % out == 0) {
    const int k = in / out;
    for (int i = 0; i < out; ++i) {
      for (int j = 0; j < k; ++j) t.taps[i].push_back({i * k + j, 1.0 / k});
    }
    return t;
  }
  const double s = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    const double a = i * s, b = (i + 1) * s;
    const int j0 = static_cast<int>(std::floor(a));
    const int j1 = std::min(in - 1, static_cast<int>(std::ceil(b)) - 1);
    for (int j = j0; j <= j1; ++j) {
      const double overlap = std::min(b, j + 1.0) - std::max(a, static_cast<double>(j));
      if (overlap > 0.0) t.taps[i].push_back({j, overlap / s});
    }
  }
  return t;
}

Tensor apply_taps(const Tensor& img, const AxisTaps& rows, const AxisTaps& cols) {
  const int c = img.shape()[0], h = img.shape()[1];
  const int oh = static_cast<int>(rows.taps.size()), ow = static_cast<int>(cols.taps.size());
  Tensor tmp({c, h, ow});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (auto [j, wt] : cols.taps[x]) acc += wt * img.at(ch, y, j);
        tmp.at(ch, y, x) = acc;
      }
    }
  }
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (auto [j, wt] : rows.taps[y]) acc += wt * tmp.at(ch, j, x);
        out.at(ch, y, x) = acc;
      }
    }
  }
  return out;
}

}  // namespace

Tensor resize(const Tensor& img, int out_h, int out_w, ResizeMode mode) {
  require_image(img, "resize");
  if (out_h < 1 || out_w < 1) throw ArgumentError("resize: target size must be positive");
  const int h = height(img), w = width(img);
  if (h == out_h && w == out_w) return img;
  switch (mode) {
    case ResizeMode::nearest: return apply_taps(img, nearest_taps(h, out_h), nearest_taps(w, out_w));
    case ResizeMode::bilinear: return apply_taps(img, bilinear_taps(h, out_h), bilinear_taps(w, out_w));
    case ResizeMode::area: return apply_taps(img, area_taps(h, out_h), area_taps(w, out_w));
  }
  return img;
}

Tensor area_resize(const Tensor& img, int out_h, int out_w) { return resize(img, out_h, out_w, ResizeMode::area); }

std::vector<double> gaussian_kernel_1d(int size, double sigma) {
  if (size < 1 || size % 2 == 0) throw ArgumentError("gaussian_kernel_1d: size must be odd");
  if (!(sigma > 0.0)) throw ArgumentError("gaussian_kernel_1d: sigma must be positive");
  const int r = size / 2;
  std::vector<double> k(size);
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += k[i + r];
  }
  for (auto& v : k) v /= total;
  return k;
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Tensor gaussian_blur(const Tensor& img, int size, double sigma) {
  require_image(img, "gaussian_blur");
  const auto k = gaussian_kernel_1d(size, sigma);
  const int r = size / 2;
  const int c = img.shape()[0], h = height(img), w = width(img);
  Tensor tmp(img.shape());
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int d = -r; d <= r; ++d) acc += k[d + r] * img.at(ch, y, reflect_index(x + d, w));
        tmp.at(ch, y, x) = acc;
      }
    }
  }
  Tensor out(img.shape());
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int d = -r; d <= r; ++d) acc += k[d + r] * tmp.at(ch, reflect_index(y + d, h), x);
        out.at(ch, y, x) = acc;
      }
    }
  }
  return out;
}

Tensor clip01(Tensor img) {
  for (auto& v : img.storage()) v = std::clamp(v, 0.0, 1.0);
  return img;
}

Tensor quantize8(const Tensor& img) {
  Tensor out = img;
  for (auto& v : out.storage()) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

std::vector<unsigned char> to_bytes8(const Tensor& img) {
  require_image(img, "to_bytes8");
  const int c = img.shape()[0], h = height(img), w = width(img);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(c) * h * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const double v = std::clamp(img.at(ch, y, x), 0.0, 1.0);
        bytes[(static_cast<std::size_t>(y) * w + x) * c + ch] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  return bytes;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

Tensor read_png(const std::string& path) {
  std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw InputError("cannot open image " + path);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_stdio(&image, file.get())) {
    throw InputError("cannot decode PNG " + path + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw InputError("cannot decode PNG " + path + ": " + image.message);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Tensor out({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) out.at(ch, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + ch] / 255.0;
    }
  }
  return out;
}

void write_png(const std::string& path, const Tensor& img) {
  require_image(img, "write_png");
  if (img.shape()[0] != 3) throw ArgumentError("write_png: expected 3 channels");
  auto bytes = to_bytes8(img);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width(img));
  image.height = static_cast<png_uint_32>(height(img));
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw InputError("cannot write PNG " + path + ": " + image.message);
  }
}

Tensor synthetic_scene(int h, int w, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x5c3e));
  Tensor img({3, h, w});
  double base[3], tilt_y[3], tilt_x[3];
  for (int ch = 0; ch < 3; ++ch) {
    base[ch] = rng.uniform(0.2, 0.6);
    tilt_y[ch] = rng.uniform(-0.3, 0.3);
    tilt_x[ch] = rng.uniform(-0.3, 0.3);
  }
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        img.at(ch, y, x) = base[ch] + tilt_y[ch] * y / h + tilt_x[ch] * x / w;
      }
    }
  }
  // filled rectangles and discs
  for (int s = 0; s < 6; ++s) {
    const double cy = rng.uniform(0, h), cx = rng.uniform(0, w);
    const double ry = rng.uniform(0.08, 0.3) * h, rx = rng.uniform(0.08, 0.3) * w;
    const bool disc = rng.uniform() < 0.5;
    double color[3];
    for (auto& v : color) v = rng.uniform(0.05, 0.95);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        const bool inside = disc ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
        if (inside) {
          for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = color[ch];
        }
      }
    }
  }
  // oriented stripes in one quadrant-sized window
  const double freq = rng.uniform(0.3, 0.9), angle = rng.uniform(0.0, std::numbers::pi);
  const int y0 = static_cast<int>(rng.uniform(0, h / 2.0)), x0 = static_cast<int>(rng.uniform(0, w / 2.0));
  for (int y = y0; y < std::min(h, y0 + h / 3); ++y) {
    for (int x = x0; x < std::min(w, x0 + w / 3); ++x) {
      const double v = 0.5 + 0.4 * std::sin(freq * (x * std::cos(angle) + y * std::sin(angle)));
      for (int ch = 0; ch < 3; ++ch) img.at(ch, y, x) = 0.5 * img.at(ch, y, x) + 0.5 * v;
    }
  }
  for (auto& v : img.storage()) v += rng.uniform(-0.02, 0.02);
  return quantize8(clip01(std::move(img)));
}

}  // namespace mrir::image
