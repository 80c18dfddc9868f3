#include "mrir/degrade.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mrir/image.hpp"

namespace mrir::degrade {

using nlohmann::json;

DegradationParams DegradationParams::neutral(int final_scale) {
  DegradationParams p;
  p.final_scale = final_scale;
  return p;
}

json params_to_json(const DegradationParams& p) {
  json orders = json::array();
  for (const auto& o : p.orders) {
    orders.push_back({{"blur_kernel_size", o.blur_kernel_size},
                      {"blur_sigma", o.blur_sigma},
                      {"resize_scale", o.resize_scale},
                      {"resize_mode", to_string(o.resize_mode)},
                      {"noise_sigma", o.noise_sigma},
                      {"noise_gray", o.noise_gray},
                      {"jpeg_quality", o.jpeg_quality}});
  }
  return json{{"orders", orders}, {"final_scale", p.final_scale}, {"rng_seed", p.rng_seed}};
}

DegradationParams params_from_json(const json& doc) {
  DegradationParams p;
  try {
    const auto& orders = doc.at("orders");
    if (!orders.is_array() || orders.size() != 2) throw ConfigError("degradation params: expected two orders");
    for (std::size_t k = 0; k < 2; ++k) {
      const auto& o = orders[k];
      auto& out = p.orders[k];
      out.blur_kernel_size = o.at("blur_kernel_size").get<int>();
      out.blur_sigma = o.at("blur_sigma").get<double>();
      out.resize_scale = o.at("resize_scale").get<double>();
      out.resize_mode = resize_mode_from_string(o.at("resize_mode").get<std::string>());
      out.noise_sigma = o.at("noise_sigma").get<double>();
      out.noise_gray = o.at("noise_gray").get<bool>();
      out.jpeg_quality = o.at("jpeg_quality").get<int>();
    }
    p.final_scale = doc.at("final_scale").get<int>();
    p.rng_seed = doc.at("rng_seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("degradation params: ") + e.what());
  }
  return p;
}

namespace {

OrderParams sample_order(const OrderRanges& r, Rng& rng) {
  OrderParams o;
  o.blur_kernel_size = r.kernel_sizes[rng.uniform_int(0, static_cast<std::int64_t>(r.kernel_sizes.size()) - 1)];
  o.blur_sigma = r.blur_sigma.lo == r.blur_sigma.hi ? r.blur_sigma.lo : rng.uniform(r.blur_sigma.lo, r.blur_sigma.hi);
  o.resize_scale =
      r.resize_scale.lo == r.resize_scale.hi ? r.resize_scale.lo : rng.uniform(r.resize_scale.lo, r.resize_scale.hi);
  o.resize_mode = r.resize_modes[rng.uniform_int(0, static_cast<std::int64_t>(r.resize_modes.size()) - 1)];
  o.noise_sigma =
      r.noise_sigma.lo == r.noise_sigma.hi ? r.noise_sigma.lo : rng.uniform(r.noise_sigma.lo, r.noise_sigma.hi);
  o.noise_gray = rng.uniform() < r.gray_noise_prob;
  o.jpeg_quality = static_cast<int>(rng.uniform_int(r.jpeg_quality.lo, r.jpeg_quality.hi));
  return o;
}

}  // namespace

DegradationParams sample_degradation_params(const DegradeConfig& config, std::uint64_t seed) {
  validate_degrade_config(config);
  Rng rng(seed);
  DegradationParams p;
  p.orders[0] = sample_order(config.order1, rng);
  p.orders[1] = sample_order(config.order2, rng);
  p.final_scale = config.final_scale;
  p.rng_seed = seed;
  return p;
}

namespace {

struct DctBasis {
  double c[8][8];  // c[u][x] = C(u)/2 * cos((2x+1) u pi / 16)
  DctBasis() {
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::sqrt(0.5) : 1.0;
      for (int x = 0; x < 8; ++x) c[u][x] = 0.5 * cu * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
  }
};

const DctBasis& basis() {
  static const DctBasis b;
  return b;
}

constexpr std::array<int, 64> kLumaBase{16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                        14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                        18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                        49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

constexpr std::array<int, 64> kChromaBase{17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                          24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                          99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                          99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

}  // namespace

void dct8x8(const double* in, double* out) {
  const auto& b = basis();
  double tmp[64];
  for (int y = 0; y < 8; ++y) {
    for (int u = 0; u < 8; ++u) {
      double acc = 0.0;
      for (int x = 0; x < 8; ++x) acc += b.c[u][x] * in[y * 8 + x];
      tmp[y * 8 + u] = acc;
    }
  }
  for (int v = 0; v < 8; ++v) {
    for (int u = 0; u < 8; ++u) {
      double acc = 0.0;
      for (int y = 0; y < 8; ++y) acc += b.c[v][y] * tmp[y * 8 + u];
      out[v * 8 + u] = acc;
    }
  }
}

void idct8x8(const double* in, double* out) {
  const auto& b = basis();
  double tmp[64];
  for (int v = 0; v < 8; ++v) {
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int u = 0; u < 8; ++u) acc += b.c[u][x] * in[v * 8 + u];
      tmp[v * 8 + x] = acc;
    }
  }
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      double acc = 0.0;
      for (int v = 0; v < 8; ++v) acc += b.c[v][y] * tmp[v * 8 + x];
      out[y * 8 + x] = acc;
    }
  }
}

std::array<int, 64> quant_table(int quality, bool chroma) {
  if (quality < 1 || quality > 100) throw ArgumentError("jpeg quality must lie in 1..100");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  const auto& base = chroma ? kChromaBase : kLumaBase;
  std::array<int, 64> table{};
  for (int i = 0; i < 64; ++i) table[i] = std::clamp((base[i] * scale + 50) / 100, 1, 255);
  return table;
}

Tensor jpeg_approx(const Tensor& img, int quality) {
  image::require_image(img, "jpeg_approx");
  if (img.shape()[0] != 3) throw ArgumentError("jpeg_approx: expected an RGB image");
  const auto luma = quant_table(quality, false);
  const auto chroma = quant_table(quality, true);
  const int h = image::height(img), w = image::width(img);
  const int ph = (h + 7) / 8 * 8, pw = (w + 7) / 8 * 8;

  // padded YCbCr planes on the 0..255 scale, level-shifted by -128
  Tensor ycc({3, ph, pw});
  for (int y = 0; y < ph; ++y) {
    const int sy = image::reflect_index(y, h);
    for (int x = 0; x < pw; ++x) {
      const int sx = image::reflect_index(x, w);
      const double r = 255.0 * img.at(0, sy, sx), g = 255.0 * img.at(1, sy, sx), b = 255.0 * img.at(2, sy, sx);
      ycc.at(0, y, x) = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
      ycc.at(1, y, x) = -0.168736 * r - 0.331264 * g + 0.5 * b;
      ycc.at(2, y, x) = 0.5 * r - 0.418688 * g - 0.081312 * b;
    }
  }

  double block[64], coef[64];
  for (int ch = 0; ch < 3; ++ch) {
    const auto& table = ch == 0 ? luma : chroma;
    for (int by = 0; by < ph; by += 8) {
      for (int bx = 0; bx < pw; bx += 8) {
        for (int i = 0; i < 64; ++i) block[i] = ycc.at(ch, by + i / 8, bx + i % 8);
        dct8x8(block, coef);
        for (int i = 0; i < 64; ++i) coef[i] = std::round(coef[i] / table[i]) * table[i];
        idct8x8(coef, block);
        for (int i = 0; i < 64; ++i) ycc.at(ch, by + i / 8, bx + i % 8) = block[i];
      }
    }
  }

  Tensor out({3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double yy = ycc.at(0, y, x) + 128.0, cb = ycc.at(1, y, x), cr = ycc.at(2, y, x);
      out.at(0, y, x) = (yy + 1.402 * cr) / 255.0;
      out.at(1, y, x) = (yy - 0.344136 * cb - 0.714136 * cr) / 255.0;
      out.at(2, y, x) = (yy + 1.772 * cb) / 255.0;
    }
  }
  return image::clip01(std::move(out));
}

namespace {

Tensor add_noise(Tensor img, const OrderParams& o, std::uint64_t seed) {
  if (o.noise_sigma == 0.0) return img;
  Rng rng(seed);
  const int c = img.shape()[0];
  const std::size_t plane = static_cast<std::size_t>(img.shape()[1]) * img.shape()[2];
  if (o.noise_gray) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double n = o.noise_sigma * rng.normal();
      for (int ch = 0; ch < c; ++ch) img[ch * plane + i] += n;
    }
  } else {
    for (auto& v : img.storage()) v += o.noise_sigma * rng.normal();
  }
  return image::clip01(std::move(img));
}

void check_order(const OrderParams& o, int k) {
  const std::string where = "order " + std::to_string(k + 1) + ": ";
  if (o.blur_kernel_size < 1 || o.blur_kernel_size % 2 == 0) throw ArgumentError(where + "blur kernel size must be odd");
  if (!(o.blur_sigma > 0.0)) throw ArgumentError(where + "blur sigma must be positive");
  if (!(o.resize_scale > 0.0)) throw ArgumentError(where + "resize scale must be positive");
  if (!(o.noise_sigma >= 0.0)) throw ArgumentError(where + "noise sigma must be non-negative");
}

}  // namespace

ImagePair synthesize_pair(const Tensor& hq, const DegradationParams& params) {
  image::require_image(hq, "synthesize_pair");
  if (hq.shape()[0] != 3) throw ArgumentError("synthesize_pair: expected an RGB image");
  const int s = params.final_scale;
  if (s < 1) throw ArgumentError("synthesize_pair: final_scale must be >= 1");
  const int h = image::height(hq), w = image::width(hq);
  if (h % s != 0 || w % s != 0 || h < 8 * s || w < 8 * s) {
    throw ArgumentError("synthesize_pair: hq " + std::to_string(h) + "x" + std::to_string(w) +
                        " must be divisible by " + std::to_string(s) + " and at least " + std::to_string(8 * s));
  }
  if (!hq.all_finite()) throw InputError("synthesize_pair: hq contains non-finite pixels");

  Tensor x = hq;
  for (int k = 0; k < 2; ++k) {
    const auto& o = params.orders[k];
    check_order(o, k);
    x = image::gaussian_blur(x, o.blur_kernel_size, o.blur_sigma);
    const int nh = std::max(1, static_cast<int>(std::lround(image::height(x) * o.resize_scale)));
    const int nw = std::max(1, static_cast<int>(std::lround(image::width(x) * o.resize_scale)));
    x = image::clip01(image::resize(x, nh, nw, o.resize_mode));
    x = add_noise(std::move(x), o, mix_seed(params.rng_seed, static_cast<std::uint64_t>(k)));
    x = jpeg_approx(x, o.jpeg_quality);
  }
  ImagePair pair;
  pair.hq = hq;
  pair.lq = image::clip01(image::area_resize(x, h / s, w / s));
  pair.params = params;
  return pair;
}

}  // namespace mrir::degrade
