#pragma once

#include <array>
#include <cstdint>

#include "json.hpp"
#include "mrir/config.hpp"
#include "mrir/tensor.hpp"

namespace mrir::degrade {

struct OrderParams {
  int blur_kernel_size = 1;
  double blur_sigma = 1e-3;
  double resize_scale = 1.0;
  ResizeMode resize_mode = ResizeMode::area;
  double noise_sigma = 0.0;
  bool noise_gray = false;
  int jpeg_quality = 100;

  bool operator==(const OrderParams&) const = default;
};

// One draw of the two-order pipeline. The noise stream of order k is seeded with
// mix_seed(rng_seed, k), so the params fully determine the output.
struct DegradationParams {
  std::array<OrderParams, 2> orders{};
  int final_scale = 4;
  std::uint64_t rng_seed = 0;

  bool operator==(const DegradationParams&) const = default;

  // Neutral settings: identity blur, no resize, no noise, quality 100.
  static DegradationParams neutral(int final_scale = 4);
};

struct ImagePair {
  Tensor hq;
  Tensor lq;
  DegradationParams params;
};

nlohmann::json params_to_json(const DegradationParams& p);
DegradationParams params_from_json(const nlohmann::json& doc);

// Draws every stage parameter from an mt19937_64 stream seeded with `seed`, in a
// fixed order: per order kernel size, sigma, scale, mode, noise sigma, gray flag,
// quality.
DegradationParams sample_degradation_params(const DegradeConfig& config, std::uint64_t seed);

// Orthonormal 8x8 DCT-II and its inverse, row-major blocks.
void dct8x8(const double* in, double* out);
void idct8x8(const double* in, double* out);

// Annex K base table scaled by the libjpeg quality law, entries clamped to [1, 255].
std::array<int, 64> quant_table(int quality, bool chroma);

// Block-DCT JPEG stand-in: JFIF YCbCr, no chroma subsampling, reflect padding to a
// multiple of 8 (cropped back afterwards).
Tensor jpeg_approx(const Tensor& img, int quality);

ImagePair synthesize_pair(const Tensor& hq, const DegradationParams& params);

}  // namespace mrir::degrade
