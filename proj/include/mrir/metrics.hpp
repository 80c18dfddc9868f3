#pragma once

#include "mrir/tensor.hpp"

namespace mrir::metrics {

// BT.601 studio-swing luma on the 0..255 scale: 16 + 65.481 R + 128.553 G + 24.966 B
// for RGB in [0, 1]. Returns [H, W] as a rank-2 tensor.
Tensor luma_y(const Tensor& rgb);

// 10 log10(255^2 / MSE) on luma; +infinity when the images agree exactly.
double psnr_y(const Tensor& a, const Tensor& b);

// Single-scale SSIM on luma with an 11x11 Gaussian window (sigma 1.5), averaged over
// the valid window positions. Both sides must be at least 11 pixels.
double ssim_y(const Tensor& a, const Tensor& b);

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

}  // namespace mrir::metrics
