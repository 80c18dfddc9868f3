#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mrir/config.hpp"
#include "mrir/tensor.hpp"

// Image helpers on [C, H, W] tensors with values nominally in [0, 1].
namespace mrir::image {

int height(const Tensor& img);
int width(const Tensor& img);
void require_image(const Tensor& img, const char* op);

Tensor resize(const Tensor& img, int out_h, int out_w, ResizeMode mode);

// Box-filter resample; exact block mean for integer factors.
Tensor area_resize(const Tensor& img, int out_h, int out_w);

// Isotropic Gaussian of odd `size`, normalized to sum 1.
std::vector<double> gaussian_kernel_1d(int size, double sigma);

// Separable Gaussian blur with reflect-101 borders.
Tensor gaussian_blur(const Tensor& img, int size, double sigma);

// Reflect-101 index into [0, n) for any integer i.
int reflect_index(int i, int n);

Tensor clip01(Tensor img);
// Quantize to the 8-bit grid k/255.
Tensor quantize8(const Tensor& img);

Tensor read_png(const std::string& path);
void write_png(const std::string& path, const Tensor& img);

// Deterministic procedural RGB scene (gradients, shapes, stripes and grain); used as
// the bundled test image set.
Tensor synthetic_scene(int h, int w, std::uint64_t seed);

// Bytes of the 8-bit quantized image, row-major interleaved RGB.
std::vector<unsigned char> to_bytes8(const Tensor& img);

}  // namespace mrir::image
