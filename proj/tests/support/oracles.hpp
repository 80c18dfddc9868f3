#pragma once

#include <complex>
#include <functional>
#include <string>
#include <vector>

#include "mrir/autograd.hpp"
#include "mrir/tensor.hpp"

// Reference implementations written independently of the library code paths they
// check: direct sums instead of fast transforms, sliding windows instead of
// separable filters, explicit loops instead of the autograd ops.
namespace mrir::oracle {

using Complex = std::complex<double>;

// O(N^2) 2-D DFT of a real [h, w] plane.
std::vector<Complex> naive_dft_2d(const double* plane, int h, int w);

// mean over channels and bins of |Re| + |Im| of DFT(pred) - DFT(gt), via naive_dft_2d.
double naive_fft_l1(const Tensor& pred, const Tensor& gt);

double direct_psnr_y(const Tensor& a, const Tensor& b);

// Full 2-D Gaussian window evaluated at every valid position.
double direct_ssim_y(const Tensor& a, const Tensor& b);

// Single-head-free attention: explicit score table, row softmax and weighted sums.
// wq [d, d], bq [d], wk [d, dkv], wv [d, dkv], bv [d], wo [d, d], bo [d].
Tensor naive_attention(const Tensor& queries, const Tensor& kv, const Tensor& wq, const Tensor& bq, const Tensor& wk,
                       const Tensor& wv, const Tensor& bv, const Tensor& wo, const Tensor& bo, int heads);

// Block mean over f x f cells.
Tensor block_mean(const Tensor& img, int f);

struct GradCheckResult {
  double rel_error = 0.0;  // ||a - n|| / (||a|| + ||n||) over all checked coordinates
  std::size_t coords = 0;
  double analytic_norm = 0.0;
  std::string worst_param;
  double worst_abs_diff = 0.0;
};

struct GradTarget {
  std::string name;
  ag::Var var;  // leaf requiring grad
};

// Central differences with step h on up to `per_tensor` coordinates of every target,
// chosen with `seed`. `f` must rebuild the scalar from the current leaf values.
GradCheckResult gradcheck(const std::function<ag::Var()>& f, const std::vector<GradTarget>& targets, int per_tensor,
                          std::uint64_t seed, double h = 1e-6);

}  // namespace mrir::oracle
