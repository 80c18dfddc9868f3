#pragma once

#include <complex>
#include <span>
#include <vector>

namespace mrir::fft {

using Complex = std::complex<double>;

// Unnormalized mixed-radix Cooley-Tukey transform of any length. Prime factors
// fall back to a direct DFT of that factor's size. inverse=true uses e^{+i...}
// and does NOT divide by n.
void transform(std::vector<Complex>& data, bool inverse = false);

// Unnormalized 2-D transform of a row-major [h, w] plane, in place.
void transform_2d(std::vector<Complex>& data, int h, int w, bool inverse = false);

// Forward 2-D DFT of a real [h, w] plane.
std::vector<Complex> real_dft_2d(std::span<const double> plane, int h, int w);

}  // namespace mrir::fft
