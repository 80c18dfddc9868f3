#include "mrir/fft.hpp"

#include <numbers>
#include <stdexcept>

namespace mrir::fft {

namespace {

int smallest_factor(int n) {
  if (n % 2 == 0) return 2;
  for (int p = 3; p * p <= n; p += 2) {
    if (n % p == 0) return p;
  }
  return n;
}

// twiddle[j] = exp(sign * 2 pi i j / n_top); a sub-problem of size n uses stride n_top / n.
void recurse(const Complex* in, int in_stride, Complex* out, int n, const std::vector<Complex>& twiddle,
             int tw_stride) {
  if (n == 1) {
    out[0] = in[0];
    return;
  }
  const int p = smallest_factor(n);
  const int m = n / p;
  if (p == n) {
    for (int k = 0; k < n; ++k) {
      Complex acc = 0.0;
      for (int j = 0; j < n; ++j) {
        acc += in[j * in_stride] * twiddle[static_cast<std::size_t>((j * k) % n) * tw_stride];
      }
      out[k] = acc;
    }
    return;
  }
  // out[r*m .. r*m+m) holds the size-m transform of subsequence r.
  for (int r = 0; r < p; ++r) {
    recurse(in + r * in_stride, in_stride * p, out + r * m, m, twiddle, tw_stride * p);
  }
  std::vector<Complex> column(p);
  for (int k = 0; k < m; ++k) {
    for (int r = 0; r < p; ++r) column[r] = out[r * m + k];
    for (int q = 0; q < p; ++q) {
      const int idx = k + m * q;
      Complex acc = 0.0;
      for (int r = 0; r < p; ++r) {
        acc += column[r] * twiddle[static_cast<std::size_t>((r * idx) % n) * tw_stride];
      }
      out[idx] = acc;
    }
  }
}

}  // namespace

void transform(std::vector<Complex>& data, bool inverse) {
  const int n = static_cast<int>(data.size());
  if (n <= 1) return;
  const double sign = inverse ? 1.0 : -1.0;
  std::vector<Complex> twiddle(n);
  for (int j = 0; j < n; ++j) {
    // quarter turns exact, so self-conjugate bins of real input keep a zero imaginary part
    if ((4 * j) % n == 0) {
      static const Complex kQuarter[4] = {{1.0, 0.0}, {0.0, 1.0}, {-1.0, 0.0}, {0.0, -1.0}};
      const int turn = 4 * j / n;
      twiddle[j] = kQuarter[sign > 0 ? turn : (4 - turn) % 4];
    } else {
      twiddle[j] = std::polar(1.0, sign * 2.0 * std::numbers::pi * j / n);
    }
  }
  std::vector<Complex> out(n);
  recurse(data.data(), 1, out.data(), n, twiddle, 1);
  data.swap(out);
}

void transform_2d(std::vector<Complex>& data, int h, int w, bool inverse) {
  if (static_cast<long>(data.size()) != static_cast<long>(h) * w) {
    throw std::invalid_argument("transform_2d: buffer size does not match h*w");
  }
  std::vector<Complex> line(w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) line[x] = data[y * w + x];
    transform(line, inverse);
    for (int x = 0; x < w; ++x) data[y * w + x] = line[x];
  }
  line.resize(h);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) line[y] = data[y * w + x];
    transform(line, inverse);
    for (int y = 0; y < h; ++y) data[y * w + x] = line[y];
  }
}

std::vector<Complex> real_dft_2d(std::span<const double> plane, int h, int w) {
  std::vector<Complex> data(plane.begin(), plane.end());
  transform_2d(data, h, w, false);
  return data;
}

}  // namespace mrir::fft
