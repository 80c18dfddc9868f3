#pragma once

#include <cstddef>
#include <cstring>
#include <vector>

// Dense kernels on row-major double matrices. Every routine accumulates into C.
namespace mrir::gemm {

using v4d = double __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void add4(double* p, v4d v) {
  v4d cur = load4(p);
  cur += v;
  std::memcpy(p, &cur, sizeof cur);
}

// C[M, N] += A[M, K] B[K, N], 4 x 8 register tiles.
inline void nn(const double* a, const double* b, double* c, int m, int k, int n) {
  const int m4 = m - m % 4, n8 = n - n % 8;
  for (int i = 0; i < m4; i += 4) {
    const double* a0 = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n8; j += 8) {
      v4d acc[4][2] = {};
      for (int p = 0; p < k; ++p) {
        const double* br = b + static_cast<std::size_t>(p) * n + j;
        const v4d b0 = load4(br), b1 = load4(br + 4);
        for (int r = 0; r < 4; ++r) {
          const double av = a0[static_cast<std::size_t>(r) * k + p];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (int r = 0; r < 4; ++r) {
        double* cr = c + static_cast<std::size_t>(i + r) * n + j;
        add4(cr, acc[r][0]);
        add4(cr + 4, acc[r][1]);
      }
    }
    for (int r = 0; r < 4; ++r) {
      for (int j = n8; j < n; ++j) {
        double acc = 0.0;
        for (int p = 0; p < k; ++p) acc += a0[static_cast<std::size_t>(r) * k + p] * b[static_cast<std::size_t>(p) * n + j];
        c[static_cast<std::size_t>(i + r) * n + j] += acc;
      }
    }
  }
  for (int i = m4; i < m; ++i) {
    double* cr = c + static_cast<std::size_t>(i) * n;
    const double* ar = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double v = ar[p];
      const double* br = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cr[j] += v * br[j];
    }
  }
}

inline std::vector<double> transpose(const double* a, int rows, int cols) {
  std::vector<double> t(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) t[static_cast<std::size_t>(c) * rows + r] = a[static_cast<std::size_t>(r) * cols + c];
  }
  return t;
}

// C[M, N] += A[M, K] B[N, K]^T.
inline void nt(const double* a, const double* b, double* c, int m, int k, int n) {
  const auto bt = transpose(b, n, k);
  nn(a, bt.data(), c, m, k, n);
}

// C[M, N] += A[K, M]^T B[K, N].
inline void tn(const double* a, const double* b, double* c, int m, int k, int n) {
  const auto at = transpose(a, k, m);
  nn(at.data(), b, c, m, k, n);
}

}  // namespace mrir::gemm
