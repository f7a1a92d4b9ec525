#pragma once

#include <algorithm>
#include <cstddef>

namespace inca::kernels {

// C[p x r] = A[p x q] * B[q x r], all row-major and densely packed.
//
// Every output entry is accumulated in increasing k order starting from zero,
// whatever tile path computes it. Rows of C therefore depend only on the
// matching row of A and on B, which the class-isolation contracts rely on.
// Requires the translation unit to be built without floating-point
// contraction so vector and scalar paths round identically.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t p, std::size_t q,
          std::size_t r) {
  constexpr std::size_t kRows = 4;
  constexpr std::size_t kCols = 64 / sizeof(T) * 2;

  std::size_t i = 0;
  for (; i + kRows <= p; i += kRows) {
    std::size_t j = 0;
    for (; j + kCols <= r; j += kCols) {
      T acc[kRows][kCols] = {};
      for (std::size_t k = 0; k < q; ++k) {
        const T* brow = b + k * r + j;
        for (std::size_t ii = 0; ii < kRows; ++ii) {
          const T av = a[(i + ii) * q + k];
          for (std::size_t jj = 0; jj < kCols; ++jj) acc[ii][jj] += av * brow[jj];
        }
      }
      for (std::size_t ii = 0; ii < kRows; ++ii)
        std::copy(acc[ii], acc[ii] + kCols, c + (i + ii) * r + j);
    }
    if (j < r) {
      const std::size_t w = r - j;
      for (std::size_t ii = 0; ii < kRows; ++ii) {
        T* crow = c + (i + ii) * r + j;
        std::fill(crow, crow + w, T(0));
        for (std::size_t k = 0; k < q; ++k) {
          const T av = a[(i + ii) * q + k];
          const T* brow = b + k * r + j;
          for (std::size_t jj = 0; jj < w; ++jj) crow[jj] += av * brow[jj];
        }
      }
    }
  }
  for (; i < p; ++i) {
    T* crow = c + i * r;
    std::fill(crow, crow + r, T(0));
    for (std::size_t k = 0; k < q; ++k) {
      const T av = a[i * q + k];
      const T* brow = b + k * r;
      for (std::size_t jj = 0; jj < r; ++jj) crow[jj] += av * brow[jj];
    }
  }
}

template <typename T>
void transpose(const T* a, T* out, std::size_t p, std::size_t q) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < p; i0 += kBlock) {
    const std::size_t i1 = std::min(p, i0 + kBlock);
    for (std::size_t j0 = 0; j0 < q; j0 += kBlock) {
      const std::size_t j1 = std::min(q, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) out[j * p + i] = a[i * q + j];
    }
  }
}

}  // namespace inca::kernels
