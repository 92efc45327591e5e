#pragma once

#include <cstddef>

namespace opcrash::numcore::kernels {

// Row-major dense products that accumulate into C.

/// C(m×n) += A(m×k) · B(k×n)
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kBlock = 4;
  std::size_t i = 0;
  for (; i + kBlock <= m; i += kBlock) {
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = a[(i + 0) * k + p];
      const T a1 = a[(i + 1) * k + p];
      const T a2 = a[(i + 2) * k + p];
      const T a3 = a[(i + 3) * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C(m×n) += Aᵀ · B with A stored k×m.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// C(m×n) += A · Bᵀ with B stored n×k.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        acc0 += arow[p] * brow[p];
        acc1 += arow[p + 1] * brow[p + 1];
        acc2 += arow[p + 2] * brow[p + 2];
        acc3 += arow[p + 3] * brow[p + 3];
      }
      for (; p < k; ++p) acc0 += arow[p] * brow[p];
      crow[j] += (acc0 + acc1) + (acc2 + acc3);
    }
  }
}

}  // namespace opcrash::numcore::kernels
