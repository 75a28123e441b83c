#pragma once

#include <cstddef>
#include <vector>

namespace threemt::detail {

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  }
  return out;
}

template <typename T>
void gemm_abt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// C (m x n) += A (m x k) * B (k x n), all row-major.
// The summation order of an element depends on k and n only, so a row's result
// does not depend on the other rows present.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (n < 8 && k >= 16) {
    const std::vector<T> bt = transpose(b, k, n);
    gemm_abt_acc(a, bt.data(), c, m, k, n);
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C (m x n) += A (m x k) * B^T with B stored (n x k). Each element is a dot of
// two contiguous rows, summed in sixteen fixed lanes.
template <typename T>
void gemm_abt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (k < 8) {
    const std::vector<T> bt = transpose(b, n, k);
    gemm_acc(a, bt.data(), c, m, k, n);
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T lane[16] = {};
      std::size_t p = 0;
      for (; p + 16 <= k; p += 16) {
        for (std::size_t l = 0; l < 16; ++l) lane[l] += arow[p + l] * brow[p + l];
      }
      T tail = 0;
      for (; p < k; ++p) tail += arow[p] * brow[p];
      for (std::size_t l = 0; l < 8; ++l) lane[l] += lane[l + 8];
      c[i * n + j] += ((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7])) + tail;
    }
  }
}

// C (m x n) += A^T * B with A stored (k x m) and B (k x n).
template <typename T>
void gemm_atb_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  if (n < 8) {
    // accumulate C^T so the inner loop runs over m
    std::vector<T> ct(n * m, T(0));
    for (std::size_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = b[p * n + j];
        T* crow = ct.data() + j * m;
        for (std::size_t i = 0; i < m; ++i) crow[i] += arow[i] * bv;
      }
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += ct[j * m + i];
    return;
  }
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


}  // namespace threemt::detail
