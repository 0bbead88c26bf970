#pragma once

// Row-major dense kernels behind conv and matmul. All three accumulate into
// C. Loop orders keep the innermost loop contiguous so the compiler can
// vectorize; summation order is fixed, so results are reproducible.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "chexopt/tensor.hpp"

namespace chexopt::detail {

// C[M,N] += A[M,K] * B[K,N]
template <class T, class Acc>
void gemm_nn_kernel(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
                    Acc* C) {
  std::vector<T> row(N);
  for (std::size_t i = 0; i < M; ++i) {
    std::fill(row.begin(), row.end(), T(0));
    T* r = row.data();
    for (std::size_t k = 0; k < K; ++k) {
      const T a = A[i * K + k];
      const T* b = B + k * N;
#pragma omp simd
      for (std::size_t j = 0; j < N; ++j) r[j] += a * b[j];
    }
    Acc* c = C + i * N;
    for (std::size_t j = 0; j < N; ++j) c[j] += static_cast<Acc>(r[j]);
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T, class Acc>
void gemm_nt_kernel(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
                    Acc* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const T* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* b = B + j * K;
      T acc = 0;
#pragma omp simd reduction(+ : acc)
      for (std::size_t k = 0; k < K; ++k) acc += a[k] * b[k];
      C[i * N + j] += static_cast<Acc>(acc);
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <class T, class Acc>
void gemm_tn_kernel(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B,
                    Acc* C) {
  std::vector<T> acc(M * N, T(0));
  for (std::size_t k = 0; k < K; ++k) {
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T a = A[k * M + i];
      T* c = acc.data() + i * N;
#pragma omp simd
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
  for (std::size_t i = 0; i < M * N; ++i) C[i] += static_cast<Acc>(acc[i]);
}

inline std::vector<float> to_float(const double* p, std::size_t n) {
  return std::vector<float>(p, p + n);
}

inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  if (compute_precision() == ComputePrecision::F32) {
    auto a = to_float(A, M * K);
    auto b = to_float(B, K * N);
    gemm_nn_kernel<float, double>(M, N, K, a.data(), b.data(), C);
  } else {
    gemm_nn_kernel<double, double>(M, N, K, A, B, C);
  }
}

inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  if (compute_precision() == ComputePrecision::F32) {
    auto a = to_float(A, M * K);
    auto b = to_float(B, N * K);
    gemm_nt_kernel<float, double>(M, N, K, a.data(), b.data(), C);
  } else {
    gemm_nt_kernel<double, double>(M, N, K, A, B, C);
  }
}

inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  if (compute_precision() == ComputePrecision::F32) {
    auto a = to_float(A, K * M);
    auto b = to_float(B, K * N);
    gemm_tn_kernel<float, double>(M, N, K, a.data(), b.data(), C);
  } else {
    gemm_tn_kernel<double, double>(M, N, K, A, B, C);
  }
}

}  // namespace chexopt::detail
