#pragma once

#include <cstdint>

// Plain row-major kernels. Every output row is computed by the same loop
// nest regardless of how many rows are in the call, so results for a row do
// not depend on batch composition.
namespace tic::detail {

using idx = std::int64_t;

// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(idx M, idx N, idx K, const double* A, const double* B, double* C) {
  for (idx i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (idx k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (idx j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(idx M, idx N, idx K, const double* A, const double* B, double* C) {
  for (idx i = 0; i < M; ++i) {
    const double* a = A + i * K;
    double* c = C + i * N;
    for (idx j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s = 0.0;
      for (idx k = 0; k < K; ++k) s += a[k] * b[k];
      c[j] += s;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(idx M, idx N, idx K, const double* A, const double* B, double* C) {
  for (idx k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (idx i = 0; i < M; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * N;
      for (idx j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace tic::detail
