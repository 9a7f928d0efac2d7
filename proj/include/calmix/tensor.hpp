#pragma once

#include <algorithm>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <vector>

#include <cblas.h>

#include "calmix/common.hpp"

namespace calmix {

// Dense row-major tensor. Value semantics; rank <= 4 in practice.
template <typename T = float>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
    }
    Tensor(std::vector<int> s, std::vector<T> d)
        : shape(std::move(s)), data(std::move(d)) {
        CALMIX_CHECK(static_cast<std::int64_t>(data.size()) == numel_of(shape),
                     "tensor: data size does not match shape");
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            CALMIX_CHECK(d >= 0, "tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor uniform(std::vector<int> s, Rng& rng, T lo = T(0), T hi = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = lo + (hi - lo) * static_cast<T>(uniform_unit(rng));
        return t;
    }
    static Tensor randn(std::vector<int> s, Rng& rng, T mean = T(0), T stddev = T(1)) {
        Tensor t(std::move(s));
        for (auto& v : t.data) v = gaussian<T>(rng, mean, stddev);
        return t;
    }

    T& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

    // (h, w) on rank-2, identical layout rules for higher ranks below.
    T& at(int i0, int i1) {
        return data[static_cast<std::size_t>(i0) * dim(1) + i1];
    }
    const T& at(int i0, int i1) const {
        return data[static_cast<std::size_t>(i0) * dim(1) + i1];
    }
    T& at(int i0, int i1, int i2) {
        return data[(static_cast<std::size_t>(i0) * dim(1) + i1) * dim(2) + i2];
    }
    const T& at(int i0, int i1, int i2) const {
        return data[(static_cast<std::size_t>(i0) * dim(1) + i1) * dim(2) + i2];
    }
    T& at(int i0, int i1, int i2, int i3) {
        return data[((static_cast<std::size_t>(i0) * dim(1) + i1) * dim(2) + i2) *
                        dim(3) + i3];
    }
    const T& at(int i0, int i1, int i2, int i3) const {
        return data[((static_cast<std::size_t>(i0) * dim(1) + i1) * dim(2) + i2) *
                        dim(3) + i3];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    Tensor reshaped(std::vector<int> s) const {
        CALMIX_CHECK(numel_of(s) == numel(), "reshape: element count mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// C[m,n] += A[m,k] * B[k,n], optionally transposing A/B. Row-major.
template <typename T>
void gemm_accumulate(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
                     const T* a, int lda, const T* b, int ldb, T beta, T* c,
                     int ldc) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T acc = T(0);
            for (int p = 0; p < k; ++p) {
                const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
                const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
        }
    }
}

template <>
inline void gemm_accumulate<float>(bool trans_a, bool trans_b, int m, int n,
                                   int k, float alpha, const float* a, int lda,
                                   const float* b, int ldb, float beta,
                                   float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

template <>
inline void gemm_accumulate<double>(bool trans_a, bool trans_b, int m, int n,
                                    int k, double alpha, const double* a,
                                    int lda, const double* b, int ldb,
                                    double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

// C = A[m,k] x B[k,n]; shapes validated by the caller.
template <typename T>
Tensor<T> matmul_values(const Tensor<T>& a, const Tensor<T>& b) {
    CALMIX_CHECK(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
    CALMIX_CHECK(a.dim(1) == b.dim(0), "matmul: inner dimensions ", a.dim(1),
                 " vs ", b.dim(0));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<T> c({m, n});
    if (m == 0 || n == 0 || k == 0) return c;
    gemm_accumulate<T>(false, false, m, n, k, T(1), a.data.data(), k,
                       b.data.data(), n, T(0), c.data.data(), n);
    return c;
}

}  // namespace calmix
