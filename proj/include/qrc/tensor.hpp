#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#ifndef QRC_NO_BLAS
#include <cblas.h>
#endif

namespace qrc {

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateBatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dense row-major array. Everything in the project is rank 1 or 2;
// vectors are stored as 1xN, scalars as 1x1.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<std::ptrdiff_t>(data.size()))
            throw DimensionError("tensor data size does not match shape");
    }

    static Tensor zeros(std::vector<int> s) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)));
    }
    static Tensor full(std::vector<int> s, T v) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<T>(static_cast<std::size_t>(n), v));
    }
    static Tensor row(std::vector<T> d) {
        int n = static_cast<int>(d.size());
        return Tensor({1, n}, std::move(d));
    }
    static Tensor scalar(T v) { return Tensor({1, 1}, {v}); }

    static std::ptrdiff_t numel_of(const std::vector<int>& s) {
        if (s.empty()) throw DimensionError("empty shape");
        std::ptrdiff_t n = 1;
        for (int d : s) {
            if (d <= 0) throw DimensionError("non-positive dimension");
            n *= d;
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    int rows() const { return shape.size() == 1 ? 1 : shape[0]; }
    int cols() const { return shape.size() == 1 ? shape[0] : shape[1]; }

    T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
    const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

    T item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar tensor");
        return data[0];
    }

    bool same_shape(const Tensor& o) const { return rows() == o.rows() && cols() == o.cols(); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i)
            s += (i ? "x" : "") + std::to_string(shape[i]);
        return s + "]";
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out[i] = static_cast<U>(data[i]);
        return Tensor<U>(shape, std::move(out));
    }
};

namespace detail {

#ifndef QRC_NO_BLAS
extern "C" void openblas_set_num_threads(int);

inline void ensure_single_thread() {
    static const bool done = [] {
        openblas_set_num_threads(1);
        return true;
    }();
    (void)done;
}

inline void gemm_kernel(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda,
                        const float* b, int ldb, float beta, float* c, int ldc) {
    ensure_single_thread();
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm_kernel(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda,
                        const double* b, int ldb, double beta, double* c, int ldc) {
    ensure_single_thread();
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, a, lda, b, ldb, beta, c, ldc);
}
#else
template <typename T>
void gemm_kernel(bool trans_a, bool trans_b, int m, int n, int k, const T* a, int lda, const T* b,
                 int ldb, T beta, T* c, int ldc) {
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            T acc = 0;
            for (int p = 0; p < k; ++p) {
                T av = trans_a ? a[p * lda + i] : a[i * lda + p];
                T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            c[i * ldc + j] = beta * c[i * ldc + j] + acc;
        }
}
#endif

} // namespace detail

// c = op(a) * op(b) (+ c if accumulate). Shapes are of the logical
// (pre-transpose) operands.
template <typename T>
void gemm(const Tensor<T>& a, bool trans_a, const Tensor<T>& b, bool trans_b, Tensor<T>& c,
          bool accumulate = false) {
    int m = trans_a ? a.cols() : a.rows();
    int k = trans_a ? a.rows() : a.cols();
    int kb = trans_b ? b.cols() : b.rows();
    int n = trans_b ? b.rows() : b.cols();
    if (k != kb) throw DimensionError("gemm inner dimension mismatch");
    if (c.rows() != m || c.cols() != n) throw DimensionError("gemm output shape mismatch");
    detail::gemm_kernel(trans_a, trans_b, m, n, k, a.data.data(), a.cols(), b.data.data(),
                        b.cols(), accumulate ? T(1) : T(0), c.data.data(), c.cols());
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> c = Tensor<T>::zeros({a.rows(), b.cols()});
    gemm(a, false, b, false, c);
    return c;
}

} // namespace qrc
