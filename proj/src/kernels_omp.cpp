#include "nb/kernels.hpp"

#include <vector>

#include "kernels_rows.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// OpenMP drivers. Work is split by output row (or fixed chunk); every output
// element is still reduced in the same order as the serial driver, so the
// two backends agree bit-for-bit at any thread count.
namespace nb::kernels::openmp {

using namespace detail;

void matmul(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) matmul_rows(a, b, c, m, k, n, i, i + 1);
}

void matmul_bt(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) matmul_bt_rows(a, b, c, m, k, n, i, i + 1);
}

void matmul_at(const float* a, const float* b, float* c, int m, int k, int n) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) matmul_at_rows(a, b, c, m, k, n, i, i + 1);
}

void ew_add(const float* a, const float* b, float* out, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        ew_add_range(a, b, out, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
}

void ew_mul(const float* a, const float* b, float* out, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        ew_mul_range(a, b, out, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
}

void ew_scale(const float* a, float s, float* out, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        ew_scale_range(a, s, out, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
}

void ew_axpy(float* dst, const float* src, float s, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        ew_axpy_range(dst, src, s, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
}

void add_bias(const float* x, const float* bias, float* out, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) add_bias_rows(x, bias, out, cols, i, i + 1);
}

void col_sums(const float* x, float* out, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int j = 0; j < cols; ++j) col_sums_cols(x, out, rows, cols, j, j + 1);
}

void softmax_rows(const float* x, float* out, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i)
        softmax_row(x + static_cast<size_t>(i) * cols, out + static_cast<size_t>(i) * cols, cols);
}

void log_softmax_rows(const float* x, float* out, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i)
        log_softmax_row(x + static_cast<size_t>(i) * cols, out + static_cast<size_t>(i) * cols, cols);
}

void softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        softmax_backward_row(probs + off, dy + off, dx + off, cols);
    }
}

void log_softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        log_softmax_backward_row(probs + off, dy + off, dx + off, cols);
    }
}

void layer_norm_rows(const float* x, const float* gain, const float* bias, float* out,
                     float* mean, float* rstd, int rows, int cols, float eps) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        layer_norm_row(x + off, gain, bias, out + off, mean + i, rstd + i, cols, eps);
    }
}

void layer_norm_backward_rows(const float* x, const float* gain, const float* mean,
                              const float* rstd, const float* dy, float* dx,
                              float* dgain, float* dbias, int rows, int cols) {
#pragma omp parallel for schedule(static)
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        layer_norm_backward_dx_row(x + off, gain, mean[i], rstd[i], dy + off, dx + off, cols);
    }
#pragma omp parallel for schedule(static)
    for (int j = 0; j < cols; ++j)
        layer_norm_backward_params_cols(x, mean, rstd, dy, dgain, dbias, rows, cols, j, j + 1);
}

void gelu(const float* x, float* out, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        gelu_range(x, out, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
}

void gelu_backward(const float* x, const float* dy, float* dx, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        gelu_backward_range(x, dy, dx, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
}

double sum(const float* x, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
    std::vector<double> partial(static_cast<size_t>(chunks));
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        partial[static_cast<size_t>(ci)] = sum_chunk(x, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
    double acc = 0.0;
    for (double p : partial) acc += p;  // fixed chunk order
    return acc;
}

double sum_squares(const float* x, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
    std::vector<double> partial(static_cast<size_t>(chunks));
#pragma omp parallel for schedule(static)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        partial[static_cast<size_t>(ci)] = sum_squares_chunk(x, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
    double acc = 0.0;
    for (double p : partial) acc += p;
    return acc;
}

bool all_finite(const float* x, size_t n) {
    const long chunks = static_cast<long>((n + kChunk - 1) / kChunk);
    bool ok = true;
#pragma omp parallel for schedule(static) reduction(&& : ok)
    for (long ci = 0; ci < chunks; ++ci) {
        const size_t i0 = static_cast<size_t>(ci) * kChunk;
        ok = ok && all_finite_chunk(x, i0, i0 + kChunk < n ? i0 + kChunk : n);
    }
    return ok;
}

}  // namespace nb::kernels::openmp
