#include "nb/kernels.hpp"

#include <vector>

#include "kernels_rows.hpp"

namespace nb::kernels::serial {

using namespace detail;

void matmul(const float* a, const float* b, float* c, int m, int k, int n) {
    matmul_rows(a, b, c, m, k, n, 0, m);
}

void matmul_bt(const float* a, const float* b, float* c, int m, int k, int n) {
    matmul_bt_rows(a, b, c, m, k, n, 0, m);
}

void matmul_at(const float* a, const float* b, float* c, int m, int k, int n) {
    matmul_at_rows(a, b, c, m, k, n, 0, m);
}

void ew_add(const float* a, const float* b, float* out, size_t n) { ew_add_range(a, b, out, 0, n); }
void ew_mul(const float* a, const float* b, float* out, size_t n) { ew_mul_range(a, b, out, 0, n); }
void ew_scale(const float* a, float s, float* out, size_t n) { ew_scale_range(a, s, out, 0, n); }
void ew_axpy(float* dst, const float* src, float s, size_t n) { ew_axpy_range(dst, src, s, 0, n); }

void add_bias(const float* x, const float* bias, float* out, int rows, int cols) {
    add_bias_rows(x, bias, out, cols, 0, rows);
}

void col_sums(const float* x, float* out, int rows, int cols) {
    col_sums_cols(x, out, rows, cols, 0, cols);
}

void softmax_rows(const float* x, float* out, int rows, int cols) {
    for (int i = 0; i < rows; ++i)
        softmax_row(x + static_cast<size_t>(i) * cols, out + static_cast<size_t>(i) * cols, cols);
}

void log_softmax_rows(const float* x, float* out, int rows, int cols) {
    for (int i = 0; i < rows; ++i)
        log_softmax_row(x + static_cast<size_t>(i) * cols, out + static_cast<size_t>(i) * cols, cols);
}

void softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        softmax_backward_row(probs + off, dy + off, dx + off, cols);
    }
}

void log_softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        log_softmax_backward_row(probs + off, dy + off, dx + off, cols);
    }
}

void layer_norm_rows(const float* x, const float* gain, const float* bias, float* out,
                     float* mean, float* rstd, int rows, int cols, float eps) {
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        layer_norm_row(x + off, gain, bias, out + off, mean + i, rstd + i, cols, eps);
    }
}

void layer_norm_backward_rows(const float* x, const float* gain, const float* mean,
                              const float* rstd, const float* dy, float* dx,
                              float* dgain, float* dbias, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * cols;
        layer_norm_backward_dx_row(x + off, gain, mean[i], rstd[i], dy + off, dx + off, cols);
    }
    layer_norm_backward_params_cols(x, mean, rstd, dy, dgain, dbias, rows, cols, 0, cols);
}

void gelu(const float* x, float* out, size_t n) { gelu_range(x, out, 0, n); }
void gelu_backward(const float* x, const float* dy, float* dx, size_t n) { gelu_backward_range(x, dy, dx, 0, n); }

double sum(const float* x, size_t n) {
    const size_t chunks = (n + kChunk - 1) / kChunk;
    double acc = 0.0;
    for (size_t c = 0; c < chunks; ++c) {
        const size_t i0 = c * kChunk;
        const size_t i1 = i0 + kChunk < n ? i0 + kChunk : n;
        acc += sum_chunk(x, i0, i1);
    }
    return acc;
}

double sum_squares(const float* x, size_t n) {
    const size_t chunks = (n + kChunk - 1) / kChunk;
    double acc = 0.0;
    for (size_t c = 0; c < chunks; ++c) {
        const size_t i0 = c * kChunk;
        const size_t i1 = i0 + kChunk < n ? i0 + kChunk : n;
        acc += sum_squares_chunk(x, i0, i1);
    }
    return acc;
}

bool all_finite(const float* x, size_t n) { return all_finite_chunk(x, 0, n); }

}  // namespace nb::kernels::serial
