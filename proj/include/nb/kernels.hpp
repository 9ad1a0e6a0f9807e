#pragma once

#include <cstddef>

// Dense float32 kernels, row-major. Every kernel exists as a serial and an
// OpenMP driver over the same row/chunk workers, so both backends produce
// bit-identical results: each output element is reduced in a fixed order
// regardless of thread count. Accumulations run in double and are rounded
// to float on store.
namespace nb::kernels {

enum class Backend { serial, openmp };

Backend backend();
void set_backend(Backend b);
bool openmp_compiled();
int thread_count();
void set_threads(int n);  // no-op without OpenMP

namespace serial {
void matmul(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_bt(const float* a, const float* b, float* c, int m, int k, int n);  // c = a * b^T, b is n x k
void matmul_at(const float* a, const float* b, float* c, int m, int k, int n);  // c = a^T * b, a is k x m
void ew_add(const float* a, const float* b, float* out, size_t n);
void ew_mul(const float* a, const float* b, float* out, size_t n);
void ew_scale(const float* a, float s, float* out, size_t n);
void ew_axpy(float* dst, const float* src, float s, size_t n);  // dst += s * src
void add_bias(const float* x, const float* bias, float* out, int rows, int cols);
void col_sums(const float* x, float* out, int rows, int cols);
void softmax_rows(const float* x, float* out, int rows, int cols);
void log_softmax_rows(const float* x, float* out, int rows, int cols);
void softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols);
void log_softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols);
void layer_norm_rows(const float* x, const float* gain, const float* bias, float* out,
                     float* mean, float* rstd, int rows, int cols, float eps);
void layer_norm_backward_rows(const float* x, const float* gain, const float* mean,
                              const float* rstd, const float* dy, float* dx,
                              float* dgain, float* dbias, int rows, int cols);
void gelu(const float* x, float* out, size_t n);
void gelu_backward(const float* x, const float* dy, float* dx, size_t n);  // dx += dy * gelu'(x)
double sum(const float* x, size_t n);
double sum_squares(const float* x, size_t n);
bool all_finite(const float* x, size_t n);
}  // namespace serial

namespace openmp {
void matmul(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_bt(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_at(const float* a, const float* b, float* c, int m, int k, int n);
void ew_add(const float* a, const float* b, float* out, size_t n);
void ew_mul(const float* a, const float* b, float* out, size_t n);
void ew_scale(const float* a, float s, float* out, size_t n);
void ew_axpy(float* dst, const float* src, float s, size_t n);
void add_bias(const float* x, const float* bias, float* out, int rows, int cols);
void col_sums(const float* x, float* out, int rows, int cols);
void softmax_rows(const float* x, float* out, int rows, int cols);
void log_softmax_rows(const float* x, float* out, int rows, int cols);
void softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols);
void log_softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols);
void layer_norm_rows(const float* x, const float* gain, const float* bias, float* out,
                     float* mean, float* rstd, int rows, int cols, float eps);
void layer_norm_backward_rows(const float* x, const float* gain, const float* mean,
                              const float* rstd, const float* dy, float* dx,
                              float* dgain, float* dbias, int rows, int cols);
void gelu(const float* x, float* out, size_t n);
void gelu_backward(const float* x, const float* dy, float* dx, size_t n);
double sum(const float* x, size_t n);
double sum_squares(const float* x, size_t n);
bool all_finite(const float* x, size_t n);
}  // namespace openmp

// Dispatch through the active backend.
void matmul(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_bt(const float* a, const float* b, float* c, int m, int k, int n);
void matmul_at(const float* a, const float* b, float* c, int m, int k, int n);
void ew_add(const float* a, const float* b, float* out, size_t n);
void ew_mul(const float* a, const float* b, float* out, size_t n);
void ew_scale(const float* a, float s, float* out, size_t n);
void ew_axpy(float* dst, const float* src, float s, size_t n);
void add_bias(const float* x, const float* bias, float* out, int rows, int cols);
void col_sums(const float* x, float* out, int rows, int cols);
void softmax_rows(const float* x, float* out, int rows, int cols);
void log_softmax_rows(const float* x, float* out, int rows, int cols);
void softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols);
void log_softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols);
void layer_norm_rows(const float* x, const float* gain, const float* bias, float* out,
                     float* mean, float* rstd, int rows, int cols, float eps);
void layer_norm_backward_rows(const float* x, const float* gain, const float* mean,
                              const float* rstd, const float* dy, float* dx,
                              float* dgain, float* dbias, int rows, int cols);
void gelu(const float* x, float* out, size_t n);
void gelu_backward(const float* x, const float* dy, float* dx, size_t n);
double sum(const float* x, size_t n);
double sum_squares(const float* x, size_t n);
bool all_finite(const float* x, size_t n);

}  // namespace nb::kernels
