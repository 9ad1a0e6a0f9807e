#pragma once

#include <cstddef>

// Row/chunk workers shared by the serial and OpenMP drivers. Each worker
// covers a half-open row (or chunk) range and owns its outputs exclusively,
// so the drivers only differ in how ranges are handed out.
namespace nb::kernels::detail {

constexpr size_t kChunk = 4096;  // fixed reduction chunk, independent of thread count

void matmul_rows(const float* a, const float* b, float* c, int m, int k, int n, int r0, int r1);
void matmul_bt_rows(const float* a, const float* b, float* c, int m, int k, int n, int r0, int r1);
void matmul_at_rows(const float* a, const float* b, float* c, int m, int k, int n, int r0, int r1);
void ew_add_range(const float* a, const float* b, float* out, size_t i0, size_t i1);
void ew_mul_range(const float* a, const float* b, float* out, size_t i0, size_t i1);
void ew_scale_range(const float* a, float s, float* out, size_t i0, size_t i1);
void ew_axpy_range(float* dst, const float* src, float s, size_t i0, size_t i1);
void add_bias_rows(const float* x, const float* bias, float* out, int cols, int r0, int r1);
void col_sums_cols(const float* x, float* out, int rows, int cols, int c0, int c1);
void softmax_row(const float* x, float* out, int cols);
void log_softmax_row(const float* x, float* out, int cols);
void softmax_backward_row(const float* probs, const float* dy, float* dx, int cols);
void log_softmax_backward_row(const float* probs, const float* dy, float* dx, int cols);
void layer_norm_row(const float* x, const float* gain, const float* bias, float* out,
                    float* mean, float* rstd, int cols, float eps);
void layer_norm_backward_dx_row(const float* x, const float* gain, float mean, float rstd,
                                const float* dy, float* dx, int cols);
void layer_norm_backward_params_cols(const float* x, const float* mean, const float* rstd,
                                     const float* dy, float* dgain, float* dbias,
                                     int rows, int cols, int c0, int c1);
void gelu_range(const float* x, float* out, size_t i0, size_t i1);
void gelu_backward_range(const float* x, const float* dy, float* dx, size_t i0, size_t i1);
double sum_chunk(const float* x, size_t i0, size_t i1);
double sum_squares_chunk(const float* x, size_t i0, size_t i1);
bool all_finite_chunk(const float* x, size_t i0, size_t i1);

}  // namespace nb::kernels::detail
