#include "nb/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nb::kernels {

namespace {
Backend g_backend =
#ifdef _OPENMP
    Backend::openmp;
#else
    Backend::serial;
#endif
}

Backend backend() { return g_backend; }
void set_backend(Backend b) { g_backend = b; }

bool openmp_compiled() {
#ifdef _OPENMP
    return true;
#else
    return false;
#endif
}

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

#define NB_DISPATCH(fn, ...)                          \
    do {                                              \
        if (g_backend == Backend::openmp)             \
            return openmp::fn(__VA_ARGS__);           \
        return serial::fn(__VA_ARGS__);               \
    } while (0)

void matmul(const float* a, const float* b, float* c, int m, int k, int n) { NB_DISPATCH(matmul, a, b, c, m, k, n); }
void matmul_bt(const float* a, const float* b, float* c, int m, int k, int n) { NB_DISPATCH(matmul_bt, a, b, c, m, k, n); }
void matmul_at(const float* a, const float* b, float* c, int m, int k, int n) { NB_DISPATCH(matmul_at, a, b, c, m, k, n); }
void ew_add(const float* a, const float* b, float* out, size_t n) { NB_DISPATCH(ew_add, a, b, out, n); }
void ew_mul(const float* a, const float* b, float* out, size_t n) { NB_DISPATCH(ew_mul, a, b, out, n); }
void ew_scale(const float* a, float s, float* out, size_t n) { NB_DISPATCH(ew_scale, a, s, out, n); }
void ew_axpy(float* dst, const float* src, float s, size_t n) { NB_DISPATCH(ew_axpy, dst, src, s, n); }
void add_bias(const float* x, const float* bias, float* out, int rows, int cols) {
    NB_DISPATCH(add_bias, x, bias, out, rows, cols);
}
void col_sums(const float* x, float* out, int rows, int cols) { NB_DISPATCH(col_sums, x, out, rows, cols); }
void softmax_rows(const float* x, float* out, int rows, int cols) { NB_DISPATCH(softmax_rows, x, out, rows, cols); }
void log_softmax_rows(const float* x, float* out, int rows, int cols) {
    NB_DISPATCH(log_softmax_rows, x, out, rows, cols);
}
void softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols) {
    NB_DISPATCH(softmax_backward_rows, probs, dy, dx, rows, cols);
}
void log_softmax_backward_rows(const float* probs, const float* dy, float* dx, int rows, int cols) {
    NB_DISPATCH(log_softmax_backward_rows, probs, dy, dx, rows, cols);
}
void layer_norm_rows(const float* x, const float* gain, const float* bias, float* out,
                     float* mean, float* rstd, int rows, int cols, float eps) {
    NB_DISPATCH(layer_norm_rows, x, gain, bias, out, mean, rstd, rows, cols, eps);
}
void layer_norm_backward_rows(const float* x, const float* gain, const float* mean,
                              const float* rstd, const float* dy, float* dx,
                              float* dgain, float* dbias, int rows, int cols) {
    NB_DISPATCH(layer_norm_backward_rows, x, gain, mean, rstd, dy, dx, dgain, dbias, rows, cols);
}
void gelu(const float* x, float* out, size_t n) { NB_DISPATCH(gelu, x, out, n); }
void gelu_backward(const float* x, const float* dy, float* dx, size_t n) { NB_DISPATCH(gelu_backward, x, dy, dx, n); }
double sum(const float* x, size_t n) { NB_DISPATCH(sum, x, n); }
double sum_squares(const float* x, size_t n) { NB_DISPATCH(sum_squares, x, n); }
bool all_finite(const float* x, size_t n) { NB_DISPATCH(all_finite, x, n); }

#undef NB_DISPATCH

}  // namespace nb::kernels
