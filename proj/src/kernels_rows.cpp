#include "kernels_rows.hpp"

#include <cmath>

namespace nb::kernels::detail {

namespace {
constexpr int kJB = 8;  // output columns per accumulator block
}

// c[i,j] = sum_k a[i,k] * b[k,j]; contributions added in ascending k for
// every output, so the result does not depend on row partitioning.
void matmul_rows(const float* a, const float* b, float* c, int /*m*/, int k, int n, int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
        const float* ar = a + static_cast<size_t>(i) * k;
        float* cr = c + static_cast<size_t>(i) * n;
        int j = 0;
        for (; j + kJB <= n; j += kJB) {
            double acc[kJB] = {0};
            for (int t = 0; t < k; ++t) {
                const double av = ar[t];
                const float* br = b + static_cast<size_t>(t) * n + j;
                for (int u = 0; u < kJB; ++u) acc[u] += av * static_cast<double>(br[u]);
            }
            for (int u = 0; u < kJB; ++u) cr[j + u] = static_cast<float>(acc[u]);
        }
        for (; j < n; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += static_cast<double>(ar[t]) * static_cast<double>(b[static_cast<size_t>(t) * n + j]);
            cr[j] = static_cast<float>(acc);
        }
    }
}

// c[i,j] = sum_k a[i,k] * b[j,k]  (b is n x k)
void matmul_bt_rows(const float* a, const float* b, float* c, int /*m*/, int k, int n, int r0, int r1) {
    constexpr int JB = 4;
    for (int i = r0; i < r1; ++i) {
        const float* ar = a + static_cast<size_t>(i) * k;
        float* cr = c + static_cast<size_t>(i) * n;
        int j = 0;
        for (; j + JB <= n; j += JB) {
            double acc[JB] = {0};
            const float* b0 = b + static_cast<size_t>(j) * k;
            const float* b1 = b0 + k;
            const float* b2 = b1 + k;
            const float* b3 = b2 + k;
            for (int t = 0; t < k; ++t) {
                const double av = ar[t];
                acc[0] += av * static_cast<double>(b0[t]);
                acc[1] += av * static_cast<double>(b1[t]);
                acc[2] += av * static_cast<double>(b2[t]);
                acc[3] += av * static_cast<double>(b3[t]);
            }
            for (int u = 0; u < JB; ++u) cr[j + u] = static_cast<float>(acc[u]);
        }
        for (; j < n; ++j) {
            const float* br = b + static_cast<size_t>(j) * k;
            double acc = 0.0;
            for (int t = 0; t < k; ++t) acc += static_cast<double>(ar[t]) * static_cast<double>(br[t]);
            cr[j] = static_cast<float>(acc);
        }
    }
}

// c[i,j] = sum_t a[t,i] * b[t,j]  (a is k x m); row range over i.
void matmul_at_rows(const float* a, const float* b, float* c, int m, int k, int n, int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
        float* cr = c + static_cast<size_t>(i) * n;
        int j = 0;
        for (; j + kJB <= n; j += kJB) {
            double acc[kJB] = {0};
            for (int t = 0; t < k; ++t) {
                const double av = a[static_cast<size_t>(t) * m + i];
                const float* br = b + static_cast<size_t>(t) * n + j;
                for (int u = 0; u < kJB; ++u) acc[u] += av * static_cast<double>(br[u]);
            }
            for (int u = 0; u < kJB; ++u) cr[j + u] = static_cast<float>(acc[u]);
        }
        for (; j < n; ++j) {
            double acc = 0.0;
            for (int t = 0; t < k; ++t)
                acc += static_cast<double>(a[static_cast<size_t>(t) * m + i]) * static_cast<double>(b[static_cast<size_t>(t) * n + j]);
            cr[j] = static_cast<float>(acc);
        }
    }
}

void ew_add_range(const float* a, const float* b, float* out, size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) out[i] = a[i] + b[i];
}

void ew_mul_range(const float* a, const float* b, float* out, size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) out[i] = a[i] * b[i];
}

void ew_scale_range(const float* a, float s, float* out, size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) out[i] = a[i] * s;
}

void ew_axpy_range(float* dst, const float* src, float s, size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) dst[i] += s * src[i];
}

void add_bias_rows(const float* x, const float* bias, float* out, int cols, int r0, int r1) {
    for (int i = r0; i < r1; ++i) {
        const float* xr = x + static_cast<size_t>(i) * cols;
        float* yr = out + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) yr[j] = xr[j] + bias[j];
    }
}

void col_sums_cols(const float* x, float* out, int rows, int cols, int c0, int c1) {
    for (int j = c0; j < c1; ++j) {
        double acc = 0.0;
        for (int i = 0; i < rows; ++i) acc += static_cast<double>(x[static_cast<size_t>(i) * cols + j]);
        out[j] = static_cast<float>(acc);
    }
}

void softmax_row(const float* x, float* out, int cols) {
    float mx = x[0];
    for (int j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
        const float e = std::exp(x[j] - mx);
        out[j] = e;
        denom += static_cast<double>(e);
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < cols; ++j) out[j] *= inv;
}

void log_softmax_row(const float* x, float* out, int cols) {
    float mx = x[0];
    for (int j = 1; j < cols; ++j) mx = x[j] > mx ? x[j] : mx;
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) denom += std::exp(static_cast<double>(x[j]) - static_cast<double>(mx));
    const float lse = static_cast<float>(std::log(denom)) + mx;
    for (int j = 0; j < cols; ++j) out[j] = x[j] - lse;
}

// dx = p * (dy - <dy, p>)
void softmax_backward_row(const float* probs, const float* dy, float* dx, int cols) {
    double dot = 0.0;
    for (int j = 0; j < cols; ++j) dot += static_cast<double>(dy[j]) * static_cast<double>(probs[j]);
    const float d = static_cast<float>(dot);
    for (int j = 0; j < cols; ++j) dx[j] = probs[j] * (dy[j] - d);
}

// dx = dy - p * sum(dy); probs are softmax(x)
void log_softmax_backward_row(const float* probs, const float* dy, float* dx, int cols) {
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += static_cast<double>(dy[j]);
    const float sf = static_cast<float>(s);
    for (int j = 0; j < cols; ++j) dx[j] = dy[j] - probs[j] * sf;
}

void layer_norm_row(const float* x, const float* gain, const float* bias, float* out,
                    float* mean, float* rstd, int cols, float eps) {
    double m = 0.0;
    for (int j = 0; j < cols; ++j) m += static_cast<double>(x[j]);
    m /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
        const double d = static_cast<double>(x[j]) - m;
        var += d * d;
    }
    var /= cols;
    const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
    *mean = static_cast<float>(m);
    *rstd = static_cast<float>(rs);
    for (int j = 0; j < cols; ++j) {
        const float xhat = static_cast<float>((static_cast<double>(x[j]) - m) * rs);
        out[j] = xhat * gain[j] + bias[j];
    }
}

void layer_norm_backward_dx_row(const float* x, const float* gain, float mean, float rstd,
                                const float* dy, float* dx, int cols) {
    // dxhat = dy * gain; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    double s1 = 0.0, s2 = 0.0;
    for (int j = 0; j < cols; ++j) {
        const double dxhat = static_cast<double>(dy[j]) * static_cast<double>(gain[j]);
        const double xhat = (static_cast<double>(x[j]) - mean) * rstd;
        s1 += dxhat;
        s2 += dxhat * xhat;
    }
    s1 /= cols;
    s2 /= cols;
    for (int j = 0; j < cols; ++j) {
        const double dxhat = static_cast<double>(dy[j]) * static_cast<double>(gain[j]);
        const double xhat = (static_cast<double>(x[j]) - mean) * rstd;
        dx[j] = static_cast<float>(rstd * (dxhat - s1 - xhat * s2));
    }
}

void layer_norm_backward_params_cols(const float* x, const float* mean, const float* rstd,
                                     const float* dy, float* dgain, float* dbias,
                                     int rows, int cols, int c0, int c1) {
    for (int j = c0; j < c1; ++j) {
        double dg = 0.0, db = 0.0;
        for (int i = 0; i < rows; ++i) {
            const size_t off = static_cast<size_t>(i) * cols + j;
            const double xhat = (static_cast<double>(x[off]) - mean[i]) * rstd[i];
            dg += static_cast<double>(dy[off]) * xhat;
            db += static_cast<double>(dy[off]);
        }
        dgain[j] += static_cast<float>(dg);
        dbias[j] += static_cast<float>(db);
    }
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}

// exact erf form: 0.5 x (1 + erf(x / sqrt(2)))
void gelu_range(const float* x, float* out, size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
        const double v = x[i];
        out[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
    }
}

void gelu_backward_range(const float* x, const float* dy, float* dx, size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
        const double v = x[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        dx[i] += static_cast<float>(static_cast<double>(dy[i]) * (cdf + v * pdf));
    }
}

double sum_chunk(const float* x, size_t i0, size_t i1) {
    double acc = 0.0;
    for (size_t i = i0; i < i1; ++i) acc += static_cast<double>(x[i]);
    return acc;
}

double sum_squares_chunk(const float* x, size_t i0, size_t i1) {
    double acc = 0.0;
    for (size_t i = i0; i < i1; ++i) acc += static_cast<double>(x[i]) * static_cast<double>(x[i]);
    return acc;
}

bool all_finite_chunk(const float* x, size_t i0, size_t i1) {
    for (size_t i = i0; i < i1; ++i) {
        if (!std::isfinite(x[i])) return false;
    }
    return true;
}

}  // namespace nb::kernels::detail
