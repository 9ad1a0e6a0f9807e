#include "nb/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <utility>

#include "nb/kernels.hpp"

namespace nb {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local int g_no_grad_depth = 0;

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool rg) {
    for (int d : shape) {
        if (d <= 0) throw ShapeMismatchError("tensor dims must be positive, got " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(static_cast<size_t>(shape_numel(shape)), 0.0f);
    impl->shape = std::move(shape);
    impl->requires_grad = rg;
    return impl;
}

float* ensure_grad(const std::shared_ptr<TensorImpl>& impl) {
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0f);
    return impl->grad.data();
}

void check_finite(const TensorImpl& t, const char* op) {
    if (!kernels::all_finite(t.data.data(), t.data.size()))
        throw NonFiniteError(std::string(op) + ": non-finite output");
}

void require_2d(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeMismatchError(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeMismatchError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return wrap(make_impl(std::move(shape), requires_grad)); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto impl = make_impl(std::move(shape), requires_grad);
    std::fill(impl->data.begin(), impl->data.end(), value);
    return wrap(impl);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw ShapeMismatchError("from_data: " + shape_str(shape) + " does not hold " + std::to_string(data.size()) + " values");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return wrap(impl);
}

Tensor Tensor::scalar(float value, bool requires_grad) { return full({1}, value, requires_grad); }

Tensor Tensor::randn(Shape shape, RngStream& rng, float stddev, bool requires_grad) {
    auto impl = make_impl(std::move(shape), requires_grad);
    for (auto& x : impl->data) x = rng.next_normal() * stddev;
    return wrap(impl);
}

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

float* Tensor::grad_mutable() { return ensure_grad(impl_); }

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (size() != 1) throw NotScalarError("item: tensor has " + std::to_string(size()) + " elements");
    return impl_->data[0];
}

Tape::Tape() {
    if (g_active_tape) throw Error("Tape: another tape is already active on this thread");
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = nullptr; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::recording() { return g_active_tape != nullptr && g_no_grad_depth == 0; }

void Tape::record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& root) {
    if (root.size() != 1) throw NotScalarError("backward: root must be scalar, got " + shape_str(root.shape()));
    if (nodes_.empty()) throw EmptyTapeError("backward: tape is empty");
    ensure_grad(root.impl())[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    nodes_.clear();
}

Tape::NoGrad::NoGrad() { ++g_no_grad_depth; }
Tape::NoGrad::~NoGrad() { --g_no_grad_depth; }

namespace ops {

namespace {

using Impl = std::shared_ptr<TensorImpl>;

bool track(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::recording()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

Tensor finish(Impl out, bool tracked, std::function<void()> bwd, const char* op) {
    check_finite(*out, op);
    out->requires_grad = tracked;
    if (tracked) Tape::active()->record(std::move(bwd));
    return Tensor::wrap(std::move(out));
}

// dst_grad += src, only when the output actually received a gradient
const std::vector<float>* out_grad(const Impl& out) { return out->grad.empty() ? nullptr : &out->grad; }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto out = make_impl(a.shape(), false);
    kernels::ew_add(a.data(), b.data(), out->data.data(), out->data.size());
    const bool tracked = track({&a, &b});
    Impl ai = a.impl(), bi = b.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, bi, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) kernels::ew_axpy(ensure_grad(ai), g->data(), 1.0f, g->size());
            if (bi->requires_grad) kernels::ew_axpy(ensure_grad(bi), g->data(), 1.0f, g->size());
        },
        "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto out = make_impl(a.shape(), false);
    const float* ap = a.data();
    const float* bp = b.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = ap[i] - bp[i];
    const bool tracked = track({&a, &b});
    Impl ai = a.impl(), bi = b.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, bi, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) kernels::ew_axpy(ensure_grad(ai), g->data(), 1.0f, g->size());
            if (bi->requires_grad) kernels::ew_axpy(ensure_grad(bi), g->data(), -1.0f, g->size());
        },
        "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto out = make_impl(a.shape(), false);
    kernels::ew_mul(a.data(), b.data(), out->data.data(), out->data.size());
    const bool tracked = track({&a, &b});
    Impl ai = a.impl(), bi = b.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, bi, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) {
                float* da = ensure_grad(ai);
                for (size_t i = 0; i < g->size(); ++i) da[i] += (*g)[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                float* db = ensure_grad(bi);
                for (size_t i = 0; i < g->size(); ++i) db[i] += (*g)[i] * ai->data[i];
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, float s) {
    auto out = make_impl(a.shape(), false);
    kernels::ew_scale(a.data(), s, out->data.data(), out->data.size());
    const bool tracked = track({&a});
    Impl ai = a.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, oi, s] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) kernels::ew_axpy(ensure_grad(ai), g->data(), s, g->size());
        },
        "scale");
}

Tensor add_scalar(const Tensor& a, float c) {
    auto out = make_impl(a.shape(), false);
    const float* ap = a.data();
    for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = ap[i] + c;
    const bool tracked = track({&a});
    Impl ai = a.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) kernels::ew_axpy(ensure_grad(ai), g->data(), 1.0f, g->size());
        },
        "add_scalar");
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_2d(x, "add_bias");
    if (bias.rank() != 1 || bias.dim(0) != x.cols())
        throw ShapeMismatchError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
    auto out = make_impl(x.shape(), false);
    kernels::add_bias(x.data(), bias.data(), out->data.data(), x.rows(), x.cols());
    const bool tracked = track({&x, &bias});
    Impl xi = x.impl(), bi = bias.impl(), oi = out;
    const int r = x.rows(), c = x.cols();
    return finish(
        out, tracked,
        [xi, bi, oi, r, c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (xi->requires_grad) kernels::ew_axpy(ensure_grad(xi), g->data(), 1.0f, g->size());
            if (bi->requires_grad) {
                std::vector<float> tmp(static_cast<size_t>(c));
                kernels::col_sums(g->data(), tmp.data(), r, c);
                kernels::ew_axpy(ensure_grad(bi), tmp.data(), 1.0f, tmp.size());
            }
        },
        "add_bias");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeMismatchError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    auto out = make_impl({m, n}, false);
    kernels::matmul(a.data(), b.data(), out->data.data(), m, k, n);
    const bool tracked = track({&a, &b});
    Impl ai = a.impl(), bi = b.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, bi, oi, m, k, n] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) {
                std::vector<float> tmp(static_cast<size_t>(m) * k);
                kernels::matmul_bt(g->data(), bi->data.data(), tmp.data(), m, n, k);
                kernels::ew_axpy(ensure_grad(ai), tmp.data(), 1.0f, tmp.size());
            }
            if (bi->requires_grad) {
                std::vector<float> tmp(static_cast<size_t>(k) * n);
                kernels::matmul_at(ai->data.data(), g->data(), tmp.data(), k, m, n);
                kernels::ew_axpy(ensure_grad(bi), tmp.data(), 1.0f, tmp.size());
            }
        },
        "matmul");
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_bt");
    require_2d(b, "matmul_bt");
    if (a.cols() != b.cols())
        throw ShapeMismatchError("matmul_bt: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    auto out = make_impl({m, n}, false);
    kernels::matmul_bt(a.data(), b.data(), out->data.data(), m, k, n);
    const bool tracked = track({&a, &b});
    Impl ai = a.impl(), bi = b.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, bi, oi, m, k, n] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) {
                std::vector<float> tmp(static_cast<size_t>(m) * k);
                kernels::matmul(g->data(), bi->data.data(), tmp.data(), m, n, k);
                kernels::ew_axpy(ensure_grad(ai), tmp.data(), 1.0f, tmp.size());
            }
            if (bi->requires_grad) {
                std::vector<float> tmp(static_cast<size_t>(n) * k);
                kernels::matmul_at(g->data(), ai->data.data(), tmp.data(), n, m, k);
                kernels::ew_axpy(ensure_grad(bi), tmp.data(), 1.0f, tmp.size());
            }
        },
        "matmul_bt");
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const int r = a.rows(), c = a.cols();
    auto out = make_impl({c, r}, false);
    const float* ap = a.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out->data[static_cast<size_t>(j) * r + i] = ap[static_cast<size_t>(i) * c + j];
    const bool tracked = track({&a});
    Impl ai = a.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, oi, r, c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!ai->requires_grad) return;
            float* da = ensure_grad(ai);
            for (int j = 0; j < c; ++j)
                for (int i = 0; i < r; ++i) da[static_cast<size_t>(i) * c + j] += (*g)[static_cast<size_t>(j) * r + i];
        },
        "transpose");
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw ShapeMismatchError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto out = std::make_shared<TensorImpl>();
    out->shape = std::move(shape);
    out->data = a.vec();
    const bool tracked = track({&a});
    Impl ai = a.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (ai->requires_grad) kernels::ew_axpy(ensure_grad(ai), g->data(), 1.0f, g->size());
        },
        "reshape");
}

namespace {

Tensor concat_impl(const std::vector<Tensor>& parts, bool rows, const char* op) {
    if (parts.empty()) throw ShapeMismatchError(std::string(op) + ": no parts");
    for (const Tensor& p : parts) require_2d(p, op);
    const int fixed = rows ? parts[0].cols() : parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        const int f = rows ? p.cols() : p.rows();
        if (f != fixed) throw ShapeMismatchError(std::string(op) + ": mismatched " + (rows ? "cols" : "rows"));
        total += rows ? p.rows() : p.cols();
    }
    const int out_r = rows ? total : fixed;
    const int out_c = rows ? fixed : total;
    auto out = make_impl({out_r, out_c}, false);
    int offset = 0;
    for (const Tensor& p : parts) {
        if (rows) {
            std::memcpy(out->data.data() + static_cast<size_t>(offset) * out_c, p.data(),
                        static_cast<size_t>(p.size()) * sizeof(float));
            offset += p.rows();
        } else {
            for (int i = 0; i < out_r; ++i)
                std::memcpy(out->data.data() + static_cast<size_t>(i) * out_c + offset,
                            p.data() + static_cast<size_t>(i) * p.cols(),
                            static_cast<size_t>(p.cols()) * sizeof(float));
            offset += p.cols();
        }
    }
    bool tracked = false;
    if (Tape::recording())
        for (const Tensor& p : parts) tracked = tracked || p.requires_grad();
    std::vector<Impl> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.impl());
    Impl oi = out;
    return finish(
        out, tracked,
        [impls, oi, rows, out_c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            int offset = 0;
            for (const Impl& pi : impls) {
                const int pr = pi->shape[0], pc = pi->shape[1];
                if (pi->requires_grad) {
                    float* dp = ensure_grad(pi);
                    if (rows) {
                        kernels::ew_axpy(dp, g->data() + static_cast<size_t>(offset) * out_c, 1.0f, pi->data.size());
                    } else {
                        for (int i = 0; i < pr; ++i)
                            for (int j = 0; j < pc; ++j)
                                dp[static_cast<size_t>(i) * pc + j] += (*g)[static_cast<size_t>(i) * out_c + offset + j];
                    }
                }
                offset += rows ? pr : pc;
            }
        },
        op);
}

}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) { return concat_impl(parts, true, "concat_rows"); }
Tensor concat_cols(const std::vector<Tensor>& parts) { return concat_impl(parts, false, "concat_cols"); }

Tensor slice_rows(const Tensor& a, int begin, int end) {
    require_2d(a, "slice_rows");
    if (begin < 0 || end > a.rows() || begin >= end)
        throw ShapeMismatchError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(a.shape()));
    const int c = a.cols();
    auto out = make_impl({end - begin, c}, false);
    std::memcpy(out->data.data(), a.data() + static_cast<size_t>(begin) * c, out->data.size() * sizeof(float));
    const bool tracked = track({&a});
    Impl ai = a.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, oi, begin, c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!ai->requires_grad) return;
            float* da = ensure_grad(ai);
            kernels::ew_axpy(da + static_cast<size_t>(begin) * c, g->data(), 1.0f, g->size());
        },
        "slice_rows");
}

Tensor slice_cols(const Tensor& a, int begin, int end) {
    require_2d(a, "slice_cols");
    if (begin < 0 || end > a.cols() || begin >= end)
        throw ShapeMismatchError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(a.shape()));
    const int r = a.rows(), c = a.cols(), w = end - begin;
    auto out = make_impl({r, w}, false);
    for (int i = 0; i < r; ++i)
        std::memcpy(out->data.data() + static_cast<size_t>(i) * w, a.data() + static_cast<size_t>(i) * c + begin,
                    static_cast<size_t>(w) * sizeof(float));
    const bool tracked = track({&a});
    Impl ai = a.impl(), oi = out;
    return finish(
        out, tracked,
        [ai, oi, begin, r, c, w] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!ai->requires_grad) return;
            float* da = ensure_grad(ai);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j) da[static_cast<size_t>(i) * c + begin + j] += (*g)[static_cast<size_t>(i) * w + j];
        },
        "slice_cols");
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    require_2d(table, "embedding_rows");
    if (ids.empty()) throw ShapeMismatchError("embedding_rows: empty id list");
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v) throw ShapeMismatchError("embedding_rows: id " + std::to_string(id) + " outside table of " + std::to_string(v));
    auto out = make_impl({static_cast<int>(ids.size()), d}, false);
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(out->data.data() + i * d, table.data() + static_cast<size_t>(ids[i]) * d,
                    static_cast<size_t>(d) * sizeof(float));
    const bool tracked = track({&table});
    Impl ti = table.impl(), oi = out;
    return finish(
        out, tracked,
        [ti, oi, ids, d] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!ti->requires_grad) return;
            float* dt = ensure_grad(ti);
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j) dt[static_cast<size_t>(ids[i]) * d + j] += (*g)[i * d + j];
        },
        "embedding_rows");
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    require_2d(x, "layer_norm");
    if (gain.rank() != 1 || gain.dim(0) != x.cols() || bias.rank() != 1 || bias.dim(0) != x.cols())
        throw ShapeMismatchError("layer_norm: gain/bias must be (" + std::to_string(x.cols()) + ")");
    const int r = x.rows(), c = x.cols();
    auto out = make_impl(x.shape(), false);
    auto mean = std::make_shared<std::vector<float>>(static_cast<size_t>(r));
    auto rstd = std::make_shared<std::vector<float>>(static_cast<size_t>(r));
    kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), out->data.data(), mean->data(), rstd->data(), r, c, eps);
    const bool tracked = track({&x, &gain, &bias});
    Impl xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out;
    return finish(
        out, tracked,
        [xi, gi, bi, oi, mean, rstd, r, c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            std::vector<float> dgain_tmp(static_cast<size_t>(c), 0.0f), dbias_tmp(static_cast<size_t>(c), 0.0f);
            std::vector<float> dx_tmp(static_cast<size_t>(r) * c);
            kernels::layer_norm_backward_rows(xi->data.data(), gi->data.data(), mean->data(), rstd->data(), g->data(),
                                              dx_tmp.data(), dgain_tmp.data(), dbias_tmp.data(), r, c);
            if (xi->requires_grad) kernels::ew_axpy(ensure_grad(xi), dx_tmp.data(), 1.0f, dx_tmp.size());
            if (gi->requires_grad) kernels::ew_axpy(ensure_grad(gi), dgain_tmp.data(), 1.0f, dgain_tmp.size());
            if (bi->requires_grad) kernels::ew_axpy(ensure_grad(bi), dbias_tmp.data(), 1.0f, dbias_tmp.size());
        },
        "layer_norm");
}

Tensor gelu(const Tensor& x) {
    auto out = make_impl(x.shape(), false);
    kernels::gelu(x.data(), out->data.data(), out->data.size());
    const bool tracked = track({&x});
    Impl xi = x.impl(), oi = out;
    return finish(
        out, tracked,
        [xi, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (xi->requires_grad) kernels::gelu_backward(xi->data.data(), g->data(), ensure_grad(xi), g->size());
        },
        "gelu");
}

Tensor softmax(const Tensor& x) {
    require_2d(x, "softmax");
    const int r = x.rows(), c = x.cols();
    auto out = make_impl(x.shape(), false);
    kernels::softmax_rows(x.data(), out->data.data(), r, c);
    const bool tracked = track({&x});
    Impl xi = x.impl(), oi = out;
    return finish(
        out, tracked,
        [xi, oi, r, c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!xi->requires_grad) return;
            std::vector<float> dx(static_cast<size_t>(r) * c);
            kernels::softmax_backward_rows(oi->data.data(), g->data(), dx.data(), r, c);
            kernels::ew_axpy(ensure_grad(xi), dx.data(), 1.0f, dx.size());
        },
        "softmax");
}

Tensor log_softmax(const Tensor& x) {
    require_2d(x, "log_softmax");
    const int r = x.rows(), c = x.cols();
    auto out = make_impl(x.shape(), false);
    kernels::log_softmax_rows(x.data(), out->data.data(), r, c);
    const bool tracked = track({&x});
    Impl xi = x.impl(), oi = out;
    std::shared_ptr<std::vector<float>> probs;
    if (tracked) {
        probs = std::make_shared<std::vector<float>>(out->data.size());
        for (size_t i = 0; i < out->data.size(); ++i) (*probs)[i] = std::exp(out->data[i]);
    }
    return finish(
        out, tracked,
        [xi, oi, probs, r, c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!xi->requires_grad) return;
            std::vector<float> dx(static_cast<size_t>(r) * c);
            kernels::log_softmax_backward_rows(probs->data(), g->data(), dx.data(), r, c);
            kernels::ew_axpy(ensure_grad(xi), dx.data(), 1.0f, dx.size());
        },
        "log_softmax");
}

Tensor gather_cols(const Tensor& x, const std::vector<int>& ids) {
    require_2d(x, "gather_cols");
    if (static_cast<int>(ids.size()) != x.rows())
        throw ShapeMismatchError("gather_cols: need one index per row");
    const int c = x.cols();
    for (int id : ids)
        if (id < 0 || id >= c) throw ShapeMismatchError("gather_cols: column " + std::to_string(id) + " outside " + std::to_string(c));
    auto out = make_impl({static_cast<int>(ids.size())}, false);
    for (size_t i = 0; i < ids.size(); ++i) out->data[i] = x.data()[i * c + static_cast<size_t>(ids[i])];
    const bool tracked = track({&x});
    Impl xi = x.impl(), oi = out;
    return finish(
        out, tracked,
        [xi, oi, ids, c] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!xi->requires_grad) return;
            float* dx = ensure_grad(xi);
            for (size_t i = 0; i < ids.size(); ++i) dx[i * c + static_cast<size_t>(ids[i])] += (*g)[i];
        },
        "gather_cols");
}

Tensor sum_all(const Tensor& x) {
    auto out = make_impl({1}, false);
    out->data[0] = static_cast<float>(kernels::sum(x.data(), static_cast<size_t>(x.size())));
    const bool tracked = track({&x});
    Impl xi = x.impl(), oi = out;
    return finish(
        out, tracked,
        [xi, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!xi->requires_grad) return;
            float* dx = ensure_grad(xi);
            const float gv = (*g)[0];
            for (size_t i = 0; i < xi->data.size(); ++i) dx[i] += gv;
        },
        "sum_all");
}

Tensor mean_all(const Tensor& x) { return scale(sum_all(x), 1.0f / static_cast<float>(x.size())); }

Tensor neg_log_sigmoid(const Tensor& x) {
    auto out = make_impl(x.shape(), false);
    const float* xp = x.data();
    for (size_t i = 0; i < out->data.size(); ++i) {
        const double v = xp[i];
        // -log(sigmoid(v)) = softplus(-v), stable in both tails
        out->data[i] = static_cast<float>(v >= 0.0 ? std::log1p(std::exp(-v)) : -v + std::log1p(std::exp(v)));
    }
    const bool tracked = track({&x});
    Impl xi = x.impl(), oi = out;
    return finish(
        out, tracked,
        [xi, oi] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (!xi->requires_grad) return;
            float* dx = ensure_grad(xi);
            for (size_t i = 0; i < g->size(); ++i) {
                const double v = xi->data[i];
                const double sig = 1.0 / (1.0 + std::exp(-v));
                dx[i] += (*g)[i] * static_cast<float>(sig - 1.0);
            }
        },
        "neg_log_sigmoid");
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal, std::vector<float>* probs_out) {
    require_2d(q, "attention");
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const int len = q.rows(), dh = q.cols();
    const float sc = 1.0f / std::sqrt(static_cast<float>(dh));

    auto scores = std::make_shared<std::vector<float>>(static_cast<size_t>(len) * len);
    kernels::matmul_bt(q.data(), k.data(), scores->data(), len, dh, len);
    for (int i = 0; i < len; ++i) {
        float* row = scores->data() + static_cast<size_t>(i) * len;
        for (int j = 0; j < len; ++j) {
            row[j] *= sc;
            if (causal && j > i) row[j] += -1e9f;
        }
    }
    auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(len) * len);
    kernels::softmax_rows(scores->data(), probs->data(), len, len);
    if (probs_out) *probs_out = *probs;

    auto out = make_impl({len, dh}, false);
    kernels::matmul(probs->data(), v.data(), out->data.data(), len, len, dh);

    const bool tracked = track({&q, &k, &v});
    Impl qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out;
    return finish(
        out, tracked,
        [qi, ki, vi, oi, probs, len, dh, sc] {
            const auto* g = out_grad(oi);
            if (!g) return;
            if (vi->requires_grad) {
                std::vector<float> dv(static_cast<size_t>(len) * dh);
                kernels::matmul_at(probs->data(), g->data(), dv.data(), len, len, dh);
                kernels::ew_axpy(ensure_grad(vi), dv.data(), 1.0f, dv.size());
            }
            if (qi->requires_grad || ki->requires_grad) {
                std::vector<float> dp(static_cast<size_t>(len) * len);
                kernels::matmul_bt(g->data(), vi->data.data(), dp.data(), len, dh, len);
                std::vector<float> ds(static_cast<size_t>(len) * len);
                kernels::softmax_backward_rows(probs->data(), dp.data(), ds.data(), len, len);
                if (qi->requires_grad) {
                    std::vector<float> dq(static_cast<size_t>(len) * dh);
                    kernels::matmul(ds.data(), ki->data.data(), dq.data(), len, len, dh);
                    kernels::ew_axpy(ensure_grad(qi), dq.data(), sc, dq.size());
                }
                if (ki->requires_grad) {
                    std::vector<float> dk(static_cast<size_t>(len) * dh);
                    kernels::matmul_at(ds.data(), qi->data.data(), dk.data(), len, len, dh);
                    kernels::ew_axpy(ensure_grad(ki), dk.data(), sc, dk.size());
                }
            }
        },
        "attention");
}

}  // namespace ops

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    state_.m.reserve(params_.size());
    state_.v.reserve(params_.size());
    for (const Tensor& p : params_) {
        state_.m.emplace_back(static_cast<size_t>(p.size()), 0.0f);
        state_.v.emplace_back(static_cast<size_t>(p.size()), 0.0f);
    }
}

void AdamOptimizer::step() {
    ++state_.step;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(state_.step));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        auto& m = state_.m[pi];
        auto& v = state_.v[pi];
        if (m.size() != static_cast<size_t>(p.size()))
            throw StateShapeMismatchError("adam: state size " + std::to_string(m.size()) + " vs param " + std::to_string(p.size()));
        float* pd = p.data();
        const bool has_g = p.has_grad();
        const float* g = has_g ? p.grad() : nullptr;
        for (size_t i = 0; i < m.size(); ++i) {
            const double gi = has_g ? static_cast<double>(g[i]) : 0.0;
            const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
            const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            pd[i] = static_cast<float>(static_cast<double>(pd[i]) - static_cast<double>(lr_) * mhat / (std::sqrt(vhat) + static_cast<double>(eps_)));
        }
        p.zero_grad();
    }
}

void AdamOptimizer::restore_state(State s) {
    if (s.m.size() != params_.size() || s.v.size() != params_.size())
        throw StateShapeMismatchError("adam: state has wrong parameter count");
    for (size_t i = 0; i < params_.size(); ++i) {
        if (s.m[i].size() != static_cast<size_t>(params_[i].size()) || s.v[i].size() != static_cast<size_t>(params_[i].size()))
            throw StateShapeMismatchError("adam: state shape mismatch at parameter " + std::to_string(i));
    }
    state_ = std::move(s);
}

double grad_norm(const std::vector<Tensor>& params) {
    double acc = 0.0;
    for (const Tensor& p : params) {
        if (p.has_grad()) acc += kernels::sum_squares(p.grad(), static_cast<size_t>(p.size()));
    }
    return std::sqrt(acc);
}

}  // namespace nb
