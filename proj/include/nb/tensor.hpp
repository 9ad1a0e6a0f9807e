#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nb/errors.hpp"
#include "nb/rng.hpp"

namespace nb {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::vector<float> grad;  // empty until first accumulation
};

// Value handle over a shared dense float32 buffer. Copies share storage;
// tensors are treated as immutable once they enter a graph, except grad
// buffers and optimizer updates between steps.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor randn(Shape shape, RngStream& rng, float stddev, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(impl_->data.size()); }
    int rows() const { return impl_->shape[0]; }
    int cols() const { return impl_->shape[1]; }

    const float* data() const { return impl_->data.data(); }
    float* data() { return impl_->data.data(); }
    const std::vector<float>& vec() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    const float* grad() const { return impl_->grad.data(); }
    float* grad_mutable();  // allocates zeros on first use
    void zero_grad();

    float item() const;  // scalar tensors only

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<TensorImpl> impl);

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Record of executed primitives for one reverse sweep. Exactly one tape may
// be active per thread; ops record onto it when any input requires grad.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();
    static bool recording();  // active tape present and grad mode on

    void record(std::function<void()> backward_fn);
    size_t node_count() const { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1 and propagates to all recorded inputs in
    // reverse topological order. Consumes the tape.
    void backward(const Tensor& root);

    // RAII guard disabling recording (inference / frozen-model passes).
    struct NoGrad {
        NoGrad();
        ~NoGrad();
    };

private:
    std::vector<std::function<void()>> nodes_;
};

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float c);
Tensor add_bias(const Tensor& x, const Tensor& bias);        // (r x c) + (c)
Tensor matmul(const Tensor& a, const Tensor& b);             // (m x k) * (k x n)
Tensor matmul_bt(const Tensor& a, const Tensor& b);          // (m x k) * (n x k)^T
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor slice_cols(const Tensor& a, int begin, int end);
Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x);      // last axis of a 2-D tensor
Tensor log_softmax(const Tensor& x);
Tensor gather_cols(const Tensor& x, const std::vector<int>& ids);  // per-row pick -> (rows)
Tensor sum_all(const Tensor& x);      // -> scalar
Tensor mean_all(const Tensor& x);     // -> scalar
Tensor neg_log_sigmoid(const Tensor& x);  // -log(sigmoid(x)), elementwise

// Fused single-head scaled-dot-product attention. q, k, v are (L x dh);
// when causal, position i attends to positions <= i via an additive -1e9
// mask before the softmax. probs_out, when given, receives the (L x L)
// attention rows.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, bool causal,
                 std::vector<float>* probs_out = nullptr);

}  // namespace ops

// Bias-corrected Adam over a fixed parameter list. step() consumes and
// zeroes the accumulated gradients.
class AdamOptimizer {
public:
    struct State {
        std::vector<std::vector<float>> m;
        std::vector<std::vector<float>> v;
        int64_t step = 0;
    };

    explicit AdamOptimizer(std::vector<Tensor> params, float lr, float beta1 = 0.9f,
                           float beta2 = 0.999f, float eps = 1e-8f);

    void step();
    void set_lr(float lr) { lr_ = lr; }
    float lr() const { return lr_; }

    const State& state() const { return state_; }
    void restore_state(State s);  // throws StateShapeMismatchError on shape drift

private:
    std::vector<Tensor> params_;
    float lr_, beta1_, beta2_, eps_;
    State state_;
};

// L2 norm over the gradients of a parameter list (zeros where absent).
double grad_norm(const std::vector<Tensor>& params);

}  // namespace nb
