#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "slidepipe/errors.hpp"

namespace slidepipe::nn {

// All tensors are rank-4 (N, C, H, W); vectors and scalars use trailing
// singleton dimensions. Storage is double throughout: the networks here are
// desk-scale and the test suite leans on tight numerical tolerances.
struct TensorShape {
    int n = 1, c = 1, h = 1, w = 1;

    std::int64_t count() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const TensorShape&) const = default;
    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

namespace detail {

struct Node {
    TensorShape shape;
    std::vector<double> value;
    std::vector<double> grad; // allocated on first accumulation
    bool requires_grad = false;
    bool frozen = false; // parameter excluded from gradient accumulation
    std::uint64_t id = 0; // creation order; backward walks ids descending
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
    bool accepts_grad() const { return requires_grad && !frozen; }
};

std::shared_ptr<Node> make_node(const TensorShape& shape);

} // namespace detail

// Disables graph recording in the enclosing scope (inference / frozen-input
// generation). Nestable.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const TensorShape& shape, bool requires_grad = false);
    static Tensor full(const TensorShape& shape, double fill, bool requires_grad = false);
    static Tensor from_vector(const TensorShape& shape, std::vector<double> values,
                              bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const TensorShape& shape() const { return node_->shape; }
    std::int64_t size() const { return node_->shape.count(); }

    std::vector<double>& values() { return node_->value; }
    const std::vector<double>& values() const { return node_->value; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void set_frozen(bool b) { node_->frozen = b; }
    bool frozen() const { return node_->frozen; }

    // gradient of the last backward pass; zeros when never touched
    std::vector<double> grad() const {
        if (node_->grad.size() == node_->value.size()) return node_->grad;
        return std::vector<double>(node_->value.size(), 0.0);
    }
    std::vector<double>& grad_storage() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    double item() const {
        if (size() != 1) throw BadShape("item() on non-scalar tensor " + shape().str());
        return node_->value[0];
    }

    // leaf copy sharing no graph history
    Tensor detach() const;

    // reverse-mode sweep from a scalar
    void backward() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

// ---- graph-building operations ----

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride = 1, int padding = 0, int dilation = 1);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope = 0.2);
Tensor sigmoid(const Tensor& x);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding);
Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);

Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor slice_channels(const Tensor& x, int first, int count);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
// gate (N,C,1,1) or (N,1,H,W) broadcast-multiplied over x (N,C,H,W)
Tensor mul_gate(const Tensor& x, const Tensor& gate);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor log(const Tensor& x);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_per_sample(const Tensor& x); // (N,1,1,1)

// softmax over channels of (N,C,1,1)
Tensor softmax_channels(const Tensor& x);
// mean over batch of -sum_k target_k * log softmax(logits)_k
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets);

// normalization primitives; running stats are plain buffers mutated in
// training mode
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum = 0.1, double eps = 1e-5);
Tensor instance_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps = 1e-5);

} // namespace slidepipe::nn
