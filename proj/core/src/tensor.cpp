#include "slidepipe/nn/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace slidepipe::nn {

namespace detail {

namespace {
std::atomic<std::uint64_t> g_next_id{1};
thread_local int g_no_grad_depth = 0;
} // namespace

std::shared_ptr<Node> make_node(const TensorShape& shape) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(static_cast<std::size_t>(shape.count()), 0.0);
    n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return n;
}

} // namespace detail

using detail::Node;

NoGradGuard::NoGradGuard() { ++detail::g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_no_grad_depth; }
bool grad_enabled() { return detail::g_no_grad_depth == 0; }

Tensor Tensor::wrap(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(const TensorShape& shape, bool requires_grad) {
    auto n = detail::make_node(shape);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::full(const TensorShape& shape, double fill, bool requires_grad) {
    Tensor t = zeros(shape, requires_grad);
    std::fill(t.values().begin(), t.values().end(), fill);
    return t;
}

Tensor Tensor::from_vector(const TensorShape& shape, std::vector<double> values,
                           bool requires_grad) {
    if (static_cast<std::int64_t>(values.size()) != shape.count())
        throw BadShape("from_vector: " + std::to_string(values.size()) +
                       " values for shape " + shape.str());
    auto n = detail::make_node(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::scalar(double v) { return from_vector({1, 1, 1, 1}, {v}); }

Tensor Tensor::detach() const {
    auto n = detail::make_node(node_->shape);
    n->value = node_->value;
    return wrap(std::move(n));
}

void Tensor::backward() const {
    if (!node_) throw BadShape("backward on undefined tensor");
    if (size() != 1) throw BadShape("backward requires a scalar, got " + shape().str());
    if (!node_->requires_grad) return;

    // nodes are created in topological order, so descending id is a valid
    // reverse sweep
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
        Node* cur = stack.back();
        stack.pop_back();
        order.push_back(cur);
        for (const auto& p : cur->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });

    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (Node* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

namespace {

// Shared scaffolding for ops: result node wiring plus the decision whether a
// backward closure is recorded at all.
Tensor make_op(const TensorShape& shape, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
    auto n = detail::make_node(shape);
    bool needs_grad = false;
    if (grad_enabled())
        for (const auto& t : inputs)
            if (t.defined() && t.requires_grad()) needs_grad = true;
    if (needs_grad) {
        n->requires_grad = true;
        for (const auto& t : inputs)
            if (t.defined()) n->parents.push_back(t.node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(n));
}

bool wants_grad(const std::shared_ptr<Node>& n) {
    return n && n->accepts_grad();
}

double* grad_of(const std::shared_ptr<Node>& n) {
    n->ensure_grad();
    return n->grad.data();
}

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

void im2col(const double* x, int C, int H, int W, int KH, int KW, int stride,
            int pad, int dil, int OH, int OW, double* col) {
    const std::int64_t L = static_cast<std::int64_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < KH; ++ky) {
            for (int kx = 0; kx < KW; ++kx) {
                double* dst = col + (static_cast<std::int64_t>(c) * KH * KW +
                                     static_cast<std::int64_t>(ky) * KW + kx) * L;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky * dil;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + OW, 0.0);
                        dst += OW;
                        continue;
                    }
                    const double* src_row = x + (static_cast<std::int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < OW; ++ox) {
                        const int ix = ox * stride - pad + kx * dil;
                        *dst++ = (ix >= 0 && ix < W) ? src_row[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, int C, int H, int W, int KH, int KW, int stride,
                int pad, int dil, int OH, int OW, double* x_grad) {
    const std::int64_t L = static_cast<std::int64_t>(OH) * OW;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < KH; ++ky) {
            for (int kx = 0; kx < KW; ++kx) {
                const double* src = col + (static_cast<std::int64_t>(c) * KH * KW +
                                           static_cast<std::int64_t>(ky) * KW + kx) * L;
                for (int oy = 0; oy < OH; ++oy) {
                    const int iy = oy * stride - pad + ky * dil;
                    if (iy >= 0 && iy < H) {
                        double* dst_row = x_grad + (static_cast<std::int64_t>(c) * H + iy) * W;
                        for (int ox = 0; ox < OW; ++ox) {
                            const int ix = ox * stride - pad + kx * dil;
                            if (ix >= 0 && ix < W) dst_row[ix] += src[ox];
                        }
                    }
                    src += OW;
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              int stride, int padding, int dilation) {
    const auto& xs = x.shape();
    const auto& ws = weight.shape(); // (OC, C, KH, KW)
    if (ws.c != xs.c)
        throw BadShape("conv2d channel mismatch: input " + xs.str() + " weight " + ws.str());
    const int KH = ws.h, KW = ws.w, C = xs.c, H = xs.h, W = xs.w, OC = ws.n;
    const int OH = (H + 2 * padding - dilation * (KH - 1) - 1) / stride + 1;
    const int OW = (W + 2 * padding - dilation * (KW - 1) - 1) / stride + 1;
    if (OH < 1 || OW < 1)
        throw BadShape("conv2d output collapses: input " + xs.str() + " kernel " +
                       std::to_string(KH) + " stride " + std::to_string(stride));
    if (bias.defined() && bias.size() != OC)
        throw BadShape("conv2d bias size mismatch");

    const std::int64_t L = static_cast<std::int64_t>(OH) * OW;
    const std::int64_t K = static_cast<std::int64_t>(C) * KH * KW;

    auto x_node = x.node();
    auto w_node = weight.node();
    auto b_node = bias.defined() ? bias.node() : nullptr;

    // accumulation targets are decided when the op is recorded, so freezing a
    // parameter during evaluation holds through a later backward
    const bool need_dx = wants_grad(x_node);
    const bool need_dw = wants_grad(w_node);
    const bool need_db = b_node && wants_grad(b_node);
    Tensor out = make_op(
        {xs.n, OC, OH, OW}, {x, weight, bias},
        [=](Node& self) {
            std::vector<double> col(static_cast<std::size_t>(K * L));
            std::vector<double> dcol;
            if (need_dx) dcol.resize(static_cast<std::size_t>(K * L));
            ConstMapRM Wm(w_node->value.data(), OC, K);
            for (int n = 0; n < self.shape.n; ++n) {
                ConstMapRM dY(self.grad.data() + static_cast<std::int64_t>(n) * OC * L, OC, L);
                if (need_dw || need_dx)
                    im2col(x_node->value.data() + static_cast<std::int64_t>(n) * C * H * W,
                           C, H, W, KH, KW, stride, padding, dilation, OH, OW, col.data());
                if (need_dw) {
                    MapRM dW(grad_of(w_node), OC, K);
                    ConstMapRM colm(col.data(), K, L);
                    dW.noalias() += dY * colm.transpose();
                }
                if (need_db) {
                    double* db = grad_of(b_node);
                    for (int oc = 0; oc < OC; ++oc) db[oc] += dY.row(oc).sum();
                }
                if (need_dx) {
                    MapRM dcolm(dcol.data(), K, L);
                    dcolm.noalias() = Wm.transpose() * dY;
                    col2im_add(dcol.data(), C, H, W, KH, KW, stride, padding, dilation,
                               OH, OW, grad_of(x_node) + static_cast<std::int64_t>(n) * C * H * W);
                }
            }
        });

    // forward
    {
        std::vector<double> col(static_cast<std::size_t>(K * L));
        ConstMapRM Wm(w_node->value.data(), OC, K);
        for (int n = 0; n < xs.n; ++n) {
            im2col(x_node->value.data() + static_cast<std::int64_t>(n) * C * H * W,
                   C, H, W, KH, KW, stride, padding, dilation, OH, OW, col.data());
            ConstMapRM colm(col.data(), K, L);
            MapRM Y(out.values().data() + static_cast<std::int64_t>(n) * OC * L, OC, L);
            Y.noalias() = Wm * colm;
            if (b_node)
                for (int oc = 0; oc < OC; ++oc)
                    Y.row(oc).array() += b_node->value[static_cast<std::size_t>(oc)];
        }
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    const auto& xs = x.shape();
    const auto& ws = weight.shape(); // (F, C, 1, 1)
    if (xs.h != 1 || xs.w != 1 || ws.c != xs.c)
        throw BadShape("linear expects x (N,C,1,1) matching weight " + ws.str());
    const int N = xs.n, C = xs.c, F = ws.n;
    if (bias.defined() && bias.size() != F) throw BadShape("linear bias size mismatch");

    auto x_node = x.node();
    auto w_node = weight.node();
    auto b_node = bias.defined() ? bias.node() : nullptr;

    const bool need_dx = wants_grad(x_node);
    const bool need_dw = wants_grad(w_node);
    const bool need_db = b_node && wants_grad(b_node);
    Tensor out = make_op(
        {N, F, 1, 1}, {x, weight, bias},
        [=](Node& self) {
            ConstMapRM dY(self.grad.data(), N, F);
            ConstMapRM X(x_node->value.data(), N, C);
            ConstMapRM Wm(w_node->value.data(), F, C);
            if (need_dw) {
                MapRM dW(grad_of(w_node), F, C);
                dW.noalias() += dY.transpose() * X;
            }
            if (need_db) {
                double* db = grad_of(b_node);
                for (int f = 0; f < F; ++f) db[f] += dY.col(f).sum();
            }
            if (need_dx) {
                MapRM dX(grad_of(x_node), N, C);
                dX.noalias() += dY * Wm;
            }
        });

    ConstMapRM X(x_node->value.data(), N, C);
    ConstMapRM Wm(w_node->value.data(), F, C);
    MapRM Y(out.values().data(), N, F);
    Y.noalias() = X * Wm.transpose();
    if (b_node)
        for (int f = 0; f < F; ++f)
            Y.col(f).array() += b_node->value[static_cast<std::size_t>(f)];
    return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor pointwise_unary(const Tensor& x, Fwd fwd, Bwd dval) {
    auto x_node = x.node();
    const bool gx = wants_grad(x_node);
    Tensor out = make_op(x.shape(), {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        for (std::size_t i = 0; i < self.value.size(); ++i)
            dx[i] += self.grad[i] * dval(x_node->value[i], self.value[i]);
    });
    for (std::size_t i = 0; i < out.values().size(); ++i)
        out.values()[i] = fwd(x.values()[i]);
    return out;
}

} // namespace

Tensor relu(const Tensor& x) {
    return pointwise_unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double negative_slope) {
    return pointwise_unary(
        x, [negative_slope](double v) { return v > 0.0 ? v : negative_slope * v; },
        [negative_slope](double v, double) { return v > 0.0 ? 1.0 : negative_slope; });
}

Tensor sigmoid(const Tensor& x) {
    return pointwise_unary(
        x,
        [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](double, double s) { return s * (1.0 - s); });
}

Tensor scale(const Tensor& x, double s) {
    return pointwise_unary(
        x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
    return pointwise_unary(
        x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    return pointwise_unary(
        x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor log(const Tensor& x) {
    return pointwise_unary(
        x, [](double v) { return std::log(v); },
        [](double v, double) { return 1.0 / v; });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding) {
    const auto& xs = x.shape();
    const int OH = (xs.h + 2 * padding - kernel) / stride + 1;
    const int OW = (xs.w + 2 * padding - kernel) / stride + 1;
    if (OH < 1 || OW < 1) throw BadShape("max_pool2d output collapses on " + xs.str());

    auto x_node = x.node();
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(xs.n) * xs.c * OH * OW);

    const bool gx = wants_grad(x_node);
    Tensor out = make_op({xs.n, xs.c, OH, OW}, {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            dx[(*argmax)[i]] += self.grad[i];
    });

    std::size_t o = 0;
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const double* plane =
                x.values().data() + (static_cast<std::int64_t>(n) * xs.c + c) * xs.h * xs.w;
            const std::int64_t plane_off = (static_cast<std::int64_t>(n) * xs.c + c) *
                                           static_cast<std::int64_t>(xs.h) * xs.w;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (int ky = 0; ky < kernel; ++ky) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= xs.h) continue;
                        for (int kx = 0; kx < kernel; ++kx) {
                            const int ix = ox * stride - padding + kx;
                            if (ix < 0 || ix >= xs.w) continue;
                            const double v = plane[static_cast<std::int64_t>(iy) * xs.w + ix];
                            if (v > best) {
                                best = v;
                                best_idx = plane_off + static_cast<std::int64_t>(iy) * xs.w + ix;
                            }
                        }
                    }
                    if (best_idx < 0) throw BadShape("max_pool2d window fell entirely in padding");
                    out.values()[o] = best;
                    (*argmax)[o] = best_idx;
                }
        }
    return out;
}

Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w) {
    const auto& xs = x.shape();
    if (out_h < 1 || out_w < 1) throw BadShape("adaptive_avg_pool2d target must be >= 1");
    auto x_node = x.node();

    auto bin = [](int i, int in, int out) {
        const int lo = (i * in) / out;
        const int hi = (i + 1) * in / out + (((i + 1) * in) % out != 0 ? 1 : 0);
        return std::pair<int, int>{lo, std::max(hi, lo + 1)};
    };

    const bool gx = wants_grad(x_node);
    Tensor out = make_op({xs.n, xs.c, out_h, out_w}, {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        std::size_t o = 0;
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c) {
                const std::int64_t plane_off =
                    (static_cast<std::int64_t>(n) * xs.c + c) * static_cast<std::int64_t>(xs.h) * xs.w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const auto [y0, y1] = bin(oy, xs.h, out_h);
                    for (int ox = 0; ox < out_w; ++ox, ++o) {
                        const auto [x0, x1] = bin(ox, xs.w, out_w);
                        const double g =
                            self.grad[o] / (static_cast<double>(y1 - y0) * (x1 - x0));
                        for (int iy = y0; iy < y1; ++iy)
                            for (int ix = x0; ix < x1; ++ix)
                                dx[plane_off + static_cast<std::int64_t>(iy) * xs.w + ix] += g;
                    }
                }
            }
    });

    std::size_t o = 0;
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const double* plane =
                x.values().data() + (static_cast<std::int64_t>(n) * xs.c + c) * xs.h * xs.w;
            for (int oy = 0; oy < out_h; ++oy) {
                const auto [y0, y1] = bin(oy, xs.h, out_h);
                for (int ox = 0; ox < out_w; ++ox, ++o) {
                    const auto [x0, x1] = bin(ox, xs.w, out_w);
                    double sum = 0.0;
                    for (int iy = y0; iy < y1; ++iy)
                        for (int ix = x0; ix < x1; ++ix)
                            sum += plane[static_cast<std::int64_t>(iy) * xs.w + ix];
                    out.values()[o] = sum / (static_cast<double>(y1 - y0) * (x1 - x0));
                }
            }
        }
    return out;
}

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
    const auto& xs = x.shape();
    auto x_node = x.node();

    struct Axis {
        int i0, i1;
        double f;
    };
    auto make_axis = [](int out, int in) {
        std::vector<Axis> axis(static_cast<std::size_t>(out));
        for (int i = 0; i < out; ++i) {
            const double s = (static_cast<double>(i) + 0.5) * in / out - 0.5;
            const double fl = std::floor(s);
            axis[static_cast<std::size_t>(i)] = {
                std::clamp(static_cast<int>(fl), 0, in - 1),
                std::clamp(static_cast<int>(fl) + 1, 0, in - 1), s - fl};
        }
        return axis;
    };
    auto ys = std::make_shared<std::vector<Axis>>(make_axis(out_h, xs.h));
    auto xsx = std::make_shared<std::vector<Axis>>(make_axis(out_w, xs.w));

    const bool gx = wants_grad(x_node);
    Tensor out = make_op({xs.n, xs.c, out_h, out_w}, {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        std::size_t o = 0;
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c) {
                const std::int64_t off =
                    (static_cast<std::int64_t>(n) * xs.c + c) * static_cast<std::int64_t>(xs.h) * xs.w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const auto& ay = (*ys)[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < out_w; ++ox, ++o) {
                        const auto& ax = (*xsx)[static_cast<std::size_t>(ox)];
                        const double g = self.grad[o];
                        dx[off + static_cast<std::int64_t>(ay.i0) * xs.w + ax.i0] +=
                            g * (1 - ay.f) * (1 - ax.f);
                        dx[off + static_cast<std::int64_t>(ay.i0) * xs.w + ax.i1] +=
                            g * (1 - ay.f) * ax.f;
                        dx[off + static_cast<std::int64_t>(ay.i1) * xs.w + ax.i0] +=
                            g * ay.f * (1 - ax.f);
                        dx[off + static_cast<std::int64_t>(ay.i1) * xs.w + ax.i1] +=
                            g * ay.f * ax.f;
                    }
                }
            }
    });

    std::size_t o = 0;
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const double* plane =
                x.values().data() + (static_cast<std::int64_t>(n) * xs.c + c) * xs.h * xs.w;
            for (int oy = 0; oy < out_h; ++oy) {
                const auto& ay = (*ys)[static_cast<std::size_t>(oy)];
                for (int ox = 0; ox < out_w; ++ox, ++o) {
                    const auto& ax = (*xsx)[static_cast<std::size_t>(ox)];
                    const double v0 = (1 - ax.f) * plane[static_cast<std::int64_t>(ay.i0) * xs.w + ax.i0] +
                                      ax.f * plane[static_cast<std::int64_t>(ay.i0) * xs.w + ax.i1];
                    const double v1 = (1 - ax.f) * plane[static_cast<std::int64_t>(ay.i1) * xs.w + ax.i0] +
                                      ax.f * plane[static_cast<std::int64_t>(ay.i1) * xs.w + ax.i1];
                    out.values()[o] = (1 - ay.f) * v0 + ay.f * v1;
                }
            }
        }
    return out;
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw BadShape("concat_channels on empty list");
    const auto& s0 = xs.front().shape();
    int total_c = 0;
    for (const auto& t : xs) {
        const auto& s = t.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
            throw ShapeMismatch("concat_channels spatial/batch mismatch: " + s.str() +
                                " vs " + s0.str());
        total_c += s.c;
    }
    std::vector<std::shared_ptr<Node>> nodes;
    for (const auto& t : xs) nodes.push_back(t.node());
    const int H = s0.h, W = s0.w, N = s0.n;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;

    std::vector<char> source_grads;
    source_grads.reserve(nodes.size());
    for (const auto& src : nodes) source_grads.push_back(wants_grad(src) ? 1 : 0);
    Tensor out = make_op({N, total_c, H, W}, xs, [=](Node& self) {
        for (int n = 0; n < N; ++n) {
            std::int64_t c_off = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const auto& src = nodes[k];
                const int c_in = src->shape.c;
                if (source_grads[k]) {
                    double* dst = grad_of(src) + static_cast<std::int64_t>(n) * c_in * hw;
                    const double* g = self.grad.data() +
                                      (static_cast<std::int64_t>(n) * total_c + c_off) * hw;
                    for (std::int64_t i = 0; i < c_in * hw; ++i) dst[i] += g[i];
                }
                c_off += c_in;
            }
        }
    });

    for (int n = 0; n < N; ++n) {
        std::int64_t c_off = 0;
        for (const auto& t : xs) {
            const int c_in = t.shape().c;
            const double* src = t.values().data() + static_cast<std::int64_t>(n) * c_in * hw;
            double* dst = out.values().data() +
                          (static_cast<std::int64_t>(n) * total_c + c_off) * hw;
            std::copy(src, src + c_in * hw, dst);
            c_off += c_in;
        }
    }
    return out;
}

Tensor slice_channels(const Tensor& x, int first, int count) {
    const auto& xs = x.shape();
    if (first < 0 || count < 1 || first + count > xs.c)
        throw BadShape("slice_channels [" + std::to_string(first) + "," +
                       std::to_string(first + count) + ") on " + xs.str());
    auto x_node = x.node();
    const std::int64_t hw = static_cast<std::int64_t>(xs.h) * xs.w;

    const bool gx = wants_grad(x_node);
    Tensor out = make_op({xs.n, count, xs.h, xs.w}, {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        for (int n = 0; n < xs.n; ++n) {
            const double* g = self.grad.data() + static_cast<std::int64_t>(n) * count * hw;
            double* dst = dx + (static_cast<std::int64_t>(n) * xs.c + first) * hw;
            for (std::int64_t i = 0; i < count * hw; ++i) dst[i] += g[i];
        }
    });

    for (int n = 0; n < xs.n; ++n) {
        const double* src =
            x.values().data() + (static_cast<std::int64_t>(n) * xs.c + first) * hw;
        std::copy(src, src + count * hw,
                  out.values().data() + static_cast<std::int64_t>(n) * count * hw);
    }
    return out;
}

namespace {

template <typename Fwd, typename DA, typename DB>
Tensor pointwise_binary(const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
    if (!(a.shape() == b.shape()))
        throw ShapeMismatch("elementwise op on " + a.shape().str() + " vs " + b.shape().str());
    auto a_node = a.node();
    auto b_node = b.node();
    const bool ga = wants_grad(a_node);
    const bool gb = wants_grad(b_node);
    Tensor out = make_op(a.shape(), {a, b}, [=](Node& self) {
        double* dav = ga ? grad_of(a_node) : nullptr;
        double* dbv = gb ? grad_of(b_node) : nullptr;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double av = a_node->value[i], bv = b_node->value[i];
            if (ga) dav[i] += self.grad[i] * da(av, bv);
            if (gb) dbv[i] += self.grad[i] * db(av, bv);
        }
    });
    for (std::size_t i = 0; i < out.values().size(); ++i)
        out.values()[i] = fwd(a.values()[i], b.values()[i]);
    return out;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return pointwise_binary(
        a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return pointwise_binary(
        a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return pointwise_binary(
        a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return pointwise_binary(
        a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    // ties route to the first argument
    return pointwise_binary(
        a, b, [](double x, double y) { return x >= y ? x : y; },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; },
        [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor mul_gate(const Tensor& x, const Tensor& gate) {
    const auto& xs = x.shape();
    const auto& gs = gate.shape();
    const bool channel_gate = gs.n == xs.n && gs.c == xs.c && gs.h == 1 && gs.w == 1;
    const bool spatial_gate = gs.n == xs.n && gs.c == 1 && gs.h == xs.h && gs.w == xs.w;
    if (!channel_gate && !spatial_gate) {
        if (gs == xs) return mul(x, gate);
        throw ShapeMismatch("mul_gate: gate " + gs.str() + " does not broadcast over " + xs.str());
    }
    auto x_node = x.node();
    auto g_node = gate.node();
    const std::int64_t hw = static_cast<std::int64_t>(xs.h) * xs.w;

    const bool gx = wants_grad(x_node);
    const bool gg = wants_grad(g_node);
    Tensor out = make_op(xs, {x, gate}, [=](Node& self) {
        double* dx = gx ? grad_of(x_node) : nullptr;
        double* dg = gg ? grad_of(g_node) : nullptr;
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * xs.c + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const std::int64_t gi = channel_gate
                                                ? static_cast<std::int64_t>(n) * xs.c + c
                                                : static_cast<std::int64_t>(n) * hw + i;
                    const double g = self.grad[static_cast<std::size_t>(off + i)];
                    if (gx) dx[off + i] += g * g_node->value[static_cast<std::size_t>(gi)];
                    if (gg) dg[gi] += g * x_node->value[static_cast<std::size_t>(off + i)];
                }
            }
    });

    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const std::int64_t off = (static_cast<std::int64_t>(n) * xs.c + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                const std::int64_t gi = channel_gate ? static_cast<std::int64_t>(n) * xs.c + c
                                                     : static_cast<std::int64_t>(n) * hw + i;
                out.values()[static_cast<std::size_t>(off + i)] =
                    x.values()[static_cast<std::size_t>(off + i)] *
                    gate.values()[static_cast<std::size_t>(gi)];
            }
        }
    return out;
}

Tensor sum_all(const Tensor& x) {
    auto x_node = x.node();
    const bool gx = wants_grad(x_node);
    Tensor out = make_op({1, 1, 1, 1}, {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        const double g = self.grad[0];
        for (std::size_t i = 0; i < x_node->value.size(); ++i) dx[i] += g;
    });
    double s = 0.0;
    for (const double v : x.values()) s += v;
    out.values()[0] = s;
    return out;
}

Tensor mean_all(const Tensor& x) {
    const double inv = 1.0 / static_cast<double>(x.size());
    return scale(sum_all(x), inv);
}

Tensor sum_per_sample(const Tensor& x) {
    const auto& xs = x.shape();
    const std::int64_t per = static_cast<std::int64_t>(xs.c) * xs.h * xs.w;
    auto x_node = x.node();
    const bool gx = wants_grad(x_node);
    Tensor out = make_op({xs.n, 1, 1, 1}, {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        for (int n = 0; n < xs.n; ++n) {
            const double g = self.grad[static_cast<std::size_t>(n)];
            double* row = dx + static_cast<std::int64_t>(n) * per;
            for (std::int64_t i = 0; i < per; ++i) row[i] += g;
        }
    });
    for (int n = 0; n < xs.n; ++n) {
        double s = 0.0;
        const double* row = x.values().data() + static_cast<std::int64_t>(n) * per;
        for (std::int64_t i = 0; i < per; ++i) s += row[i];
        out.values()[static_cast<std::size_t>(n)] = s;
    }
    return out;
}

Tensor softmax_channels(const Tensor& x) {
    const auto& xs = x.shape();
    if (xs.h != 1 || xs.w != 1) throw BadShape("softmax_channels expects (N,C,1,1)");
    auto x_node = x.node();
    const bool gx = wants_grad(x_node);
    Tensor out = make_op(xs, {x}, [=](Node& self) {
        if (!gx) return;
        double* dx = grad_of(x_node);
        for (int n = 0; n < xs.n; ++n) {
            const std::size_t off = static_cast<std::size_t>(n) * xs.c;
            double dot = 0.0;
            for (int c = 0; c < xs.c; ++c)
                dot += self.grad[off + c] * self.value[off + c];
            for (int c = 0; c < xs.c; ++c)
                dx[off + c] += self.value[off + c] * (self.grad[off + c] - dot);
        }
    });
    for (int n = 0; n < xs.n; ++n) {
        const std::size_t off = static_cast<std::size_t>(n) * xs.c;
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < xs.c; ++c) m = std::max(m, x.values()[off + c]);
        double z = 0.0;
        for (int c = 0; c < xs.c; ++c) z += std::exp(x.values()[off + c] - m);
        for (int c = 0; c < xs.c; ++c)
            out.values()[off + c] = std::exp(x.values()[off + c] - m) / z;
    }
    return out;
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& targets) {
    const auto& ls = logits.shape();
    if (!(ls == targets.shape()))
        throw ShapeMismatch("soft_cross_entropy shape mismatch");
    if (ls.h != 1 || ls.w != 1) throw BadShape("soft_cross_entropy expects (N,C,1,1)");
    auto z_node = logits.node();
    auto t_node = targets.node();
    const int N = ls.n, C = ls.c;

    const bool gz = wants_grad(z_node);
    Tensor out = make_op({1, 1, 1, 1}, {logits, targets}, [=](Node& self) {
        if (!gz) return;
        double* dz = grad_of(z_node);
        const double g = self.grad[0] / static_cast<double>(N);
        for (int n = 0; n < N; ++n) {
            const std::size_t off = static_cast<std::size_t>(n) * C;
            double m = -std::numeric_limits<double>::infinity();
            for (int c = 0; c < C; ++c) m = std::max(m, z_node->value[off + c]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) z += std::exp(z_node->value[off + c] - m);
            double t_sum = 0.0;
            for (int c = 0; c < C; ++c) t_sum += t_node->value[off + c];
            for (int c = 0; c < C; ++c) {
                const double p = std::exp(z_node->value[off + c] - m) / z;
                dz[off + c] += g * (p * t_sum - t_node->value[off + c]);
            }
        }
    });

    double total = 0.0;
    for (int n = 0; n < N; ++n) {
        const std::size_t off = static_cast<std::size_t>(n) * C;
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < C; ++c) m = std::max(m, logits.values()[off + c]);
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(logits.values()[off + c] - m);
        const double lse = std::log(z) + m;
        for (int c = 0; c < C; ++c)
            total += targets.values()[off + c] * (lse - logits.values()[off + c]);
    }
    out.values()[0] = total / static_cast<double>(N);
    return out;
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training,
                    double momentum, double eps) {
    const auto& xs = x.shape();
    const int C = xs.c;
    if (gamma.size() != C || beta.size() != C || running_mean.size() != C ||
        running_var.size() != C)
        throw BadShape("batch_norm2d parameter size mismatch");

    auto x_node = x.node();
    auto g_node = gamma.node();
    auto b_node = beta.node();
    const std::int64_t hw = static_cast<std::int64_t>(xs.h) * xs.w;
    const std::int64_t m = static_cast<std::int64_t>(xs.n) * hw;

    // per-channel statistics used by this forward pass
    auto mean = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C), 0.0);
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C), 0.0);

    if (training) {
        for (int c = 0; c < C; ++c) {
            double sum = 0.0, sum_sq = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const double* plane =
                    x.values().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum += plane[i];
                    sum_sq += plane[i] * plane[i];
                }
            }
            const double mu = sum / static_cast<double>(m);
            const double var = std::max(0.0, sum_sq / static_cast<double>(m) - mu * mu);
            (*mean)[static_cast<std::size_t>(c)] = mu;
            (*inv_sigma)[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + eps);
            running_mean.values()[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_mean.values()[static_cast<std::size_t>(c)] +
                momentum * mu;
            running_var.values()[static_cast<std::size_t>(c)] =
                (1.0 - momentum) * running_var.values()[static_cast<std::size_t>(c)] +
                momentum * var;
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[static_cast<std::size_t>(c)] = running_mean.values()[static_cast<std::size_t>(c)];
            (*inv_sigma)[static_cast<std::size_t>(c)] =
                1.0 / std::sqrt(running_var.values()[static_cast<std::size_t>(c)] + eps);
        }
    }

    const bool gx = wants_grad(x_node);
    const bool ggm = wants_grad(g_node);
    const bool gbt = wants_grad(b_node);
    Tensor out = make_op(xs, {x, gamma, beta}, [=](Node& self) {
        double* dx = gx ? grad_of(x_node) : nullptr;
        double* dgm = ggm ? grad_of(g_node) : nullptr;
        double* dbt = gbt ? grad_of(b_node) : nullptr;
        for (int c = 0; c < C; ++c) {
            const double mu = (*mean)[static_cast<std::size_t>(c)];
            const double is = (*inv_sigma)[static_cast<std::size_t>(c)];
            const double gam = g_node->value[static_cast<std::size_t>(c)];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double dy = self.grad[static_cast<std::size_t>(off + i)];
                    const double xhat =
                        (x_node->value[static_cast<std::size_t>(off + i)] - mu) * is;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
            }
            if (ggm) dgm[c] += sum_dy_xhat;
            if (gbt) dbt[c] += sum_dy;
            if (gx) {
                if (training) {
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (int n = 0; n < xs.n; ++n) {
                        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const double dy = self.grad[static_cast<std::size_t>(off + i)];
                            const double xhat =
                                (x_node->value[static_cast<std::size_t>(off + i)] - mu) * is;
                            dx[off + i] += gam * is *
                                           (dy - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                        }
                    }
                } else {
                    for (int n = 0; n < xs.n; ++n) {
                        const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i)
                            dx[off + i] += gam * is * self.grad[static_cast<std::size_t>(off + i)];
                    }
                }
            }
        }
    });

    for (int c = 0; c < C; ++c) {
        const double mu = (*mean)[static_cast<std::size_t>(c)];
        const double is = (*inv_sigma)[static_cast<std::size_t>(c)];
        const double gam = gamma.values()[static_cast<std::size_t>(c)];
        const double bet = beta.values()[static_cast<std::size_t>(c)];
        for (int n = 0; n < xs.n; ++n) {
            const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i)
                out.values()[static_cast<std::size_t>(off + i)] =
                    gam * (x.values()[static_cast<std::size_t>(off + i)] - mu) * is + bet;
        }
    }
    return out;
}

Tensor instance_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       double eps) {
    const auto& xs = x.shape();
    const int C = xs.c;
    if (gamma.size() != C || beta.size() != C)
        throw BadShape("instance_norm2d parameter size mismatch");
    auto x_node = x.node();
    auto g_node = gamma.node();
    auto b_node = beta.node();
    const std::int64_t hw = static_cast<std::int64_t>(xs.h) * xs.w;

    auto mean = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(xs.n) * C, 0.0);
    auto inv_sigma = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(xs.n) * C, 0.0);

    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < C; ++c) {
            const double* plane =
                x.values().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            double sum = 0.0, sum_sq = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) {
                sum += plane[i];
                sum_sq += plane[i] * plane[i];
            }
            const double mu = sum / static_cast<double>(hw);
            const double var = std::max(0.0, sum_sq / static_cast<double>(hw) - mu * mu);
            (*mean)[static_cast<std::size_t>(n) * C + c] = mu;
            (*inv_sigma)[static_cast<std::size_t>(n) * C + c] = 1.0 / std::sqrt(var + eps);
        }

    const bool gx = wants_grad(x_node);
    const bool ggm = wants_grad(g_node);
    const bool gbt = wants_grad(b_node);
    Tensor out = make_op(xs, {x, gamma, beta}, [=](Node& self) {
        double* dx = gx ? grad_of(x_node) : nullptr;
        double* dgm = ggm ? grad_of(g_node) : nullptr;
        double* dbt = gbt ? grad_of(b_node) : nullptr;
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t sc = static_cast<std::size_t>(n) * C + c;
                const double mu = (*mean)[sc];
                const double is = (*inv_sigma)[sc];
                const double gam = g_node->value[static_cast<std::size_t>(c)];
                const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const double dy = self.grad[static_cast<std::size_t>(off + i)];
                    const double xhat =
                        (x_node->value[static_cast<std::size_t>(off + i)] - mu) * is;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                }
                if (ggm) dgm[c] += sum_dy_xhat;
                if (gbt) dbt[c] += sum_dy;
                if (gx) {
                    const double inv_m = 1.0 / static_cast<double>(hw);
                    for (std::int64_t i = 0; i < hw; ++i) {
                        const double dy = self.grad[static_cast<std::size_t>(off + i)];
                        const double xhat =
                            (x_node->value[static_cast<std::size_t>(off + i)] - mu) * is;
                        dx[off + i] += gam * is *
                                       (dy - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                    }
                }
            }
    });

    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t sc = static_cast<std::size_t>(n) * C + c;
            const double mu = (*mean)[sc];
            const double is = (*inv_sigma)[sc];
            const double gam = gamma.values()[static_cast<std::size_t>(c)];
            const double bet = beta.values()[static_cast<std::size_t>(c)];
            const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i)
                out.values()[static_cast<std::size_t>(off + i)] =
                    gam * (x.values()[static_cast<std::size_t>(off + i)] - mu) * is + bet;
        }
    return out;
}

} // namespace slidepipe::nn
