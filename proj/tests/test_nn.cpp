#include <doctest.h>

#include <cmath>

#include "slidepipe/nn/layers.hpp"
#include "slidepipe/nn/optim.hpp"
#include "slidepipe/nn/tensor.hpp"
#include "test_support.hpp"

using namespace slidepipe;
using namespace slidepipe::nn;
using testsup::max_grad_rel_error;
using testsup::random_tensor;

namespace {

// direct convolution oracle kept deliberately naive
std::vector<double> conv_reference(const Tensor& x, const Tensor& w, const Tensor& b,
                                   int stride, int pad, int dil) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    const int OH = (xs.h + 2 * pad - dil * (ws.h - 1) - 1) / stride + 1;
    const int OW = (xs.w + 2 * pad - dil * (ws.w - 1) - 1) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(xs.n) * ws.n * OH * OW, 0.0);
    auto xv = [&](int n, int c, int y, int xx) {
        if (y < 0 || y >= xs.h || xx < 0 || xx >= xs.w) return 0.0;
        return x.values()[((static_cast<std::size_t>(n) * xs.c + c) * xs.h + y) * xs.w + xx];
    };
    std::size_t o = 0;
    for (int n = 0; n < xs.n; ++n)
        for (int oc = 0; oc < ws.n; ++oc)
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox, ++o) {
                    double acc = b.defined() ? b.values()[static_cast<std::size_t>(oc)] : 0.0;
                    for (int c = 0; c < xs.c; ++c)
                        for (int ky = 0; ky < ws.h; ++ky)
                            for (int kx = 0; kx < ws.w; ++kx)
                                acc += w.values()[((static_cast<std::size_t>(oc) * xs.c + c) * ws.h + ky) * ws.w + kx] *
                                       xv(n, c, oy * stride - pad + ky * dil,
                                          ox * stride - pad + kx * dil);
                    out[o] = acc;
                }
    return out;
}

} // namespace

TEST_SUITE_BEGIN("nn");

TEST_CASE("conv2d forward matches direct convolution") {
    Rng rng(7);
    struct Case {
        int stride, pad, dil;
    };
    for (const auto& cs : {Case{1, 1, 1}, Case{2, 1, 1}, Case{1, 2, 2}, Case{2, 3, 1}}) {
        Tensor x = random_tensor({2, 3, 9, 8}, rng);
        Tensor w = random_tensor({4, 3, 3, 3}, rng);
        Tensor b = random_tensor({1, 4, 1, 1}, rng);
        Tensor y = conv2d(x, w, b, cs.stride, cs.pad, cs.dil);
        const auto ref = conv_reference(x, w, b, cs.stride, cs.pad, cs.dil);
        REQUIRE(y.values().size() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(11);
    Tensor x = random_tensor({2, 2, 6, 6}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng);
    Tensor b = random_tensor({1, 3, 1, 1}, rng);
    auto loss = [&] { return mean_all(mul(conv2d(x, w, b, 2, 1, 1), conv2d(x, w, b, 2, 1, 1))); };
    CHECK(max_grad_rel_error(loss, x) < 1e-7);
    CHECK(max_grad_rel_error(loss, w) < 1e-7);
    CHECK(max_grad_rel_error(loss, b) < 1e-7);

    // dilated path
    auto loss_dil = [&] { return sum_all(conv2d(x, w, b, 1, 2, 2)); };
    CHECK(max_grad_rel_error(loss_dil, x) < 1e-7);
    CHECK(max_grad_rel_error(loss_dil, w) < 1e-7);
}

TEST_CASE("linear gradients") {
    Rng rng(3);
    Tensor x = random_tensor({4, 5, 1, 1}, rng);
    Tensor w = random_tensor({3, 5, 1, 1}, rng);
    Tensor b = random_tensor({1, 3, 1, 1}, rng);
    auto loss = [&] { return mean_all(mul(linear(x, w, b), linear(x, w, b))); };
    CHECK(max_grad_rel_error(loss, x) < 1e-7);
    CHECK(max_grad_rel_error(loss, w) < 1e-7);
    CHECK(max_grad_rel_error(loss, b) < 1e-7);
}

TEST_CASE("pointwise activations and algebra") {
    Rng rng(5);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor y = random_tensor({2, 3, 4, 4}, rng);
    CHECK(max_grad_rel_error([&] { return sum_all(sigmoid(x)); }, x) < 1e-7);
    CHECK(max_grad_rel_error([&] { return sum_all(leaky_relu(x, 0.2)); }, x) < 1e-6);
    CHECK(max_grad_rel_error([&] { return sum_all(mul(x, y)); }, y) < 1e-7);
    CHECK(max_grad_rel_error([&] { return sum_all(div(x, add_scalar(mul(y, y), 1.0))); }, y) < 1e-7);
    CHECK(max_grad_rel_error([&] { return sum_all(maximum(x, y)); }, x) < 1e-6);
    CHECK(max_grad_rel_error(
              [&] { return sum_all(log(add_scalar(clamp(x, -0.5, 0.5), 2.0))); }, x) < 1e-6);
}

TEST_CASE("relu gradient away from the kink") {
    Rng rng(6);
    Tensor x = random_tensor({1, 2, 3, 3}, rng);
    for (auto& v : x.values())
        if (std::abs(v) < 0.05) v += 0.2; // keep clear of the nondifferentiable point
    CHECK(max_grad_rel_error([&] { return sum_all(relu(x)); }, x) < 1e-7);
}

TEST_CASE("pooling") {
    Rng rng(9);
    Tensor x = random_tensor({2, 2, 7, 7}, rng);
    CHECK(max_grad_rel_error([&] { return sum_all(max_pool2d(x, 3, 2, 1)); }, x, 1e-6) < 1e-5);
    CHECK(max_grad_rel_error([&] { return sum_all(mul(adaptive_avg_pool2d(x, 3, 3),
                                                      adaptive_avg_pool2d(x, 3, 3))); },
                             x) < 1e-7);

    // adaptive pooling of a constant plane is constant for any target size
    Tensor c = Tensor::full({1, 1, 5, 7}, 3.25);
    for (int s : {1, 2, 3, 6}) {
        Tensor p = adaptive_avg_pool2d(c, s, s);
        for (const double v : p.values()) CHECK(v == doctest::Approx(3.25));
    }
}

TEST_CASE("bilinear upsampling preserves constants and is differentiable") {
    Rng rng(13);
    Tensor c = Tensor::full({1, 2, 3, 3}, -1.5);
    Tensor up = upsample_bilinear(c, 12, 9);
    for (const double v : up.values()) CHECK(v == doctest::Approx(-1.5));

    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    CHECK(max_grad_rel_error([&] { return sum_all(mul(upsample_bilinear(x, 7, 9),
                                                      upsample_bilinear(x, 7, 9))); },
                             x) < 1e-7);
}

TEST_CASE("concat and slice round-trip with gradients") {
    Rng rng(17);
    Tensor a = random_tensor({2, 3, 4, 4}, rng);
    Tensor b = random_tensor({2, 2, 4, 4}, rng);
    Tensor cat = concat_channels({a, b});
    CHECK(cat.shape() == TensorShape{2, 5, 4, 4});
    Tensor back = slice_channels(cat, 0, 3);
    for (std::size_t i = 0; i < back.values().size(); ++i)
        CHECK(back.values()[i] == a.values()[i]);

    CHECK(max_grad_rel_error(
              [&] {
                  Tensor c = concat_channels({a, b});
                  return sum_all(mul(slice_channels(c, 1, 3), slice_channels(c, 1, 3)));
              },
              a) < 1e-7);
    CHECK(max_grad_rel_error(
              [&] { return sum_all(mul(concat_channels({a, b}), concat_channels({a, b}))); },
              b) < 1e-7);
}

TEST_CASE("gated multiplication broadcasts both ways") {
    Rng rng(19);
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor cgate = random_tensor({2, 3, 1, 1}, rng, true, 0.1, 0.9);
    Tensor sgate = random_tensor({2, 1, 4, 4}, rng, true, 0.1, 0.9);
    CHECK(max_grad_rel_error([&] { return sum_all(mul_gate(x, cgate)); }, x) < 1e-7);
    CHECK(max_grad_rel_error([&] { return sum_all(mul_gate(x, cgate)); }, cgate) < 1e-7);
    CHECK(max_grad_rel_error([&] { return sum_all(mul_gate(x, sgate)); }, sgate) < 1e-7);

    // gate of ones is the identity
    Tensor ones = Tensor::full({2, 3, 1, 1}, 1.0);
    Tensor gated = mul_gate(x, ones);
    for (std::size_t i = 0; i < x.values().size(); ++i)
        CHECK(gated.values()[i] == x.values()[i]);
}

TEST_CASE("reductions") {
    Rng rng(23);
    Tensor x = random_tensor({3, 2, 2, 2}, rng);
    CHECK(max_grad_rel_error([&] { return mean_all(mul(x, x)); }, x) < 1e-7);
    Tensor per = sum_per_sample(x);
    CHECK(per.shape() == TensorShape{3, 1, 1, 1});
    double expect = 0.0;
    for (int i = 0; i < 8; ++i) expect += x.values()[static_cast<std::size_t>(i)];
    CHECK(per.values()[0] == doctest::Approx(expect));
    CHECK(max_grad_rel_error([&] { return sum_all(mul(sum_per_sample(x), sum_per_sample(x))); },
                             x) < 1e-7);
}

TEST_CASE("softmax and soft-target cross entropy") {
    Rng rng(29);
    Tensor z = random_tensor({4, 2, 1, 1}, rng, true, -2.0, 2.0);
    Tensor sm = softmax_channels(z);
    for (int n = 0; n < 4; ++n)
        CHECK(sm.values()[static_cast<std::size_t>(2 * n)] +
                  sm.values()[static_cast<std::size_t>(2 * n + 1)] ==
              doctest::Approx(1.0));

    Tensor t = Tensor::zeros({4, 2, 1, 1});
    Rng trng(31);
    for (int n = 0; n < 4; ++n) {
        const double a = trng.uniform(0.05, 0.95);
        t.values()[static_cast<std::size_t>(2 * n)] = a;
        t.values()[static_cast<std::size_t>(2 * n + 1)] = 1.0 - a;
    }
    CHECK(max_grad_rel_error([&] { return soft_cross_entropy(z, t); }, z) < 1e-7);
    CHECK(max_grad_rel_error([&] { return sum_all(mul(softmax_channels(z), softmax_channels(z))); },
                             z) < 1e-7);
}

TEST_CASE("batch norm: training statistics, eval pass-through, gradients") {
    Rng rng(37);
    Tensor x = random_tensor({3, 2, 4, 4}, rng, true, -2.0, 2.0);
    Tensor gamma = random_tensor({1, 2, 1, 1}, rng, true, 0.5, 1.5);
    Tensor beta = random_tensor({1, 2, 1, 1}, rng, true, -0.5, 0.5);

    SUBCASE("training mode output is standardized") {
        Tensor rm = Tensor::zeros({1, 2, 1, 1});
        Tensor rv = Tensor::full({1, 2, 1, 1}, 1.0);
        Tensor g1 = Tensor::full({1, 2, 1, 1}, 1.0);
        Tensor b0 = Tensor::zeros({1, 2, 1, 1});
        Tensor y = batch_norm2d(x, g1, b0, rm, rv, true);
        for (int c = 0; c < 2; ++c) {
            double sum = 0.0, sum_sq = 0.0;
            int cnt = 0;
            for (int n = 0; n < 3; ++n)
                for (int i = 0; i < 16; ++i) {
                    const double v = y.values()[(static_cast<std::size_t>(n) * 2 + c) * 16 + i];
                    sum += v;
                    sum_sq += v * v;
                    ++cnt;
                }
            CHECK(sum / cnt == doctest::Approx(0.0).epsilon(1e-9));
            CHECK(sum_sq / cnt == doctest::Approx(1.0).epsilon(1e-3)); // eps shrinks variance slightly
        }
    }

    SUBCASE("gradients in training mode") {
        Tensor rm = Tensor::zeros({1, 2, 1, 1});
        Tensor rv = Tensor::full({1, 2, 1, 1}, 1.0);
        auto loss = [&] {
            Tensor m = Tensor::zeros({1, 2, 1, 1});
            Tensor v = Tensor::full({1, 2, 1, 1}, 1.0);
            Tensor y = batch_norm2d(x, gamma, beta, m, v, true);
            return sum_all(mul(y, y));
        };
        CHECK(max_grad_rel_error(loss, x, 1e-5) < 1e-6);
        CHECK(max_grad_rel_error(loss, gamma) < 1e-6);
        CHECK(max_grad_rel_error(loss, beta) < 1e-6);
    }

    SUBCASE("eval mode uses running statistics and passes gradients") {
        Tensor rm = random_tensor({1, 2, 1, 1}, rng, false, -0.2, 0.2);
        Tensor rv = random_tensor({1, 2, 1, 1}, rng, false, 0.5, 1.5);
        auto loss = [&] {
            Tensor y = batch_norm2d(x, gamma, beta, rm, rv, false);
            return sum_all(mul(y, y));
        };
        CHECK(max_grad_rel_error(loss, x) < 1e-7);
        // duplicated rows give duplicated outputs in eval mode
        Tensor x2 = Tensor::zeros({2, 2, 4, 4});
        for (int n = 0; n < 2; ++n)
            for (int i = 0; i < 32; ++i)
                x2.values()[static_cast<std::size_t>(n) * 32 + i] = x.values()[static_cast<std::size_t>(i)];
        Tensor y2 = batch_norm2d(x2, gamma, beta, rm, rv, false);
        for (int i = 0; i < 32; ++i)
            CHECK(y2.values()[static_cast<std::size_t>(i)] ==
                  doctest::Approx(y2.values()[static_cast<std::size_t>(32 + i)]));
    }
}

TEST_CASE("instance norm normalizes per sample and is differentiable") {
    Rng rng(41);
    Tensor x = random_tensor({2, 2, 3, 3}, rng, true, -2.0, 2.0);
    Tensor gamma = random_tensor({1, 2, 1, 1}, rng, true, 0.5, 1.5);
    Tensor beta = random_tensor({1, 2, 1, 1}, rng, true, -0.5, 0.5);
    auto loss = [&] { return sum_all(mul(instance_norm2d(x, gamma, beta),
                                         instance_norm2d(x, gamma, beta))); };
    CHECK(max_grad_rel_error(loss, x, 1e-5) < 1e-6);
    CHECK(max_grad_rel_error(loss, gamma) < 1e-6);
    CHECK(max_grad_rel_error(loss, beta) < 1e-6);

    // identical duplicated rows give identical outputs (per-sample statistics)
    Tensor x2 = Tensor::zeros({2, 2, 3, 3});
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 18; ++i)
            x2.values()[static_cast<std::size_t>(n) * 18 + i] = x.values()[static_cast<std::size_t>(i)];
    Tensor y = instance_norm2d(x2, gamma, beta);
    for (int i = 0; i < 18; ++i)
        CHECK(y.values()[static_cast<std::size_t>(i)] ==
              doctest::Approx(y.values()[static_cast<std::size_t>(18 + i)]));
}

TEST_CASE("detach cuts the graph; frozen parameters receive no gradient") {
    Rng rng(43);
    Tensor x = random_tensor({1, 2, 2, 2}, rng, true);
    Tensor w = random_tensor({2, 2, 1, 1}, rng, true);

    SUBCASE("detach") {
        Tensor d = conv2d(x, w, Tensor{}, 1, 0, 1).detach();
        CHECK_FALSE(d.requires_grad());
        sum_all(mul(d, d)).backward(); // no-op: nothing requires grad
        CHECK(x.grad() == std::vector<double>(8, 0.0));
    }

    SUBCASE("frozen") {
        w.set_frozen(true);
        Tensor y = conv2d(x, w, Tensor{}, 1, 0, 1);
        sum_all(mul(y, y)).backward();
        CHECK(w.grad() == std::vector<double>(4, 0.0));
        bool x_touched = false;
        for (const double g : x.grad()) x_touched |= g != 0.0;
        CHECK(x_touched); // gradient still flows through the frozen weight
    }
}

TEST_CASE("NoGradGuard skips graph recording") {
    Rng rng(47);
    Tensor x = random_tensor({1, 1, 3, 3}, rng, true);
    {
        NoGradGuard guard;
        Tensor y = sum_all(mul(x, x));
        CHECK_FALSE(y.requires_grad());
    }
    Tensor y = sum_all(mul(x, x));
    CHECK(y.requires_grad());
}

TEST_CASE("optimizers reduce a quadratic deterministically") {
    auto run = [](bool adam) {
        Tensor p = Tensor::from_vector({1, 4, 1, 1}, {1.0, -2.0, 3.0, -4.0}, true);
        Sgd sgd({p}, 0.05, 0.9, 0.0);
        Adam ad({p}, 0.1);
        for (int it = 0; it < 250; ++it) {
            p.zero_grad();
            Tensor loss = sum_all(mul(p, p));
            loss.backward();
            if (adam)
                ad.step();
            else
                sgd.step();
        }
        double norm = 0.0;
        for (const double v : p.values()) norm += v * v;
        return norm;
    };
    CHECK(run(false) < 1e-2);
    CHECK(run(true) < 1e-2);
    CHECK(run(true) == run(true)); // bitwise repeatable
}

TEST_CASE("module registry: state round-trip and freeze recursion") {
    Rng rng(53);
    ConvNormRelu block(3, 6, 3, 1, 1, 1, ConvNormRelu::Norm::ibn, rng);
    CHECK(block.parameter_count() > 0);

    std::stringstream buf;
    block.save_state(buf);

    Rng rng2(999);
    ConvNormRelu other(3, 6, 3, 1, 1, 1, ConvNormRelu::Norm::ibn, rng2);
    other.load_state(buf);
    const auto a = block.named_state();
    const auto b = other.named_state();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == b[i].first);
        CHECK(a[i].second.values() == b[i].second.values());
    }

    block.freeze(true);
    for (const auto& [name, t] : block.named_parameters()) CHECK(t.frozen());
    block.freeze(false);
    for (const auto& [name, t] : block.named_parameters()) CHECK_FALSE(t.frozen());
}

TEST_SUITE_END();
