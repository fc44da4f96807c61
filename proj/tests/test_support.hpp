#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>

#include "slidepipe/nn/tensor.hpp"
#include "slidepipe/rng.hpp"

namespace testsup {

inline slidepipe::nn::Tensor random_tensor(const slidepipe::nn::TensorShape& shape,
                                           slidepipe::Rng& rng, bool requires_grad = true,
                                           double lo = -1.0, double hi = 1.0) {
    auto t = slidepipe::nn::Tensor::zeros(shape, requires_grad);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

// Central-difference gradient check of a scalar loss against every element of
// `x`. The loss builder must re-run the full forward from current values.
inline double max_grad_rel_error(const std::function<slidepipe::nn::Tensor()>& loss_of,
                                 slidepipe::nn::Tensor x, double h = 1e-5) {
    using slidepipe::nn::Tensor;
    x.zero_grad();
    Tensor loss = loss_of();
    loss.backward();
    const auto analytic = x.grad();

    double worst = 0.0;
    for (std::size_t i = 0; i < x.values().size(); ++i) {
        const double keep = x.values()[i];
        x.values()[i] = keep + h;
        const double fp = loss_of().item();
        x.values()[i] = keep - h;
        const double fm = loss_of().item();
        x.values()[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max({1.0, std::abs(fd), std::abs(analytic[i])});
        worst = std::max(worst, std::abs(analytic[i] - fd) / denom);
    }
    return worst;
}

// Scratch directory under the build tree, wiped per test that asks for it.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("slidepipe_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testsup
