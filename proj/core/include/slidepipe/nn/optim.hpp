#pragma once

#include <vector>

#include "slidepipe/nn/tensor.hpp"

namespace slidepipe::nn {

// Plain SGD with momentum and L2 weight decay (the classifier recipe).
class Sgd {
public:
    Sgd(std::vector<Tensor> params, double lr, double momentum = 0.9,
        double weight_decay = 0.0);

    void step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_, momentum_, weight_decay_;
};

class Adam {
public:
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);

    void step();
    void zero_grad();
    void set_lr(double lr) { lr_ = lr; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
};

} // namespace slidepipe::nn
