#pragma once

#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "slidepipe/nn/tensor.hpp"
#include "slidepipe/rng.hpp"

namespace slidepipe::nn {

// Owner of named parameters, buffers and submodules (a deliberately small
// registry in the torch mould). Registration order is deterministic, which
// fixes optimizer slot order and checkpoint layout.
class Module {
public:
    virtual ~Module() = default;

    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    bool training() const { return training_; }
    void set_training(bool training);

    // parameter freeze: gradients flow through but never accumulate
    void freeze(bool frozen);

    void zero_grad();

    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters(
        const std::string& prefix = "") const;
    std::vector<std::pair<std::string, Tensor>> named_state(
        const std::string& prefix = "") const; // parameters + buffers
    std::size_t parameter_count() const;

    void save_state(std::ostream& out) const;
    void load_state(std::istream& in);

protected:
    Module() = default;

    Tensor& register_parameter(const std::string& name, Tensor t);
    Tensor& register_buffer(const std::string& name, Tensor t);

    template <typename T>
    T* register_module(const std::string& name, std::unique_ptr<T> m) {
        T* raw = m.get();
        children_.emplace_back(name, std::move(m));
        return raw;
    }

    virtual void on_set_training(bool) {}

private:
    bool training_ = true;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
    std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

// ---- initializers ----
Tensor he_normal(const TensorShape& shape, std::int64_t fan_in, Rng& rng);

// ---- layers ----

class Conv2d : public Module {
public:
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding,
           int dilation, bool bias, Rng& rng);
    Tensor forward(const Tensor& x) const;

    int in_channels() const { return in_channels_; }
    int out_channels() const { return out_channels_; }

private:
    int in_channels_, out_channels_, stride_, padding_, dilation_;
    Tensor weight_;
    Tensor bias_;
};

class Linear : public Module {
public:
    Linear(int in_features, int out_features, Rng& rng);
    Tensor forward(const Tensor& x) const;

private:
    Tensor weight_;
    Tensor bias_;
};

class BatchNorm2d : public Module {
public:
    explicit BatchNorm2d(int channels);
    Tensor forward(const Tensor& x);

private:
    Tensor gamma_, beta_;
    Tensor running_mean_, running_var_;
};

class InstanceNorm2d : public Module {
public:
    explicit InstanceNorm2d(int channels);
    Tensor forward(const Tensor& x) const;

private:
    Tensor gamma_, beta_;
};

// IBN block: the first half of the channels is instance-normalized
// (appearance invariance), the second half batch-normalized (content).
class IbnNorm : public Module {
public:
    explicit IbnNorm(int channels);
    Tensor forward(const Tensor& x);

private:
    int split_;
    InstanceNorm2d* in_half_ = nullptr;
    BatchNorm2d* bn_half_ = nullptr;
};

// conv -> norm -> relu with the norm selected by flag
class ConvNormRelu : public Module {
public:
    enum class Norm { batch, instance, ibn, none };
    ConvNormRelu(int in_ch, int out_ch, int kernel, int stride, int padding,
                 int dilation, Norm norm, Rng& rng);
    Tensor forward(const Tensor& x);

private:
    Conv2d* conv_ = nullptr;
    Norm norm_kind_;
    BatchNorm2d* bn_ = nullptr;
    InstanceNorm2d* in_ = nullptr;
    IbnNorm* ibn_ = nullptr;
};

} // namespace slidepipe::nn
