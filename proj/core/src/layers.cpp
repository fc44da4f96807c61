#include "slidepipe/nn/layers.hpp"

#include <cstring>
#include <istream>
#include <ostream>

namespace slidepipe::nn {

void Module::set_training(bool training) {
    training_ = training;
    on_set_training(training);
    for (auto& [name, child] : children_) child->set_training(training);
}

void Module::freeze(bool frozen) {
    for (auto& [name, t] : params_) t.set_frozen(frozen);
    for (auto& [name, child] : children_) child->freeze(frozen);
}

void Module::zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
    for (auto& [name, child] : children_) child->zero_grad();
}

std::vector<Tensor> Module::parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : params_) out.emplace_back(prefix + name, t);
    for (const auto& [name, child] : children_) {
        auto sub = child->named_parameters(prefix + name + ".");
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> Module::named_state(
    const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : params_) out.emplace_back(prefix + name, t);
    for (const auto& [name, t] : buffers_) out.emplace_back(prefix + name, t);
    for (const auto& [name, child] : children_) {
        auto sub = child->named_state(prefix + name + ".");
        out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
}

std::size_t Module::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters())
        n += static_cast<std::size_t>(t.size());
    return n;
}

Tensor& Module::register_parameter(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    params_.emplace_back(name, std::move(t));
    return params_.back().second;
}

Tensor& Module::register_buffer(const std::string& name, Tensor t) {
    buffers_.emplace_back(name, std::move(t));
    return buffers_.back().second;
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

constexpr char kStateMagic[8] = {'S', 'P', 'S', 'T', 'A', 'T', 'E', '1'};

} // namespace

void Module::save_state(std::ostream& out) const {
    out.write(kStateMagic, sizeof(kStateMagic));
    const auto state = named_state();
    write_u32(out, static_cast<std::uint32_t>(state.size()));
    for (const auto& [name, t] : state) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        const auto& s = t.shape();
        const std::int32_t dims[4] = {s.n, s.c, s.h, s.w};
        out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  static_cast<std::streamsize>(t.values().size() * sizeof(double)));
    }
    if (!out) throw IoError("failed writing module state");
}

void Module::load_state(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kStateMagic, sizeof(magic)) != 0)
        throw IoError("not a slidepipe parameter archive");
    const auto count = read_u32(in);
    std::map<std::string, std::pair<TensorShape, std::vector<double>>> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = read_u32(in);
        std::string name(len, '\0');
        in.read(name.data(), len);
        std::int32_t dims[4];
        in.read(reinterpret_cast<char*>(dims), sizeof(dims));
        TensorShape s{dims[0], dims[1], dims[2], dims[3]};
        std::vector<double> v(static_cast<std::size_t>(s.count()));
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
        if (!in) throw IoError("truncated parameter archive");
        entries.emplace(std::move(name), std::make_pair(s, std::move(v)));
    }
    for (auto& [name, t] : named_state()) {
        const auto it = entries.find(name);
        if (it == entries.end())
            throw IoError("parameter archive missing entry '" + name + "'");
        if (!(it->second.first == t.shape()))
            throw IoError("shape mismatch for '" + name + "': archive " +
                          it->second.first.str() + " vs model " + t.shape().str());
        t.values() = it->second.second;
    }
}

Tensor he_normal(const TensorShape& shape, std::int64_t fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(shape);
    const double stddev = std::sqrt(2.0 / static_cast<double>(std::max<std::int64_t>(fan_in, 1)));
    for (auto& v : t.values()) v = rng.normal(0.0, stddev);
    return t;
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding,
               int dilation, bool bias, Rng& rng)
    : in_channels_(in_channels), out_channels_(out_channels), stride_(stride),
      padding_(padding), dilation_(dilation) {
    const std::int64_t fan_in = static_cast<std::int64_t>(in_channels) * kernel * kernel;
    weight_ = register_parameter(
        "weight", he_normal({out_channels, in_channels, kernel, kernel}, fan_in, rng));
    if (bias) bias_ = register_parameter("bias", Tensor::zeros({1, out_channels, 1, 1}));
}

Tensor Conv2d::forward(const Tensor& x) const {
    return conv2d(x, weight_, bias_, stride_, padding_, dilation_);
}

Linear::Linear(int in_features, int out_features, Rng& rng) {
    weight_ = register_parameter("weight",
                                 he_normal({out_features, in_features, 1, 1}, in_features, rng));
    bias_ = register_parameter("bias", Tensor::zeros({1, out_features, 1, 1}));
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight_, bias_); }

BatchNorm2d::BatchNorm2d(int channels) {
    gamma_ = register_parameter("gamma", Tensor::full({1, channels, 1, 1}, 1.0));
    beta_ = register_parameter("beta", Tensor::zeros({1, channels, 1, 1}));
    running_mean_ = register_buffer("running_mean", Tensor::zeros({1, channels, 1, 1}));
    running_var_ = register_buffer("running_var", Tensor::full({1, channels, 1, 1}, 1.0));
}

Tensor BatchNorm2d::forward(const Tensor& x) {
    return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training());
}

InstanceNorm2d::InstanceNorm2d(int channels) {
    gamma_ = register_parameter("gamma", Tensor::full({1, channels, 1, 1}, 1.0));
    beta_ = register_parameter("beta", Tensor::zeros({1, channels, 1, 1}));
}

Tensor InstanceNorm2d::forward(const Tensor& x) const {
    return instance_norm2d(x, gamma_, beta_);
}

IbnNorm::IbnNorm(int channels) {
    if (channels < 2) throw InvalidConfig("IBN needs at least 2 channels");
    split_ = channels / 2;
    in_half_ = register_module("in", std::make_unique<InstanceNorm2d>(split_));
    bn_half_ = register_module("bn", std::make_unique<BatchNorm2d>(channels - split_));
}

Tensor IbnNorm::forward(const Tensor& x) {
    Tensor lo = slice_channels(x, 0, split_);
    Tensor hi = slice_channels(x, split_, x.shape().c - split_);
    return concat_channels({in_half_->forward(lo), bn_half_->forward(hi)});
}

ConvNormRelu::ConvNormRelu(int in_ch, int out_ch, int kernel, int stride, int padding,
                           int dilation, Norm norm, Rng& rng)
    : norm_kind_(norm) {
    conv_ = register_module("conv", std::make_unique<Conv2d>(in_ch, out_ch, kernel, stride,
                                                             padding, dilation,
                                                             norm == Norm::none, rng));
    switch (norm) {
        case Norm::batch: bn_ = register_module("norm", std::make_unique<BatchNorm2d>(out_ch)); break;
        case Norm::instance: in_ = register_module("norm", std::make_unique<InstanceNorm2d>(out_ch)); break;
        case Norm::ibn: ibn_ = register_module("norm", std::make_unique<IbnNorm>(out_ch)); break;
        case Norm::none: break;
    }
}

Tensor ConvNormRelu::forward(const Tensor& x) {
    Tensor y = conv_->forward(x);
    switch (norm_kind_) {
        case Norm::batch: y = bn_->forward(y); break;
        case Norm::instance: y = in_->forward(y); break;
        case Norm::ibn: y = ibn_->forward(y); break;
        case Norm::none: break;
    }
    return relu(y);
}

} // namespace slidepipe::nn
