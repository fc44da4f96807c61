#include "slidepipe/backbone.hpp"

#include <fstream>

#include <json.hpp>

namespace slidepipe {

using nn::Tensor;
using nn::TensorShape;

const char* to_string(EncoderPreset p) {
    switch (p) {
        case EncoderPreset::tiny: return "tiny";
        case EncoderPreset::small: return "small";
        case EncoderPreset::reference: return "reference";
    }
    return "?";
}

EncoderPreset encoder_preset_from_string(const std::string& s) {
    if (s == "tiny") return EncoderPreset::tiny;
    if (s == "small") return EncoderPreset::small;
    if (s == "reference") return EncoderPreset::reference;
    throw InvalidConfig("unknown encoder preset '" + s + "'");
}

void BackboneConfig::validate() const {
    if (input_size < 32 || input_size % 32 != 0)
        throw InvalidConfig("input_size must be a positive multiple of 32");
    for (const int s : ibn_stages)
        if (s < 2 || s > 5)
            throw InvalidConfig("ibn_stages entries must lie in {2..5}");
    if (atrous.enabled)
        for (const int r : atrous.rates)
            if (r < 1) throw InvalidConfig("atrous rates must be >= 1");
    if (ppm.enabled) {
        if (ppm.scales.empty()) throw InvalidConfig("ppm.scales must be non-empty");
        int prev = 0;
        for (const int s : ppm.scales) {
            if (s <= prev) throw InvalidConfig("ppm.scales must be strictly increasing positive");
            prev = s;
        }
    }
}

EncoderLayout EncoderLayout::for_preset(EncoderPreset p) {
    EncoderLayout l;
    switch (p) {
        case EncoderPreset::tiny:
            l.stem = 8;
            l.stage_widths = {8, 16, 32, 64};
            l.stage_blocks = {1, 1, 1, 1};
            l.bottleneck = false;
            break;
        case EncoderPreset::small:
            l.stem = 16;
            l.stage_widths = {16, 32, 64, 128};
            l.stage_blocks = {2, 2, 2, 2};
            l.bottleneck = false;
            break;
        case EncoderPreset::reference:
            // mirrors the 50-layer residual topology
            l.stem = 64;
            l.stage_widths = {256, 512, 1024, 2048};
            l.stage_blocks = {3, 4, 6, 3};
            l.bottleneck = true;
            break;
    }
    return l;
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

namespace {

using Norm = nn::ConvNormRelu::Norm;

class ResidualBlock : public nn::Module {
public:
    ResidualBlock(int in_ch, int out_ch, int stride, int dilation, bool bottleneck,
                  bool ibn_first, Rng& rng)
        : bottleneck_(bottleneck) {
        const Norm first = ibn_first ? Norm::ibn : Norm::batch;
        if (bottleneck) {
            const int width = out_ch / 4;
            reduce_ = register_module("reduce",
                                      std::make_unique<nn::ConvNormRelu>(in_ch, width, 1, 1, 0, 1, first, rng));
            conv_ = register_module("conv",
                                    std::make_unique<nn::ConvNormRelu>(width, width, 3, stride, dilation,
                                                                       dilation, Norm::batch, rng));
            expand_ = register_module("expand",
                                      std::make_unique<nn::Conv2d>(width, out_ch, 1, 1, 0, 1, false, rng));
            expand_bn_ = register_module("expand_bn", std::make_unique<nn::BatchNorm2d>(out_ch));
        } else {
            first_ = register_module("first",
                                     std::make_unique<nn::ConvNormRelu>(in_ch, out_ch, 3, stride, dilation,
                                                                        dilation, first, rng));
            second_ = register_module("second",
                                      std::make_unique<nn::Conv2d>(out_ch, out_ch, 3, 1, dilation, dilation,
                                                                   false, rng));
            second_bn_ = register_module("second_bn", std::make_unique<nn::BatchNorm2d>(out_ch));
        }
        if (in_ch != out_ch || stride != 1) {
            proj_ = register_module("proj",
                                    std::make_unique<nn::Conv2d>(in_ch, out_ch, 1, stride, 0, 1, false, rng));
            proj_bn_ = register_module("proj_bn", std::make_unique<nn::BatchNorm2d>(out_ch));
        }
    }

    Tensor forward(const Tensor& x) {
        Tensor main;
        if (bottleneck_) {
            main = expand_bn_->forward(expand_->forward(conv_->forward(reduce_->forward(x))));
        } else {
            main = second_bn_->forward(second_->forward(first_->forward(x)));
        }
        Tensor shortcut = proj_ ? proj_bn_->forward(proj_->forward(x)) : x;
        return nn::relu(nn::add(main, shortcut));
    }

private:
    bool bottleneck_;
    nn::ConvNormRelu* reduce_ = nullptr;
    nn::ConvNormRelu* conv_ = nullptr;
    nn::Conv2d* expand_ = nullptr;
    nn::BatchNorm2d* expand_bn_ = nullptr;
    nn::ConvNormRelu* first_ = nullptr;
    nn::Conv2d* second_ = nullptr;
    nn::BatchNorm2d* second_bn_ = nullptr;
    nn::Conv2d* proj_ = nullptr;
    nn::BatchNorm2d* proj_bn_ = nullptr;
};

// residual block with instance normalization throughout (decoder side)
class DecoderResBlock : public nn::Module {
public:
    DecoderResBlock(int in_ch, int out_ch, Rng& rng) {
        conv1_ = register_module("conv1",
                                 std::make_unique<nn::Conv2d>(in_ch, out_ch, 3, 1, 1, 1, false, rng));
        in1_ = register_module("in1", std::make_unique<nn::InstanceNorm2d>(out_ch));
        conv2_ = register_module("conv2",
                                 std::make_unique<nn::Conv2d>(out_ch, out_ch, 3, 1, 1, 1, false, rng));
        in2_ = register_module("in2", std::make_unique<nn::InstanceNorm2d>(out_ch));
        if (in_ch != out_ch) {
            proj_ = register_module("proj",
                                    std::make_unique<nn::Conv2d>(in_ch, out_ch, 1, 1, 0, 1, false, rng));
            proj_in_ = register_module("proj_in", std::make_unique<nn::InstanceNorm2d>(out_ch));
        }
    }

    Tensor forward(const Tensor& x) {
        Tensor main = in2_->forward(conv2_->forward(nn::relu(in1_->forward(conv1_->forward(x)))));
        Tensor shortcut = proj_ ? proj_in_->forward(proj_->forward(x)) : x;
        return nn::relu(nn::add(main, shortcut));
    }

private:
    nn::Conv2d* conv1_ = nullptr;
    nn::InstanceNorm2d* in1_ = nullptr;
    nn::Conv2d* conv2_ = nullptr;
    nn::InstanceNorm2d* in2_ = nullptr;
    nn::Conv2d* proj_ = nullptr;
    nn::InstanceNorm2d* proj_in_ = nullptr;
};

} // namespace

// ---------------------------------------------------------------------------
// encoder trunk
// ---------------------------------------------------------------------------

struct EncoderTrunk::Stage : nn::Module {
    Stage(int in_ch, int out_ch, int blocks, int stride, int dilation, bool bottleneck,
          bool ibn, Rng& rng) {
        int ch = in_ch;
        for (int b = 0; b < blocks; ++b) {
            blocks_.push_back(register_module(
                "block" + std::to_string(b),
                std::make_unique<ResidualBlock>(ch, out_ch, b == 0 ? stride : 1, dilation,
                                                bottleneck, ibn, rng)));
            ch = out_ch;
        }
    }
    Tensor forward(Tensor x) {
        for (auto* b : blocks_) x = b->forward(x);
        return x;
    }
    std::vector<ResidualBlock*> blocks_;
};

EncoderTrunk::EncoderTrunk(int in_channels, EncoderPreset preset,
                           const std::set<int>& ibn_stages, const AtrousConfig& atrous,
                           Rng& rng)
    : layout_(EncoderLayout::for_preset(preset)), atrous_enabled_(atrous.enabled) {
    stem_ = register_module("stem", std::make_unique<nn::ConvNormRelu>(
                                        in_channels, layout_.stem, 7, 2, 3, 1, Norm::batch, rng));
    int in_ch = layout_.stem;
    for (int s = 2; s <= 5; ++s) {
        const int i = s - 2;
        int stride = s == 2 ? 1 : 2;
        int dilation = 1;
        if (atrous.enabled && s >= 4) {
            stride = 1;
            dilation = atrous.rates[static_cast<std::size_t>(s - 4)];
        }
        stages_.push_back(register_module(
            "e" + std::to_string(s),
            std::make_unique<Stage>(in_ch, layout_.stage_widths[static_cast<std::size_t>(i)],
                                    layout_.stage_blocks[static_cast<std::size_t>(i)], stride,
                                    dilation, layout_.bottleneck, ibn_stages.count(s) > 0, rng)));
        in_ch = layout_.stage_widths[static_cast<std::size_t>(i)];
    }
}

std::vector<Tensor> EncoderTrunk::forward_taps(const Tensor& x) {
    std::vector<Tensor> taps;
    Tensor e1 = stem_->forward(x);
    taps.push_back(e1);
    Tensor y = nn::max_pool2d(e1, 3, 2, 1);
    for (auto* stage : stages_) {
        y = stage->forward(y);
        taps.push_back(y);
    }
    return taps;
}

std::vector<TensorShape> EncoderTrunk::tap_shapes(int n, int h, int w) const {
    const auto& sw = layout_.stage_widths;
    std::vector<TensorShape> shapes;
    shapes.push_back({n, layout_.stem, h / 2, w / 2});
    shapes.push_back({n, sw[0], h / 4, w / 4});
    shapes.push_back({n, sw[1], h / 8, w / 8});
    if (atrous_enabled_) {
        shapes.push_back({n, sw[2], h / 8, w / 8});
        shapes.push_back({n, sw[3], h / 8, w / 8});
    } else {
        shapes.push_back({n, sw[2], h / 16, w / 16});
        shapes.push_back({n, sw[3], h / 32, w / 32});
    }
    return shapes;
}

ScseBlock::ScseBlock(int channels, Rng& rng) {
    const int hidden = std::max(channels / 8, 1);
    squeeze_ = register_module("squeeze", std::make_unique<nn::Linear>(channels, hidden, rng));
    excite_ = register_module("excite", std::make_unique<nn::Linear>(hidden, channels, rng));
    spatial_ = register_module("spatial", std::make_unique<nn::Conv2d>(channels, 1, 1, 1, 0, 1, true, rng));
}

Tensor ScseBlock::forward(const Tensor& x) const {
    Tensor pooled = nn::adaptive_avg_pool2d(x, 1, 1); // (N,C,1,1)
    Tensor channel_gate = nn::sigmoid(excite_->forward(nn::relu(squeeze_->forward(pooled))));
    Tensor spatial_gate = nn::sigmoid(spatial_->forward(x)); // (N,1,H,W)
    return nn::maximum(nn::mul_gate(x, channel_gate), nn::mul_gate(x, spatial_gate));
}

Tensor scse_apply(const ScseBlock& block, const Tensor& features) {
    return block.forward(features);
}

HypercolumnHead::HypercolumnHead(int total_channels, Rng& rng) {
    project_ = register_module("project",
                               std::make_unique<nn::Conv2d>(total_channels, 1, 1, 1, 0, 1, true, rng));
}

Tensor HypercolumnHead::forward(const std::vector<Tensor>& taps, int out_h, int out_w) const {
    if (taps.empty()) throw BadShape("hypercolumn head needs at least one tap");
    std::vector<Tensor> ups;
    ups.reserve(taps.size());
    for (const auto& t : taps) {
        const auto& s = t.shape();
        ups.push_back(s.h == out_h && s.w == out_w ? t : nn::upsample_bilinear(t, out_h, out_w));
    }
    return nn::sigmoid(project_->forward(nn::concat_channels(ups)));
}

Tensor dice_loss(const Tensor& pred, const Tensor& target) {
    if (!(pred.shape() == target.shape()))
        throw ShapeMismatch("dice_loss on " + pred.shape().str() + " vs " + target.shape().str());
    for (const double v : target.values())
        if (v != 0.0 && v != 1.0) throw DataError("dice_loss target must be binary");
    constexpr double kSmooth = 1.0;
    Tensor inter = nn::sum_per_sample(nn::mul(pred, target));
    Tensor denom = nn::add(nn::sum_per_sample(pred), nn::sum_per_sample(target));
    Tensor ratio = nn::div(nn::add_scalar(nn::scale(inter, 2.0), kSmooth),
                           nn::add_scalar(denom, kSmooth));
    return nn::mean_all(nn::add_scalar(nn::scale(ratio, -1.0), 1.0));
}

// ---------------------------------------------------------------------------
// SegModel
// ---------------------------------------------------------------------------

struct SegModel::DecoderUnit : nn::Module {
    DecoderUnit(int in_ch, int skip_ch, int out_ch, bool use_scse, Rng& rng) {
        block_ = register_module("block",
                                 std::make_unique<DecoderResBlock>(in_ch + skip_ch, out_ch, rng));
        if (use_scse) scse_ = register_module("scse", std::make_unique<ScseBlock>(out_ch, rng));
    }
    Tensor forward(Tensor x, const Tensor* skip, int out_h, int out_w) {
        if (x.shape().h != out_h || x.shape().w != out_w)
            x = nn::upsample_bilinear(x, out_h, out_w);
        if (skip) x = nn::concat_channels({x, *skip});
        x = block_->forward(x);
        if (scse_) x = scse_->forward(x);
        return x;
    }
    DecoderResBlock* block_ = nullptr;
    ScseBlock* scse_ = nullptr;
};

class SegModel::PyramidPooling : public nn::Module {
public:
    PyramidPooling(int channels, std::vector<int> scales, Rng& rng) : scales_(std::move(scales)) {
        const int branch_ch = std::max(channels / 4, 1);
        for (std::size_t i = 0; i < scales_.size(); ++i)
            branches_.push_back(register_module(
                "branch" + std::to_string(scales_[i]),
                std::make_unique<nn::ConvNormRelu>(channels, branch_ch, 1, 1, 0, 1, Norm::batch, rng)));
        out_channels_ = channels + static_cast<int>(scales_.size()) * branch_ch;
    }

    Tensor forward(const Tensor& x) {
        std::vector<Tensor> parts{x};
        for (std::size_t i = 0; i < scales_.size(); ++i) {
            Tensor pooled = nn::adaptive_avg_pool2d(x, scales_[i], scales_[i]);
            Tensor projected = branches_[i]->forward(pooled);
            parts.push_back(nn::upsample_bilinear(projected, x.shape().h, x.shape().w));
        }
        return nn::concat_channels(parts);
    }

    int out_channels() const { return out_channels_; }

private:
    std::vector<int> scales_;
    std::vector<nn::ConvNormRelu*> branches_;
    int out_channels_ = 0;
};

SegModel::SegModel(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    layout_ = EncoderLayout::for_preset(cfg.preset);
    Rng rng(seed);

    encoder_ = register_module("encoder",
                               std::make_unique<EncoderTrunk>(3, cfg_.preset, cfg_.ibn_stages,
                                                              cfg_.atrous, rng));

    int center_ch = layout_.stage_widths[3];
    if (cfg_.ppm.enabled) {
        ppm_ = register_module("ppm",
                               std::make_unique<PyramidPooling>(center_ch, cfg_.ppm.scales, rng));
        center_ch = ppm_->out_channels();
    }

    // decoder units D1..D5: skips E4..E1, then a final skip-free unit at full
    // resolution
    const int e1 = layout_.stem;
    const int e2 = layout_.stage_widths[0];
    const int e3 = layout_.stage_widths[1];
    const int e4 = layout_.stage_widths[2];
    const std::array<int, 5> ins{center_ch, e4, e3, e2, e1};
    const std::array<int, 5> skips{e4, e3, e2, e1, 0};
    const std::array<int, 5> outs{e4, e3, e2, e1, layout_.stem};
    for (int d = 0; d < 5; ++d)
        decoder_.push_back(register_module(
            "d" + std::to_string(d + 1),
            std::make_unique<DecoderUnit>(ins[static_cast<std::size_t>(d)],
                                          skips[static_cast<std::size_t>(d)],
                                          outs[static_cast<std::size_t>(d)], cfg_.scse, rng)));

    if (cfg_.hypercolumn) {
        const int total = e4 + e3 + e2 + e1 + layout_.stem;
        hyper_head_ = register_module("head", std::make_unique<HypercolumnHead>(total, rng));
    } else {
        plain_head_ = register_module("head",
                                      std::make_unique<nn::Conv2d>(layout_.stem, 1, 1, 1, 0, 1, true, rng));
    }
}

void SegModel::check_input(const TensorShape& s) const {
    if (s.c != 3) throw BadShape("segmentation input must have 3 channels, got " + s.str());
    if (s.h < 32 || s.w < 32 || s.h % 32 != 0 || s.w % 32 != 0)
        throw BadShape("segmentation input spatial dims must be positive multiples of 32, got " +
                       s.str());
}

std::vector<TensorShape> SegModel::encoder_tap_shapes(int n, int h, int w) const {
    return encoder_->tap_shapes(n, h, w);
}

std::vector<TensorShape> SegModel::decoder_tap_shapes(int n, int h, int w) const {
    const auto enc = encoder_tap_shapes(n, h, w);
    const auto& sw = layout_.stage_widths;
    std::vector<TensorShape> shapes;
    shapes.push_back({n, sw[2], enc[3].h, enc[3].w});
    shapes.push_back({n, sw[1], enc[2].h, enc[2].w});
    shapes.push_back({n, sw[0], enc[1].h, enc[1].w});
    shapes.push_back({n, layout_.stem, enc[0].h, enc[0].w});
    shapes.push_back({n, layout_.stem, h, w});
    return shapes;
}

int SegModel::center_channels() const {
    return ppm_ ? ppm_->out_channels() : layout_.stage_widths[3];
}

SegModel::ForwardResult SegModel::forward_with_taps(const Tensor& batch) {
    check_input(batch.shape());
    const int h = batch.shape().h;
    const int w = batch.shape().w;

    ForwardResult r;
    r.encoder_taps = encoder_->forward_taps(batch);

    Tensor center = ppm_ ? ppm_->forward(r.encoder_taps.back()) : r.encoder_taps.back();

    const auto dec_shapes = decoder_tap_shapes(batch.shape().n, h, w);
    Tensor d = center;
    for (int i = 0; i < 5; ++i) {
        const Tensor* skip = i < 4 ? &r.encoder_taps[static_cast<std::size_t>(3 - i)] : nullptr;
        d = decoder_[static_cast<std::size_t>(i)]->forward(
            d, skip, dec_shapes[static_cast<std::size_t>(i)].h,
            dec_shapes[static_cast<std::size_t>(i)].w);
        r.decoder_taps.push_back(d);
    }

    r.mask = hyper_head_ ? hyper_head_->forward(r.decoder_taps, h, w)
                         : nn::sigmoid(plain_head_->forward(d));
    return r;
}

Tensor SegModel::forward(const Tensor& batch) { return forward_with_taps(batch).mask; }

std::unique_ptr<SegModel> build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    return std::make_unique<SegModel>(cfg, seed);
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace {

nlohmann::json backbone_config_json(const BackboneConfig& cfg) {
    nlohmann::json j;
    j["preset"] = to_string(cfg.preset);
    j["ibn_stages"] = cfg.ibn_stages;
    j["atrous"] = {{"enabled", cfg.atrous.enabled}, {"rates", cfg.atrous.rates}};
    j["ppm"] = {{"enabled", cfg.ppm.enabled}, {"scales", cfg.ppm.scales}};
    j["scse"] = cfg.scse;
    j["hypercolumn"] = cfg.hypercolumn;
    j["input_size"] = cfg.input_size;
    return j;
}

BackboneConfig backbone_config_from(const nlohmann::json& j) {
    BackboneConfig cfg;
    cfg.preset = encoder_preset_from_string(j.at("preset").get<std::string>());
    cfg.ibn_stages = j.at("ibn_stages").get<std::set<int>>();
    cfg.atrous.enabled = j.at("atrous").at("enabled").get<bool>();
    cfg.atrous.rates = j.at("atrous").at("rates").get<std::array<int, 2>>();
    cfg.ppm.enabled = j.at("ppm").at("enabled").get<bool>();
    cfg.ppm.scales = j.at("ppm").at("scales").get<std::vector<int>>();
    cfg.scse = j.at("scse").get<bool>();
    cfg.hypercolumn = j.at("hypercolumn").get<bool>();
    cfg.input_size = j.at("input_size").get<int>();
    cfg.validate();
    return cfg;
}

} // namespace

std::string backbone_config_to_json(const BackboneConfig& cfg) {
    return backbone_config_json(cfg).dump(2);
}

BackboneConfig backbone_config_from_json(const std::string& json_text) {
    return backbone_config_from(nlohmann::json::parse(json_text));
}

void save_checkpoint(const SegModel& model, const std::filesystem::path& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + file.string());
    model.save_state(out);

    nlohmann::json side;
    side["type"] = "seg_backbone";
    side["config"] = backbone_config_json(model.config());
    std::ofstream meta(file.string() + ".json");
    if (!meta) throw IoError("cannot write checkpoint sidecar for " + file.string());
    meta << side.dump(2) << "\n";
}

std::unique_ptr<SegModel> load_checkpoint(const std::filesystem::path& file) {
    std::ifstream meta(file.string() + ".json");
    if (!meta) throw ModelMissing("checkpoint sidecar missing: " + file.string() + ".json");
    nlohmann::json side = nlohmann::json::parse(meta);
    if (side.at("type").get<std::string>() != "seg_backbone")
        throw ModelMissing("checkpoint " + file.string() + " is not a segmentation backbone");
    auto model = std::make_unique<SegModel>(backbone_config_from(side.at("config")), 0);
    std::ifstream in(file, std::ios::binary);
    if (!in) throw ModelMissing("checkpoint missing: " + file.string());
    model->load_state(in);
    return model;
}

} // namespace slidepipe
