#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "slidepipe/nn/layers.hpp"

namespace slidepipe {

enum class EncoderPreset { tiny, small, reference };

const char* to_string(EncoderPreset p);
EncoderPreset encoder_preset_from_string(const std::string& s);

struct AtrousConfig {
    bool enabled = true;
    std::array<int, 2> rates{2, 4}; // E4, E5 dilation; stride replaced by dilation
};

struct PpmConfig {
    bool enabled = true;
    std::vector<int> scales{1, 2, 3, 6};
};

struct BackboneConfig {
    EncoderPreset preset = EncoderPreset::reference;
    std::set<int> ibn_stages{2, 3, 4}; // encoder stages carrying IBN (subset of {2..5})
    AtrousConfig atrous;
    PpmConfig ppm;
    bool scse = true;
    bool hypercolumn = true;
    int input_size = 512;

    void validate() const;
};

// widths/depths behind a preset
struct EncoderLayout {
    int stem = 0;
    std::array<int, 4> stage_widths{};  // output channels of E2..E5
    std::array<int, 4> stage_blocks{};
    bool bottleneck = false;

    static EncoderLayout for_preset(EncoderPreset p);
};

// Residual encoder: stem (7x7, /2), max pool, four residual stages E2..E5.
// Atrous replaces the E4/E5 strides with the configured dilations. Shared by
// the segmentation backbone and the mask discriminator.
class EncoderTrunk : public nn::Module {
public:
    EncoderTrunk(int in_channels, EncoderPreset preset, const std::set<int>& ibn_stages,
                 const AtrousConfig& atrous, Rng& rng);

    // E1..E5 feature maps
    std::vector<nn::Tensor> forward_taps(const nn::Tensor& x);

    const EncoderLayout& layout() const { return layout_; }
    bool atrous_enabled() const { return atrous_enabled_; }
    std::vector<nn::TensorShape> tap_shapes(int n, int h, int w) const;

private:
    struct Stage;
    EncoderLayout layout_;
    bool atrous_enabled_ = false;
    nn::ConvNormRelu* stem_ = nullptr;
    std::vector<Stage*> stages_;
};

// Concurrent spatial & channel squeeze-excitation; the two gated paths are
// combined element-wise by max.
class ScseBlock : public nn::Module {
public:
    ScseBlock(int channels, Rng& rng);
    nn::Tensor forward(const nn::Tensor& x) const;

private:
    nn::Linear* squeeze_ = nullptr;
    nn::Linear* excite_ = nullptr;
    nn::Conv2d* spatial_ = nullptr;
};

nn::Tensor scse_apply(const ScseBlock& block, const nn::Tensor& features);

// Upsamples every decoder tap to full resolution, concatenates, and projects
// with a 1x1 convolution + sigmoid.
class HypercolumnHead : public nn::Module {
public:
    HypercolumnHead(int total_channels, Rng& rng);
    nn::Tensor forward(const std::vector<nn::Tensor>& taps, int out_h, int out_w) const;

private:
    nn::Conv2d* project_ = nullptr;
};

// Soft Dice loss, lambda = 1 smoothing, per-sample sums averaged over batch.
nn::Tensor dice_loss(const nn::Tensor& pred, const nn::Tensor& target);

// The segmentation network: residual encoder (optionally IBN / atrous),
// optional PPM center, SCSE-gated instance-normalized residual decoder,
// hypercolumn prediction head.
class SegModel : public nn::Module {
public:
    SegModel(const BackboneConfig& cfg, std::uint64_t seed);

    const BackboneConfig& config() const { return cfg_; }

    struct ForwardResult {
        nn::Tensor mask;                      // B x 1 x H x W in [0,1]
        std::vector<nn::Tensor> encoder_taps; // E1..E5
        std::vector<nn::Tensor> decoder_taps; // D1..D5
    };

    ForwardResult forward_with_taps(const nn::Tensor& batch);
    nn::Tensor forward(const nn::Tensor& batch);

    // shape contract for a given input size (the tested documentation of the
    // tap geometry)
    std::vector<nn::TensorShape> encoder_tap_shapes(int n, int h, int w) const;
    std::vector<nn::TensorShape> decoder_tap_shapes(int n, int h, int w) const;
    int center_channels() const; // post-PPM when enabled

private:
    struct DecoderUnit;
    class PyramidPooling;

    void check_input(const nn::TensorShape& s) const;

    BackboneConfig cfg_;
    EncoderLayout layout_;
    EncoderTrunk* encoder_ = nullptr;
    PyramidPooling* ppm_ = nullptr;
    std::vector<DecoderUnit*> decoder_;
    HypercolumnHead* hyper_head_ = nullptr;
    nn::Conv2d* plain_head_ = nullptr;
};

std::unique_ptr<SegModel> build_backbone(const BackboneConfig& cfg, std::uint64_t seed);

// Checkpoints: binary parameter archive plus a JSON sidecar (same path with
// ".json" appended) describing the config, so a checkpoint is self-describing.
void save_checkpoint(const SegModel& model, const std::filesystem::path& file);
std::unique_ptr<SegModel> load_checkpoint(const std::filesystem::path& file);

std::string backbone_config_to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const std::string& json_text);

} // namespace slidepipe
