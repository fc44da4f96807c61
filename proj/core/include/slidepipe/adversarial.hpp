#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "slidepipe/backbone.hpp"
#include "slidepipe/image.hpp"

namespace slidepipe {

enum class DomainTag { A, B };

struct AdvWeights {
    double alpha_e = 0.01;
    double alpha_d = 0.001;
    double alpha_m = 0.001;

    void validate() const;
};

struct TrainSchedule {
    int s0 = 4;         // generator-only epochs
    int d0 = 1;         // discriminator-only epochs
    int alt_epochs = 2; // alternating epochs (one D pass + one G pass each)

    void validate() const;
};

// Eq. (15) is implemented exactly as printed by default; the conventional
// generator objective is available behind this switch.
enum class DmAdvForm { as_printed, conventional };

// A domain classifier over a list of generator inputs (feature taps, or a
// single mask raster). Output is one probability per sample.
class Discriminator : public nn::Module {
public:
    virtual nn::Tensor forward(const std::vector<nn::Tensor>& inputs) = 0;
};

struct TapSpec {
    int channels = 0;
    int height = 0;
    int width = 0;
};

// Structural mirror of the encoder or decoder. Layer 1 consumes tap 1
// directly; each further layer first produces features shape-matched to the
// next tap, concatenates them with that tap, and convolves — no tap is ever
// cropped. Head: global average pool, single logit, sigmoid.
class MirrorDiscriminator : public Discriminator {
public:
    enum class Side { encoder, decoder };

    MirrorDiscriminator(Side side, const std::vector<TapSpec>& tap_shapes, std::uint64_t seed);

    nn::Tensor forward(const std::vector<nn::Tensor>& taps) override;

    Side side() const { return side_; }
    const std::vector<TapSpec>& expected_taps() const { return taps_; }
    // concatenated input channels of layer i (mirror features + tap), the
    // tested "no crop" bookkeeping
    const std::vector<int>& layer_input_channels() const { return layer_in_ch_; }

private:
    Side side_;
    std::vector<TapSpec> taps_;
    std::vector<int> layer_in_ch_;
    std::vector<nn::Conv2d*> convs_;
    nn::Linear* head_ = nullptr;
};

// Distinguishes expert masks from predicted masks; it shares the encoder
// trunk structure of the configured preset, with a 1-channel stem and a
// classification head.
class MaskDiscriminator : public Discriminator {
public:
    MaskDiscriminator(EncoderPreset preset, std::uint64_t seed);
    nn::Tensor forward(const std::vector<nn::Tensor>& inputs) override; // {masks B x 1 x H x W}

private:
    EncoderTrunk* trunk_ = nullptr;
    nn::Linear* head_ = nullptr;
};

// ---- the six BCE losses ----
// Probabilities are clamped to [1e-7, 1-1e-7] so every loss stays finite.

nn::Tensor bce_real(const nn::Tensor& probs); // -mean ln p
nn::Tensor bce_fake(const nn::Tensor& probs); // -mean ln (1-p)

// Discriminator update loss (domain B plays the "real" class). Taps are
// detached internally: generator parameters see exactly zero gradient.
nn::Tensor d_loss(Discriminator& disc, const std::vector<nn::Tensor>& taps_domain_b,
                  const std::vector<nn::Tensor>& taps_domain_a);

// Label-flipped generator loss. The discriminator's parameters are frozen
// while this graph is recorded, so they see exactly zero gradient.
nn::Tensor adv_loss(Discriminator& disc, const std::vector<nn::Tensor>& taps_domain_a,
                    const std::vector<nn::Tensor>& taps_domain_b);

nn::Tensor d_loss_mask(Discriminator& dm, const nn::Tensor& gt_masks,
                       const nn::Tensor& predicted_masks);
nn::Tensor adv_loss_mask(Discriminator& dm, const nn::Tensor& predicted_masks,
                         DmAdvForm form = DmAdvForm::as_printed);

nn::Tensor full_loss(const nn::Tensor& seg_loss, const nn::Tensor& adv_e,
                     const nn::Tensor& adv_d, const nn::Tensor& adv_m, const AdvWeights& w);
double full_loss(double seg_loss, double adv_e, double adv_d, double adv_m,
                 const AdvWeights& w);

// ---- domain split ----
// 2-means clustering on a 6-dim appearance vector (per-channel mean and std
// of pixel values). The larger cluster is labeled A; when every feature
// vector is identical the whole set degenerates to A and adversarial phases
// are disabled downstream.
std::vector<DomainTag> domain_split(std::span<const ByteRaster> patches, std::uint64_t seed);

// ---- training schedule ----

struct SegSample {
    nn::Tensor image; // 1 x 3 x H x W, values in [-0.5, 0.5]
    nn::Tensor mask;  // 1 x 1 x H x W, binary
};

struct AdvTrainOptions {
    double seg_lr = 1e-3;
    double adv_g_lr = 2e-4;
    double d_lr = 2e-4;
    int batch_size = 4;
    DmAdvForm dm_adv_form = DmAdvForm::as_printed;
    std::uint64_t seed = 0;
};

struct EpochRecord {
    std::string phase; // "seg" | "disc" | "alt_disc" | "alt_gen"
    int epoch = 0;     // position in the run
    // train-time means where the phase produces them; quiet NaN otherwise
    double l_seg = 0.0;
    double l_seg_eval = 0.0; // eval-mode full-set dice loss, every epoch
    double l_de = 0.0, l_dd = 0.0, l_dm = 0.0;
    double adv_e = 0.0, adv_d = 0.0, adv_m = 0.0;
    double l_full = 0.0;

    EpochRecord();
};

struct TrainingReport {
    bool adversarial_enabled = false;
    std::vector<EpochRecord> epochs;

    std::vector<double> series(const std::string& name) const; // NaNs skipped
    std::string to_json() const;
};

// Phase 1: s0 generator epochs on L_seg. Phase 2: d0 discriminator epochs on
// L_De/L_Dd/L_Dm with the generator frozen in eval mode. Phase 3: alt_epochs
// of one discriminator pass followed by one generator pass on L_full. An
// empty domain degrades the run to plain segmentation training.
TrainingReport run_schedule(SegModel& model, MirrorDiscriminator& d_enc,
                            MirrorDiscriminator& d_dec, MaskDiscriminator& d_mask,
                            std::vector<SegSample> domain_a, std::vector<SegSample> domain_b,
                            const TrainSchedule& schedule, const AdvWeights& weights,
                            const AdvTrainOptions& options);

std::vector<TapSpec> tap_specs_from_shapes(const std::vector<nn::TensorShape>& shapes);

} // namespace slidepipe
