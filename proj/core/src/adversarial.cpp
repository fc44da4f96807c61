#include "slidepipe/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "slidepipe/nn/optim.hpp"

namespace slidepipe {

using nn::Tensor;
using nn::TensorShape;

namespace {
constexpr double kProbEps = 1e-7;
constexpr double kNan = std::numeric_limits<double>::quiet_NaN();
} // namespace

void AdvWeights::validate() const {
    if (alpha_e < 0.0 || alpha_d < 0.0 || alpha_m < 0.0)
        throw InvalidConfig("adversarial weights must be non-negative");
}

void TrainSchedule::validate() const {
    if (s0 < 0 || d0 < 0 || alt_epochs < 0)
        throw InvalidConfig("schedule epoch counts must be >= 0");
}

// ---------------------------------------------------------------------------
// mirror discriminators
// ---------------------------------------------------------------------------

MirrorDiscriminator::MirrorDiscriminator(Side side, const std::vector<TapSpec>& tap_shapes,
                                         std::uint64_t seed)
    : side_(side), taps_(tap_shapes) {
    if (taps_.empty()) throw ShapeIncompatible("mirror discriminator needs >= 1 tap");
    for (std::size_t i = 0; i < taps_.size(); ++i) {
        if (taps_[i].channels < 1 || taps_[i].height < 1 || taps_[i].width < 1)
            throw ShapeIncompatible("degenerate tap shape at layer " + std::to_string(i + 1));
        if (i + 1 < taps_.size()) {
            const auto& cur = taps_[i];
            const auto& nxt = taps_[i + 1];
            if (side_ == Side::encoder) {
                if (cur.height < nxt.height || cur.width < nxt.width)
                    throw ShapeIncompatible("encoder taps must not grow in resolution");
            } else {
                if (cur.height > nxt.height || cur.width > nxt.width)
                    throw ShapeIncompatible("decoder taps must not shrink in resolution");
            }
        }
    }

    Rng rng(seed);
    const int n = static_cast<int>(taps_.size());
    for (int i = 0; i < n; ++i) {
        // layer 1 eats tap 1 alone; later layers eat own features ‖ tap i
        const int in_ch = i == 0 ? taps_[0].channels
                                 : taps_[static_cast<std::size_t>(i)].channels * 2;
        layer_in_ch_.push_back(in_ch);
        const bool last = i == n - 1;
        const int out_ch = last ? taps_[static_cast<std::size_t>(i)].channels
                                : taps_[static_cast<std::size_t>(i + 1)].channels;
        int stride = 1;
        if (!last && side_ == Side::encoder) {
            const auto& cur = taps_[static_cast<std::size_t>(i)];
            const auto& nxt = taps_[static_cast<std::size_t>(i + 1)];
            stride = std::max(1, cur.height / nxt.height);
            const int expect_h = (cur.height + 2 - 3) / stride + 1;
            const int expect_w = (cur.width + 2 - 3) / stride + 1;
            if (expect_h != nxt.height || expect_w != nxt.width)
                throw ShapeIncompatible("encoder mirror cannot match tap " +
                                        std::to_string(i + 2) + " by striding");
        }
        convs_.push_back(register_module(
            "layer" + std::to_string(i + 1),
            std::make_unique<nn::Conv2d>(in_ch, out_ch, 3, stride, 1, 1, true, rng)));
    }
    head_ = register_module("head", std::make_unique<nn::Linear>(taps_.back().channels, 1, rng));
}

Tensor MirrorDiscriminator::forward(const std::vector<Tensor>& taps) {
    if (taps.size() != taps_.size())
        throw ShapeIncompatible("mirror built for " + std::to_string(taps_.size()) +
                                " taps, fed " + std::to_string(taps.size()));
    for (std::size_t i = 0; i < taps.size(); ++i) {
        const auto& s = taps[i].shape();
        if (s.c != taps_[i].channels || s.h != taps_[i].height || s.w != taps_[i].width)
            throw ShapeIncompatible("tap " + std::to_string(i + 1) + " is " + s.str() +
                                    ", mirror expects (c=" + std::to_string(taps_[i].channels) +
                                    ",h=" + std::to_string(taps_[i].height) +
                                    ",w=" + std::to_string(taps_[i].width) + ")");
    }

    const int n = static_cast<int>(taps_.size());
    Tensor f;
    for (int i = 0; i < n; ++i) {
        Tensor input = i == 0 ? taps[0] : nn::concat_channels({f, taps[static_cast<std::size_t>(i)]});
        f = nn::leaky_relu(convs_[static_cast<std::size_t>(i)]->forward(input), 0.2);
        if (i + 1 < n && side_ == Side::decoder) {
            const auto& nxt = taps_[static_cast<std::size_t>(i + 1)];
            if (f.shape().h != nxt.height || f.shape().w != nxt.width)
                f = nn::upsample_bilinear(f, nxt.height, nxt.width);
        }
    }
    Tensor pooled = nn::adaptive_avg_pool2d(f, 1, 1);
    return nn::sigmoid(head_->forward(pooled));
}

MaskDiscriminator::MaskDiscriminator(EncoderPreset preset, std::uint64_t seed) {
    Rng rng(seed);
    AtrousConfig no_atrous;
    no_atrous.enabled = false;
    trunk_ = register_module("trunk", std::make_unique<EncoderTrunk>(1, preset, {}, no_atrous, rng));
    head_ = register_module("head",
                            std::make_unique<nn::Linear>(trunk_->layout().stage_widths[3], 1, rng));
}

Tensor MaskDiscriminator::forward(const std::vector<Tensor>& inputs) {
    if (inputs.size() != 1)
        throw ShapeIncompatible("mask discriminator takes exactly one raster input");
    const auto& s = inputs[0].shape();
    if (s.c != 1 || s.h < 32 || s.w < 32)
        throw ShapeIncompatible("mask discriminator input must be (N,1,>=32,>=32), got " + s.str());
    Tensor deepest = trunk_->forward_taps(inputs[0]).back();
    return nn::sigmoid(head_->forward(nn::adaptive_avg_pool2d(deepest, 1, 1)));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor bce_real(const Tensor& probs) {
    return nn::scale(nn::mean_all(nn::log(nn::clamp(probs, kProbEps, 1.0 - kProbEps))), -1.0);
}

Tensor bce_fake(const Tensor& probs) {
    Tensor complement = nn::add_scalar(nn::scale(probs, -1.0), 1.0);
    return nn::scale(nn::mean_all(nn::log(nn::clamp(complement, kProbEps, 1.0 - kProbEps))), -1.0);
}

namespace {

std::vector<Tensor> detach_all(const std::vector<Tensor>& taps) {
    std::vector<Tensor> out;
    out.reserve(taps.size());
    for (const auto& t : taps) out.push_back(t.detach());
    return out;
}

// freezes a module's parameters while a generator-side graph is recorded
class FreezeGuard {
public:
    explicit FreezeGuard(nn::Module& m) : m_(m) { m_.freeze(true); }
    ~FreezeGuard() { m_.freeze(false); }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    nn::Module& m_;
};

} // namespace

Tensor d_loss(Discriminator& disc, const std::vector<Tensor>& taps_domain_b,
              const std::vector<Tensor>& taps_domain_a) {
    if (taps_domain_b.empty() || taps_domain_a.empty())
        throw EmptyInput("d_loss needs both domain batches");
    Tensor on_b = disc.forward(detach_all(taps_domain_b));
    Tensor on_a = disc.forward(detach_all(taps_domain_a));
    return nn::add(bce_real(on_b), bce_fake(on_a));
}

Tensor adv_loss(Discriminator& disc, const std::vector<Tensor>& taps_domain_a,
                const std::vector<Tensor>& taps_domain_b) {
    if (taps_domain_a.empty() || taps_domain_b.empty())
        throw EmptyInput("adv_loss needs both domain batches");
    FreezeGuard guard(disc);
    Tensor on_a = disc.forward(taps_domain_a);
    Tensor on_b = disc.forward(taps_domain_b);
    return nn::add(bce_real(on_a), bce_fake(on_b));
}

Tensor d_loss_mask(Discriminator& dm, const Tensor& gt_masks, const Tensor& predicted_masks) {
    if (gt_masks.shape().h != predicted_masks.shape().h ||
        gt_masks.shape().w != predicted_masks.shape().w)
        throw ShapeMismatch("mask discriminator inputs differ in resolution");
    Tensor on_real = dm.forward({gt_masks.detach()});
    Tensor on_fake = dm.forward({predicted_masks.detach()});
    return nn::add(bce_real(on_real), bce_fake(on_fake));
}

Tensor adv_loss_mask(Discriminator& dm, const Tensor& predicted_masks, DmAdvForm form) {
    FreezeGuard guard(dm);
    Tensor on_pred = dm.forward({predicted_masks});
    // Eq. (15) as printed drives D_m(G(x)) toward 0; the conventional form is
    // the usual generator objective.
    return form == DmAdvForm::as_printed ? bce_fake(on_pred) : bce_real(on_pred);
}

Tensor full_loss(const Tensor& seg_loss, const Tensor& adv_e, const Tensor& adv_d,
                 const Tensor& adv_m, const AdvWeights& w) {
    w.validate();
    Tensor total = seg_loss;
    if (adv_e.defined() && w.alpha_e != 0.0) total = nn::add(total, nn::scale(adv_e, w.alpha_e));
    if (adv_d.defined() && w.alpha_d != 0.0) total = nn::add(total, nn::scale(adv_d, w.alpha_d));
    if (adv_m.defined() && w.alpha_m != 0.0) total = nn::add(total, nn::scale(adv_m, w.alpha_m));
    return total;
}

double full_loss(double seg_loss, double adv_e, double adv_d, double adv_m,
                 const AdvWeights& w) {
    w.validate();
    return seg_loss + w.alpha_e * adv_e + w.alpha_d * adv_d + w.alpha_m * adv_m;
}

// ---------------------------------------------------------------------------
// domain split
// ---------------------------------------------------------------------------

namespace {

std::array<double, 6> appearance_features(const ByteRaster& patch) {
    std::array<double, 6> f{};
    const std::int64_t hw = patch.pixel_count();
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sum_sq = 0.0;
        const int cc = std::min(c, patch.channels - 1);
        for (std::int64_t i = 0; i < hw; ++i) {
            const double v = patch.data[static_cast<std::size_t>(cc) * hw + i];
            sum += v;
            sum_sq += v * v;
        }
        const double mean = sum / static_cast<double>(hw);
        f[static_cast<std::size_t>(c)] = mean;
        f[static_cast<std::size_t>(c + 3)] =
            std::sqrt(std::max(0.0, sum_sq / static_cast<double>(hw) - mean * mean));
    }
    return f;
}

double sq_dist(const std::array<double, 6>& a, const std::array<double, 6>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < 6; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return d;
}

} // namespace

std::vector<DomainTag> domain_split(std::span<const ByteRaster> patches, std::uint64_t seed) {
    if (patches.size() < 2) throw DegenerateData("domain_split needs >= 2 patches");
    std::vector<std::array<double, 6>> feats;
    feats.reserve(patches.size());
    for (const auto& p : patches) feats.push_back(appearance_features(p));

    bool all_identical = true;
    for (std::size_t i = 1; i < feats.size() && all_identical; ++i)
        all_identical = feats[i] == feats[0];
    if (all_identical) // degenerate: one appearance, no second domain
        return std::vector<DomainTag>(patches.size(), DomainTag::A);

    // 2-means, k-means++ seeding
    Rng rng(seed);
    std::array<std::array<double, 6>, 2> centers{};
    const auto first = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(feats.size()) - 1));
    centers[0] = feats[first];
    std::vector<double> d2(feats.size());
    double total = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        d2[i] = sq_dist(feats[i], centers[0]);
        total += d2[i];
    }
    double pick = rng.uniform() * total;
    std::size_t second = feats.size() - 1;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        pick -= d2[i];
        if (pick <= 0.0) {
            second = i;
            break;
        }
    }
    centers[1] = feats[second];
    if (centers[1] == centers[0]) { // fall back to the farthest point
        std::size_t far = 0;
        for (std::size_t i = 1; i < feats.size(); ++i)
            if (d2[i] > d2[far]) far = i;
        centers[1] = feats[far];
    }

    std::vector<int> assign(feats.size(), 0);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < feats.size(); ++i) {
            const int a = sq_dist(feats[i], centers[0]) <= sq_dist(feats[i], centers[1]) ? 0 : 1;
            if (a != assign[i]) {
                assign[i] = a;
                changed = true;
            }
        }
        std::array<std::array<double, 6>, 2> sums{};
        std::array<int, 2> counts{};
        for (std::size_t i = 0; i < feats.size(); ++i) {
            counts[static_cast<std::size_t>(assign[i])] += 1;
            for (std::size_t k = 0; k < 6; ++k)
                sums[static_cast<std::size_t>(assign[i])][k] += feats[i][k];
        }
        for (std::size_t c = 0; c < 2; ++c)
            if (counts[c] > 0)
                for (std::size_t k = 0; k < 6; ++k)
                    centers[c][k] = sums[c][k] / counts[c];
        if (!changed && iter > 0) break;
    }

    // the larger cluster is A; ties break toward the cluster of patch 0
    std::array<int, 2> counts{};
    for (const int a : assign) counts[static_cast<std::size_t>(a)] += 1;
    int a_cluster = counts[0] >= counts[1] ? 0 : 1;
    if (counts[0] == counts[1]) a_cluster = assign[0];

    std::vector<DomainTag> tags(feats.size());
    for (std::size_t i = 0; i < feats.size(); ++i)
        tags[i] = assign[i] == a_cluster ? DomainTag::A : DomainTag::B;
    return tags;
}

// ---------------------------------------------------------------------------
// training schedule
// ---------------------------------------------------------------------------

EpochRecord::EpochRecord()
    : l_seg(kNan), l_seg_eval(kNan), l_de(kNan), l_dd(kNan), l_dm(kNan), adv_e(kNan),
      adv_d(kNan), adv_m(kNan), l_full(kNan) {}

std::vector<double> TrainingReport::series(const std::string& name) const {
    std::vector<double> out;
    for (const auto& e : epochs) {
        double v = kNan;
        if (name == "l_seg") v = e.l_seg;
        else if (name == "l_seg_eval") v = e.l_seg_eval;
        else if (name == "l_de") v = e.l_de;
        else if (name == "l_dd") v = e.l_dd;
        else if (name == "l_dm") v = e.l_dm;
        else if (name == "adv_e") v = e.adv_e;
        else if (name == "adv_d") v = e.adv_d;
        else if (name == "adv_m") v = e.adv_m;
        else if (name == "l_full") v = e.l_full;
        else throw DataError("unknown series '" + name + "'");
        if (!std::isnan(v)) out.push_back(v);
    }
    return out;
}

std::string TrainingReport::to_json() const {
    nlohmann::json j;
    j["adversarial_enabled"] = adversarial_enabled;
    j["epochs"] = nlohmann::json::array();
    auto put = [](nlohmann::json& row, const char* key, double v) {
        if (std::isnan(v))
            row[key] = nullptr;
        else
            row[key] = v;
    };
    for (const auto& e : epochs) {
        nlohmann::json row;
        row["phase"] = e.phase;
        row["epoch"] = e.epoch;
        put(row, "l_seg", e.l_seg);
        put(row, "l_seg_eval", e.l_seg_eval);
        put(row, "l_de", e.l_de);
        put(row, "l_dd", e.l_dd);
        put(row, "l_dm", e.l_dm);
        put(row, "adv_e", e.adv_e);
        put(row, "adv_d", e.adv_d);
        put(row, "adv_m", e.adv_m);
        put(row, "l_full", e.l_full);
        j["epochs"].push_back(std::move(row));
    }
    return j.dump(2);
}

namespace {

// batch assembly: plain data tensors (inputs never require grad)
Tensor assemble(const std::vector<SegSample>& pool, std::span<const std::size_t> idx,
                bool masks) {
    const auto& first = masks ? pool[idx[0]].mask : pool[idx[0]].image;
    const auto s = first.shape();
    Tensor batch = Tensor::zeros({static_cast<int>(idx.size()), s.c, s.h, s.w});
    const std::size_t per = first.values().size();
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto& src = masks ? pool[idx[k]].mask : pool[idx[k]].image;
        if (!(src.shape() == s)) throw ShapeMismatch("segmentation samples differ in shape");
        std::copy(src.values().begin(), src.values().end(),
                  batch.values().begin() + static_cast<std::ptrdiff_t>(k * per));
    }
    return batch;
}

double eval_seg_loss(SegModel& model, const std::vector<SegSample>& all, int batch_size) {
    nn::NoGradGuard guard;
    model.set_training(false);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < all.size(); at += static_cast<std::size_t>(batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = at; i < std::min(all.size(), at + static_cast<std::size_t>(batch_size)); ++i)
            idx.push_back(i);
        Tensor pred = model.forward(assemble(all, idx, false));
        Tensor target = assemble(all, idx, true);
        total += dice_loss(pred, target).item() * static_cast<double>(idx.size());
        count += idx.size();
    }
    model.set_training(true);
    return total / static_cast<double>(count);
}

struct PairedBatch {
    std::vector<std::size_t> a, b; // indices into the combined pool
};

// paired-domain batch stream; the shorter domain wraps within the epoch
std::vector<PairedBatch> make_paired_batches(const std::vector<std::size_t>& pool_a,
                                             const std::vector<std::size_t>& pool_b,
                                             int batch_size, Rng rng_a, Rng rng_b) {
    const int half = std::max(1, batch_size / 2);
    auto order_a = pool_a;
    auto order_b = pool_b;
    rng_a.shuffle(order_a);
    rng_b.shuffle(order_b);
    const std::size_t steps =
        (std::max(order_a.size(), order_b.size()) + static_cast<std::size_t>(half) - 1) /
        static_cast<std::size_t>(half);
    std::vector<PairedBatch> out;
    for (std::size_t s = 0; s < steps; ++s) {
        PairedBatch pb;
        for (int k = 0; k < half; ++k) {
            if (!order_a.empty())
                pb.a.push_back(order_a[(s * static_cast<std::size_t>(half) + static_cast<std::size_t>(k)) % order_a.size()]);
            if (!order_b.empty())
                pb.b.push_back(order_b[(s * static_cast<std::size_t>(half) + static_cast<std::size_t>(k)) % order_b.size()]);
        }
        out.push_back(std::move(pb));
    }
    return out;
}

} // namespace

TrainingReport run_schedule(SegModel& model, MirrorDiscriminator& d_enc,
                            MirrorDiscriminator& d_dec, MaskDiscriminator& d_mask,
                            std::vector<SegSample> domain_a, std::vector<SegSample> domain_b,
                            const TrainSchedule& schedule, const AdvWeights& weights,
                            const AdvTrainOptions& options) {
    schedule.validate();
    weights.validate();
    if (domain_a.empty() && domain_b.empty())
        throw EmptyDomain("run_schedule called with no training samples");

    // degraded mode: one appearance domain, plain segmentation training
    bool adversarial = !domain_a.empty() && !domain_b.empty();
    std::vector<SegSample> pool = std::move(domain_a);
    std::vector<std::size_t> idx_a, idx_b;
    for (std::size_t i = 0; i < pool.size(); ++i) idx_a.push_back(i);
    for (auto& s : domain_b) {
        idx_b.push_back(pool.size());
        pool.push_back(std::move(s));
    }
    if (!adversarial) {
        if (idx_a.empty()) idx_a = idx_b; // all data on one side either way
        idx_b.clear();
    }

    TrainingReport report;
    report.adversarial_enabled = adversarial && schedule.d0 + schedule.alt_epochs > 0;

    const Rng base(options.seed);
    nn::Adam g_opt(model.parameters(), options.seg_lr);
    nn::Adam de_opt(d_enc.parameters(), options.d_lr);
    nn::Adam dd_opt(d_dec.parameters(), options.d_lr);
    nn::Adam dm_opt(d_mask.parameters(), options.d_lr);

    int g_epoch = 0; // indexes the generator data stream across phases 1 and 3
    int d_epoch = 0;
    int position = 0;

    auto run_generator_epoch = [&](bool with_adv) {
        EpochRecord rec;
        rec.phase = with_adv ? "alt_gen" : "seg";
        rec.epoch = position;
        model.set_training(true);
        const auto batches = make_paired_batches(idx_a, idx_b, options.batch_size,
                                                 base.derive("gdata.a", static_cast<std::uint64_t>(g_epoch)),
                                                 base.derive("gdata.b", static_cast<std::uint64_t>(g_epoch)));
        double seg_sum = 0.0, full_sum = 0.0;
        double adv_e_sum = 0.0, adv_d_sum = 0.0, adv_m_sum = 0.0;
        std::size_t adv_batches = 0, n_batches = 0;
        for (const auto& pb : batches) {
            model.zero_grad();
            const std::size_t na = pb.a.size();
            const std::size_t nb = pb.b.size();

            SegModel::ForwardResult ra, rb;
            Tensor seg;
            if (na > 0) {
                ra = model.forward_with_taps(assemble(pool, pb.a, false));
                seg = dice_loss(ra.mask, assemble(pool, pb.a, true));
            }
            if (nb > 0) {
                rb = model.forward_with_taps(assemble(pool, pb.b, false));
                Tensor seg_b = dice_loss(rb.mask, assemble(pool, pb.b, true));
                if (seg.defined()) {
                    const double wa = static_cast<double>(na) / static_cast<double>(na + nb);
                    seg = nn::add(nn::scale(seg, wa), nn::scale(seg_b, 1.0 - wa));
                } else {
                    seg = seg_b;
                }
            }

            Tensor total = seg;
            const bool do_adv = with_adv && adversarial && na > 0 && nb > 0;
            if (do_adv) {
                Tensor ae, ad, am;
                if (weights.alpha_e != 0.0) ae = adv_loss(d_enc, ra.encoder_taps, rb.encoder_taps);
                if (weights.alpha_d != 0.0) ad = adv_loss(d_dec, ra.decoder_taps, rb.decoder_taps);
                if (weights.alpha_m != 0.0) {
                    Tensor am_a = adv_loss_mask(d_mask, ra.mask, options.dm_adv_form);
                    Tensor am_b = adv_loss_mask(d_mask, rb.mask, options.dm_adv_form);
                    const double wa = static_cast<double>(na) / static_cast<double>(na + nb);
                    am = nn::add(nn::scale(am_a, wa), nn::scale(am_b, 1.0 - wa));
                }
                total = full_loss(seg, ae, ad, am, weights);
                if (ae.defined()) adv_e_sum += ae.item();
                if (ad.defined()) adv_d_sum += ad.item();
                if (am.defined()) adv_m_sum += am.item();
                ++adv_batches;
            }

            total.backward();
            g_opt.step();
            seg_sum += seg.item();
            full_sum += total.item();
            ++n_batches;
        }
        rec.l_seg = seg_sum / static_cast<double>(n_batches);
        if (with_adv) {
            rec.l_full = full_sum / static_cast<double>(n_batches);
            if (adv_batches > 0) {
                if (weights.alpha_e != 0.0) rec.adv_e = adv_e_sum / static_cast<double>(adv_batches);
                if (weights.alpha_d != 0.0) rec.adv_d = adv_d_sum / static_cast<double>(adv_batches);
                if (weights.alpha_m != 0.0) rec.adv_m = adv_m_sum / static_cast<double>(adv_batches);
            }
        }
        rec.l_seg_eval = eval_seg_loss(model, pool, options.batch_size);
        ++g_epoch;
        ++position;
        report.epochs.push_back(std::move(rec));
    };

    auto run_discriminator_epoch = [&](bool alternating) {
        EpochRecord rec;
        rec.phase = alternating ? "alt_disc" : "disc";
        rec.epoch = position;
        const auto batches = make_paired_batches(idx_a, idx_b, options.batch_size,
                                                 base.derive("ddata.a", static_cast<std::uint64_t>(d_epoch)),
                                                 base.derive("ddata.b", static_cast<std::uint64_t>(d_epoch)));
        double de_sum = 0.0, dd_sum = 0.0, dm_sum = 0.0;
        std::size_t n = 0;
        for (const auto& pb : batches) {
            if (pb.a.empty() || pb.b.empty()) continue;
            // generator runs as a fixed feature extractor here
            SegModel::ForwardResult ra, rb;
            {
                nn::NoGradGuard guard;
                model.set_training(false);
                ra = model.forward_with_taps(assemble(pool, pb.a, false));
                rb = model.forward_with_taps(assemble(pool, pb.b, false));
                model.set_training(true);
            }

            d_enc.zero_grad();
            Tensor lde = d_loss(d_enc, rb.encoder_taps, ra.encoder_taps);
            lde.backward();
            de_opt.step();

            d_dec.zero_grad();
            Tensor ldd = d_loss(d_dec, rb.decoder_taps, ra.decoder_taps);
            ldd.backward();
            dd_opt.step();

            std::vector<std::size_t> all_idx = pb.a;
            all_idx.insert(all_idx.end(), pb.b.begin(), pb.b.end());
            Tensor gt = assemble(pool, all_idx, true);
            Tensor preds = Tensor::zeros({static_cast<int>(all_idx.size()), 1,
                                          gt.shape().h, gt.shape().w});
            const std::size_t per = static_cast<std::size_t>(gt.shape().h) * gt.shape().w;
            for (std::size_t k = 0; k < pb.a.size(); ++k)
                std::copy(ra.mask.values().begin() + static_cast<std::ptrdiff_t>(k * per),
                          ra.mask.values().begin() + static_cast<std::ptrdiff_t>((k + 1) * per),
                          preds.values().begin() + static_cast<std::ptrdiff_t>(k * per));
            for (std::size_t k = 0; k < pb.b.size(); ++k)
                std::copy(rb.mask.values().begin() + static_cast<std::ptrdiff_t>(k * per),
                          rb.mask.values().begin() + static_cast<std::ptrdiff_t>((k + 1) * per),
                          preds.values().begin() +
                              static_cast<std::ptrdiff_t>((pb.a.size() + k) * per));

            d_mask.zero_grad();
            Tensor ldm = d_loss_mask(d_mask, gt, preds);
            ldm.backward();
            dm_opt.step();

            de_sum += lde.item();
            dd_sum += ldd.item();
            dm_sum += ldm.item();
            ++n;
        }
        if (n > 0) {
            rec.l_de = de_sum / static_cast<double>(n);
            rec.l_dd = dd_sum / static_cast<double>(n);
            rec.l_dm = dm_sum / static_cast<double>(n);
        }
        rec.l_seg_eval = eval_seg_loss(model, pool, options.batch_size);
        ++d_epoch;
        ++position;
        report.epochs.push_back(std::move(rec));
    };

    // phase 1: generator only
    for (int e = 0; e < schedule.s0; ++e) run_generator_epoch(false);

    if (report.adversarial_enabled) {
        // phase 2: discriminators only
        for (int e = 0; e < schedule.d0; ++e) run_discriminator_epoch(false);
        // phase 3: alternate one discriminator pass with one generator pass
        g_opt.set_lr(options.adv_g_lr);
        for (int e = 0; e < schedule.alt_epochs; ++e) {
            run_discriminator_epoch(true);
            run_generator_epoch(true);
        }
    } else {
        // degraded schedule: the alternating epochs still train segmentation
        for (int e = 0; e < schedule.alt_epochs; ++e) run_generator_epoch(false);
    }

    model.set_training(false);
    return report;
}

std::vector<TapSpec> tap_specs_from_shapes(const std::vector<TensorShape>& shapes) {
    std::vector<TapSpec> specs;
    specs.reserve(shapes.size());
    for (const auto& s : shapes) specs.push_back({s.c, s.h, s.w});
    return specs;
}

} // namespace slidepipe
