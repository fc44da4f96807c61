#include <doctest.h>

#include <cmath>
#include <sstream>

#include "slidepipe/backbone.hpp"
#include "slidepipe/nn/optim.hpp"
#include "test_support.hpp"

using namespace slidepipe;
using nn::Tensor;
using nn::TensorShape;
using testsup::max_grad_rel_error;
using testsup::random_tensor;

namespace {

BackboneConfig tiny_config(bool atrous, bool ppm, bool scse, bool hyper) {
    BackboneConfig cfg;
    cfg.preset = EncoderPreset::tiny;
    cfg.atrous.enabled = atrous;
    cfg.ppm.enabled = ppm;
    cfg.scse = scse;
    cfg.hypercolumn = hyper;
    cfg.input_size = 64;
    return cfg;
}

} // namespace

TEST_SUITE_BEGIN("backbone");

TEST_CASE("plain U-shaped model honors the forward shape contract") {
    BackboneConfig cfg = tiny_config(false, false, false, false);
    cfg.ibn_stages.clear();
    SegModel model(cfg, 1);
    model.set_training(false);

    Rng rng(2);
    Tensor x = random_tensor({2, 3, 64, 64}, rng, false, 0.0, 1.0);
    auto r = model.forward_with_taps(x);
    CHECK(r.mask.shape() == TensorShape{2, 1, 64, 64});
    for (const double v : r.mask.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    REQUIRE(r.encoder_taps.size() == 5);
    REQUIRE(r.decoder_taps.size() == 5);
    const auto enc = model.encoder_tap_shapes(2, 64, 64);
    const auto dec = model.decoder_tap_shapes(2, 64, 64);
    for (int i = 0; i < 5; ++i) {
        CHECK(r.encoder_taps[static_cast<std::size_t>(i)].shape() == enc[static_cast<std::size_t>(i)]);
        CHECK(r.decoder_taps[static_cast<std::size_t>(i)].shape() == dec[static_cast<std::size_t>(i)]);
    }
    // halving per encoder stage, doubling per decoder stage
    CHECK(enc[4].h == 64 / 32);
    CHECK(dec[4].h == 64);
}

TEST_CASE("atrous keeps E4/E5 resolution: deepest tap 4x larger per side") {
    SegModel with_atrous(tiny_config(true, false, false, false), 1);
    SegModel without(tiny_config(false, false, false, false), 1);
    const auto ea = with_atrous.encoder_tap_shapes(1, 64, 64);
    const auto en = without.encoder_tap_shapes(1, 64, 64);
    CHECK(ea[3].h == en[2].h); // E4 stays at E3 resolution
    CHECK(ea[4].h == en[2].h);
    CHECK(ea[4].h == 4 * en[4].h);

    Rng rng(3);
    Tensor x = random_tensor({1, 3, 64, 64}, rng, false, 0.0, 1.0);
    with_atrous.set_training(false);
    auto r = with_atrous.forward_with_taps(x);
    CHECK(r.encoder_taps[4].shape() == ea[4]);
    CHECK(r.mask.shape() == TensorShape{1, 1, 64, 64});
}

TEST_CASE("minimal 32x32 input yields a single-pixel deepest tap") {
    SegModel model(tiny_config(false, true, true, true), 5);
    model.set_training(false);
    Rng rng(7);
    Tensor x = random_tensor({1, 3, 32, 32}, rng, false, 0.0, 1.0);
    auto r = model.forward_with_taps(x);
    CHECK(r.encoder_taps[4].shape() == TensorShape{1, 64, 1, 1});
    CHECK(r.mask.shape() == TensorShape{1, 1, 32, 32});
}

TEST_CASE("ppm center channel count is pre-ppm plus one fused branch per scale") {
    SegModel model(tiny_config(false, true, false, false), 1);
    // tiny E5 = 64 channels; four scales at 64/4 = 16 each
    CHECK(model.center_channels() == 64 + 4 * 16);
    SegModel no_ppm(tiny_config(false, false, false, false), 1);
    CHECK(no_ppm.center_channels() == 64);
}

TEST_CASE("reference preset mirrors the 50-layer residual encoder") {
    BackboneConfig cfg; // defaults: reference, everything on
    cfg.input_size = 512;
    SegModel model(cfg, 1);
    const auto enc = model.encoder_tap_shapes(1, 512, 512);
    CHECK(enc[0] == TensorShape{1, 64, 256, 256});
    CHECK(enc[1] == TensorShape{1, 256, 128, 128});
    CHECK(enc[2] == TensorShape{1, 512, 64, 64});
    // atrous on by default: E4/E5 hold /8
    CHECK(enc[3] == TensorShape{1, 1024, 64, 64});
    CHECK(enc[4] == TensorShape{1, 2048, 64, 64});
    CHECK(model.center_channels() == 2048 * 2);
    const auto dec = model.decoder_tap_shapes(1, 512, 512);
    CHECK(dec[4] == TensorShape{1, 64, 512, 512});

    // a forward at the minimal legal size exercises the full bottleneck graph
    model.set_training(false);
    Rng rng(11);
    Tensor x = random_tensor({1, 3, 32, 32}, rng, false, 0.0, 1.0);
    CHECK(model.forward(x).shape() == TensorShape{1, 1, 32, 32});
}

TEST_CASE("scse") {
    Rng rng(13);
    ScseBlock block(6, rng);

    SUBCASE("unit gates pass features through unchanged") {
        // drive both sigmoid inputs far positive via the bias terms
        for (auto& [name, t] : block.named_parameters()) {
            if (name == "excite.bias" || name == "spatial.bias")
                std::fill(t.values().begin(), t.values().end(), 50.0);
        }
        Tensor x = random_tensor({2, 6, 5, 5}, rng, false);
        Tensor y = scse_apply(block, x);
        for (std::size_t i = 0; i < x.values().size(); ++i)
            CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-9));
    }

    SUBCASE("zero input maps to zero output") {
        Tensor x = Tensor::zeros({1, 6, 4, 4});
        Tensor y = scse_apply(block, x);
        for (const double v : y.values()) CHECK(v == 0.0);
    }

    SUBCASE("per-element magnitude never exceeds the input") {
        Tensor x = random_tensor({3, 6, 7, 7}, rng, false, -2.0, 2.0);
        Tensor y = scse_apply(block, x);
        for (std::size_t i = 0; i < x.values().size(); ++i)
            CHECK(std::abs(y.values()[i]) <= std::abs(x.values()[i]) + 1e-12);
    }

    SUBCASE("shape preserved and differentiable") {
        Tensor x = random_tensor({2, 6, 4, 4}, rng, true);
        CHECK(scse_apply(block, x).shape() == x.shape());
        CHECK(max_grad_rel_error(
                  [&] { return nn::sum_all(nn::mul(scse_apply(block, x), scse_apply(block, x))); },
                  x) < 1e-6);
    }
}

TEST_CASE("hypercolumn head") {
    Rng rng(17);

    SUBCASE("single full-resolution tap reduces to a 1x1 projection") {
        HypercolumnHead head(4, rng);
        Tensor tap = Tensor::full({2, 4, 8, 8}, 0.3);
        Tensor out = head.forward({tap}, 8, 8);
        CHECK(out.shape() == TensorShape{2, 1, 8, 8});
        const double first = out.values()[0];
        for (const double v : out.values()) CHECK(v == doctest::Approx(first));
    }

    SUBCASE("constant taps at mixed scales give a spatially constant mask") {
        HypercolumnHead head(5, rng);
        Tensor coarse = Tensor::full({1, 3, 4, 4}, -0.7);
        Tensor fine = Tensor::full({1, 2, 8, 8}, 0.9);
        Tensor out = head.forward({coarse, fine}, 8, 8);
        const double first = out.values()[0];
        for (const double v : out.values()) {
            CHECK(v == doctest::Approx(first));
            CHECK(v > 0.0);
            CHECK(v < 1.0);
        }
    }
}

TEST_CASE("dice loss examples and laws") {
    SUBCASE("perfect prediction scores zero") {
        Tensor t = Tensor::from_vector({1, 1, 2, 2}, {1, 0, 1, 1});
        CHECK(dice_loss(t, t).item() == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("all-zero prediction vs all-one target") {
        const int n = 64;
        Tensor p = Tensor::zeros({1, 1, 8, 8});
        Tensor t = Tensor::full({1, 1, 8, 8}, 1.0);
        CHECK(dice_loss(p, t).item() == doctest::Approx(1.0 - 1.0 / (n + 1.0)));
    }
    SUBCASE("smoothing rescues the empty-empty case") {
        Tensor z = Tensor::zeros({1, 1, 4, 4});
        CHECK(dice_loss(z, z).item() == doctest::Approx(0.0));
    }
    SUBCASE("bounds on random inputs") {
        Rng rng(19);
        for (int k = 0; k < 20; ++k) {
            Tensor p = random_tensor({2, 1, 6, 6}, rng, false, 0.0, 1.0);
            Tensor t = Tensor::zeros({2, 1, 6, 6});
            for (auto& v : t.values()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
            const double l = dice_loss(p, t).item();
            CHECK(l >= 0.0);
            CHECK(l <= 1.0);
        }
    }
    SUBCASE("gradient matches finite differences") {
        Rng rng(23);
        Tensor p = random_tensor({1, 1, 8, 8}, rng, true, 0.05, 0.95);
        Tensor t = Tensor::zeros({1, 1, 8, 8});
        for (auto& v : t.values()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        CHECK(max_grad_rel_error([&] { return dice_loss(p, t); }, p, 1e-5) < 1e-7);
    }
    SUBCASE("shape mismatch rejected") {
        Tensor a = Tensor::zeros({1, 1, 4, 4});
        Tensor b = Tensor::zeros({1, 1, 2, 2});
        CHECK_THROWS_AS((void)dice_loss(a, b), ShapeMismatch);
    }
}

TEST_CASE("identical duplicated batch rows produce identical outputs in eval mode") {
    SegModel model(tiny_config(true, true, true, true), 29);
    model.set_training(false);
    Rng rng(31);
    Tensor one = random_tensor({1, 3, 32, 32}, rng, false, 0.0, 1.0);
    Tensor two = Tensor::zeros({2, 3, 32, 32});
    const std::size_t per = one.values().size();
    for (int n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < per; ++i)
            two.values()[static_cast<std::size_t>(n) * per + i] = one.values()[i];
    nn::NoGradGuard guard;
    Tensor y = model.forward(two);
    const std::size_t half = y.values().size() / 2;
    for (std::size_t i = 0; i < half; ++i)
        CHECK(y.values()[i] == doctest::Approx(y.values()[half + i]).epsilon(1e-12));
}

TEST_CASE("one optimization step strictly decreases the dice loss") {
    SegModel model(tiny_config(false, true, true, true), 37);
    model.set_training(true);
    Rng rng(41);
    Tensor x = random_tensor({1, 3, 32, 32}, rng, false, 0.0, 1.0);
    Tensor t = Tensor::zeros({1, 1, 32, 32});
    for (int y = 8; y < 24; ++y)
        for (int xx = 8; xx < 24; ++xx) t.values()[static_cast<std::size_t>(y) * 32 + xx] = 1.0;

    nn::Adam opt(model.parameters(), 1e-3);
    Tensor loss0 = dice_loss(model.forward(x), t);
    model.zero_grad();
    loss0.backward();
    opt.step();
    Tensor loss1 = dice_loss(model.forward(x), t);
    CHECK(loss1.item() < loss0.item());
}

TEST_CASE("checkpoints are self-describing and round-trip exactly") {
    const auto dir = testsup::scratch_dir("backbone_ckpt");
    BackboneConfig cfg = tiny_config(true, true, true, true);
    SegModel model(cfg, 43);
    model.set_training(false);

    Rng rng(47);
    Tensor x = random_tensor({1, 3, 32, 32}, rng, false, 0.0, 1.0);
    nn::NoGradGuard guard;
    Tensor before = model.forward(x);

    const auto file = dir / "seg.ckpt";
    save_checkpoint(model, file);
    CHECK(std::filesystem::exists(file));
    CHECK(std::filesystem::exists(file.string() + ".json"));

    auto loaded = load_checkpoint(file);
    loaded->set_training(false);
    CHECK(loaded->config().preset == cfg.preset);
    CHECK(loaded->config().atrous.enabled == cfg.atrous.enabled);
    Tensor after = loaded->forward(x);
    CHECK(after.values() == before.values());
}

TEST_CASE("config validation") {
    BackboneConfig cfg = tiny_config(false, true, false, false);
    cfg.input_size = 48;
    CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
    cfg.input_size = 64;
    cfg.ppm.scales = {1, 1, 2};
    CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
    cfg.ppm.scales = {1, 2, 3, 6};
    cfg.ibn_stages = {1};
    CHECK_THROWS_AS(cfg.validate(), InvalidConfig);
}

TEST_SUITE_END();
