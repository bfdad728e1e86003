#include <doctest.h>

#include <cmath>
#include <set>

#include "divctl/diffusion.hpp"
#include "divctl/errors.hpp"
#include "divctl/ops.hpp"

using namespace divctl;

namespace {

DenoiserConfig tiny() {
    DenoiserConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.token_dim = 8;
    c.layers = 2;
    c.controlnet_layers = 2;
    c.mlp_hidden = 16;
    c.timesteps = 10;
    c.repa_layer = 1;
    c.repa_hidden = 6;
    c.repa_dim = 5;
    c.n_learngene = 6;
    c.n_tailor = 2;
    return c;
}

GateConfig tiny_gate() {
    GateConfig g;
    g.embed_dim = 8;
    g.top_k = 1;
    return g;
}

Image noise_image(std::size_t s, std::uint64_t seed) {
    Rng rng(seed);
    Image im(s, s);
    for (double& v : im.px) {
        v = rng.uniform(-1.0, 1.0);
    }
    return im;
}

Tensor random_rows(std::size_t r, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(r * c);
    for (double& x : v) {
        x = rng.normal();
    }
    return Tensor::from_data({r, c}, v);
}

}  // namespace

TEST_CASE("noise schedule") {
    const NoiseSchedule s(100, 1e-4, 2e-2);
    CHECK(s.beta(0) == 1e-4);
    CHECK(s.beta(99) == doctest::Approx(2e-2).epsilon(1e-15));
    for (std::size_t t = 1; t < 100; ++t) {
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.beta(t) > s.beta(t - 1));
    }
    CHECK(s.posterior_variance(0) == 0.0);
    CHECK(s.posterior_variance(50) < s.beta(50));
    const Tensor z = Tensor::zeros({1, 4});
    CHECK_THROWS_AS(forward_noise(s, z, 100, z), ContractError);
}

TEST_CASE("posterior mean inverts a perfect noise prediction at t = 0") {
    const NoiseSchedule s(10, 1e-3, 0.2);
    const std::vector<double> z0{0.3, -0.5};
    const std::vector<double> eps{1.0, -2.0};
    const Tensor zt = forward_noise(s, Tensor::from_data({1, 2}, z0), 0, Tensor::from_data({1, 2}, eps));
    const auto m = posterior_mean(s, zt.data(), eps, 0);
    CHECK(m[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(m[1] == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("patchify round trip") {
    const Image a = noise_image(8, 1), b = noise_image(8, 2);
    const std::vector<Image> imgs{a, b};
    const Tensor x = images_to_tensor(imgs);
    const Tensor p = patchify(x, 8, 4);
    CHECK(p.shape() == Shape{8, 16});
    // Patch 1 of image 0 starts at row 0, column 4.
    CHECK(p.at(1, 0) == a.at(0, 4));
    CHECK(p.at(1, 5) == a.at(1, 5));
    const Tensor back = unpatchify(p, 8, 4);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(back[i] == x[i]);
    }
}

TEST_CASE("config validation") {
    DenoiserConfig c = tiny();
    CHECK_NOTHROW(c.validate());
    c.n_tailor = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.repa_layer = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.image_size = 10;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("parameters have unique names and add up") {
    ControlModel m = make_model(tiny(), tiny_gate(), 3);
    const auto params = named_parameters(m);
    std::set<std::string> names;
    std::size_t total = 0;
    for (const auto& p : params) {
        CHECK(names.insert(p.name).second);
        CHECK(p.tensor->requires_grad());
        total += p.tensor->numel();
    }
    CHECK(total == parameter_count(m));
    CHECK(names.count("branch/block1/q/tailor/u") == 1);
    CHECK(names.count("gate/w2") == 1);
}

TEST_CASE("zero-initialized injections leave the denoiser output unchanged") {
    const ControlModel m = make_model(tiny(), tiny_gate(), 4);
    const Tensor zt = random_rows(8, 16, 1), cond = random_rows(8, 16, 2);
    const std::vector<std::size_t> t{3, 7};
    const auto out = controlnet_encode(m, cond, all_active_unit(2), t);
    CHECK(out.injections.size() == 2);
    for (const Tensor& c : out.injections) {
        for (double v : c.data()) {
            CHECK(v == 0.0);
        }
    }
    const Tensor with = denoise_predict(m, zt, out.injections, t);
    const Tensor without = denoise_predict(m, zt, {}, t);
    for (std::size_t i = 0; i < with.numel(); ++i) {
        CHECK(with[i] == without[i]);
    }
}

TEST_CASE("same seed gives the same model") {
    ControlModel a = make_model(tiny(), tiny_gate(), 9), b = make_model(tiny(), tiny_gate(), 9);
    ControlModel c = make_model(tiny(), tiny_gate(), 10);
    const auto pa = named_parameters(a), pb = named_parameters(b), pc = named_parameters(c);
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(std::equal(pa[i].tensor->data().begin(), pa[i].tensor->data().end(), pb[i].tensor->data().begin()));
        any_diff |= !std::equal(pa[i].tensor->data().begin(), pa[i].tensor->data().end(), pc[i].tensor->data().begin());
    }
    CHECK(any_diff);
}

TEST_CASE("dropout only in training mode") {
    const ControlModel m = make_model(tiny(), tiny_gate(), 5);
    const Tensor zt = random_rows(4, 16, 1);
    const std::vector<std::size_t> t{5};
    const Tensor e1 = denoise_predict(m, zt, {}, t), e2 = denoise_predict(m, zt, {}, t);
    CHECK(std::equal(e1.data().begin(), e1.data().end(), e2.data().begin()));
    Rng rng(1);
    ForwardOptions train{true, &rng};
    const Tensor e3 = denoise_predict(m, zt, {}, t, train);
    CHECK_FALSE(std::equal(e1.data().begin(), e1.data().end(), e3.data().begin()));
    ForwardOptions missing{true, nullptr};
    CHECK_THROWS_AS(denoise_predict(m, zt, {}, t, missing), ContractError);
}

TEST_CASE("alignment loss is bounded and checks rows") {
    const ControlModel m = make_model(tiny(), tiny_gate(), 6);
    const Tensor f = random_rows(8, 8, 3);
    const Tensor e = encode_patches(m.repa, random_rows(8, 16, 4));
    const double l = repa_loss(f, e, m.repa).item();
    CHECK(l >= -1.0);
    CHECK(l <= 1.0);
    CHECK_THROWS_AS(repa_loss(f, slice_rows(e, 0, 4), m.repa), ContractError);
}

TEST_CASE("frozen encoder rows are unit or flagged") {
    const ControlModel m = make_model(tiny(), tiny_gate(), 7);
    Image im = noise_image(8, 3);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            im.at(r, c) = 0.0;
        }
    }
    const EncodedImage enc = encode_condition_image(m.repa, im, 4);
    CHECK(enc.embedding.shape() == Shape{4, 5});
    CHECK(enc.degenerate == std::vector<std::uint8_t>{1, 0, 0, 0});
    for (std::size_t r = 1; r < 4; ++r) {
        double n = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            n += enc.embedding.at(r, j) * enc.embedding.at(r, j);
        }
        CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("total loss") {
    const LossReport r = total_loss(0.5, -0.8, 0.05, 12);
    CHECK(r.l_total == doctest::Approx(0.5 - 0.04));
    CHECK(r.step == 12);
    CHECK(total_loss(0.5, -0.8, 0.0).l_total == 0.5);
}

TEST_CASE("sampling is deterministic and per-item") {
    const ControlModel m = make_model(tiny(), tiny_gate(), 8);
    const std::vector<Image> conds{noise_image(8, 1), noise_image(8, 2)};
    const auto coeffs = fixed_coefficients({1.0, 0.0});
    const auto a = sample_batch(m, conds, coeffs, 42);
    const auto b = sample_batch(m, conds, coeffs, 42);
    CHECK(a == b);
    const std::vector<Image> second{conds[1]};
    const auto c = sample_batch(m, second, coeffs, 42, 1);
    for (std::size_t i = 0; i < c[0].px.size(); ++i) {
        CHECK(c[0].px[i] == doctest::Approx(a[1].px[i]).epsilon(1e-10));
    }
    CHECK(sample(m, conds[0], coeffs, 42) == a[0]);
    for (double v : a[0].px) {
        CHECK(std::abs(v) <= 1.0);
    }
}

TEST_CASE("end-to-end loss gradient matches finite differences") {
    const OpCheck check = end_to_end_loss_check();
    for (std::uint64_t seed : {1u, 2u}) {
        auto [f, params] = check.build(seed);
        const GradCheckReport rep = finite_diff_check(f, params);
        INFO("worst " << rep.worst_param << " err " << rep.max_rel_error);
        CHECK(rep.passed);
    }
}
