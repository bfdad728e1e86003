#include <doctest.h>

#include <cmath>
#include <vector>

#include "divctl/errors.hpp"
#include "divctl/factorized.hpp"
#include "divctl/gate.hpp"
#include "divctl/ops.hpp"

using namespace divctl;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    std::vector<double> v(r * c);
    for (double& x : v) {
        x = rng.normal();
    }
    return Tensor::from_data({r, c}, v);
}

double frob(std::span<const double> a) {
    double s = 0.0;
    for (double x : a) {
        s += x * x;
    }
    return std::sqrt(s);
}

// Brute-force sum of rank-1 terms, independent of scaled_outer.
std::vector<double> brute_force(const FactorizedWeight& fw, const std::vector<double>& g) {
    std::vector<double> w(fw.out_dim * fw.in_dim, 0.0);
    auto add_block = [&](const ComponentBlock& b, auto coef) {
        for (std::size_t j = 0; j < b.size(); ++j) {
            const double s = b.sigma[j] * coef(j);
            for (std::size_t r = 0; r < fw.out_dim; ++r) {
                for (std::size_t c = 0; c < fw.in_dim; ++c) {
                    w[r * fw.in_dim + c] += b.u.at(r, j) * s * b.v.at(c, j);
                }
            }
        }
    };
    add_block(fw.learngenes, [](std::size_t) { return 1.0; });
    add_block(fw.tailors, [&](std::size_t j) { return g[j]; });
    return w;
}

}  // namespace

TEST_CASE("svd_factorize reconstructs random matrices") {
    Rng rng(11);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t r = 1 + rng.below(64), c = 1 + rng.below(64);
        const Tensor w = random_matrix(r, c, rng);
        const FactorizedWeight fw = svd_factorize(w);
        CHECK(fw.rank() == std::min(r, c));
        CHECK(fw.n_tailor() == 0);
        const Tensor back = reconstruct(fw);
        std::vector<double> diff(w.numel());
        for (std::size_t i = 0; i < diff.size(); ++i) {
            diff[i] = back[i] - w[i];
        }
        CHECK(frob(diff) / frob(w.data()) <= 1e-10);
        for (std::size_t j = 1; j < fw.rank(); ++j) {
            CHECK(fw.learngenes.sigma[j - 1] >= fw.learngenes.sigma[j]);
        }
    }
}

TEST_CASE("svd truncation keeps the leading directions") {
    Rng rng(3);
    const Tensor w = random_matrix(10, 8, rng);
    const FactorizedWeight fw = svd_factorize(w, 3);
    CHECK(fw.rank() == 3);
    CHECK_THROWS_AS(svd_factorize(w, 0), ContractError);
}

TEST_CASE("svd_factorize rejects non-finite input") {
    const Tensor w = Tensor::from_data({2, 2}, {1.0, NAN, 0.0, 1.0});
    CHECK_THROWS_AS(svd_factorize(w), NumericError);
}

TEST_CASE("partition splits components in order") {
    Rng rng(5);
    const FactorizedWeight fw = svd_factorize(random_matrix(6, 6, rng));
    const FactorizedWeight p = partition(fw, 4, 2);
    CHECK(p.n_learngene() == 4);
    CHECK(p.n_tailor() == 2);
    CHECK(p.tailors.sigma[0] == fw.learngenes.sigma[4]);
    CHECK_THROWS_AS(partition(fw, 4, 1), ContractError);
    // Re-partitioning works from the concatenated list.
    const FactorizedWeight q = partition(p, 1, 5);
    CHECK(q.learngenes.sigma[0] == fw.learngenes.sigma[0]);
    CHECK(q.tailors.sigma[4] == fw.learngenes.sigma[5]);
}

TEST_CASE("compose_weight matches the rank-1 brute force") {
    Rng rng(17);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t out = 2 + rng.below(20), in = 2 + rng.below(20);
        const std::size_t r = std::min(out, in);
        const std::size_t nt = rng.below(r + 1);
        const FactorizedWeight fw = partition(svd_factorize(random_matrix(out, in, rng)), r - nt, nt);
        std::vector<double> g(nt, 0.0);
        const std::size_t k = nt ? 1 + rng.below(nt) : 0;
        for (std::size_t j = 0; j < k; ++j) {
            g[rng.below(nt)] = rng.uniform();
        }
        const GatedCoefficients coeffs = fixed_coefficients(g);
        const Tensor w = compose_weight(fw, coeffs);
        const auto ref = brute_force(fw, g);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(std::abs(w[i] - ref[i]) <= 1e-12);
        }
    }
}

TEST_CASE("all tailors at unit weight equal the full reconstruction") {
    Rng rng(2);
    const FactorizedWeight fw = partition(svd_factorize(random_matrix(8, 8, rng)), 5, 3);
    const Tensor a = compose_weight(fw, all_active_unit(3));
    const Tensor b = reconstruct(fw);
    for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-13));
    }
}

TEST_CASE("compose_weight checks the coefficient length") {
    Rng rng(1);
    const FactorizedWeight fw = init_factorized(6, 6, 4, 2, ProjectionTag::q, 1, rng);
    CHECK_THROWS_AS(compose_weight(fw, fixed_coefficients({1.0, 0.0, 0.0})), ContractError);
}

TEST_CASE("inactive tailors receive exactly zero gradient") {
    Rng rng(8);
    FactorizedWeight fw = init_factorized(6, 5, 2, 3, ProjectionTag::in, 2, rng);
    const Tensor x = random_matrix(4, 5, rng);
    const Tensor alpha = softmax(Tensor::from_data({3}, {0.1, 0.5, -0.2}, true));
    GatedCoefficients c;
    c.active_set = {1};
    c.g = mul(alpha, Tensor::from_data({3}, {0.0, 1.0, 0.0}));
    backward(sum(linear(x, compose_weight(fw, c))));
    for (std::size_t r = 0; r < 6; ++r) {
        CHECK(fw.tailors.u.grad()[r * 3 + 0] == 0.0);
        CHECK(fw.tailors.u.grad()[r * 3 + 2] == 0.0);
    }
    CHECK(fw.tailors.sigma.grad()[0] == 0.0);
    CHECK(fw.tailors.sigma.grad()[1] != 0.0);
    CHECK(masked_gradient_apply(fw, c.active_set) == 0.0);
    // A stray gradient is removed and reported.
    fw.tailors.v.mutable_grad()[0] = 0.25;
    CHECK(masked_gradient_apply(fw, c.active_set) == 0.25);
    CHECK(fw.tailors.v.grad()[0] == 0.0);
}

TEST_CASE("kaiming init respects the bound and fresh tailors differ") {
    Rng rng(4);
    const Tensor w = kaiming_uniform(32, 16, rng);
    for (double x : w.data()) {
        CHECK(std::abs(x) <= 0.25);
    }
    const FactorizedWeight fw = init_factorized(16, 16, 12, 4, ProjectionTag::o, 1, rng);
    const ComponentBlock tb = fresh_tailors(fw, rng);
    CHECK(tb.size() == 4);
    CHECK(tb.u.shape() == fw.tailors.u.shape());
    CHECK(tb.sigma[0] != fw.tailors.sigma[0]);
    CHECK(fw.parameter_count() == 16 * (16 + 16 + 1));
}

TEST_CASE("paper-scale splits are accepted") {
    for (std::size_t r : {std::size_t{1152}, std::size_t{1024}}) {
        FactorizedWeight fw;
        fw.out_dim = fw.in_dim = r;
        fw.learngenes.u = Tensor::zeros({r, r});
        fw.learngenes.v = Tensor::zeros({r, r});
        fw.learngenes.sigma = Tensor::full({r}, 1.0);
        const FactorizedWeight p = partition(fw, r / 2, r / 2);
        CHECK(p.n_learngene() == r / 2);
        CHECK(p.n_tailor() == r / 2);
    }
}
