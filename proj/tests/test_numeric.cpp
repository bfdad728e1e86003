#include <doctest.h>

#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

#include "divctl/errors.hpp"
#include "divctl/gradcheck.hpp"
#include "divctl/ops.hpp"
#include "divctl/optim.hpp"
#include "divctl/rng.hpp"
#include "divctl/tensor.hpp"

using namespace divctl;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, bool grad = false) {
    Rng rng(seed);
    std::vector<double> v(r * c);
    for (double& x : v) {
        x = rng.normal();
    }
    return Tensor::from_data({r, c}, v, grad);
}

// Reference SplitMix64 step written out independently (state += gamma, then mix).
std::uint64_t splitmix_ref(std::uint64_t state) {
    std::uint64_t z = state + 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace

TEST_CASE("splitmix64 matches the reference sequence") {
    CHECK(splitmix64(0) == 0xe220a8397b1dcdafull);
    for (std::uint64_t x : {1ull, 42ull, 0xdeadbeefull, ~0ull}) {
        CHECK(splitmix64(x) == splitmix_ref(x));
    }
    CHECK(derive_seed(7, Stream::noise, 3) ==
          splitmix_ref(splitmix_ref(splitmix_ref(7) ^ 3ull) ^ 3ull));
}

TEST_CASE("rng conversions follow the documented formulas") {
    const std::uint64_t seed = derive_seed(5, Stream::data, 11);
    std::mt19937_64 eng(seed);
    Rng rng(5, Stream::data, 11);
    const double u = static_cast<double>(eng() >> 11) * 0x1.0p-53;
    CHECK(rng.uniform() == u);
    const double u1 = 1.0 - static_cast<double>(eng() >> 11) * 0x1.0p-53;
    const double u2 = static_cast<double>(eng() >> 11) * 0x1.0p-53;
    CHECK(rng.normal() == std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
    const double u3 = static_cast<double>(eng() >> 11) * 0x1.0p-53;
    CHECK(rng.below(10) == static_cast<std::size_t>(u3 * 10.0));
}

TEST_CASE("rng streams are independent and reproducible") {
    Rng a(1, Stream::init, 0), b(1, Stream::init, 0), c(1, Stream::init, 1), d(1, Stream::noise, 0);
    const double x = a.uniform();
    CHECK(x == b.uniform());
    CHECK(x != c.uniform());
    CHECK(x != d.uniform());
    Rng r(3);
    double mean = 0.0, var = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        mean += z;
        var += z * z;
    }
    mean /= n;
    var = var / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("matmul and linear match loop oracles") {
    const Tensor a = random_matrix(3, 4, 1), b = random_matrix(4, 5, 2), w = random_matrix(5, 4, 3);
    const Tensor m = matmul(a, b);
    const Tensor l = linear(a, w);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0, t = 0.0;
            for (std::size_t k = 0; k < 4; ++k) {
                s += a.at(i, k) * b.at(k, j);
                t += a.at(i, k) * w.at(j, k);
            }
            CHECK(m.at(i, j) == doctest::Approx(s).epsilon(1e-14));
            CHECK(l.at(i, j) == doctest::Approx(t).epsilon(1e-14));
        }
    }
    CHECK_THROWS_AS(matmul(a, a), ContractError);
}

TEST_CASE("softmax rows sum to one and reject non-finite input") {
    const Tensor x = random_matrix(6, 7, 9);
    const Tensor s = softmax(x);
    for (std::size_t r = 0; r < 6; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 7; ++c) {
            CHECK(s.at(r, c) > 0.0);
            sum += s.at(r, c);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
    CHECK(softmax(Tensor::from_data({3}, {1000.0, 1000.0, -1000.0}))[0] == doctest::Approx(0.5));
    CHECK_THROWS_AS(softmax(Tensor::from_data({2}, {0.0, NAN})), InvalidInput);
    CHECK_THROWS_AS(softmax(Tensor::from_data({2}, {0.0, INFINITY})), InvalidInput);
}

TEST_CASE("layer_norm rows have zero mean and unit variance") {
    const Tensor y = layer_norm(random_matrix(4, 16, 4));
    for (std::size_t r = 0; r < 4; ++r) {
        double m = 0.0, v = 0.0;
        for (std::size_t c = 0; c < 16; ++c) {
            m += y.at(r, c);
        }
        m /= 16;
        for (std::size_t c = 0; c < 16; ++c) {
            v += (y.at(r, c) - m) * (y.at(r, c) - m);
        }
        CHECK(std::abs(m) < 1e-12);
        CHECK(v / 16 == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("attention rows are convex combinations of values") {
    const Tensor q = random_matrix(8, 4, 1), k = random_matrix(8, 4, 2);
    const Tensor v = Tensor::full({8, 4}, 3.0);
    const Tensor o = attention(q, k, v, 4);
    for (double x : o.data()) {
        CHECK(x == doctest::Approx(3.0).epsilon(1e-13));
    }
}

TEST_CASE("row_cosine handles zero rows") {
    const Tensor a = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 0.0}, true);
    const Tensor b = Tensor::from_data({2, 2}, {2.0, 0.0, 1.0, 1.0});
    const Tensor c = row_cosine(a, b);
    CHECK(c[0] == doctest::Approx(1.0));
    CHECK(c[1] == 0.0);
    backward(sum(c));
    for (double g : a.grad()) {
        CHECK(std::isfinite(g));
    }
    CHECK(a.grad()[2] == 0.0);
    CHECK(a.grad()[3] == 0.0);
}

TEST_CASE("scaled_outer skips zero-weight components entirely") {
    Tensor u = random_matrix(5, 4, 1, true), v = random_matrix(3, 4, 2, true);
    Tensor s = Tensor::from_data({4}, {1.0, 2.0, 3.0, 4.0}, true);
    Tensor c = Tensor::from_data({4}, {0.5, 0.0, 0.25, 0.0}, true);
    backward(sum(scaled_outer(u, s, v, c)));
    for (std::size_t r = 0; r < 5; ++r) {
        CHECK(u.grad()[r * 4 + 1] == 0.0);
        CHECK(u.grad()[r * 4 + 3] == 0.0);
        CHECK(u.grad()[r * 4 + 0] != 0.0);
    }
    CHECK(s.grad()[1] == 0.0);
    CHECK(s.grad()[3] == 0.0);
}

TEST_CASE("every registered op passes the finite-difference check") {
    for (const auto& op : registered_op_checks()) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto [f, leaves] = op.build(seed);
            const auto rep = finite_diff_check(f, leaves);
            INFO(op.name << " seed " << seed << " err " << rep.max_rel_error);
            CHECK(rep.passed);
        }
    }
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
    // y = x^2 with a deliberately doubled backward.
    Tensor x = Tensor::from_data({3}, {0.5, -1.0, 2.0}, true);
    auto f = [x]() {
        Buffer v(3);
        for (std::size_t i = 0; i < 3; ++i) {
            v[i] = x[i] * x[i];
        }
        return sum(make_result({3}, v, {x}, [x](detail::Node& self) {
            auto g = x.node()->grad.data();
            for (std::size_t i = 0; i < 3; ++i) {
                g[i] += 4.0 * x[i] * self.grad[i];
            }
        }));
    };
    const auto rep = finite_diff_check(f, {x});
    CHECK_FALSE(rep.passed);
    CHECK(rep.max_rel_error > 0.1);
}

TEST_CASE("no-grad guard drops the tape") {
    Tensor x = random_matrix(2, 2, 1, true);
    {
        NoGradGuard ng;
        CHECK_FALSE(grad_enabled());
        CHECK_FALSE(mul(x, x).requires_grad());
    }
    CHECK(grad_enabled());
    CHECK(mul(x, x).requires_grad());
}

TEST_CASE("AdamW follows the PyTorch update order") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.01;
    AdamW opt(cfg);
    Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
    opt.add("p", p);
    // Independent scalar reference.
    double ref[2] = {1.0, -2.0}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 3; ++t) {
        backward(sum(mul(p, p)));  // grad = 2p
        double g[2] = {2 * ref[0], 2 * ref[1]};
        opt.step(cfg.lr);
        opt.zero_grad();
        for (int i = 0; i < 2; ++i) {
            ref[i] *= 1 - cfg.lr * cfg.weight_decay;
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(0.9, t));
            const double vh = v[i] / (1 - std::pow(0.999, t));
            ref[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
        }
        CHECK(p[0] == doctest::Approx(ref[0]).epsilon(1e-13));
        CHECK(p[1] == doctest::Approx(ref[1]).epsilon(1e-13));
    }
    CHECK(opt.step_count() == 3);
}

TEST_CASE("AdamW masks leave values and moments untouched") {
    AdamW opt;
    Tensor p = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    Tensor frozen = Tensor::from_data({1}, {5.0}, true);
    opt.add("p", p);
    opt.add("f", frozen, true);
    backward(add(sum(mul(p, p)), sum(mul(frozen, frozen))));
    UpdateMasks masks{{"p", {1, 0, 1}}};
    opt.step(1e-2, &masks);
    CHECK(p[1] == 2.0);
    CHECK(p[0] != 1.0);
    CHECK(frozen[0] == 5.0);
    CHECK(opt.find("p")->m[1] == 0.0);
    CHECK(opt.find("p")->v[1] == 0.0);
    CHECK(opt.trainable_count() == 3);
}

TEST_CASE("multi-step learning-rate schedule") {
    LrSchedule s{1e-3, {3500}, 0.4};
    CHECK(s.lr_at(0) == 1e-3);
    CHECK(s.lr_at(3499) == 1e-3);
    CHECK(s.lr_at(3500) == doctest::Approx(4e-4).epsilon(1e-15));
    LrSchedule two{1.0, {10, 20}, 0.5};
    CHECK(two.lr_at(25) == 0.25);
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Tensor x = Tensor::from_data({1}, {3.0}, true);
    const Tensor y = mul(x, x);
    backward(add(y, y));  // d/dx 2x^2 = 4x
    CHECK(x.grad()[0] == doctest::Approx(12.0));
    CHECK_THROWS_AS(backward(Tensor::from_data({2}, {1.0, 2.0}, true)), ContractError);
}

TEST_CASE("tensor storage is 64-byte aligned") {
    for (std::size_t n : {1u, 3u, 17u, 1000u}) {
        const Tensor t = Tensor::zeros({n});
        CHECK(reinterpret_cast<std::uintptr_t>(t.data().data()) % 64 == 0);
        const Tensor y = add(t, t);
        CHECK(reinterpret_cast<std::uintptr_t>(y.data().data()) % 64 == 0);
    }
}
