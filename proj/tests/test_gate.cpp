#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "divctl/errors.hpp"
#include "divctl/gate.hpp"
#include "divctl/ops.hpp"

using namespace divctl;

namespace {

GateState trained_like_gate(std::uint64_t seed, std::size_t nt = 8, std::size_t k = 3) {
    GateConfig c;
    c.embed_dim = 16;
    c.n_tailor = nt;
    c.top_k = k;
    Rng rng(seed);
    GateState g = make_gate(c, rng);
    for (double& x : g.net.w2.mutable_data()) {
        x = rng.normal();
    }
    return g;
}

double cos(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return d / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("instruction embeddings are unit norm and deterministic") {
    const auto a = embed_instruction(0, "Sobel edge map", 64, "x");
    const auto b = embed_instruction(0, "sobel   EDGE map", 64, "x");
    double n = 0.0;
    for (double v : a.e_txt) {
        n += v * v;
    }
    CHECK(std::abs(n - 1.0) < 1e-12);
    CHECK(a.e_txt == b.e_txt);
    CHECK(tokenize_instruction(" A  b\tC ") == std::vector<std::string>{"a", "b", "c"});
    CHECK_THROWS_AS(embed_instruction(0, "   ", 64), InvalidInput);
    // Shared tokens make embeddings close.
    const auto lap = embed_instruction(0, "laplacian edge map", 64);
    const auto border = embed_instruction(0, "border outpainting canvas", 64);
    CHECK(cos(a.e_txt, lap.e_txt) > cos(a.e_txt, border.e_txt));
}

TEST_CASE("initial routing is uniform") {
    GateConfig c;
    c.embed_dim = 16;
    Rng rng(1);
    const GateState g = make_gate(c, rng);
    const Tensor alpha = route(g, embed_instruction(0, "anything", 16));
    for (double a : alpha.data()) {
        CHECK(a == doctest::Approx(1.0 / 16).epsilon(1e-15));
    }
    CHECK_THROWS_AS(make_gate(GateConfig{16, 4, 5, 1e-3}, rng), ContractError);
}

TEST_CASE("routing properties over 1000 random cases") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t nt = 2 + rng.below(15);
        const std::size_t k = 1 + rng.below(nt);
        GateState g = trained_like_gate(trial, nt, k);
        for (double& b : g.balance_bias) {
            b = rng.uniform(-0.05, 0.05);
        }
        std::vector<double> e(16);
        for (double& x : e) {
            x = rng.normal();
        }
        const Tensor alpha = route(g, {"", "", e});
        const double s = std::accumulate(alpha.data().begin(), alpha.data().end(), 0.0);
        CHECK(std::abs(s - 1.0) <= 1e-12);
        const GatedCoefficients c = topk_select(alpha, g);
        CHECK(c.active_set.size() == k);
        CHECK(std::is_sorted(c.active_set.begin(), c.active_set.end()));
        // g keeps the unbiased alpha values of the chosen tailors, zeros elsewhere.
        for (std::size_t j = 0; j < nt; ++j) {
            CHECK(c.g[j] == (c.is_active(j) ? alpha[j] : 0.0));
        }
        // A uniform shift of every bias never changes the selected set.
        GateState shifted = g;
        const double delta = rng.uniform(-1.0, 1.0);
        for (double& b : shifted.balance_bias) {
            b += delta;
        }
        CHECK(topk_select(alpha, shifted).active_set == c.active_set);
    }
}

TEST_CASE("topk ties go to the lower index") {
    CHECK(topk_indices(std::vector<double>{1.0, 1.0, 1.0, 0.5}, 2) == std::vector<std::size_t>{0, 1});
    CHECK(topk_indices(std::vector<double>{0.1, 0.9, 0.5}, 1) == std::vector<std::size_t>{1});
}

TEST_CASE("update_biases moves against the load") {
    GateState g = trained_like_gate(3, 4, 2);
    g.gamma = 0.1;
    record_usage(g, fixed_coefficients({0.5, 0.5, 0.0, 0.0}));
    record_usage(g, fixed_coefficients({0.5, 0.0, 0.5, 0.0}));
    // loads {2, 1, 1, 0}, mean 1
    update_biases(g);
    CHECK(g.balance_bias == std::vector<double>{-0.1, 0.0, 0.0, 0.1});
    CHECK(g.usage_count == std::vector<std::uint64_t>{2, 1, 1, 0});
    CHECK(g.batch_load == std::vector<std::uint64_t>{0, 0, 0, 0});
    CHECK(g.routed == 2);
    reset_gate_output(g);
    CHECK(g.balance_bias == std::vector<double>(4, 0.0));
    for (double w : g.net.w2.data()) {
        CHECK(w == 0.0);
    }
}

TEST_CASE("biased selection spreads load across a skewed stream") {
    auto run = [](double gamma) {
        GateState g = trained_like_gate(9, 8, 2);
        g.gamma = gamma;
        const auto a = embed_instruction(0, "sobel edge map", 16);
        const auto b = embed_instruction(0, "wide box blur", 16);
        Rng rng(5);
        for (int batch = 0; batch < 2000; ++batch) {
            for (int i = 0; i < 8; ++i) {
                const auto& e = rng.uniform() < 0.9 ? a : b;
                record_usage(g, topk_select(route(g, e), g));
            }
            update_biases(g);
        }
        const auto& u = g.usage_count;
        const double mean = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
        return *std::max_element(u.begin(), u.end()) / mean;
    };
    const double balanced = run(1e-3), plain = run(0.0);
    CHECK(balanced < plain);
    CHECK(run(1e-3) == balanced);
}

TEST_CASE("multi-condition composition") {
    const GateState g = trained_like_gate(4);
    const auto a = embed_instruction(0, "sobel edge map", 16);
    const std::vector<InstructionEmbedding> one{a};
    const auto single = compose_multi_condition(g, one);
    CHECK(single.active_set == topk_select(route(g, a), g).active_set);
    const std::vector<InstructionEmbedding> two{a, embed_instruction(0, "narrow box blur", 16)};
    for (auto mode : {MultiConditionMode::logits, MultiConditionMode::alpha, MultiConditionMode::coefficients}) {
        const auto c = compose_multi_condition(g, two, mode);
        CHECK(c.active_set.size() >= 1);
        CHECK(c.size() == g.n_tailor());
        CHECK(parse_multi_condition_mode(to_string(mode)) == mode);
    }
    CHECK_THROWS_AS(compose_multi_condition(g, std::span<const InstructionEmbedding>{}), ContractError);
    CHECK_THROWS_AS(parse_multi_condition_mode("sum"), ConfigError);
}

TEST_CASE("similarity matrix is symmetric with a unit diagonal") {
    const GateState g = trained_like_gate(6);
    std::vector<InstructionEmbedding> e;
    for (const char* t : {"a b", "b c", "c d", "x"}) {
        e.push_back(embed_instruction(1, t, 16));
    }
    const auto s = similarity_matrix(g, e);
    for (std::size_t i = 0; i < e.size(); ++i) {
        CHECK(s[i][i] == doctest::Approx(1.0).epsilon(1e-12));
        for (std::size_t j = 0; j < e.size(); ++j) {
            CHECK(s[i][j] == s[j][i]);
            CHECK(s[i][j] <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("gate gradients reach the hidden layer once the output is nonzero") {
    GateState g = trained_like_gate(7);
    const auto e = embed_instruction(0, "shuffled tile puzzle", 16);
    const Tensor alpha = route(g, e);
    const auto c = topk_select(alpha, g);
    backward(sum(mul(c.g, Tensor::from_data(c.g.shape(), std::vector<double>(8, 1.0)))));
    double n = 0.0;
    for (double x : g.net.w1.grad()) {
        n += std::abs(x);
    }
    CHECK(n > 0.0);
}
