#include "divctl/gradcheck.hpp"

#include <cmath>

#include "divctl/errors.hpp"
#include "divctl/ops.hpp"
#include "divctl/rng.hpp"

namespace divctl {

GradCheckReport finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  double h, double tol) {
    require(h > 0.0, "finite_diff_check: h must be positive");
    for (auto& p : params) {
        p.zero_grad();
    }
    Tensor loss = f();
    backward(loss);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        const std::size_t n = p.numel();
        std::vector<double> analytic(n, 0.0);
        if (p.has_grad()) {
            auto g = p.grad();
            analytic.assign(g.begin(), g.end());
        }
        std::vector<double> numeric(n);
        auto data = p.mutable_data();
        for (std::size_t i = 0; i < n; ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = f().item();
            data[i] = orig - h;
            const double fm = f().item();
            data[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        double diff = 0.0, na = 0.0, nn = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
            na += analytic[i] * analytic[i];
            nn += numeric[i] * numeric[i];
        }
        const double denom = std::sqrt(std::max(na, nn));
        const double rel = denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
        if (report.worst_param.empty() || rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_param = "param" + std::to_string(pi);
        }
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

namespace {

Tensor randn(Rng& rng, Shape shape, bool grad = true, double scale = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
        x = scale * rng.normal();
    }
    return Tensor::from_data(std::move(shape), std::move(v), grad);
}

std::size_t small(Rng& rng, std::size_t lo = 2, std::size_t hi = 5) {
    return lo + rng.below(hi - lo + 1);
}

using Probe = std::pair<std::function<Tensor()>, std::vector<Tensor>>;

// sum(out * R) with R fixed from the probe seed.
Probe weighted(Rng& rng, std::function<Tensor()> op, std::vector<Tensor> leaves) {
    const Shape shape = op().shape();
    Tensor r = randn(rng, shape, false);
    return {[op, r] { return sum(mul(op(), r)); }, std::move(leaves)};
}

std::vector<OpCheck> build_registry() {
    std::vector<OpCheck> checks;
    auto add_check = [&checks](std::string name, std::function<Probe(Rng&)> fn) {
        checks.push_back({std::move(name), [fn](std::uint64_t seed) {
                              Rng rng(seed);
                              return fn(rng);
                          }});
    };

    add_check("add", [](Rng& rng) {
        const Shape s{small(rng), small(rng)};
        auto a = randn(rng, s), b = randn(rng, s);
        return weighted(rng, [a, b] { return add(a, b); }, {a, b});
    });
    add_check("sub", [](Rng& rng) {
        const Shape s{small(rng), small(rng)};
        auto a = randn(rng, s), b = randn(rng, s);
        return weighted(rng, [a, b] { return sub(a, b); }, {a, b});
    });
    add_check("mul", [](Rng& rng) {
        const Shape s{small(rng), small(rng)};
        auto a = randn(rng, s), b = randn(rng, s);
        return weighted(rng, [a, b] { return mul(a, b); }, {a, b});
    });
    add_check("scale", [](Rng& rng) {
        auto a = randn(rng, {small(rng), small(rng)});
        const double s = rng.uniform(-2.0, 2.0);
        return weighted(rng, [a, s] { return scale(a, s); }, {a});
    });
    add_check("matmul", [](Rng& rng) {
        const std::size_t m = small(rng), k = small(rng), n = small(rng);
        auto a = randn(rng, {m, k}), b = randn(rng, {k, n});
        return weighted(rng, [a, b] { return matmul(a, b); }, {a, b});
    });
    add_check("linear", [](Rng& rng) {
        const std::size_t n = small(rng), in = small(rng), out = small(rng);
        auto x = randn(rng, {n, in}), w = randn(rng, {out, in}), b = randn(rng, {out});
        return weighted(rng, [x, w, b] { return linear(x, w, b); }, {x, w, b});
    });
    add_check("add_row", [](Rng& rng) {
        const std::size_t n = small(rng), c = small(rng);
        auto x = randn(rng, {n, c}), b = randn(rng, {c});
        return weighted(rng, [x, b] { return add_row(x, b); }, {x, b});
    });
    add_check("repeat_rows", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng)});
        const std::size_t t = small(rng, 1, 4);
        return weighted(rng, [x, t] { return repeat_rows(x, t); }, {x});
    });
    add_check("concat_rows", [](Rng& rng) {
        const std::size_t c = small(rng);
        auto a = randn(rng, {small(rng), c}), b = randn(rng, {small(rng), c});
        return weighted(rng, [a, b] {
            const std::vector<Tensor> parts{a, b};
            return concat_rows(parts);
        }, {a, b});
    });
    add_check("slice_rows", [](Rng& rng) {
        const std::size_t n = small(rng, 3, 6);
        auto x = randn(rng, {n, small(rng)});
        const std::size_t b = rng.below(n - 1);
        return weighted(rng, [x, b, n] { return slice_rows(x, b, n); }, {x});
    });
    add_check("reshape", [](Rng& rng) {
        const std::size_t a = small(rng), b = small(rng);
        auto x = randn(rng, {a, b});
        return weighted(rng, [x, a, b] { return reshape(x, {b, a}); }, {x});
    });
    add_check("layer_norm", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng, 3, 6)});
        return weighted(rng, [x] { return layer_norm(x); }, {x});
    });
    add_check("gelu", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng)}, true, 2.0);
        return weighted(rng, [x] { return gelu(x); }, {x});
    });
    add_check("silu", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng)}, true, 2.0);
        return weighted(rng, [x] { return silu(x); }, {x});
    });
    add_check("tanh", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng)});
        return weighted(rng, [x] { return divctl::tanh(x); }, {x});
    });
    add_check("softmax", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng)}, true, 2.0);
        return weighted(rng, [x] { return softmax(x); }, {x});
    });
    add_check("attention", [](Rng& rng) {
        const std::size_t seq = small(rng, 2, 4), items = small(rng, 1, 3);
        const std::size_t heads = small(rng, 1, 2), width = heads * small(rng, 2, 3);
        const Shape s{seq * items, width};
        auto q = randn(rng, s), k = randn(rng, s), v = randn(rng, s);
        return weighted(rng, [q, k, v, seq, heads] { return attention(q, k, v, seq, heads); }, {q, k, v});
    });
    add_check("sum", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng)});
        return weighted(rng, [x] { return sum(x); }, {x});
    });
    add_check("mean", [](Rng& rng) {
        auto x = randn(rng, {small(rng), small(rng)});
        return weighted(rng, [x] { return mean(x); }, {x});
    });
    add_check("dot", [](Rng& rng) {
        const std::size_t n = small(rng, 2, 8);
        auto a = randn(rng, {n}), b = randn(rng, {n});
        return weighted(rng, [a, b] { return dot(a, b); }, {a, b});
    });
    add_check("mse_loss", [](Rng& rng) {
        const Shape s{small(rng), small(rng)};
        auto a = randn(rng, s), b = randn(rng, s);
        return weighted(rng, [a, b] { return mse_loss(a, b); }, {a, b});
    });
    add_check("row_cosine", [](Rng& rng) {
        const Shape s{small(rng), small(rng)};
        auto a = randn(rng, s), b = randn(rng, s);
        return weighted(rng, [a, b] { return row_cosine(a, b); }, {a, b});
    });
    add_check("scaled_outer", [](Rng& rng) {
        const std::size_t o = small(rng), i = small(rng), r = small(rng, 1, 4);
        auto u = randn(rng, {o, r}), s = randn(rng, {r}), v = randn(rng, {i, r});
        return weighted(rng, [u, s, v] { return scaled_outer(u, s, v); }, {u, s, v});
    });
    add_check("scaled_outer_gated", [](Rng& rng) {
        const std::size_t o = small(rng), i = small(rng), r = small(rng, 2, 5);
        auto u = randn(rng, {o, r}), s = randn(rng, {r}), v = randn(rng, {i, r});
        auto c = randn(rng, {r});
        return weighted(rng, [u, s, v, c] { return scaled_outer(u, s, v, c); }, {u, s, v, c});
    });
    return checks;
}

}  // namespace

const std::vector<OpCheck>& registered_op_checks() {
    static const std::vector<OpCheck> registry = build_registry();
    return registry;
}

}  // namespace divctl
