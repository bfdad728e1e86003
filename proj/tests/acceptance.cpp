// Acceptance suite: one PASS/FAIL line per criterion on stdout, progress on stderr.
// Usage: acceptance [criterion numbers...]   (default: all)
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "divctl/checkpoint.hpp"
#include "divctl/factorized.hpp"
#include "divctl/gate.hpp"
#include "divctl/gradcheck.hpp"
#include "divctl/ops.hpp"
#include "divctl/training.hpp"

using namespace divctl;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    return cosine_similarity(a, b).value;
}

void progress(const std::string& s) {
    std::fprintf(stderr, "  .. %s\n", s.c_str());
    std::fflush(stderr);
}

constexpr std::uint64_t kSeeds[] = {0, 1, 2};

// Long runs shared by criteria 5 through 9; trained on first use.
struct SeedRuns {
    std::optional<TrainResult> both, diversion_only, neither;
    std::optional<TrainResult> adapt, scratch;
};

class Runs {
public:
    SeedRuns& at(std::uint64_t seed) { return runs_[seed]; }

    const TrainResult& arm(std::uint64_t seed, bool diversion, bool repa) {
        SeedRuns& r = at(seed);
        auto& slot = !diversion ? r.neither : (repa ? r.both : r.diversion_only);
        if (!slot) {
            RunConfig cfg;
            cfg.train.seed = seed;
            cfg = arm_config(cfg, diversion, repa);
            const char* name = !diversion ? "neither" : (repa ? "both" : "diversion_only");
            progress(fmt("training %s, seed %llu", name, static_cast<unsigned long long>(seed)));
            slot = train_diversion(cfg, bank(seed));
            progress(fmt("  done: %.0f s, final l_diff %.5f", slot->seconds, slot->metrics.final_l_diff()));
        }
        return *slot;
    }

    const ConditionBank& bank(std::uint64_t seed) {
        auto it = banks_.find(seed);
        if (it == banks_.end()) {
            RunConfig cfg;
            it = banks_.emplace(seed, ConditionBank(cfg.train.n_images, seed, cfg.model.image_size)).first;
        }
        return it->second;
    }

private:
    std::map<std::uint64_t, SeedRuns> runs_;
    std::map<std::uint64_t, ConditionBank> banks_;
};

Runs g_runs;

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    std::vector<double> v(r * c);
    for (double& x : v) {
        x = rng.normal();
    }
    return Tensor::from_data({r, c}, v);
}

Outcome c1_factorization() {
    const auto t0 = Clock::now();
    Rng rng(101);
    double worst_recon = 0.0, worst_compose = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t out = 1 + rng.below(64), in = 1 + rng.below(64);
        const Tensor w = random_matrix(out, in, rng);
        const FactorizedWeight fw = svd_factorize(w);
        const Tensor back = reconstruct(fw);
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < w.numel(); ++i) {
            num += (back[i] - w[i]) * (back[i] - w[i]);
            den += w[i] * w[i];
        }
        worst_recon = std::max(worst_recon, std::sqrt(num / den));

        const std::size_t r = fw.rank();
        const std::size_t nt = rng.below(r + 1);
        const FactorizedWeight p = partition(fw, r - nt, nt);
        std::vector<double> g(nt, 0.0);
        if (nt > 0) {
            std::vector<std::size_t> idx(nt);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            for (std::size_t j = nt - 1; j > 0; --j) {
                std::swap(idx[j], idx[rng.below(j + 1)]);
            }
            const std::size_t k = 1 + rng.below(nt);
            for (std::size_t j = 0; j < k; ++j) {
                g[idx[j]] = rng.uniform();
            }
        }
        const Tensor composed = compose_weight(p, fixed_coefficients(g));
        // Rank-1 oracle over the unpartitioned SVD: coefficient 1 for the first
        // r - nt components, g for the rest.
        for (std::size_t row = 0; row < out; ++row) {
            for (std::size_t col = 0; col < in; ++col) {
                double acc = 0.0;
                for (std::size_t j = 0; j < r; ++j) {
                    const double coef = j < r - nt ? 1.0 : g[j - (r - nt)];
                    acc += fw.learngenes.u.at(row, j) * fw.learngenes.sigma[j] * coef * fw.learngenes.v.at(col, j);
                }
                worst_compose = std::max(worst_compose, std::abs(acc - composed.at(row, col)));
            }
        }
    }
    const double secs = seconds_since(t0);
    return {worst_recon <= 1e-10 && worst_compose <= 1e-12 && secs < 10.0,
            fmt("max recon rel err %.2e (<= 1e-10), max compose err %.2e (<= 1e-12), %.2f s (< 10)", worst_recon,
                worst_compose, secs)};
}

Outcome c2_gradients() {
    const auto t0 = Clock::now();
    std::vector<OpCheck> checks = registered_op_checks();
    checks.push_back(end_to_end_loss_check());
    double worst = 0.0;
    std::string worst_name;
    std::size_t failed = 0, total = 0;
    for (const auto& c : checks) {
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
            auto [f, params] = c.build(seed);
            const GradCheckReport rep = finite_diff_check(f, params);
            ++total;
            if (!rep.passed) {
                ++failed;
            }
            if (rep.max_rel_error >= worst) {
                worst = rep.max_rel_error;
                worst_name = c.name + ":" + rep.worst_param;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {failed == 0 && secs < 60.0,
            fmt("%zu ops incl. end_to_end_loss, %zu probes, %zu failed, worst %.2e at %s, %.1f s (< 60)",
                checks.size(), total, failed, worst, worst_name.c_str(), secs)};
}

GateState random_output_gate(const GateConfig& gc, std::uint64_t seed) {
    Rng rng(seed);
    GateState g = make_gate(gc, rng);
    for (double& x : g.net.w2.mutable_data()) {
        x = rng.normal();
    }
    return g;
}

Outcome c3_routing() {
    const auto t0 = Clock::now();
    Rng rng(303);
    std::size_t bad_norm = 0, bad_card = 0, bad_shift = 0, bad_unbiased = 0;
    double worst_norm = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        GateConfig gc;
        gc.embed_dim = 8 + rng.below(57);
        gc.n_tailor = 1 + rng.below(32);
        gc.top_k = 1 + rng.below(gc.n_tailor);
        GateState g = random_output_gate(gc, 1000 + trial);
        for (double& b : g.balance_bias) {
            b = rng.uniform(-0.1, 0.1);
        }
        std::vector<double> e(gc.embed_dim);
        for (double& x : e) {
            x = rng.normal();
        }
        const Tensor alpha = route(g, {"", "", e});
        const double s = std::accumulate(alpha.data().begin(), alpha.data().end(), 0.0);
        worst_norm = std::max(worst_norm, std::abs(s - 1.0));
        bad_norm += std::abs(s - 1.0) > 1e-12;
        const GatedCoefficients c = topk_select(alpha, g);
        const std::set<std::size_t> uniq(c.active_set.begin(), c.active_set.end());
        bad_card += c.active_set.size() != gc.top_k || uniq.size() != gc.top_k;
        for (std::size_t j = 0; j < gc.n_tailor; ++j) {
            if (c.g[j] != (uniq.count(j) ? alpha[j] : 0.0)) {
                ++bad_unbiased;
                break;
            }
        }
        GateState shifted = g;
        const double delta = rng.uniform(-5.0, 5.0);
        for (double& b : shifted.balance_bias) {
            b += delta;
        }
        bad_shift += topk_select(alpha, shifted).active_set != c.active_set;
    }
    const double secs = seconds_since(t0);
    const bool ok = bad_norm + bad_card + bad_shift + bad_unbiased == 0 && secs < 10.0;
    return {ok, fmt("1000 cases: norm err max %.1e, violations norm %zu / card %zu / shift %zu / unbiased %zu, "
                    "%.2f s (< 10)",
                    worst_norm, bad_norm, bad_card, bad_shift, bad_unbiased, secs)};
}

double skewed_stream_imbalance(double gamma, std::uint64_t seed) {
    GateConfig gc;  // N_T = 16, K = 8, embed 64
    gc.gamma = gamma;
    GateState g = random_output_gate(gc, seed);
    const auto& reg = default_registry();
    const auto a = embed_instruction(0, reg[0].instruction, gc.embed_dim);
    const auto b = embed_instruction(0, reg[1].instruction, gc.embed_dim);
    const Tensor alpha_a = route(g, a), alpha_b = route(g, b);
    Rng rng(seed, Stream::data, 0);
    for (int batch = 0; batch < 10000; ++batch) {
        for (int i = 0; i < 16; ++i) {
            record_usage(g, topk_select(rng.uniform() < 0.9 ? alpha_a : alpha_b, g));
        }
        update_biases(g);
    }
    const auto& u = g.usage_count;
    const double mean = std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size());
    return static_cast<double>(*std::max_element(u.begin(), u.end())) / mean;
}

Outcome c4_balancing() {
    const auto t0 = Clock::now();
    const double with = skewed_stream_imbalance(1e-3, 7), without = skewed_stream_imbalance(0.0, 7);
    const bool deterministic = with == skewed_stream_imbalance(1e-3, 7) && without == skewed_stream_imbalance(0.0, 7);
    const double secs = seconds_since(t0);
    return {with < without && deterministic && secs < 30.0,
            fmt("max/mean load gamma=1e-3 %.4f vs gamma=0 %.4f, deterministic %s, %.1f s (< 30)", with, without,
                deterministic ? "yes" : "no", secs)};
}

Outcome c5_convergence() {
    std::string detail;
    bool ok = true;
    double total = 0.0;
    for (std::uint64_t s : kSeeds) {
        const TrainResult& r = g_runs.arm(s, true, true);
        const double first = r.metrics.mean_l_diff(0, 100), last = r.metrics.final_l_diff();
        ok &= last <= 0.6 * first;
        total += r.seconds;
        detail += fmt("seed %llu %.4f/%.4f=%.3f; ", static_cast<unsigned long long>(s), last, first, last / first);
    }
    ok &= total <= 3600.0;
    return {ok, detail + fmt("last100/first100 <= 0.60, 3 runs %.1f min (<= 60)", total / 60.0)};
}

Outcome c6_repa_direction() {
    std::string detail;
    bool ok = true;
    for (std::uint64_t s : kSeeds) {
        const double aligned = -g_runs.arm(s, true, true).metrics.final_l_repa();
        const double plain = -g_runs.arm(s, true, false).metrics.final_l_repa();
        ok &= aligned > plain;
        detail += fmt("seed %llu cos %.4f vs %.4f; ", static_cast<unsigned long long>(s), aligned, plain);
    }
    return {ok, detail + "lambda=0.05 > lambda=0 in every seed"};
}

Outcome c7_ablation() {
    std::vector<double> both, div, neither;
    for (std::uint64_t s : kSeeds) {
        both.push_back(g_runs.arm(s, true, true).metrics.final_l_diff());
        div.push_back(g_runs.arm(s, true, false).metrics.final_l_diff());
        neither.push_back(g_runs.arm(s, false, false).metrics.final_l_diff());
    }
    const double mb = median(both), md = median(div), mn = median(neither);
    const bool ok = mb <= md && md <= mn && mb <= 0.95 * mn;
    return {ok, fmt("median final l_diff both %.5f <= diversion_only %.5f <= neither %.5f; both/neither %.3f (<= 0.95)",
                    mb, md, mn, mb / mn)};
}

Outcome c8_zero_shot() {
    std::string detail;
    bool ok = true;
    for (std::uint64_t s : kSeeds) {
        const TrainResult& r = g_runs.arm(s, true, true);
        const ControlModel m = model_from_checkpoint(r.checkpoint);
        const RunConfig cfg = config_from_checkpoint(r.checkpoint);
        const auto& reg = default_registry();
        std::vector<std::vector<double>> alpha;
        for (const auto& c : reg) {
            alpha.push_back(zero_shot_route(m, cfg.train.text_encoder_seed, c.instruction).alpha);
        }
        for (std::size_t i = 0; i < reg.size(); ++i) {
            if (reg[i].shift_class != ShiftClass::novel_low) {
                continue;
            }
            double sib = -2.0, best_other = -2.0;
            for (std::size_t j = 0; j < reg.size(); ++j) {
                if (reg[j].shift_class != ShiftClass::basic) {
                    continue;
                }
                const double c = cosine(alpha[i], alpha[j]);
                if (reg[j].condition_id == reg[i].sibling) {
                    sib = c;
                } else {
                    best_other = std::max(best_other, c);
                }
            }
            ok &= sib > best_other;
            detail += fmt("s%llu %s %.3f>%.3f; ", static_cast<unsigned long long>(s), reg[i].condition_id.c_str(), sib,
                          best_other);
        }
    }
    return {ok, detail + "sibling beats every other basic condition"};
}

Outcome c9_few_shot() {
    std::vector<double> adapt, scratch;
    double worst_fraction = 0.0, worst_secs = 0.0;
    std::string detail;
    for (std::uint64_t s : kSeeds) {
        const TrainResult& src = g_runs.arm(s, true, true);
        SeedRuns& r = g_runs.at(s);
        RunConfig cfg = config_from_checkpoint(src.checkpoint);
        cfg.train.mode = TrainMode::adapt_frozen;
        progress(fmt("adapting seed %llu", static_cast<unsigned long long>(s)));
        r.adapt = adapt_few_shot(cfg, src.checkpoint);
        const RunConfig sc = scratch_config(cfg, r.adapt->trainable_count);
        progress(fmt("scratch seed %llu (token_dim %zu)", static_cast<unsigned long long>(s), sc.model.token_dim));
        r.scratch = train_scratch(sc);
        adapt.push_back(r.adapt->metrics.final_l_diff());
        scratch.push_back(r.scratch->metrics.final_l_diff());
        const double fraction =
            static_cast<double>(r.adapt->trainable_count) / static_cast<double>(r.adapt->model_parameter_count);
        worst_fraction = std::max(worst_fraction, fraction);
        worst_secs = std::max(worst_secs, r.adapt->seconds);
        detail += fmt("s%llu %.4f vs %.4f (scratch %zu params); ", static_cast<unsigned long long>(s), adapt.back(),
                      scratch.back(), r.scratch->trainable_count);
    }
    const double ma = median(adapt), ms = median(scratch);
    const bool ok = ma < ms && worst_fraction <= 0.15 && worst_secs <= 300.0;
    return {ok, detail + fmt("median %.4f < %.4f, trainable %.1f%% (<= 15%%), adapt %.1f s (<= 300)", ma, ms,
                             100.0 * worst_fraction, worst_secs)};
}

Outcome c10_determinism() {
    RunConfig cfg;
    cfg.train.seed = 5;
    cfg.train.steps = 40;
    cfg.train.n_images = 256;
    cfg.train.milestones = {20};
    const ConditionBank bank(cfg.train.n_images, cfg.train.seed, cfg.model.image_size);
    Trainer a(cfg, bank), b(cfg, bank);
    a.run();
    b.run();
    const auto bytes_a = serialize_checkpoint(a.checkpoint());
    const bool identical = bytes_a == serialize_checkpoint(b.checkpoint());

    const std::string path = "acceptance-roundtrip.divc";
    save_checkpoint(path, a.checkpoint());
    const Checkpoint loaded = load_checkpoint(path);
    std::remove(path.c_str());
    Trainer c(cfg, bank);
    c.resume(loaded);
    const bool round_trip = serialize_checkpoint(loaded) == bytes_a && serialize_checkpoint(c.checkpoint()) == bytes_a;

    Trainer first(cfg, bank);
    first.run_until(17);
    const auto mid = serialize_checkpoint(first.checkpoint());
    Trainer second(cfg, bank);
    second.resume(deserialize_checkpoint(mid));
    second.run();
    const bool resumed = serialize_checkpoint(second.checkpoint()) == bytes_a;
    return {identical && round_trip && resumed,
            fmt("bit-identical runs %s, save/load round trip %s, resume at 17 of 40 %s (%zu bytes)",
                identical ? "yes" : "no", round_trip ? "yes" : "no", resumed ? "yes" : "no", bytes_a.size())};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"factorization identity", c1_factorization},
        {"gradient suite", c2_gradients},
        {"routing invariants", c3_routing},
        {"loss-free balancing", c4_balancing},
        {"diversion training converges", c5_convergence},
        {"alignment direction", c6_repa_direction},
        {"ablation direction", c7_ablation},
        {"zero-shot routing", c8_zero_shot},
        {"few-shot efficiency", c9_few_shot},
        {"determinism and persistence", c10_determinism},
    };
    std::set<std::size_t> selected;
    for (int i = 1; i < argc; ++i) {
        selected.insert(std::stoul(argv[i]));
    }
    bool all = true;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        if (!selected.empty() && !selected.count(i + 1)) {
            continue;
        }
        std::fprintf(stderr, "C%zu %s\n", i + 1, criteria[i].first);
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        all &= o.pass;
        std::printf("C%zu %s  %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return all ? 0 : 1;
}
