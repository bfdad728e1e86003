#include "divctl/gate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>

#include "divctl/errors.hpp"
#include "divctl/ops.hpp"

namespace divctl {

namespace {

std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::vector<std::string> tokenize_instruction(std::string_view text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!cur.empty()) {
                tokens.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!cur.empty()) {
        tokens.push_back(std::move(cur));
    }
    return tokens;
}

InstructionEmbedding embed_instruction(std::uint64_t encoder_seed, std::string_view text, std::size_t embed_dim,
                                       std::string condition_id) {
    const auto tokens = tokenize_instruction(text);
    if (tokens.empty()) {
        throw InvalidInput("embed_instruction: empty instruction text");
    }
    std::vector<double> e(embed_dim, 0.0);
    for (const auto& tok : tokens) {
        Rng row(encoder_seed, Stream::text, fnv1a64(tok) % kTokenTableRows);
        for (double& x : e) {
            x += row.normal();
        }
    }
    double norm = 0.0;
    for (double& x : e) {
        x /= static_cast<double>(tokens.size());
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : e) {
        x /= norm;
    }
    return {std::move(condition_id), std::string(text), std::move(e)};
}

GateState make_gate(const GateConfig& config, Rng& rng) {
    require(config.n_tailor >= 1, "make_gate: N_T must be >= 1");
    require(config.top_k >= 1 && config.top_k <= config.n_tailor, "make_gate: need 1 <= K <= N_T");
    GateState g;
    const std::size_t d = config.embed_dim;
    g.net.w1 = kaiming_uniform(d, d, rng);
    g.net.b1 = Tensor::zeros({d}, true);
    g.k = config.top_k;
    g.gamma = config.gamma;
    g.net.w2 = Tensor::zeros({config.n_tailor, d}, true);
    g.net.b2 = Tensor::zeros({config.n_tailor}, true);
    g.balance_bias.assign(config.n_tailor, 0.0);
    g.usage_count.assign(config.n_tailor, 0);
    g.batch_load.assign(config.n_tailor, 0);
    return g;
}

void reset_gate_output(GateState& gate) {
    const std::size_t nt = gate.n_tailor();
    const std::size_t d = gate.net.w1.rows();
    gate.net.w2 = Tensor::zeros({nt, d}, true);
    gate.net.b2 = Tensor::zeros({nt}, true);
    gate.balance_bias.assign(nt, 0.0);
    gate.usage_count.assign(nt, 0);
    gate.batch_load.assign(nt, 0);
    gate.routed = 0;
    gate.batch_routed = 0;
}

Tensor gate_logits(const GateNet& net, const InstructionEmbedding& e) {
    require(e.e_txt.size() == net.w1.cols(), "route: embedding dimension " + std::to_string(e.e_txt.size()) +
                                                 " but gate expects " + std::to_string(net.w1.cols()));
    const Tensor x = Tensor::from_data({1, e.e_txt.size()}, e.e_txt);
    const Tensor h = divctl::tanh(linear(x, net.w1, net.b1));
    return linear(h, net.w2, net.b2);
}

Tensor route(const GateState& gate, const InstructionEmbedding& e) {
    return softmax(gate_logits(gate.net, e));
}

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                      });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

GatedCoefficients topk_select(const Tensor& alpha, const GateState& gate) {
    const std::size_t nt = gate.n_tailor();
    require(alpha.numel() == nt, "topk_select: alpha length " + std::to_string(alpha.numel()) +
                                     " but N_T = " + std::to_string(nt));
    std::vector<double> biased(nt);
    for (std::size_t i = 0; i < nt; ++i) {
        biased[i] = alpha[i] + gate.balance_bias[i];
    }
    GatedCoefficients out;
    out.active_set = topk_indices(biased, gate.k);
    std::vector<double> mask(nt, 0.0);
    for (std::size_t j : out.active_set) {
        mask[j] = 1.0;
    }
    out.g = mul(alpha, Tensor::from_data(alpha.shape(), std::move(mask)));
    return out;
}

void record_usage(GateState& gate, const GatedCoefficients& coeffs) {
    for (std::size_t j : coeffs.active_set) {
        ++gate.batch_load.at(j);
    }
    ++gate.batch_routed;
}

void update_biases(GateState& gate) {
    const std::size_t nt = gate.n_tailor();
    if (nt == 0) {
        return;
    }
    const double total = std::accumulate(gate.batch_load.begin(), gate.batch_load.end(), 0.0);
    const double mean_load = total / static_cast<double>(nt);
    for (std::size_t i = 0; i < nt; ++i) {
        const double diff = static_cast<double>(gate.batch_load[i]) - mean_load;
        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        gate.balance_bias[i] -= gate.gamma * sign;
        gate.usage_count[i] += gate.batch_load[i];
        gate.batch_load[i] = 0;
    }
    gate.routed += gate.batch_routed;
    gate.batch_routed = 0;
}

std::string to_string(MultiConditionMode mode) {
    switch (mode) {
        case MultiConditionMode::logits: return "logits";
        case MultiConditionMode::alpha: return "alpha";
        case MultiConditionMode::coefficients: return "coefficients";
    }
    return "?";
}

MultiConditionMode parse_multi_condition_mode(std::string_view s) {
    if (s == "logits") return MultiConditionMode::logits;
    if (s == "alpha") return MultiConditionMode::alpha;
    if (s == "coefficients") return MultiConditionMode::coefficients;
    throw ConfigError("unknown multi-condition mode '" + std::string(s) + "'");
}

GatedCoefficients compose_multi_condition(const GateState& gate, std::span<const InstructionEmbedding> embeddings,
                                          MultiConditionMode mode) {
    require(!embeddings.empty(), "compose_multi_condition: empty embedding list");
    const double inv = 1.0 / static_cast<double>(embeddings.size());
    Tensor acc;
    for (const auto& e : embeddings) {
        Tensor term;
        switch (mode) {
            case MultiConditionMode::logits: term = gate_logits(gate.net, e); break;
            case MultiConditionMode::alpha: term = route(gate, e); break;
            case MultiConditionMode::coefficients: term = topk_select(route(gate, e), gate).g; break;
        }
        acc = acc.defined() ? add(acc, term) : term;
    }
    acc = scale(acc, inv);
    if (mode == MultiConditionMode::logits) {
        acc = softmax(acc);
    }
    return topk_select(acc, gate);
}

std::vector<std::vector<double>> similarity_matrix(const GateState& gate,
                                                   std::span<const InstructionEmbedding> embeddings) {
    require(!embeddings.empty(), "similarity_matrix: empty embedding list");
    NoGradGuard no_grad;
    std::vector<Tensor> alphas;
    for (const auto& e : embeddings) {
        alphas.push_back(route(gate, e));
    }
    const std::size_t n = alphas.size();
    std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        sim[i][i] = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            sim[i][j] = sim[j][i] = cosine_similarity(alphas[i].data(), alphas[j].data()).value;
        }
    }
    return sim;
}

GatedCoefficients all_active_unit(std::size_t n_tailor) {
    GatedCoefficients c;
    c.g = Tensor::full({n_tailor}, 1.0);
    c.active_set.resize(n_tailor);
    std::iota(c.active_set.begin(), c.active_set.end(), std::size_t{0});
    return c;
}

GatedCoefficients fixed_coefficients(std::vector<double> g) {
    GatedCoefficients c;
    for (std::size_t j = 0; j < g.size(); ++j) {
        if (g[j] != 0.0) {
            c.active_set.push_back(j);
        }
    }
    const std::size_t n = g.size();
    c.g = Tensor::from_data({n}, std::move(g));
    return c;
}

}  // namespace divctl
