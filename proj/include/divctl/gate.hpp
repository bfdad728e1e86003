#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "divctl/factorized.hpp"
#include "divctl/rng.hpp"
#include "divctl/tensor.hpp"

namespace divctl {

// Frozen stand-in text encoder output. Unit norm.
struct InstructionEmbedding {
    std::string condition_id;
    std::string text;
    std::vector<double> e_txt;
};

// Rows of the frozen token table; token -> row via FNV-1a 64 modulo this.
inline constexpr std::size_t kTokenTableRows = 4096;

std::vector<std::string> tokenize_instruction(std::string_view text);

// Lowercase + whitespace tokens, each mapped to a seeded Gaussian row of the
// token table, mean-pooled and L2-normalized. Throws InvalidInput on text with
// no tokens.
InstructionEmbedding embed_instruction(std::uint64_t encoder_seed, std::string_view text,
                                       std::size_t embed_dim = 64, std::string condition_id = {});

struct GateConfig {
    std::size_t embed_dim = 64;
    std::size_t n_tailor = 16;
    std::size_t top_k = 8;
    double gamma = 1e-3;  // balance bias update rate
};

// embed_dim -> hidden (tanh) -> N_T logits. hidden = embed_dim; the output
// layer starts at zero so the initial routing is uniform.
struct GateNet {
    Tensor w1, b1, w2, b2;
};

struct GateState {
    GateNet net;
    std::vector<double> balance_bias;        // b_i, selection only
    std::vector<std::uint64_t> usage_count;  // running totals over all routings
    std::vector<std::uint64_t> batch_load;   // current batch, reset by update_biases
    std::uint64_t routed = 0;                // routings folded into usage_count
    std::uint64_t batch_routed = 0;
    std::size_t k = 1;
    double gamma = 1e-3;

    std::size_t n_tailor() const { return balance_bias.size(); }
    std::size_t embed_dim() const { return net.w1.defined() ? net.w1.cols() : 0; }
};

GateState make_gate(const GateConfig& config, Rng& rng);
// Re-creates the output layer at zero and clears balancing state.
void reset_gate_output(GateState& gate);

Tensor gate_logits(const GateNet& net, const InstructionEmbedding& e);
// alpha = softmax(G(e_txt)), shape {1, N_T}, differentiable into the gate.
Tensor route(const GateState& gate, const InstructionEmbedding& e);

// Top-K on alpha + b (ties to the lower index); g keeps the unbiased alpha
// entries of the selected tailors and is differentiable through alpha.
GatedCoefficients topk_select(const Tensor& alpha, const GateState& gate);
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

// Counts one routing decision into the current batch load.
void record_usage(GateState& gate, const GatedCoefficients& coeffs);
// b_i -= gamma * sign(load_i - mean_load), then folds the batch into the totals.
void update_biases(GateState& gate);

enum class MultiConditionMode { logits, alpha, coefficients };
std::string to_string(MultiConditionMode mode);
MultiConditionMode parse_multi_condition_mode(std::string_view s);

// Routing for several conditions at once. Default averages gate logits,
// then softmax and top-K.
GatedCoefficients compose_multi_condition(const GateState& gate, std::span<const InstructionEmbedding> embeddings,
                                          MultiConditionMode mode = MultiConditionMode::logits);

// Pairwise cosine similarity of the alpha vectors.
std::vector<std::vector<double>> similarity_matrix(const GateState& gate,
                                                   std::span<const InstructionEmbedding> embeddings);

// Coefficients with every tailor active at g = 1 (reconstruct() equivalence).
GatedCoefficients all_active_unit(std::size_t n_tailor);
// Fixed coefficients (no gradient), e.g. for probing.
GatedCoefficients fixed_coefficients(std::vector<double> g);

}  // namespace divctl
