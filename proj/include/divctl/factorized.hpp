#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "divctl/rng.hpp"
#include "divctl/tensor.hpp"

namespace divctl {

enum class ProjectionTag { q, k, v, o, in, out };

std::string to_string(ProjectionTag tag);

// A contiguous run of rank-1 components u_j sigma_j v_j^T, stored as
// u: out x n, sigma: n, v: in x n.
struct ComponentBlock {
    Tensor u;
    Tensor sigma;
    Tensor v;

    std::size_t size() const { return sigma.defined() ? sigma.numel() : 0; }
};

// One projection matrix W (out x in) held as SVD components. Learngene
// components come first (indices [0, N_G)), tailors follow ([N_G, r)).
struct FactorizedWeight {
    std::size_t out_dim = 0;
    std::size_t in_dim = 0;
    ProjectionTag tag = ProjectionTag::q;
    int layer_index = 1;
    ComponentBlock learngenes;
    ComponentBlock tailors;

    std::size_t rank() const { return learngenes.size() + tailors.size(); }
    std::size_t n_learngene() const { return learngenes.size(); }
    std::size_t n_tailor() const { return tailors.size(); }
    std::size_t parameter_count() const { return rank() * (out_dim + in_dim + 1); }
};

// Sparse routing coefficients over the tailors of every factorized weight.
// `g` has N_T entries; it is differentiable when it came out of the gate.
struct GatedCoefficients {
    Tensor g;
    std::vector<std::size_t> active_set;  // sorted ascending

    std::size_t size() const { return g.defined() ? g.numel() : 0; }
    bool is_active(std::size_t j) const;
};

// All components land in the learngene block; call partition() to split.
// Throws NumericError when the SVD does not converge or W is not finite.
FactorizedWeight svd_factorize(const Tensor& w, std::optional<std::size_t> truncate_to = std::nullopt,
                               ProjectionTag tag = ProjectionTag::q, int layer_index = 1);

// Keeps the top n_learngene singular directions as learngenes, the rest as tailors.
FactorizedWeight partition(const FactorizedWeight& fw, std::size_t n_learngene, std::size_t n_tailor);

// Learngenes plus sum over active j of g_j * (u_j sigma_j v_j^T).
Tensor compose_weight(const FactorizedWeight& fw, const GatedCoefficients& coeffs);
// Learngene part alone; the training loop reuses it across condition groups.
Tensor compose_learngenes(const FactorizedWeight& fw);
Tensor compose_tailors(const FactorizedWeight& fw, const GatedCoefficients& coeffs);
// Every component at unit coefficient.
Tensor reconstruct(const FactorizedWeight& fw);

// Zeroes any gradient left on tailor columns outside `active` and returns the
// largest magnitude that had to be removed (0 when the tape was clean).
double masked_gradient_apply(FactorizedWeight& fw, const std::vector<std::size_t>& active);

// Dense Kaiming-uniform init (nn.Linear convention: bound = 1/sqrt(in)),
// then SVD and partition.
FactorizedWeight init_factorized(std::size_t out_dim, std::size_t in_dim, std::size_t n_learngene,
                                 std::size_t n_tailor, ProjectionTag tag, int layer_index, Rng& rng);

Tensor kaiming_uniform(std::size_t out_dim, std::size_t in_dim, Rng& rng, bool requires_grad = true);

// Fresh tailor columns shaped like fw's tailors, taken from the SVD of a newly
// drawn Kaiming matrix (same distribution as at initial partition).
ComponentBlock fresh_tailors(const FactorizedWeight& fw, Rng& rng);

}  // namespace divctl
