#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "divctl/conditions.hpp"
#include "divctl/factorized.hpp"
#include "divctl/gate.hpp"
#include "divctl/gradcheck.hpp"
#include "divctl/rng.hpp"
#include "divctl/tensor.hpp"

namespace divctl {

struct DenoiserConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t token_dim = 64;
    std::size_t layers = 4;
    std::size_t controlnet_layers = 4;
    std::size_t heads = 1;
    std::size_t mlp_hidden = 256;
    std::size_t timesteps = 100;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::size_t repa_layer = 2;  // 1-based branch block whose output is f_cond
    double lambda = 0.05;
    std::size_t repa_hidden = 128;
    std::size_t repa_dim = 48;
    double dropout = 0.1;
    bool zero_pos_embed = false;
    // Branch factorization. n_learngene + n_tailor must equal the rank of every
    // branch projection, i.e. min(token_dim, mlp_hidden).
    std::size_t n_learngene = 48;
    std::size_t n_tailor = 16;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t n_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return patch_size * patch_size; }
    std::size_t rank() const { return token_dim < mlp_hidden ? token_dim : mlp_hidden; }
    // Throws ConfigError on inconsistent sizes.
    void validate() const;
};

// Linear beta schedule; betas spaced like torch.linspace.
class NoiseSchedule {
public:
    NoiseSchedule(std::size_t timesteps, double beta_start, double beta_end);
    explicit NoiseSchedule(const DenoiserConfig& c) : NoiseSchedule(c.timesteps, c.beta_start, c.beta_end) {}

    std::size_t timesteps() const { return betas_.size(); }
    double beta(std::size_t t) const { return betas_.at(t); }
    double alpha(std::size_t t) const { return 1.0 - betas_.at(t); }
    double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }
    // beta~_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t, 0 at t = 0.
    double posterior_variance(std::size_t t) const;

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bar_;
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps. Throws ContractError unless t < T.
Tensor forward_noise(const NoiseSchedule& s, const Tensor& z0, std::size_t t, const Tensor& eps);
// Mean of p(z_{t-1} | z_t) with eps_hat in place of the true noise.
std::vector<double> posterior_mean(const NoiseSchedule& s, std::span<const double> z_t,
                                   std::span<const double> eps_hat, std::size_t t);

struct Dense {
    Tensor w;  // out x in
    Tensor b;  // out, may be undefined
};

struct TimeEmbed {
    Dense l1, l2;
};

struct DenoiserBlock {
    Tensor wq, wk, wv, wo;
    Dense mlp_in, mlp_out;
};

struct Denoiser {
    Dense patch_embed;
    TimeEmbed time;
    std::vector<DenoiserBlock> blocks;
    Dense head;
};

struct BranchBlock {
    FactorizedWeight q, k, v, o, in, out;
    Tensor b_in, b_out;
    Dense inject;  // zero at init

    std::array<FactorizedWeight*, 6> projections() { return {&q, &k, &v, &o, &in, &out}; }
    std::array<const FactorizedWeight*, 6> projections() const { return {&q, &k, &v, &o, &in, &out}; }
};

struct ControlBranch {
    Dense patch_embed;
    TimeEmbed time;
    std::vector<BranchBlock> blocks;
};

// Alignment perceptron plus the frozen per-patch image encoder stand-in.
struct RepaHead {
    Dense a1, a2;
    Tensor e_img;  // repa_dim x patch_dim, never trained
    std::size_t patch_size = 4;
};

struct ControlModel {
    DenoiserConfig config;
    Tensor pos_embed;  // n_patches x token_dim, constant
    Denoiser denoiser;
    ControlBranch branch;
    RepaHead repa;
    GateState gate;  // empty when n_tailor == 0

    bool has_gate() const { return config.n_tailor > 0; }
};

ControlModel make_model(const DenoiserConfig& config, const GateConfig& gate_config, std::uint64_t seed);

enum class ParamGroup {
    denoiser,
    branch_dense,
    branch_learngene,
    branch_tailor,
    gate_hidden,
    gate_output,
    repa_head,
};

struct NamedParam {
    std::string name;
    Tensor* tensor;
    ParamGroup group;
};

// Every trainable array of the model in a fixed order. The frozen encoder is
// not included.
std::vector<NamedParam> named_parameters(ControlModel& model);
std::size_t parameter_count(const ControlModel& model);

// (B, H*W) image rows -> (B*N, patch_dim) patch rows, patches row-major.
Tensor patchify(const Tensor& images, std::size_t image_size, std::size_t patch_size);
Tensor unpatchify(const Tensor& patches, std::size_t image_size, std::size_t patch_size);
Tensor images_to_tensor(std::span<const Image> images);

struct ForwardOptions {
    bool train = false;            // enables dropout
    Rng* dropout_rng = nullptr;    // required when train && dropout > 0
};

// Six composed projection matrices per branch block.
struct BranchWeights {
    std::vector<std::array<Tensor, 6>> layers;
};

BranchWeights compose_branch_learngenes(const ControlBranch& branch);
// Adds the gated tailors to an already composed learngene set.
BranchWeights compose_branch(const ControlBranch& branch, const BranchWeights& learngenes,
                             const GatedCoefficients& coeffs);

struct BranchOutput {
    std::vector<Tensor> injections;  // one per branch block, (B*N, d)
    Tensor f_cond;                   // (B*N, d) after block repa_layer
};

BranchOutput controlnet_encode(const ControlModel& model, const BranchWeights& weights, const Tensor& cond_patches,
                               std::span<const std::size_t> t, const ForwardOptions& opt = {});
BranchOutput controlnet_encode(const ControlModel& model, const Tensor& cond_patches, const GatedCoefficients& coeffs,
                               std::span<const std::size_t> t, const ForwardOptions& opt = {});

// Injection i is added after denoiser block i; an empty list means c = 0.
Tensor denoise_predict(const ControlModel& model, const Tensor& zt_patches, const std::vector<Tensor>& c,
                       std::span<const std::size_t> t, const ForwardOptions& opt = {});

Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_hat);
Tensor repa_project(const RepaHead& head, const Tensor& f_cond);
// -(1/N) sum_n cos(A(f_cond)[n], e_img[n]). Throws ContractError on a row mismatch.
Tensor repa_loss(const Tensor& f_cond, const Tensor& e_img, const RepaHead& head);

struct LossReport {
    double l_diff = 0.0;
    double l_repa = 0.0;
    double l_total = 0.0;
    std::uint64_t step = 0;
};

LossReport total_loss(double l_diff, double l_repa, double lambda, std::uint64_t step = 0);

struct EncodedImage {
    Tensor embedding;                 // (N, repa_dim), unit rows
    std::vector<std::uint8_t> degenerate;  // 1 where the projection was zero
};

EncodedImage encode_condition_image(const RepaHead& head, const Image& x_cond, std::size_t patch_size);
// Batched form over patch rows, constant output.
Tensor encode_patches(const RepaHead& head, const Tensor& patches);

// Items sorted by condition group; group g covers items
// [group_offsets[g], group_offsets[g + 1]).
struct DiffusionBatch {
    std::vector<std::size_t> t;
    Tensor eps;          // (B*N, patch_dim)
    Tensor zt;           // (B*N, patch_dim)
    Tensor cond;         // (B*N, patch_dim)
    Tensor e_img;        // (B*N, repa_dim)
    std::vector<std::size_t> group_offsets;
    std::vector<GatedCoefficients> group_coeffs;
};

struct BatchLosses {
    Tensor l_diff;
    Tensor l_repa;
    Tensor l_total;
    Tensor eps_hat;
    Tensor f_cond;
};

BatchLosses batch_losses(const ControlModel& model, const DiffusionBatch& batch, double lambda,
                         const ForwardOptions& opt = {});

// Ancestral sampling. Image i of the batch draws from Rng(seed, sample, first_index + i);
// outputs are clamped to [-1, 1].
std::vector<Image> sample_batch(const ControlModel& model, std::span<const Image> x_cond,
                                const GatedCoefficients& coeffs, std::uint64_t seed, std::uint64_t first_index = 0);
Image sample(const ControlModel& model, const Image& x_cond, const GatedCoefficients& coeffs, std::uint64_t seed);

// One-block model with nonzero injections and gate output: the full
// l_diff + lambda * l_repa objective, routed through the gate, against every
// trainable array.
OpCheck end_to_end_loss_check();

}  // namespace divctl
