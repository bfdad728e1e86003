#include "divctl/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "divctl/errors.hpp"
#include "divctl/ops.hpp"

namespace divctl {

void DenoiserConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
        fail("image_size must be a positive multiple of patch_size");
    }
    if (token_dim == 0 || mlp_hidden == 0) fail("token_dim and mlp_hidden must be positive");
    if (heads == 0 || token_dim % heads != 0) fail("token_dim must be divisible by heads");
    if (layers == 0) fail("layers must be >= 1");
    if (controlnet_layers == 0 || controlnet_layers > layers) fail("controlnet_layers must lie in [1, layers]");
    if (repa_layer < 1 || repa_layer > controlnet_layers) fail("repa_layer must lie in [1, controlnet_layers]");
    if (timesteps == 0) fail("timesteps must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end)) fail("need 0 < beta_start <= beta_end < 1");
    if (!(lambda >= 0.0)) fail("lambda must be >= 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (repa_dim == 0 || repa_hidden == 0) fail("repa sizes must be positive");
    if (n_learngene + n_tailor != rank()) {
        fail("n_learngene + n_tailor = " + std::to_string(n_learngene + n_tailor) + " but projection rank is " +
             std::to_string(rank()));
    }
}

NoiseSchedule::NoiseSchedule(std::size_t timesteps, double beta_start, double beta_end) {
    require(timesteps >= 1, "NoiseSchedule: timesteps must be >= 1");
    betas_.resize(timesteps);
    alpha_bar_.resize(timesteps);
    const double step = timesteps > 1 ? (beta_end - beta_start) / static_cast<double>(timesteps - 1) : 0.0;
    // torch.linspace fills the second half from the end point.
    const std::size_t half = timesteps / 2;
    double ab = 1.0;
    for (std::size_t i = 0; i < timesteps; ++i) {
        betas_[i] = i < half ? beta_start + step * static_cast<double>(i)
                             : beta_end - step * static_cast<double>(timesteps - 1 - i);
        ab *= 1.0 - betas_[i];
        alpha_bar_[i] = ab;
    }
}

double NoiseSchedule::posterior_variance(std::size_t t) const {
    if (t == 0) {
        return 0.0;
    }
    return (1.0 - alpha_bar_.at(t - 1)) / (1.0 - alpha_bar_.at(t)) * betas_.at(t);
}

Tensor forward_noise(const NoiseSchedule& s, const Tensor& z0, std::size_t t, const Tensor& eps) {
    require(t < s.timesteps(), "forward_noise: t = " + std::to_string(t) + " outside [0, " +
                                   std::to_string(s.timesteps()) + ")");
    require(z0.shape() == eps.shape(), "forward_noise: z0 and eps shapes differ");
    const double a = std::sqrt(s.alpha_bar(t));
    const double b = std::sqrt(1.0 - s.alpha_bar(t));
    return add(scale(z0, a), scale(eps, b));
}

std::vector<double> posterior_mean(const NoiseSchedule& s, std::span<const double> z_t,
                                   std::span<const double> eps_hat, std::size_t t) {
    require(t < s.timesteps(), "posterior_mean: t out of range");
    require(z_t.size() == eps_hat.size(), "posterior_mean: size mismatch");
    const double coef = s.beta(t) / std::sqrt(1.0 - s.alpha_bar(t));
    const double inv = 1.0 / std::sqrt(s.alpha(t));
    std::vector<double> out(z_t.size());
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        out[i] = inv * (z_t[i] - coef * eps_hat[i]);
    }
    return out;
}

namespace {

Dense make_dense(std::size_t out, std::size_t in, Rng& rng, bool bias = true) {
    Dense d;
    d.w = kaiming_uniform(out, in, rng);
    if (bias) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        std::vector<double> b(out);
        for (double& x : b) {
            x = rng.uniform(-bound, bound);
        }
        d.b = Tensor::from_data({out}, std::move(b), true);
    }
    return d;
}

Dense zero_dense(std::size_t out, std::size_t in) {
    return {Tensor::zeros({out, in}, true), Tensor::zeros({out}, true)};
}

Tensor apply(const Dense& d, const Tensor& x) {
    return d.b.defined() ? linear(x, d.w, d.b) : linear(x, d.w);
}

// Fixed 2-D sinusoidal table: half the channels encode the row, half the column.
Tensor sincos_2d(std::size_t grid, std::size_t dim) {
    std::vector<double> out(grid * grid * dim, 0.0);
    const std::size_t quarter = dim / 4;
    for (std::size_t r = 0; r < grid; ++r) {
        for (std::size_t c = 0; c < grid; ++c) {
            double* row = out.data() + (r * grid + c) * dim;
            for (std::size_t i = 0; i < quarter; ++i) {
                const double f = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(quarter));
                row[i] = std::sin(static_cast<double>(r) * f);
                row[quarter + i] = std::cos(static_cast<double>(r) * f);
                row[2 * quarter + i] = std::sin(static_cast<double>(c) * f);
                row[3 * quarter + i] = std::cos(static_cast<double>(c) * f);
            }
        }
    }
    return Tensor::from_data({grid * grid, dim}, std::move(out));
}

Tensor timestep_table(std::span<const std::size_t> t, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<double> out(t.size() * dim, 0.0);
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            const double f = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
            out[b * dim + i] = std::sin(static_cast<double>(t[b]) * f);
            out[b * dim + half + i] = std::cos(static_cast<double>(t[b]) * f);
        }
    }
    return Tensor::from_data({t.size(), dim}, std::move(out));
}

// Token rows for a batch: embed patches, add position (tiled) and time (per item).
Tensor embed_tokens(const ControlModel& m, const Dense& patch_embed, const TimeEmbed& time, const Tensor& patches,
                    std::span<const std::size_t> t) {
    const std::size_t n = m.config.n_patches();
    const std::size_t d = m.config.token_dim;
    require(patches.rows() == t.size() * n, "token embedding: " + std::to_string(patches.rows()) +
                                                " patch rows for " + std::to_string(t.size()) + " items");
    Tensor x = apply(patch_embed, patches);
    if (!m.config.zero_pos_embed) {
        std::vector<double> tiled;
        tiled.reserve(t.size() * n * d);
        const auto pe = m.pos_embed.data();
        for (std::size_t b = 0; b < t.size(); ++b) {
            tiled.insert(tiled.end(), pe.begin(), pe.end());
        }
        x = add(x, Tensor::from_data({t.size() * n, d}, std::move(tiled)));
    }
    Tensor te = apply(time.l2, silu(apply(time.l1, timestep_table(t, d))));
    return add(x, repeat_rows(te, n));
}

Tensor dropout(const Tensor& x, double p, const ForwardOptions& opt) {
    if (!opt.train || p <= 0.0) {
        return x;
    }
    require(opt.dropout_rng != nullptr, "dropout: training forward needs a dropout stream");
    std::vector<double> mask(x.numel());
    const double keep = 1.0 / (1.0 - p);
    for (double& v : mask) {
        v = opt.dropout_rng->uniform() < p ? 0.0 : keep;
    }
    return mul(x, Tensor::from_data(x.shape(), std::move(mask)));
}

Tensor transformer_block(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv, const Tensor& wo,
                         const Tensor& w_in, const Tensor& b_in, const Tensor& w_out, const Tensor& b_out,
                         const DenoiserConfig& c, const ForwardOptions& opt) {
    const Tensor h = layer_norm(x);
    const Tensor a = attention(linear(h, wq), linear(h, wk), linear(h, wv), c.n_patches(), c.heads);
    const Tensor x1 = add(x, linear(a, wo));
    const Tensor m = dropout(gelu(linear(layer_norm(x1), w_in, b_in)), c.dropout, opt);
    return add(x1, linear(m, w_out, b_out));
}

void push_dense(std::vector<NamedParam>& out, const std::string& prefix, Dense& d, ParamGroup g) {
    out.push_back({prefix + "/w", &d.w, g});
    if (d.b.defined()) {
        out.push_back({prefix + "/b", &d.b, g});
    }
}

void push_block(std::vector<NamedParam>& out, const std::string& prefix, ComponentBlock& b, ParamGroup g) {
    if (b.size() == 0) {
        return;
    }
    out.push_back({prefix + "/u", &b.u, g});
    out.push_back({prefix + "/sigma", &b.sigma, g});
    out.push_back({prefix + "/v", &b.v, g});
}

}  // namespace

ControlModel make_model(const DenoiserConfig& config, const GateConfig& gate_config, std::uint64_t seed) {
    config.validate();
    ControlModel m;
    m.config = config;
    const std::size_t d = config.token_dim;
    const std::size_t h = config.mlp_hidden;
    const std::size_t pd = config.patch_dim();
    m.pos_embed = sincos_2d(config.grid(), d);

    // Separate init sub-streams keep the denoiser identical across branch variants.
    Rng rd(seed, Stream::init, 0);
    m.denoiser.patch_embed = make_dense(d, pd, rd);
    m.denoiser.time = {make_dense(d, d, rd), make_dense(d, d, rd)};
    for (std::size_t l = 0; l < config.layers; ++l) {
        DenoiserBlock b;
        b.wq = kaiming_uniform(d, d, rd);
        b.wk = kaiming_uniform(d, d, rd);
        b.wv = kaiming_uniform(d, d, rd);
        b.wo = kaiming_uniform(d, d, rd);
        b.mlp_in = make_dense(h, d, rd);
        b.mlp_out = make_dense(d, h, rd);
        m.denoiser.blocks.push_back(std::move(b));
    }
    m.denoiser.head = make_dense(pd, d, rd);

    Rng rb(seed, Stream::init, 1);
    m.branch.patch_embed = make_dense(d, pd, rb);
    m.branch.time = {make_dense(d, d, rb), make_dense(d, d, rb)};
    const std::size_t ng = config.n_learngene, nt = config.n_tailor;
    for (std::size_t l = 0; l < config.controlnet_layers; ++l) {
        const int li = static_cast<int>(l) + 1;
        BranchBlock b;
        b.q = init_factorized(d, d, ng, nt, ProjectionTag::q, li, rb);
        b.k = init_factorized(d, d, ng, nt, ProjectionTag::k, li, rb);
        b.v = init_factorized(d, d, ng, nt, ProjectionTag::v, li, rb);
        b.o = init_factorized(d, d, ng, nt, ProjectionTag::o, li, rb);
        b.in = init_factorized(h, d, ng, nt, ProjectionTag::in, li, rb);
        b.out = init_factorized(d, h, ng, nt, ProjectionTag::out, li, rb);
        const Dense bin = make_dense(h, d, rb);
        const Dense bout = make_dense(d, h, rb);
        b.b_in = bin.b;
        b.b_out = bout.b;
        b.inject = zero_dense(d, d);
        m.branch.blocks.push_back(std::move(b));
    }

    Rng rr(seed, Stream::init, 2);
    m.repa.a1 = make_dense(config.repa_hidden, d, rr);
    m.repa.a2 = make_dense(config.repa_dim, config.repa_hidden, rr);
    m.repa.patch_size = config.patch_size;
    Rng rv(seed, Stream::vision, 0);
    std::vector<double> e(config.repa_dim * pd);
    for (double& x : e) {
        x = rv.normal() / std::sqrt(static_cast<double>(pd));
    }
    m.repa.e_img = Tensor::from_data({config.repa_dim, pd}, std::move(e));

    if (nt > 0) {
        GateConfig gc = gate_config;
        gc.n_tailor = nt;
        Rng rg(seed, Stream::init, 3);
        m.gate = make_gate(gc, rg);
    }
    return m;
}

std::vector<NamedParam> named_parameters(ControlModel& m) {
    std::vector<NamedParam> out;
    const auto D = ParamGroup::denoiser;
    push_dense(out, "denoiser/patch_embed", m.denoiser.patch_embed, D);
    push_dense(out, "denoiser/time1", m.denoiser.time.l1, D);
    push_dense(out, "denoiser/time2", m.denoiser.time.l2, D);
    for (std::size_t l = 0; l < m.denoiser.blocks.size(); ++l) {
        auto& b = m.denoiser.blocks[l];
        const std::string p = "denoiser/block" + std::to_string(l + 1);
        out.push_back({p + "/wq", &b.wq, D});
        out.push_back({p + "/wk", &b.wk, D});
        out.push_back({p + "/wv", &b.wv, D});
        out.push_back({p + "/wo", &b.wo, D});
        push_dense(out, p + "/mlp_in", b.mlp_in, D);
        push_dense(out, p + "/mlp_out", b.mlp_out, D);
    }
    push_dense(out, "denoiser/head", m.denoiser.head, D);

    const auto BD = ParamGroup::branch_dense;
    push_dense(out, "branch/patch_embed", m.branch.patch_embed, BD);
    push_dense(out, "branch/time1", m.branch.time.l1, BD);
    push_dense(out, "branch/time2", m.branch.time.l2, BD);
    for (std::size_t l = 0; l < m.branch.blocks.size(); ++l) {
        auto& b = m.branch.blocks[l];
        const std::string p = "branch/block" + std::to_string(l + 1);
        for (FactorizedWeight* fw : b.projections()) {
            const std::string q = p + "/" + to_string(fw->tag);
            push_block(out, q + "/learngene", fw->learngenes, ParamGroup::branch_learngene);
            push_block(out, q + "/tailor", fw->tailors, ParamGroup::branch_tailor);
        }
        out.push_back({p + "/b_in", &b.b_in, BD});
        out.push_back({p + "/b_out", &b.b_out, BD});
        push_dense(out, p + "/inject", b.inject, BD);
    }

    if (m.has_gate()) {
        out.push_back({"gate/w1", &m.gate.net.w1, ParamGroup::gate_hidden});
        out.push_back({"gate/b1", &m.gate.net.b1, ParamGroup::gate_hidden});
        out.push_back({"gate/w2", &m.gate.net.w2, ParamGroup::gate_output});
        out.push_back({"gate/b2", &m.gate.net.b2, ParamGroup::gate_output});
    }
    push_dense(out, "repa/a1", m.repa.a1, ParamGroup::repa_head);
    push_dense(out, "repa/a2", m.repa.a2, ParamGroup::repa_head);
    return out;
}

std::size_t parameter_count(const ControlModel& model) {
    auto& m = const_cast<ControlModel&>(model);
    std::size_t n = 0;
    for (const auto& p : named_parameters(m)) {
        n += p.tensor->numel();
    }
    return n;
}

Tensor patchify(const Tensor& images, std::size_t image_size, std::size_t patch_size) {
    require(images.ndim() == 2 && images.cols() == image_size * image_size, "patchify: expected (B, H*W) rows");
    const std::size_t b = images.rows(), g = image_size / patch_size, pd = patch_size * patch_size;
    std::vector<double> out(images.numel());
    const auto src = images.data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t pr = 0; pr < g; ++pr) {
            for (std::size_t pc = 0; pc < g; ++pc) {
                double* dst = out.data() + ((i * g + pr) * g + pc) * pd;
                for (std::size_t r = 0; r < patch_size; ++r) {
                    for (std::size_t c = 0; c < patch_size; ++c) {
                        dst[r * patch_size + c] =
                            src[i * image_size * image_size + (pr * patch_size + r) * image_size + pc * patch_size + c];
                    }
                }
            }
        }
    }
    return Tensor::from_data({b * g * g, pd}, std::move(out));
}

Tensor unpatchify(const Tensor& patches, std::size_t image_size, std::size_t patch_size) {
    const std::size_t g = image_size / patch_size, pd = patch_size * patch_size;
    require(patches.ndim() == 2 && patches.cols() == pd && patches.rows() % (g * g) == 0,
            "unpatchify: expected (B*N, patch_dim) rows");
    const std::size_t b = patches.rows() / (g * g);
    std::vector<double> out(patches.numel());
    const auto src = patches.data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t pr = 0; pr < g; ++pr) {
            for (std::size_t pc = 0; pc < g; ++pc) {
                const double* s = src.data() + ((i * g + pr) * g + pc) * pd;
                for (std::size_t r = 0; r < patch_size; ++r) {
                    for (std::size_t c = 0; c < patch_size; ++c) {
                        out[i * image_size * image_size + (pr * patch_size + r) * image_size + pc * patch_size + c] =
                            s[r * patch_size + c];
                    }
                }
            }
        }
    }
    return Tensor::from_data({b, image_size * image_size}, std::move(out));
}

Tensor images_to_tensor(std::span<const Image> images) {
    require(!images.empty(), "images_to_tensor: empty batch");
    const std::size_t n = images[0].px.size();
    std::vector<double> out;
    out.reserve(images.size() * n);
    for (const auto& im : images) {
        require(im.px.size() == n, "images_to_tensor: mixed image sizes");
        out.insert(out.end(), im.px.begin(), im.px.end());
    }
    return Tensor::from_data({images.size(), n}, std::move(out));
}

BranchWeights compose_branch_learngenes(const ControlBranch& branch) {
    BranchWeights w;
    for (const auto& b : branch.blocks) {
        std::array<Tensor, 6> layer;
        const auto projs = b.projections();
        for (std::size_t i = 0; i < 6; ++i) {
            layer[i] = compose_learngenes(*projs[i]);
        }
        w.layers.push_back(std::move(layer));
    }
    return w;
}

BranchWeights compose_branch(const ControlBranch& branch, const BranchWeights& learngenes,
                             const GatedCoefficients& coeffs) {
    BranchWeights w = learngenes;
    for (std::size_t l = 0; l < branch.blocks.size(); ++l) {
        const auto projs = branch.blocks[l].projections();
        for (std::size_t i = 0; i < 6; ++i) {
            if (projs[i]->n_tailor() > 0) {
                w.layers[l][i] = add(learngenes.layers[l][i], compose_tailors(*projs[i], coeffs));
            }
        }
    }
    return w;
}

BranchOutput controlnet_encode(const ControlModel& m, const BranchWeights& w, const Tensor& cond_patches,
                               std::span<const std::size_t> t, const ForwardOptions& opt) {
    const auto& c = m.config;
    Tensor x = embed_tokens(m, m.branch.patch_embed, m.branch.time, cond_patches, t);
    BranchOutput out;
    for (std::size_t l = 0; l < m.branch.blocks.size(); ++l) {
        const auto& b = m.branch.blocks[l];
        const auto& lw = w.layers.at(l);
        x = transformer_block(x, lw[0], lw[1], lw[2], lw[3], lw[4], b.b_in, lw[5], b.b_out, c, opt);
        if (l + 1 == c.repa_layer) {
            out.f_cond = x;
        }
        out.injections.push_back(apply(b.inject, x));
    }
    return out;
}

BranchOutput controlnet_encode(const ControlModel& m, const Tensor& cond_patches, const GatedCoefficients& coeffs,
                               std::span<const std::size_t> t, const ForwardOptions& opt) {
    const BranchWeights lg = compose_branch_learngenes(m.branch);
    return controlnet_encode(m, m.has_gate() ? compose_branch(m.branch, lg, coeffs) : lg, cond_patches, t, opt);
}

Tensor denoise_predict(const ControlModel& m, const Tensor& zt_patches, const std::vector<Tensor>& c,
                       std::span<const std::size_t> t, const ForwardOptions& opt) {
    require(c.empty() || c.size() <= m.denoiser.blocks.size(), "denoise_predict: more injections than layers");
    Tensor x = embed_tokens(m, m.denoiser.patch_embed, m.denoiser.time, zt_patches, t);
    for (std::size_t l = 0; l < m.denoiser.blocks.size(); ++l) {
        const auto& b = m.denoiser.blocks[l];
        x = transformer_block(x, b.wq, b.wk, b.wv, b.wo, b.mlp_in.w, b.mlp_in.b, b.mlp_out.w, b.mlp_out.b, m.config,
                              opt);
        if (l < c.size()) {
            x = add(x, c[l]);
        }
    }
    return apply(m.denoiser.head, layer_norm(x));
}

Tensor diffusion_loss(const Tensor& eps, const Tensor& eps_hat) {
    return mse_loss(eps_hat, eps);
}

Tensor repa_project(const RepaHead& head, const Tensor& f_cond) {
    return apply(head.a2, silu(apply(head.a1, f_cond)));
}

Tensor repa_loss(const Tensor& f_cond, const Tensor& e_img, const RepaHead& head) {
    require(f_cond.ndim() == 2 && e_img.ndim() == 2 && f_cond.rows() == e_img.rows(),
            "repa_loss: f_cond has " + std::to_string(f_cond.rows()) + " patches, e_img has " +
                std::to_string(e_img.rows()));
    return scale(mean(row_cosine(repa_project(head, f_cond), e_img)), -1.0);
}

LossReport total_loss(double l_diff, double l_repa, double lambda, std::uint64_t step) {
    require(lambda >= 0.0, "total_loss: lambda must be >= 0");
    return {l_diff, l_repa, l_diff + lambda * l_repa, step};
}

Tensor encode_patches(const RepaHead& head, const Tensor& patches) {
    NoGradGuard ng;
    const Tensor proj = linear(patches, head.e_img);
    const std::size_t n = proj.rows(), d = proj.cols();
    std::vector<double> out(proj.data().begin(), proj.data().end());
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            s += out[r * d + j] * out[r * d + j];
        }
        if (s > 0.0) {
            const double inv = 1.0 / std::sqrt(s);
            for (std::size_t j = 0; j < d; ++j) {
                out[r * d + j] *= inv;
            }
        }
    }
    return Tensor::from_data({n, d}, std::move(out));
}

EncodedImage encode_condition_image(const RepaHead& head, const Image& x_cond, std::size_t patch_size) {
    require(x_cond.height == x_cond.width && x_cond.height % patch_size == 0,
            "encode_condition_image: image does not tile into patches");
    require(head.e_img.cols() == patch_size * patch_size, "encode_condition_image: patch size does not match encoder");
    const Tensor rows = Tensor::from_data({1, x_cond.px.size()}, x_cond.px);
    EncodedImage e;
    e.embedding = encode_patches(head, patchify(rows, x_cond.height, patch_size));
    const std::size_t d = e.embedding.cols();
    e.degenerate.assign(e.embedding.rows(), 0);
    for (std::size_t r = 0; r < e.embedding.rows(); ++r) {
        bool zero = true;
        for (std::size_t j = 0; j < d && zero; ++j) {
            zero = e.embedding.at(r, j) == 0.0;
        }
        e.degenerate[r] = zero ? 1 : 0;
    }
    return e;
}

BatchLosses batch_losses(const ControlModel& m, const DiffusionBatch& batch, double lambda,
                         const ForwardOptions& opt) {
    const std::size_t n = m.config.n_patches();
    const std::size_t groups = batch.group_offsets.size() - 1;
    require(batch.group_offsets.size() >= 2 && batch.group_offsets.back() == batch.t.size(),
            "batch_losses: group offsets do not cover the batch");
    require(batch.group_coeffs.size() == groups, "batch_losses: one coefficient set per group required");

    const BranchWeights lg = compose_branch_learngenes(m.branch);
    std::vector<std::vector<Tensor>> per_layer(m.branch.blocks.size());
    std::vector<Tensor> f_parts;
    const std::span<const std::size_t> all_t(batch.t);
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t b0 = batch.group_offsets[g], b1 = batch.group_offsets[g + 1];
        if (b0 == b1) {
            continue;
        }
        const BranchWeights w = m.has_gate() ? compose_branch(m.branch, lg, batch.group_coeffs[g]) : lg;
        const BranchOutput bo =
            controlnet_encode(m, w, slice_rows(batch.cond, b0 * n, b1 * n), all_t.subspan(b0, b1 - b0), opt);
        for (std::size_t l = 0; l < bo.injections.size(); ++l) {
            per_layer[l].push_back(bo.injections[l]);
        }
        f_parts.push_back(bo.f_cond);
    }
    std::vector<Tensor> c;
    for (auto& parts : per_layer) {
        c.push_back(parts.size() == 1 ? parts[0] : concat_rows(parts));
    }
    BatchLosses out;
    out.f_cond = f_parts.size() == 1 ? f_parts[0] : concat_rows(f_parts);
    out.eps_hat = denoise_predict(m, batch.zt, c, all_t, opt);
    out.l_diff = diffusion_loss(batch.eps, out.eps_hat);
    out.l_repa = repa_loss(out.f_cond, batch.e_img, m.repa);
    out.l_total = lambda > 0.0 ? add(out.l_diff, scale(out.l_repa, lambda)) : out.l_diff;
    return out;
}

std::vector<Image> sample_batch(const ControlModel& m, std::span<const Image> x_cond,
                                const GatedCoefficients& coeffs, std::uint64_t seed, std::uint64_t first_index) {
    NoGradGuard ng;
    const auto& cfg = m.config;
    const NoiseSchedule sched(cfg);
    const std::size_t b = x_cond.size();
    const std::size_t npx = cfg.image_size * cfg.image_size;
    for (const auto& im : x_cond) {
        require(im.height == cfg.image_size && im.width == cfg.image_size, "sample: x_cond must match image_size");
    }
    const Tensor cond = patchify(images_to_tensor(x_cond), cfg.image_size, cfg.patch_size);
    const BranchWeights lg = compose_branch_learngenes(m.branch);
    const BranchWeights w = m.has_gate() ? compose_branch(m.branch, lg, coeffs) : lg;

    std::vector<Rng> rngs;
    for (std::size_t i = 0; i < b; ++i) {
        rngs.emplace_back(seed, Stream::sample, first_index + i);
    }
    std::vector<double> z(b * npx);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < npx; ++j) {
            z[i * npx + j] = rngs[i].normal();
        }
    }
    for (std::size_t step = sched.timesteps(); step-- > 0;) {
        const std::vector<std::size_t> t(b, step);
        const BranchOutput bo = controlnet_encode(m, w, cond, t, {});
        const Tensor zp = patchify(Tensor::from_data({b, npx}, z), cfg.image_size, cfg.patch_size);
        const Tensor eps_hat = unpatchify(denoise_predict(m, zp, bo.injections, t, {}), cfg.image_size, cfg.patch_size);
        z = posterior_mean(sched, z, eps_hat.data(), step);
        if (step > 0) {
            const double sd = std::sqrt(sched.posterior_variance(step));
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < npx; ++j) {
                    z[i * npx + j] += sd * rngs[i].normal();
                }
            }
        }
    }
    std::vector<Image> out(b, Image(cfg.image_size, cfg.image_size));
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < npx; ++j) {
            out[i].px[j] = std::clamp(z[i * npx + j], -1.0, 1.0);
        }
    }
    return out;
}

Image sample(const ControlModel& m, const Image& x_cond, const GatedCoefficients& coeffs, std::uint64_t seed) {
    return sample_batch(m, std::span<const Image>(&x_cond, 1), coeffs, seed, 0)[0];
}

}  // namespace divctl

namespace divctl {

OpCheck end_to_end_loss_check() {
    return {"end_to_end_loss", [](std::uint64_t seed) {
                DenoiserConfig c;
                c.image_size = 8;
                c.patch_size = 4;
                c.token_dim = 8;
                c.layers = 1;
                c.controlnet_layers = 1;
                c.mlp_hidden = 12;
                c.timesteps = 10;
                c.repa_layer = 1;
                c.repa_hidden = 6;
                c.repa_dim = 5;
                c.dropout = 0.0;
                c.n_learngene = 5;
                c.n_tailor = 3;
                GateConfig gc;
                gc.embed_dim = 6;
                gc.top_k = 2;
                auto m = std::make_shared<ControlModel>(make_model(c, gc, seed));
                Rng rng(seed, Stream::init, 99);
                // Open the injection and gate paths that start at zero.
                for (Tensor* t : {&m->branch.blocks[0].inject.w, &m->branch.blocks[0].inject.b, &m->gate.net.w2,
                                  &m->gate.net.b2}) {
                    for (double& x : t->mutable_data()) {
                        x = rng.uniform(-0.5, 0.5);
                    }
                }
                const std::size_t items = 3, n = c.n_patches(), pd = c.patch_dim();
                auto batch = std::make_shared<DiffusionBatch>();
                std::vector<double> eps(items * n * pd), cond(items * n * pd), zt(items * n * pd);
                for (std::size_t i = 0; i < eps.size(); ++i) {
                    eps[i] = rng.normal();
                    cond[i] = rng.uniform(-1.0, 1.0);
                    zt[i] = rng.normal();
                }
                batch->t = {1, 4, 7};
                batch->eps = Tensor::from_data({items * n, pd}, eps);
                batch->zt = Tensor::from_data({items * n, pd}, zt);
                batch->cond = Tensor::from_data({items * n, pd}, cond);
                batch->e_img = encode_patches(m->repa, batch->cond);
                batch->group_offsets = {0, 2, 3};
                std::vector<InstructionEmbedding> emb;
                for (const char* text : {"first probe", "second probe"}) {
                    emb.push_back(embed_instruction(seed, text, gc.embed_dim));
                }
                std::vector<Tensor> leaves;
                for (const auto& p : named_parameters(*m)) {
                    leaves.push_back(*p.tensor);
                }
                auto f = [m, batch, emb]() {
                    DiffusionBatch b = *batch;
                    b.group_coeffs.clear();
                    for (const auto& e : emb) {
                        b.group_coeffs.push_back(topk_select(route(m->gate, e), m->gate));
                    }
                    return batch_losses(*m, b, 0.5, {}).l_total;
                };
                return std::make_pair(std::function<Tensor()>(f), leaves);
            }};
}

}  // namespace divctl
