#include "divctl/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "divctl/errors.hpp"
#include "divctl/ops.hpp"

namespace divctl {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double mean_of(const std::vector<StepRecord>& s, std::size_t begin, std::size_t end, double LossReport::*field) {
    end = std::min(end, s.size());
    if (begin >= end) {
        return kNaN;
    }
    double acc = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
        acc += s[i].loss.*field;
    }
    return acc / static_cast<double>(end - begin);
}

void fold(std::uint64_t& h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 0x100000001b3ULL;
    }
}

std::vector<std::size_t> conditions_for(const RunConfig& cfg, const ConditionBank& bank) {
    if (cfg.train.mode == TrainMode::diversion) {
        auto c = resolve_conditions(bank, cfg.train.conditions);
        for (std::size_t k : c) {
            require(bank.conditions()[k].shift_class == ShiftClass::basic,
                    "diversion trains on basic conditions only; '" + bank.conditions()[k].condition_id +
                        "' is " + to_string(bank.conditions()[k].shift_class));
        }
        return c;
    }
    return {bank.index_of(cfg.train.adapt_condition)};
}

std::vector<double> patch_rows(const Image& im, std::size_t patch_size) {
    const Tensor t = patchify(Tensor::from_data({1, im.px.size()}, im.px), im.height, patch_size);
    return {t.data().begin(), t.data().end()};
}

std::vector<double> to_vec(const Tensor& t) {
    return {t.data().begin(), t.data().end()};
}

}  // namespace

double RunMetrics::mean_l_diff(std::size_t begin, std::size_t end) const {
    return mean_of(steps, begin, end, &LossReport::l_diff);
}

double RunMetrics::mean_l_repa(std::size_t begin, std::size_t end) const {
    return mean_of(steps, begin, end, &LossReport::l_repa);
}

double RunMetrics::final_l_diff(std::size_t window) const {
    const std::size_t n = steps.size();
    return mean_l_diff(n > window ? n - window : 0, n);
}

double RunMetrics::final_l_repa(std::size_t window) const {
    const std::size_t n = steps.size();
    return mean_l_repa(n > window ? n - window : 0, n);
}

std::vector<std::size_t> resolve_conditions(const ConditionBank& bank, const std::string& spec) {
    if (spec == "basic") {
        return bank.indices_of(ShiftClass::basic);
    }
    if (spec == "all") {
        std::vector<std::size_t> all(bank.conditions().size());
        std::iota(all.begin(), all.end(), std::size_t{0});
        return all;
    }
    std::vector<std::size_t> out;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(' '));
        item.erase(item.find_last_not_of(' ') + 1);
        if (!item.empty()) {
            out.push_back(bank.index_of(item));
        }
    }
    require(!out.empty(), "no conditions selected by '" + spec + "'");
    return out;
}

std::vector<InstructionEmbedding> embed_conditions(const ConditionBank& bank, std::span<const std::size_t> conditions,
                                                   std::uint64_t text_seed, std::size_t dim) {
    std::vector<InstructionEmbedding> out;
    for (std::size_t k : conditions) {
        const auto& spec = bank.conditions()[k];
        out.push_back(embed_instruction(text_seed, spec.instruction, dim, spec.condition_id));
    }
    return out;
}

ConditionBank adaptation_bank(const RunConfig& cfg) {
    return ConditionBank(cfg.train.adapt_images, derive_seed(cfg.train.seed, Stream::adapt, 0), cfg.model.image_size);
}

Trainer::Trainer(RunConfig cfg, const ConditionBank& bank)
    : cfg_(std::move(cfg)),
      bank_(&bank),
      model_(make_model(cfg_.model, cfg_.gate, cfg_.train.seed)),
      schedule_(cfg_.model),
      conditions_(conditions_for(cfg_, bank)),
      embeddings_(embed_conditions(bank, conditions_, cfg_.train.text_encoder_seed, cfg_.gate.embed_dim)),
      data_(bank, conditions_, cfg_.train.batch_size, cfg_.train.seed) {
    cfg_.validate();
    require(cfg_.train.mode != TrainMode::adapt_frozen, "adapt_frozen needs a source checkpoint");
    require(bank.image_size() == cfg_.model.image_size, "Trainer: bank image size differs from the model");
    require(!model_.has_gate() || cfg_.gate.embed_dim == model_.gate.embed_dim(), "Trainer: gate width mismatch");
    setup_optimizer(false);
    precompute_condition_images();
}

Trainer::Trainer(RunConfig cfg, const ConditionBank& bank, const Checkpoint& source)
    : cfg_(std::move(cfg)),
      bank_(&bank),
      model_(model_from_checkpoint(source)),
      schedule_(model_.config),
      conditions_(conditions_for(cfg_, bank)),
      embeddings_(),
      data_(bank, conditions_, cfg_.train.batch_size, cfg_.train.seed) {
    if (cfg_.train.mode != TrainMode::adapt_frozen) {
        throw ContractError("few-shot adaptation requires mode = adapt_frozen, got " + to_string(cfg_.train.mode));
    }
    // The architecture is the source's; only training settings come from cfg.
    const RunConfig src = config_from_checkpoint(source);
    cfg_.model = src.model;
    cfg_.gate = src.gate;
    cfg_.validate();
    require(bank.image_size() == cfg_.model.image_size, "Trainer: bank image size differs from the model");
    require(model_.has_gate(), "adaptation needs a source model with tailors (n_tailor > 0)");
    const auto& spec = bank.conditions()[conditions_[0]];
    require(spec.shift_class == ShiftClass::novel_high,
            "adapt_frozen targets novel_high conditions; '" + spec.condition_id + "' is " + to_string(spec.shift_class));
    embeddings_ = embed_conditions(bank, conditions_, cfg_.train.text_encoder_seed, cfg_.gate.embed_dim);

    for (std::size_t l = 0; l < model_.branch.blocks.size(); ++l) {
        auto projs = model_.branch.blocks[l].projections();
        for (std::size_t p = 0; p < projs.size(); ++p) {
            Rng rng(cfg_.train.seed, Stream::adapt, 1 + l * projs.size() + p);
            projs[p]->tailors = fresh_tailors(*projs[p], rng);
        }
    }
    reset_gate_output(model_.gate);
    setup_optimizer(true);
    precompute_condition_images();
}

std::size_t Trainer::total_steps() const {
    return cfg_.train.mode == TrainMode::diversion ? cfg_.train.steps : cfg_.train.adapt_steps;
}

void Trainer::setup_optimizer(bool adapt) {
    AdamWConfig ac;
    ac.lr = cfg_.train.lr;
    ac.beta1 = cfg_.train.beta1;
    ac.beta2 = cfg_.train.beta2;
    ac.eps = cfg_.train.adam_eps;
    ac.weight_decay = cfg_.train.weight_decay;
    opt_ = AdamW(ac);
    lr_ = LrSchedule{cfg_.train.lr, cfg_.train.milestones, cfg_.train.lr_factor};
    for (auto& p : named_parameters(model_)) {
        const bool trainable = !adapt || p.group == ParamGroup::branch_tailor || p.group == ParamGroup::gate_output;
        if (!trainable) {
            // Frozen arrays stay off the tape entirely.
            p.tensor->node()->requires_grad = false;
        }
        if (p.group == ParamGroup::branch_tailor) {
            tailor_params_.push_back(p.name);
        }
        opt_.add(p.name, *p.tensor, !trainable);
    }
    metrics_.condition_ids.clear();
    for (std::size_t k : conditions_) {
        metrics_.condition_ids.push_back(bank_->conditions()[k].condition_id);
    }
}

void Trainer::precompute_condition_images() {
    const auto& images = bank_->images();
    const std::size_t ps = cfg_.model.patch_size;
    image_patches_.clear();
    for (const auto& im : images) {
        image_patches_.push_back(patch_rows(im, ps));
    }
    cond_patches_.assign(conditions_.size(), {});
    for (std::size_t k = 0; k < conditions_.size(); ++k) {
        for (std::size_t i = 0; i < images.size(); ++i) {
            cond_patches_[k].push_back(patch_rows(bank_->condition_image(i, conditions_[k]), ps));
        }
    }
}

LossReport Trainer::step() {
    const auto& mc = model_.config;
    const std::size_t npx = mc.image_size * mc.image_size;
    const std::size_t n = mc.n_patches();
    const std::size_t pd = mc.patch_dim();
    const auto items = data_.batch_at(step_);
    const std::size_t b = items.size();

    // Timestep then noise per item, in draw order; noise is laid out in patch rows.
    Rng noise(cfg_.train.seed, Stream::noise, step_);
    std::vector<std::size_t> t(b);
    std::vector<std::vector<double>> eps(b, std::vector<double>(npx));
    for (std::size_t i = 0; i < b; ++i) {
        t[i] = noise.below(mc.timesteps);
        for (double& e : eps[i]) {
            e = noise.normal();
        }
    }
    std::vector<std::size_t> slot(b);  // position of the item's condition in conditions_
    for (std::size_t i = 0; i < b; ++i) {
        slot[i] = static_cast<std::size_t>(
            std::find(conditions_.begin(), conditions_.end(), items[i].condition_index) - conditions_.begin());
        fold(audit_, items[i].image_index);
        fold(audit_, items[i].condition_index);
        fold(audit_, t[i]);
        for (double e : eps[i]) {
            fold(audit_, std::bit_cast<std::uint64_t>(e));
        }
    }
    std::vector<std::size_t> order(b);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return slot[x] < slot[y]; });

    DiffusionBatch batch;
    std::vector<double> eps_v, zt_v, cond_v;
    eps_v.reserve(b * npx);
    zt_v.reserve(b * npx);
    cond_v.reserve(b * npx);
    std::vector<std::size_t> group_slot;
    for (std::size_t pos = 0; pos < b; ++pos) {
        const std::size_t i = order[pos];
        if (pos == 0 || slot[i] != slot[order[pos - 1]]) {
            batch.group_offsets.push_back(pos);
            group_slot.push_back(slot[i]);
        }
        batch.t.push_back(t[i]);
        const double a = std::sqrt(schedule_.alpha_bar(t[i]));
        const double s = std::sqrt(1.0 - schedule_.alpha_bar(t[i]));
        const auto& z0 = image_patches_[items[i].image_index];
        for (std::size_t j = 0; j < npx; ++j) {
            eps_v.push_back(eps[i][j]);
            zt_v.push_back(a * z0[j] + s * eps[i][j]);
        }
        const auto& cp = cond_patches_[slot[i]][items[i].image_index];
        cond_v.insert(cond_v.end(), cp.begin(), cp.end());
    }
    batch.group_offsets.push_back(b);
    batch.eps = Tensor::from_data({b * n, pd}, std::move(eps_v));
    batch.zt = Tensor::from_data({b * n, pd}, std::move(zt_v));
    batch.cond = Tensor::from_data({b * n, pd}, std::move(cond_v));
    batch.e_img = encode_patches(model_.repa, batch.cond);

    std::vector<std::uint8_t> active(model_.config.n_tailor, 0);
    for (std::size_t g = 0; g < group_slot.size(); ++g) {
        if (!model_.has_gate()) {
            batch.group_coeffs.emplace_back();
            continue;
        }
        const Tensor alpha = route(model_.gate, embeddings_[group_slot[g]]);
        GatedCoefficients coeffs = topk_select(alpha, model_.gate);
        for (std::size_t r = batch.group_offsets[g]; r < batch.group_offsets[g + 1]; ++r) {
            record_usage(model_.gate, coeffs);
        }
        for (std::size_t j : coeffs.active_set) {
            active[j] = 1;
        }
        batch.group_coeffs.push_back(std::move(coeffs));
    }

    Rng drop(cfg_.train.seed, Stream::dropout, step_);
    ForwardOptions fo;
    fo.train = true;
    fo.dropout_rng = &drop;
    const double lambda = mc.lambda;
    const BatchLosses losses = batch_losses(model_, batch, lambda, fo);
    const LossReport report = total_loss(losses.l_diff.item(), losses.l_repa.item(), lambda, step_ + 1);
    if (!std::isfinite(report.l_total)) {
        if (!snapshot_path_.empty()) {
            Checkpoint snap = checkpoint();
            snap.put_u64("nan/step", {step_ + 1});
            save_checkpoint(snapshot_path_, snap);
        }
        throw NumericError("non-finite loss at step " + std::to_string(step_ + 1) + " (l_diff " +
                           std::to_string(report.l_diff) + ", l_repa " + std::to_string(report.l_repa) + ")" +
                           (snapshot_path_.empty() ? std::string() : "; snapshot written to " + snapshot_path_));
    }
    backward(losses.l_total);

    // Tailor columns no group selected keep their values and moments.
    UpdateMasks masks;
    if (model_.has_gate()) {
        for (auto& p : named_parameters(model_)) {
            if (p.group != ParamGroup::branch_tailor) {
                continue;
            }
            const Tensor& x = *p.tensor;
            std::vector<std::uint8_t> m(x.numel());
            const std::size_t cols = x.ndim() == 1 ? x.numel() : x.cols();
            for (std::size_t e = 0; e < m.size(); ++e) {
                m[e] = active[e % cols];
            }
            masks.emplace(p.name, std::move(m));
        }
    }
    const double lr = lr_.lr_at(step_);
    opt_.step(lr, masks.empty() ? nullptr : &masks);
    opt_.zero_grad();
    if (model_.has_gate()) {
        update_biases(model_.gate);
        metrics_.gate_usage = model_.gate.usage_count;
    }

    StepRecord rec;
    rec.loss = report;
    rec.lr = lr;
    rec.condition_loss.assign(conditions_.size(), kNaN);
    const auto eh = losses.eps_hat.data();
    const auto ev = batch.eps.data();
    for (std::size_t g = 0; g < group_slot.size(); ++g) {
        const std::size_t r0 = batch.group_offsets[g] * n * pd, r1 = batch.group_offsets[g + 1] * n * pd;
        double acc = 0.0;
        for (std::size_t e = r0; e < r1; ++e) {
            acc += (eh[e] - ev[e]) * (eh[e] - ev[e]);
        }
        rec.condition_loss[group_slot[g]] = acc / static_cast<double>(r1 - r0);
    }
    metrics_.steps.push_back(std::move(rec));
    ++step_;
    return report;
}

void Trainer::run_until(std::uint64_t until, const std::function<void(const StepRecord&)>& on_step) {
    until = std::min<std::uint64_t>(until, total_steps());
    auto mark = std::chrono::steady_clock::now();
    while (step_ < until) {
        step();
        if (on_step) {
            on_step(metrics_.steps.back());
        }
        if (step_ % 100 == 0) {
            const auto now = std::chrono::steady_clock::now();
            metrics_.seconds_per_100.push_back(std::chrono::duration<double>(now - mark).count());
            mark = now;
        }
    }
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.config_digest = config_digest(cfg_);
    c.step = step_;
    c.put_text("config", format_config(cfg_));
    auto& m = const_cast<ControlModel&>(model_);
    for (const auto& p : named_parameters(m)) {
        c.put_f64("param/" + p.name, p.tensor->shape(), p.tensor->data());
    }
    c.put_f64("frozen/e_img", model_.repa.e_img.shape(), model_.repa.e_img.data());
    if (model_.has_gate()) {
        c.put_f64("gate/balance_bias", {model_.gate.balance_bias.size()}, model_.gate.balance_bias);
        c.put_u64("gate/usage_count", model_.gate.usage_count);
        c.put_u64("gate/routed", {model_.gate.routed});
    }
    c.put_u64("adam/step", {opt_.step_count()});
    for (const auto& s : opt_.slots()) {
        if (!s.frozen) {
            c.put_f64("adam/m/" + s.name, {s.m.size()}, s.m);
            c.put_f64("adam/v/" + s.name, {s.v.size()}, s.v);
        }
    }
    c.put_u64("schedule/step", {step_});
    const std::size_t cols = 5 + conditions_.size();
    std::vector<double> rows;
    rows.reserve(metrics_.steps.size() * cols);
    for (const auto& r : metrics_.steps) {
        rows.push_back(static_cast<double>(r.loss.step));
        rows.push_back(r.loss.l_diff);
        rows.push_back(r.loss.l_repa);
        rows.push_back(r.loss.l_total);
        rows.push_back(r.lr);
        rows.insert(rows.end(), r.condition_loss.begin(), r.condition_loss.end());
    }
    c.put_f64("metrics/records", {metrics_.steps.size(), cols}, rows);
    std::string ids;
    for (std::size_t i = 0; i < metrics_.condition_ids.size(); ++i) {
        ids += (i ? "," : "") + metrics_.condition_ids[i];
    }
    c.put_text("metrics/conditions", ids);
    return c;
}

void Trainer::resume(const Checkpoint& ckpt, bool force) {
    if (ckpt.config_digest != config_digest(cfg_) && !force) {
        throw ContractError("checkpoint config digest " + hex(ckpt.config_digest) + " differs from the current " +
                            hex(config_digest(cfg_)) + "; pass --force to resume anyway");
    }
    load_model_state(model_, ckpt);
    for (auto& s : opt_.slots()) {
        if (s.frozen) {
            continue;
        }
        const auto& m = ckpt.get("adam/m/" + s.name, BlockKind::f64);
        const auto& v = ckpt.get("adam/v/" + s.name, BlockKind::f64);
        if (m.f64.size() != s.m.size() || v.f64.size() != s.v.size()) {
            throw LoadError("optimizer state for " + s.name + " has the wrong size");
        }
        s.m = m.f64;
        s.v = v.f64;
    }
    opt_.set_step_count(ckpt.get("adam/step", BlockKind::u64).u64.at(0));
    step_ = ckpt.get("schedule/step", BlockKind::u64).u64.at(0);
    const auto& rec = ckpt.get("metrics/records", BlockKind::f64);
    const std::size_t cols = 5 + conditions_.size();
    if (rec.shape.size() != 2 || rec.shape[1] != cols || rec.shape[0] != step_) {
        throw LoadError("metrics/records does not match the run (expected " + std::to_string(step_) + " x " +
                        std::to_string(cols) + ")");
    }
    metrics_.steps.clear();
    for (std::size_t r = 0; r < rec.shape[0]; ++r) {
        const double* row = rec.f64.data() + r * cols;
        StepRecord s;
        s.loss = {row[1], row[2], row[3], static_cast<std::uint64_t>(row[0])};
        s.lr = row[4];
        s.condition_loss.assign(row + 5, row + cols);
        metrics_.steps.push_back(std::move(s));
    }
    if (model_.has_gate()) {
        metrics_.gate_usage = model_.gate.usage_count;
    }
    metrics_.seconds_per_100.clear();
}

RunConfig config_from_checkpoint(const Checkpoint& ckpt) {
    return parse_config(ckpt.get("config", BlockKind::text).text);
}

void load_model_state(ControlModel& model, const Checkpoint& ckpt) {
    for (auto& p : named_parameters(model)) {
        const auto& b = ckpt.get("param/" + p.name, BlockKind::f64);
        if (b.shape != p.tensor->shape()) {
            throw LoadError("block 'param/" + p.name + "' has shape " + shape_str(b.shape) + ", model expects " +
                            shape_str(p.tensor->shape()));
        }
        std::copy(b.f64.begin(), b.f64.end(), p.tensor->mutable_data().begin());
    }
    if (const auto* e = ckpt.find("frozen/e_img")) {
        if (e->shape != model.repa.e_img.shape()) {
            throw LoadError("block 'frozen/e_img' has the wrong shape");
        }
        model.repa.e_img = Tensor::from_data(e->shape, e->f64);
    }
    if (model.has_gate()) {
        const auto& bb = ckpt.get("gate/balance_bias", BlockKind::f64);
        const auto& uc = ckpt.get("gate/usage_count", BlockKind::u64);
        if (bb.f64.size() != model.gate.n_tailor() || uc.u64.size() != model.gate.n_tailor()) {
            throw LoadError("gate state does not match N_T");
        }
        model.gate.balance_bias = bb.f64;
        model.gate.usage_count = uc.u64;
        model.gate.routed = ckpt.get("gate/routed", BlockKind::u64).u64.at(0);
        model.gate.batch_load.assign(model.gate.n_tailor(), 0);
        model.gate.batch_routed = 0;
    }
}

ControlModel model_from_checkpoint(const Checkpoint& ckpt) {
    const RunConfig cfg = config_from_checkpoint(ckpt);
    ControlModel m = make_model(cfg.model, cfg.gate, cfg.train.seed);
    load_model_state(m, ckpt);
    return m;
}

namespace {

TrainResult finish(Trainer& t, std::chrono::steady_clock::time_point start) {
    TrainResult r;
    r.checkpoint = t.checkpoint();
    r.metrics = t.metrics();
    r.trainable_count = t.trainable_count();
    r.model_parameter_count = parameter_count(t.model());
    r.batch_audit = t.batch_audit();
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

}  // namespace

TrainResult train_diversion(const RunConfig& cfg, const ConditionBank& bank) {
    require(cfg.train.mode == TrainMode::diversion, "train_diversion: mode must be diversion");
    const auto start = std::chrono::steady_clock::now();
    Trainer t(cfg, bank);
    t.run();
    return finish(t, start);
}

ZeroShotRouting zero_shot_route(const ControlModel& model, std::uint64_t text_seed, std::string_view instruction) {
    require(model.has_gate(), "zero_shot_route: model has no gate (n_tailor = 0)");
    NoGradGuard ng;
    const auto e = embed_instruction(text_seed, instruction, model.gate.embed_dim());
    const Tensor alpha = route(model.gate, e);
    return {to_vec(alpha), topk_select(alpha, model.gate)};
}

TrainResult adapt_few_shot(const RunConfig& cfg, const Checkpoint& source) {
    const auto start = std::chrono::steady_clock::now();
    RunConfig sized = cfg;
    sized.model = config_from_checkpoint(source).model;
    const ConditionBank bank = adaptation_bank(sized);
    Trainer t(cfg, bank, source);
    t.run();
    return finish(t, start);
}

RunConfig scratch_config(const RunConfig& cfg, std::size_t budget) {
    RunConfig best;
    bool found = false;
    for (std::size_t d = 4; d <= 256; d += 4) {
        RunConfig c = cfg;
        c.train.mode = TrainMode::scratch;
        c.model.token_dim = d;
        c.model.mlp_hidden = 4 * d;
        c.model.repa_hidden = 2 * d;
        c.model.n_learngene = d;
        c.model.n_tailor = 0;
        c.gate.embed_dim = cfg.gate.embed_dim;
        const std::size_t count = parameter_count(make_model(c.model, c.gate, c.train.seed));
        if (count > budget) {
            break;
        }
        best = c;
        found = true;
    }
    require(found, "scratch_config: no model fits in " + std::to_string(budget) + " parameters");
    return best;
}

TrainResult train_scratch(const RunConfig& cfg) {
    require(cfg.train.mode == TrainMode::scratch, "train_scratch: mode must be scratch");
    const auto start = std::chrono::steady_clock::now();
    const ConditionBank bank = adaptation_bank(cfg);
    Trainer t(cfg, bank);
    t.run();
    return finish(t, start);
}

EvalResult evaluate(const ControlModel& model, const RunConfig& cfg, std::span<const std::size_t> conditions,
                    const std::vector<ConditionSpec>& registry, std::size_t n) {
    require(!conditions.empty() && n >= 1, "evaluate: need at least one condition and sample");
    const ConditionBank held(n, derive_seed(cfg.train.seed, Stream::heldout, 0), model.config.image_size, registry);
    EvalResult out;
    out.samples = n;
    const std::uint64_t sample_seed = derive_seed(cfg.train.seed, Stream::sample, 0);
    double total_ssim = 0.0, total_enc = 0.0;
    for (std::size_t k = 0; k < conditions.size(); ++k) {
        const auto& spec = registry.at(conditions[k]);
        std::vector<std::size_t> idx;
        std::vector<Image> xc;
        for (std::size_t i = k; i < n; i += conditions.size()) {
            idx.push_back(i);
            xc.push_back(held.condition_image(i, conditions[k]));
        }
        out.condition_ids.push_back(spec.condition_id);
        if (idx.empty()) {
            out.ssim.push_back(kNaN);
            out.encoder_sim.push_back(kNaN);
            continue;
        }
        GatedCoefficients coeffs;
        if (model.has_gate()) {
            coeffs = zero_shot_route(model, cfg.train.text_encoder_seed, spec.instruction).coeffs;
        }
        const auto gen = sample_batch(model, xc, coeffs, sample_seed, k * n);
        double s = 0.0, e = 0.0;
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const Image& gt = held.images()[idx[j]];
            s += metric_ssim(gen[j], gt);
            e += metric_encoder_sim(model.repa, gen[j], gt, model.config.patch_size);
        }
        total_ssim += s;
        total_enc += e;
        out.ssim.push_back(s / static_cast<double>(idx.size()));
        out.encoder_sim.push_back(e / static_cast<double>(idx.size()));
    }
    out.mean_ssim = total_ssim / static_cast<double>(n);
    out.mean_encoder_sim = total_enc / static_cast<double>(n);
    return out;
}

RunConfig arm_config(const RunConfig& cfg, bool diversion, bool repa) {
    RunConfig c = cfg;
    c.train.mode = TrainMode::diversion;
    if (!diversion) {
        c.model.n_learngene = c.model.rank();
        c.model.n_tailor = 0;
    }
    if (!repa) {
        c.model.lambda = 0.0;
    }
    return c;
}

AblationReport run_ablation(const RunConfig& cfg, const ConditionBank& bank, bool with_eval) {
    AblationReport rep;
    const struct {
        const char* name;
        bool diversion, repa;
    } arms[] = {{"neither", false, false}, {"diversion_only", true, false}, {"both", true, true}};
    for (const auto& a : arms) {
        const RunConfig c = arm_config(cfg, a.diversion, a.repa);
        const TrainResult r = train_diversion(c, bank);
        ArmResult ar;
        ar.name = a.name;
        ar.diversion = a.diversion;
        ar.repa = a.repa;
        ar.final_l_diff = r.metrics.final_l_diff();
        ar.final_cosine = -r.metrics.final_l_repa();
        ar.batch_audit = r.batch_audit;
        if (with_eval) {
            const auto conds = resolve_conditions(bank, c.train.conditions);
            ar.eval = evaluate(model_from_checkpoint(r.checkpoint), c, conds, bank.conditions(),
                               c.train.heldout_samples);
        }
        rep.arms.push_back(std::move(ar));
    }
    rep.audit_consistent = std::all_of(rep.arms.begin(), rep.arms.end(),
                                       [&](const ArmResult& a) { return a.batch_audit == rep.arms[0].batch_audit; });
    return rep;
}

SweepReport sweep_repa(const RunConfig& cfg, const ConditionBank& bank, std::span<const std::size_t> depths,
                       std::span<const double> lambdas) {
    require(!depths.empty() && !lambdas.empty(), "sweep_repa: empty grid");
    SweepReport rep;
    for (std::size_t d : depths) {
        for (double l : lambdas) {
            RunConfig c = cfg;
            c.train.mode = TrainMode::diversion;
            c.model.repa_layer = d;
            c.model.lambda = l;
            const TrainResult r = train_diversion(c, bank);
            rep.cells.push_back({d, l, r.metrics.final_l_diff(), -r.metrics.final_l_repa(), r.seconds});
        }
    }
    for (std::size_t i = 1; i < rep.cells.size(); ++i) {
        if (rep.cells[i].final_l_diff < rep.cells[rep.argmin].final_l_diff) {
            rep.argmin = i;
        }
    }
    return rep;
}

}  // namespace divctl
