#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "divctl/checkpoint.hpp"
#include "divctl/conditions.hpp"
#include "divctl/config.hpp"
#include "divctl/diffusion.hpp"
#include "divctl/gate.hpp"
#include "divctl/optim.hpp"

namespace divctl {

struct StepRecord {
    LossReport loss;
    double lr = 0.0;
    // Mean l_diff of the batch items of each run condition; NaN when absent.
    std::vector<double> condition_loss;
};

struct RunMetrics {
    std::vector<std::string> condition_ids;
    std::vector<StepRecord> steps;
    std::vector<double> seconds_per_100;  // wall clock, not checkpointed
    std::vector<std::uint64_t> gate_usage;

    // Mean l_diff over records [begin, end) clamped to what exists.
    double mean_l_diff(std::size_t begin, std::size_t end) const;
    double mean_l_repa(std::size_t begin, std::size_t end) const;
    // Mean over the last `window` records.
    double final_l_diff(std::size_t window = 100) const;
    double final_l_repa(std::size_t window = 100) const;
};

// Conditions a run trains on, as indices into bank.conditions().
std::vector<std::size_t> resolve_conditions(const ConditionBank& bank, const std::string& spec);

std::vector<InstructionEmbedding> embed_conditions(const ConditionBank& bank, std::span<const std::size_t> conditions,
                                                   std::uint64_t text_seed, std::size_t dim);

// Base images of the few-shot adaptation set; shared by adapt and scratch runs.
ConditionBank adaptation_bank(const RunConfig& cfg);

class Trainer {
public:
    // mode = diversion or scratch. `bank` must outlive the trainer.
    Trainer(RunConfig cfg, const ConditionBank& bank);
    // mode = adapt_frozen: the model comes from `source`; tailors and the gate
    // output layer are re-drawn, everything else is frozen.
    Trainer(RunConfig cfg, const ConditionBank& bank, const Checkpoint& source);
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    // One optimizer step. Throws NumericError (after writing a snapshot when a
    // snapshot path is set) if the loss is not finite.
    LossReport step();
    // Runs until `until` steps have completed (capped at config steps).
    void run_until(std::uint64_t until, const std::function<void(const StepRecord&)>& on_step = {});
    void run(const std::function<void(const StepRecord&)>& on_step = {}) { run_until(total_steps(), on_step); }
    // steps for diversion, adapt_steps for adapt_frozen and scratch.
    std::size_t total_steps() const;

    Checkpoint checkpoint() const;
    // Restores parameters, optimizer state, gate balancing state, metrics and the
    // step counter. A config digest mismatch throws ContractError unless `force`.
    void resume(const Checkpoint& ckpt, bool force = false);

    std::uint64_t steps_done() const { return step_; }
    const RunConfig& config() const { return cfg_; }
    ControlModel& model() { return model_; }
    const ControlModel& model() const { return model_; }
    const RunMetrics& metrics() const { return metrics_; }
    RunMetrics& metrics() { return metrics_; }
    const AdamW& optimizer() const { return opt_; }
    const std::vector<std::size_t>& conditions() const { return conditions_; }
    const std::vector<InstructionEmbedding>& embeddings() const { return embeddings_; }
    std::size_t trainable_count() const { return opt_.trainable_count(); }
    // Fingerprint of every batch drawn so far (items, timesteps, noise).
    std::uint64_t batch_audit() const { return audit_; }
    void set_snapshot_path(std::string path) { snapshot_path_ = std::move(path); }

private:
    void setup_optimizer(bool adapt);
    void precompute_condition_images();

    RunConfig cfg_;
    const ConditionBank* bank_;
    ControlModel model_;
    NoiseSchedule schedule_;
    std::vector<std::size_t> conditions_;
    std::vector<InstructionEmbedding> embeddings_;
    DatasetIter data_;
    AdamW opt_;
    LrSchedule lr_;
    std::vector<std::string> tailor_params_;
    // cond_patches_[k][i]: condition k of image i, patchified.
    std::vector<std::vector<std::vector<double>>> cond_patches_;
    std::vector<std::vector<double>> image_patches_;
    RunMetrics metrics_;
    std::uint64_t step_ = 0;
    std::uint64_t audit_ = 0xcbf29ce484222325ULL;
    std::string snapshot_path_;
};

// Model and configuration stored in a checkpoint (parameters and gate state).
RunConfig config_from_checkpoint(const Checkpoint& ckpt);
ControlModel model_from_checkpoint(const Checkpoint& ckpt);
void load_model_state(ControlModel& model, const Checkpoint& ckpt);

struct TrainResult {
    Checkpoint checkpoint;
    RunMetrics metrics;
    std::size_t trainable_count = 0;
    std::size_t model_parameter_count = 0;
    std::uint64_t batch_audit = 0;
    double seconds = 0.0;
};

TrainResult train_diversion(const RunConfig& cfg, const ConditionBank& bank);

// alpha and top-K routing for an arbitrary instruction; no parameter changes.
struct ZeroShotRouting {
    std::vector<double> alpha;
    GatedCoefficients coeffs;
};
ZeroShotRouting zero_shot_route(const ControlModel& model, std::uint64_t text_seed, std::string_view instruction);

TrainResult adapt_few_shot(const RunConfig& cfg, const Checkpoint& source);

// Configuration of a fully trainable N_T = 0 model whose parameter count is the
// largest not above `budget`, trained on the adaptation set.
RunConfig scratch_config(const RunConfig& cfg, std::size_t budget);
TrainResult train_scratch(const RunConfig& cfg);

struct EvalResult {
    std::vector<std::string> condition_ids;
    std::vector<double> ssim;         // per condition
    std::vector<double> encoder_sim;  // per condition
    double mean_ssim = 0.0;
    double mean_encoder_sim = 0.0;
    std::size_t samples = 0;
};

// Samples `n` held-out images (condition i % C for sample i) and compares each
// to its ground-truth base image.
EvalResult evaluate(const ControlModel& model, const RunConfig& cfg, std::span<const std::size_t> conditions,
                    const std::vector<ConditionSpec>& registry, std::size_t n);

struct ArmResult {
    std::string name;
    bool diversion = false;
    bool repa = false;
    double final_l_diff = 0.0;
    double final_cosine = 0.0;
    std::uint64_t batch_audit = 0;
    std::optional<EvalResult> eval;
};

struct AblationReport {
    std::vector<ArmResult> arms;  // neither, diversion_only, both
    bool audit_consistent = false;
};

RunConfig arm_config(const RunConfig& cfg, bool diversion, bool repa);
AblationReport run_ablation(const RunConfig& cfg, const ConditionBank& bank, bool with_eval = true);

struct SweepCell {
    std::size_t depth = 0;
    double lambda = 0.0;
    double final_l_diff = 0.0;
    double final_cosine = 0.0;
    double seconds = 0.0;
};

struct SweepReport {
    std::vector<SweepCell> cells;
    std::size_t argmin = 0;  // cell with the lowest final l_diff
};

SweepReport sweep_repa(const RunConfig& cfg, const ConditionBank& bank, std::span<const std::size_t> depths,
                       std::span<const double> lambdas);

}  // namespace divctl
