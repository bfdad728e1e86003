#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "divctl/diffusion.hpp"
#include "divctl/gate.hpp"

namespace divctl {

enum class TrainMode { diversion, adapt_frozen, scratch };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view s);

struct TrainConfig {
    TrainMode mode = TrainMode::diversion;
    std::uint64_t seed = 0;
    std::size_t steps = 5000;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    std::vector<std::uint64_t> milestones{3500};
    double lr_factor = 0.4;
    double weight_decay = 3e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t n_images = 2048;
    // Comma-separated condition ids, or "basic".
    std::string conditions = "basic";
    std::size_t checkpoint_every = 1000;
    std::uint64_t text_encoder_seed = 0;
    MultiConditionMode multi_condition = MultiConditionMode::logits;
    // Few-shot adaptation
    std::string adapt_condition = "shuffled_tiles";
    std::size_t adapt_images = 200;
    std::size_t adapt_steps = 500;
    // Evaluation
    std::size_t heldout_samples = 128;
};

struct RunConfig {
    DenoiserConfig model;
    GateConfig gate;
    TrainConfig train;

    // Throws ConfigError when values are inconsistent.
    void validate() const;
};

struct ConfigKey {
    std::string name;
    std::string doc;
};

const std::vector<ConfigKey>& config_keys();

// Sets one key from its text form. Throws ConfigError on unknown keys or bad values.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

// `key = value` lines, `#` starts a comment. Later lines override earlier ones.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config_file(const std::string& path, RunConfig base = {});

// Every key in registry order, one `key = value` line each.
std::string format_config(const RunConfig& cfg, bool with_docs = false);
// SHA-256 of format_config(cfg).
std::array<std::uint8_t, 32> config_digest(const RunConfig& cfg);
std::string hex(std::span<const std::uint8_t> bytes);

}  // namespace divctl
