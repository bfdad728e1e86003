#include "divctl/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include <openssl/evp.h>

#include "divctl/errors.hpp"

namespace divctl {

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::diversion: return "diversion";
        case TrainMode::adapt_frozen: return "adapt_frozen";
        case TrainMode::scratch: return "scratch";
    }
    return "?";
}

TrainMode parse_train_mode(std::string_view s) {
    if (s == "diversion") return TrainMode::diversion;
    if (s == "adapt_frozen") return TrainMode::adapt_frozen;
    if (s == "scratch") return TrainMode::scratch;
    throw ConfigError("unknown mode '" + std::string(s) + "' (diversion, adapt_frozen, scratch)");
}

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_uint(std::string_view key, std::string_view v) {
    T out{};
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        throw ConfigError("config key '" + std::string(key) + "': expected a non-negative integer, got '" +
                          std::string(v) + "'");
    }
    return out;
}

double parse_real(std::string_view key, std::string_view v) {
    const std::string s(v);
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != s.size() || s.empty() || !std::isfinite(out)) {
        throw ConfigError("config key '" + std::string(key) + "': expected a real number, got '" + s + "'");
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + std::string(key) + "': expected true or false, got '" + std::string(v) + "'");
}

std::string fmt_real(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

struct Entry {
    ConfigKey key;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define DIVCTL_UINT(name, field, doc)                                                                         \
    Entry {                                                                                                     \
        {name, doc}, [](RunConfig& c, std::string_view v) { c.field = parse_uint<decltype(c.field)>(name, v); }, \
            [](const RunConfig& c) { return std::to_string(c.field); }                                          \
    }
#define DIVCTL_REAL(name, field, doc)                                                                  \
    Entry {                                                                                              \
        {name, doc}, [](RunConfig& c, std::string_view v) { c.field = parse_real(name, v); },            \
            [](const RunConfig& c) { return fmt_real(c.field); }                                         \
    }

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = {
        Entry{{"mode", "diversion | adapt_frozen | scratch"},
              [](RunConfig& c, std::string_view v) { c.train.mode = parse_train_mode(v); },
              [](const RunConfig& c) { return to_string(c.train.mode); }},
        DIVCTL_UINT("seed", train.seed, "root seed of every random stream"),
        DIVCTL_UINT("steps", train.steps, "optimizer steps"),
        DIVCTL_UINT("batch_size", train.batch_size, "items per batch"),
        DIVCTL_REAL("lr", train.lr, "base learning rate"),
        Entry{{"lr_milestones", "comma-separated steps where lr is multiplied by lr_factor"},
              [](RunConfig& c, std::string_view v) {
                  c.train.milestones.clear();
                  std::string s(v);
                  std::stringstream ss(s);
                  std::string item;
                  while (std::getline(ss, item, ',')) {
                      const std::string t = trim(item);
                      if (!t.empty()) {
                          c.train.milestones.push_back(parse_uint<std::uint64_t>("lr_milestones", t));
                      }
                  }
              },
              [](const RunConfig& c) {
                  std::string out;
                  for (std::size_t i = 0; i < c.train.milestones.size(); ++i) {
                      out += (i ? "," : "") + std::to_string(c.train.milestones[i]);
                  }
                  return out;
              }},
        DIVCTL_REAL("lr_factor", train.lr_factor, "lr decay factor at each milestone"),
        DIVCTL_REAL("weight_decay", train.weight_decay, "AdamW decoupled weight decay"),
        DIVCTL_REAL("adam_beta1", train.beta1, "AdamW beta1"),
        DIVCTL_REAL("adam_beta2", train.beta2, "AdamW beta2"),
        DIVCTL_REAL("adam_eps", train.adam_eps, "AdamW epsilon"),
        DIVCTL_UINT("n_images", train.n_images, "synthetic base images"),
        Entry{{"conditions", "training conditions: basic or a comma-separated id list"},
              [](RunConfig& c, std::string_view v) {
                  if (trim(v).empty()) throw ConfigError("config key 'conditions': empty list");
                  c.train.conditions = trim(v);
              },
              [](const RunConfig& c) { return c.train.conditions; }},
        DIVCTL_UINT("checkpoint_every", train.checkpoint_every, "steps between checkpoints (0 = only at the end)"),
        DIVCTL_UINT("text_encoder_seed", train.text_encoder_seed, "seed of the frozen instruction encoder"),
        Entry{{"multi_condition", "logits | alpha | coefficients"},
              [](RunConfig& c, std::string_view v) { c.train.multi_condition = parse_multi_condition_mode(v); },
              [](const RunConfig& c) { return to_string(c.train.multi_condition); }},
        Entry{{"adapt_condition", "condition id learned by adapt"},
              [](RunConfig& c, std::string_view v) { c.train.adapt_condition = trim(v); },
              [](const RunConfig& c) { return c.train.adapt_condition; }},
        DIVCTL_UINT("adapt_images", train.adapt_images, "base images available to adapt"),
        DIVCTL_UINT("adapt_steps", train.adapt_steps, "adaptation steps"),
        DIVCTL_UINT("heldout_samples", train.heldout_samples, "evaluation samples"),
        DIVCTL_UINT("image_size", model.image_size, "image side in pixels"),
        DIVCTL_UINT("patch_size", model.patch_size, "patch side in pixels"),
        DIVCTL_UINT("token_dim", model.token_dim, "token width d'"),
        DIVCTL_UINT("layers", model.layers, "denoiser blocks"),
        DIVCTL_UINT("controlnet_layers", model.controlnet_layers, "condition branch blocks"),
        DIVCTL_UINT("heads", model.heads, "attention heads"),
        DIVCTL_UINT("mlp_hidden", model.mlp_hidden, "MLP hidden width"),
        DIVCTL_UINT("timesteps", model.timesteps, "diffusion steps T"),
        DIVCTL_REAL("beta_start", model.beta_start, "first beta of the linear schedule"),
        DIVCTL_REAL("beta_end", model.beta_end, "last beta of the linear schedule"),
        DIVCTL_UINT("repa_layer", model.repa_layer, "branch block aligned by REPA (1-based)"),
        DIVCTL_REAL("lambda", model.lambda, "REPA loss weight"),
        DIVCTL_UINT("repa_hidden", model.repa_hidden, "alignment MLP hidden width"),
        DIVCTL_UINT("repa_dim", model.repa_dim, "frozen image encoder width"),
        DIVCTL_REAL("dropout", model.dropout, "dropout on MLP activations"),
        Entry{{"zero_pos_embed", "drop positional embeddings"},
              [](RunConfig& c, std::string_view v) { c.model.zero_pos_embed = parse_bool("zero_pos_embed", v); },
              [](const RunConfig& c) { return std::string(c.model.zero_pos_embed ? "true" : "false"); }},
        DIVCTL_UINT("n_learngene", model.n_learngene, "learngene components N_G per projection"),
        DIVCTL_UINT("n_tailor", model.n_tailor, "tailor components N_T per projection (0 disables the gate)"),
        DIVCTL_UINT("top_k", gate.top_k, "active tailors K"),
        DIVCTL_REAL("gate_gamma", gate.gamma, "balance bias update rate"),
        DIVCTL_UINT("gate_embed_dim", gate.embed_dim, "instruction embedding width"),
    };
    return table;
}

#undef DIVCTL_UINT
#undef DIVCTL_REAL

const Entry& entry(std::string_view key) {
    for (const auto& e : entries()) {
        if (e.key.name == key) {
            return e;
        }
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    if (train.batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (train.n_images == 0) throw ConfigError("n_images must be >= 1");
    if (!(train.lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(train.lr_factor > 0.0)) throw ConfigError("lr_factor must be > 0");
    if (!(train.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(train.beta1 >= 0.0 && train.beta1 < 1.0 && train.beta2 >= 0.0 && train.beta2 < 1.0)) {
        throw ConfigError("adam betas must lie in [0, 1)");
    }
    if (model.n_tailor > 0 && (gate.top_k == 0 || gate.top_k > model.n_tailor)) {
        throw ConfigError("top_k must lie in [1, n_tailor]");
    }
    if (gate.embed_dim == 0) throw ConfigError("gate_embed_dim must be >= 1");
    if (!(gate.gamma >= 0.0)) throw ConfigError("gate_gamma must be >= 0");
    if (train.heldout_samples == 0) throw ConfigError("heldout_samples must be >= 1");
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        for (const auto& e : entries()) {
            k.push_back(e.key);
        }
        return k;
    }();
    return keys;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
    entry(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) {
    return entry(key).get(cfg);
}

RunConfig parse_config(std::string_view text, RunConfig base) {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        const std::string t = trim(line);
        if (t.empty()) {
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        try {
            set_config_value(base, trim(std::string_view(t).substr(0, eq)), std::string_view(t).substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return base;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw NotFoundError("cannot open config file '" + path + "'");
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string format_config(const RunConfig& cfg, bool with_docs) {
    std::string out;
    for (const auto& e : entries()) {
        if (with_docs) {
            out += "# " + e.key.doc + "\n";
        }
        out += e.key.name + " = " + e.get(cfg) + "\n";
    }
    return out;
}

std::array<std::uint8_t, 32> config_digest(const RunConfig& cfg) {
    const std::string text = format_config(cfg);
    std::array<std::uint8_t, 32> out{};
    unsigned int len = 0;
    EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(), nullptr);
    return out;
}

std::string hex(std::span<const std::uint8_t> bytes) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (auto b : bytes) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 15]);
    }
    return out;
}

}  // namespace divctl
