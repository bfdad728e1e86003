// divctl: command-line front end for training, adaptation, sampling and analysis.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "divctl/checkpoint.hpp"
#include "divctl/conditions.hpp"
#include "divctl/config.hpp"
#include "divctl/errors.hpp"
#include "divctl/gradcheck.hpp"
#include "divctl/run_io.hpp"
#include "divctl/training.hpp"

namespace fs = std::filesystem;
using namespace divctl;

namespace {

constexpr int kExitContract = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitUsage = 64;

struct Globals {
    std::optional<std::uint64_t> seed;
    std::string config_path;
    std::string out_dir = "run";
    std::vector<std::string> overrides;
    bool print_config = false;
};

RunConfig resolve_config(const Globals& g, RunConfig base = {}) {
    RunConfig cfg = g.config_path.empty() ? base : load_config_file(g.config_path, base);
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (g.seed) {
        cfg.train.seed = *g.seed;
    }
    cfg.validate();
    return cfg;
}

std::string out_path(const Globals& g, const std::string& name) {
    return (fs::path(g.out_dir) / name).string();
}

void prepare_out_dir(const Globals& g, const RunConfig& cfg) {
    fs::create_directories(g.out_dir);
    write_text_atomic(out_path(g, kResolvedConfigFile), format_config(cfg, true));
}

std::vector<double> split_reals(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        RunConfig scratch;
        set_config_value(scratch, "lambda", item);
        out.push_back(scratch.model.lambda);
    }
    return out;
}

std::vector<std::size_t> split_sizes(const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        RunConfig scratch;
        set_config_value(scratch, "repa_layer", item);
        out.push_back(scratch.model.repa_layer);
    }
    return out;
}

void write_run_files(const Globals& g, const Trainer& t) {
    const Checkpoint c = t.checkpoint();
    save_checkpoint(out_path(g, kCheckpointFile), c);
    write_text_atomic(out_path(g, kMetricsFile), metrics_csv(t.metrics()));
    write_text_atomic(out_path(g, kSummaryFile), summary_json(t.metrics(), c.step, hex(c.config_digest)));
}

void drive(const Globals& g, Trainer& t, bool resume, bool force, std::optional<std::uint64_t> stop_at) {
    t.set_snapshot_path(out_path(g, "nan-snapshot.divc"));
    if (resume) {
        t.resume(load_checkpoint(out_path(g, kCheckpointFile)), force);
        std::printf("resumed at step %llu\n", static_cast<unsigned long long>(t.steps_done()));
    }
    const std::uint64_t until = std::min<std::uint64_t>(stop_at.value_or(t.total_steps()), t.total_steps());
    const std::size_t every = t.config().train.checkpoint_every;
    while (t.steps_done() < until) {
        std::uint64_t next = until;
        if (every > 0) {
            next = std::min<std::uint64_t>(until, (t.steps_done() / every + 1) * every);
        }
        t.run_until(next);
        const auto& last = t.metrics().steps.back().loss;
        std::printf("step %llu  l_diff %.6f  l_repa %.6f  l_total %.6f\n",
                    static_cast<unsigned long long>(t.steps_done()), last.l_diff, last.l_repa, last.l_total);
        std::fflush(stdout);
        write_run_files(g, t);
    }
    write_run_files(g, t);
    std::printf("trainable parameters %zu of %zu\n", t.trainable_count(), parameter_count(t.model()));
}

int cmd_train(const Globals& g, bool resume, bool force, std::optional<std::uint64_t> stop_at) {
    const RunConfig cfg = resolve_config(g);
    if (g.print_config) {
        std::cout << format_config(cfg, true);
        return 0;
    }
    if (cfg.train.mode == TrainMode::adapt_frozen) {
        throw ContractError("mode = adapt_frozen runs through the adapt subcommand");
    }
    prepare_out_dir(g, cfg);
    RunLock lock(g.out_dir);
    const ConditionBank bank = cfg.train.mode == TrainMode::scratch
                                   ? adaptation_bank(cfg)
                                   : ConditionBank(cfg.train.n_images, cfg.train.seed, cfg.model.image_size);
    Trainer t(cfg, bank);
    drive(g, t, resume, force, stop_at);
    return 0;
}

int cmd_adapt(const Globals& g, const std::string& source, bool resume, bool force,
              std::optional<std::uint64_t> stop_at) {
    RunConfig base;
    base.train.mode = TrainMode::adapt_frozen;
    const RunConfig cfg = resolve_config(g, base);
    if (g.print_config) {
        std::cout << format_config(cfg, true);
        return 0;
    }
    const Checkpoint src = load_checkpoint(source);
    prepare_out_dir(g, cfg);
    RunLock lock(g.out_dir);
    RunConfig sized = cfg;
    sized.model = config_from_checkpoint(src).model;
    const ConditionBank bank = adaptation_bank(sized);
    Trainer t(cfg, bank, src);
    write_text_atomic(out_path(g, kResolvedConfigFile), format_config(t.config(), true));
    drive(g, t, resume, force, stop_at);
    return 0;
}

std::vector<std::size_t> indices(const std::vector<ConditionSpec>& reg, const std::string& spec) {
    const ConditionBank probe(1, 0, 16, reg);
    return resolve_conditions(probe, spec);
}

int cmd_generate(const Globals& g, const std::string& ckpt_path, const std::string& conditions,
                 const std::string& instruction, std::size_t n) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    RunConfig cfg = config_from_checkpoint(ckpt);
    if (g.seed) {
        cfg.train.seed = *g.seed;
    }
    const ControlModel m = model_from_checkpoint(ckpt);
    const auto& reg = default_registry();
    const auto conds = indices(reg, conditions);
    const ConditionBank held(n, derive_seed(cfg.train.seed, Stream::heldout, 0), m.config.image_size);

    GatedCoefficients coeffs;
    if (m.has_gate()) {
        if (!instruction.empty()) {
            coeffs = zero_shot_route(m, cfg.train.text_encoder_seed, instruction).coeffs;
        } else {
            std::vector<InstructionEmbedding> emb;
            for (std::size_t k : conds) {
                emb.push_back(embed_instruction(cfg.train.text_encoder_seed, reg[k].instruction,
                                                m.gate.embed_dim(), reg[k].condition_id));
            }
            coeffs = compose_multi_condition(m.gate, emb, cfg.train.multi_condition);
        }
    }
    // Multiple conditions share one routing; the first one supplies x_cond.
    std::vector<Image> xc;
    for (std::size_t i = 0; i < n; ++i) {
        xc.push_back(held.condition_image(i, conds[0]));
    }
    fs::create_directories(g.out_dir);
    const auto gen = sample_batch(m, xc, coeffs, derive_seed(cfg.train.seed, Stream::sample, 1));
    std::vector<Image> grid;
    for (std::size_t i = 0; i < n; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "sample_%03zu.pgm", i);
        write_pgm(out_path(g, name), gen[i]);
        grid.push_back(xc[i]);
    }
    grid.insert(grid.end(), gen.begin(), gen.end());
    write_ppm_grid(out_path(g, "samples.ppm"), grid, n);
    std::printf("wrote %zu samples to %s\n", n, g.out_dir.c_str());
    return 0;
}

int cmd_eval(const Globals& g, const std::string& ckpt_path, const std::string& conditions, std::size_t n) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    RunConfig cfg = config_from_checkpoint(ckpt);
    if (g.seed) {
        cfg.train.seed = *g.seed;
    }
    const ControlModel m = model_from_checkpoint(ckpt);
    const auto& reg = default_registry();
    const auto conds = indices(reg, conditions);
    const EvalResult r = evaluate(m, cfg, conds, reg, n == 0 ? cfg.train.heldout_samples : n);
    nlohmann::ordered_json j;
    j["samples"] = r.samples;
    j["mean_ssim"] = r.mean_ssim;
    j["mean_encoder_sim"] = r.mean_encoder_sim;
    for (std::size_t k = 0; k < r.condition_ids.size(); ++k) {
        j["per_condition"][r.condition_ids[k]] = {{"ssim", r.ssim[k]}, {"encoder_sim", r.encoder_sim[k]}};
        std::printf("%-18s ssim %.4f  encoder_sim %.4f\n", r.condition_ids[k].c_str(), r.ssim[k], r.encoder_sim[k]);
    }
    std::printf("mean               ssim %.4f  encoder_sim %.4f\n", r.mean_ssim, r.mean_encoder_sim);
    fs::create_directories(g.out_dir);
    write_text_atomic(out_path(g, "eval.json"), j.dump(2) + "\n");
    return 0;
}

int cmd_inspect_gate(const Globals& g, const std::string& ckpt_path, const std::string& conditions) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const RunConfig cfg = config_from_checkpoint(ckpt);
    const ControlModel m = model_from_checkpoint(ckpt);
    require(m.has_gate(), "inspect-gate: checkpoint has no gate (n_tailor = 0)");
    const auto& reg = default_registry();
    std::vector<InstructionEmbedding> emb;
    for (std::size_t k : indices(reg, conditions)) {
        emb.push_back(embed_instruction(cfg.train.text_encoder_seed, reg[k].instruction, m.gate.embed_dim(),
                                        reg[k].condition_id));
    }
    const auto sim = similarity_matrix(m.gate, emb);
    char buf[40];
    std::string csv = "condition";
    for (const auto& e : emb) {
        csv += "," + e.condition_id;
    }
    csv += "\n";
    for (std::size_t i = 0; i < emb.size(); ++i) {
        csv += emb[i].condition_id;
        for (double v : sim[i]) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            csv += buf;
        }
        csv += "\n";
    }
    fs::create_directories(g.out_dir);
    write_text_atomic(out_path(g, "similarity.csv"), csv);
    std::cout << csv;
    return 0;
}

int cmd_gradcheck(std::size_t seeds) {
    bool ok = true;
    auto checks = registered_op_checks();
    checks.push_back(end_to_end_loss_check());
    for (const auto& c : checks) {
        double worst = 0.0;
        for (std::uint64_t s = 0; s < seeds; ++s) {
            auto [f, leaves] = c.build(s);
            worst = std::max(worst, finite_diff_check(f, leaves).max_rel_error);
        }
        const bool pass = worst <= 1e-5;
        ok = ok && pass;
        std::printf("%-4s %-20s max rel err %.3e\n", pass ? "ok" : "FAIL", c.name.c_str(), worst);
    }
    return ok ? 0 : kExitNumeric;
}

int cmd_dump_dataset(const Globals& g, std::size_t n, const std::string& conditions) {
    const RunConfig cfg = resolve_config(g);
    const ConditionBank bank(n, cfg.train.seed, cfg.model.image_size);
    const auto conds = resolve_conditions(bank, conditions);
    fs::create_directories(g.out_dir);
    std::vector<Image> grid(bank.images().begin(), bank.images().end());
    std::string csv = "image,coverage\n";
    for (std::size_t i = 0; i < n; ++i) {
        csv += std::to_string(i) + "," + std::to_string(shape_coverage(cfg.train.seed, i, cfg.model.image_size)) + "\n";
    }
    for (std::size_t k : conds) {
        for (std::size_t i = 0; i < n; ++i) {
            grid.push_back(bank.condition_image(i, k));
        }
    }
    write_ppm_grid(out_path(g, "dataset.ppm"), grid, n);
    write_text_atomic(out_path(g, "dataset.csv"), csv);
    std::printf("rows: base images, then");
    for (std::size_t k : conds) {
        std::printf(" %s", bank.conditions()[k].condition_id.c_str());
    }
    std::printf("\n");
    return 0;
}

int cmd_sweep(const Globals& g, const std::string& depths, const std::string& lambdas) {
    const RunConfig cfg = resolve_config(g);
    prepare_out_dir(g, cfg);
    RunLock lock(g.out_dir);
    const ConditionBank bank(cfg.train.n_images, cfg.train.seed, cfg.model.image_size);
    const auto d = split_sizes(depths);
    const auto l = split_reals(lambdas);
    const SweepReport r = sweep_repa(cfg, bank, d, l);
    std::string csv = "repa_layer,lambda,final_l_diff,final_cosine,seconds,argmin\n";
    char buf[160];
    for (std::size_t i = 0; i < r.cells.size(); ++i) {
        const auto& c = r.cells[i];
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.3f,%d\n", c.depth, c.lambda, c.final_l_diff,
                      c.final_cosine, c.seconds, i == r.argmin ? 1 : 0);
        csv += buf;
    }
    write_text_atomic(out_path(g, "sweep.csv"), csv);
    std::cout << csv;
    return 0;
}

int cmd_ablate(const Globals& g, bool with_eval) {
    const RunConfig cfg = resolve_config(g);
    prepare_out_dir(g, cfg);
    RunLock lock(g.out_dir);
    const ConditionBank bank(cfg.train.n_images, cfg.train.seed, cfg.model.image_size);
    const AblationReport r = run_ablation(cfg, bank, with_eval);
    nlohmann::ordered_json j;
    j["audit_consistent"] = r.audit_consistent;
    for (const auto& a : r.arms) {
        nlohmann::ordered_json arm = {{"diversion", a.diversion},
                                      {"repa", a.repa},
                                      {"final_l_diff", a.final_l_diff},
                                      {"final_cosine", a.final_cosine},
                                      {"batch_audit", a.batch_audit}};
        if (a.eval) {
            arm["mean_ssim"] = a.eval->mean_ssim;
            arm["mean_encoder_sim"] = a.eval->mean_encoder_sim;
        }
        j["arms"][a.name] = arm;
        std::printf("%-15s final l_diff %.6f  cosine %.4f", a.name.c_str(), a.final_l_diff, a.final_cosine);
        if (a.eval) {
            std::printf("  ssim %.4f  encoder_sim %.4f", a.eval->mean_ssim, a.eval->mean_encoder_sim);
        }
        std::printf("\n");
    }
    write_text_atomic(out_path(g, "ablation.json"), j.dump(2) + "\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"divctl: knowledge-diversion condition branches for a toy diffusion model"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "root seed (overrides the config)");
    app.add_option("--config", g.config_path, "config file of key = value lines");
    app.add_option("--out-dir", g.out_dir, "directory for every file the command writes")->capture_default_str();
    app.add_option("--set", g.overrides, "override one config key (key=value), repeatable");

    bool resume = false, force = false, with_eval = true;
    std::optional<std::uint64_t> stop_at;
    std::string ckpt, conditions = "basic", instruction, depths = "1,2,3,4", lambdas = "0.005,0.05,0.5";
    std::size_t n = 8, seeds = 2;

    auto* train = app.add_subcommand("train", "knowledge-diversion (or scratch) training");
    train->add_flag("--print-config", g.print_config, "print the resolved config and exit");
    train->add_flag("--resume", resume, "continue from <out-dir>/checkpoint.divc");
    train->add_flag("--force", force, "resume despite a config digest mismatch");
    train->add_option("--stop-at", stop_at, "stop after this many steps (resume later)");

    auto* adapt = app.add_subcommand("adapt", "few-shot adaptation with frozen learngenes");
    adapt->add_option("--ckpt", ckpt, "source checkpoint")->required();
    adapt->add_flag("--print-config", g.print_config, "print the resolved config and exit");
    adapt->add_flag("--resume", resume, "continue from <out-dir>/checkpoint.divc");
    adapt->add_flag("--force", force, "resume despite a config digest mismatch");
    adapt->add_option("--stop-at", stop_at, "stop after this many steps");

    auto* generate = app.add_subcommand("generate", "sample images for a condition");
    generate->add_option("--ckpt", ckpt, "checkpoint")->required();
    generate->add_option("--conditions", conditions, "condition id(s); several ids compose their routings")
        ->capture_default_str();
    generate->add_option("--instruction", instruction, "route with this text instead (zero-shot)");
    generate->add_option("--n", n, "number of samples")->capture_default_str();

    auto* eval = app.add_subcommand("eval", "SSIM and encoder similarity on held-out samples");
    eval->add_option("--ckpt", ckpt, "checkpoint")->required();
    eval->add_option("--conditions", conditions, "basic, all, or an id list")->capture_default_str();
    std::size_t eval_n = 0;
    eval->add_option("--samples", eval_n, "held-out samples (default: heldout_samples)");

    auto* inspect = app.add_subcommand("inspect-gate", "pairwise similarity of gate routings");
    inspect->add_option("--ckpt", ckpt, "checkpoint")->required();
    inspect->add_option("--conditions", conditions, "basic, all, or an id list")->capture_default_str();

    auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    grad->add_option("--seeds", seeds, "random probes per op")->capture_default_str();

    auto* dump = app.add_subcommand("dump-dataset", "write synthetic images and their conditions");
    dump->add_option("--n", n, "images")->capture_default_str();
    dump->add_option("--conditions", conditions, "basic, all, or an id list")->capture_default_str();

    auto* sweep = app.add_subcommand("sweep-repa", "grid over REPA depth and weight");
    sweep->add_option("--depths", depths, "comma-separated branch blocks")->capture_default_str();
    sweep->add_option("--lambdas", lambdas, "comma-separated weights")->capture_default_str();

    auto* ablate = app.add_subcommand("ablate", "neither / diversion only / both arms");
    ablate->add_flag("!--no-eval", with_eval, "skip held-out sampling");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kExitUsage;
    }

    try {
        if (*train) return cmd_train(g, resume, force, stop_at);
        if (*adapt) return cmd_adapt(g, ckpt, resume, force, stop_at);
        if (*generate) return cmd_generate(g, ckpt, conditions, instruction, n);
        if (*eval) return cmd_eval(g, ckpt, conditions, eval_n);
        if (*inspect) return cmd_inspect_gate(g, ckpt, conditions);
        if (*grad) return cmd_gradcheck(seeds);
        if (*dump) return cmd_dump_dataset(g, n, conditions);
        if (*sweep) return cmd_sweep(g, depths, lambdas);
        if (*ablate) return cmd_ablate(g, with_eval);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitContract;
    } catch (const LoadError& e) {
        std::cerr << "load error: " << e.what() << "\n";
        return kExitContract;
    } catch (const NotFoundError& e) {
        std::cerr << "not found: " << e.what() << "\n";
        return kExitContract;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "filesystem error: " << e.what() << "\n";
        return kExitContract;
    }
    return kExitUsage;
}
