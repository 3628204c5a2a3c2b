// Command-line front end: zoo training, FL runs, trade-off sweeps,
// reconstruction, convergence, and the ablation studies. All outputs are
// plain files under --out; exit code 0 on success, 1 on configuration
// errors, 2 on runtime failures.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "recup/attacks.hpp"
#include "recup/config.hpp"
#include "recup/harness.hpp"

namespace fs = std::filesystem;
using namespace recup;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::int64_t seed_override = -1;
    bool timing = false;
};

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg = load_experiment_config(args.config_path);
    if (args.seed_override >= 0) cfg.seeds = {static_cast<std::uint64_t>(args.seed_override)};
    if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
    if (args.timing) cfg.timing = true;
    return cfg;
}

fs::path ensure_out_dir(const ExperimentConfig& cfg) {
    fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    return dir;
}

std::string sanitize(const std::string& s) {
    std::string out = s;
    for (char& c : out)
        if (c == ':' || c == '/' || c == ' ') c = '_';
    return out;
}

void write_file(const fs::path& path, const std::string& contents) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw config_error("cannot write '" + path.string() + "'");
    out << contents;
}

void write_sweep_outputs(const ExperimentConfig& cfg, const SweepResult& result, const fs::path& dir,
                         const std::string& stem) {
    std::ostringstream csv;
    write_tradeoff_csv(result.points, csv);
    write_file(dir / (stem + ".csv"), csv.str());

    if (!result.errors.empty()) {
        std::ostringstream log;
        for (const auto& e : result.errors) log << e << "\n";
        write_file(dir / "errors.log", log.str());
        std::cerr << result.errors.size() << " sweep cell(s) failed; see errors.log\n";
    }

    for (int round : cfg.attack.eval_rounds) {
        for (const auto& attr : cfg.attack.attributes()) {
            for (AdversaryKind kind : cfg.attack.adversaries) {
                std::string adversary = to_string(kind) + ":" + attr;
                bool any = false;
                for (const auto& p : result.points)
                    if (p.round == round && p.adversary == adversary && p.error.empty()) any = true;
                if (!any) continue;
                std::ostringstream svg;
                emit_plot(result.points, round, adversary, svg);
                write_file(dir / (stem + "_r" + std::to_string(round) + "_" + sanitize(adversary) + ".svg"),
                           svg.str());
            }
        }
    }
}

int cmd_train_zoo(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_out_dir(cfg);
    SeedContext ctx = build_seed_context(cfg, cfg.seeds.front(), true);
    for (const auto& [attr, zoo] : ctx.zoos) {
        fs::path path = dir / (sanitize(attr) + ".zoo.json");
        write_file(path, serialize_zoo(zoo));
        double worst = 1.0;
        for (const auto& m : zoo.members) worst = std::min(worst, m.train_accuracy);
        std::cout << "zoo '" << attr << "': " << zoo.members.size() << " members, feature dim " << zoo.feature_dim
                  << ", min train accuracy " << worst << " -> " << path.string() << "\n";
    }
    return 0;
}

int cmd_run_fl(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_out_dir(cfg);
    bool needs_zoo = kind_needs_zoo(cfg.defense.kind);
    double param = cfg.defense.param_values().front();

    std::vector<ConvergencePoint> points;
    GlobalModelState final_state;
    for (std::uint64_t seed : cfg.seeds) {
        SeedContext ctx = build_seed_context(cfg, seed, needs_zoo, /*with_adversaries=*/false);
        DefenseFn defense = make_defense(cfg, ctx, cfg.defense.kind, param);
        std::string tag = "seed" + std::to_string(seed);
        RoundStartObserver checkpoint_writer = nullptr;
        if (cfg.checkpoints)
            checkpoint_writer = [&](int round, const GlobalModelState& st) {
                // State entering `round`, i.e. the result of round-1 rounds.
                write_file(dir / ("checkpoint_" + tag + "_r" + std::to_string(round - 1) + ".json"),
                           serialize_model(st.spec, st.weights));
            };
        RunResult result = run_rounds(ctx.train, ctx.parts, ctx.test, ctx.model_spec, ctx.fl, defense, nullptr,
                                      checkpoint_writer);
        for (const auto& [round, loss_value] : result.state.eval_history) {
            ConvergencePoint p;
            p.round = round;
            p.loss = loss_value;
            p.defense = to_string(cfg.defense.kind);
            p.param = param;
            p.participation = cfg.fl.participation;
            p.seed = seed;
            points.push_back(p);
        }
        write_file(dir / ("model_" + tag + ".json"), serialize_model(ctx.model_spec, result.state.weights));
        final_state = std::move(result.state);
    }
    std::ostringstream csv;
    write_convergence_csv(points, csv);
    write_file(dir / "run.csv", csv.str());
    std::cout << "final test loss " << final_state.eval_history.back().second << " after " << cfg.fl.rounds
              << " rounds -> " << (dir / "run.csv").string() << "\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_out_dir(cfg);
    SweepResult result = run_sweep(cfg);
    write_sweep_outputs(cfg, result, dir, "sweep");
    std::cout << result.points.size() << " trade-off points -> " << (dir / "sweep.csv").string() << "\n";
    return 0;
}

int cmd_convergence(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_out_dir(cfg);
    auto points = run_convergence(cfg, cfg.convergence_ratios);
    std::ostringstream csv;
    write_convergence_csv(points, csv);
    write_file(dir / "convergence.csv", csv.str());
    std::cout << points.size() << " convergence rows -> " << (dir / "convergence.csv").string() << "\n";
    return 0;
}

int cmd_ablate_variants(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_out_dir(cfg);
    SweepResult result = run_variant_ablation(cfg);
    write_sweep_outputs(cfg, result, dir, "variants");
    std::cout << result.points.size() << " trade-off points -> " << (dir / "variants.csv").string() << "\n";
    return 0;
}

int cmd_zoo_size(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_out_dir(cfg);
    SweepResult result = run_zoo_size_study(cfg, cfg.zoo_sizes);
    write_sweep_outputs(cfg, result, dir, "zoo_size");
    std::cout << result.points.size() << " trade-off points -> " << (dir / "zoo_size.csv").string() << "\n";
    return 0;
}

int cmd_reconstruct(const CommonArgs& args) {
    ExperimentConfig cfg = load_config(args);
    fs::path dir = ensure_out_dir(cfg);
    int eval_round = cfg.attack.eval_rounds.front();

    std::ostringstream summary;
    summary << "seed,client,best_loss,mse\n";
    for (std::uint64_t seed : cfg.seeds) {
        bool needs_zoo = cfg.defense.kind == DefenseKind::recup || cfg.defense.kind == DefenseKind::fgsm_one_step ||
                         cfg.defense.kind == DefenseKind::fgsm_average ||
                         cfg.defense.kind == DefenseKind::fgsm_iterative ||
                         cfg.defense.kind == DefenseKind::fgsm_momentum;
        SeedContext ctx = build_seed_context(cfg, seed, needs_zoo, /*with_adversaries=*/false);
        FlConfig fl = ctx.fl;
        fl.rounds = eval_round;
        std::vector<ModelUpdate> captured;
        GlobalModelState weights_before = init_global(ctx.model_spec);
        DefenseFn defense = make_defense(cfg, ctx, cfg.defense.kind, cfg.defense.param_values().front());
        run_rounds(
            ctx.train, ctx.parts, ctx.test, ctx.model_spec, fl, defense,
            [&](int, int round, const ModelUpdate& u) {
                if (round == eval_round) captured.push_back(u);
            },
            [&](int round, const GlobalModelState& st) {
                if (round == eval_round) weights_before = st;
            });
        if (captured.empty()) throw usage_error("no updates captured");
        int idx = std::min<int>(cfg.reconstruction.client_index, static_cast<int>(captured.size()) - 1);
        const ModelUpdate& target = captured[static_cast<std::size_t>(idx)];
        const auto& rows = ctx.parts[static_cast<std::size_t>(target.client_id)];
        const LabeledSample& original = ctx.train.samples[rows.front()];

        Rng rng(derive_seed(0x7EC, seed, 0x11));
        ReconstructionResult rec = reconstruct(target, ctx.model_spec, weights_before.weights, original.task_label,
                                               cfg.reconstruction.cfg, rng);
        Tensor original_row = original.features.reshaped({1, original.features.numel()});
        double err = reconstruction_mse(rec.input, original_row);
        summary << seed << ',' << target.client_id << ',' << rec.best_loss << ',' << err << "\n";

        std::string tag = "seed" + std::to_string(seed);
        write_csv_grid(rec.input, (dir / ("reconstructed_" + tag + ".csv")).string());
        write_csv_grid(original_row, (dir / ("original_" + tag + ".csv")).string());
        std::ostringstream trace;
        trace << "iteration,loss\n";
        for (std::size_t i = 0; i < rec.loss_trace.size(); ++i) trace << i << ',' << rec.loss_trace[i] << "\n";
        write_file(dir / ("trace_" + tag + ".csv"), trace.str());
        if (!cfg.reconstruction.cfg.image_shape.empty()) {
            write_pgm(rec.input.reshaped(cfg.reconstruction.cfg.image_shape),
                      (dir / ("reconstructed_" + tag + ".pgm")).string());
        }
    }
    write_file(dir / "reconstruction.csv", summary.str());
    std::cout << "reconstruction summary -> " << (dir / "reconstruction.csv").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"user-configurable gradient-perturbation defense workbench"};
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", args.config_path, "experiment config file (TOML)")->required();
        cmd->add_option("--seed", args.seed_override, "override the config seed list with one seed");
        cmd->add_option("--out", args.out_dir, "override the output directory");
        cmd->add_flag("--timing", args.timing, "print elapsed wall-clock time");
    };

    int (*handler)(const CommonArgs&) = nullptr;
    for (auto [name, desc, fn] : {
             std::tuple{"train-zoo", "train and serialize the substitute-model zoo(s)", &cmd_train_zoo},
             std::tuple{"run-fl", "run federated training with the configured defense", &cmd_run_fl},
             std::tuple{"sweep", "parameter sweep producing utility-privacy trade-off points", &cmd_sweep},
             std::tuple{"reconstruct", "gradient-matching reconstruction attack", &cmd_reconstruct},
             std::tuple{"convergence", "per-round loss with the defense always on", &cmd_convergence},
             std::tuple{"ablate-variants", "compare the full method with plain FGSM variants", &cmd_ablate_variants},
             std::tuple{"zoo-size", "trade-off as a function of zoo size", &cmd_zoo_size},
         }) {
        CLI::App* cmd = app.add_subcommand(name, desc);
        add_common(cmd);
        cmd->parse_complete_callback([&handler, fn = fn] { handler = fn; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // prints usage, exit 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints the diagnostic and usage hint
        return 1;
    }

    auto started = std::chrono::steady_clock::now();
    try {
        int rc = handler ? handler(args) : 1;
        if (args.timing) {
            auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            std::cerr << "elapsed: " << elapsed << " s\n";
        }
        return rc;
    } catch (const config_error& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const parse_error& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
