#pragma once

// Experiment orchestration: parameter sweeps producing utility-privacy
// trade-off points, convergence studies, the FGSM-variant and zoo-size
// ablations, CSV emission, SVG trade-off plots, and matched-utility curve
// comparison. Sweep cells are independent; they run on a small worker pool
// capped by RECUP_THREADS (0 or 1 = sequential) and results are ordered by
// (defense, parameter index, seed) before anything is written.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "recup/attacks.hpp"
#include "recup/config.hpp"
#include "recup/data.hpp"
#include "recup/defenses.hpp"
#include "recup/errors.hpp"
#include "recup/fl.hpp"
#include "recup/model.hpp"
#include "recup/pooling.hpp"
#include "recup/tensor.hpp"

namespace recup {

struct TradeoffPoint {
    std::string defense;
    double param = 0;
    int round = 0;
    std::string adversary;  // "<kind>:<attribute>"
    double asr = std::numeric_limits<double>::quiet_NaN();
    double loss = std::numeric_limits<double>::quiet_NaN();
    double mse = std::numeric_limits<double>::quiet_NaN();  // NaN = not measured
    std::uint64_t seed = 0;
    std::string error;  // non-empty marks an error row
};

// Deterministic mixing of a config seed with the per-run seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t run, std::uint64_t salt = 0) {
    return Rng(base ^ (0x9e3779b97f4a7c15ULL * (run + 1))).fork(salt).next_u64();
}

inline int worker_count() {
    if (const char* env = std::getenv("RECUP_THREADS")) {
        int n = std::atoi(env);
        return n <= 1 ? 1 : n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(i) for i in [0, n) on the worker pool; exceptions propagate.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    int workers = std::min<int>(worker_count(), static_cast<int>(n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::mutex err_mutex;
    std::exception_ptr first_error;
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Per-seed context shared by every cell of one repetition
// ---------------------------------------------------------------------------

struct SeedContext {
    std::uint64_t run_seed = 0;
    Dataset train, test;
    std::vector<std::vector<std::size_t>> parts;
    FlConfig fl;
    MlpSpec model_spec;
    std::int64_t pool_window = 1;
    std::vector<std::string> protected_attrs;
    std::vector<double> gamma;
    std::map<std::string, ModelZoo> zoos;  // per protected attribute
    // Per-client majority attribute labels, attribute id -> client -> label.
    std::map<std::string, std::vector<int>> client_labels;
    // Clean pooled features at the initial weights, per attribute (zoo and
    // round-1 adversary training data).
    std::map<std::string, std::pair<Tensor, std::vector<int>>> initial_features;
    // Round-1 adversaries are pure functions of the seed (trained on clean
    // updates at the initial weights), so they are trained once up front and
    // shared read-only across cells. Key: "<kind>:<attribute>".
    std::map<std::string, AdversaryModel> round1_adversaries;
};

namespace detail {

inline Dataset build_dataset(const ExperimentConfig& cfg, std::uint64_t run_seed, Dataset* test_out) {
    if (cfg.dataset.kind == "synthetic") {
        SynthSpec spec = cfg.dataset.synth;
        spec.seed = derive_seed(spec.seed, run_seed, 0xDA);
        Dataset all = synth_generate(spec);
        auto [train, test] = split(all, cfg.dataset.train_fraction, derive_seed(cfg.dataset.split_seed, run_seed, 0x51));
        *test_out = std::move(test);
        return std::move(train);
    }
    CsvDataset csv = load_csv(cfg.dataset.csv_path, cfg.dataset.csv_schema, cfg.dataset.train_fraction,
                              derive_seed(cfg.dataset.split_seed, run_seed, 0x51));
    *test_out = std::move(csv.test);
    return std::move(csv.train);
}

inline int majority_label(const std::vector<int>& labels) {
    std::map<int, int> counts;
    for (int l : labels) ++counts[l];
    int best = labels.front(), best_count = 0;
    for (const auto& [label, count] : counts)
        if (count > best_count) {
            best = label;
            best_count = count;
        }
    return best;
}

inline SpecSampler zoo_sampler(const ZooConfig& zc) {
    SpecSampler wide = default_zoo_sampler(zc.widths, zc.hidden_layers);
    int linear = zc.linear_members;
    return [wide, linear](int index, std::int64_t input_dim, std::int64_t classes, Rng& rng) {
        if (index < linear) {
            MlpSpec spec;
            spec.input_dim = input_dim;
            spec.widths = {classes};
            spec.seed = rng.next_u64();
            return spec;
        }
        return wide(index, input_dim, classes, rng);
    };
}

}  // namespace detail

inline SeedContext build_seed_context(const ExperimentConfig& cfg, std::uint64_t run_seed, bool with_zoos = true,
                                      bool with_adversaries = true) {
    SeedContext ctx;
    ctx.run_seed = run_seed;
    ctx.train = detail::build_dataset(cfg, run_seed, &ctx.test);
    if (ctx.train.samples.empty()) throw config_error("empty train split");
    if (ctx.test.samples.empty()) throw config_error("empty test split");

    ctx.fl = cfg.fl;
    if (cfg.fl_clients_per_sample) ctx.fl.num_clients = static_cast<int>(ctx.train.size());
    ctx.fl.seed = derive_seed(cfg.fl.seed, run_seed, 0xF1);
    ctx.parts = partition(ctx.train, ctx.fl.num_clients, cfg.partition_mode, derive_seed(cfg.fl.seed, run_seed, 0x9A));

    ctx.model_spec.input_dim = ctx.train.meta.feature_dim();
    ctx.model_spec.widths = cfg.model.hidden;
    ctx.model_spec.widths.push_back(cfg.model.output == OutputKind::sigmoid ? 1 : ctx.train.meta.task_classes);
    ctx.model_spec.activation = cfg.model.activation;
    ctx.model_spec.output = cfg.model.output;
    ctx.model_spec.seed = derive_seed(cfg.model.seed, run_seed, 0x30);

    ctx.pool_window = default_pool_window(ctx.model_spec.param_count(), cfg.attack.pool_target_width);

    ctx.protected_attrs = cfg.defense.protect;
    if (ctx.protected_attrs.empty() && !ctx.train.meta.attributes.empty())
        ctx.protected_attrs.push_back(ctx.train.meta.attributes.front().id);
    ctx.gamma = cfg.defense.gamma;
    if (ctx.gamma.empty()) ctx.gamma.assign(ctx.protected_attrs.size(), 1.0);

    // Per-client ground-truth attribute labels (majority over local samples).
    for (const auto& attr : ctx.train.meta.attributes) {
        std::vector<int> labels;
        for (const auto& part : ctx.parts) {
            if (part.empty()) {
                labels.push_back(0);
                continue;
            }
            std::vector<int> local;
            for (auto idx : part) local.push_back(ctx.train.samples[idx].attributes.at(attr.id));
            labels.push_back(detail::majority_label(local));
        }
        ctx.client_labels[attr.id] = std::move(labels);
    }

    GlobalModelState w0 = init_global(ctx.model_spec);
    std::vector<std::string> feature_attrs = ctx.protected_attrs;
    for (const auto& a : cfg.attack.attributes())
        if (std::find(feature_attrs.begin(), feature_attrs.end(), a) == feature_attrs.end())
            feature_attrs.push_back(a);
    for (const auto& attr : feature_attrs)
        ctx.initial_features[attr] =
            build_adversary_dataset(w0, ctx.train, attr, ctx.pool_window, cfg.model.loss);

    if (with_zoos) {
        ZooTrainOptions opt;
        opt.count = cfg.zoo.count;
        opt.epochs = cfg.zoo.epochs;
        opt.lr = cfg.zoo.lr;
        opt.batch_size = cfg.zoo.batch_size;
        opt.min_members = cfg.defense.models_per_iteration;
        SpecSampler sampler = detail::zoo_sampler(cfg.zoo);
        std::size_t attr_index = 0;
        for (const auto& attr : ctx.protected_attrs) {
            const auto& [features, labels] = ctx.initial_features.at(attr);
            Rng rng(derive_seed(0x500, run_seed, 0x200 + attr_index++));
            ctx.zoos.emplace(attr, train_zoo(features, labels, ctx.train.meta.attribute_classes(attr), attr,
                                             ctx.pool_window, opt, sampler, rng));
        }
    }

    for (const auto& attr : with_adversaries ? cfg.attack.attributes() : std::vector<std::string>{}) {
        const auto& [features, labels] = ctx.initial_features.at(attr);
        int classes = ctx.train.meta.attribute_classes(attr);
        for (AdversaryKind kind : cfg.attack.adversaries) {
            Rng arng(derive_seed(0xAD, run_seed, 131 + static_cast<std::uint64_t>(kind)));
            ctx.round1_adversaries.emplace(
                to_string(kind) + ":" + attr,
                train_adversary(kind, features, labels, classes, attr, ctx.pool_window, cfg.attack.hyper, arng));
        }
    }
    return ctx;
}

// ---------------------------------------------------------------------------
// Defense construction
// ---------------------------------------------------------------------------

inline DefenseFn make_defense(const ExperimentConfig& cfg, const SeedContext& ctx, DefenseKind kind, double param) {
    switch (kind) {
        case DefenseKind::none:
            return nullptr;
        case DefenseKind::clip_only:
            return [param](const ModelUpdate& u, const DefenseContext&, Rng&) { return clip(u, param); };
        case DefenseKind::dp_gaussian: {
            DpConfig dp;
            dp.mu = cfg.defense.mu;
            dp.noise = param;
            dp.clip_bound = cfg.defense.clip_bound;
            return [dp](const ModelUpdate& u, const DefenseContext&, Rng& rng) { return dp_gaussian(u, dp, rng); };
        }
        case DefenseKind::dp_laplace: {
            DpConfig dp;
            dp.mu = cfg.defense.mu;
            dp.noise = param;
            dp.clip_bound = cfg.defense.clip_bound;
            return [dp](const ModelUpdate& u, const DefenseContext&, Rng& rng) { return dp_laplace(u, dp, rng); };
        }
        case DefenseKind::sparsify:
            return [param](const ModelUpdate& u, const DefenseContext&, Rng&) { return sparsify(u, param); };
        case DefenseKind::soteria: {
            SoteriaConfig sc;
            sc.rate = param;
            sc.defend_layer = cfg.defense.defend_layer;
            return [sc](const ModelUpdate& u, const DefenseContext& c, Rng&) {
                return soteria(u, c.global.spec, c.global.weights, c.local_x, sc);
            };
        }
        case DefenseKind::recup: {
            RecupConfig rc;
            rc.epsilon = param;
            rc.outer_iterations = cfg.defense.outer_iterations;
            rc.models_per_iteration = cfg.defense.models_per_iteration;
            // Per-cell protect/gamma overrides reuse the context's zoos, so a
            // gamma or attribute-count sweep does not retrain anything.
            std::vector<std::string> ids = cfg.defense.protect.empty() ? ctx.protected_attrs : cfg.defense.protect;
            std::vector<double> gamma = cfg.defense.gamma.empty() ? std::vector<double>(ids.size(), 1.0)
                                                                  : cfg.defense.gamma;
            if (gamma.size() != ids.size()) throw config_error("defense: gamma list must match protect list");
            for (const auto& id : ids)
                if (!ctx.zoos.count(id)) throw config_error("no zoo trained for attribute '" + id + "'");
            return [rc, ids, gamma, &ctx](const ModelUpdate& u, const DefenseContext&, Rng& rng) {
                std::vector<ProtectedAttribute> attrs;
                for (std::size_t m = 0; m < ids.size(); ++m) {
                    ProtectedAttribute pa;
                    pa.spec = {ids[m], static_cast<int>(ctx.train.meta.attribute_classes(ids[m])), gamma[m]};
                    pa.zoo = &ctx.zoos.at(ids[m]);
                    pa.true_label = ctx.client_labels.at(ids[m])[static_cast<std::size_t>(u.client_id)];
                    attrs.push_back(pa);
                }
                return recup_multi(u, attrs, rc, rng);
            };
        }
        case DefenseKind::fgsm_one_step:
        case DefenseKind::fgsm_average:
        case DefenseKind::fgsm_iterative:
        case DefenseKind::fgsm_momentum: {
            FgsmVariant variant = kind == DefenseKind::fgsm_one_step    ? FgsmVariant::one_step
                                  : kind == DefenseKind::fgsm_average  ? FgsmVariant::average
                                  : kind == DefenseKind::fgsm_iterative ? FgsmVariant::iterative
                                                                        : FgsmVariant::momentum;
            int q = cfg.defense.models_per_iteration;
            std::string id = cfg.defense.protect.empty() ? ctx.protected_attrs.front() : cfg.defense.protect.front();
            if (!ctx.zoos.count(id)) throw config_error("no zoo trained for attribute '" + id + "'");
            return [variant, q, param, &ctx, id](const ModelUpdate& u, const DefenseContext&, Rng& rng) {
                int label = ctx.client_labels.at(id)[static_cast<std::size_t>(u.client_id)];
                return fgsm_variant(u, ctx.zoos.at(id), param, q, variant, label, rng);
            };
        }
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// One sweep cell: run FL with the defense at one parameter value, train the
// per-round adversaries on clean updates at that round's weights, and score
// ASR on the defended updates the eavesdropper captured.
// ---------------------------------------------------------------------------

struct CellResult {
    std::vector<TradeoffPoint> points;
};

inline CellResult run_cell(const ExperimentConfig& cfg, const SeedContext& ctx, DefenseKind kind, double param,
                           const std::string& defense_label) {
    CellResult out;
    int max_round = *std::max_element(cfg.attack.eval_rounds.begin(), cfg.attack.eval_rounds.end());

    FlConfig fl = ctx.fl;
    fl.rounds = max_round;

    std::map<int, std::vector<ModelUpdate>> captured;      // eval round -> defended updates
    std::map<int, GlobalModelState> weights_before;        // eval round -> w_{r-1}
    std::vector<int> eval_rounds = cfg.attack.eval_rounds;

    DefenseFn defense = make_defense(cfg, ctx, kind, param);
    RunResult result = run_rounds(
        ctx.train, ctx.parts, ctx.test, ctx.model_spec, fl, defense,
        [&](int cid, int round, const ModelUpdate& u) {
            if (std::find(eval_rounds.begin(), eval_rounds.end(), round) != eval_rounds.end()) {
                captured[round].push_back(u);
                (void)cid;
            }
        },
        [&](int round, const GlobalModelState& state) {
            if (std::find(eval_rounds.begin(), eval_rounds.end(), round) != eval_rounds.end())
                weights_before[round] = state;
        });

    for (int round : eval_rounds) {
        double test_loss = std::numeric_limits<double>::quiet_NaN();
        for (const auto& [r, l] : result.state.eval_history)
            if (r == round) test_loss = l;

        for (const auto& attr : cfg.attack.attributes()) {
            // Clean training set for the adversary at this round's weights.
            std::pair<Tensor, std::vector<int>> data;
            if (round == 1) {
                data = ctx.initial_features.at(attr);
            } else {
                data = build_adversary_dataset(weights_before.at(round), ctx.train, attr, ctx.pool_window,
                                               cfg.model.loss);
            }
            int classes = ctx.train.meta.attribute_classes(attr);
            std::vector<std::pair<ModelUpdate, int>> eval_set;
            for (const auto& u : captured.at(round))
                eval_set.emplace_back(u, ctx.client_labels.at(attr)[static_cast<std::size_t>(u.client_id)]);

            for (AdversaryKind akind : cfg.attack.adversaries) {
                TradeoffPoint p;
                p.defense = defense_label;
                p.param = param;
                p.round = round;
                p.adversary = to_string(akind) + ":" + attr;
                p.seed = ctx.run_seed;
                p.loss = test_loss;
                try {
                    if (round == 1 && ctx.round1_adversaries.count(p.adversary)) {
                        p.asr = asr(ctx.round1_adversaries.at(p.adversary), eval_set);
                    } else {
                        Rng arng(derive_seed(0xAD, ctx.run_seed, static_cast<std::uint64_t>(round) * 131 +
                                                                     static_cast<std::uint64_t>(akind)));
                        AdversaryModel adv = train_adversary(akind, data.first, data.second, classes, attr,
                                                             ctx.pool_window, cfg.attack.hyper, arng);
                        p.asr = asr(adv, eval_set);
                    }
                } catch (const std::exception& e) {
                    p.error = e.what();
                }
                out.points.push_back(std::move(p));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sweep drivers
// ---------------------------------------------------------------------------

struct SweepResult {
    std::vector<TradeoffPoint> points;
    std::vector<std::string> errors;
};

// A sweep over (defense kinds) x (parameter values) x (seeds) against
// prebuilt per-seed contexts (one per entry of cfg.seeds).
inline SweepResult run_sweep_with_contexts(const ExperimentConfig& cfg,
                                           const std::vector<std::pair<DefenseKind, std::string>>& kinds,
                                           const std::vector<std::unique_ptr<SeedContext>>& contexts) {
    cfg.validate();
    std::vector<double> params = cfg.defense.param_values();
    if (contexts.size() != cfg.seeds.size()) throw usage_error("run_sweep: context/seed count mismatch");

    struct Cell {
        std::size_t kind_index, param_index, seed_index;
    };
    std::vector<Cell> cells;
    for (std::size_t k = 0; k < kinds.size(); ++k)
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t s = 0; s < cfg.seeds.size(); ++s) cells.push_back({k, p, s});

    std::vector<CellResult> results(cells.size());
    std::vector<std::string> errors(cells.size());
    parallel_for(cells.size(), [&](std::size_t i) {
        const Cell& c = cells[i];
        try {
            cfg.defense.validate_param(params[c.param_index]);
            results[i] = run_cell(cfg, *contexts[c.seed_index], kinds[c.kind_index].first, params[c.param_index],
                                  kinds[c.kind_index].second);
        } catch (const std::exception& e) {
            // Error cell: keep one error row per (round, adversary) so the
            // sweep stays rectangular; the message lands in errors.log.
            CellResult r;
            for (int round : cfg.attack.eval_rounds)
                for (const auto& attr : cfg.attack.attributes())
                    for (AdversaryKind akind : cfg.attack.adversaries) {
                        TradeoffPoint p;
                        p.defense = kinds[c.kind_index].second;
                        p.param = params[c.param_index];
                        p.round = round;
                        p.adversary = to_string(akind) + ":" + attr;
                        p.seed = cfg.seeds[c.seed_index];
                        p.error = e.what();
                        r.points.push_back(std::move(p));
                    }
            results[i] = std::move(r);
            errors[i] = e.what();
        }
    });

    SweepResult out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        for (auto& p : results[i].points) out.points.push_back(std::move(p));
        if (!errors[i].empty())
            out.errors.push_back(kinds[cells[i].kind_index].second + " param " +
                                 std::to_string(params[cells[i].param_index]) + " seed " +
                                 std::to_string(cfg.seeds[cells[i].seed_index]) + ": " + errors[i]);
    }
    return out;
}

inline bool kind_needs_zoo(DefenseKind kind) {
    return kind == DefenseKind::recup || kind == DefenseKind::fgsm_one_step || kind == DefenseKind::fgsm_average ||
           kind == DefenseKind::fgsm_iterative || kind == DefenseKind::fgsm_momentum;
}

// Builds per-seed contexts (dataset, zoo, round-1 adversaries) shared
// read-only across that seed's cells.
inline std::vector<std::unique_ptr<SeedContext>> build_seed_contexts(const ExperimentConfig& cfg, bool with_zoos) {
    std::vector<std::unique_ptr<SeedContext>> contexts(cfg.seeds.size());
    parallel_for(cfg.seeds.size(), [&](std::size_t i) {
        contexts[i] = std::make_unique<SeedContext>(build_seed_context(cfg, cfg.seeds[i], with_zoos));
    });
    return contexts;
}

inline SweepResult run_sweep_kinds(const ExperimentConfig& cfg,
                                   const std::vector<std::pair<DefenseKind, std::string>>& kinds) {
    bool needs_zoo = false;
    for (const auto& [kind, label] : kinds)
        if (kind_needs_zoo(kind)) needs_zoo = true;
    auto contexts = build_seed_contexts(cfg, needs_zoo);
    return run_sweep_with_contexts(cfg, kinds, contexts);
}

inline SweepResult run_sweep(const ExperimentConfig& cfg) {
    return run_sweep_kinds(cfg, {{cfg.defense.kind, to_string(cfg.defense.kind)}});
}

// Compares the full method with the four plain FGSM variants under shared
// seeds and a shared parameter grid.
inline SweepResult run_variant_ablation(const ExperimentConfig& cfg) {
    return run_sweep_kinds(cfg, {{DefenseKind::recup, "recup"},
                                 {DefenseKind::fgsm_one_step, "fgsm-one-step"},
                                 {DefenseKind::fgsm_average, "fgsm-average"},
                                 {DefenseKind::fgsm_iterative, "fgsm-iterative"},
                                 {DefenseKind::fgsm_momentum, "fgsm-momentum"}});
}

// ---------------------------------------------------------------------------
// Convergence study
// ---------------------------------------------------------------------------

struct ConvergencePoint {
    int round = 0;
    double loss = 0;
    std::string defense;
    double param = 0;
    double participation = 1.0;
    std::uint64_t seed = 0;
};

inline std::vector<ConvergencePoint> run_convergence(const ExperimentConfig& cfg,
                                                     const std::vector<double>& ratios) {
    cfg.validate();
    std::vector<double> use_ratios = ratios.empty() ? std::vector<double>{cfg.fl.participation} : ratios;
    double param = cfg.defense.param_values().front();
    bool needs_zoo = cfg.defense.kind == DefenseKind::recup;

    struct Cell {
        std::size_t ratio_index, seed_index;
    };
    std::vector<Cell> cells;
    for (std::size_t r = 0; r < use_ratios.size(); ++r)
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s) cells.push_back({r, s});

    std::vector<std::unique_ptr<SeedContext>> contexts(cfg.seeds.size());
    parallel_for(cfg.seeds.size(), [&](std::size_t i) {
        contexts[i] = std::make_unique<SeedContext>(build_seed_context(cfg, cfg.seeds[i], needs_zoo,
                                                                       /*with_adversaries=*/false));
    });

    std::vector<std::vector<ConvergencePoint>> rows(cells.size());
    parallel_for(cells.size(), [&](std::size_t i) {
        const Cell& c = cells[i];
        const SeedContext& ctx = *contexts[c.seed_index];
        FlConfig fl = ctx.fl;
        fl.participation = use_ratios[c.ratio_index];
        DefenseFn defense = make_defense(cfg, ctx, cfg.defense.kind, param);
        RunResult result = run_rounds(ctx.train, ctx.parts, ctx.test, ctx.model_spec, fl, defense);
        for (const auto& [round, loss_value] : result.state.eval_history) {
            ConvergencePoint p;
            p.round = round;
            p.loss = loss_value;
            p.defense = to_string(cfg.defense.kind);
            p.param = param;
            p.participation = use_ratios[c.ratio_index];
            p.seed = cfg.seeds[c.seed_index];
            rows[i].push_back(p);
        }
    });

    std::vector<ConvergencePoint> out;
    for (auto& r : rows)
        for (auto& p : r) out.push_back(std::move(p));
    return out;
}

// ---------------------------------------------------------------------------
// Zoo-size study: nested member sets, size-k zoo = first k members of the
// largest zoo, rebuilt per seed.
// ---------------------------------------------------------------------------

inline SweepResult run_zoo_size_study(const ExperimentConfig& cfg, const std::vector<int>& sizes) {
    cfg.validate();
    if (sizes.empty()) throw config_error("zoo-size study: no sizes given");
    int max_size = *std::max_element(sizes.begin(), sizes.end());
    for (int s : sizes)
        if (s < cfg.defense.models_per_iteration)
            throw config_error("zoo size " + std::to_string(s) + " is below Q=" +
                               std::to_string(cfg.defense.models_per_iteration));

    ExperimentConfig big = cfg;
    big.zoo.count = max_size;

    SweepResult out;
    std::vector<double> params = cfg.defense.param_values();
    std::vector<std::unique_ptr<SeedContext>> contexts(cfg.seeds.size());
    parallel_for(cfg.seeds.size(), [&](std::size_t i) {
        contexts[i] = std::make_unique<SeedContext>(build_seed_context(big, big.seeds[i], true));
    });

    struct Cell {
        std::size_t size_index, param_index, seed_index;
    };
    std::vector<Cell> cells;
    for (std::size_t z = 0; z < sizes.size(); ++z)
        for (std::size_t p = 0; p < params.size(); ++p)
            for (std::size_t s = 0; s < cfg.seeds.size(); ++s) cells.push_back({z, p, s});

    std::vector<CellResult> results(cells.size());
    parallel_for(cells.size(), [&](std::size_t i) {
        const Cell& c = cells[i];
        SeedContext ctx_small = *contexts[c.seed_index];  // copy, then truncate zoos
        for (auto& [attr, zoo] : ctx_small.zoos)
            zoo.members.resize(static_cast<std::size_t>(sizes[c.size_index]));
        std::string label = "recup-z" + std::to_string(sizes[c.size_index]);
        results[i] = run_cell(big, ctx_small, DefenseKind::recup, params[c.param_index], label);
    });
    for (auto& r : results)
        for (auto& p : r.points) out.points.push_back(std::move(p));
    return out;
}

// ---------------------------------------------------------------------------
// CSV / SVG emission
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}
}  // namespace detail

// Fixed column order: defense,param,round,adversary,asr,loss,mse,seed.
// Error rows keep their identity columns and leave the metrics empty.
inline void write_tradeoff_csv(const std::vector<TradeoffPoint>& points, std::ostream& out) {
    out << "defense,param,round,adversary,asr,loss,mse,seed\n";
    for (const auto& p : points) {
        out << p.defense << ',' << detail::fmt_double(p.param) << ',' << p.round << ',' << p.adversary << ',';
        if (p.error.empty() && !std::isnan(p.asr)) out << detail::fmt_double(p.asr);
        out << ',';
        if (p.error.empty() && !std::isnan(p.loss)) out << detail::fmt_double(p.loss);
        out << ',';
        if (p.error.empty() && !std::isnan(p.mse)) out << detail::fmt_double(p.mse);
        out << ',' << p.seed << '\n';
    }
}

inline void write_convergence_csv(const std::vector<ConvergencePoint>& points, std::ostream& out) {
    out << "round,loss,defense,param,participation,seed\n";
    for (const auto& p : points)
        out << p.round << ',' << detail::fmt_double(p.loss) << ',' << p.defense << ','
            << detail::fmt_double(p.param) << ',' << detail::fmt_double(p.participation) << ',' << p.seed << '\n';
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw usage_error("median of empty set");
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One (loss, asr) vertex per parameter value: per-seed values reduced to the
// median, vertices sorted by loss.
struct Curve {
    std::vector<std::pair<double, double>> vertices;  // (loss, asr)

    double min_loss() const { return vertices.front().first; }
    double max_loss() const { return vertices.back().first; }

    double asr_at(double loss_value) const {
        if (vertices.size() == 1) return vertices.front().second;
        if (loss_value <= vertices.front().first) return vertices.front().second;
        if (loss_value >= vertices.back().first) return vertices.back().second;
        for (std::size_t i = 1; i < vertices.size(); ++i) {
            if (loss_value <= vertices[i].first) {
                auto [x0, y0] = vertices[i - 1];
                auto [x1, y1] = vertices[i];
                if (x1 == x0) return 0.5 * (y0 + y1);
                double t = (loss_value - x0) / (x1 - x0);
                return y0 + t * (y1 - y0);
            }
        }
        return vertices.back().second;
    }
};

inline Curve median_curve(const std::vector<TradeoffPoint>& points, const std::string& defense, int round,
                          const std::string& adversary) {
    std::map<double, std::pair<std::vector<double>, std::vector<double>>> by_param;  // param -> (losses, asrs)
    for (const auto& p : points) {
        if (p.defense != defense || p.round != round || p.adversary != adversary || !p.error.empty()) continue;
        if (std::isnan(p.asr) || std::isnan(p.loss)) continue;
        by_param[p.param].first.push_back(p.loss);
        by_param[p.param].second.push_back(p.asr);
    }
    if (by_param.empty()) throw usage_error("median_curve: no usable points for " + defense);
    Curve c;
    for (auto& [param, pair] : by_param) c.vertices.emplace_back(median(pair.first), median(pair.second));
    std::sort(c.vertices.begin(), c.vertices.end());
    return c;
}

// Shared loss grid across the overlapping region of two curves.
inline std::vector<double> shared_loss_grid(const Curve& a, const Curve& b, int count = 11) {
    double lo = std::max(a.min_loss(), b.min_loss());
    double hi = std::min(a.max_loss(), b.max_loss());
    if (hi <= lo) return {0.5 * (lo + hi)};
    std::vector<double> grid;
    for (int i = 0; i < count; ++i) grid.push_back(lo + (hi - lo) * static_cast<double>(i) / (count - 1));
    return grid;
}

// Deterministic SVG 1.1 plot: one polyline + circle markers per defense,
// x = learning loss, y = ASR. Identical inputs produce identical bytes.
inline void emit_plot(const std::vector<TradeoffPoint>& points, int round, const std::string& adversary,
                      std::ostream& out) {
    std::vector<std::string> defenses;
    for (const auto& p : points)
        if (p.round == round && p.adversary == adversary && p.error.empty() &&
            std::find(defenses.begin(), defenses.end(), p.defense) == defenses.end())
            defenses.push_back(p.defense);
    if (defenses.empty()) throw usage_error("emit_plot: no points for the requested panel");
    std::sort(defenses.begin(), defenses.end());

    std::vector<Curve> curves;
    double min_x = 1e300, max_x = -1e300;
    for (const auto& d : defenses) {
        curves.push_back(median_curve(points, d, round, adversary));
        min_x = std::min(min_x, curves.back().min_loss());
        max_x = std::max(max_x, curves.back().max_loss());
    }
    if (max_x <= min_x) {
        min_x -= 0.5;
        max_x += 0.5;
    }

    const double width = 640, height = 480, margin = 56;
    auto px = [&](double loss_value) {
        return margin + (loss_value - min_x) / (max_x - min_x) * (width - 2 * margin);
    };
    auto py = [&](double asr_value) { return height - margin - asr_value * (height - 2 * margin); };
    const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"640\" height=\"480\" "
           "viewBox=\"0 0 640 480\">\n";
    out << "<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" fill=\"white\"/>\n";
    out << "<line x1=\"" << detail::fmt_double(margin) << "\" y1=\"" << detail::fmt_double(height - margin)
        << "\" x2=\"" << detail::fmt_double(width - margin) << "\" y2=\"" << detail::fmt_double(height - margin)
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << detail::fmt_double(margin) << "\" y1=\"" << detail::fmt_double(margin) << "\" x2=\""
        << detail::fmt_double(margin) << "\" y2=\"" << detail::fmt_double(height - margin)
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << detail::fmt_double(width / 2) << "\" y=\"" << detail::fmt_double(height - 12)
        << "\" text-anchor=\"middle\" font-size=\"14\">learning loss</text>\n";
    out << "<text x=\"16\" y=\"" << detail::fmt_double(height / 2)
        << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 16 "
        << detail::fmt_double(height / 2) << ")\">attack success rate</text>\n";
    out << "<text x=\"" << detail::fmt_double(width / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
        << adversary << " round " << round << "</text>\n";

    for (std::size_t d = 0; d < defenses.size(); ++d) {
        const char* color = palette[d % 7];
        const Curve& c = curves[d];
        if (c.vertices.size() > 1) {
            out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (std::size_t i = 0; i < c.vertices.size(); ++i)
                out << (i ? " " : "") << detail::fmt_double(px(c.vertices[i].first)) << ','
                    << detail::fmt_double(py(c.vertices[i].second));
            out << "\"/>\n";
        }
        for (const auto& [loss_value, asr_value] : c.vertices)
            out << "<circle cx=\"" << detail::fmt_double(px(loss_value)) << "\" cy=\""
                << detail::fmt_double(py(asr_value)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        out << "<text x=\"" << detail::fmt_double(width - margin + 4) << "\" y=\""
            << detail::fmt_double(margin + 16 * static_cast<double>(d)) << "\" font-size=\"11\" fill=\"" << color
            << "\">" << defenses[d] << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace recup
