#pragma once

// Experiment configuration: the TOML schema for datasets, the FL run, the
// defense under test (fixed parameter or sweep), adversaries, reconstruction,
// and output. See README for the documented key set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "recup/attacks.hpp"
#include "recup/data.hpp"
#include "recup/defenses.hpp"
#include "recup/errors.hpp"
#include "recup/fl.hpp"
#include "recup/model.hpp"
#include "recup/toml.hpp"

namespace recup {

enum class DefenseKind {
    none,
    clip_only,
    dp_gaussian,
    dp_laplace,
    sparsify,
    soteria,
    recup,
    fgsm_one_step,
    fgsm_average,
    fgsm_iterative,
    fgsm_momentum,
};

inline DefenseKind defense_kind_from_string(const std::string& s) {
    if (s == "none") return DefenseKind::none;
    if (s == "clip") return DefenseKind::clip_only;
    if (s == "dp-gaussian") return DefenseKind::dp_gaussian;
    if (s == "dp-laplace") return DefenseKind::dp_laplace;
    if (s == "sparsify") return DefenseKind::sparsify;
    if (s == "soteria") return DefenseKind::soteria;
    if (s == "recup") return DefenseKind::recup;
    if (s == "fgsm-one-step") return DefenseKind::fgsm_one_step;
    if (s == "fgsm-average") return DefenseKind::fgsm_average;
    if (s == "fgsm-iterative") return DefenseKind::fgsm_iterative;
    if (s == "fgsm-momentum") return DefenseKind::fgsm_momentum;
    throw config_error("unknown defense kind '" + s + "'");
}

inline std::string to_string(DefenseKind k) {
    switch (k) {
        case DefenseKind::none: return "none";
        case DefenseKind::clip_only: return "clip";
        case DefenseKind::dp_gaussian: return "dp-gaussian";
        case DefenseKind::dp_laplace: return "dp-laplace";
        case DefenseKind::sparsify: return "sparsify";
        case DefenseKind::soteria: return "soteria";
        case DefenseKind::recup: return "recup";
        case DefenseKind::fgsm_one_step: return "fgsm-one-step";
        case DefenseKind::fgsm_average: return "fgsm-average";
        case DefenseKind::fgsm_iterative: return "fgsm-iterative";
        case DefenseKind::fgsm_momentum: return "fgsm-momentum";
    }
    return "?";
}

struct DatasetConfig {
    std::string kind = "synthetic";  // synthetic | csv
    SynthSpec synth;
    std::string csv_path;
    CsvSchema csv_schema;
    double train_fraction = 0.8;
    std::uint64_t split_seed = 11;
};

struct ModelConfig {
    std::vector<std::int64_t> hidden = {16};
    Activation activation = Activation::relu;
    OutputKind output = OutputKind::softmax;
    LossKind loss = LossKind::cross_entropy;
    std::uint64_t seed = 3;
};

struct DefenseConfig {
    DefenseKind kind = DefenseKind::none;
    // The swept parameter: epsilon (recup / fgsm-*), sigma (dp-gaussian),
    // b (dp-laplace), rate (sparsify / soteria), bound (clip).
    double param = 0.0;
    std::vector<double> sweep;  // [lo, hi]; empty = fixed param
    int sweep_steps = 0;
    std::string sweep_scale = "log";  // log | linear
    double mu = 0.0;
    double clip_bound = 20.0;
    int defend_layer = -1;
    int outer_iterations = 10;     // P
    int models_per_iteration = 5;  // Q
    std::vector<std::string> protect;  // protected attribute ids
    std::vector<double> gamma;         // protection levels, same order

    std::vector<double> param_values() const {
        if (sweep.empty()) return {param};
        if (sweep.size() != 2 || sweep_steps < 2)
            throw config_error("defense: sweep needs [lo, hi] and sweep_steps >= 2");
        double lo = sweep[0], hi = sweep[1];
        std::vector<double> out;
        if (sweep_scale == "log") {
            if (lo <= 0 || hi <= lo) throw config_error("defense: log sweep needs 0 < lo < hi");
            for (int i = 0; i < sweep_steps; ++i)
                out.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / (sweep_steps - 1)));
        } else if (sweep_scale == "linear") {
            if (hi <= lo) throw config_error("defense: linear sweep needs lo < hi");
            for (int i = 0; i < sweep_steps; ++i)
                out.push_back(lo + (hi - lo) * static_cast<double>(i) / (sweep_steps - 1));
        } else {
            throw config_error("defense: sweep_scale must be 'log' or 'linear'");
        }
        return out;
    }

    void validate_param(double v) const {
        switch (kind) {
            case DefenseKind::none:
                break;
            case DefenseKind::clip_only:
                if (v <= 0) throw config_error("clip bound must be positive");
                break;
            case DefenseKind::dp_gaussian:
            case DefenseKind::dp_laplace:
                if (v < 0) throw config_error("noise scale must be >= 0");
                break;
            case DefenseKind::sparsify:
            case DefenseKind::soteria:
                if (v <= 0 || v >= 1) throw config_error("rate must be strictly inside (0,1)");
                break;
            default:
                if (v < 0) throw config_error("epsilon must be >= 0");
        }
    }

    void validate() const {
        for (double v : param_values()) validate_param(v);
        if (kind == DefenseKind::recup || kind == DefenseKind::fgsm_one_step || kind == DefenseKind::fgsm_average ||
            kind == DefenseKind::fgsm_iterative || kind == DefenseKind::fgsm_momentum) {
            if (protect.empty()) throw config_error("defense: no protected attributes configured");
            if (!gamma.empty() && gamma.size() != protect.size())
                throw config_error("defense: gamma list must match protect list");
        }
        if (outer_iterations < 1 || models_per_iteration < 2)
            throw config_error("defense: P >= 1 and Q >= 2 required");
    }
};

struct ZooConfig {
    int count = 20;
    std::vector<std::int64_t> widths = {128, 256, 512, 1024, 2048};
    int hidden_layers = 3;
    int linear_members = 0;  // members with no hidden layer, listed first
    int epochs = 80;
    double lr = 0.01;
    std::int64_t batch_size = 32;
};

struct AttackConfig {
    std::vector<AdversaryKind> adversaries = {AdversaryKind::stru_nn};
    std::vector<int> eval_rounds = {1};
    std::vector<std::string> attribute_ids;  // attributes to infer; resolved at parse time
    std::int64_t pool_target_width = 1024;
    AdversaryHyper hyper;

    const std::vector<std::string>& attributes() const { return attribute_ids; }
};

struct ReconstructionSection {
    ReconstructionConfig cfg;
    int client_index = 0;  // which captured update to reconstruct
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ModelConfig model;
    FlConfig fl;
    bool fl_clients_per_sample = true;  // clients = train size when fl.clients == 0
    PartitionMode partition_mode = PartitionMode::iid;
    DefenseConfig defense;
    ZooConfig zoo;
    AttackConfig attack;
    ReconstructionSection reconstruction;
    std::vector<double> convergence_ratios;  // empty = use fl.participation
    std::vector<int> zoo_sizes = {5, 10, 15, 20};
    std::string output_dir = "out";
    std::vector<std::uint64_t> seeds = {1};
    bool timing = false;
    bool checkpoints = false;  // per-round global-model checkpoint files

    void validate() const {
        if (seeds.empty()) throw config_error("output: at least one seed required");
        defense.validate();
        if (attack.attribute_ids.empty()) throw config_error("attack: no attribute to infer");
        for (int r : attack.eval_rounds)
            if (r < 1 || r > fl.rounds)
                throw config_error("attack: evaluation round " + std::to_string(r) + " outside 1.." +
                                   std::to_string(fl.rounds));
    }
};

namespace detail {

inline std::vector<std::int64_t> int_array(const TomlValue& v) {
    std::vector<std::int64_t> out;
    for (const auto& e : v.as_array()) out.push_back(e.as_int());
    return out;
}

inline std::vector<double> float_array(const TomlValue& v) {
    std::vector<double> out;
    for (const auto& e : v.as_array()) out.push_back(e.as_float());
    return out;
}

inline std::vector<std::string> string_array(const TomlValue& v) {
    std::vector<std::string> out;
    for (const auto& e : v.as_array()) out.push_back(e.as_string());
    return out;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const TomlTable& t) {
    ExperimentConfig cfg;

    // [dataset]
    cfg.dataset.kind = t.get_string("dataset", "kind", "synthetic");
    if (cfg.dataset.kind == "synthetic") {
        auto& s = cfg.dataset.synth;
        s.dim = t.get_int("dataset", "dim", s.dim);
        s.task_classes = static_cast<int>(t.get_int("dataset", "task_classes", s.task_classes));
        s.n = t.get_int("dataset", "n", s.n);
        s.seed = static_cast<std::uint64_t>(t.get_int("dataset", "seed", 1));
        s.correlation = t.get_float("dataset", "correlation", s.correlation);
        s.margin = t.get_float("dataset", "margin", s.margin);
        s.num_groups = static_cast<int>(t.get_int("dataset", "num_groups", s.num_groups));
        if (t.has("dataset", "attributes")) {
            s.attributes.clear();
            for (const auto& spec : detail::string_array(t.get("dataset", "attributes"))) {
                auto colon = spec.find(':');
                if (colon == std::string::npos)
                    throw config_error("dataset: attribute '" + spec + "' must be 'name:classes'");
                s.attributes.push_back(
                    {spec.substr(0, colon), static_cast<int>(std::stoll(spec.substr(colon + 1)))});
            }
        }
    } else if (cfg.dataset.kind == "csv") {
        cfg.dataset.csv_path = t.get("dataset", "path").as_string();
        if (!t.has("dataset", "columns")) throw config_error("dataset: csv needs a columns list");
        for (const auto& col : detail::string_array(t.get("dataset", "columns"))) {
            auto colon = col.find(':');
            if (colon == std::string::npos)
                throw config_error("dataset: column '" + col + "' must be 'name:role'");
            cfg.dataset.csv_schema.columns.emplace_back(col.substr(0, colon), col.substr(colon + 1));
        }
    } else {
        throw config_error("dataset: kind must be 'synthetic' or 'csv'");
    }
    cfg.dataset.train_fraction = t.get_float("dataset", "train_fraction", 0.8);
    cfg.dataset.split_seed = static_cast<std::uint64_t>(t.get_int("dataset", "split_seed", 11));

    // [model]
    if (t.has("model", "hidden")) cfg.model.hidden = detail::int_array(t.get("model", "hidden"));
    std::string act = t.get_string("model", "activation", "relu");
    cfg.model.activation = act == "sigmoid" ? Activation::sigmoid : Activation::relu;
    std::string out = t.get_string("model", "output", "softmax");
    cfg.model.output = out == "sigmoid" ? OutputKind::sigmoid : OutputKind::softmax;
    std::string lk = t.get_string("model", "loss", "cross-entropy");
    if (lk == "cross-entropy")
        cfg.model.loss = LossKind::cross_entropy;
    else if (lk == "mse")
        cfg.model.loss = LossKind::mean_squared_error;
    else
        throw config_error("model: loss must be 'cross-entropy' or 'mse'");
    cfg.model.seed = static_cast<std::uint64_t>(t.get_int("model", "seed", 3));

    // [fl]
    cfg.fl.num_clients = static_cast<int>(t.get_int("fl", "clients", 0));
    cfg.fl_clients_per_sample = cfg.fl.num_clients == 0;
    cfg.fl.rounds = static_cast<int>(t.get_int("fl", "rounds", 1));
    cfg.fl.lr = t.get_float("fl", "lr", 0.5);
    cfg.fl.participation = t.get_float("fl", "participation", 1.0);
    cfg.fl.local_epochs = static_cast<int>(t.get_int("fl", "local_epochs", 1));
    cfg.fl.batch_size = t.get_int("fl", "batch_size", 0);
    cfg.fl.seed = static_cast<std::uint64_t>(t.get_int("fl", "seed", 17));
    cfg.fl.loss = cfg.model.loss;
    std::string pm = t.get_string("fl", "partition", "iid");
    if (pm == "iid")
        cfg.partition_mode = PartitionMode::iid;
    else if (pm == "by-group")
        cfg.partition_mode = PartitionMode::by_group;
    else
        throw config_error("fl: partition must be 'iid' or 'by-group'");

    // [defense]
    cfg.defense.kind = defense_kind_from_string(t.get_string("defense", "kind", "none"));
    cfg.defense.param = t.get_float("defense", "param", 0.0);
    if (t.has("defense", "sweep")) cfg.defense.sweep = detail::float_array(t.get("defense", "sweep"));
    cfg.defense.sweep_steps = static_cast<int>(t.get_int("defense", "sweep_steps", 0));
    cfg.defense.sweep_scale = t.get_string("defense", "sweep_scale", "log");
    cfg.defense.mu = t.get_float("defense", "mu", 0.0);
    cfg.defense.clip_bound = t.get_float("defense", "clip", 20.0);
    cfg.defense.defend_layer = static_cast<int>(t.get_int("defense", "defend_layer", -1));
    cfg.defense.outer_iterations = static_cast<int>(t.get_int("defense", "P", 10));
    cfg.defense.models_per_iteration = static_cast<int>(t.get_int("defense", "Q", 5));
    if (t.has("defense", "protect")) cfg.defense.protect = detail::string_array(t.get("defense", "protect"));
    if (t.has("defense", "gamma")) cfg.defense.gamma = detail::float_array(t.get("defense", "gamma"));

    // [zoo]
    cfg.zoo.count = static_cast<int>(t.get_int("zoo", "count", 20));
    if (t.has("zoo", "widths")) cfg.zoo.widths = detail::int_array(t.get("zoo", "widths"));
    cfg.zoo.hidden_layers = static_cast<int>(t.get_int("zoo", "hidden_layers", 3));
    cfg.zoo.linear_members = static_cast<int>(t.get_int("zoo", "linear_members", 0));
    cfg.zoo.epochs = static_cast<int>(t.get_int("zoo", "epochs", 80));
    cfg.zoo.lr = t.get_float("zoo", "lr", 0.01);
    cfg.zoo.batch_size = t.get_int("zoo", "batch_size", 32);

    // [attack]
    if (t.has("attack", "adversaries")) {
        cfg.attack.adversaries.clear();
        for (const auto& a : detail::string_array(t.get("attack", "adversaries")))
            cfg.attack.adversaries.push_back(adversary_kind_from_string(a));
    }
    if (t.has("attack", "rounds")) {
        cfg.attack.eval_rounds.clear();
        for (auto r : detail::int_array(t.get("attack", "rounds")))
            cfg.attack.eval_rounds.push_back(static_cast<int>(r));
    } else {
        // Three-stage default: beginning, middle, and end of training.
        cfg.attack.eval_rounds.clear();
        for (int r : {1, std::max(1, cfg.fl.rounds / 2), cfg.fl.rounds})
            if (std::find(cfg.attack.eval_rounds.begin(), cfg.attack.eval_rounds.end(), r) ==
                cfg.attack.eval_rounds.end())
                cfg.attack.eval_rounds.push_back(r);
    }
    if (t.has("attack", "attributes"))
        cfg.attack.attribute_ids = detail::string_array(t.get("attack", "attributes"));
    else if (t.has("attack", "attribute"))
        cfg.attack.attribute_ids = {t.get("attack", "attribute").as_string()};
    cfg.attack.pool_target_width = t.get_int("attack", "pool_target_width", 1024);
    cfg.attack.hyper.nn_epochs = static_cast<int>(t.get_int("attack", "nn_epochs", 80));
    cfg.attack.hyper.nn_lr = t.get_float("attack", "nn_lr", 0.01);
    cfg.attack.hyper.nn_batch = t.get_int("attack", "nn_batch", 32);
    if (t.has("attack", "stru_widths"))
        cfg.attack.hyper.stru_width_choices = detail::int_array(t.get("attack", "stru_widths"));
    if (t.has("attack", "unkwn_widths"))
        cfg.attack.hyper.unkwn_widths = detail::int_array(t.get("attack", "unkwn_widths"));
    cfg.attack.hyper.svm.c = t.get_float("attack", "svm_c", 1.0);
    cfg.attack.hyper.svm.gamma = t.get_float("attack", "svm_gamma", 0.0);
    cfg.attack.hyper.forest.trees = static_cast<int>(t.get_int("attack", "rf_trees", 120));

    // [reconstruction]
    cfg.reconstruction.cfg.iterations = static_cast<int>(t.get_int("reconstruction", "iterations", 2000));
    cfg.reconstruction.cfg.lr = t.get_float("reconstruction", "lr", 0.1);
    cfg.reconstruction.cfg.tv_weight = t.get_float("reconstruction", "tv_weight", 1e-2);
    cfg.reconstruction.cfg.optimize_label = t.get_bool("reconstruction", "optimize_label", false);
    if (t.has("reconstruction", "image_shape")) {
        auto shape = detail::int_array(t.get("reconstruction", "image_shape"));
        cfg.reconstruction.cfg.image_shape = Shape(shape.begin(), shape.end());
    }
    cfg.reconstruction.client_index = static_cast<int>(t.get_int("reconstruction", "client_index", 0));

    // [convergence] / [zoo] extras
    if (t.has("convergence", "ratios")) cfg.convergence_ratios = detail::float_array(t.get("convergence", "ratios"));
    if (t.has("zoo", "sizes")) {
        cfg.zoo_sizes.clear();
        for (auto s : detail::int_array(t.get("zoo", "sizes"))) cfg.zoo_sizes.push_back(static_cast<int>(s));
    }

    // [output]
    cfg.output_dir = t.get_string("output", "dir", "out");
    if (t.has("output", "seeds")) {
        cfg.seeds.clear();
        for (auto s : detail::int_array(t.get("output", "seeds"))) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    cfg.timing = t.get_bool("output", "timing", false);
    cfg.checkpoints = t.get_bool("output", "checkpoints", false);

    // Default attribute to infer: the protected set, else the first declared
    // dataset attribute.
    if (cfg.attack.attribute_ids.empty()) {
        if (!cfg.defense.protect.empty())
            cfg.attack.attribute_ids = cfg.defense.protect;
        else if (cfg.dataset.kind == "synthetic" && !cfg.dataset.synth.attributes.empty())
            cfg.attack.attribute_ids = {cfg.dataset.synth.attributes.front().id};
        else
            for (const auto& [name, role] : cfg.dataset.csv_schema.columns)
                if (role.rfind("attribute:", 0) == 0) {
                    cfg.attack.attribute_ids = {role.substr(10)};
                    break;
                }
    }

    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    return parse_experiment_config(parse_toml_file(path));
}

}  // namespace recup
