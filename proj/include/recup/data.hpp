#pragma once

// Dataset provisioning: synthetic attribute-labeled generation, CSV tabular
// ingestion with train-statistics encoding, and seeded splitting.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "recup/errors.hpp"
#include "recup/tensor.hpp"

namespace recup {

struct AttributeInfo {
    std::string id;
    int num_classes = 2;
};

struct LabeledSample {
    Tensor features;  // rank-1, or rank-2 for image-like inputs
    int task_label = 0;
    std::map<std::string, int> attributes;
    std::string group;  // optional identity key
};

struct DatasetMeta {
    Shape feature_shape;
    int task_classes = 2;
    std::vector<AttributeInfo> attributes;

    std::int64_t feature_dim() const { return shape_numel(feature_shape); }
    int attribute_classes(const std::string& id) const {
        for (const auto& a : attributes)
            if (a.id == id) return a.num_classes;
        throw config_error("unknown attribute '" + id + "'");
    }
};

struct Dataset {
    DatasetMeta meta;
    std::vector<LabeledSample> samples;

    std::size_t size() const { return samples.size(); }

    // Features stacked into one [n, d] matrix.
    Tensor feature_matrix() const {
        std::int64_t d = meta.feature_dim();
        Tensor x({static_cast<std::int64_t>(samples.size()), std::max<std::int64_t>(d, 1)});
        for (std::size_t i = 0; i < samples.size(); ++i)
            for (std::int64_t j = 0; j < d; ++j) x.at(static_cast<std::int64_t>(i), j) = samples[i].features[j];
        return x;
    }
    std::vector<int> task_labels() const {
        std::vector<int> y;
        y.reserve(samples.size());
        for (const auto& s : samples) y.push_back(s.task_label);
        return y;
    }
    std::vector<int> attribute_labels(const std::string& id) const {
        std::vector<int> y;
        y.reserve(samples.size());
        for (const auto& s : samples) {
            auto it = s.attributes.find(id);
            if (it == s.attributes.end()) throw config_error("sample missing attribute '" + id + "'");
            y.push_back(it->second);
        }
        return y;
    }
};

// ---------------------------------------------------------------------------
// Synthetic generator.
//
// Features are i.i.d. standard normal. The feature vector is cut into one
// block per label: the task label comes from a signed linear rule on its
// block, each attribute from a positive quadratic rule on its own block
// (quadratic so the signal survives the magnitude pooling the adversary
// applies to gradients). Class thresholds are empirical quantiles of the rule
// score over a fixed calibration stream, so the whole rule is a pure function
// of the generator parameters. The correlation knob replaces the task label with a function
// of the first attribute at the given rate; at zero, blocks are disjoint and
// the labels are exactly independent.
// ---------------------------------------------------------------------------

struct SynthSpec {
    std::int64_t dim = 16;
    int task_classes = 2;
    std::vector<AttributeInfo> attributes = {{"attr_a", 2}};
    double correlation = 0.0;
    std::int64_t n = 256;
    std::uint64_t seed = 1;
    int num_groups = 0;  // 0 = no group keys
    // Rejection margin around class thresholds, in units of the rule score's
    // calibration standard deviation. 0 keeps every draw; positive values
    // yield cleanly separable labels.
    double margin = 0.0;

    void validate() const {
        if (dim < static_cast<std::int64_t>(attributes.size()) + 1)
            throw config_error("synth: dim must allow one feature block per label");
        if (task_classes < 2) throw config_error("synth: task_classes must be >= 2");
        for (const auto& a : attributes)
            if (a.num_classes < 2) throw config_error("synth: attribute '" + a.id + "' needs >= 2 classes");
        if (correlation < 0.0 || correlation > 1.0) throw config_error("synth: correlation must be in [0,1]");
        if (n < 0) throw config_error("synth: n must be >= 0");
        if (margin < 0.0 || margin > 2.0) throw config_error("synth: margin must be in [0,2]");
    }
};

namespace detail {

struct SynthRule {
    std::vector<std::int64_t> block;     // feature indices
    std::vector<double> weights;         // per block feature
    std::vector<double> thresholds;      // ascending, classes-1 entries
    double score_sd = 1.0;               // calibration spread, for margins
    bool quadratic = false;

    double score(const Tensor& x) const {
        double s = 0;
        for (std::size_t i = 0; i < block.size(); ++i) {
            double v = x[block[i]];
            s += weights[i] * (quadratic ? v * v : v);
        }
        return s;
    }
    int classify(const Tensor& x) const {
        double s = score(x);
        int c = 0;
        for (double t : thresholds)
            if (s > t) ++c;
        return c;
    }
    bool near_threshold(const Tensor& x, double margin) const {
        if (margin <= 0) return false;
        double s = score(x);
        for (double t : thresholds)
            if (std::abs(s - t) < margin * score_sd) return true;
        return false;
    }
};

}  // namespace detail

// The generating rules, reconstructable from the SynthSpec alone; serves as the
// recoverability oracle for attribute labels.
class SynthOracle {
public:
    explicit SynthOracle(const SynthSpec& spec) : spec_(spec) {
        spec.validate();
        std::size_t nblocks = spec.attributes.size() + 1;
        std::vector<std::vector<std::int64_t>> blocks(nblocks);
        for (std::int64_t f = 0; f < spec.dim; ++f) blocks[static_cast<std::size_t>(f) % nblocks].push_back(f);

        Rng rule_rng = Rng(spec.seed).fork(0xA1);
        task_ = make_rule(blocks[0], spec.task_classes, false, rule_rng);
        for (std::size_t m = 0; m < spec.attributes.size(); ++m)
            attr_.push_back(make_rule(blocks[m + 1], spec.attributes[m].num_classes, true, rule_rng));
    }

    int task_class(const Tensor& x) const { return task_.classify(x); }
    int attribute_class(std::size_t attr_index, const Tensor& x) const { return attr_.at(attr_index).classify(x); }

    // True when every rule score clears the rejection margin.
    bool clears_margin(const Tensor& x, double margin) const {
        if (task_.near_threshold(x, margin)) return false;
        for (const auto& r : attr_)
            if (r.near_threshold(x, margin)) return false;
        return true;
    }

private:
    detail::SynthRule make_rule(std::vector<std::int64_t> block, int classes, bool quadratic, Rng& rng) {
        detail::SynthRule r;
        r.block = std::move(block);
        r.quadratic = quadratic;
        for (std::size_t i = 0; i < r.block.size(); ++i) {
            double w = rng.uniform(0.5, 1.5);
            if (!quadratic && rng.uniform() < 0.5) w = -w;
            r.weights.push_back(w);
        }
        // Empirical quantile thresholds over a fixed calibration stream.
        const int calib_n = 4096;
        Rng calib = Rng(spec_.seed).fork(0xC0);
        std::vector<double> scores(calib_n);
        Tensor x({spec_.dim});
        for (int i = 0; i < calib_n; ++i) {
            for (std::int64_t f = 0; f < spec_.dim; ++f) x[f] = calib.normal();
            scores[static_cast<std::size_t>(i)] = r.score(x);
        }
        std::sort(scores.begin(), scores.end());
        for (int c = 1; c < classes; ++c)
            r.thresholds.push_back(scores[static_cast<std::size_t>(calib_n * c / classes)]);
        double mean = 0;
        for (double s : scores) mean += s;
        mean /= calib_n;
        double var = 0;
        for (double s : scores) var += (s - mean) * (s - mean);
        r.score_sd = std::sqrt(var / calib_n);
        return r;
    }

    SynthSpec spec_;
    detail::SynthRule task_;
    std::vector<detail::SynthRule> attr_;
};

inline Dataset synth_generate(const SynthSpec& spec) {
    spec.validate();
    SynthOracle oracle(spec);
    Dataset ds;
    ds.meta.feature_shape = {spec.dim};
    ds.meta.task_classes = spec.task_classes;
    ds.meta.attributes = spec.attributes;

    Rng sample_rng = Rng(spec.seed).fork(0x5A);
    Rng mix_rng = Rng(spec.seed).fork(0x31);
    for (std::int64_t i = 0; i < spec.n; ++i) {
        LabeledSample s;
        s.features = Tensor({spec.dim});
        int attempts = 0;
        do {
            if (++attempts > 100000) throw config_error("synth: margin " + std::to_string(spec.margin) +
                                                        " rejects almost every draw");
            for (std::int64_t f = 0; f < spec.dim; ++f) s.features[f] = sample_rng.normal();
        } while (!oracle.clears_margin(s.features, spec.margin));
        for (std::size_t m = 0; m < spec.attributes.size(); ++m)
            s.attributes[spec.attributes[m].id] = oracle.attribute_class(m, s.features);
        if (!spec.attributes.empty() && mix_rng.uniform() < spec.correlation)
            s.task_label = s.attributes.at(spec.attributes[0].id) % spec.task_classes;
        else
            s.task_label = oracle.task_class(s.features);
        if (spec.num_groups > 0) s.group = "g" + std::to_string(i % spec.num_groups);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Seeded split: disjoint, exhaustive, reproducible.
// ---------------------------------------------------------------------------

inline std::pair<Dataset, Dataset> split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
    if (train_fraction <= 0.0 || train_fraction >= 1.0) throw config_error("split: fraction must be in (0,1)");
    std::vector<std::size_t> idx(ds.samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    n_train = std::min(n_train, idx.size());
    Dataset train{ds.meta, {}}, test{ds.meta, {}};
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < n_train ? train : test).samples.push_back(ds.samples[idx[i]]);
    return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// CSV ingestion.
//
// Schema maps header names to roles: feature-numeric | feature-categorical |
// task | attribute:<id> | group | ignore. Numeric features are min-max scaled
// to [0,1] with statistics from the train split only; categorical features
// are one-hot encoded over the train split's categories (sorted) plus a
// trailing "other" slot that absorbs unseen values at test time. Feature
// columns are laid out in schema order.
// ---------------------------------------------------------------------------

struct CsvSchema {
    // (column name, role string) in the order features should be encoded.
    std::vector<std::pair<std::string, std::string>> columns;
};

struct CsvDataset {
    Dataset train;
    Dataset test;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (char c : line) {
        if (c == '"') {
            quoted = !quoted;
        } else if (c == ',' && !quoted) {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    for (auto& c : cells) {
        while (!c.empty() && (c.front() == ' ' || c.front() == '\t')) c.erase(c.begin());
        while (!c.empty() && (c.back() == ' ' || c.back() == '\t' || c.back() == '\r')) c.pop_back();
    }
    return cells;
}

}  // namespace detail

inline CsvDataset load_csv(const std::string& path, const CsvSchema& schema, double train_fraction,
                           std::uint64_t split_seed) {
    std::ifstream in(path);
    if (!in) throw config_error("load_csv: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw config_error("load_csv: '" + path + "' is empty");
    auto header = detail::split_csv_line(line);

    struct Col {
        std::size_t index;
        std::string name;
        std::string role;   // "numeric", "categorical", "task", "attribute", "group"
        std::string attr_id;
    };
    std::vector<Col> cols;
    for (const auto& [name, role] : schema.columns) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw config_error("load_csv: column '" + name + "' not found in header");
        Col c;
        c.index = static_cast<std::size_t>(it - header.begin());
        c.name = name;
        if (role == "feature-numeric")
            c.role = "numeric";
        else if (role == "feature-categorical")
            c.role = "categorical";
        else if (role == "task")
            c.role = "task";
        else if (role.rfind("attribute:", 0) == 0) {
            c.role = "attribute";
            c.attr_id = role.substr(10);
        } else if (role == "group")
            c.role = "group";
        else if (role == "ignore")
            c.role = "ignore";
        else
            throw config_error("load_csv: unknown role '" + role + "' for column '" + name + "'");
        cols.push_back(std::move(c));
    }
    bool has_task = std::any_of(cols.begin(), cols.end(), [](const Col& c) { return c.role == "task"; });
    if (!has_task) throw config_error("load_csv: schema declares no task column");

    std::vector<std::vector<std::string>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw config_error("load_csv: row " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                               " cells, expected " + std::to_string(header.size()));
        rows.push_back(std::move(cells));
    }

    // Seeded split over row indices; statistics and category sets come from
    // the train rows only.
    std::vector<std::size_t> order(rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(split_seed);
    rng.shuffle(order);
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(rows.size())));
    n_train = std::min(n_train, rows.size());
    std::vector<bool> is_train(rows.size(), false);
    for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;

    auto parse_numeric = [&](const std::string& cell, std::size_t row, const std::string& col) {
        try {
            std::size_t pos = 0;
            double v = std::stod(cell, &pos);
            if (pos != cell.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw config_error("load_csv: unparseable numeric cell at row " + std::to_string(row + 2) + " column '" +
                               col + "': '" + cell + "'");
        }
    };

    std::map<std::string, std::pair<double, double>> numeric_range;       // col -> (min,max) on train
    std::map<std::string, std::vector<std::string>> categories;          // col -> sorted train categories
    std::map<std::string, std::vector<std::string>> class_values;        // task/attr key -> sorted train values
    for (const auto& c : cols) {
        if (c.role == "numeric") {
            double lo = 0, hi = 0;
            bool first = true;
            for (std::size_t r = 0; r < rows.size(); ++r) {
                if (!is_train[r]) continue;
                double v = parse_numeric(rows[r][c.index], r, c.name);
                lo = first ? v : std::min(lo, v);
                hi = first ? v : std::max(hi, v);
                first = false;
            }
            numeric_range[c.name] = {lo, hi};
        } else if (c.role == "categorical" || c.role == "task" || c.role == "attribute") {
            std::set<std::string> vals;
            for (std::size_t r = 0; r < rows.size(); ++r)
                if (is_train[r]) vals.insert(rows[r][c.index]);
            std::vector<std::string> sorted(vals.begin(), vals.end());
            if (c.role == "categorical")
                categories[c.name] = sorted;
            else
                class_values[c.role == "task" ? "#task" : c.attr_id] = sorted;
        }
    }

    std::int64_t dim = 0;
    for (const auto& c : cols) {
        if (c.role == "numeric") dim += 1;
        if (c.role == "categorical") dim += static_cast<std::int64_t>(categories[c.name].size()) + 1;
    }

    DatasetMeta meta;
    meta.feature_shape = {std::max<std::int64_t>(dim, 1)};
    meta.task_classes = static_cast<int>(class_values["#task"].size());
    for (const auto& c : cols)
        if (c.role == "attribute")
            meta.attributes.push_back({c.attr_id, static_cast<int>(class_values[c.attr_id].size())});

    auto class_index = [&](const std::string& key, const std::string& value, std::size_t row,
                           const std::string& col) {
        const auto& vals = class_values.at(key);
        auto it = std::lower_bound(vals.begin(), vals.end(), value);
        if (it == vals.end() || *it != value)
            throw config_error("load_csv: value '" + value + "' at row " + std::to_string(row + 2) + " column '" +
                               col + "' does not occur in the train split");
        return static_cast<int>(it - vals.begin());
    };

    CsvDataset out;
    out.train.meta = meta;
    out.test.meta = meta;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        LabeledSample s;
        s.features = Tensor({std::max<std::int64_t>(dim, 1)});
        std::int64_t f = 0;
        for (const auto& c : cols) {
            const std::string& cell = rows[r][c.index];
            if (c.role == "numeric") {
                auto [lo, hi] = numeric_range[c.name];
                double v = parse_numeric(cell, r, c.name);
                s.features[f++] = hi > lo ? (v - lo) / (hi - lo) : 0.0;
            } else if (c.role == "categorical") {
                const auto& cats = categories[c.name];
                auto it = std::lower_bound(cats.begin(), cats.end(), cell);
                std::size_t slot = (it != cats.end() && *it == cell) ? static_cast<std::size_t>(it - cats.begin())
                                                                     : cats.size();  // "other"
                s.features[f + static_cast<std::int64_t>(slot)] = 1.0;
                f += static_cast<std::int64_t>(cats.size()) + 1;
            } else if (c.role == "task") {
                s.task_label = class_index("#task", cell, r, c.name);
            } else if (c.role == "attribute") {
                s.attributes[c.attr_id] = class_index(c.attr_id, cell, r, c.name);
            } else if (c.role == "group") {
                s.group = cell;
            }
        }
        (is_train[r] ? out.train : out.test).samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace recup
