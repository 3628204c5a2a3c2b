#pragma once

// Random forest of CART trees: bootstrap sampling, Gini splits over a sqrt(d)
// feature subset per node, grown until pure, majority vote with ties broken
// toward the smallest class index. Fully deterministic for a given rng.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "recup/errors.hpp"
#include "recup/tensor.hpp"

namespace recup {

struct ForestHyper {
    int trees = 120;
    int min_samples_split = 2;
    int max_depth = 0;  // 0 = unlimited
};

namespace detail {

struct TreeNode {
    int feature = -1;       // -1 = leaf
    double threshold = 0;   // go left when x[feature] <= threshold
    int left = -1, right = -1;
    int label = 0;          // leaf prediction
};

struct Tree {
    std::vector<TreeNode> nodes;

    int predict(const double* x) const {
        int cur = 0;
        while (nodes[static_cast<std::size_t>(cur)].feature >= 0) {
            const auto& n = nodes[static_cast<std::size_t>(cur)];
            cur = x[n.feature] <= n.threshold ? n.left : n.right;
        }
        return nodes[static_cast<std::size_t>(cur)].label;
    }
};

class TreeBuilder {
public:
    TreeBuilder(const Tensor& x, const std::vector<int>& y, int classes, const ForestHyper& hyper, Rng& rng)
        : x_(x), y_(y), classes_(classes), hyper_(hyper), rng_(rng) {
        features_per_split_ = std::max<std::int64_t>(
            1, static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(x.cols())))));
    }

    Tree build(const std::vector<std::int64_t>& sample_rows) {
        Tree t;
        grow(t, sample_rows, 0);
        return t;
    }

private:
    int majority(const std::vector<std::int64_t>& rows) const {
        std::vector<int> counts(static_cast<std::size_t>(classes_), 0);
        for (auto r : rows) ++counts[static_cast<std::size_t>(y_[static_cast<std::size_t>(r)])];
        int best = 0;
        for (int c = 1; c < classes_; ++c)
            if (counts[static_cast<std::size_t>(c)] > counts[static_cast<std::size_t>(best)]) best = c;
        return best;
    }

    static double gini(const std::vector<std::int64_t>& counts, std::int64_t total) {
        if (total == 0) return 0;
        double g = 1.0;
        for (auto c : counts) {
            double p = static_cast<double>(c) / static_cast<double>(total);
            g -= p * p;
        }
        return g;
    }

    int grow(Tree& t, const std::vector<std::int64_t>& rows, int depth) {
        int node_index = static_cast<int>(t.nodes.size());
        t.nodes.emplace_back();

        bool pure = true;
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (y_[static_cast<std::size_t>(rows[i])] != y_[static_cast<std::size_t>(rows[0])]) {
                pure = false;
                break;
            }
        bool depth_stop = hyper_.max_depth > 0 && depth >= hyper_.max_depth;
        if (pure || depth_stop || static_cast<int>(rows.size()) < hyper_.min_samples_split) {
            t.nodes[static_cast<std::size_t>(node_index)].label = majority(rows);
            return node_index;
        }

        auto feats = rng_.sample_without_replacement(x_.cols(), features_per_split_);
        std::sort(feats.begin(), feats.end());

        double best_gain = 0;
        int best_feature = -1;
        double best_threshold = 0;
        std::vector<std::int64_t> total_counts(static_cast<std::size_t>(classes_), 0);
        for (auto r : rows) ++total_counts[static_cast<std::size_t>(y_[static_cast<std::size_t>(r)])];
        double parent_gini = gini(total_counts, static_cast<std::int64_t>(rows.size()));

        std::vector<std::pair<double, int>> vals(rows.size());
        for (auto f : feats) {
            for (std::size_t i = 0; i < rows.size(); ++i)
                vals[i] = {x_.at(rows[i], f), y_[static_cast<std::size_t>(rows[i])]};
            std::sort(vals.begin(), vals.end());
            std::vector<std::int64_t> left_counts(static_cast<std::size_t>(classes_), 0);
            std::int64_t left_n = 0, total_n = static_cast<std::int64_t>(rows.size());
            for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
                ++left_counts[static_cast<std::size_t>(vals[i].second)];
                ++left_n;
                if (vals[i].first == vals[i + 1].first) continue;
                std::vector<std::int64_t> right_counts(static_cast<std::size_t>(classes_));
                for (int c = 0; c < classes_; ++c)
                    right_counts[static_cast<std::size_t>(c)] =
                        total_counts[static_cast<std::size_t>(c)] - left_counts[static_cast<std::size_t>(c)];
                double wl = static_cast<double>(left_n) / static_cast<double>(total_n);
                double split_gini = wl * gini(left_counts, left_n) + (1 - wl) * gini(right_counts, total_n - left_n);
                double gain = parent_gini - split_gini;
                if (gain > best_gain + 1e-15) {
                    best_gain = gain;
                    best_feature = static_cast<int>(f);
                    best_threshold = 0.5 * (vals[i].first + vals[i + 1].first);
                }
            }
        }

        if (best_feature < 0) {
            t.nodes[static_cast<std::size_t>(node_index)].label = majority(rows);
            return node_index;
        }

        std::vector<std::int64_t> left_rows, right_rows;
        for (auto r : rows)
            (x_.at(r, best_feature) <= best_threshold ? left_rows : right_rows).push_back(r);
        if (left_rows.empty() || right_rows.empty()) {
            t.nodes[static_cast<std::size_t>(node_index)].label = majority(rows);
            return node_index;
        }
        int left = grow(t, left_rows, depth + 1);
        int right = grow(t, right_rows, depth + 1);
        auto& n = t.nodes[static_cast<std::size_t>(node_index)];
        n.feature = best_feature;
        n.threshold = best_threshold;
        n.left = left;
        n.right = right;
        return node_index;
    }

    const Tensor& x_;
    const std::vector<int>& y_;
    int classes_;
    ForestHyper hyper_;
    Rng& rng_;
    std::int64_t features_per_split_ = 1;
};

}  // namespace detail

struct Forest {
    std::vector<detail::Tree> trees;
    int num_classes = 2;

    int tree_vote(std::size_t tree_index, const double* x) const { return trees[tree_index].predict(x); }

    int predict(const double* x) const {
        std::vector<int> votes(static_cast<std::size_t>(num_classes), 0);
        for (const auto& t : trees) ++votes[static_cast<std::size_t>(t.predict(x))];
        int best = 0;
        for (int c = 1; c < num_classes; ++c)
            if (votes[static_cast<std::size_t>(c)] > votes[static_cast<std::size_t>(best)]) best = c;
        return best;
    }
};

inline Forest train_forest(const Tensor& x, const std::vector<int>& y, int num_classes, const ForestHyper& hyper,
                           Rng& rng) {
    if (x.rows() != static_cast<std::int64_t>(y.size())) throw config_error("train_forest: feature/label mismatch");
    if (hyper.trees < 1) throw config_error("train_forest: need at least one tree");
    Forest forest;
    forest.num_classes = num_classes;
    std::int64_t n = x.rows();
    for (int t = 0; t < hyper.trees; ++t) {
        Rng tree_rng = rng.fork(static_cast<std::uint64_t>(t) + 1);
        std::vector<std::int64_t> bootstrap(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) bootstrap[static_cast<std::size_t>(i)] = tree_rng.uniform_int(n);
        detail::TreeBuilder builder(x, y, num_classes, hyper, tree_rng);
        forest.trees.push_back(builder.build(bootstrap));
    }
    return forest;
}

}  // namespace recup
