#pragma once

// Magnitude max-pooling of model updates, the dimensionality reduction both
// the adversary pipeline and the defender models apply before classifying.
// Per layer: flatten, 1-D max over absolute values with non-overlapping
// windows (last partial window kept), then concatenate across layers.

#include <cstdint>
#include <vector>

#include "recup/fl.hpp"
#include "recup/graph.hpp"
#include "recup/tensor.hpp"

namespace recup {

struct PooledFeatures {
    Tensor values;  // rank-1
    std::int64_t window = 1;
    int source_client = 0;
    int source_round = 0;
};

inline std::int64_t pooled_width(const std::vector<std::int64_t>& layer_sizes, std::int64_t window) {
    std::int64_t w = 0;
    for (auto s : layer_sizes) w += (s + window - 1) / window;
    return w;
}

inline std::vector<std::int64_t> update_layer_sizes(const ModelUpdate& u) {
    std::vector<std::int64_t> sizes;
    for (const auto& t : u.layers) sizes.push_back(t.numel());
    return sizes;
}

// Window sized so the pooled width lands near 1024 features; small updates
// pass through with window 1.
inline std::int64_t default_pool_window(std::int64_t total_size, std::int64_t target_width = 1024) {
    return std::max<std::int64_t>(1, (total_size + target_width - 1) / target_width);
}

inline PooledFeatures pool_gradients(const ModelUpdate& u, std::int64_t window) {
    if (window < 1) throw config_error("pool_gradients: window must be >= 1");
    PooledFeatures out;
    out.window = window;
    out.source_client = u.client_id;
    out.source_round = u.round;
    auto sizes = update_layer_sizes(u);
    out.values = Tensor({pooled_width(sizes, window)});
    std::int64_t f = 0;
    for (const auto& layer : u.layers) {
        std::int64_t n = layer.numel();
        for (std::int64_t lo = 0; lo < n; lo += window) {
            std::int64_t hi = std::min(n, lo + window);
            double best = std::abs(layer[lo]);
            for (std::int64_t i = lo + 1; i < hi; ++i) best = std::max(best, std::abs(layer[i]));
            out.values[f++] = best;
        }
    }
    return out;
}

// Graph fragment computing the same pooled features from a flat update leaf,
// so defender input-gradients land in raw update space.
inline Expr pooled_features_expr(const Expr& flat_update, const std::vector<std::int64_t>& layer_sizes,
                                 std::int64_t window) {
    std::vector<Expr> parts;
    std::int64_t off = 0;
    for (auto s : layer_sizes) {
        parts.push_back(maxpool1d(abs(slice(flat_update, off, s)), window));
        off += s;
    }
    Expr features = concat(parts);
    return reshape(features, {1, features.shape()[0]});
}

}  // namespace recup
