#pragma once

// Defensive transformations applied to a model update before sharing:
// norm clipping, DP noise (Gaussian / Laplace), gradient sparsification,
// Soteria-style defend-layer pruning, the meta-train/meta-test gradient
// perturbation, and the plain FGSM variants it is compared against.
//
// Every defense is a pure function of (update, configuration, rng state).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "recup/errors.hpp"
#include "recup/fl.hpp"
#include "recup/graph.hpp"
#include "recup/model.hpp"
#include "recup/pooling.hpp"
#include "recup/tensor.hpp"

namespace recup {

// ---------------------------------------------------------------------------
// Clipping and DP noise
// ---------------------------------------------------------------------------

struct DpConfig {
    double mu = 0.0;
    double noise = 0.0;       // sigma for Gaussian, scale b for Laplace
    double clip_bound = 0.0;  // B

    void validate() const {
        if (noise < 0) throw config_error("dp: noise parameter must be >= 0");
        if (clip_bound <= 0) throw config_error("dp: clip bound must be positive");
    }
};

// Clip(u, B) = u / max(1, ||u||_2 / B) over the whole update.
inline ModelUpdate clip(const ModelUpdate& u, double bound) {
    if (bound <= 0) throw config_error("clip: bound must be positive");
    double norm = 0;
    for (const auto& t : u.layers)
        for (std::int64_t i = 0; i < t.numel(); ++i) norm += t[i] * t[i];
    norm = std::sqrt(norm);
    double scale = 1.0 / std::max(1.0, norm / bound);
    ModelUpdate out = u;
    for (auto& t : out.layers)
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] *= scale;
    return out;
}

inline ModelUpdate dp_gaussian(const ModelUpdate& u, const DpConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelUpdate out = clip(u, cfg.clip_bound);
    if (cfg.noise == 0.0 && cfg.mu == 0.0) return out;
    for (auto& t : out.layers)
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] += rng.normal(cfg.mu, cfg.noise);
    return out;
}

inline ModelUpdate dp_laplace(const ModelUpdate& u, const DpConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelUpdate out = clip(u, cfg.clip_bound);
    if (cfg.noise == 0.0 && cfg.mu == 0.0) return out;
    for (auto& t : out.layers)
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] += rng.laplace(cfg.mu, cfg.noise);
    return out;
}

// ---------------------------------------------------------------------------
// Gradient sparsification: zero the floor(p*n) smallest-magnitude elements
// across the whole update; ties broken by flat index ascending.
// ---------------------------------------------------------------------------

inline ModelUpdate sparsify(const ModelUpdate& u, double rate) {
    if (rate <= 0.0 || rate >= 1.0) throw config_error("sparsify: rate must be strictly inside (0,1)");
    Tensor flat = flatten_update(u);
    std::int64_t n = flat.numel();
    auto zero_count = static_cast<std::int64_t>(std::floor(rate * static_cast<double>(n)));
    if (zero_count == 0) return u;

    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    std::nth_element(idx.begin(), idx.begin() + zero_count - 1, idx.end(), [&](std::int64_t a, std::int64_t b) {
        double ma = std::abs(flat[a]), mb = std::abs(flat[b]);
        return ma < mb || (ma == mb && a < b);
    });
    for (std::int64_t i = 0; i < zero_count; ++i) flat[idx[static_cast<std::size_t>(i)]] = 0.0;
    ModelUpdate out = u;
    out.layers = unflatten_like(flat, u.layers);
    return out;
}

// ---------------------------------------------------------------------------
// Soteria-style defend-layer pruning.
//
// The defend layer is a fully-connected layer of the global model; its input
// representation r has width l. Element impact is |r_i| / max(||d r_i / d x||_2,
// 1e-12), averaged over the local batch. The gradient rows of the defend
// layer's weight matrix that correspond to the ceil(p*l) largest-impact
// representation elements are zeroed; everything else is untouched.
// ---------------------------------------------------------------------------

struct SoteriaConfig {
    double rate = 0.5;       // p
    int defend_layer = -1;   // weight-layer index; -1 = last layer

    void validate() const {
        if (rate <= 0.0 || rate >= 1.0) throw config_error("soteria: rate must be strictly inside (0,1)");
    }
};

inline ModelUpdate soteria(const ModelUpdate& u, const MlpSpec& spec, const MlpParams& weights, const Tensor& local_x,
                           const SoteriaConfig& cfg) {
    cfg.validate();
    int layer_count = static_cast<int>(spec.widths.size());
    int defend = cfg.defend_layer < 0 ? layer_count - 1 : cfg.defend_layer;
    if (defend < 0 || defend >= layer_count)
        throw config_error("soteria: defend layer " + std::to_string(defend) + " outside model with " +
                           std::to_string(layer_count) + " layers");
    std::int64_t l = defend == 0 ? spec.input_dim : spec.widths[static_cast<std::size_t>(defend) - 1];

    // Forward graph to the defend layer's input representation for one sample.
    Expr x = leaf("x", {1, spec.input_dim});
    Expr h = x;
    for (int layer = 0; layer < defend; ++layer) {
        Expr z = matmul(h, constant(weights[static_cast<std::size_t>(2 * layer)])) +
                 constant(weights[static_cast<std::size_t>(2 * layer) + 1]);
        h = spec.activation == Activation::relu ? relu(z) : sigmoid(z);
    }

    std::vector<double> impact(static_cast<std::size_t>(l), 0.0);
    std::int64_t batch = local_x.rows();
    if (batch == 0) throw usage_error("soteria: empty local data");
    for (std::int64_t row = 0; row < batch; ++row) {
        Tensor xr({1, spec.input_dim});
        for (std::int64_t j = 0; j < spec.input_dim; ++j) xr.at(0, j) = local_x.at(row, j);
        Binding binding;
        bind_leaf(binding, x, xr);
        Evaluation ev(binding);
        Tensor r = ev.value(h);
        for (std::int64_t i = 0; i < l; ++i) {
            Tensor pick({static_cast<std::int64_t>(l), 1});
            pick[i] = 1.0;
            Expr r_i = sum_all(matmul(h, constant(pick)));
            auto grads = gradients(r_i, {x});
            Tensor gx = ev.value(grad_of(grads, x));
            impact[static_cast<std::size_t>(i)] += std::abs(r[i]) / std::max(gx.l2_norm(), 1e-12);
        }
    }

    auto prune_count = static_cast<std::int64_t>(std::ceil(cfg.rate * static_cast<double>(l)));
    std::vector<std::int64_t> order(static_cast<std::size_t>(l));
    for (std::int64_t i = 0; i < l; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        double ia = impact[static_cast<std::size_t>(a)], ib = impact[static_cast<std::size_t>(b)];
        return ia > ib || (ia == ib && a < b);
    });

    ModelUpdate out = u;
    Tensor& wgrad = out.layers[static_cast<std::size_t>(2 * defend)];
    if (wgrad.shape() != Shape{l, spec.widths[static_cast<std::size_t>(defend)]})
        throw config_error("soteria: update layer shapes do not match the model spec");
    for (std::int64_t k = 0; k < prune_count; ++k) {
        std::int64_t row = order[static_cast<std::size_t>(k)];
        for (std::int64_t j = 0; j < wgrad.shape()[1]; ++j) wgrad.at(row, j) = 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Meta-train / meta-test gradient perturbation
// ---------------------------------------------------------------------------

struct AttributeSpec {
    std::string attribute_id;
    int num_classes = 2;
    double weight = 1.0;  // gamma, normalized across a client's attributes
};

// Normalizes protection weights to sum to 1; zero-weight attributes stay zero.
inline std::vector<double> normalize_weights(const std::vector<AttributeSpec>& attrs) {
    double total = 0;
    for (const auto& a : attrs) {
        if (a.weight < 0) throw config_error("attribute '" + a.attribute_id + "': weight must be >= 0");
        total += a.weight;
    }
    if (total <= 0) throw config_error("attribute weights sum to zero");
    std::vector<double> out;
    for (const auto& a : attrs) out.push_back(a.weight / total);
    return out;
}

struct RecupConfig {
    double epsilon = 0.05;      // perturbation budget per outer iteration
    int outer_iterations = 10;  // P
    int models_per_iteration = 5;  // Q: Q-1 meta-train members + 1 meta-test member

    void validate() const {
        if (epsilon < 0) throw config_error("recup: epsilon must be >= 0");
        if (outer_iterations < 1) throw config_error("recup: P must be >= 1");
        if (models_per_iteration < 2) throw config_error("recup: Q must be >= 2");
    }
};

// Frozen defender model evaluated on the pooled features of a flat update;
// exposes the loss gradient in raw update space.
class DefenderGraph {
public:
    DefenderGraph(const ZooMember& member, const std::vector<std::int64_t>& layer_sizes, std::int64_t window) {
        update_ = leaf("update", {pooled_total(layer_sizes)});
        Expr features = pooled_features_expr(update_, layer_sizes, window);
        if (features.shape()[1] != member.spec.input_dim)
            throw config_error("defender input width " + std::to_string(member.spec.input_dim) +
                               " does not match pooled width " + std::to_string(features.shape()[1]));
        std::vector<Expr> params;
        for (const auto& w : member.weights) params.push_back(constant(w));
        MlpGraph g = build_mlp_on(member.spec, features, std::move(params));
        label_ = g.target;
        loss_ = g.loss_ce;
        grad_ = grad_of(gradients(loss_, {update_}), update_);
        classes_ = member.spec.num_classes();
    }

    double loss_at(const Tensor& flat_update, int label) const {
        Binding b = binding(flat_update, label);
        return eval(loss_, b).item();
    }

    Tensor grad_at(const Tensor& flat_update, int label) const {
        Binding b = binding(flat_update, label);
        return eval(grad_, b);
    }

    std::pair<double, Tensor> loss_and_grad_at(const Tensor& flat_update, int label) const {
        Binding b = binding(flat_update, label);
        Evaluation ev(b);
        return {ev.value(loss_).item(), ev.value(grad_)};
    }

private:
    static std::int64_t pooled_total(const std::vector<std::int64_t>& sizes) {
        std::int64_t n = 0;
        for (auto s : sizes) n += s;
        return n;
    }
    Binding binding(const Tensor& flat_update, int label) const {
        Binding b;
        bind_leaf(b, update_, flat_update);
        bind_leaf(b, label_, one_hot({label}, classes_));
        return b;
    }

    Expr update_, label_, loss_, grad_;
    std::int64_t classes_ = 0;
};

struct PerturbationDelta {
    std::vector<Tensor> layers;

    double inf_norm() const {
        double m = 0;
        for (const auto& t : layers) m = std::max(m, t.inf_norm());
        return m;
    }
};

// Per-outer-iteration diagnostics: cosine between the accumulated meta-train
// movement and the kept meta-test delta. Zero-norm inputs are reported as
// an absent value rather than NaN.
inline std::optional<double> alignment_diagnostic(const Tensor& meta_train_delta, const Tensor& meta_test_delta) {
    if (meta_train_delta.shape() != meta_test_delta.shape())
        throw usage_error("alignment_diagnostic: shape mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t i = 0; i < meta_train_delta.numel(); ++i) {
        dot += meta_train_delta[i] * meta_test_delta[i];
        na += meta_train_delta[i] * meta_train_delta[i];
        nb += meta_test_delta[i] * meta_test_delta[i];
    }
    if (na == 0.0 || nb == 0.0) return std::nullopt;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct RecupTrace {
    std::vector<std::optional<double>> train_test_alignment;  // one entry per outer iteration
};

namespace detail {
inline void add_scaled_sign(Tensor& x, const Tensor& g, double step) {
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
        x[i] += step * s;
    }
}

inline void check_zoo(const ModelZoo& zoo, const ModelUpdate& u, int q) {
    if (static_cast<int>(zoo.members.size()) < q)
        throw config_error("zoo holds " + std::to_string(zoo.members.size()) + " members, need Q=" +
                           std::to_string(q));
    auto sizes = update_layer_sizes(u);
    if (pooled_width(sizes, zoo.pool_window) != zoo.feature_dim)
        throw config_error("zoo feature_dim " + std::to_string(zoo.feature_dim) +
                           " does not match pooled update width " +
                           std::to_string(pooled_width(sizes, zoo.pool_window)));
}
}  // namespace detail

// The two-step perturbation for one attribute. Each outer iteration samples Q
// zoo members without replacement, walks Q-1 sign steps of size eps/Q from the
// current accumulated state (meta-train), takes one sign step of size eps
// against the held-out member's cross-entropy (meta-test), and keeps only that
// meta-test delta. The returned delta therefore has infinity norm at most P*eps.
inline PerturbationDelta recup_single(const ModelUpdate& u, const AttributeSpec& attribute, const ModelZoo& zoo,
                                      const RecupConfig& cfg, int true_label, Rng& rng,
                                      RecupTrace* trace = nullptr) {
    cfg.validate();
    detail::check_zoo(zoo, u, cfg.models_per_iteration);
    if (true_label < 0 || true_label >= static_cast<int>(zoo.num_classes))
        throw config_error("attribute '" + attribute.attribute_id + "': label " + std::to_string(true_label) +
                           " outside " + std::to_string(zoo.num_classes) + " classes");

    auto sizes = update_layer_sizes(u);
    std::map<std::int64_t, DefenderGraph> graphs;
    auto graph_for = [&](std::int64_t member) -> const DefenderGraph& {
        auto it = graphs.find(member);
        if (it == graphs.end())
            it = graphs.emplace(member, DefenderGraph(zoo.members[static_cast<std::size_t>(member)], sizes,
                                                      zoo.pool_window)).first;
        return it->second;
    };

    const Tensor original = flatten_update(u);
    Tensor state = original;
    int q_total = cfg.models_per_iteration;
    double train_step = cfg.epsilon / static_cast<double>(q_total);

    for (int p = 0; p < cfg.outer_iterations; ++p) {
        auto picks = rng.sample_without_replacement(static_cast<std::int64_t>(zoo.members.size()), q_total);
        Tensor iter_start = state;
        for (int q = 0; q + 1 < q_total; ++q) {
            Tensor g = graph_for(picks[static_cast<std::size_t>(q)]).grad_at(state, true_label);
            detail::add_scaled_sign(state, g, train_step);
        }
        Tensor g = graph_for(picks[static_cast<std::size_t>(q_total - 1)]).grad_at(state, true_label);
        Tensor test_delta(state.shape());
        detail::add_scaled_sign(test_delta, g, cfg.epsilon);
        if (trace) {
            Tensor train_delta(state.shape());
            for (std::int64_t i = 0; i < state.numel(); ++i) train_delta[i] = state[i] - iter_start[i];
            trace->train_test_alignment.push_back(alignment_diagnostic(train_delta, test_delta));
        }
        // Only the meta-test delta survives; the meta-train walk is discarded.
        state = iter_start;
        for (std::int64_t i = 0; i < state.numel(); ++i) state[i] += test_delta[i];
    }

    Tensor delta_flat(original.shape());
    for (std::int64_t i = 0; i < original.numel(); ++i) delta_flat[i] = state[i] - original[i];
    PerturbationDelta delta;
    delta.layers = unflatten_like(delta_flat, u.layers);
    return delta;
}

struct ProtectedAttribute {
    AttributeSpec spec;
    const ModelZoo* zoo = nullptr;
    int true_label = 0;
};

// Multi-attribute protection: per-attribute deltas combined as a weighted sum
// with normalized protection levels, then added to the original update.
inline ModelUpdate recup_multi(const ModelUpdate& u, const std::vector<ProtectedAttribute>& attributes,
                               const RecupConfig& cfg, Rng& rng) {
    if (attributes.empty()) throw config_error("recup: no attributes configured");
    std::vector<AttributeSpec> specs;
    for (const auto& a : attributes) specs.push_back(a.spec);
    std::vector<double> gamma = normalize_weights(specs);

    ModelUpdate out = u;
    for (std::size_t m = 0; m < attributes.size(); ++m) {
        Rng attr_rng = rng.fork(m + 1);
        if (gamma[m] == 0.0) continue;
        PerturbationDelta d = recup_single(u, attributes[m].spec, *attributes[m].zoo, cfg,
                                           attributes[m].true_label, attr_rng);
        for (std::size_t layer = 0; layer < out.layers.size(); ++layer)
            for (std::int64_t i = 0; i < out.layers[layer].numel(); ++i)
                out.layers[layer][i] += gamma[m] * d.layers[layer][i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// FGSM variants (ablations)
// ---------------------------------------------------------------------------

enum class FgsmVariant { one_step, average, iterative, momentum };

inline FgsmVariant fgsm_variant_from_string(const std::string& s) {
    if (s == "one-step") return FgsmVariant::one_step;
    if (s == "average") return FgsmVariant::average;
    if (s == "iterative") return FgsmVariant::iterative;
    if (s == "momentum") return FgsmVariant::momentum;
    throw config_error("unknown fgsm variant '" + s + "'");
}

inline ModelUpdate fgsm_variant(const ModelUpdate& u, const ModelZoo& zoo, double epsilon, int q,
                                FgsmVariant variant, int true_label, Rng& rng) {
    if (epsilon < 0) throw config_error("fgsm: epsilon must be >= 0");
    int need = variant == FgsmVariant::one_step ? 1 : q;
    if (need < 1) throw config_error("fgsm: Q must be >= 1");
    detail::check_zoo(zoo, u, need);

    auto sizes = update_layer_sizes(u);
    std::map<std::int64_t, DefenderGraph> graphs;
    auto graph_for = [&](std::int64_t member) -> const DefenderGraph& {
        auto it = graphs.find(member);
        if (it == graphs.end())
            it = graphs.emplace(member, DefenderGraph(zoo.members[static_cast<std::size_t>(member)], sizes,
                                                      zoo.pool_window)).first;
        return it->second;
    };

    Tensor state = flatten_update(u);
    auto picks = rng.sample_without_replacement(static_cast<std::int64_t>(zoo.members.size()), need);

    switch (variant) {
        case FgsmVariant::one_step: {
            Tensor g = graph_for(picks[0]).grad_at(state, true_label);
            detail::add_scaled_sign(state, g, epsilon);
            break;
        }
        case FgsmVariant::average: {
            Tensor base = state;
            Tensor acc(state.shape());
            for (int i = 0; i < q; ++i) {
                Tensor g = graph_for(picks[static_cast<std::size_t>(i)]).grad_at(base, true_label);
                detail::add_scaled_sign(acc, g, epsilon / static_cast<double>(q));
            }
            for (std::int64_t i = 0; i < state.numel(); ++i) state[i] += acc[i];
            break;
        }
        case FgsmVariant::iterative: {
            for (int i = 0; i < q; ++i) {
                Tensor g = graph_for(picks[static_cast<std::size_t>(i)]).grad_at(state, true_label);
                detail::add_scaled_sign(state, g, epsilon / static_cast<double>(q));
            }
            break;
        }
        case FgsmVariant::momentum: {
            const double mu = 0.9;
            Tensor m(state.shape());
            for (int i = 0; i < q; ++i) {
                Tensor g = graph_for(picks[static_cast<std::size_t>(i)]).grad_at(state, true_label);
                double l1 = 0;
                for (std::int64_t j = 0; j < g.numel(); ++j) l1 += std::abs(g[j]);
                double inv = l1 > 0 ? 1.0 / l1 : 0.0;
                for (std::int64_t j = 0; j < m.numel(); ++j) m[j] = mu * m[j] + g[j] * inv;
                detail::add_scaled_sign(state, m, epsilon / static_cast<double>(q));
            }
            break;
        }
    }

    ModelUpdate out = u;
    out.layers = unflatten_like(state, u.layers);
    return out;
}

}  // namespace recup
