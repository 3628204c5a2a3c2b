#pragma once

// Simulated federated learning: per-round client gradients, FedAvg
// aggregation, IID / by-group partitioning, and the round loop with defense
// and observer hooks. Observers only ever see ModelUpdate objects, matching
// the eavesdropper / curious-server view of the protocol.

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "recup/data.hpp"
#include "recup/errors.hpp"
#include "recup/graph.hpp"
#include "recup/model.hpp"
#include "recup/tensor.hpp"

namespace recup {

struct FlConfig {
    int num_clients = 1;
    int rounds = 1;
    double lr = 0.1;
    double participation = 1.0;
    int local_epochs = 1;
    std::int64_t batch_size = 0;  // 0 = full local data
    std::uint64_t seed = 1;
    LossKind loss = LossKind::cross_entropy;

    void validate() const {
        if (num_clients < 1) throw config_error("fl: num_clients must be >= 1");
        if (rounds < 1) throw config_error("fl: rounds must be >= 1");
        if (lr <= 0) throw config_error("fl: lr must be positive");
        if (participation <= 0.0 || participation > 1.0) throw config_error("fl: participation must be in (0,1]");
        if (local_epochs < 1) throw config_error("fl: local_epochs must be >= 1");
        if (selected_count() < 1) throw config_error("fl: participation selects no clients");
    }
    int selected_count() const {
        return std::max(1, static_cast<int>(std::llround(participation * num_clients)));
    }
};

struct ModelUpdate {
    int client_id = 0;
    int round = 0;
    std::vector<Tensor> layers;

    std::int64_t numel() const {
        std::int64_t n = 0;
        for (const auto& t : layers) n += t.numel();
        return n;
    }
};

inline Tensor flatten_update(const ModelUpdate& u) {
    Tensor flat({u.numel()});
    std::int64_t off = 0;
    for (const auto& t : u.layers) {
        for (std::int64_t i = 0; i < t.numel(); ++i) flat[off + i] = t[i];
        off += t.numel();
    }
    return flat;
}

inline std::vector<Tensor> unflatten_like(const Tensor& flat, const std::vector<Tensor>& reference) {
    std::vector<Tensor> layers;
    std::int64_t off = 0;
    for (const auto& r : reference) {
        Tensor t(r.shape());
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = flat[off + i];
        off += t.numel();
        layers.push_back(std::move(t));
    }
    if (off != flat.numel()) throw usage_error("unflatten_like: size mismatch");
    return layers;
}

struct GlobalModelState {
    int round = 0;
    MlpSpec spec;
    MlpParams weights;
    std::vector<std::pair<int, double>> eval_history;  // (round, test loss)
};

inline GlobalModelState init_global(const MlpSpec& spec) {
    GlobalModelState g;
    g.spec = spec;
    g.weights = init_model(spec);
    return g;
}

// Gradient of the mean training loss over the client's local data at the
// current global weights. Updates are plain gradients even for several local
// epochs: epochs repeat the same full pass at fixed weights and are averaged,
// which leaves the full-batch gradient unchanged.
inline ModelUpdate client_update(const GlobalModelState& global, const Tensor& x, const std::vector<int>& y,
                                 const FlConfig& cfg, int client_id = 0) {
    if (x.rows() == 0) throw usage_error("client_update: empty local data");
    MlpGraph g = build_mlp_graph(global.spec, x.rows());
    Binding binding;
    bind_leaf(binding, g.input, x);
    bind_leaf(binding, g.target, one_hot(y, global.spec.num_classes()));
    for (std::size_t i = 0; i < global.weights.size(); ++i) bind_leaf(binding, g.params[i], global.weights[i]);
    Expr loss_expr = cfg.loss == LossKind::cross_entropy ? g.loss_ce : g.loss_mse;
    GradientMap grads = gradients(loss_expr, g.params);
    Evaluation ev(binding);
    ModelUpdate u;
    u.client_id = client_id;
    u.round = global.round + 1;
    for (const auto& p : g.params) u.layers.push_back(ev.value(grad_of(grads, p)));
    return u;
}

// FedAvg: w <- w - lr * sum(updates)/K, summed in ascending client-id order.
inline GlobalModelState aggregate(const std::vector<ModelUpdate>& updates, const GlobalModelState& global,
                                  double lr) {
    if (updates.empty()) throw usage_error("aggregate: no updates");
    std::vector<const ModelUpdate*> ordered;
    for (const auto& u : updates) ordered.push_back(&u);
    std::sort(ordered.begin(), ordered.end(),
              [](const ModelUpdate* a, const ModelUpdate* b) { return a->client_id < b->client_id; });

    int round = ordered.front()->round;
    std::vector<Tensor> sum;
    for (std::size_t i = 0; i < global.weights.size(); ++i) sum.push_back(Tensor::zeros(global.weights[i].shape()));
    for (const ModelUpdate* u : ordered) {
        if (u->round != round) throw usage_error("aggregate: updates from different rounds");
        if (u->layers.size() != sum.size()) throw usage_error("aggregate: layer count mismatch");
        for (std::size_t i = 0; i < sum.size(); ++i) {
            if (u->layers[i].shape() != sum[i].shape())
                throw usage_error("aggregate: layer shape mismatch at layer " + std::to_string(i));
            for (std::int64_t j = 0; j < sum[i].numel(); ++j) sum[i][j] += u->layers[i][j];
        }
    }
    GlobalModelState next = global;
    next.round = round;
    double k = static_cast<double>(ordered.size());
    for (std::size_t i = 0; i < sum.size(); ++i)
        for (std::int64_t j = 0; j < sum[i].numel(); ++j) next.weights[i][j] -= lr * (sum[i][j] / k);
    return next;
}

enum class PartitionMode { iid, by_group };

// Disjoint, exhaustive partition of sample indices over K clients.
// iid: seeded shuffle dealt round-robin. by_group: all samples of one group
// key land on one client; groups are dealt round-robin in first-appearance
// order, and strict mode refuses when groups and clients cannot be matched
// one-to-one.
inline std::vector<std::vector<std::size_t>> partition(const Dataset& ds, int k, PartitionMode mode,
                                                       std::uint64_t seed, bool strict = false) {
    if (k < 1) throw config_error("partition: K must be >= 1");
    if (ds.samples.size() < static_cast<std::size_t>(k) && mode == PartitionMode::iid)
        throw config_error("partition: dataset smaller than client count");
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(k));
    if (mode == PartitionMode::iid) {
        std::vector<std::size_t> idx(ds.samples.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        Rng rng(seed);
        rng.shuffle(idx);
        for (std::size_t i = 0; i < idx.size(); ++i) out[i % static_cast<std::size_t>(k)].push_back(idx[i]);
    } else {
        std::vector<std::string> group_order;
        std::map<std::string, std::size_t> group_id;
        for (std::size_t i = 0; i < ds.samples.size(); ++i) {
            const auto& gkey = ds.samples[i].group;
            if (!group_id.count(gkey)) {
                group_id[gkey] = group_order.size();
                group_order.push_back(gkey);
            }
        }
        if (strict && group_order.size() > static_cast<std::size_t>(k))
            throw config_error("partition: " + std::to_string(group_order.size()) + " groups exceed " +
                               std::to_string(k) + " clients in strict by-group mode");
        for (std::size_t i = 0; i < ds.samples.size(); ++i)
            out[group_id[ds.samples[i].group] % static_cast<std::size_t>(k)].push_back(i);
    }
    return out;
}

// Client-side view available to a defense: the current global model and the
// client's own data. Raw data never crosses to observers or the server.
struct DefenseContext {
    const GlobalModelState& global;
    const Tensor& local_x;
    const std::vector<int>& local_y;
};

using DefenseFn = std::function<ModelUpdate(const ModelUpdate&, const DefenseContext&, Rng&)>;
using UpdateObserver = std::function<void(int client_id, int round, const ModelUpdate&)>;
using RoundStartObserver = std::function<void(int round, const GlobalModelState&)>;

struct RunResult {
    GlobalModelState state;
};

// Runs T federated rounds. Every shared update passes through `defense`
// before the observers see it and before aggregation. Participation is a
// seeded uniform draw without replacement over clients that hold data;
// observers are invoked in ascending client-id order.
inline RunResult run_rounds(const Dataset& train, const std::vector<std::vector<std::size_t>>& parts,
                            const Dataset& test, const MlpSpec& spec, const FlConfig& cfg,
                            const DefenseFn& defense = nullptr, const UpdateObserver& observer = nullptr,
                            const RoundStartObserver& round_start = nullptr) {
    cfg.validate();
    if (static_cast<int>(parts.size()) != cfg.num_clients)
        throw config_error("run_rounds: partition count differs from num_clients");

    std::vector<int> populated;
    for (std::size_t i = 0; i < parts.size(); ++i)
        if (!parts[i].empty()) populated.push_back(static_cast<int>(i));
    if (populated.empty()) throw config_error("run_rounds: no client holds data");

    GlobalModelState state = init_global(spec);
    Tensor test_x = test.feature_matrix();
    std::vector<int> test_y = test.task_labels();

    Rng master(cfg.seed);
    std::int64_t d = train.meta.feature_dim();

    for (int round = 1; round <= cfg.rounds; ++round) {
        if (round_start) round_start(round, state);
        Rng round_rng = master.fork(static_cast<std::uint64_t>(round));
        int want = std::min<int>(cfg.selected_count(), static_cast<int>(populated.size()));
        auto picks = round_rng.sample_without_replacement(static_cast<std::int64_t>(populated.size()), want);
        std::vector<int> selected;
        for (auto p : picks) selected.push_back(populated[static_cast<std::size_t>(p)]);
        std::sort(selected.begin(), selected.end());

        std::vector<ModelUpdate> shared;
        for (int cid : selected) {
            try {
                const auto& rows = parts[static_cast<std::size_t>(cid)];
                Tensor x({static_cast<std::int64_t>(rows.size()), d});
                std::vector<int> y;
                for (std::size_t r = 0; r < rows.size(); ++r) {
                    const auto& s = train.samples[rows[r]];
                    for (std::int64_t j = 0; j < d; ++j) x.at(static_cast<std::int64_t>(r), j) = s.features[j];
                    y.push_back(s.task_label);
                }
                ModelUpdate u = client_update(state, x, y, cfg, cid);
                if (defense) {
                    Rng defense_rng = round_rng.fork(0xDEF000 + static_cast<std::uint64_t>(cid));
                    DefenseContext ctx{state, x, y};
                    u = defense(u, ctx, defense_rng);
                    u.client_id = cid;
                    u.round = round;
                }
                shared.push_back(std::move(u));
            } catch (const config_error& e) {
                throw config_error("round " + std::to_string(round) + " client " + std::to_string(cid) + ": " +
                                   e.what());
            } catch (const std::exception& e) {
                throw numeric_error("round " + std::to_string(round) + " client " + std::to_string(cid) + ": " +
                                    e.what());
            }
        }
        if (observer)
            for (const auto& u : shared) observer(u.client_id, round, u);
        state = aggregate(shared, state, cfg.lr);
        double test_loss = loss(predict(spec, state.weights, test_x), test_y, cfg.loss);
        state.eval_history.emplace_back(round, test_loss);
    }
    return {std::move(state)};
}

}  // namespace recup
