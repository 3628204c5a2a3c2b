#define CATCH_CONFIG_MAIN
#include <catch2/catch.hpp>

#include <algorithm>

#include "recup/fl.hpp"

using namespace recup;

namespace {

Dataset tiny_separable(std::int64_t n, std::uint64_t seed) {
    SynthSpec spec;
    spec.dim = 6;
    spec.task_classes = 2;
    spec.attributes = {{"attr_a", 2}};
    spec.n = n;
    spec.seed = seed;
    spec.margin = 0.4;
    return synth_generate(spec);
}

MlpSpec small_model(std::int64_t input_dim, std::uint64_t seed = 3) {
    MlpSpec spec;
    spec.input_dim = input_dim;
    spec.widths = {8, 2};
    spec.seed = seed;
    return spec;
}

}  // namespace

TEST_CASE("client_update on an already-perfect prediction is near zero") {
    MlpSpec spec;
    spec.input_dim = 1;
    spec.widths = {2};
    spec.seed = 1;
    GlobalModelState g;
    g.spec = spec;
    // Saturated logits: softmax gives exactly [1, 0] in double precision.
    g.weights = {Tensor({1, 2}, {1000.0, -1000.0}), Tensor::zeros({2})};
    FlConfig cfg;
    ModelUpdate u = client_update(g, Tensor({1, 1}, {1.0}), {0}, cfg);
    double inf = 0;
    for (const auto& t : u.layers) inf = std::max(inf, t.inf_norm());
    CHECK(inf < 1e-6);
}

TEST_CASE("single-layer softmax MSE update matches the analytic gradient") {
    MlpSpec spec;
    spec.input_dim = 3;
    spec.widths = {2};
    spec.seed = 5;
    GlobalModelState g = init_global(spec);
    FlConfig cfg;
    cfg.loss = LossKind::mean_squared_error;

    Rng rng(9);
    std::int64_t n = 4;
    Tensor x({n, 3});
    std::vector<int> y;
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < 3; ++j) x.at(i, j) = rng.normal();
        y.push_back(static_cast<int>(i % 2));
    }
    ModelUpdate u = client_update(g, x, y, cfg);

    // Hand-derived gradient of mean((softmax(xW+b) - t)^2):
    // dL/dz_k = (2/(n*C)) * sum_j (p_j - t_j) * p_j * ([j==k] - p_k).
    Tensor p = predict(spec, g.weights, x);
    Tensor t = one_hot(y, 2);
    Tensor dz({n, 2});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < 2; ++k) {
            double s = 0;
            for (std::int64_t j = 0; j < 2; ++j)
                s += (p.at(i, j) - t.at(i, j)) * p.at(i, j) * ((j == k ? 1.0 : 0.0) - p.at(i, k));
            dz.at(i, k) = 2.0 / static_cast<double>(n * 2) * s;
        }
    Tensor dw({3, 2});
    Tensor db({2});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < 2; ++k) {
            db[k] += dz.at(i, k);
            for (std::int64_t j = 0; j < 3; ++j) dw.at(j, k) += x.at(i, j) * dz.at(i, k);
        }
    for (std::int64_t i = 0; i < dw.numel(); ++i) CHECK(u.layers[0][i] == Approx(dw[i]).margin(1e-12));
    for (std::int64_t i = 0; i < db.numel(); ++i) CHECK(u.layers[1][i] == Approx(db[i]).margin(1e-12));
}

TEST_CASE("aggregate with one client applies w - lr*grad") {
    MlpSpec spec = small_model(2);
    GlobalModelState g = init_global(spec);
    ModelUpdate u;
    u.client_id = 0;
    u.round = 1;
    for (const auto& w : g.weights) u.layers.push_back(Tensor::full(w.shape(), 1.0));
    GlobalModelState next = aggregate({u}, g, 0.5);
    for (std::size_t i = 0; i < g.weights.size(); ++i)
        for (std::int64_t j = 0; j < g.weights[i].numel(); ++j)
            CHECK(next.weights[i][j] == Approx(g.weights[i][j] - 0.5).margin(1e-15));
}

TEST_CASE("opposite updates cancel") {
    MlpSpec spec = small_model(2);
    GlobalModelState g = init_global(spec);
    ModelUpdate a, b;
    a.client_id = 0;
    b.client_id = 1;
    a.round = b.round = 1;
    for (const auto& w : g.weights) {
        a.layers.push_back(Tensor::full(w.shape(), 2.0));
        b.layers.push_back(Tensor::full(w.shape(), -2.0));
    }
    GlobalModelState next = aggregate({a, b}, g, 0.7);
    for (std::size_t i = 0; i < g.weights.size(); ++i) CHECK(next.weights[i] == g.weights[i]);
}

TEST_CASE("aggregation matches an independent sequential sum and ignores arrival order") {
    MlpSpec spec = small_model(3);
    GlobalModelState g = init_global(spec);
    Rng rng(13);
    std::vector<ModelUpdate> updates;
    for (int c = 0; c < 3; ++c) {
        ModelUpdate u;
        u.client_id = c;
        u.round = 1;
        for (const auto& w : g.weights) {
            Tensor t(w.shape());
            for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
            u.layers.push_back(std::move(t));
        }
        updates.push_back(std::move(u));
    }
    double lr = 0.3;
    GlobalModelState got = aggregate(updates, g, lr);

    // Independent oracle: sum in client order, then one descent step.
    GlobalModelState want = g;
    for (std::size_t layer = 0; layer < g.weights.size(); ++layer) {
        Tensor sum = Tensor::zeros(g.weights[layer].shape());
        for (int c = 0; c < 3; ++c)
            for (std::int64_t i = 0; i < sum.numel(); ++i) sum[i] += updates[static_cast<std::size_t>(c)].layers[layer][i];
        for (std::int64_t i = 0; i < sum.numel(); ++i) want.weights[layer][i] -= lr * (sum[i] / 3.0);
    }
    for (std::size_t i = 0; i < got.weights.size(); ++i) CHECK(got.weights[i] == want.weights[i]);

    std::vector<ModelUpdate> shuffled{updates[2], updates[0], updates[1]};
    GlobalModelState got2 = aggregate(shuffled, g, lr);
    for (std::size_t i = 0; i < got.weights.size(); ++i) CHECK(got2.weights[i] == got.weights[i]);
}

TEST_CASE("iid partition is a disjoint exhaustive cover") {
    Dataset ds = tiny_separable(23, 4);
    auto parts = partition(ds, 5, PartitionMode::iid, 99);
    std::vector<bool> seen(ds.samples.size(), false);
    for (const auto& p : parts)
        for (auto idx : p) {
            CHECK_FALSE(seen[idx]);
            seen[idx] = true;
        }
    CHECK(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
}

TEST_CASE("partition with K equal to dataset size gives one sample each") {
    Dataset ds = tiny_separable(8, 4);
    auto parts = partition(ds, 8, PartitionMode::iid, 1);
    for (const auto& p : parts) CHECK(p.size() == 1);
}

TEST_CASE("by-group keeps groups together and strict mode enforces capacity") {
    SynthSpec spec;
    spec.dim = 6;
    spec.n = 30;
    spec.seed = 2;
    spec.num_groups = 6;
    Dataset ds = synth_generate(spec);
    auto parts = partition(ds, 3, PartitionMode::by_group, 7);
    for (const auto& p : parts) {
        std::set<std::string> groups;
        for (auto idx : p) groups.insert(ds.samples[idx].group);
        // groups may share a client, but no group is split
    }
    std::map<std::string, int> owner;
    for (std::size_t c = 0; c < parts.size(); ++c)
        for (auto idx : parts[c]) {
            auto [it, fresh] = owner.emplace(ds.samples[idx].group, static_cast<int>(c));
            if (!fresh) CHECK(it->second == static_cast<int>(c));
        }
    CHECK_THROWS_AS(partition(ds, 3, PartitionMode::by_group, 7, /*strict=*/true), config_error);
}

TEST_CASE("identity defense reproduces the undefended trajectory") {
    Dataset ds = tiny_separable(24, 6);
    auto [train, test] = split(ds, 0.75, 5);
    auto parts = partition(train, 6, PartitionMode::iid, 3);
    MlpSpec spec = small_model(train.meta.feature_dim());
    FlConfig cfg;
    cfg.num_clients = 6;
    cfg.rounds = 4;
    cfg.lr = 0.5;
    cfg.seed = 17;

    RunResult plain = run_rounds(train, parts, test, spec, cfg);
    RunResult identity = run_rounds(train, parts, test, spec, cfg, [](const ModelUpdate& u, const DefenseContext&, Rng&) { return u; });
    REQUIRE(plain.state.eval_history.size() == identity.state.eval_history.size());
    for (std::size_t i = 0; i < plain.state.eval_history.size(); ++i)
        CHECK(plain.state.eval_history[i].second == identity.state.eval_history[i].second);
    for (std::size_t i = 0; i < plain.state.weights.size(); ++i)
        CHECK(plain.state.weights[i] == identity.state.weights[i]);
}

TEST_CASE("round trajectory is deterministic in config and seed") {
    Dataset ds = tiny_separable(20, 8);
    auto parts = partition(ds, 5, PartitionMode::iid, 3);
    MlpSpec spec = small_model(ds.meta.feature_dim());
    FlConfig cfg;
    cfg.num_clients = 5;
    cfg.rounds = 3;
    cfg.lr = 0.4;
    cfg.participation = 0.6;
    cfg.seed = 23;
    RunResult a = run_rounds(ds, parts, ds, spec, cfg);
    RunResult b = run_rounds(ds, parts, ds, spec, cfg);
    for (std::size_t i = 0; i < a.state.weights.size(); ++i) CHECK(a.state.weights[i] == b.state.weights[i]);
}

TEST_CASE("observers see every shared update exactly once, in client order") {
    Dataset ds = tiny_separable(12, 9);
    auto parts = partition(ds, 4, PartitionMode::iid, 3);
    MlpSpec spec = small_model(ds.meta.feature_dim());
    FlConfig cfg;
    cfg.num_clients = 4;
    cfg.rounds = 2;
    cfg.lr = 0.2;
    cfg.seed = 31;
    std::vector<std::pair<int, int>> seen;
    run_rounds(ds, parts, ds, spec, cfg, nullptr,
               [&](int cid, int round, const ModelUpdate&) { seen.emplace_back(round, cid); });
    REQUIRE(seen.size() == 8);
    for (std::size_t i = 1; i < seen.size(); ++i) CHECK(seen[i - 1] < seen[i]);
}

TEST_CASE("full participation solves a separable task") {
    Dataset ds = tiny_separable(80, 12);
    auto [train, test] = split(ds, 0.8, 4);
    auto parts = partition(train, static_cast<int>(train.size()), PartitionMode::iid, 3);
    MlpSpec spec = small_model(train.meta.feature_dim());
    FlConfig cfg;
    cfg.num_clients = static_cast<int>(train.size());
    cfg.rounds = 50;
    cfg.lr = 2.0;
    cfg.seed = 7;
    RunResult r = run_rounds(train, parts, test, spec, cfg);
    CHECK(r.state.eval_history.back().second < 0.1);
}

TEST_CASE("lower participation never converges faster (median over seeds)") {
    auto final_loss = [](double ratio, std::uint64_t seed) {
        Dataset ds = tiny_separable(40, seed);
        auto parts = partition(ds, 40, PartitionMode::iid, seed + 1);
        MlpSpec spec = small_model(ds.meta.feature_dim(), seed + 2);
        FlConfig cfg;
        cfg.num_clients = 40;
        cfg.rounds = 4;  // mid-training, where participation differences show
        cfg.lr = 1.0;
        cfg.participation = ratio;
        cfg.seed = seed + 3;
        return run_rounds(ds, parts, ds, spec, cfg).state.eval_history.back().second;
    };
    std::vector<double> low, high;
    for (std::uint64_t s = 1; s <= 5; ++s) {
        low.push_back(final_loss(0.2, s * 100));
        high.push_back(final_loss(1.0, s * 100));
    }
    std::sort(low.begin(), low.end());
    std::sort(high.begin(), high.end());
    CHECK(high[2] <= low[2] + 1e-9);
}
