#define CATCH_CONFIG_MAIN
#include <catch2/catch.hpp>

#include <cmath>

#include "recup/attacks.hpp"
#include "recup/defenses.hpp"

using namespace recup;

namespace {

ModelUpdate make_update(const std::vector<Shape>& shapes, Rng& rng, double scale = 1.0) {
    ModelUpdate u;
    u.client_id = 0;
    u.round = 1;
    for (const auto& s : shapes) {
        Tensor t(s);
        for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0, scale);
        u.layers.push_back(std::move(t));
    }
    return u;
}

// Zoo of freshly initialized members over the flat update width (window 1).
ModelZoo raw_zoo(std::int64_t feature_dim, int members, const std::vector<std::int64_t>& widths, int classes,
                 std::uint64_t seed) {
    ModelZoo zoo;
    zoo.attribute_id = "attr";
    zoo.feature_dim = feature_dim;
    zoo.pool_window = 1;
    zoo.num_classes = classes;
    Rng rng(seed);
    for (int i = 0; i < members; ++i) {
        ZooMember m;
        m.spec.input_dim = feature_dim;
        m.spec.widths = widths;
        m.spec.widths.push_back(classes);
        m.spec.seed = rng.next_u64();
        m.weights = init_model(m.spec);
        zoo.members.push_back(std::move(m));
    }
    return zoo;
}

}  // namespace

TEST_CASE("clip rescales to the bound and keeps direction") {
    Rng rng(1);
    ModelUpdate u = make_update({{10}}, rng);
    double norm = flatten_update(u).l2_norm();
    ModelUpdate clipped = clip(u, norm / 2.0);
    CHECK(flatten_update(clipped).l2_norm() == Approx(norm / 2.0));
    // direction preserved: elementwise ratio constant
    for (std::int64_t i = 0; i < 10; ++i) CHECK(clipped.layers[0][i] == Approx(u.layers[0][i] * 0.5));
    ModelUpdate untouched = clip(u, norm * 2.0);
    for (std::int64_t i = 0; i < 10; ++i) CHECK(untouched.layers[0][i] == u.layers[0][i]);
}

TEST_CASE("dp noise at zero scale equals plain clipping") {
    Rng rng(2);
    ModelUpdate u = make_update({{6}, {3}}, rng);
    DpConfig cfg;
    cfg.noise = 0.0;
    cfg.clip_bound = 0.5;
    Rng r1(5), r2(5);
    ModelUpdate g = dp_gaussian(u, cfg, r1);
    ModelUpdate l = dp_laplace(u, cfg, r2);
    ModelUpdate c = clip(u, 0.5);
    for (std::size_t i = 0; i < u.layers.size(); ++i) {
        CHECK(g.layers[i] == c.layers[i]);
        CHECK(l.layers[i] == c.layers[i]);
    }
}

TEST_CASE("gaussian noise empirical moments sit within four standard errors") {
    const std::int64_t n = 100000;
    const double mu = 0.1, sigma = 0.5;
    ModelUpdate zero;
    zero.layers.push_back(Tensor::zeros({n}));
    DpConfig cfg;
    cfg.mu = mu;
    cfg.noise = sigma;
    cfg.clip_bound = 1.0;
    Rng rng(42);
    ModelUpdate noised = dp_gaussian(zero, cfg, rng);
    double mean = 0;
    for (std::int64_t i = 0; i < n; ++i) mean += noised.layers[0][i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double d = noised.layers[0][i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n - 1);
    double se_mean = sigma / std::sqrt(static_cast<double>(n));
    double se_sd = sigma / std::sqrt(2.0 * static_cast<double>(n));
    CHECK(std::abs(mean - mu) < 4 * se_mean);
    CHECK(std::abs(std::sqrt(var) - sigma) < 4 * se_sd);
}

TEST_CASE("laplace noise empirical variance approaches 2b^2") {
    const std::int64_t n = 100000;
    const double b = 0.3;
    ModelUpdate zero;
    zero.layers.push_back(Tensor::zeros({n}));
    DpConfig cfg;
    cfg.mu = 0.0;
    cfg.noise = b;
    cfg.clip_bound = 1.0;
    Rng rng(43);
    ModelUpdate noised = dp_laplace(zero, cfg, rng);
    double mean = 0;
    for (std::int64_t i = 0; i < n; ++i) mean += noised.layers[0][i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double d = noised.layers[0][i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n - 1);
    // Var[x^2] for Laplace is 20 b^4, so SE(var) = b^2 sqrt(20/n).
    double se_var = b * b * std::sqrt(20.0 / static_cast<double>(n));
    CHECK(std::abs(var - 2 * b * b) < 4 * se_var);
}

TEST_CASE("sparsify zeroes the smallest magnitudes, exact example") {
    ModelUpdate u;
    u.layers.push_back(Tensor::vec({3, -1, 0.5, 2}));
    ModelUpdate s = sparsify(u, 0.5);
    CHECK(s.layers[0] == Tensor::vec({3, 0, 0, 2}));
}

TEST_CASE("sparsify zero count is exactly floor(p*n) and survivors keep their values") {
    Rng rng(3);
    ModelUpdate u = make_update({{17}, {9}}, rng);
    double p = 0.7;
    ModelUpdate s = sparsify(u, p);
    Tensor flat_in = flatten_update(u);
    Tensor flat_out = flatten_update(s);
    std::int64_t zeros = 0;
    for (std::int64_t i = 0; i < flat_out.numel(); ++i) {
        if (flat_out[i] == 0.0)
            ++zeros;
        else
            CHECK(flat_out[i] == flat_in[i]);
    }
    CHECK(zeros == static_cast<std::int64_t>(std::floor(p * 26)));
}

TEST_CASE("soteria masks exactly ceil(p*l) defend-layer rows and nothing else") {
    MlpSpec spec;
    spec.input_dim = 4;
    spec.widths = {5, 2};
    spec.seed = 11;
    MlpParams weights = init_model(spec);
    Rng rng(7);
    Tensor x({3, 4});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
    ModelUpdate u = make_update({{4, 5}, {5}, {5, 2}, {2}}, rng);

    SoteriaConfig cfg;
    cfg.rate = 0.5;  // ceil(0.5*5) = 3 rows
    ModelUpdate s = soteria(u, spec, weights, x, cfg);
    CHECK(s.layers[0] == u.layers[0]);
    CHECK(s.layers[1] == u.layers[1]);
    CHECK(s.layers[3] == u.layers[3]);
    int zeroed_rows = 0;
    for (std::int64_t r = 0; r < 5; ++r) {
        bool all_zero = true, any_changed = false;
        for (std::int64_t c = 0; c < 2; ++c) {
            if (s.layers[2].at(r, c) != 0.0) all_zero = false;
            if (s.layers[2].at(r, c) != u.layers[2].at(r, c)) any_changed = true;
        }
        if (all_zero && any_changed) ++zeroed_rows;
        if (!all_zero) {
            for (std::int64_t c = 0; c < 2; ++c) CHECK(s.layers[2].at(r, c) == u.layers[2].at(r, c));
        }
    }
    CHECK(zeroed_rows == 3);
}

TEST_CASE("recup with zero budget returns a zero delta") {
    Rng rng(5);
    ModelUpdate u = make_update({{6}, {2}}, rng);
    ModelZoo zoo = raw_zoo(8, 3, {4}, 2, 77);
    RecupConfig cfg;
    cfg.epsilon = 0.0;
    cfg.outer_iterations = 3;
    cfg.models_per_iteration = 2;
    Rng drng(9);
    PerturbationDelta d = recup_single(u, {"attr", 2, 1.0}, zoo, cfg, 0, drng);
    CHECK(d.inf_norm() == 0.0);
}

TEST_CASE("recup delta infinity norm is bounded by P*epsilon") {
    ModelZoo zoo = raw_zoo(12, 6, {5, 5}, 3, 123);
    RecupConfig cfg;
    cfg.epsilon = 0.03;
    cfg.outer_iterations = 7;
    cfg.models_per_iteration = 4;
    Rng data_rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        ModelUpdate u = make_update({{8}, {4}}, data_rng, 0.5);
        Rng drng(1000 + static_cast<std::uint64_t>(trial));
        PerturbationDelta d = recup_single(u, {"attr", 3, 1.0}, zoo, cfg, trial % 3, drng);
        CHECK(d.inf_norm() <= cfg.epsilon * cfg.outer_iterations + 1e-12);
    }
}

TEST_CASE("recup with P=1,Q=2 on identical linear members matches the closed form") {
    const std::int64_t dim = 8;
    const int classes = 3;
    // Two identical linear-softmax members so the meta-test model is known.
    ModelZoo zoo = raw_zoo(dim, 2, {}, classes, 55);
    zoo.members[1] = zoo.members[0];

    Rng rng(21);
    ModelUpdate u = make_update({{5}, {3}}, rng, 0.8);
    RecupConfig cfg;
    cfg.epsilon = 0.05;
    cfg.outer_iterations = 1;
    cfg.models_per_iteration = 2;
    int label = 1;

    // Analytic input gradient of CE(softmax(|u| W + b), label) w.r.t. u.
    auto analytic_grad = [&](const Tensor& flat) {
        const Tensor& w = zoo.members[0].weights[0];
        const Tensor& bias = zoo.members[0].weights[1];
        std::vector<double> z(classes, 0.0);
        for (int c = 0; c < classes; ++c) {
            z[static_cast<std::size_t>(c)] = bias[c];
            for (std::int64_t i = 0; i < dim; ++i) z[static_cast<std::size_t>(c)] += std::abs(flat[i]) * w.at(i, c);
        }
        double mx = *std::max_element(z.begin(), z.end());
        double sum = 0;
        std::vector<double> p(classes);
        for (int c = 0; c < classes; ++c) {
            p[static_cast<std::size_t>(c)] = std::exp(z[static_cast<std::size_t>(c)] - mx);
            sum += p[static_cast<std::size_t>(c)];
        }
        for (int c = 0; c < classes; ++c) p[static_cast<std::size_t>(c)] /= sum;
        Tensor g({dim});
        for (std::int64_t i = 0; i < dim; ++i) {
            double df = 0;
            for (int c = 0; c < classes; ++c)
                df += (p[static_cast<std::size_t>(c)] - (c == label ? 1.0 : 0.0)) * w.at(i, c);
            double sgn = flat[i] > 0 ? 1.0 : (flat[i] < 0 ? -1.0 : 0.0);
            g[i] = sgn * df;
        }
        return g;
    };
    auto sign_of = [](const Tensor& t) {
        Tensor s(t.shape());
        for (std::int64_t i = 0; i < t.numel(); ++i) s[i] = t[i] > 0 ? 1.0 : (t[i] < 0 ? -1.0 : 0.0);
        return s;
    };

    Tensor flat = flatten_update(u);
    Tensor g0 = analytic_grad(flat);
    Tensor after_train = flat;
    Tensor s0 = sign_of(g0);
    for (std::int64_t i = 0; i < dim; ++i) after_train[i] += cfg.epsilon / 2.0 * s0[i];
    Tensor g1 = analytic_grad(after_train);
    Tensor expected_delta = sign_of(g1);
    for (std::int64_t i = 0; i < dim; ++i) expected_delta[i] *= cfg.epsilon;

    Rng drng(77);
    PerturbationDelta d = recup_single(u, {"attr", classes, 1.0}, zoo, cfg, label, drng);
    Tensor got({dim});
    std::int64_t off = 0;
    for (const auto& layer : d.layers)
        for (std::int64_t i = 0; i < layer.numel(); ++i) got[off++] = layer[i];
    for (std::int64_t i = 0; i < dim; ++i) CHECK(got[i] == Approx(expected_delta[i]).margin(1e-12));
}

TEST_CASE("recup defaults match the published configuration") {
    RecupConfig cfg;
    CHECK(cfg.outer_iterations == 10);
    CHECK(cfg.models_per_iteration == 5);
}

TEST_CASE("single-attribute recup_multi equals recup_single plus the update") {
    Rng rng(10);
    ModelUpdate u = make_update({{6}, {3}}, rng, 0.4);
    ModelZoo zoo = raw_zoo(9, 4, {6}, 2, 99);
    RecupConfig cfg;
    cfg.epsilon = 0.02;
    cfg.outer_iterations = 3;
    cfg.models_per_iteration = 2;

    Rng multi_rng(404);
    ProtectedAttribute pa{{"attr", 2, 1.0}, &zoo, 1};
    ModelUpdate combined = recup_multi(u, {pa}, cfg, multi_rng);

    Rng single_rng = Rng(404).fork(1);
    PerturbationDelta d = recup_single(u, pa.spec, zoo, cfg, 1, single_rng);
    for (std::size_t layer = 0; layer < u.layers.size(); ++layer)
        for (std::int64_t i = 0; i < u.layers[layer].numel(); ++i)
            CHECK(combined.layers[layer][i] == u.layers[layer][i] + d.layers[layer][i]);
}

TEST_CASE("zero-weight attributes contribute nothing") {
    Rng rng(12);
    ModelUpdate u = make_update({{6}, {3}}, rng, 0.4);
    ModelZoo zoo_a = raw_zoo(9, 3, {6}, 2, 5);
    ModelZoo zoo_b = raw_zoo(9, 3, {6}, 3, 6);
    RecupConfig cfg;
    cfg.epsilon = 0.02;
    cfg.outer_iterations = 2;
    cfg.models_per_iteration = 2;

    ProtectedAttribute a{{"a", 2, 0.0}, &zoo_a, 0};
    ProtectedAttribute b{{"b", 3, 1.0}, &zoo_b, 2};
    Rng multi_rng(31);
    ModelUpdate combined = recup_multi(u, {a, b}, cfg, multi_rng);

    Rng b_rng = Rng(31).fork(2);
    PerturbationDelta d = recup_single(u, b.spec, zoo_b, cfg, 2, b_rng);
    for (std::size_t layer = 0; layer < u.layers.size(); ++layer)
        for (std::int64_t i = 0; i < u.layers[layer].numel(); ++i)
            CHECK(combined.layers[layer][i] == Approx(u.layers[layer][i] + d.layers[layer][i]).margin(1e-15));
}

TEST_CASE("defenses are pure functions of update, config, and rng seed") {
    Rng rng(14);
    ModelUpdate u = make_update({{7}, {4}}, rng, 0.6);
    DpConfig dp;
    dp.noise = 0.2;
    dp.clip_bound = 3.0;
    Rng r1(9), r2(9);
    ModelUpdate g1 = dp_gaussian(u, dp, r1);
    ModelUpdate g2 = dp_gaussian(u, dp, r2);
    for (std::size_t i = 0; i < u.layers.size(); ++i) CHECK(g1.layers[i] == g2.layers[i]);

    ModelZoo zoo = raw_zoo(11, 5, {5}, 2, 17);
    RecupConfig cfg;
    cfg.epsilon = 0.05;
    cfg.outer_iterations = 4;
    cfg.models_per_iteration = 3;
    Rng r3(77), r4(77);
    PerturbationDelta d1 = recup_single(u, {"attr", 2, 1.0}, zoo, cfg, 0, r3);
    PerturbationDelta d2 = recup_single(u, {"attr", 2, 1.0}, zoo, cfg, 0, r4);
    for (std::size_t i = 0; i < d1.layers.size(); ++i) CHECK(d1.layers[i] == d2.layers[i]);
}

TEST_CASE("fgsm variants with zero budget leave the update unchanged") {
    Rng rng(15);
    ModelUpdate u = make_update({{5}, {2}}, rng);
    ModelZoo zoo = raw_zoo(7, 4, {4}, 2, 3);
    for (auto variant : {FgsmVariant::one_step, FgsmVariant::average, FgsmVariant::iterative, FgsmVariant::momentum}) {
        Rng vr(50);
        ModelUpdate out = fgsm_variant(u, zoo, 0.0, 3, variant, 1, vr);
        for (std::size_t i = 0; i < u.layers.size(); ++i) CHECK(out.layers[i] == u.layers[i]);
    }
}

TEST_CASE("average FGSM over identical members equals one-step at full budget") {
    Rng rng(16);
    ModelUpdate u = make_update({{6}, {2}}, rng);
    ModelZoo zoo = raw_zoo(8, 4, {5}, 2, 29);
    for (std::size_t m = 1; m < zoo.members.size(); ++m) zoo.members[m] = zoo.members[0];
    Rng r1(3), r2(3);
    ModelUpdate avg = fgsm_variant(u, zoo, 0.07, 4, FgsmVariant::average, 0, r1);
    ModelUpdate one = fgsm_variant(u, zoo, 0.07, 4, FgsmVariant::one_step, 0, r2);
    for (std::size_t i = 0; i < u.layers.size(); ++i)
        for (std::int64_t j = 0; j < u.layers[i].numel(); ++j)
            CHECK(avg.layers[i][j] == Approx(one.layers[i][j]).margin(1e-15));
}

TEST_CASE("meta-test step never decreases a linear member's loss") {
    const std::int64_t dim = 10;
    ModelZoo zoo = raw_zoo(dim, 1, {}, 2, 91);
    DefenderGraph graph(zoo.members[0], {dim}, 1);
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor u({dim});
        for (std::int64_t i = 0; i < dim; ++i) u[i] = rng.normal(0, 0.5);
        int label = trial % 2;
        auto [before, g] = graph.loss_and_grad_at(u, label);
        Tensor stepped = u;
        for (std::int64_t i = 0; i < dim; ++i) {
            double s = g[i] > 0 ? 1.0 : (g[i] < 0 ? -1.0 : 0.0);
            stepped[i] += 0.05 * s;
        }
        double after = graph.loss_at(stepped, label);
        CHECK(after >= before - 1e-12);
    }
}

TEST_CASE("alignment diagnostic reference values") {
    Tensor a = Tensor::vec({1, 2, 3});
    CHECK(alignment_diagnostic(a, a).value() == Approx(1.0));
    Tensor na = Tensor::vec({-1, -2, -3});
    CHECK(alignment_diagnostic(a, na).value() == Approx(-1.0));
    CHECK(alignment_diagnostic(Tensor::vec({1, 0}), Tensor::vec({0, 1})).value() == Approx(0.0));
    CHECK_FALSE(alignment_diagnostic(Tensor::vec({0, 0}), Tensor::vec({1, 1})).has_value());
}

TEST_CASE("recup trace reports per-iteration alignment") {
    Rng rng(19);
    ModelUpdate u = make_update({{6}}, rng, 0.5);
    ModelZoo zoo = raw_zoo(6, 4, {5}, 2, 71);
    RecupConfig cfg;
    cfg.epsilon = 0.04;
    cfg.outer_iterations = 5;
    cfg.models_per_iteration = 3;
    Rng drng(3);
    RecupTrace trace;
    recup_single(u, {"attr", 2, 1.0}, zoo, cfg, 1, drng, &trace);
    REQUIRE(trace.train_test_alignment.size() == 5);
    for (const auto& c : trace.train_test_alignment)
        if (c) CHECK((*c >= -1.0 - 1e-12 && *c <= 1.0 + 1e-12));
}
