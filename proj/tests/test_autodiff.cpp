#define CATCH_CONFIG_MAIN
#include <catch2/catch.hpp>

#include "recup/graph.hpp"
#include "recup/model.hpp"
#include "test_support.hpp"

using namespace recup;
using recup::testing::central_diff;
using recup::testing::rel_err;

TEST_CASE("identity graph returns its input") {
    Expr x = leaf("x", {2});
    Binding b;
    bind_leaf(b, x, Tensor::vec({1, 2}));
    CHECK(eval(x, b) == Tensor::vec({1, 2}));
}

TEST_CASE("matmul against identity matrix") {
    Expr a = constant(Tensor({2, 2}, {1, 0, 0, 1}));
    Expr v = constant(Tensor({2, 1}, {3, 4}));
    Tensor out = eval(matmul(a, v), {});
    CHECK(out == Tensor({2, 1}, {3, 4}));
}

TEST_CASE("softmax of equal logits is uniform") {
    Expr x = constant(Tensor::row({0, 0}));
    Tensor out = eval(softmax_rows(x), {});
    CHECK(out.at(0, 0) == Approx(0.5));
    CHECK(out.at(0, 1) == Approx(0.5));
}

TEST_CASE("backward of x^2 at x=3 is 6") {
    Expr x = leaf("x", {1});
    Expr y = x * x;
    auto grads = gradients(y, {x});
    Binding b;
    bind_leaf(b, x, Tensor::scalar(3.0));
    CHECK(eval(grad_of(grads, x), b).item() == Approx(6.0));
}

TEST_CASE("relu subgradient at the kink is 0") {
    Expr x = leaf("x", {2});
    Expr y = sum_all(relu(x));
    auto grads = gradients(y, {x});
    Binding b;
    bind_leaf(b, x, Tensor::vec({-1, 2}));
    Tensor g = eval(grad_of(grads, x), b);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    Binding b0;
    bind_leaf(b0, x, Tensor::vec({0, 0}));
    Tensor g0 = eval(grad_of(grads, x), b0);
    CHECK(g0[0] == 0.0);
    CHECK(g0[1] == 0.0);
}

TEST_CASE("backward rejects non-scalar roots") {
    Expr x = leaf("x", {3});
    CHECK_THROWS_AS(gradients(x * x, {x}), usage_error);
}

TEST_CASE("non-finite intermediate values are reported with the node") {
    Expr x = leaf("x", {1});
    Expr y = log(x);
    Binding b;
    bind_leaf(b, x, Tensor::scalar(-1.0));
    CHECK_THROWS_AS(eval(y, b), numeric_error);
    try {
        eval(y, b);
    } catch (const numeric_error& e) {
        CHECK(std::string(e.what()).find("log") != std::string::npos);
    }
}

TEST_CASE("max-pool keeps partial windows and routes ties to the first index") {
    Expr x = leaf("x", {5});
    Expr y = maxpool1d(x, 2);
    Binding b;
    bind_leaf(b, x, Tensor::vec({1, 3, 2, 2, 7}));
    Tensor out = eval(y, b);
    CHECK(out == Tensor::vec({3, 2, 7}));

    auto grads = gradients(sum_all(y), {x});
    Tensor g = eval(grad_of(grads, x), b);
    CHECK(g == Tensor::vec({0, 1, 1, 0, 1}));  // tie in window [2,2] goes to index 2
}

TEST_CASE("two-layer MLP gradient matches central finite differences") {
    Rng rng(7);
    MlpSpec spec;
    spec.input_dim = 5;
    spec.widths = {6, 3};
    spec.seed = 11;
    MlpParams params = init_model(spec);
    MlpGraph g = build_mlp_graph(spec, 2);

    Tensor x({2, 5});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.uniform(-2, 2);
    Tensor target = one_hot({1, 2}, 3);

    Binding binding;
    bind_leaf(binding, g.input, x);
    bind_leaf(binding, g.target, target);
    for (std::size_t i = 0; i < params.size(); ++i) bind_leaf(binding, g.params[i], params[i]);

    auto grads = gradients(g.loss_ce, g.params);
    double max_err = 0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Evaluation ev(binding);
        Tensor ad = ev.value(grad_of(grads, g.params[pi]));
        for (std::int64_t j = 0; j < params[pi].numel(); ++j) {
            double fd = central_diff(
                [&](double v) {
                    MlpParams perturbed = params;
                    perturbed[pi][j] = v;
                    Binding bb = binding;
                    bb[g.params[pi].get()] = perturbed[pi];
                    return eval(g.loss_ce, bb).item();
                },
                params[pi][j]);
            max_err = std::max(max_err, rel_err(ad[j], fd));
        }
    }
    CHECK(max_err < 1e-4);
}

TEST_CASE("analytic second derivative through a recorded gradient") {
    // f(x) = x^3, g = df/dx = 3x^2, dg/dx at x=2 is 12.
    Expr x = leaf("x", {1});
    Expr f = x * x * x;
    auto inner = gradients(f, {x});
    Expr g = grad_of(inner, x);
    auto outer = gradients(g, {x});
    Binding b;
    bind_leaf(b, x, Tensor::scalar(2.0));
    CHECK(eval(grad_of(outer, x), b).item() == Approx(12.0));
}

namespace {

// Cosine-matching loss between the weight gradient at x and a fixed target
// gradient, the inner/outer structure used by the reconstruction attack.
struct MatchingProblem {
    MlpSpec spec;
    MlpParams weights;
    Expr x;
    Expr loss;
    Binding base;

    MatchingProblem(int input_dim, int hidden, std::uint64_t seed) {
        spec.input_dim = input_dim;
        spec.widths = hidden > 0 ? std::vector<std::int64_t>{hidden, 2} : std::vector<std::int64_t>{2};
        spec.seed = seed;
        weights = init_model(spec);

        x = leaf("x", {1, input_dim});
        std::vector<Expr> wleaves;
        for (std::size_t i = 0; i < weights.size(); ++i) wleaves.push_back(leaf("w" + std::to_string(i), weights[i].shape()));
        MlpGraph g = build_mlp_on(spec, x, wleaves);

        Binding tmp;
        Rng rng(seed ^ 0x5bd1e995);
        Tensor x0({1, input_dim});
        for (std::int64_t i = 0; i < x0.numel(); ++i) x0[i] = rng.uniform(-1, 1);
        Tensor target = one_hot({1}, 2);
        bind_leaf(tmp, x, x0);
        bind_leaf(tmp, g.target, target);
        for (std::size_t i = 0; i < weights.size(); ++i) bind_leaf(tmp, wleaves[i], weights[i]);

        auto wgrads = gradients(g.loss_ce, wleaves);
        std::vector<Expr> flat;
        for (const auto& w : wleaves) flat.push_back(flatten(grad_of(wgrads, w)));
        Expr gvec = concat(flat);

        // Frozen target gradient computed at x0.
        Tensor target_grad = eval(gvec, tmp);

        Expr t = constant(target_grad);
        Expr dot = sum_all(gvec * t);
        Expr denom = max_ew(sqrt(sum_all(gvec * gvec)) * sqrt(sum_all(t * t)), scalar(1e-12));
        loss = scalar(1.0) - dot / denom;

        base = tmp;
        base_x0 = x0;
    }

    Tensor base_x0;
};

}  // namespace

TEST_CASE("cosine matching loss has zero outer gradient at the matching point") {
    MatchingProblem p(4, 3, 21);
    auto outer = gradients(p.loss, {p.x});
    Tensor g = eval(grad_of(outer, p.x), p.base);
    for (std::int64_t i = 0; i < g.numel(); ++i) CHECK(std::abs(g[i]) < 1e-8);
}

TEST_CASE("nested gradient of the matching loss matches finite differences") {
    MatchingProblem p(4, 3, 33);
    auto outer = gradients(p.loss, {p.x});

    // Move x away from the matching point so the gradient is nonzero.
    Binding b = p.base;
    Tensor x_at = p.base_x0;
    Rng rng(99);
    for (std::int64_t i = 0; i < x_at.numel(); ++i) x_at[i] += rng.uniform(-0.3, 0.3);
    b[p.x.get()] = x_at;

    Tensor ad = eval(grad_of(outer, p.x), b);
    double max_err = 0;
    for (std::int64_t i = 0; i < x_at.numel(); ++i) {
        double fd = central_diff(
            [&](double v) {
                Binding bb = b;
                Tensor xt = x_at;
                xt[i] = v;
                bb[p.x.get()] = xt;
                return eval(p.loss, bb).item();
            },
            x_at[i]);
        max_err = std::max(max_err, rel_err(ad[i], fd));
    }
    CHECK(max_err < 1e-3);
}

TEST_CASE("nested gradient of a quadratic loss equals the analytic Hessian-vector product") {
    // f(x) = ||A x - b||^2 with x [n,1]: grad f = 2 A^T (A x - b), and the
    // gradient of c . grad f with respect to x is the exact HVP 2 A^T A c.
    const std::int64_t m = 7, n = 5;
    Rng rng(51);
    Tensor a({m, n}), b({m, 1}), c({n, 1}), x0({n, 1});
    for (std::int64_t i = 0; i < a.numel(); ++i) a[i] = rng.uniform(-1, 1);
    for (std::int64_t i = 0; i < m; ++i) b[i] = rng.uniform(-1, 1);
    for (std::int64_t i = 0; i < n; ++i) {
        c[i] = rng.uniform(-1, 1);
        x0[i] = rng.uniform(-1, 1);
    }

    Expr x = leaf("x", {n, 1});
    Expr residual = matmul(constant(a), x) - constant(b);
    Expr f = sum_all(residual * residual);
    Expr inner = grad_of(gradients(f, {x}), x);            // [n,1]
    Expr scalar_probe = sum_all(constant(c) * inner);      // c . grad f
    Expr outer = grad_of(gradients(scalar_probe, {x}), x);

    Binding binding;
    bind_leaf(binding, x, x0);
    Tensor got = eval(outer, binding);

    // analytic 2 A^T A c
    Tensor want({n, 1});
    for (std::int64_t i = 0; i < n; ++i) {
        double total = 0;
        for (std::int64_t k = 0; k < m; ++k) {
            double row = 0;
            for (std::int64_t j = 0; j < n; ++j) row += a.at(k, j) * c[j];
            total += a.at(k, i) * row;
        }
        want[i] = 2.0 * total;
    }
    for (std::int64_t i = 0; i < n; ++i) CHECK(got[i] == Approx(want[i]).epsilon(1e-10));
}

TEST_CASE("evaluation is deterministic") {
    MlpSpec spec;
    spec.input_dim = 8;
    spec.widths = {5, 3};
    spec.seed = 3;
    MlpParams params = init_model(spec);
    Rng rng(17);
    Tensor x({4, 8});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
    Tensor a = predict(spec, params, x);
    Tensor b = predict(spec, params, x);
    CHECK(a == b);
}
