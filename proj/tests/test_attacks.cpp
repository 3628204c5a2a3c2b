#define CATCH_CONFIG_MAIN
#include <catch2/catch.hpp>

#include <cstdio>
#include <fstream>

#include "recup/attacks.hpp"

using namespace recup;

namespace {

ModelUpdate update_from(std::vector<Tensor> layers) {
    ModelUpdate u;
    u.layers = std::move(layers);
    return u;
}

std::pair<Tensor, std::vector<int>> blobs(std::int64_t n, std::int64_t d, std::uint64_t seed) {
    Rng rng(seed);
    Tensor x({n, d});
    std::vector<int> y;
    for (std::int64_t i = 0; i < n; ++i) {
        int label = static_cast<int>(i % 2);
        for (std::int64_t j = 0; j < d; ++j) x.at(i, j) = rng.normal(label == 0 ? -2.0 : 2.0, 0.4);
        y.push_back(label);
    }
    return {std::move(x), std::move(y)};
}

}  // namespace

TEST_CASE("pooling with window 1 is the elementwise magnitude") {
    ModelUpdate u = update_from({Tensor::vec({1, -3, 2})});
    PooledFeatures f = pool_gradients(u, 1);
    CHECK(f.values == Tensor::vec({1, 3, 2}));
}

TEST_CASE("pooling reference example") {
    ModelUpdate u = update_from({Tensor::vec({1, 3, 2, 0})});
    CHECK(pool_gradients(u, 2).values == Tensor::vec({3, 2}));
}

TEST_CASE("pooled width follows the per-layer ceiling formula") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Shape> shapes{{rng.uniform_int(9) + 1, rng.uniform_int(7) + 1}, {rng.uniform_int(13) + 1}};
        ModelUpdate u;
        for (const auto& s : shapes) u.layers.push_back(Tensor::full(s, 1.0));
        std::int64_t window = rng.uniform_int(4) + 1;
        std::int64_t want = 0;
        for (const auto& t : u.layers) want += (t.numel() + window - 1) / window;
        CHECK(pool_gradients(u, window).values.numel() == want);
    }
}

TEST_CASE("perturbations that change a window maximum are visible to the adversary pipeline") {
    ModelUpdate u = update_from({Tensor::vec({0.5, 1.0, -0.2, 0.1})});
    ModelUpdate v = u;
    v.layers[0][1] += 0.5;  // changes the max of window {0.5, 1.0}
    CHECK_FALSE(pool_gradients(u, 2).values == pool_gradients(v, 2).values);
}

TEST_CASE("adversary dataset pairs one feature vector per sample, deterministically") {
    SynthSpec sspec;
    sspec.dim = 5;
    sspec.n = 6;
    sspec.seed = 3;
    Dataset ds = synth_generate(sspec);
    ds.samples[1] = ds.samples[0];  // identical samples -> identical features

    MlpSpec spec;
    spec.input_dim = 5;
    spec.widths = {4, 2};
    spec.seed = 2;
    GlobalModelState g = init_global(spec);
    auto [x, y] = build_adversary_dataset(g, ds, "attr_a", 1, LossKind::cross_entropy);
    CHECK(x.rows() == 6);
    CHECK(y.size() == 6);
    for (std::int64_t j = 0; j < x.cols(); ++j) CHECK(x.at(0, j) == x.at(1, j));
}

TEST_CASE("every adversary kind fits separable data") {
    auto [x, y] = blobs(40, 6, 11);
    AdversaryHyper hyper;
    hyper.nn_epochs = 40;
    hyper.stru_width_choices = {8, 16};
    hyper.unkwn_widths = {16, 16, 8, 8};  // desk-scale stand-in for the fixed spec
    hyper.forest.trees = 20;
    for (auto kind : {AdversaryKind::stru_nn, AdversaryKind::unkwn_nn, AdversaryKind::svm_rbf,
                      AdversaryKind::random_forest}) {
        Rng rng(100 + static_cast<std::uint64_t>(kind));
        AdversaryModel adv = train_adversary(kind, x, y, 2, "attr", 1, hyper, rng);
        INFO(to_string(kind));
        CHECK(adv.train_accuracy >= 0.95);
    }
}

TEST_CASE("published adversary defaults") {
    AdversaryHyper hyper;
    CHECK(hyper.forest.trees == 120);
    CHECK(hyper.unkwn_widths == std::vector<std::int64_t>{1024, 1024, 512, 128});
    CHECK(hyper.nn_epochs == 80);
    CHECK(hyper.nn_lr == 0.01);
}

TEST_CASE("single-class training data is refused") {
    Tensor x({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
    std::vector<int> y{0, 0, 0, 0};
    AdversaryHyper hyper;
    Rng rng(1);
    CHECK_THROWS_AS(train_adversary(AdversaryKind::svm_rbf, x, y, 2, "attr", 1, hyper, rng), config_error);
}

TEST_CASE("svm training satisfies the KKT conditions within tolerance") {
    auto [x, y] = blobs(50, 4, 21);
    SvmHyper hyper;
    SvmTrainReport report;
    std::vector<int> labels = y;
    train_svm(x, labels, 2, hyper, &report);
    CHECK(report.max_kkt_violation <= hyper.tol + 1e-9);
}

TEST_CASE("forest majority vote equals the mode of individual tree votes") {
    auto [x, y] = blobs(30, 4, 31);
    ForestHyper hyper;
    hyper.trees = 15;
    Rng rng(77);
    Forest forest = train_forest(x, y, 2, hyper, rng);
    Rng probe(5);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> q(4);
        for (auto& v : q) v = probe.normal(0, 2.5);
        std::vector<int> votes(2, 0);
        for (std::size_t k = 0; k < forest.trees.size(); ++k) ++votes[static_cast<std::size_t>(forest.tree_vote(k, q.data()))];
        int mode = votes[1] > votes[0] ? 1 : 0;
        CHECK(forest.predict(q.data()) == mode);
    }
}

TEST_CASE("infer_attribute is deterministic on the training distribution") {
    auto [x, y] = blobs(30, 5, 41);
    AdversaryHyper hyper;
    hyper.forest.trees = 10;
    Rng rng(9);
    AdversaryModel adv = train_adversary(AdversaryKind::random_forest, x, y, 2, "attr", 1, hyper, rng);
    ModelUpdate u = update_from({Tensor::vec({-2, -2, -2, -2, -2})});
    CHECK(infer_attribute(adv, u) == infer_attribute(adv, u));
}

TEST_CASE("asr counts exact fractions") {
    auto [x, y] = blobs(30, 3, 51);
    AdversaryHyper hyper;
    hyper.forest.trees = 10;
    Rng rng(2);
    AdversaryModel adv = train_adversary(AdversaryKind::random_forest, x, y, 2, "attr", 1, hyper, rng);

    // Hand-built evaluation set: 3 correctly labeled, 1 deliberately wrong.
    std::vector<std::pair<ModelUpdate, int>> eval_set;
    for (int i = 0; i < 4; ++i) {
        ModelUpdate u = update_from({Tensor::vec({2, 2, 2})});
        int predicted = infer_attribute(adv, u);
        eval_set.emplace_back(std::move(u), i < 3 ? predicted : 1 - predicted);
    }
    CHECK(asr(adv, eval_set) == 0.75);
    CHECK_THROWS_AS(asr(adv, {}), usage_error);
}

TEST_CASE("reconstruction mse reference values") {
    CHECK(reconstruction_mse(Tensor::vec({1, 2}), Tensor::vec({1, 2})) == 0.0);
    CHECK(reconstruction_mse(Tensor::vec({0, 0}), Tensor::vec({1, 1})) == 1.0);
    Tensor a = Tensor::vec({1, 2, 3}), b = Tensor::vec({4, 5, 7});
    Tensor ap = Tensor::vec({3, 1, 2}), bp = Tensor::vec({7, 4, 5});
    CHECK(reconstruction_mse(a, b) == Approx(reconstruction_mse(ap, bp)));
}

namespace {

struct ReconFixture {
    MlpSpec spec;
    MlpParams weights;
    Tensor x0;
    ModelUpdate target;

    explicit ReconFixture(std::uint64_t seed, std::int64_t d = 8) {
        spec.input_dim = d;
        spec.widths = {6, 2};
        spec.seed = seed;
        weights = init_model(spec);
        Rng rng(seed + 1);
        x0 = Tensor({1, d});
        for (std::int64_t i = 0; i < d; ++i) x0[i] = rng.normal();
        GlobalModelState g;
        g.spec = spec;
        g.weights = weights;
        FlConfig cfg;
        target = client_update(g, x0, {1}, cfg);
    }
};

}  // namespace

TEST_CASE("reconstruction initialized at the true input stays there") {
    ReconFixture fx(61);
    ReconstructionConfig cfg;
    cfg.iterations = 5;
    Rng rng(3);
    ReconstructionResult r = reconstruct(fx.target, fx.spec, fx.weights, 1, cfg, rng, &fx.x0);
    CHECK(r.loss_trace.front() <= 1e-9);
    CHECK(r.best_loss <= 1e-9);
    CHECK(reconstruction_mse(r.input, fx.x0) <= 1e-12);
}

TEST_CASE("reconstruction is deterministic and its best loss never increases") {
    ReconFixture fx(62);
    ReconstructionConfig cfg;
    cfg.iterations = 120;
    Rng r1(7), r2(7);
    ReconstructionResult a = reconstruct(fx.target, fx.spec, fx.weights, 1, cfg, r1);
    ReconstructionResult b = reconstruct(fx.target, fx.spec, fx.weights, 1, cfg, r2);
    CHECK(a.input == b.input);
    CHECK(a.loss_trace == b.loss_trace);
    double best = a.loss_trace.front();
    for (double v : a.loss_trace) {
        best = std::min(best, v);
        CHECK(best <= a.loss_trace.front() + 1e-12);
    }
    CHECK(a.best_loss == best);
}

TEST_CASE("reconstruction default iteration budget is 2000") { CHECK(ReconstructionConfig{}.iterations == 2000); }

TEST_CASE("reconstruction beats random guessing on a tiny model") {
    ReconFixture fx(63);
    ReconstructionConfig cfg;
    cfg.iterations = 400;
    Rng rng(17);
    ReconstructionResult r = reconstruct(fx.target, fx.spec, fx.weights, 1, cfg, rng);
    double got = reconstruction_mse(r.input, fx.x0);

    Rng base(29);
    std::vector<double> random_mse;
    for (int t = 0; t < 20; ++t) {
        Tensor guess({1, 8});
        for (std::int64_t i = 0; i < 8; ++i) guess[i] = base.normal();
        random_mse.push_back(reconstruction_mse(guess, fx.x0));
    }
    std::sort(random_mse.begin(), random_mse.end());
    CHECK(got < random_mse[1]);  // below the 10th percentile of 20 draws
}

TEST_CASE("pgm export quantizes exactly") {
    Tensor img({2, 2}, {0.0, 1.0, 0.5, 2.0});
    std::string path = "/tmp/recup_test_img.pgm";
    write_pgm(img, path);
    std::ifstream in(path, std::ios::binary);
    std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    REQUIRE(contents.size() >= 4);
    std::string pixels = contents.substr(contents.size() - 4);
    CHECK(static_cast<unsigned char>(pixels[0]) == 0);
    CHECK(static_cast<unsigned char>(pixels[1]) == 255);
    CHECK(static_cast<unsigned char>(pixels[2]) == 128);  // round(255*0.5)
    CHECK(static_cast<unsigned char>(pixels[3]) == 255);  // clamped
    std::remove(path.c_str());
}
