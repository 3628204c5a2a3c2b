#define CATCH_CONFIG_MAIN
#include <catch2/catch.hpp>

#include "recup/optim.hpp"

using namespace recup;

TEST_CASE("sgd_step applies params - lr*grad") {
    std::vector<Tensor> p{Tensor::vec({1.0})};
    sgd_step(p, {Tensor::vec({2.0})}, 0.5);
    CHECK(p[0][0] == 0.0);
}

TEST_CASE("sgd_step with lr=0 leaves params unchanged") {
    std::vector<Tensor> p{Tensor::vec({1.5, -2.0})};
    sgd_step(p, {Tensor::vec({3.0, 4.0})}, 0.0);
    CHECK(p[0] == Tensor::vec({1.5, -2.0}));
}

TEST_CASE("sgd_step rejects shape mismatches") {
    std::vector<Tensor> p{Tensor::vec({1.0, 2.0})};
    CHECK_THROWS_AS(sgd_step(p, {Tensor::vec({1.0})}, 0.1), usage_error);
}

TEST_CASE("adam with zero gradients keeps params unchanged") {
    std::vector<Tensor> p{Tensor::vec({0.7, -0.3})};
    AdamState st = AdamState::like(p);
    for (int i = 0; i < 5; ++i) adam_step(p, st, {Tensor::vec({0.0, 0.0})}, 0.1);
    CHECK(p[0] == Tensor::vec({0.7, -0.3}));
}

TEST_CASE("single adam step matches the hand-computed update") {
    // g=1, lr=0.1, zero moments: m_hat=1, v_hat=1, delta = -0.1/(1+1e-8).
    std::vector<Tensor> p{Tensor::vec({0.0})};
    AdamState st = AdamState::like(p);
    adam_step(p, st, {Tensor::vec({1.0})}, 0.1);
    CHECK(p[0][0] == Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("constant gradient drives monotone motion against its sign") {
    std::vector<Tensor> p{Tensor::vec({0.5})};
    AdamState st = AdamState::like(p);
    double prev = p[0][0];
    for (int i = 0; i < 100; ++i) {
        adam_step(p, st, {Tensor::vec({0.25})}, 0.01);
        CHECK(p[0][0] < prev);
        prev = p[0][0];
    }
}
