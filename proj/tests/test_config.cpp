#define CATCH_CONFIG_MAIN
#include <catch2/catch.hpp>

#include "recup/config.hpp"
#include "recup/toml.hpp"

using namespace recup;

TEST_CASE("toml scalars, arrays, and comments") {
    TomlTable t = parse_toml_string(R"(
top = 1
[alpha]            # section
name = "hello # not a comment"
count = 42         # trailing comment
ratio = 0.25
flag = true
values = [1, 2, 3]
mixed = ["a", "b"]
multi = [
  10,
  20,   # comment inside
]
)");
    CHECK(t.get("", "top").as_int() == 1);
    CHECK(t.get("alpha", "name").as_string() == "hello # not a comment");
    CHECK(t.get("alpha", "count").as_int() == 42);
    CHECK(t.get("alpha", "ratio").as_float() == 0.25);
    CHECK(t.get("alpha", "flag").as_bool());
    CHECK(t.get("alpha", "values").as_array().size() == 3);
    CHECK(t.get("alpha", "mixed").as_array()[1].as_string() == "b");
    CHECK(t.get("alpha", "multi").as_array()[1].as_int() == 20);
    CHECK(t.get_int("alpha", "absent", 7) == 7);
}

TEST_CASE("toml errors carry line numbers") {
    CHECK_THROWS_AS(parse_toml_string("a ="), config_error);
    CHECK_THROWS_AS(parse_toml_string("[broken"), config_error);
    CHECK_THROWS_AS(parse_toml_string("x = [1, 2"), config_error);
    try {
        parse_toml_string("ok = 1\nbad value");
    } catch (const config_error& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("experiment defaults follow the published configuration") {
    ExperimentConfig cfg = parse_experiment_config(parse_toml_string(R"(
[dataset]
kind = "synthetic"
attributes = ["a:2"]
[defense]
kind = "recup"
param = 0.05
protect = ["a"]
)"));
    CHECK(cfg.defense.outer_iterations == 10);       // P
    CHECK(cfg.defense.models_per_iteration == 5);    // Q
    CHECK(cfg.zoo.count == 20);
    CHECK(cfg.zoo.widths == std::vector<std::int64_t>{128, 256, 512, 1024, 2048});
    CHECK(cfg.zoo.hidden_layers == 3);
    CHECK(cfg.zoo.epochs == 80);
    CHECK(cfg.zoo.lr == 0.01);
    CHECK(cfg.attack.pool_target_width == 1024);
    CHECK(cfg.attack.hyper.forest.trees == 120);
    CHECK(cfg.attack.hyper.unkwn_widths == std::vector<std::int64_t>{1024, 1024, 512, 128});
    CHECK(cfg.attack.hyper.nn_epochs == 80);
    CHECK(cfg.attack.hyper.nn_lr == 0.01);
    CHECK(cfg.reconstruction.cfg.iterations == 2000);
    CHECK(cfg.zoo_sizes == std::vector<int>{5, 10, 15, 20});
    // attribute to infer defaults to the protected attribute
    CHECK(cfg.attack.attributes() == std::vector<std::string>{"a"});
}

TEST_CASE("evaluation rounds default to beginning, middle, and end of training") {
    ExperimentConfig cfg = parse_experiment_config(parse_toml_string(R"(
[dataset]
attributes = ["a:2"]
[fl]
rounds = 10
)"));
    CHECK(cfg.attack.eval_rounds == std::vector<int>{1, 5, 10});

    ExperimentConfig one_round = parse_experiment_config(parse_toml_string(R"(
[dataset]
attributes = ["a:2"]
)"));
    CHECK(one_round.attack.eval_rounds == std::vector<int>{1});
}

TEST_CASE("sweep grids") {
    DefenseConfig d;
    d.kind = DefenseKind::dp_gaussian;
    d.sweep = {0.01, 1.0};
    d.sweep_steps = 3;
    d.sweep_scale = "log";
    auto log_vals = d.param_values();
    REQUIRE(log_vals.size() == 3);
    CHECK(log_vals[0] == Approx(0.01));
    CHECK(log_vals[1] == Approx(0.1));
    CHECK(log_vals[2] == Approx(1.0));

    d.sweep_scale = "linear";
    auto lin_vals = d.param_values();
    CHECK(lin_vals[1] == Approx(0.505));

    d.sweep_scale = "bogus";
    CHECK_THROWS_AS(d.param_values(), config_error);
    d.sweep_scale = "log";
    d.sweep = {0.0, 1.0};
    CHECK_THROWS_AS(d.param_values(), config_error);
}

TEST_CASE("config validation catches bad ranges") {
    CHECK_THROWS_AS(parse_experiment_config(parse_toml_string(R"(
[dataset]
attributes = ["a:2"]
[defense]
kind = "sparsify"
param = 1.5
)")),
                    config_error);
    CHECK_THROWS_AS(parse_experiment_config(parse_toml_string(R"(
[dataset]
attributes = ["a:2"]
[defense]
kind = "recup"
param = 0.01
)")),
                    config_error);  // recup without protected attributes
    CHECK_THROWS_AS(parse_experiment_config(parse_toml_string(R"(
[dataset]
attributes = ["a:2"]
[fl]
rounds = 2
[attack]
rounds = [5]
)")),
                    config_error);  // evaluation round beyond fl rounds
    CHECK_THROWS_AS(defense_kind_from_string("frobnicate"), config_error);
}
