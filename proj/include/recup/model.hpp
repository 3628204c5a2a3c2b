#pragma once

// Fully-connected classifier models: spec, seeded initialization, forward
// graphs, losses, SGD training, and the substitute-model zoo with its JSON
// serialization format (.zoo.json).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "recup/errors.hpp"
#include "recup/graph.hpp"
#include "recup/optim.hpp"
#include "recup/tensor.hpp"

namespace recup {

enum class Activation { relu, sigmoid };
enum class OutputKind { softmax, sigmoid };
enum class LossKind { cross_entropy, mean_squared_error };

struct MlpSpec {
    std::int64_t input_dim = 0;
    std::vector<std::int64_t> widths;  // hidden widths followed by the output width
    Activation activation = Activation::relu;
    OutputKind output = OutputKind::softmax;
    std::uint64_t seed = 0;

    void validate() const {
        if (input_dim <= 0) throw config_error("MlpSpec: input_dim must be positive");
        if (widths.empty()) throw config_error("MlpSpec: at least an output layer is required");
        for (auto w : widths)
            if (w <= 0) throw config_error("MlpSpec: layer widths must be positive");
        if (output == OutputKind::sigmoid && widths.back() != 1)
            throw config_error("MlpSpec: sigmoid output requires a single output unit");
    }

    std::int64_t num_classes() const { return output == OutputKind::sigmoid ? 2 : widths.back(); }

    std::int64_t param_count() const {
        std::int64_t n = 0, in = input_dim;
        for (auto w : widths) {
            n += in * w + w;
            in = w;
        }
        return n;
    }
};

using MlpParams = std::vector<Tensor>;  // W0, b0, W1, b1, ...

// Scaled-uniform initialization: W ~ U(-a, a) with a = sqrt(6/(fan_in+fan_out)),
// biases zero. Pure function of (spec, seed).
inline MlpParams init_model(const MlpSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    MlpParams params;
    std::int64_t in = spec.input_dim;
    for (auto w : spec.widths) {
        double a = std::sqrt(6.0 / static_cast<double>(in + w));
        Tensor weight({in, w});
        for (std::int64_t i = 0; i < weight.numel(); ++i) weight[i] = rng.uniform(-a, a);
        params.push_back(std::move(weight));
        params.push_back(Tensor::zeros({w}));
        in = w;
    }
    return params;
}

inline std::vector<Shape> param_shapes(const MlpSpec& spec) {
    std::vector<Shape> shapes;
    std::int64_t in = spec.input_dim;
    for (auto w : spec.widths) {
        shapes.push_back({in, w});
        shapes.push_back({w});
        in = w;
    }
    return shapes;
}

struct MlpGraph {
    Expr input;                // [batch, input_dim]
    std::vector<Expr> params;  // leaves in init_model order
    Expr logits;               // [batch, out]
    Expr probs;                // [batch, num_classes]
    Expr target;               // [batch, num_classes] one-hot leaf
    Expr loss_ce;              // scalar, mean over batch, log clamped at 1e-12
    Expr loss_mse;             // scalar, mean over batch*classes
};

// Builds the forward/loss graph on top of an arbitrary input expression.
// `params` may be leaves (trainable) or constants (frozen model).
inline MlpGraph build_mlp_on(const MlpSpec& spec, Expr input, std::vector<Expr> params) {
    MlpGraph g;
    g.input = input;
    g.params = params;
    Expr h = input;
    for (std::size_t layer = 0; layer < spec.widths.size(); ++layer) {
        Expr z = matmul(h, params[2 * layer]) + params[2 * layer + 1];
        if (layer + 1 == spec.widths.size()) {
            g.logits = z;
        } else {
            h = spec.activation == Activation::relu ? relu(z) : sigmoid(z);
        }
    }
    std::int64_t batch = input.shape()[0];
    if (spec.output == OutputKind::softmax) {
        g.probs = softmax_rows(g.logits);
    } else {
        // Single sigmoid unit expanded to a [1-s, s] probability pair.
        Expr s = sigmoid(g.logits);
        g.probs = matmul(s, constant(Tensor::row({0.0, 1.0}))) +
                  matmul(constant(Tensor::full({batch, 1}, 1.0)) - s, constant(Tensor::row({1.0, 0.0})));
    }
    std::int64_t classes = spec.num_classes();
    g.target = leaf("target", {batch, classes});
    Expr clamped = max_ew(g.probs, scalar(1e-12));
    g.loss_ce = -sum_all(g.target * log(clamped)) / scalar(static_cast<double>(batch));
    Expr diff = g.probs - g.target;
    g.loss_mse = sum_all(diff * diff) / scalar(static_cast<double>(batch * classes));
    return g;
}

inline MlpGraph build_mlp_graph(const MlpSpec& spec, std::int64_t batch) {
    spec.validate();
    std::vector<Expr> params;
    auto shapes = param_shapes(spec);
    for (std::size_t i = 0; i < shapes.size(); ++i) params.push_back(leaf("p" + std::to_string(i), shapes[i]));
    return build_mlp_on(spec, leaf("x", {batch, spec.input_dim}), std::move(params));
}

inline Tensor one_hot(const std::vector<int>& labels, std::int64_t classes) {
    Tensor t({static_cast<std::int64_t>(labels.size()), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes)
            throw config_error("label " + std::to_string(labels[i]) + " outside " + std::to_string(classes) +
                               " classes");
        t.at(static_cast<std::int64_t>(i), labels[i]) = 1.0;
    }
    return t;
}

inline int argmax_row(const Tensor& t, std::int64_t row) {
    std::int64_t c = t.cols();
    int best = 0;
    for (std::int64_t j = 1; j < c; ++j)
        if (t.at(row, j) > t.at(row, best)) best = static_cast<int>(j);
    return best;
}

// Class probabilities for a batch of inputs, rows summing to 1.
inline Tensor predict(const MlpSpec& spec, const MlpParams& params, const Tensor& x) {
    if (x.shape().size() != 2 || x.shape()[1] != spec.input_dim)
        throw config_error("predict: input shape " + shape_str(x.shape()) + " does not match input_dim " +
                           std::to_string(spec.input_dim));
    MlpGraph g = build_mlp_graph(spec, x.shape()[0]);
    Binding binding;
    bind_leaf(binding, g.input, x);
    for (std::size_t i = 0; i < params.size(); ++i) bind_leaf(binding, g.params[i], params[i]);
    return eval(g.probs, binding);
}

// Loss between predicted probabilities and integer class targets.
inline double loss(const Tensor& pred, const std::vector<int>& targets, LossKind kind) {
    if (pred.rows() != static_cast<std::int64_t>(targets.size()))
        throw usage_error("loss: prediction/target count mismatch");
    std::int64_t classes = pred.cols();
    if (kind == LossKind::cross_entropy) {
        double total = 0;
        for (std::int64_t i = 0; i < pred.rows(); ++i) {
            double row_sum = 0;
            for (std::int64_t j = 0; j < classes; ++j) {
                double p = pred.at(i, j);
                if (p < -1e-9 || p > 1.0 + 1e-9) throw usage_error("loss: invalid probability " + std::to_string(p));
                row_sum += p;
            }
            if (std::abs(row_sum - 1.0) > 1e-6)
                throw usage_error("loss: probability row sums to " + std::to_string(row_sum));
            total += -std::log(std::max(pred.at(i, targets[static_cast<std::size_t>(i)]), 1e-12));
        }
        return total / static_cast<double>(pred.rows());
    }
    Tensor target = one_hot(targets, classes);
    double total = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        double d = pred[i] - target[i];
        total += d * d;
    }
    return total / static_cast<double>(pred.numel());
}

inline double mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw usage_error("mse: shape mismatch");
    double total = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        double d = a[i] - b[i];
        total += d * d;
    }
    return total / static_cast<double>(a.numel());
}

struct FitOptions {
    int epochs = 80;
    double lr = 0.01;
    std::int64_t batch_size = 32;
    LossKind loss = LossKind::cross_entropy;
};

inline double accuracy(const MlpSpec& spec, const MlpParams& params, const Tensor& x, const std::vector<int>& y) {
    Tensor probs = predict(spec, params, x);
    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < probs.rows(); ++i)
        if (argmax_row(probs, i) == y[static_cast<std::size_t>(i)]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(probs.rows());
}

// Plain minibatch SGD. Deterministic for a given rng state; graphs are built
// once per distinct batch size and reused across steps.
inline void fit_mlp(const MlpSpec& spec, MlpParams& params, const Tensor& x, const std::vector<int>& y,
                    const FitOptions& opt, Rng& rng) {
    std::int64_t n = x.rows();
    if (n == 0) throw usage_error("fit_mlp: empty dataset");
    std::int64_t classes = spec.num_classes();
    std::int64_t d = spec.input_dim;
    std::map<std::int64_t, MlpGraph> graphs;
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::int64_t start = 0; start < n; start += opt.batch_size) {
            std::int64_t bs = std::min(opt.batch_size, n - start);
            auto [it, fresh] = graphs.try_emplace(bs);
            if (fresh) it->second = build_mlp_graph(spec, bs);
            MlpGraph& g = it->second;

            Tensor bx({bs, d});
            Tensor bt({bs, classes});
            for (std::int64_t r = 0; r < bs; ++r) {
                std::int64_t src = order[static_cast<std::size_t>(start + r)];
                for (std::int64_t c = 0; c < d; ++c) bx.at(r, c) = x.at(src, c);
                bt.at(r, y[static_cast<std::size_t>(src)]) = 1.0;
            }

            Binding binding;
            bind_leaf(binding, g.input, std::move(bx));
            bind_leaf(binding, g.target, std::move(bt));
            for (std::size_t i = 0; i < params.size(); ++i) bind_leaf(binding, g.params[i], params[i]);

            Expr loss_expr = opt.loss == LossKind::cross_entropy ? g.loss_ce : g.loss_mse;
            GradientMap grads = gradients(loss_expr, g.params);
            Evaluation ev(binding);
            std::vector<Tensor> grad_values;
            grad_values.reserve(params.size());
            for (const auto& p : g.params) grad_values.push_back(ev.value(grad_of(grads, p)));
            sgd_step(params, grad_values, opt.lr);
        }
    }
}

// ---------------------------------------------------------------------------
// Model zoo
// ---------------------------------------------------------------------------

struct ZooMember {
    MlpSpec spec;
    MlpParams weights;
    double train_accuracy = 0.0;
};

struct ModelZoo {
    std::string attribute_id;
    std::int64_t feature_dim = 0;
    std::int64_t pool_window = 1;
    std::int64_t num_classes = 0;
    std::vector<ZooMember> members;
};

using SpecSampler = std::function<MlpSpec(int member_index, std::int64_t input_dim, std::int64_t classes, Rng& rng)>;

// Three hidden layers with widths sampled uniformly from `width_choices`.
inline SpecSampler default_zoo_sampler(std::vector<std::int64_t> width_choices = {128, 256, 512, 1024, 2048},
                                       int hidden_layers = 3) {
    return [width_choices, hidden_layers](int, std::int64_t input_dim, std::int64_t classes, Rng& rng) {
        MlpSpec spec;
        spec.input_dim = input_dim;
        for (int i = 0; i < hidden_layers; ++i)
            spec.widths.push_back(width_choices[static_cast<std::size_t>(
                rng.uniform_int(static_cast<std::int64_t>(width_choices.size())))]);
        spec.widths.push_back(classes);
        spec.activation = Activation::relu;
        spec.output = OutputKind::softmax;
        spec.seed = rng.next_u64();
        return spec;
    };
}

struct ZooTrainOptions {
    int count = 20;
    int epochs = 80;
    double lr = 0.01;
    std::int64_t batch_size = 32;
    int min_members = 2;  // the Q the zoo must support
};

inline ModelZoo train_zoo(const Tensor& features, const std::vector<int>& labels, std::int64_t num_classes,
                          const std::string& attribute_id, std::int64_t pool_window, const ZooTrainOptions& opt,
                          const SpecSampler& sampler, Rng& rng) {
    if (opt.count < opt.min_members)
        throw config_error("train_zoo: zoo size " + std::to_string(opt.count) + " is below the required minimum " +
                           std::to_string(opt.min_members));
    if (features.rows() != static_cast<std::int64_t>(labels.size()))
        throw config_error("train_zoo: feature/label count mismatch");
    bool multi_class = false;
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (labels[i] != labels[0]) {
            multi_class = true;
            break;
        }
    if (!multi_class) throw config_error("train_zoo: degenerate dataset, all samples share attribute class " +
                                         std::to_string(labels.empty() ? -1 : labels[0]));

    ModelZoo zoo;
    zoo.attribute_id = attribute_id;
    zoo.feature_dim = features.cols();
    zoo.pool_window = pool_window;
    zoo.num_classes = num_classes;
    for (int i = 0; i < opt.count; ++i) {
        Rng member_rng = rng.fork(static_cast<std::uint64_t>(i) + 1);
        MlpSpec spec = sampler(i, features.cols(), num_classes, member_rng);
        spec.validate();
        ZooMember member;
        member.spec = spec;
        member.weights = init_model(spec);
        FitOptions fit;
        fit.epochs = opt.epochs;
        fit.lr = opt.lr;
        fit.batch_size = opt.batch_size;
        fit_mlp(spec, member.weights, features, labels, fit, member_rng);
        member.train_accuracy = accuracy(spec, member.weights, features, labels);
        zoo.members.push_back(std::move(member));
    }
    return zoo;
}

// ---------------------------------------------------------------------------
// Zoo serialization (.zoo.json): JSON envelope, weights as base64 blobs of
// little-endian 64-bit floats. Round-trips bit-exactly.
// ---------------------------------------------------------------------------

namespace detail {

inline const char* b64_alphabet() { return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"; }

inline std::string base64_encode(const unsigned char* data, std::size_t len) {
    const char* tab = b64_alphabet();
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        unsigned v = data[i] << 16;
        if (i + 1 < len) v |= data[i + 1] << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? tab[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? tab[v & 63] : '=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (s.size() % 4 != 0) throw parse_error("base64 payload length not a multiple of 4", s.size());
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (std::size_t i = 0; i < s.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int j = 0; j < 4; ++j) {
            char c = s[i + static_cast<std::size_t>(j)];
            if (c == '=') {
                vals[j] = 0;
                ++pad;
            } else {
                vals[j] = value_of(c);
                if (vals[j] < 0 || pad > 0) throw parse_error("invalid base64 character", i + static_cast<std::size_t>(j));
            }
        }
        unsigned v = (static_cast<unsigned>(vals[0]) << 18) | (static_cast<unsigned>(vals[1]) << 12) |
                     (static_cast<unsigned>(vals[2]) << 6) | static_cast<unsigned>(vals[3]);
        out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<unsigned char>(v & 0xff));
    }
    return out;
}

inline std::string tensor_to_b64(const Tensor& t) {
    std::vector<unsigned char> bytes(static_cast<std::size_t>(t.numel()) * 8);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        std::uint64_t bits;
        double v = t[i];
        std::memcpy(&bits, &v, 8);
        for (int b = 0; b < 8; ++b)
            bytes[static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(b)] =
                static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
    return base64_encode(bytes.data(), bytes.size());
}

inline Tensor tensor_from_b64(const std::string& s, const Shape& shape) {
    auto bytes = base64_decode(s);
    if (bytes.size() != static_cast<std::size_t>(shape_numel(shape)) * 8)
        throw parse_error("weight blob has wrong size for shape " + shape_str(shape), 0);
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(b)])
                    << (8 * b);
        double v;
        std::memcpy(&v, &bits, 8);
        t[i] = v;
    }
    return t;
}

}  // namespace detail

inline std::string serialize_zoo(const ModelZoo& zoo) {
    nlohmann::json j;
    j["format"] = "recup-zoo";
    j["version"] = 1;
    j["attribute"] = zoo.attribute_id;
    j["feature_dim"] = zoo.feature_dim;
    j["pool_window"] = zoo.pool_window;
    j["num_classes"] = zoo.num_classes;
    auto members = nlohmann::json::array();
    for (const auto& m : zoo.members) {
        nlohmann::json jm;
        jm["spec"] = {{"input_dim", m.spec.input_dim},
                      {"widths", m.spec.widths},
                      {"activation", m.spec.activation == Activation::relu ? "relu" : "sigmoid"},
                      {"output", m.spec.output == OutputKind::softmax ? "softmax" : "sigmoid"},
                      {"seed", m.spec.seed}};
        jm["train_accuracy"] = m.train_accuracy;
        auto weights = nlohmann::json::array();
        for (const auto& w : m.weights) {
            weights.push_back({{"shape", w.shape()}, {"data", detail::tensor_to_b64(w)}});
        }
        jm["weights"] = std::move(weights);
        members.push_back(std::move(jm));
    }
    j["members"] = std::move(members);
    return j.dump();
}

// Single-model checkpoint in the same JSON weight-blob format as the zoo.
inline std::string serialize_model(const MlpSpec& spec, const MlpParams& weights) {
    nlohmann::json j;
    j["format"] = "recup-model";
    j["version"] = 1;
    j["spec"] = {{"input_dim", spec.input_dim},
                 {"widths", spec.widths},
                 {"activation", spec.activation == Activation::relu ? "relu" : "sigmoid"},
                 {"output", spec.output == OutputKind::softmax ? "softmax" : "sigmoid"},
                 {"seed", spec.seed}};
    auto blobs = nlohmann::json::array();
    for (const auto& w : weights) blobs.push_back({{"shape", w.shape()}, {"data", detail::tensor_to_b64(w)}});
    j["weights"] = std::move(blobs);
    return j.dump();
}

inline std::pair<MlpSpec, MlpParams> load_model(const std::string& payload) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(payload);
    } catch (const nlohmann::json::parse_error& e) {
        throw parse_error(std::string("model payload: ") + e.what(), e.byte);
    }
    try {
        if (j.at("format") != "recup-model") throw parse_error("not a recup-model payload", 0);
        MlpSpec spec;
        const auto& js = j.at("spec");
        spec.input_dim = js.at("input_dim").get<std::int64_t>();
        spec.widths = js.at("widths").get<std::vector<std::int64_t>>();
        spec.activation = js.at("activation") == "relu" ? Activation::relu : Activation::sigmoid;
        spec.output = js.at("output") == "softmax" ? OutputKind::softmax : OutputKind::sigmoid;
        spec.seed = js.at("seed").get<std::uint64_t>();
        spec.validate();
        MlpParams weights;
        for (const auto& jw : j.at("weights"))
            weights.push_back(detail::tensor_from_b64(jw.at("data").get<std::string>(), jw.at("shape").get<Shape>()));
        auto expected = param_shapes(spec);
        if (weights.size() != expected.size()) throw parse_error("model weight count mismatch", 0);
        for (std::size_t i = 0; i < expected.size(); ++i)
            if (weights[i].shape() != expected[i]) throw parse_error("model weight shape mismatch", 0);
        return {std::move(spec), std::move(weights)};
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("model payload: ") + e.what(), 0);
    }
}

inline ModelZoo load_zoo(const std::string& payload) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(payload);
    } catch (const nlohmann::json::parse_error& e) {
        throw parse_error(std::string("zoo payload: ") + e.what(), e.byte);
    }
    try {
        if (j.at("format") != "recup-zoo") throw parse_error("not a recup-zoo payload", 0);
        ModelZoo zoo;
        zoo.attribute_id = j.at("attribute").get<std::string>();
        zoo.feature_dim = j.at("feature_dim").get<std::int64_t>();
        zoo.pool_window = j.at("pool_window").get<std::int64_t>();
        zoo.num_classes = j.at("num_classes").get<std::int64_t>();
        for (const auto& jm : j.at("members")) {
            ZooMember m;
            const auto& js = jm.at("spec");
            m.spec.input_dim = js.at("input_dim").get<std::int64_t>();
            m.spec.widths = js.at("widths").get<std::vector<std::int64_t>>();
            m.spec.activation = js.at("activation") == "relu" ? Activation::relu : Activation::sigmoid;
            m.spec.output = js.at("output") == "softmax" ? OutputKind::softmax : OutputKind::sigmoid;
            m.spec.seed = js.at("seed").get<std::uint64_t>();
            m.spec.validate();
            m.train_accuracy = jm.at("train_accuracy").get<double>();
            for (const auto& jw : jm.at("weights")) {
                Shape shape = jw.at("shape").get<Shape>();
                m.weights.push_back(detail::tensor_from_b64(jw.at("data").get<std::string>(), shape));
            }
            auto expected = param_shapes(m.spec);
            if (m.weights.size() != expected.size()) throw parse_error("member weight count mismatch", 0);
            for (std::size_t i = 0; i < expected.size(); ++i)
                if (m.weights[i].shape() != expected[i]) throw parse_error("member weight shape mismatch", 0);
            zoo.members.push_back(std::move(m));
        }
        return zoo;
    } catch (const nlohmann::json::exception& e) {
        throw parse_error(std::string("zoo payload: ") + e.what(), 0);
    }
}

}  // namespace recup
