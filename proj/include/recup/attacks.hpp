#pragma once

// Adversary-side machinery: pooled-gradient feature extraction, the four
// attribute-inference adversaries, adversary training-set generation, and the
// cosine gradient-matching data reconstruction attack.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "recup/defenses.hpp"
#include "recup/errors.hpp"
#include "recup/fl.hpp"
#include "recup/forest.hpp"
#include "recup/model.hpp"
#include "recup/pooling.hpp"
#include "recup/svm.hpp"
#include "recup/tensor.hpp"

namespace recup {

enum class AdversaryKind { stru_nn, unkwn_nn, svm_rbf, random_forest };

inline AdversaryKind adversary_kind_from_string(const std::string& s) {
    if (s == "stru-nn") return AdversaryKind::stru_nn;
    if (s == "unkwn-nn") return AdversaryKind::unkwn_nn;
    if (s == "svm-rbf") return AdversaryKind::svm_rbf;
    if (s == "random-forest") return AdversaryKind::random_forest;
    throw config_error("unknown adversary kind '" + s + "'");
}

inline std::string to_string(AdversaryKind k) {
    switch (k) {
        case AdversaryKind::stru_nn: return "stru-nn";
        case AdversaryKind::unkwn_nn: return "unkwn-nn";
        case AdversaryKind::svm_rbf: return "svm-rbf";
        case AdversaryKind::random_forest: return "random-forest";
    }
    return "?";
}

struct AdversaryHyper {
    int nn_epochs = 80;
    double nn_lr = 0.01;
    std::int64_t nn_batch = 32;
    // stru-nn draws its architecture from the defender-zoo family.
    std::vector<std::int64_t> stru_width_choices = {128, 256, 512, 1024, 2048};
    int stru_hidden_layers = 3;
    // unkwn-nn is the fixed four-layer architecture.
    std::vector<std::int64_t> unkwn_widths = {1024, 1024, 512, 128};
    SvmHyper svm;
    ForestHyper forest;
};

struct AdversaryModel {
    AdversaryKind kind = AdversaryKind::stru_nn;
    std::string attribute_id;
    int num_classes = 2;
    std::int64_t feature_dim = 0;
    std::int64_t pool_window = 1;

    MlpSpec nn_spec;      // nn kinds
    MlpParams nn_weights;
    SvmModel svm;
    // Per-feature standardization fitted on the SVM's training set; RBF
    // distances are meaningless on raw gradient magnitudes.
    std::vector<double> svm_shift, svm_scale;
    Forest forest;
    double train_accuracy = 0;

    int predict_features(const Tensor& features) const {
        if (features.numel() != feature_dim)
            throw config_error("adversary expects " + std::to_string(feature_dim) + " features, got " +
                               std::to_string(features.numel()));
        switch (kind) {
            case AdversaryKind::stru_nn:
            case AdversaryKind::unkwn_nn: {
                Tensor row = features.reshaped({1, feature_dim});
                Tensor probs = predict(nn_spec, nn_weights, row);
                return argmax_row(probs, 0);
            }
            case AdversaryKind::svm_rbf: {
                std::vector<double> scaled(static_cast<std::size_t>(feature_dim));
                for (std::int64_t i = 0; i < feature_dim; ++i)
                    scaled[static_cast<std::size_t>(i)] =
                        (features[i] - svm_shift[static_cast<std::size_t>(i)]) * svm_scale[static_cast<std::size_t>(i)];
                return svm.predict(scaled.data());
            }
            case AdversaryKind::random_forest:
                return forest.predict(features.data());
        }
        return 0;
    }
};

// One (pooled features, attribute label) pair per dataset sample: the update
// an adversary would intercept if that sample were a single-sample client.
inline std::pair<Tensor, std::vector<int>> build_adversary_dataset(const GlobalModelState& global, const Dataset& ds,
                                                                   const std::string& attribute_id,
                                                                   std::int64_t pool_window, LossKind task_loss) {
    if (ds.samples.empty()) throw usage_error("build_adversary_dataset: empty dataset");
    FlConfig cfg;
    cfg.loss = task_loss;
    std::int64_t d = ds.meta.feature_dim();
    std::vector<Tensor> rows;
    std::vector<int> labels;
    std::int64_t width = 0;
    for (const auto& s : ds.samples) {
        auto it = s.attributes.find(attribute_id);
        if (it == s.attributes.end())
            throw config_error("build_adversary_dataset: sample missing attribute '" + attribute_id + "'");
        Tensor x({1, d});
        for (std::int64_t j = 0; j < d; ++j) x.at(0, j) = s.features[j];
        ModelUpdate u = client_update(global, x, {s.task_label}, cfg);
        PooledFeatures f = pool_gradients(u, pool_window);
        width = f.values.numel();
        rows.push_back(std::move(f.values));
        labels.push_back(it->second);
    }
    Tensor features({static_cast<std::int64_t>(rows.size()), width});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::int64_t j = 0; j < width; ++j) features.at(static_cast<std::int64_t>(i), j) = rows[i][j];
    return {std::move(features), std::move(labels)};
}

inline AdversaryModel train_adversary(AdversaryKind kind, const Tensor& features, const std::vector<int>& labels,
                                      int num_classes, const std::string& attribute_id, std::int64_t pool_window,
                                      const AdversaryHyper& hyper, Rng& rng) {
    if (features.rows() != static_cast<std::int64_t>(labels.size()))
        throw config_error("train_adversary: feature/label mismatch");
    bool multi_class = false;
    for (std::size_t i = 1; i < labels.size(); ++i)
        if (labels[i] != labels[0]) {
            multi_class = true;
            break;
        }
    if (!multi_class) throw config_error("train_adversary: single-class training data");

    AdversaryModel adv;
    adv.kind = kind;
    adv.attribute_id = attribute_id;
    adv.num_classes = num_classes;
    adv.feature_dim = features.cols();
    adv.pool_window = pool_window;

    switch (kind) {
        case AdversaryKind::stru_nn: {
            SpecSampler sampler = default_zoo_sampler(hyper.stru_width_choices, hyper.stru_hidden_layers);
            adv.nn_spec = sampler(0, features.cols(), num_classes, rng);
            break;
        }
        case AdversaryKind::unkwn_nn: {
            adv.nn_spec.input_dim = features.cols();
            adv.nn_spec.widths = hyper.unkwn_widths;
            adv.nn_spec.widths.push_back(num_classes);
            adv.nn_spec.activation = Activation::relu;
            adv.nn_spec.output = OutputKind::softmax;
            adv.nn_spec.seed = rng.next_u64();
            break;
        }
        case AdversaryKind::svm_rbf: {
            std::int64_t d = features.cols();
            adv.svm_shift.assign(static_cast<std::size_t>(d), 0.0);
            adv.svm_scale.assign(static_cast<std::size_t>(d), 1.0);
            for (std::int64_t j = 0; j < d; ++j) {
                double mean = 0;
                for (std::int64_t i = 0; i < features.rows(); ++i) mean += features.at(i, j);
                mean /= static_cast<double>(features.rows());
                double var = 0;
                for (std::int64_t i = 0; i < features.rows(); ++i) {
                    double dv = features.at(i, j) - mean;
                    var += dv * dv;
                }
                var /= static_cast<double>(features.rows());
                adv.svm_shift[static_cast<std::size_t>(j)] = mean;
                adv.svm_scale[static_cast<std::size_t>(j)] = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
            }
            Tensor standardized({features.rows(), d});
            for (std::int64_t i = 0; i < features.rows(); ++i)
                for (std::int64_t j = 0; j < d; ++j)
                    standardized.at(i, j) = (features.at(i, j) - adv.svm_shift[static_cast<std::size_t>(j)]) *
                                            adv.svm_scale[static_cast<std::size_t>(j)];
            adv.svm = train_svm(standardized, labels, num_classes, hyper.svm);
            break;
        }
        case AdversaryKind::random_forest: {
            adv.forest = train_forest(features, labels, num_classes, hyper.forest, rng);
            break;
        }
    }
    if (kind == AdversaryKind::stru_nn || kind == AdversaryKind::unkwn_nn) {
        adv.nn_weights = init_model(adv.nn_spec);
        FitOptions fit;
        fit.epochs = hyper.nn_epochs;
        fit.lr = hyper.nn_lr;
        fit.batch_size = hyper.nn_batch;
        fit_mlp(adv.nn_spec, adv.nn_weights, features, labels, fit, rng);
    }

    std::int64_t correct = 0;
    for (std::int64_t i = 0; i < features.rows(); ++i) {
        Tensor row({features.cols()});
        for (std::int64_t j = 0; j < features.cols(); ++j) row[j] = features.at(i, j);
        if (adv.predict_features(row) == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    adv.train_accuracy = static_cast<double>(correct) / static_cast<double>(features.rows());
    return adv;
}

inline int infer_attribute(const AdversaryModel& adv, const ModelUpdate& update) {
    return adv.predict_features(pool_gradients(update, adv.pool_window).values);
}

// Attack success rate: exact fraction of correct attribute inferences.
inline double asr(const AdversaryModel& adv, const std::vector<std::pair<ModelUpdate, int>>& labeled_updates) {
    if (labeled_updates.empty()) throw usage_error("asr: empty evaluation set");
    std::size_t correct = 0;
    for (const auto& [update, truth] : labeled_updates)
        if (infer_attribute(adv, update) == truth) ++correct;
    return static_cast<double>(correct) / static_cast<double>(labeled_updates.size());
}

// ---------------------------------------------------------------------------
// Data reconstruction (gradient matching)
// ---------------------------------------------------------------------------

struct ReconstructionConfig {
    int iterations = 2000;
    double lr = 0.1;           // Adam step size on the signed gradient
    double tv_weight = 1e-2;   // applied only when image_shape is set
    bool optimize_label = false;
    Shape image_shape;         // [h, w] metadata for image-like inputs

    void validate() const {
        if (iterations < 1) throw config_error("reconstruct: iterations must be >= 1");
    }
};

struct ReconstructionResult {
    Tensor input;                    // best iterate by matching loss
    std::vector<double> loss_trace;  // loss per iteration (index 0 = initial point)
    double best_loss = 0;
    int label = 0;
};

inline double reconstruction_mse(const Tensor& reconstructed, const Tensor& original) {
    return mse(reconstructed, original);
}

// Minimizes 1 - cos(grad_w L(f(x), y), target_update) [+ tv] over a dummy
// input by Adam on the sign of the outer gradient, following the
// cosine-matching reconstruction recipe.
inline ReconstructionResult reconstruct(const ModelUpdate& target, const MlpSpec& spec, const MlpParams& weights,
                                        int known_label, const ReconstructionConfig& cfg, Rng& rng,
                                        const Tensor* init = nullptr) {
    cfg.validate();
    std::int64_t d = spec.input_dim;
    std::int64_t classes = spec.num_classes();

    Expr x = leaf("x", {1, d});
    std::vector<Expr> wleaves;
    for (std::size_t i = 0; i < weights.size(); ++i)
        wleaves.push_back(leaf("w" + std::to_string(i), weights[i].shape()));
    MlpGraph g = build_mlp_on(spec, x, wleaves);

    Expr label_logits;
    Binding binding;
    if (cfg.optimize_label) {
        label_logits = leaf("label_logits", {1, classes});
        // Soft label via softmax of trainable logits.
        Expr soft = softmax_rows(label_logits);
        Expr clamped = max_ew(g.probs, scalar(1e-12));
        g.loss_ce = -sum_all(soft * log(clamped));
    } else {
        bind_leaf(binding, g.target, one_hot({known_label}, classes));
    }

    GradientMap wgrads = gradients(g.loss_ce, wleaves);
    std::vector<Expr> flat;
    for (const auto& w : wleaves) flat.push_back(flatten(grad_of(wgrads, w)));
    Expr gvec = concat(flat);
    Expr t = constant(flatten_update(target));
    Expr dot = sum_all(gvec * t);
    Expr denom = max_ew(sqrt(sum_all(gvec * gvec)) * sqrt(sum_all(t * t)), scalar(1e-20));
    Expr matching = scalar(1.0) - dot / denom;

    if (!cfg.image_shape.empty()) {
        if (cfg.image_shape.size() != 2 || shape_numel(cfg.image_shape) != d)
            throw config_error("reconstruct: image_shape must be [h,w] with h*w = input_dim");
        std::int64_t h = cfg.image_shape[0], w = cfg.image_shape[1];
        Expr img = reshape(flatten(x), {h, w});
        Expr tv = scalar(0.0);
        if (h > 1) tv = tv + sum_all(abs(slice_rows(img, 1, h - 1) - slice_rows(img, 0, h - 1)));
        if (w > 1) {
            Expr imgt = transpose(img);
            tv = tv + sum_all(abs(slice_rows(imgt, 1, w - 1) - slice_rows(imgt, 0, w - 1)));
        }
        matching = matching + scalar(cfg.tv_weight) * tv;
    }

    std::vector<Expr> opt_leaves{x};
    if (cfg.optimize_label) opt_leaves.push_back(label_logits);
    GradientMap outer = gradients(matching, opt_leaves);

    for (std::size_t i = 0; i < weights.size(); ++i) bind_leaf(binding, wleaves[i], weights[i]);

    Tensor x_hat({1, d});
    if (init) {
        if (init->shape() != Shape{1, d}) throw config_error("reconstruct: init shape mismatch");
        x_hat = *init;
    } else {
        for (std::int64_t i = 0; i < d; ++i) x_hat[i] = rng.normal(0.0, 1.0);
    }
    Tensor label_hat({1, classes});

    std::vector<Tensor> opt_params{x_hat};
    if (cfg.optimize_label) opt_params.push_back(label_hat);
    AdamState adam = AdamState::like(opt_params);

    ReconstructionResult result;
    result.input = x_hat;
    result.best_loss = std::numeric_limits<double>::infinity();

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        binding[x.get()] = opt_params[0];
        if (cfg.optimize_label) binding[label_logits.get()] = opt_params[1];
        double current;
        std::vector<Tensor> grads;
        try {
            Evaluation ev(binding);
            current = ev.value(matching).item();
            for (std::size_t i = 0; i < opt_leaves.size(); ++i) grads.push_back(ev.value(grad_of(outer, opt_leaves[i])));
        } catch (const numeric_error& e) {
            throw numeric_error("reconstruct: aborted at iteration " + std::to_string(iter) + " after " +
                                std::to_string(result.loss_trace.size()) + " recorded losses: " + e.what());
        }
        result.loss_trace.push_back(current);
        if (current < result.best_loss) {
            result.best_loss = current;
            result.input = opt_params[0];
            if (cfg.optimize_label) {
                Tensor probs = eval(softmax_rows(constant(opt_params[1])), {});
                result.label = argmax_row(probs, 0);
            } else {
                result.label = known_label;
            }
        }
        // Signed-gradient Adam step.
        for (auto& gt : grads)
            for (std::int64_t i = 0; i < gt.numel(); ++i) gt[i] = gt[i] > 0 ? 1.0 : (gt[i] < 0 ? -1.0 : 0.0);
        adam_step(opt_params, adam, grads, cfg.lr);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

// 8-bit grayscale PGM (P5), values quantized as round(255*clamp(v,0,1)).
inline void write_pgm(const Tensor& image, const std::string& path) {
    if (image.shape().size() != 2) throw usage_error("write_pgm: rank-2 tensor required");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw config_error("write_pgm: cannot open '" + path + "'");
    out << "P5\n" << image.shape()[1] << " " << image.shape()[0] << "\n255\n";
    for (std::int64_t i = 0; i < image.numel(); ++i) {
        double v = std::clamp(image[i], 0.0, 1.0);
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * v))));
    }
}

inline void write_csv_grid(const Tensor& t, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw config_error("write_csv_grid: cannot open '" + path + "'");
    std::int64_t rows = t.rows(), cols = t.cols();
    char buf[40];
    for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < cols; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", t.at(i, j));
            out << (j ? "," : "") << buf;
        }
        out << "\n";
    }
}

}  // namespace recup
