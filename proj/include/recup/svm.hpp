#pragma once

// RBF-kernel support vector machine trained with sequential minimal
// optimization. Working-set selection is deterministic (first KKT violator in
// index order, partner by largest |E1 - E2|, ties to the lowest index), so
// training is reproducible bit-for-bit. Multi-class is one-vs-rest on the
// decision values.

#include <cmath>
#include <cstdint>
#include <vector>

#include "recup/errors.hpp"
#include "recup/tensor.hpp"

namespace recup {

struct SvmHyper {
    double c = 1.0;
    double gamma = 0.0;  // 0 = 1/num_features
    double tol = 1e-3;   // KKT tolerance, also the stopping criterion
    int max_sweeps = 2000;
};

struct SvmBinary {
    std::vector<std::vector<double>> support_vectors;
    std::vector<double> dual_coef;  // alpha_i * y_i for support vectors
    double bias = 0.0;
    double gamma = 0.0;

    double decision(const double* x, std::size_t dim) const {
        double f = bias;
        for (std::size_t s = 0; s < support_vectors.size(); ++s) {
            double d2 = 0;
            const auto& sv = support_vectors[s];
            for (std::size_t j = 0; j < dim; ++j) {
                double d = sv[j] - x[j];
                d2 += d * d;
            }
            f += dual_coef[s] * std::exp(-gamma * d2);
        }
        return f;
    }
};

struct SvmModel {
    std::vector<SvmBinary> classifiers;  // one per class (one-vs-rest); 1 for binary
    int num_classes = 2;
    std::size_t dim = 0;

    int predict(const double* x) const {
        if (classifiers.size() == 1) return classifiers[0].decision(x, dim) >= 0 ? 0 : 1;
        int best = 0;
        double best_val = classifiers[0].decision(x, dim);
        for (std::size_t c = 1; c < classifiers.size(); ++c) {
            double v = classifiers[c].decision(x, dim);
            if (v > best_val) {
                best_val = v;
                best = static_cast<int>(c);
            }
        }
        return best;
    }
};

namespace detail {

class SmoSolver {
public:
    SmoSolver(const Tensor& x, const std::vector<int>& y_signed, const SvmHyper& hyper)
        : x_(x), n_(x.rows()), dim_(x.cols()), hyper_(hyper) {
        gamma_ = hyper.gamma > 0 ? hyper.gamma : 1.0 / static_cast<double>(dim_);
        y_.resize(static_cast<std::size_t>(n_));
        for (std::int64_t i = 0; i < n_; ++i) y_[static_cast<std::size_t>(i)] = y_signed[static_cast<std::size_t>(i)];
        alpha_.assign(static_cast<std::size_t>(n_), 0.0);
        error_.resize(static_cast<std::size_t>(n_));
        kernel_.assign(static_cast<std::size_t>(n_ * n_), 0.0);
        for (std::int64_t i = 0; i < n_; ++i)
            for (std::int64_t j = i; j < n_; ++j) {
                double k = kernel_value(i, j);
                kernel_[static_cast<std::size_t>(i * n_ + j)] = k;
                kernel_[static_cast<std::size_t>(j * n_ + i)] = k;
            }
        for (std::int64_t i = 0; i < n_; ++i) error_[static_cast<std::size_t>(i)] = -yd(i);
    }

    void solve() {
        bool examine_all = true;
        int sweeps = 0;
        while (sweeps++ < hyper_.max_sweeps) {
            int changed = 0;
            for (std::int64_t i = 0; i < n_; ++i) {
                if (!examine_all && (alpha_[static_cast<std::size_t>(i)] <= 0 ||
                                     alpha_[static_cast<std::size_t>(i)] >= hyper_.c))
                    continue;
                changed += examine(i);
            }
            if (examine_all) {
                if (changed == 0) break;
                examine_all = false;
            } else if (changed == 0) {
                examine_all = true;
            }
        }
    }

    SvmBinary extract() const {
        SvmBinary m;
        m.gamma = gamma_;
        m.bias = bias_;
        for (std::int64_t i = 0; i < n_; ++i) {
            double a = alpha_[static_cast<std::size_t>(i)];
            if (a > 0) {
                std::vector<double> sv(static_cast<std::size_t>(dim_));
                for (std::int64_t j = 0; j < dim_; ++j) sv[static_cast<std::size_t>(j)] = x_.at(i, j);
                m.support_vectors.push_back(std::move(sv));
                m.dual_coef.push_back(a * yd(i));
            }
        }
        return m;
    }

    // Largest KKT violation over all training points (0 when satisfied).
    double max_kkt_violation() const {
        double worst = 0;
        for (std::int64_t i = 0; i < n_; ++i) {
            double a = alpha_[static_cast<std::size_t>(i)];
            double margin = yd(i) * f(i);
            if (a <= 0)
                worst = std::max(worst, 1.0 - margin);
            else if (a >= hyper_.c)
                worst = std::max(worst, margin - 1.0);
            else
                worst = std::max(worst, std::abs(margin - 1.0));
        }
        return worst;
    }

private:
    double yd(std::int64_t i) const { return static_cast<double>(y_[static_cast<std::size_t>(i)]); }
    double k(std::int64_t i, std::int64_t j) const { return kernel_[static_cast<std::size_t>(i * n_ + j)]; }

    double kernel_value(std::int64_t i, std::int64_t j) const {
        double d2 = 0;
        for (std::int64_t c = 0; c < dim_; ++c) {
            double d = x_.at(i, c) - x_.at(j, c);
            d2 += d * d;
        }
        return std::exp(-gamma_ * d2);
    }

    double f(std::int64_t i) const {
        double v = bias_;
        for (std::int64_t j = 0; j < n_; ++j) {
            double a = alpha_[static_cast<std::size_t>(j)];
            if (a > 0) v += a * yd(j) * k(j, i);
        }
        return v;
    }

    int examine(std::int64_t i2) {
        double y2 = yd(i2);
        double a2 = alpha_[static_cast<std::size_t>(i2)];
        double e2 = error_[static_cast<std::size_t>(i2)];
        double r2 = e2 * y2;
        bool violates = (r2 < -hyper_.tol && a2 < hyper_.c) || (r2 > hyper_.tol && a2 > 0);
        if (!violates) return 0;

        // Partner choice: maximize |e1 - e2| over non-bound points, then fall
        // back to a full scan, always in ascending index order.
        std::int64_t best = -1;
        double best_gap = -1;
        for (std::int64_t i = 0; i < n_; ++i) {
            double a = alpha_[static_cast<std::size_t>(i)];
            if (a <= 0 || a >= hyper_.c || i == i2) continue;
            double gap = std::abs(error_[static_cast<std::size_t>(i)] - e2);
            if (gap > best_gap) {
                best_gap = gap;
                best = i;
            }
        }
        if (best >= 0 && step(best, i2)) return 1;
        for (std::int64_t i = 0; i < n_; ++i)
            if (i != i2 && alpha_[static_cast<std::size_t>(i)] > 0 && alpha_[static_cast<std::size_t>(i)] < hyper_.c &&
                step(i, i2))
                return 1;
        for (std::int64_t i = 0; i < n_; ++i)
            if (i != i2 && step(i, i2)) return 1;
        return 0;
    }

    bool step(std::int64_t i1, std::int64_t i2) {
        if (i1 == i2) return false;
        double a1 = alpha_[static_cast<std::size_t>(i1)], a2 = alpha_[static_cast<std::size_t>(i2)];
        double y1 = yd(i1), y2 = yd(i2);
        double e1 = error_[static_cast<std::size_t>(i1)], e2 = error_[static_cast<std::size_t>(i2)];
        double s = y1 * y2;
        double lo, hi;
        if (s < 0) {
            lo = std::max(0.0, a2 - a1);
            hi = std::min(hyper_.c, hyper_.c + a2 - a1);
        } else {
            lo = std::max(0.0, a1 + a2 - hyper_.c);
            hi = std::min(hyper_.c, a1 + a2);
        }
        if (lo >= hi) return false;
        // RBF kernels give eta >= 0, with 0 only for duplicate points; skip those.
        double eta = k(i1, i1) + k(i2, i2) - 2 * k(i1, i2);
        if (eta <= 1e-12) return false;
        double a2_new = std::clamp(a2 + y2 * (e1 - e2) / eta, lo, hi);
        if (std::abs(a2_new - a2) < 1e-12 * (a2_new + a2 + 1e-12)) return false;
        double a1_new = a1 + s * (a2 - a2_new);

        double da1 = a1_new - a1, da2 = a2_new - a2;
        double b1 = bias_ - e1 - y1 * da1 * k(i1, i1) - y2 * da2 * k(i1, i2);
        double b2 = bias_ - e2 - y1 * da1 * k(i1, i2) - y2 * da2 * k(i2, i2);
        double bias_new;
        if (a1_new > 0 && a1_new < hyper_.c)
            bias_new = b1;
        else if (a2_new > 0 && a2_new < hyper_.c)
            bias_new = b2;
        else
            bias_new = 0.5 * (b1 + b2);

        double db = bias_new - bias_;
        for (std::int64_t i = 0; i < n_; ++i)
            error_[static_cast<std::size_t>(i)] += y1 * da1 * k(i1, i) + y2 * da2 * k(i2, i) + db;
        bias_ = bias_new;
        alpha_[static_cast<std::size_t>(i1)] = a1_new;
        alpha_[static_cast<std::size_t>(i2)] = a2_new;
        error_[static_cast<std::size_t>(i1)] = f(i1) - y1;
        error_[static_cast<std::size_t>(i2)] = f(i2) - y2;
        return true;
    }

    const Tensor& x_;
    std::int64_t n_, dim_;
    SvmHyper hyper_;
    double gamma_ = 0, bias_ = 0;
    std::vector<int> y_;
    std::vector<double> alpha_;
    std::vector<double> error_;
    std::vector<double> kernel_;
};

}  // namespace detail

struct SvmTrainReport {
    double max_kkt_violation = 0;
};

inline SvmModel train_svm(const Tensor& x, const std::vector<int>& y, int num_classes, const SvmHyper& hyper,
                          SvmTrainReport* report = nullptr) {
    if (x.rows() != static_cast<std::int64_t>(y.size())) throw config_error("train_svm: feature/label mismatch");
    if (num_classes < 2) throw config_error("train_svm: need >= 2 classes");
    SvmModel model;
    model.num_classes = num_classes;
    model.dim = static_cast<std::size_t>(x.cols());
    int binary_machines = num_classes == 2 ? 1 : num_classes;
    double worst = 0;
    for (int c = 0; c < binary_machines; ++c) {
        std::vector<int> ys(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) ys[i] = y[i] == c ? 1 : -1;
        detail::SmoSolver solver(x, ys, hyper);
        solver.solve();
        worst = std::max(worst, solver.max_kkt_violation());
        model.classifiers.push_back(solver.extract());
    }
    if (report) report->max_kkt_violation = worst;
    return model;
}

}  // namespace recup
