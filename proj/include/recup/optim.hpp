#pragma once

#include <cmath>
#include <vector>

#include "recup/errors.hpp"
#include "recup/tensor.hpp"

namespace recup {

inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
    if (params.size() != grads.size()) throw usage_error("sgd_step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape())
            throw usage_error("sgd_step: shape mismatch at parameter " + std::to_string(i));
        double* p = params[i].data();
        const double* g = grads[i].data();
        for (std::int64_t j = 0; j < params[i].numel(); ++j) p[j] -= lr * g[j];
    }
}

struct AdamState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::int64_t step = 0;

    static AdamState like(const std::vector<Tensor>& params) {
        AdamState s;
        for (const auto& p : params) {
            s.first_moment.push_back(Tensor::zeros(p.shape()));
            s.second_moment.push_back(Tensor::zeros(p.shape()));
        }
        return s;
    }
};

inline void adam_step(std::vector<Tensor>& params, AdamState& state, const std::vector<Tensor>& grads, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size())
        throw usage_error("adam_step: parameter/gradient/state count mismatch");
    state.step += 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape())
            throw usage_error("adam_step: shape mismatch at parameter " + std::to_string(i));
        double* p = params[i].data();
        double* m = state.first_moment[i].data();
        double* v = state.second_moment[i].data();
        const double* g = grads[i].data();
        for (std::int64_t j = 0; j < params[i].numel(); ++j) {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
}

}  // namespace recup
