#pragma once

#include <cmath>
#include <functional>

namespace acceptance {

// Central finite differences with h = 1e-5 * max(1, |x|).
inline double central_diff(const std::function<double(double)>& f, double x) {
    double h = 1e-5 * std::max(1.0, std::abs(x));
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_err(double got, double want) {
    return std::abs(got - want) / std::max({std::abs(want), std::abs(got), 1e-3});
}

}  // namespace acceptance
