#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "recup/errors.hpp"

namespace recup {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Dense row-major tensor of 64-bit floats. Rank 1 and 2 are the common cases;
// higher ranks only carry shape metadata (e.g. image-like [h,w] inputs).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {
        for (auto d : shape_)
            if (d <= 0) throw config_error("tensor dimension must be positive, got " + shape_str(shape_));
    }
    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
            throw config_error("tensor data size does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor row(std::vector<double> v) {
        auto n = static_cast<std::int64_t>(v.size());
        return Tensor({1, n}, std::move(v));
    }
    static Tensor vec(std::vector<double> v) {
        auto n = static_cast<std::int64_t>(v.size());
        return Tensor({n}, std::move(v));
    }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    std::int64_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
    std::int64_t cols() const { return shape_.size() == 2 ? shape_[1] : numel(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
    double& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
    double at(std::int64_t r, std::int64_t c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }

    double item() const {
        if (numel() != 1) throw usage_error("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    double l2_norm() const {
        double s = 0;
        for (double v : data_) s += v * v;
        return std::sqrt(s);
    }
    double inf_norm() const {
        double m = 0;
        for (double v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw usage_error("reshape " + shape_str(shape_) + " -> " + shape_str(s) + " changes element count");
        return Tensor(std::move(s), data_);
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    Shape shape_;
    std::vector<double> data_;
};

// Deterministic random stream. splitmix64 core with hand-rolled distributions
// so that sequences are identical across standard libraries and platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // [0,1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // [0,n)
    std::int64_t uniform_int(std::int64_t n) {
        return std::min<std::int64_t>(n - 1, static_cast<std::int64_t>(uniform() * static_cast<double>(n)));
    }

    // Box-Muller, cosine branch only; consumes two uniforms per draw.
    double normal(double mu = 0.0, double sigma = 1.0) {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
        return mu + sigma * z;
    }

    // Inverse-CDF sampling of Lap(mu, b).
    double laplace(double mu, double b) {
        double u = uniform() - 0.5;
        u = std::clamp(u, -0.499999999999, 0.499999999999);
        double s = u < 0 ? -1.0 : 1.0;
        return mu - b * s * std::log(1.0 - 2.0 * std::abs(u));
    }

    // Independent derived stream; pure in (current state, tag).
    Rng fork(std::uint64_t tag) const {
        std::uint64_t z = state_ ^ (0x9e3779b97f4a7c15ULL + tag * 0xd1b54a32d192ed03ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

    // First k entries of a seeded Fisher-Yates shuffle of 0..n-1.
    std::vector<std::int64_t> sample_without_replacement(std::int64_t n, std::int64_t k) {
        if (k > n) throw usage_error("sample_without_replacement: k > n");
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        for (std::int64_t i = 0; i < k; ++i) {
            std::int64_t j = i + uniform_int(n - i);
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
        idx.resize(static_cast<std::size_t>(k));
        return idx;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
            std::int64_t j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t state_;
};

}  // namespace recup
