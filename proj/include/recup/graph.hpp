#pragma once

// Reverse-mode automatic differentiation over an immutable expression DAG.
//
// A graph is built once from placeholder leaves and evaluated many times under
// different bindings. backward() does not produce numbers: it produces new
// expressions in the same DAG, so the gradient of a gradient is obtained by
// calling it twice. All evaluation state lives in an Evaluation object; the
// graph itself is never mutated, so distinct evaluations may run concurrently.

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "recup/errors.hpp"
#include "recup/tensor.hpp"

namespace recup {

enum class Op {
    leaf,
    constant,
    add,
    sub,
    mul,
    div,
    neg,
    matmul,
    transpose,
    relu,
    sigmoid,
    exp,
    log,
    sqrt,
    abs,
    sign,
    softmax_rows,
    max_ew,
    sum_all,
    sum_rows,
    sum_cols,
    reshape,
    slice,
    pad,
    slice_rows,
    pad_rows,
    concat,
    maxpool1d,
    maxpool1d_scatter,
    maxpool1d_gather,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::constant: return "constant";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::div: return "div";
        case Op::neg: return "neg";
        case Op::matmul: return "matmul";
        case Op::transpose: return "transpose";
        case Op::relu: return "relu";
        case Op::sigmoid: return "sigmoid";
        case Op::exp: return "exp";
        case Op::log: return "log";
        case Op::sqrt: return "sqrt";
        case Op::abs: return "abs";
        case Op::sign: return "sign";
        case Op::softmax_rows: return "softmax_rows";
        case Op::max_ew: return "max_ew";
        case Op::sum_all: return "sum_all";
        case Op::sum_rows: return "sum_rows";
        case Op::sum_cols: return "sum_cols";
        case Op::reshape: return "reshape";
        case Op::slice: return "slice";
        case Op::pad: return "pad";
        case Op::slice_rows: return "slice_rows";
        case Op::pad_rows: return "pad_rows";
        case Op::concat: return "concat";
        case Op::maxpool1d: return "maxpool1d";
        case Op::maxpool1d_scatter: return "maxpool1d_scatter";
        case Op::maxpool1d_gather: return "maxpool1d_gather";
    }
    return "?";
}

class Expr;

struct Node {
    Op op;
    std::vector<Expr> inputs;
    Shape shape;
    std::string name;   // leaf only
    Tensor value;       // constant only
    std::int64_t a = 0; // window / offset / row offset
    std::int64_t b = 0; // length / row count
    std::uint64_t id = 0;
};

class Expr {
public:
    Expr() = default;
    explicit Expr(std::shared_ptr<const Node> n) : node_(std::move(n)) {}

    const Node* get() const { return node_.get(); }
    const Node& operator*() const { return *node_; }
    const Node* operator->() const { return node_.get(); }
    explicit operator bool() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return shape_numel(node_->shape); }

private:
    std::shared_ptr<const Node> node_;
};

namespace detail {
inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline Expr make_node(Op op, std::vector<Expr> inputs, Shape shape, std::int64_t a = 0, std::int64_t b = 0) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->inputs = std::move(inputs);
    n->shape = std::move(shape);
    n->a = a;
    n->b = b;
    n->id = next_node_id();
    return Expr(std::move(n));
}

// Limited broadcasting: identical shapes, scalar against anything,
// [n,k] against [1,k] or [k] (row), and [n,k] against [n,1] (column).
struct Broadcast {
    Shape result;
    bool ok = false;
};

inline bool is_scalar_shape(const Shape& s) { return shape_numel(s) == 1; }

inline Broadcast broadcast_shapes(const Shape& a, const Shape& b) {
    Broadcast r;
    if (a == b) {
        r.result = a;
        r.ok = true;
        return r;
    }
    if (is_scalar_shape(b)) {
        r.result = a;
        r.ok = true;
        return r;
    }
    if (is_scalar_shape(a)) {
        r.result = b;
        r.ok = true;
        return r;
    }
    auto as_2d = [](const Shape& s) -> Shape {
        if (s.size() == 1) return {1, s[0]};
        return s;
    };
    Shape a2 = as_2d(a), b2 = as_2d(b);
    if (a2.size() == 2 && b2.size() == 2 && a2[1] == b2[1] && (a2[0] == 1 || b2[0] == 1)) {
        r.result = a2[0] == 1 ? Shape{b2[0], b2[1]} : Shape{a2[0], a2[1]};
        r.ok = a.size() == 2 || b.size() == 2;
        return r;
    }
    if (a.size() == 2 && b.size() == 2 && a[0] == b[0] && (a[1] == 1 || b[1] == 1)) {
        r.result = {a[0], a[1] == 1 ? b[1] : a[1]};
        r.ok = true;
        return r;
    }
    return r;
}

inline Expr make_binary(Op op, const Expr& x, const Expr& y) {
    auto bc = broadcast_shapes(x.shape(), y.shape());
    if (!bc.ok)
        throw config_error(std::string(op_name(op)) + ": incompatible shapes " + shape_str(x.shape()) + " and " +
                           shape_str(y.shape()));
    return make_node(op, {x, y}, bc.result);
}
}  // namespace detail

inline Expr leaf(std::string name, Shape shape) {
    auto n = std::make_shared<Node>();
    n->op = Op::leaf;
    n->shape = std::move(shape);
    n->name = std::move(name);
    n->id = detail::next_node_id();
    return Expr(std::move(n));
}

inline Expr constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->op = Op::constant;
    n->shape = value.shape();
    n->value = std::move(value);
    n->id = detail::next_node_id();
    return Expr(std::move(n));
}

inline Expr scalar(double v) { return constant(Tensor::scalar(v)); }

inline Expr operator+(const Expr& a, const Expr& b) { return detail::make_binary(Op::add, a, b); }
inline Expr operator-(const Expr& a, const Expr& b) { return detail::make_binary(Op::sub, a, b); }
inline Expr operator*(const Expr& a, const Expr& b) { return detail::make_binary(Op::mul, a, b); }
inline Expr operator/(const Expr& a, const Expr& b) { return detail::make_binary(Op::div, a, b); }
inline Expr operator-(const Expr& a) { return detail::make_node(Op::neg, {a}, a.shape()); }

inline Expr matmul(const Expr& a, const Expr& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw config_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    return detail::make_node(Op::matmul, {a, b}, {a.shape()[0], b.shape()[1]});
}

inline Expr transpose(const Expr& a) {
    if (a.shape().size() != 2) throw config_error("transpose: rank-2 tensor required");
    return detail::make_node(Op::transpose, {a}, {a.shape()[1], a.shape()[0]});
}

inline Expr relu(const Expr& a) { return detail::make_node(Op::relu, {a}, a.shape()); }
inline Expr sigmoid(const Expr& a) { return detail::make_node(Op::sigmoid, {a}, a.shape()); }
inline Expr exp(const Expr& a) { return detail::make_node(Op::exp, {a}, a.shape()); }
inline Expr log(const Expr& a) { return detail::make_node(Op::log, {a}, a.shape()); }
inline Expr sqrt(const Expr& a) { return detail::make_node(Op::sqrt, {a}, a.shape()); }
inline Expr abs(const Expr& a) { return detail::make_node(Op::abs, {a}, a.shape()); }
inline Expr sign(const Expr& a) { return detail::make_node(Op::sign, {a}, a.shape()); }
inline Expr max_ew(const Expr& a, const Expr& b) { return detail::make_binary(Op::max_ew, a, b); }

inline Expr softmax_rows(const Expr& a) {
    if (a.shape().size() != 2) throw config_error("softmax_rows: rank-2 tensor required");
    return detail::make_node(Op::softmax_rows, {a}, a.shape());
}

inline Expr sum_all(const Expr& a) { return detail::make_node(Op::sum_all, {a}, {1}); }

inline Expr sum_rows(const Expr& a) {
    if (a.shape().size() != 2) throw config_error("sum_rows: rank-2 tensor required");
    return detail::make_node(Op::sum_rows, {a}, {1, a.shape()[1]});
}

inline Expr sum_cols(const Expr& a) {
    if (a.shape().size() != 2) throw config_error("sum_cols: rank-2 tensor required");
    return detail::make_node(Op::sum_cols, {a}, {a.shape()[0], 1});
}

inline Expr reshape(const Expr& a, Shape s) {
    if (shape_numel(s) != a.numel())
        throw config_error("reshape " + shape_str(a.shape()) + " -> " + shape_str(s) + " changes element count");
    return detail::make_node(Op::reshape, {a}, std::move(s));
}

inline Expr flatten(const Expr& a) { return reshape(a, {a.numel()}); }

inline Expr slice(const Expr& a, std::int64_t offset, std::int64_t len) {
    if (a.shape().size() != 1) throw config_error("slice: rank-1 tensor required");
    if (offset < 0 || len <= 0 || offset + len > a.shape()[0]) throw config_error("slice: range out of bounds");
    return detail::make_node(Op::slice, {a}, {len}, offset, len);
}

// Places a rank-1 tensor into a zero vector of length `total` at `offset`.
inline Expr pad(const Expr& a, std::int64_t offset, std::int64_t total) {
    if (a.shape().size() != 1) throw config_error("pad: rank-1 tensor required");
    if (offset < 0 || offset + a.shape()[0] > total) throw config_error("pad: range out of bounds");
    return detail::make_node(Op::pad, {a}, {total}, offset, total);
}

inline Expr slice_rows(const Expr& a, std::int64_t row0, std::int64_t nrows) {
    if (a.shape().size() != 2) throw config_error("slice_rows: rank-2 tensor required");
    if (row0 < 0 || nrows <= 0 || row0 + nrows > a.shape()[0]) throw config_error("slice_rows: range out of bounds");
    return detail::make_node(Op::slice_rows, {a}, {nrows, a.shape()[1]}, row0, nrows);
}

inline Expr pad_rows(const Expr& a, std::int64_t row0, std::int64_t total_rows) {
    if (a.shape().size() != 2) throw config_error("pad_rows: rank-2 tensor required");
    if (row0 < 0 || row0 + a.shape()[0] > total_rows) throw config_error("pad_rows: range out of bounds");
    return detail::make_node(Op::pad_rows, {a}, {total_rows, a.shape()[1]}, row0, total_rows);
}

inline Expr concat(const std::vector<Expr>& parts) {
    if (parts.empty()) throw usage_error("concat: no inputs");
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 1) throw config_error("concat: rank-1 tensors required");
        total += p.shape()[0];
    }
    return detail::make_node(Op::concat, parts, {total});
}

// Non-overlapping 1-D max pooling; the last partial window is kept.
inline Expr maxpool1d(const Expr& a, std::int64_t window) {
    if (a.shape().size() != 1) throw config_error("maxpool1d: rank-1 tensor required");
    if (window < 1) throw config_error("maxpool1d: window must be >= 1");
    std::int64_t n = a.shape()[0];
    return detail::make_node(Op::maxpool1d, {a}, {(n + window - 1) / window}, window);
}

namespace detail {
inline Expr maxpool1d_scatter(const Expr& x, const Expr& g, std::int64_t window) {
    return make_node(Op::maxpool1d_scatter, {x, g}, x.shape(), window);
}
inline Expr maxpool1d_gather(const Expr& x, const Expr& h, std::int64_t window) {
    std::int64_t n = x.shape()[0];
    return make_node(Op::maxpool1d_gather, {x, h}, {(n + window - 1) / window}, window);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

using Binding = std::unordered_map<const Node*, Tensor>;

inline void bind_leaf(Binding& binding, const Expr& leaf_expr, Tensor value) {
    if (leaf_expr->op != Op::leaf) throw usage_error("bind: expression is not a leaf");
    if (value.shape() != leaf_expr->shape)
        throw config_error("bind: leaf '" + leaf_expr->name + "' expects shape " + shape_str(leaf_expr->shape) +
                           ", got " + shape_str(value.shape()));
    binding[leaf_expr.get()] = std::move(value);
}

class Evaluation {
public:
    explicit Evaluation(const Binding& binding) : binding_(&binding) {}

    const Tensor& value(const Expr& root) {
        // Iterative post-order so deep gradient-of-gradient chains cannot
        // overflow the call stack.
        std::vector<std::pair<const Node*, std::size_t>> stack;
        stack.emplace_back(root.get(), 0);
        while (!stack.empty()) {
            auto& [node, next_input] = stack.back();
            if (memo_.count(node)) {
                stack.pop_back();
                continue;
            }
            if (next_input < node->inputs.size()) {
                const Node* child = node->inputs[next_input].get();
                ++next_input;
                if (!memo_.count(child)) stack.emplace_back(child, 0);
                continue;
            }
            memo_.emplace(node, compute(*node));
            stack.pop_back();
        }
        return memo_.at(root.get());
    }

private:
    const Tensor& in(const Node& n, std::size_t i) const { return memo_.at(n.inputs[i].get()); }

    Tensor compute(const Node& n) const {
        Tensor out = compute_raw(n);
        if (!out.all_finite())
            throw numeric_error(std::string("non-finite value produced by ") + op_name(n.op) + " node #" +
                                std::to_string(n.id) + (n.name.empty() ? "" : " ('" + n.name + "')"));
        return out;
    }

    Tensor compute_raw(const Node& n) const {
        switch (n.op) {
            case Op::leaf: {
                auto it = binding_->find(&n);
                if (it == binding_->end()) throw config_error("unbound leaf '" + n.name + "'");
                if (it->second.shape() != n.shape)
                    throw config_error("leaf '" + n.name + "' bound with shape " + shape_str(it->second.shape()) +
                                       ", expected " + shape_str(n.shape));
                return it->second;
            }
            case Op::constant:
                return n.value;
            case Op::add:
                return binary(n, [](double a, double b) { return a + b; });
            case Op::sub:
                return binary(n, [](double a, double b) { return a - b; });
            case Op::mul:
                return binary(n, [](double a, double b) { return a * b; });
            case Op::div:
                return binary(n, [](double a, double b) { return a / b; });
            case Op::max_ew:
                return binary(n, [](double a, double b) { return a >= b ? a : b; });
            case Op::neg:
                return map(n, [](double v) { return -v; });
            case Op::relu:
                return map(n, [](double v) { return v > 0 ? v : 0.0; });
            case Op::sigmoid:
                return map(n, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
            case Op::exp:
                return map(n, [](double v) { return std::exp(v); });
            case Op::log:
                return map(n, [](double v) { return std::log(v); });
            case Op::sqrt:
                return map(n, [](double v) { return std::sqrt(v); });
            case Op::abs:
                return map(n, [](double v) { return std::abs(v); });
            case Op::sign:
                return map(n, [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
            case Op::matmul: {
                const Tensor& a = in(n, 0);
                const Tensor& b = in(n, 1);
                std::int64_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
                Tensor out({m, p});
                const double* pa = a.data();
                const double* pb = b.data();
                double* po = out.data();
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* arow = pa + i * k;
                    double* orow = po + i * p;
                    for (std::int64_t kk = 0; kk < k; ++kk) {
                        double av = arow[kk];
                        if (av == 0.0) continue;
                        const double* brow = pb + kk * p;
                        for (std::int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
                    }
                }
                return out;
            }
            case Op::transpose: {
                const Tensor& a = in(n, 0);
                std::int64_t r = a.shape()[0], c = a.shape()[1];
                Tensor out({c, r});
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
                return out;
            }
            case Op::softmax_rows: {
                const Tensor& a = in(n, 0);
                std::int64_t r = a.shape()[0], c = a.shape()[1];
                Tensor out({r, c});
                for (std::int64_t i = 0; i < r; ++i) {
                    double mx = a.at(i, 0);
                    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, a.at(i, j));
                    double sum = 0;
                    for (std::int64_t j = 0; j < c; ++j) {
                        double e = std::exp(a.at(i, j) - mx);
                        out.at(i, j) = e;
                        sum += e;
                    }
                    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) /= sum;
                }
                return out;
            }
            case Op::sum_all: {
                const Tensor& a = in(n, 0);
                double s = 0;
                for (double v : a.values()) s += v;
                return Tensor::scalar(s);
            }
            case Op::sum_rows: {
                const Tensor& a = in(n, 0);
                std::int64_t r = a.shape()[0], c = a.shape()[1];
                Tensor out({1, c});
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < c; ++j) out[j] += a.at(i, j);
                return out;
            }
            case Op::sum_cols: {
                const Tensor& a = in(n, 0);
                std::int64_t r = a.shape()[0], c = a.shape()[1];
                Tensor out({r, 1});
                for (std::int64_t i = 0; i < r; ++i) {
                    double s = 0;
                    for (std::int64_t j = 0; j < c; ++j) s += a.at(i, j);
                    out[i] = s;
                }
                return out;
            }
            case Op::reshape:
                return in(n, 0).reshaped(n.shape);
            case Op::slice: {
                const Tensor& a = in(n, 0);
                Tensor out({n.b});
                for (std::int64_t i = 0; i < n.b; ++i) out[i] = a[n.a + i];
                return out;
            }
            case Op::pad: {
                const Tensor& a = in(n, 0);
                Tensor out({n.b});
                for (std::int64_t i = 0; i < a.numel(); ++i) out[n.a + i] = a[i];
                return out;
            }
            case Op::slice_rows: {
                const Tensor& a = in(n, 0);
                std::int64_t c = a.shape()[1];
                Tensor out({n.b, c});
                for (std::int64_t i = 0; i < n.b; ++i)
                    for (std::int64_t j = 0; j < c; ++j) out.at(i, j) = a.at(n.a + i, j);
                return out;
            }
            case Op::pad_rows: {
                const Tensor& a = in(n, 0);
                std::int64_t c = a.shape()[1];
                Tensor out({n.b, c});
                for (std::int64_t i = 0; i < a.shape()[0]; ++i)
                    for (std::int64_t j = 0; j < c; ++j) out.at(n.a + i, j) = a.at(i, j);
                return out;
            }
            case Op::concat: {
                Tensor out(n.shape);
                std::int64_t off = 0;
                for (std::size_t i = 0; i < n.inputs.size(); ++i) {
                    const Tensor& p = in(n, i);
                    for (std::int64_t j = 0; j < p.numel(); ++j) out[off + j] = p[j];
                    off += p.numel();
                }
                return out;
            }
            case Op::maxpool1d: {
                const Tensor& a = in(n, 0);
                std::int64_t len = a.numel(), w = n.a, m = n.shape[0];
                Tensor out({m});
                for (std::int64_t j = 0; j < m; ++j) {
                    std::int64_t lo = j * w, hi = std::min(len, lo + w);
                    double best = a[lo];
                    for (std::int64_t i = lo + 1; i < hi; ++i)
                        if (a[i] > best) best = a[i];
                    out[j] = best;
                }
                return out;
            }
            case Op::maxpool1d_scatter: {
                const Tensor& x = in(n, 0);
                const Tensor& g = in(n, 1);
                Tensor out(x.shape());
                scatter_gather(x, n.a, [&](std::int64_t j, std::int64_t arg) { out[arg] += g[j]; });
                return out;
            }
            case Op::maxpool1d_gather: {
                const Tensor& x = in(n, 0);
                const Tensor& h = in(n, 1);
                Tensor out(n.shape);
                scatter_gather(x, n.a, [&](std::int64_t j, std::int64_t arg) { out[j] = h[arg]; });
                return out;
            }
        }
        throw usage_error("unhandled op");
    }

    // Visits each pooling window with its argmax index (first among ties).
    template <typename F>
    static void scatter_gather(const Tensor& x, std::int64_t w, F&& f) {
        std::int64_t len = x.numel();
        std::int64_t m = (len + w - 1) / w;
        for (std::int64_t j = 0; j < m; ++j) {
            std::int64_t lo = j * w, hi = std::min(len, lo + w);
            std::int64_t arg = lo;
            for (std::int64_t i = lo + 1; i < hi; ++i)
                if (x[i] > x[arg]) arg = i;
            f(j, arg);
        }
    }

    template <typename F>
    Tensor binary(const Node& n, F&& f) const {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        Tensor out(n.shape);
        std::int64_t rows = out.rows(), cols = out.cols();
        auto index = [](const Tensor& t, std::int64_t i, std::int64_t j) {
            if (t.numel() == 1) return t[0];
            std::int64_t tr = t.shape().size() == 2 ? t.shape()[0] : 1;
            std::int64_t tc = t.shape().size() == 2 ? t.shape()[1] : t.numel();
            return t[(tr == 1 ? 0 : i) * tc + (tc == 1 ? 0 : j)];
        };
        if (a.shape() == n.shape && b.shape() == n.shape) {
            const double* pa = a.data();
            const double* pb = b.data();
            double* po = out.data();
            std::int64_t total = out.numel();
            for (std::int64_t i = 0; i < total; ++i) po[i] = f(pa[i], pb[i]);
            return out;
        }
        for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < cols; ++j) out[i * cols + j] = f(index(a, i, j), index(b, i, j));
        return out;
    }

    template <typename F>
    Tensor map(const Node& n, F&& f) const {
        const Tensor& a = in(n, 0);
        Tensor out(n.shape);
        for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = f(a[i]);
        return out;
    }

    const Binding* binding_;
    std::unordered_map<const Node*, Tensor> memo_;
};

inline Tensor eval(const Expr& root, const Binding& binding) {
    Evaluation ev(binding);
    return ev.value(root);
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

using GradientMap = std::unordered_map<const Node*, Expr>;

namespace detail {

// Reduce an adjoint of the broadcast result shape back to the operand shape.
inline Expr reduce_to_shape(const Expr& g, const Shape& target) {
    if (g.shape() == target) return g;
    if (shape_numel(target) == 1) {
        Expr s = sum_all(g);
        return s.shape() == target ? s : reshape(s, target);
    }
    if (g.shape().size() == 2) {
        if (target.size() == 1 && target[0] == g.shape()[1]) return reshape(sum_rows(g), target);
        if (target.size() == 2 && target[0] == 1 && target[1] == g.shape()[1]) return sum_rows(g);
        if (target.size() == 2 && target[1] == 1 && target[0] == g.shape()[0]) return sum_cols(g);
    }
    throw usage_error("cannot reduce adjoint " + shape_str(g.shape()) + " to " + shape_str(target));
}

inline void accumulate(GradientMap& adj, const Node* node, Expr g) {
    // Adjoints always carry the exact shape of their node; broadcasting rules
    // can otherwise flatten rank on single-element tensors.
    if (g.shape() != node->shape) {
        if (shape_numel(g.shape()) != shape_numel(node->shape))
            throw usage_error("adjoint shape " + shape_str(g.shape()) + " does not match node shape " +
                              shape_str(node->shape));
        g = reshape(g, node->shape);
    }
    auto it = adj.find(node);
    if (it == adj.end())
        adj.emplace(node, std::move(g));
    else
        it->second = it->second + g;
}

inline std::vector<const Node*> topo_order(const Expr& root) {
    std::vector<const Node*> order;
    std::unordered_map<const Node*, bool> done;
    std::vector<std::pair<const Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (done.count(node)) {
            stack.pop_back();
            continue;
        }
        if (next < node->inputs.size()) {
            const Node* child = node->inputs[next].get();
            ++next;
            if (!done.count(child)) stack.emplace_back(child, 0);
            continue;
        }
        done.emplace(node, true);
        order.push_back(node);
        stack.pop_back();
    }
    return order;
}

}  // namespace detail

// Builds gradient expressions of a scalar root with respect to the given
// leaves. Every requested leaf gets an entry; leaves the root does not depend
// on map to a zero constant. The returned expressions are ordinary graph
// nodes, so they can be evaluated or differentiated again.
inline GradientMap gradients(const Expr& root, const std::vector<Expr>& leaves) {
    if (root.numel() != 1) throw usage_error("gradients: root must be scalar, got shape " + shape_str(root.shape()));
    for (const auto& l : leaves)
        if (l->op != Op::leaf) throw usage_error("gradients: target is not a leaf");

    auto order = detail::topo_order(root);
    GradientMap adj;
    adj.emplace(root.get(), constant(Tensor::full(root.shape(), 1.0)));

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Node* n = *it;
        auto git = adj.find(n);
        if (git == adj.end()) continue;  // not on a path to the root
        const Expr g = git->second;
        const auto& ins = n->inputs;
        switch (n->op) {
            case Op::leaf:
            case Op::constant:
                break;
            case Op::add: {
                detail::accumulate(adj, ins[0].get(), detail::reduce_to_shape(g, ins[0].shape()));
                detail::accumulate(adj, ins[1].get(), detail::reduce_to_shape(g, ins[1].shape()));
                break;
            }
            case Op::sub: {
                detail::accumulate(adj, ins[0].get(), detail::reduce_to_shape(g, ins[0].shape()));
                detail::accumulate(adj, ins[1].get(), detail::reduce_to_shape(-g, ins[1].shape()));
                break;
            }
            case Op::mul: {
                detail::accumulate(adj, ins[0].get(), detail::reduce_to_shape(g * ins[1], ins[0].shape()));
                detail::accumulate(adj, ins[1].get(), detail::reduce_to_shape(g * ins[0], ins[1].shape()));
                break;
            }
            case Op::div: {
                detail::accumulate(adj, ins[0].get(), detail::reduce_to_shape(g / ins[1], ins[0].shape()));
                detail::accumulate(adj, ins[1].get(),
                                   detail::reduce_to_shape(-(g * ins[0] / (ins[1] * ins[1])), ins[1].shape()));
                break;
            }
            case Op::neg:
                detail::accumulate(adj, ins[0].get(), -g);
                break;
            case Op::matmul: {
                detail::accumulate(adj, ins[0].get(), matmul(g, transpose(ins[1])));
                detail::accumulate(adj, ins[1].get(), matmul(transpose(ins[0]), g));
                break;
            }
            case Op::transpose:
                detail::accumulate(adj, ins[0].get(), transpose(g));
                break;
            case Op::relu:
                // relu'(x) = 1 for x > 0, 0 otherwise (including x == 0).
                detail::accumulate(adj, ins[0].get(), g * sign(relu(ins[0])));
                break;
            case Op::sigmoid: {
                Expr s = sigmoid(ins[0]);
                detail::accumulate(adj, ins[0].get(), g * s * (scalar(1.0) - s));
                break;
            }
            case Op::exp:
                detail::accumulate(adj, ins[0].get(), g * exp(ins[0]));
                break;
            case Op::log:
                detail::accumulate(adj, ins[0].get(), g / ins[0]);
                break;
            case Op::sqrt:
                detail::accumulate(adj, ins[0].get(), g * scalar(0.5) / sqrt(ins[0]));
                break;
            case Op::abs:
                detail::accumulate(adj, ins[0].get(), g * sign(ins[0]));
                break;
            case Op::sign:
                break;  // zero derivative everywhere we define it
            case Op::softmax_rows: {
                Expr s = softmax_rows(ins[0]);
                Expr t = g * s;
                detail::accumulate(adj, ins[0].get(), t - s * sum_cols(t));
                break;
            }
            case Op::sum_all:
                detail::accumulate(adj, ins[0].get(),
                                   reshape(g, {1}) * constant(Tensor::full(ins[0].shape(), 1.0)));
                break;
            case Op::sum_rows:
                detail::accumulate(adj, ins[0].get(), g * constant(Tensor::full(ins[0].shape(), 1.0)));
                break;
            case Op::sum_cols:
                detail::accumulate(adj, ins[0].get(), g * constant(Tensor::full(ins[0].shape(), 1.0)));
                break;
            case Op::reshape:
                detail::accumulate(adj, ins[0].get(), reshape(g, ins[0].shape()));
                break;
            case Op::slice:
                detail::accumulate(adj, ins[0].get(), pad(g, n->a, ins[0].shape()[0]));
                break;
            case Op::pad:
                detail::accumulate(adj, ins[0].get(), slice(g, n->a, ins[0].shape()[0]));
                break;
            case Op::slice_rows:
                detail::accumulate(adj, ins[0].get(), pad_rows(g, n->a, ins[0].shape()[0]));
                break;
            case Op::pad_rows:
                detail::accumulate(adj, ins[0].get(), slice_rows(g, n->a, ins[0].shape()[0]));
                break;
            case Op::concat: {
                std::int64_t off = 0;
                for (const auto& p : ins) {
                    detail::accumulate(adj, p.get(), slice(g, off, p.shape()[0]));
                    off += p.shape()[0];
                }
                break;
            }
            case Op::maxpool1d:
                detail::accumulate(adj, ins[0].get(), detail::maxpool1d_scatter(ins[0], g, n->a));
                break;
            case Op::maxpool1d_scatter:
                // d/dx is zero almost everywhere; d/dg gathers at the argmax.
                detail::accumulate(adj, ins[1].get(), detail::maxpool1d_gather(ins[0], g, n->a));
                break;
            case Op::maxpool1d_gather:
                detail::accumulate(adj, ins[1].get(), detail::maxpool1d_scatter(ins[0], g, n->a));
                break;
            case Op::max_ew: {
                // Ties route the gradient to the first operand.
                Expr second_wins = sign(relu(ins[1] - ins[0]));
                detail::accumulate(adj, ins[0].get(),
                                   detail::reduce_to_shape(g * (scalar(1.0) - second_wins), ins[0].shape()));
                detail::accumulate(adj, ins[1].get(), detail::reduce_to_shape(g * second_wins, ins[1].shape()));
                break;
            }
        }
    }

    GradientMap result;
    for (const auto& l : leaves) {
        auto it = adj.find(l.get());
        if (it != adj.end())
            result.emplace(l.get(), it->second);
        else
            result.emplace(l.get(), constant(Tensor::zeros(l.shape())));
    }
    return result;
}

inline Expr grad_of(const GradientMap& m, const Expr& leaf_expr) {
    auto it = m.find(leaf_expr.get());
    if (it == m.end()) throw usage_error("grad_of: leaf not present in gradient map");
    return it->second;
}

}  // namespace recup
