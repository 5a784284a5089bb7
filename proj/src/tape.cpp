#include "cemu/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <Eigen/Core>
#include <boost/math/special_functions/erf.hpp>

namespace cemu::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_same_tape(Var a, Var b) {
    if (&a.tape() != &b.tape()) throw ContractViolation("operands live on different tapes");
}

// Shape of an elementwise binary result; scalar operands broadcast.
Shape binary_shape(const Array& a, const Array& b, const char* op) {
    if (a.shape() == b.shape()) return a.shape();
    if (b.size() == 1) return a.shape();
    if (a.size() == 1) return b.shape();
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
}

bool any_grad(std::initializer_list<Var> vs) {
    for (Var v : vs)
        if (v.requires_grad()) return true;
    return false;
}

// Accumulates `g[i] * scale_fn(i)` into input `v`, summing when v is a broadcast scalar.
template <class F>
void accumulate_broadcast(Tape& t, Var v, std::span<const double> g, F&& factor) {
    if (!v.requires_grad()) return;
    auto& acc = t.accumulator(v);
    if (acc.size() == g.size()) {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * factor(i);
    } else {
        double s = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * factor(i);
        acc[0] += s;
    }
}

template <class F>
Var unary(Var a, F&& f, Tape::Backward back) {
    const Array& x = a.value();
    Array out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return a.tape().push(std::move(out), a.requires_grad(), std::move(back));
}

double erfc_inv_safe(double z) { return boost::math::erfc_inv(z); }

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Array& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Array value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(Array value) { return push(std::move(value), true, nullptr); }

Var Tape::push(Array value, bool requires_grad, Backward backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

std::vector<double>& Tape::accumulator(Var v) {
    auto& node = nodes_[v.id()];
    if (node.grad.empty()) node.grad.assign(node.value.size(), 0.0);
    return node.grad;
}

void Tape::backward(Var loss) {
    if (&loss.tape() != this) throw ContractViolation("backward: loss is on another tape");
    if (loss.size() != 1) throw ContractViolation("backward: loss must be scalar, got " + shape_string(loss.shape()));
    for (auto& n : nodes_) n.grad.clear();
    if (!loss.requires_grad()) return;
    accumulator(loss)[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, n.grad);
    }
}

Array Tape::grad(Var v) const {
    const auto& node = nodes_[v.id()];
    if (node.grad.empty()) return Array(node.value.shape(), 0.0);
    return Array(node.value.shape(), node.grad);
}

// ---------------------------------------------------------------------------
// Elementwise binary

Var operator+(Var a, Var b) {
    check_same_tape(a, b);
    const Array& x = a.value();
    const Array& y = b.value();
    Shape s = binary_shape(x, y, "add");
    Array out(s);
    const bool xs = x.size() == 1 && out.size() != 1, ys = y.size() == 1 && out.size() != 1;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[xs ? 0 : i] + y[ys ? 0 : i];
    return a.tape().push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::span<const double> g) {
        accumulate_broadcast(t, a, g, [](std::size_t) { return 1.0; });
        accumulate_broadcast(t, b, g, [](std::size_t) { return 1.0; });
    });
}

Var operator-(Var a, Var b) {
    check_same_tape(a, b);
    const Array& x = a.value();
    const Array& y = b.value();
    Shape s = binary_shape(x, y, "sub");
    Array out(s);
    const bool xs = x.size() == 1 && out.size() != 1, ys = y.size() == 1 && out.size() != 1;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[xs ? 0 : i] - y[ys ? 0 : i];
    return a.tape().push(std::move(out), any_grad({a, b}), [a, b](Tape& t, std::span<const double> g) {
        accumulate_broadcast(t, a, g, [](std::size_t) { return 1.0; });
        accumulate_broadcast(t, b, g, [](std::size_t) { return -1.0; });
    });
}

Var operator*(Var a, Var b) {
    check_same_tape(a, b);
    const Array& x = a.value();
    const Array& y = b.value();
    Shape s = binary_shape(x, y, "mul");
    Array out(s);
    const bool xs = x.size() == 1 && out.size() != 1, ys = y.size() == 1 && out.size() != 1;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[xs ? 0 : i] * y[ys ? 0 : i];
    return a.tape().push(std::move(out), any_grad({a, b}), [a, b, xs, ys](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        const Array& y = b.value();
        accumulate_broadcast(t, a, g, [&](std::size_t i) { return y[ys ? 0 : i]; });
        accumulate_broadcast(t, b, g, [&](std::size_t i) { return x[xs ? 0 : i]; });
    });
}

Var operator/(Var a, Var b) {
    check_same_tape(a, b);
    const Array& x = a.value();
    const Array& y = b.value();
    Shape s = binary_shape(x, y, "div");
    Array out(s);
    const bool xs = x.size() == 1 && out.size() != 1, ys = y.size() == 1 && out.size() != 1;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[xs ? 0 : i] / y[ys ? 0 : i];
    return a.tape().push(std::move(out), any_grad({a, b}), [a, b, xs, ys](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        const Array& y = b.value();
        accumulate_broadcast(t, a, g, [&](std::size_t i) { return 1.0 / y[ys ? 0 : i]; });
        accumulate_broadcast(t, b, g, [&](std::size_t i) {
            const double yi = y[ys ? 0 : i];
            return -x[xs ? 0 : i] / (yi * yi);
        });
    });
}

Var operator-(Var a) { return a * -1.0; }

Var operator+(Var a, double c) {
    return unary(a, [c](double x) { return x + c; }, [a](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    });
}
Var operator+(double c, Var a) { return a + c; }
Var operator-(Var a, double c) { return a + (-c); }
Var operator-(double c, Var a) { return (a * -1.0) + c; }

Var operator*(Var a, double c) {
    return unary(a, [c](double x) { return x * c; }, [a, c](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * c;
    });
}
Var operator*(double c, Var a) { return a * c; }
Var operator/(Var a, double c) { return a * (1.0 / c); }

Var operator/(double c, Var a) {
    return unary(a, [c](double x) { return c / x; }, [a, c](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] -= g[i] * c / (x[i] * x[i]);
    });
}

// ---------------------------------------------------------------------------
// Elementwise unary

Var exp(Var a) {
    Tape& tp = a.tape();
    const std::uint32_t next = static_cast<std::uint32_t>(tp.size());
    return unary(a, [](double x) { return std::exp(x); }, [a, next](Tape& t, std::span<const double> g) {
        const Array& y = t.value(next);
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * y[i];
    });
}

Var log(Var a) {
    for (double x : a.value().values())
        if (x < 0.0) throw DomainError("log of negative value");
    return unary(a, [](double x) { return std::log(x); }, [a](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] / x[i];
    });
}

Var sqrt(Var a) {
    for (double x : a.value().values())
        if (x < 0.0) throw DomainError("sqrt of negative value");
    Tape& tp = a.tape();
    const std::uint32_t next = static_cast<std::uint32_t>(tp.size());
    return unary(a, [](double x) { return std::sqrt(x); }, [a, next](Tape& t, std::span<const double> g) {
        const Array& y = t.value(next);
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (y[i] > 0.0) acc[i] += g[i] * 0.5 / y[i];
    });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, [a](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += 2.0 * g[i] * x[i];
    });
}

Var swish(Var a) {
    return unary(a, [](double x) { return x / (1.0 + std::exp(-x)); }, [a](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-x[i]));
            acc[i] += g[i] * (s + x[i] * s * (1.0 - s));
        }
    });
}

Var normal_cdf(Var a) {
    return unary(a, [](double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); },
                 [a](Tape& t, std::span<const double> g) {
                     const Array& x = a.value();
                     auto& acc = t.accumulator(a);
                     constexpr double inv_sqrt_2pi = 0.3989422804014327;
                     for (std::size_t i = 0; i < g.size(); ++i)
                         acc[i] += g[i] * inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
                 });
}

Var normal_quantile(Var p) {
    for (double x : p.value().values())
        if (!(x > 0.0 && x < 1.0)) throw DomainError("normal_quantile argument outside (0,1)");
    Tape& tp = p.tape();
    const std::uint32_t next = static_cast<std::uint32_t>(tp.size());
    return unary(p, [](double x) { return -std::numbers::sqrt2 * erfc_inv_safe(2.0 * x); },
                 [p, next](Tape& t, std::span<const double> g) {
                     const Array& z = t.value(next);
                     auto& acc = t.accumulator(p);
                     constexpr double sqrt_2pi = 2.5066282746310002;
                     for (std::size_t i = 0; i < g.size(); ++i)
                         acc[i] += g[i] * sqrt_2pi * std::exp(0.5 * z[i] * z[i]);
                 });
}

Var maximum(Var a, double floor) {
    return unary(a, [floor](double x) { return std::max(x, floor); }, [a, floor](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > floor) acc[i] += g[i];
    });
}

Var clamp(Var a, double lo, double hi) {
    return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }, [a, lo, hi](Tape& t, std::span<const double> g) {
        const Array& x = a.value();
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > lo && x[i] < hi) acc[i] += g[i];
    });
}

Var mul_const(Var a, const Array& c) {
    if (c.size() != a.size()) throw ContractViolation("mul_const: size mismatch");
    const Array& x = a.value();
    Array out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * c[i];
    return a.tape().push(std::move(out), a.requires_grad(), [a, c](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * c[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
    double s = 0.0;
    for (double x : a.value().values()) s += x;
    return a.tape().push(Array::scalar(s), a.requires_grad(), [a](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (double& v : acc) v += g[0];
    });
}

Var mean(Var a) {
    if (a.size() == 0) throw ContractViolation("mean of empty array");
    return sum(a) * (1.0 / static_cast<double>(a.size()));
}

Var max(Var a) {
    const Array& x = a.value();
    if (x.size() == 0) throw ContractViolation("max of empty array");
    std::size_t arg = 0;
    for (std::size_t i = 1; i < x.size(); ++i)
        if (x[i] > x[arg]) arg = i;
    return a.tape().push(Array::scalar(x[arg]), a.requires_grad(), [a, arg](Tape& t, std::span<const double> g) {
        t.accumulator(a)[arg] += g[0];
    });
}

namespace {

// Row-wise view: vectors are a single row.
std::pair<std::size_t, std::size_t> row_layout(const Array& x) {
    if (x.rank() == 2) return {x.shape()[0], x.shape()[1]};
    return {1, x.size()};
}

Array rows_softmax(const Array& x, Array* lse_out) {
    auto [n, d] = row_layout(x);
    Array out(x.shape());
    if (lse_out) *lse_out = Array({n});
    for (std::size_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * d;
        double* orow = out.data() + r * d;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < d; ++c) m = std::max(m, xr[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            orow[c] = std::exp(xr[c] - m);
            s += orow[c];
        }
        for (std::size_t c = 0; c < d; ++c) orow[c] /= s;
        if (lse_out) (*lse_out)[r] = m + std::log(s);
    }
    return out;
}

Var lse_impl(Var a, bool by_rows) {
    const Array& x = a.value();
    Array lse;
    Array sm = rows_softmax(by_rows ? x : x.reshaped({x.size()}), &lse);
    if (!by_rows) lse = Array::scalar(lse[0]);
    auto [n, d] = by_rows ? row_layout(x) : std::pair<std::size_t, std::size_t>{1, x.size()};
    return a.tape().push(std::move(lse), a.requires_grad(),
                         [a, sm = std::move(sm), n, d](Tape& t, std::span<const double> g) {
                             auto& acc = t.accumulator(a);
                             for (std::size_t r = 0; r < n; ++r)
                                 for (std::size_t c = 0; c < d; ++c) acc[r * d + c] += g[r] * sm[r * d + c];
                         });
}

Var softmax_impl(Var a, bool by_rows) {
    const Array& x = a.value();
    Array sm = rows_softmax(by_rows ? x : x.reshaped({x.size()}), nullptr);
    sm = sm.reshaped(x.shape());
    auto [n, d] = by_rows ? row_layout(x) : std::pair<std::size_t, std::size_t>{1, x.size()};
    Tape& tp = a.tape();
    const std::uint32_t next = static_cast<std::uint32_t>(tp.size());
    return tp.push(std::move(sm), a.requires_grad(), [a, next, n, d](Tape& t, std::span<const double> g) {
        const Array& s = t.value(next);
        auto& acc = t.accumulator(a);
        for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * s[r * d + c];
            for (std::size_t c = 0; c < d; ++c) acc[r * d + c] += s[r * d + c] * (g[r * d + c] - dot);
        }
    });
}

Var log_softmax_impl(Var a, bool by_rows) {
    const Array& x = a.value();
    Array lse;
    Array sm = rows_softmax(by_rows ? x : x.reshaped({x.size()}), &lse);
    auto [n, d] = by_rows ? row_layout(x) : std::pair<std::size_t, std::size_t>{1, x.size()};
    Array out(x.shape());
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] - lse[r];
    return a.tape().push(std::move(out), a.requires_grad(),
                         [a, sm = std::move(sm), n, d](Tape& t, std::span<const double> g) {
                             auto& acc = t.accumulator(a);
                             for (std::size_t r = 0; r < n; ++r) {
                                 double gs = 0.0;
                                 for (std::size_t c = 0; c < d; ++c) gs += g[r * d + c];
                                 for (std::size_t c = 0; c < d; ++c)
                                     acc[r * d + c] += g[r * d + c] - sm[r * d + c] * gs;
                             }
                         });
}

}  // namespace

Var logsumexp(Var a) { return lse_impl(a, false); }
Var logsumexp_rows(Var a) {
    if (a.value().rank() != 2) throw ContractViolation("logsumexp_rows expects a matrix");
    return lse_impl(a, true);
}
Var softmax(Var a) { return softmax_impl(a, false); }
Var softmax_rows(Var a) {
    if (a.value().rank() != 2) throw ContractViolation("softmax_rows expects a matrix");
    return softmax_impl(a, true);
}
Var log_softmax(Var a) { return log_softmax_impl(a, false); }
Var log_softmax_rows(Var a) {
    if (a.value().rank() != 2) throw ContractViolation("log_softmax_rows expects a matrix");
    return log_softmax_impl(a, true);
}

// ---------------------------------------------------------------------------
// Linear algebra and indexing

Var matmul(Var a, Var b) {
    check_same_tape(a, b);
    const Array& x = a.value();
    const Array& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0]) {
        throw ContractViolation("matmul: shapes " + shape_string(x.shape()) + " x " + shape_string(y.shape()));
    }
    const std::size_t m = x.shape()[0], k = x.shape()[1], n = y.shape()[1];
    Array out({m, n});
    if (m && n && k) {
        MapMat(out.data(), m, n).noalias() = CMapMat(x.data(), m, k) * CMapMat(y.data(), k, n);
    }
    a.tape().add_macs(static_cast<std::uint64_t>(m) * k * n);
    return a.tape().push(std::move(out), any_grad({a, b}), [a, b, m, k, n](Tape& t, std::span<const double> g) {
        if (!m || !n || !k) return;
        CMapMat G(g.data(), m, n);
        if (a.requires_grad()) {
            auto& acc = t.accumulator(a);
            MapMat(acc.data(), m, k).noalias() += G * CMapMat(b.value().data(), k, n).transpose();
        }
        if (b.requires_grad()) {
            auto& acc = t.accumulator(b);
            MapMat(acc.data(), k, n).noalias() += CMapMat(a.value().data(), m, k).transpose() * G;
        }
    });
}

Var add_row(Var m, Var row) {
    check_same_tape(m, row);
    const Array& x = m.value();
    const Array& r = row.value();
    if (x.rank() != 2 || r.size() != x.shape()[1]) {
        throw ContractViolation("add_row: " + shape_string(x.shape()) + " + " + shape_string(r.shape()));
    }
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    Array out = x;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] += r[c];
    return m.tape().push(std::move(out), any_grad({m, row}), [m, row, n, d](Tape& t, std::span<const double> g) {
        if (m.requires_grad()) {
            auto& acc = t.accumulator(m);
            for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
        }
        if (row.requires_grad()) {
            auto& acc = t.accumulator(row);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c) acc[c] += g[i * d + c];
        }
    });
}

Var reshape(Var a, Shape shape) {
    Array out = a.value().reshaped(std::move(shape));
    return a.tape().push(std::move(out), a.requires_grad(), [a](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    });
}

Var gather(Var a, std::span<const std::uint32_t> flat_index) {
    const Array& x = a.value();
    Array out({flat_index.size()});
    for (std::size_t i = 0; i < flat_index.size(); ++i) {
        if (flat_index[i] >= x.size()) throw ContractViolation("gather: index out of range");
        out[i] = x[flat_index[i]];
    }
    std::vector<std::uint32_t> idx(flat_index.begin(), flat_index.end());
    return a.tape().push(std::move(out), a.requires_grad(), [a, idx = std::move(idx)](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < idx.size(); ++i) acc[idx[i]] += g[i];
    });
}

Var gather_rows(Var a, std::span<const std::uint32_t> row_index) {
    const Array& x = a.value();
    auto [n, d] = row_layout(x);
    if (x.rank() != 2) {
        n = x.size();
        d = 1;
    }
    Array out(x.rank() == 2 ? Shape{row_index.size(), d} : Shape{row_index.size()});
    for (std::size_t i = 0; i < row_index.size(); ++i) {
        if (row_index[i] >= n) throw ContractViolation("gather_rows: index out of range");
        std::copy_n(x.data() + row_index[i] * d, d, out.data() + i * d);
    }
    std::vector<std::uint32_t> idx(row_index.begin(), row_index.end());
    return a.tape().push(std::move(out), a.requires_grad(),
                         [a, idx = std::move(idx), d](Tape& t, std::span<const double> g) {
                             auto& acc = t.accumulator(a);
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                                 double* dst = acc.data() + idx[i] * d;
                                 const double* src = g.data() + i * d;
                                 for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                             }
                         });
}

namespace {

std::pair<std::size_t, std::size_t> segment_layout(const Array& x, std::size_t nseg_rows) {
    const std::size_t d = x.rank() == 2 ? x.shape()[1] : 1;
    const std::size_t n = x.size() / (d ? d : 1);
    if (n != nseg_rows) throw ContractViolation("segment op: segment list length does not match rows");
    return {n, d};
}

Shape segment_shape(const Array& x, std::size_t segments) {
    return x.rank() == 2 ? Shape{segments, x.shape()[1]} : Shape{segments};
}

Var segment_extreme(Var a, std::span<const std::uint32_t> segment, std::size_t segments, bool want_max) {
    const Array& x = a.value();
    auto [n, d] = segment_layout(x, segment.size());
    Array out(segment_shape(x, segments), want_max ? -std::numeric_limits<double>::infinity()
                                                   : std::numeric_limits<double>::infinity());
    std::vector<std::uint32_t> arg(segments * d, std::numeric_limits<std::uint32_t>::max());
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = segment[i];
        if (s >= segments) throw ContractViolation("segment id out of range");
        for (std::size_t c = 0; c < d; ++c) {
            const double v = x[i * d + c];
            double& o = out[s * d + c];
            if (want_max ? v > o : v < o) {
                o = v;
                arg[s * d + c] = static_cast<std::uint32_t>(i * d + c);
            }
        }
    }
    for (std::size_t i = 0; i < arg.size(); ++i)
        if (arg[i] == std::numeric_limits<std::uint32_t>::max()) out[i] = 0.0;  // empty segment
    return a.tape().push(std::move(out), a.requires_grad(), [a, arg = std::move(arg)](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < arg.size(); ++i)
            if (arg[i] != std::numeric_limits<std::uint32_t>::max()) acc[arg[i]] += g[i];
    });
}

}  // namespace

Var segment_sum(Var a, std::span<const std::uint32_t> segment, std::size_t segments) {
    const Array& x = a.value();
    auto [n, d] = segment_layout(x, segment.size());
    Array out(segment_shape(x, segments), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t s = segment[i];
        if (s >= segments) throw ContractViolation("segment id out of range");
        const double* src = x.data() + i * d;
        double* dst = out.data() + s * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
    std::vector<std::uint32_t> seg(segment.begin(), segment.end());
    return a.tape().push(std::move(out), a.requires_grad(), [a, seg = std::move(seg), d](Tape& t, std::span<const double> g) {
        auto& acc = t.accumulator(a);
        for (std::size_t i = 0; i < seg.size(); ++i) {
            const double* src = g.data() + seg[i] * d;
            double* dst = acc.data() + i * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
        }
    });
}

Var segment_mean(Var a, std::span<const std::uint32_t> segment, std::size_t segments) {
    std::vector<double> count(segments, 0.0);
    for (auto s : segment) {
        if (s >= segments) throw ContractViolation("segment id out of range");
        count[s] += 1.0;
    }
    Var s = segment_sum(a, segment, segments);
    const std::size_t d = s.value().rank() == 2 ? s.shape()[1] : 1;
    Array inv(s.shape());
    for (std::size_t i = 0; i < segments; ++i)
        for (std::size_t c = 0; c < d; ++c) inv[i * d + c] = count[i] > 0 ? 1.0 / count[i] : 0.0;
    return mul_const(s, inv);
}

Var segment_max(Var a, std::span<const std::uint32_t> segment, std::size_t segments) {
    return segment_extreme(a, segment, segments, true);
}

Var segment_min(Var a, std::span<const std::uint32_t> segment, std::size_t segments) {
    return segment_extreme(a, segment, segments, false);
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw ContractViolation("concat_cols: no inputs");
    const Array& first = parts[0].value();
    const std::size_t n = first.rank() == 2 ? first.shape()[0] : first.size();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    bool rg = false;
    for (const Var& p : parts) {
        check_same_tape(parts[0], p);
        const Array& x = p.value();
        const std::size_t rows = x.rank() == 2 ? x.shape()[0] : x.size();
        const std::size_t w = x.rank() == 2 ? x.shape()[1] : 1;
        if (rows != n) throw ContractViolation("concat_cols: row count mismatch");
        widths.push_back(w);
        total += w;
        rg = rg || p.requires_grad();
    }
    Array out({n, total});
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Array& x = parts[p].value();
        const std::size_t w = widths[p];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < w; ++c) out[i * total + off + c] = x[i * w + c];
        off += w;
    }
    std::vector<Var> ins(parts.begin(), parts.end());
    return parts[0].tape().push(std::move(out), rg,
                                [ins = std::move(ins), widths = std::move(widths), n, total](Tape& t, std::span<const double> g) {
                                    std::size_t off = 0;
                                    for (std::size_t p = 0; p < ins.size(); ++p) {
                                        const std::size_t w = widths[p];
                                        if (ins[p].requires_grad()) {
                                            auto& acc = t.accumulator(ins[p]);
                                            for (std::size_t i = 0; i < n; ++i)
                                                for (std::size_t c = 0; c < w; ++c) acc[i * w + c] += g[i * total + off + c];
                                        }
                                        off += w;
                                    }
                                });
}

}  // namespace cemu::ad
