#pragma once

// Reverse-mode automatic differentiation over dense arrays.
//
// A Tape owns every node created during a forward computation. Nodes built
// only from constants carry no backward rule, so value-only evaluation costs
// no more than the arithmetic itself. Tapes are single-threaded.

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "cemu/array.hpp"

namespace cemu::ad {

class Tape;

/// Handle to a node on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

    [[nodiscard]] Tape& tape() const { return *tape_; }
    [[nodiscard]] std::uint32_t id() const { return id_; }
    [[nodiscard]] bool valid() const { return tape_ != nullptr; }
    [[nodiscard]] const Array& value() const;
    [[nodiscard]] const Shape& shape() const { return value().shape(); }
    [[nodiscard]] std::size_t size() const { return value().size(); }
    [[nodiscard]] double item() const { return value().item(); }
    [[nodiscard]] bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    std::uint32_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::span<const double> out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Array value);
    Var variable(Array value);
    Var scalar(double value) { return constant(Array::scalar(value)); }

    /// Records a node. `backward` is dropped when no input requires a gradient.
    Var push(Array value, bool requires_grad, Backward backward);

    /// Reverse sweep from a scalar node; gradients from earlier sweeps are cleared.
    void backward(Var loss);

    /// Gradient of the last backward sweep with respect to `v` (zeros if unreached).
    [[nodiscard]] Array grad(Var v) const;

    /// Mutable gradient accumulator, allocated on first use. For backward rules.
    std::vector<double>& accumulator(Var v);

    [[nodiscard]] const Array& value(std::uint32_t id) const { return nodes_[id].value; }
    [[nodiscard]] bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    /// Multiply-accumulate count of matrix products recorded so far.
    [[nodiscard]] std::uint64_t mac_count() const { return macs_; }
    void add_macs(std::uint64_t n) { macs_ += n; }

private:
    struct Node {
        Array value;
        std::vector<double> grad;
        bool requires_grad = false;
        Backward backward;
    };
    std::deque<Node> nodes_;  // stable references across push
    std::uint64_t macs_ = 0;
};

// Elementwise arithmetic. Operands must share a shape, or one must hold a
// single element (scalar broadcast).
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator/(Var a, double c);
Var operator/(double c, Var a);

Var exp(Var a);
Var log(Var a);            ///< log(0) = -inf is permitted; negative input throws DomainError.
Var sqrt(Var a);           ///< Negative input throws DomainError; d/dx at 0 is taken as 0.
Var square(Var a);
Var swish(Var a);          ///< x * sigmoid(x)
Var normal_cdf(Var a);
Var normal_quantile(Var p);  ///< Inverse standard normal CDF; p must lie in (0, 1).
Var maximum(Var a, double floor);
Var clamp(Var a, double lo, double hi);
Var mul_const(Var a, const Array& c);  ///< Elementwise product with a constant array.

Var sum(Var a);
Var mean(Var a);
Var max(Var a);
Var logsumexp(Var a);                ///< Over all elements.
Var logsumexp_rows(Var a);           ///< Row-wise for a matrix; result has one entry per row.
Var softmax(Var a);                  ///< Over all elements of a vector.
Var softmax_rows(Var a);
Var log_softmax(Var a);
Var log_softmax_rows(Var a);

Var matmul(Var a, Var b);
Var add_row(Var m, Var row);         ///< Adds a length-d vector to every row of an N x d matrix.
Var reshape(Var a, Shape shape);
Var gather(Var a, std::span<const std::uint32_t> flat_index);          ///< Result is a vector.
Var gather_rows(Var a, std::span<const std::uint32_t> row_index);      ///< Rows of a matrix.
/// Rows of `a` summed into `segments` groups. Vectors are treated as N x 1.
Var segment_sum(Var a, std::span<const std::uint32_t> segment, std::size_t segments);
Var segment_mean(Var a, std::span<const std::uint32_t> segment, std::size_t segments);
Var segment_max(Var a, std::span<const std::uint32_t> segment, std::size_t segments);
Var segment_min(Var a, std::span<const std::uint32_t> segment, std::size_t segments);
/// Places columns side by side. Vectors count as single columns.
Var concat_cols(std::span<const Var> parts);

}  // namespace cemu::ad
