#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. A Tape records primitives in topological order; backward() walks
// it once in reverse. Double precision throughout.
//
// Broadcasting is limited to the bias pattern: a [B, n] operand combined with
// a [n] (or [1, n]) row vector in add / sub / mul. Everything else requires
// exactly matching shapes.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sysid::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& s);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor(Shape{n}, std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rank() const noexcept { return shape_.size(); }
    /// Leading dimension of a rank-2 tensor, 1 otherwise.
    std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
    /// Trailing dimension (1 for scalars).
    std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double item() const;

    std::span<const double> data() const noexcept { return data_; }
    std::span<double> data() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<double> data_;
};

using ParameterMap = std::map<std::string, Tensor>;
using Gradients = std::map<std::string, Tensor>;

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool valid() const noexcept { return tape != nullptr; }
};

/// Per-row function with its Jacobian, used for the custom primitive.
/// `in` is the concatenation of one row of every input; `out` receives the
/// output row; `jacobian` (out.size() x in.size(), row-major) its derivative.
using RowFunction =
    std::function<void(std::span<const double> in, std::span<double> out, std::span<double> jacobian)>;

enum class Op {
    parameter,
    constant,
    matmul,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    tanh,
    sigmoid,
    relu,
    sqrt_guarded,
    exp,
    softplus,
    reciprocal,
    abs,
    square,
    clamp,
    concat,
    slice,
    sum,
    mean,
    custom,
};

std::string_view op_name(Op op);

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf whose gradient is reported by backward() under `name`.
    Var parameter(const std::string& name, const Tensor& value);
    Var constant(Tensor value);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    std::size_t size() const noexcept { return nodes_.size(); }
    Op op(Var v) const { return nodes_.at(v.id).op; }

    /// Gradients of a scalar `loss` with respect to every parameter leaf.
    /// Contributions from fan-out are summed.
    Gradients backward(Var loss) const;

    struct Node {
        Op op;
        std::vector<std::size_t> inputs;
        Tensor value;
        bool requires_grad = false;
        double scalar_a = 0.0;
        double scalar_b = 0.0;
        std::size_t index_a = 0;
        std::size_t index_b = 0;
        std::string name;
        std::vector<double> saved;
    };

    Var push(Node node);
    const Node& node(std::size_t id) const { return nodes_[id]; }

private:
    std::vector<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var tanh(Var a);
Var sigmoid(Var a);
Var relu(Var a);
/// sqrt(max(x, 0)); the subgradient at and below zero is 0.
Var sqrt_guarded(Var a);
Var exp(Var a);
Var softplus(Var a);
Var reciprocal(Var a);
Var abs(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);
/// Concatenation along the trailing dimension.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
/// Columns [begin, end) of the trailing dimension.
Var slice(Var a, std::size_t begin, std::size_t end);
Var sum(Var a);
Var mean(Var a);

/// Applies `fn` row by row. Rank-2 inputs with B rows are per-row; rank-1
/// inputs (or [1, n] when B > 1) are shared by every row and receive the
/// row-summed gradient.
Var custom_rowwise(std::span<const Var> inputs, std::size_t out_dim, const RowFunction& fn);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

double softplus_value(double x);
/// Inverse of softplus for y > 0.
double inverse_softplus(double y);

// ---------------------------------------------------------------------------

using ScalarFunction = std::function<Var(Tape&, const std::map<std::string, Var>&)>;

struct GradientCheck {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates_checked = 0;
};

/// Registers every entry of `params` on a fresh tape and evaluates `f`.
double evaluate(const ScalarFunction& f, const ParameterMap& params, Gradients* gradients = nullptr);

/// Fourth-order central differences per coordinate against the tape
/// gradient. Relative error uses max(|a|, |b|, 1e-8) as the denominator. At most
/// `max_coordinates_per_parameter` evenly spaced coordinates of each
/// parameter are probed (0 = all). Throws NumericFailure naming the
/// coordinate if f is not finite.
GradientCheck finite_difference_check(const ScalarFunction& f, const ParameterMap& params, double epsilon = 1e-4,
                                      std::size_t max_coordinates_per_parameter = 0);

}  // namespace sysid::ad
