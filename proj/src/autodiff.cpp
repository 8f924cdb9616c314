#include "sysid/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "sysid/datamodel.hpp"

namespace sysid::ad {

std::string shape_string(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace {
std::size_t product(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != product(shape_))
        throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                                    shape_string(shape_));
}

double Tensor::item() const {
    if (data_.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

const Tensor& Var::value() const { return tape->value(*this); }

std::string_view op_name(Op op) {
    switch (op) {
        case Op::parameter: return "parameter";
        case Op::constant: return "constant";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::add_scalar: return "add_scalar";
        case Op::tanh: return "tanh";
        case Op::sigmoid: return "sigmoid";
        case Op::relu: return "relu";
        case Op::sqrt_guarded: return "sqrt_guarded";
        case Op::exp: return "exp";
        case Op::softplus: return "softplus";
        case Op::reciprocal: return "reciprocal";
        case Op::abs: return "abs";
        case Op::square: return "square";
        case Op::clamp: return "clamp";
        case Op::concat: return "concat";
        case Op::slice: return "slice";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::custom: return "custom";
    }
    return "unknown";
}

Var Tape::parameter(const std::string& name, const Tensor& value) {
    Node n{Op::parameter, {}, value, true};
    n.name = name;
    return push(std::move(n));
}

Var Tape::constant(Tensor value) { return push(Node{Op::constant, {}, std::move(value), false}); }

Var Tape::push(Node node) {
    for (std::size_t i = 0; i < node.value.size(); ++i) {
        if (!std::isfinite(node.value[i]))
            throw NumericFailure("non-finite value produced by " + std::string(op_name(node.op)), nodes_.size());
    }
    for (auto in : node.inputs) node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

// ---------------------------------------------------------------------------
// Forward primitives

namespace {

Tape& tape_of(Var a) {
    if (!a.tape) throw std::invalid_argument("operation on an unbound variable");
    return *a.tape;
}

Tape& tape_of(Var a, Var b) {
    if (a.tape != b.tape) throw std::invalid_argument("operands live on different tapes");
    return tape_of(a);
}

[[noreturn]] void shape_error(std::string_view op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                                shape_string(b));
}

// True when b is a row vector broadcast over the rows of a.
bool is_row_broadcast(const Shape& a, const Shape& b) {
    if (a == b) return false;
    if (a.size() != 2) return false;
    if (b.size() == 1) return b[0] == a[1];
    if (b.size() == 2) return b[0] == 1 && b[1] == a[1];
    return false;
}

enum class Binary { add, sub, mul };

Var binary(Var a, Var b, Binary kind, Op op) {
    Tape& t = tape_of(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    bool broadcast = false;
    if (av.shape() != bv.shape()) {
        if (!is_row_broadcast(av.shape(), bv.shape())) shape_error(op_name(op), av.shape(), bv.shape());
        broadcast = true;
    }
    Tensor out(av.shape());
    const std::size_t n = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av[i];
        const double y = broadcast ? bv[i % n] : bv[i];
        out[i] = kind == Binary::add ? x + y : kind == Binary::sub ? x - y : x * y;
    }
    Tape::Node node{op, {a.id, b.id}, std::move(out)};
    node.index_a = broadcast ? 1 : 0;
    return t.push(std::move(node));
}

template <typename F>
Var unary(Var a, Op op, F f, double scalar_a = 0.0, double scalar_b = 0.0) {
    Tape& t = tape_of(a);
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    Tape::Node node{op, {a.id}, std::move(out)};
    node.scalar_a = scalar_a;
    node.scalar_b = scalar_b;
    return t.push(std::move(node));
}

}  // namespace

double softplus_value(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double inverse_softplus(double y) {
    if (!(y > 0.0)) throw std::invalid_argument("inverse_softplus needs a positive argument");
    return y > 30.0 ? y : std::log(std::expm1(y));
}

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) shape_error("matmul", A.shape(), B.shape());
    const std::size_t m = A.shape()[0], k = A.shape()[1], n = B.shape()[1];
    Tensor C(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = C.data().data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = B.data().data() + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return t.push(Tape::Node{Op::matmul, {a.id, b.id}, std::move(C)});
}

Var add(Var a, Var b) { return binary(a, b, Binary::add, Op::add); }
Var sub(Var a, Var b) { return binary(a, b, Binary::sub, Op::sub); }
Var mul(Var a, Var b) { return binary(a, b, Binary::mul, Op::mul); }

Var scale(Var a, double s) { return unary(a, Op::scale, [s](double x) { return s * x; }, s); }

Var add_scalar(Var a, double s) { return unary(a, Op::add_scalar, [s](double x) { return x + s; }); }
Var tanh(Var a) { return unary(a, Op::tanh, [](double x) { return std::tanh(x); }); }
Var sigmoid(Var a) {
    return unary(a, Op::sigmoid, [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
}
Var relu(Var a) { return unary(a, Op::relu, [](double x) { return x > 0.0 ? x : 0.0; }); }
Var sqrt_guarded(Var a) { return unary(a, Op::sqrt_guarded, [](double x) { return x > 0.0 ? std::sqrt(x) : 0.0; }); }
Var exp(Var a) { return unary(a, Op::exp, [](double x) { return std::exp(x); }); }
Var softplus(Var a) { return unary(a, Op::softplus, softplus_value); }
Var reciprocal(Var a) { return unary(a, Op::reciprocal, [](double x) { return 1.0 / x; }); }
Var abs(Var a) { return unary(a, Op::abs, [](double x) { return std::abs(x); }); }
Var square(Var a) { return unary(a, Op::square, [](double x) { return x * x; }); }

Var clamp(Var a, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
    return unary(a, Op::clamp, [lo, hi](double x) { return std::clamp(x, lo, hi); }, lo, hi);
}

Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat of nothing");
    Tape& t = tape_of(parts[0]);
    const Shape& s0 = parts[0].value().shape();
    if (s0.empty()) throw std::invalid_argument("concat: scalars cannot be concatenated");
    const std::size_t rows = s0.size() == 2 ? s0[0] : 1;
    std::size_t total = 0;
    for (const Var& p : parts) {
        tape_of(parts[0], p);
        const Shape& s = p.value().shape();
        if (s.size() != s0.size() || (s.size() == 2 && s[0] != rows)) shape_error("concat", s0, s);
        total += s.back();
    }
    Shape out_shape = s0.size() == 2 ? Shape{rows, total} : Shape{total};
    Tensor out(out_shape);
    std::size_t offset = 0;
    Tape::Node node{Op::concat, {}, Tensor()};
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        const std::size_t c = v.cols();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) out[r * total + offset + j] = v[r * c + j];
        offset += c;
        node.inputs.push_back(p.id);
    }
    node.value = std::move(out);
    return t.push(std::move(node));
}

Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

Var slice(Var a, std::size_t begin, std::size_t end) {
    Tape& t = tape_of(a);
    const Tensor& v = a.value();
    if (v.rank() == 0 || begin > end || end > v.cols())
        throw std::invalid_argument("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                                    ") out of range for shape " + shape_string(v.shape()));
    const std::size_t rows = v.rows(), cols = v.cols(), w = end - begin;
    Tensor out(v.rank() == 2 ? Shape{rows, w} : Shape{w});
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = v[r * cols + begin + j];
    Tape::Node node{Op::slice, {a.id}, std::move(out)};
    node.index_a = begin;
    node.index_b = end;
    return t.push(std::move(node));
}

Var sum(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double x : a.value().data()) s += x;
    return t.push(Tape::Node{Op::sum, {a.id}, Tensor::scalar(s)});
}

Var mean(Var a) {
    Tape& t = tape_of(a);
    const Tensor& v = a.value();
    if (v.size() == 0) throw std::invalid_argument("mean of an empty tensor");
    double s = 0.0;
    for (double x : v.data()) s += x;
    return t.push(Tape::Node{Op::mean, {a.id}, Tensor::scalar(s / static_cast<double>(v.size()))});
}

namespace {

struct RowLayout {
    std::size_t batch = 1;
    std::vector<std::size_t> widths;
    std::vector<bool> shared;
    std::size_t total = 0;
};

RowLayout row_layout(std::span<const Var> inputs) {
    RowLayout L;
    for (const Var& v : inputs) {
        const Tensor& t = v.value();
        if (t.rank() == 2 && t.rows() > 1) {
            if (L.batch > 1 && t.rows() != L.batch)
                throw std::invalid_argument("custom_rowwise: inconsistent batch sizes");
            L.batch = t.rows();
        }
    }
    for (const Var& v : inputs) {
        const Tensor& t = v.value();
        if (t.rank() > 2) throw std::invalid_argument("custom_rowwise: rank > 2 input " + shape_string(t.shape()));
        const bool per_row = t.rank() == 2 && (t.rows() == L.batch) && !(L.batch > 1 && t.rows() == 1);
        L.shared.push_back(!per_row);
        L.widths.push_back(t.rank() == 0 ? 1 : t.cols());
        L.total += L.widths.back();
    }
    return L;
}

}  // namespace

Var custom_rowwise(std::span<const Var> inputs, std::size_t out_dim, const RowFunction& fn) {
    if (inputs.empty()) throw std::invalid_argument("custom_rowwise needs inputs");
    Tape& t = tape_of(inputs[0]);
    for (const Var& v : inputs) tape_of(inputs[0], v);
    const RowLayout L = row_layout(inputs);
    Tensor out(Shape{L.batch, out_dim});
    Tape::Node node{Op::custom, {}, Tensor()};
    node.saved.resize(L.batch * out_dim * L.total);
    std::vector<double> row(L.total);
    for (std::size_t r = 0; r < L.batch; ++r) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const Tensor& v = inputs[i].value();
            const std::size_t base = L.shared[i] ? 0 : r * L.widths[i];
            for (std::size_t j = 0; j < L.widths[i]; ++j) row[off + j] = v[base + j];
            off += L.widths[i];
        }
        fn(row, std::span<double>(out.data().data() + r * out_dim, out_dim),
           std::span<double>(node.saved.data() + r * out_dim * L.total, out_dim * L.total));
    }
    for (const Var& v : inputs) node.inputs.push_back(v.id);
    node.value = std::move(out);
    return t.push(std::move(node));
}

// ---------------------------------------------------------------------------
// Backward

Gradients Tape::backward(Var loss) const {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const Tensor& lv = nodes_.at(loss.id).value;
    if (lv.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_string(lv.shape()));

    std::vector<Tensor> grads(loss.id + 1);
    grads[loss.id] = Tensor(lv.shape(), 1.0);

    auto acc = [&](std::size_t id) -> Tensor& {
        if (grads[id].size() == 0 && nodes_[id].value.size() != 0) grads[id] = Tensor(nodes_[id].value.shape(), 0.0);
        return grads[id];
    };

    Gradients out;
    for (std::size_t idx = loss.id + 1; idx-- > 0;) {
        const Node& n = nodes_[idx];
        if (!n.requires_grad || grads[idx].size() == 0) {
            if (n.op == Op::parameter) {
                // Parameter never reached: its gradient is exactly zero.
                auto& g = out[n.name];
                if (g.size() == 0) g = Tensor(n.value.shape(), 0.0);
            }
            continue;
        }
        const Tensor& g = grads[idx];
        const Tensor& y = n.value;
        auto input = [&](std::size_t k) -> const Node& { return nodes_[n.inputs[k]]; };
        auto needs = [&](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };

        switch (n.op) {
            case Op::parameter: {
                auto& dst = out[n.name];
                if (dst.size() == 0) {
                    dst = g;
                } else {
                    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                }
                break;
            }
            case Op::constant: break;
            case Op::matmul: {
                const Tensor& A = input(0).value;
                const Tensor& B = input(1).value;
                const std::size_t m = A.shape()[0], k = A.shape()[1], nn = B.shape()[1];
                if (needs(0)) {
                    Tensor& dA = acc(n.inputs[0]);
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            double s = 0.0;
                            const double* grow = g.data().data() + i * nn;
                            const double* brow = B.data().data() + p * nn;
                            for (std::size_t j = 0; j < nn; ++j) s += grow[j] * brow[j];
                            dA[i * k + p] += s;
                        }
                }
                if (needs(1)) {
                    Tensor& dB = acc(n.inputs[1]);
                    for (std::size_t i = 0; i < m; ++i) {
                        const double* grow = g.data().data() + i * nn;
                        for (std::size_t p = 0; p < k; ++p) {
                            const double aip = A[i * k + p];
                            if (aip == 0.0) continue;
                            double* drow = dB.data().data() + p * nn;
                            for (std::size_t j = 0; j < nn; ++j) drow[j] += aip * grow[j];
                        }
                    }
                }
                break;
            }
            case Op::add:
            case Op::sub:
            case Op::mul: {
                const bool broadcast = n.index_a == 1;
                const Tensor& av = input(0).value;
                const Tensor& bv = input(1).value;
                const std::size_t nb = bv.size();
                if (needs(0)) {
                    Tensor& da = acc(n.inputs[0]);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        da[i] += n.op == Op::mul ? g[i] * (broadcast ? bv[i % nb] : bv[i]) : g[i];
                }
                if (needs(1)) {
                    Tensor& db = acc(n.inputs[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        const std::size_t j = broadcast ? i % nb : i;
                        const double d = n.op == Op::add ? g[i] : n.op == Op::sub ? -g[i] : g[i] * av[i];
                        db[j] += d;
                    }
                }
                break;
            }
            default: {
                if (n.op == Op::concat) {
                    const std::size_t rows = y.rows(), total = y.cols();
                    std::size_t offset = 0;
                    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                        const std::size_t c = input(k).value.cols();
                        if (needs(k)) {
                            Tensor& d = acc(n.inputs[k]);
                            for (std::size_t r = 0; r < rows; ++r)
                                for (std::size_t j = 0; j < c; ++j) d[r * c + j] += g[r * total + offset + j];
                        }
                        offset += c;
                    }
                    break;
                }
                if (n.op == Op::custom) {
                    std::vector<Var> ins;
                    for (auto id : n.inputs) ins.push_back(Var{const_cast<Tape*>(this), id});
                    const RowLayout L = row_layout(ins);
                    const std::size_t m = y.cols();
                    for (std::size_t r = 0; r < L.batch; ++r) {
                        const double* J = n.saved.data() + r * m * L.total;
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                            if (needs(k)) {
                                Tensor& d = acc(n.inputs[k]);
                                const std::size_t base = L.shared[k] ? 0 : r * L.widths[k];
                                for (std::size_t j = 0; j < L.widths[k]; ++j) {
                                    double s = 0.0;
                                    for (std::size_t o = 0; o < m; ++o) s += g[r * m + o] * J[o * L.total + off + j];
                                    d[base + j] += s;
                                }
                            }
                            off += L.widths[k];
                        }
                    }
                    break;
                }
                if (!needs(0)) break;
                const Tensor& x = input(0).value;
                Tensor& dx = acc(n.inputs[0]);
                switch (n.op) {
                    case Op::scale:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += n.scalar_a * g[i];
                        break;
                    case Op::add_scalar:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                        break;
                    case Op::tanh:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
                        break;
                    case Op::sigmoid:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
                        break;
                    case Op::relu:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += x[i] > 0.0 ? g[i] : 0.0;
                        break;
                    case Op::sqrt_guarded:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += x[i] > 0.0 ? g[i] * 0.5 / y[i] : 0.0;
                        break;
                    case Op::exp:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i];
                        break;
                    case Op::softplus:
                        for (std::size_t i = 0; i < g.size(); ++i) {
                            const double s = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                                         : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                            dx[i] += g[i] * s;
                        }
                        break;
                    case Op::reciprocal:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] -= g[i] * y[i] * y[i];
                        break;
                    case Op::abs:
                        for (std::size_t i = 0; i < g.size(); ++i)
                            dx[i] += x[i] > 0.0 ? g[i] : x[i] < 0.0 ? -g[i] : 0.0;
                        break;
                    case Op::square:
                        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += 2.0 * x[i] * g[i];
                        break;
                    case Op::clamp:
                        for (std::size_t i = 0; i < g.size(); ++i)
                            dx[i] += (x[i] > n.scalar_a && x[i] < n.scalar_b) ? g[i] : 0.0;
                        break;
                    case Op::slice: {
                        const std::size_t rows = x.rows(), cols = x.cols(), w = n.index_b - n.index_a;
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < w; ++j) dx[r * cols + n.index_a + j] += g[r * w + j];
                        break;
                    }
                    case Op::sum:
                        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0];
                        break;
                    case Op::mean:
                        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[0] / static_cast<double>(dx.size());
                        break;
                    default:
                        throw std::logic_error("no backward rule for " + std::string(op_name(n.op)));
                }
            }
        }
    }
    // Parameters registered after the loss cannot influence it.
    for (std::size_t idx = loss.id + 1; idx < nodes_.size(); ++idx) {
        const Node& n = nodes_[idx];
        if (n.op == Op::parameter && out.find(n.name) == out.end()) out[n.name] = Tensor(n.value.shape(), 0.0);
    }
    return out;
}

// ---------------------------------------------------------------------------

double evaluate(const ScalarFunction& f, const ParameterMap& params, Gradients* gradients) {
    Tape tape;
    std::map<std::string, Var> vars;
    for (const auto& [name, value] : params) vars[name] = tape.parameter(name, value);
    Var loss = f(tape, vars);
    const double v = loss.value().item();
    if (gradients) *gradients = tape.backward(loss);
    return v;
}

GradientCheck finite_difference_check(const ScalarFunction& f, const ParameterMap& params, double epsilon,
                                      std::size_t max_coordinates_per_parameter) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw std::invalid_argument("epsilon must lie in [1e-7, 1e-3]");
    Gradients grads;
    evaluate(f, params, &grads);
    GradientCheck report;
    ParameterMap probe = params;
    std::size_t global_index = 0;
    for (const auto& [name, value] : params) {
        const std::size_t n = value.size();
        std::size_t stride = 1;
        if (max_coordinates_per_parameter > 0 && n > max_coordinates_per_parameter)
            stride = (n + max_coordinates_per_parameter - 1) / max_coordinates_per_parameter;
        for (std::size_t i = 0; i < n; i += stride, ++global_index) {
            Tensor& p = probe[name];
            const double orig = p[i];
            // Fourth-order central stencil.
            double f2p = 0.0, fp = 0.0, fm = 0.0, f2m = 0.0;
            try {
                p[i] = orig + 2.0 * epsilon;
                f2p = evaluate(f, probe);
                p[i] = orig + epsilon;
                fp = evaluate(f, probe);
                p[i] = orig - epsilon;
                fm = evaluate(f, probe);
                p[i] = orig - 2.0 * epsilon;
                f2m = evaluate(f, probe);
            } catch (const NumericFailure&) {
                throw NumericFailure("non-finite objective while probing " + name, i);
            }
            p[i] = orig;
            if (!std::isfinite(f2p) || !std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(f2m))
                throw NumericFailure("non-finite objective while probing " + name, i);
            const double fd = (8.0 * (fp - fm) - (f2p - f2m)) / (12.0 * epsilon);
            const double an = grads.at(name)[i];
            const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8});
            ++report.coordinates_checked;
            if (rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_parameter = name;
                report.worst_index = i;
                report.worst_analytic = an;
                report.worst_numeric = fd;
            }
        }
    }
    return report;
}

}  // namespace sysid::ad
