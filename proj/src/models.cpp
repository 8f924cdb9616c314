#include "sysid/models.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <stdexcept>

namespace sysid {

using ad::Shape;
using ad::Tensor;
using ad::Var;
using nlohmann::json;

ad::Var StepContext::param(const std::string& name) const {
    auto it = params.find(prefix + name);
    if (it == params.end()) throw std::invalid_argument("parameter '" + prefix + name + "' is not bound");
    return it->second;
}

StepContext StepContext::with_prefix(const std::string& p) const {
    StepContext c = *this;
    c.prefix = prefix + p;
    return c;
}

std::size_t SequenceModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
}

std::map<std::string, Var> bind_parameters(ad::Tape& tape, const ad::ParameterMap& params) {
    std::map<std::string, Var> out;
    for (const auto& [name, value] : params) out.emplace(name, tape.parameter(name, value));
    return out;
}

namespace {

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

Var zeros(ad::Tape& tape, std::size_t rows, std::size_t cols) { return tape.constant(Tensor(Shape{rows, cols})); }

Var row_constant(ad::Tape& tape, const std::vector<double>& v) { return tape.constant(Tensor::vector(v)); }

Var apply_dropout(const StepContext& ctx, Var x) {
    if (!ctx.training || ctx.dropout <= 0.0 || ctx.rng == nullptr) return x;
    Tensor mask(x.shape());
    std::bernoulli_distribution keep(1.0 - ctx.dropout);
    const double s = 1.0 / (1.0 - ctx.dropout);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(*ctx.rng) ? s : 0.0;
    return ad::mul(x, ctx.tape.constant(std::move(mask)));
}

// Columns of the last window sample's outputs.
Var last_window_output(const IoSignature& io, Var window) {
    const std::size_t begin = (io.window_length - 1) * (io.num_inputs + io.num_outputs) + io.num_inputs;
    return ad::slice(window, begin, begin + io.num_outputs);
}

Var mean_of(std::span<const Var> parts) {
    Var acc = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) acc = ad::add(acc, parts[i]);
    return parts.size() == 1 ? acc : ad::scale(acc, 1.0 / static_cast<double>(parts.size()));
}

// ---------------------------------------------------------------------------
// Recurrent cores

enum class CellType { rnn, lstm, gru, cfc };

struct CoreSpec {
    CellType cell = CellType::lstm;
    std::size_t input_size = 1;
    std::size_t hidden = 32;
    std::size_t layers = 1;
    double dt = 1.0;

    std::size_t slots_per_layer() const { return cell == CellType::lstm ? 2 : 1; }
    std::size_t memory_slots() const { return layers * slots_per_layer(); }
    std::size_t top_slot() const { return (layers - 1) * slots_per_layer(); }
};

std::string layer_prefix(std::size_t l) { return "core" + std::to_string(l) + "."; }

void init_core(ad::ParameterMap& P, const CoreSpec& s, std::mt19937_64& rng) {
    const std::size_t n = s.hidden;
    const double b = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t l = 0; l < s.layers; ++l) {
        const std::size_t in = l == 0 ? s.input_size : n;
        const std::string p = layer_prefix(l);
        switch (s.cell) {
            case CellType::rnn:
                P[p + "W_x"] = uniform_tensor({in, n}, b, rng);
                P[p + "W_h"] = uniform_tensor({n, n}, b, rng);
                P[p + "b"] = uniform_tensor({n}, b, rng);
                break;
            case CellType::lstm: {
                P[p + "W_x"] = uniform_tensor({in, 4 * n}, b, rng);
                P[p + "W_h"] = uniform_tensor({n, 4 * n}, b, rng);
                Tensor bias = uniform_tensor({4 * n}, b, rng);
                for (std::size_t i = n; i < 2 * n; ++i) bias[i] = 1.0;
                P[p + "b"] = std::move(bias);
                break;
            }
            case CellType::gru:
                P[p + "W_x"] = uniform_tensor({in, 3 * n}, b, rng);
                P[p + "W_h"] = uniform_tensor({n, 3 * n}, b, rng);
                P[p + "b_x"] = uniform_tensor({3 * n}, b, rng);
                P[p + "b_h"] = uniform_tensor({3 * n}, b, rng);
                break;
            case CellType::cfc: {
                P[p + "W_gx"] = uniform_tensor({in, n}, b, rng);
                P[p + "W_gh"] = uniform_tensor({n, n}, b, rng);
                P[p + "b_g"] = uniform_tensor({n}, b, rng);
                P[p + "W_cx"] = uniform_tensor({in, n}, b, rng);
                P[p + "b_c"] = uniform_tensor({n}, b, rng);
                P[p + "W_ch"] = uniform_tensor({n, n}, b, rng);
                P[p + "b_ch"] = uniform_tensor({n}, b, rng);
                // Time constants log-spaced over [dt, 50 dt].
                Tensor rho(Shape{n});
                for (std::size_t i = 0; i < n; ++i) {
                    const double frac = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
                    rho[i] = ad::inverse_softplus(s.dt * std::pow(50.0, frac));
                }
                P[p + "rho"] = std::move(rho);
                break;
            }
        }
    }
}

std::vector<Var> zero_memory(ad::Tape& tape, const CoreSpec& s, std::size_t batch) {
    std::vector<Var> m;
    for (std::size_t i = 0; i < s.memory_slots(); ++i) m.push_back(zeros(tape, batch, s.hidden));
    return m;
}

std::vector<Var> core_step(const StepContext& ctx, const CoreSpec& s, const std::vector<Var>& memory, Var x) {
    const std::size_t n = s.hidden;
    std::vector<Var> next;
    next.reserve(memory.size());
    Var inp = x;
    for (std::size_t l = 0; l < s.layers; ++l) {
        const StepContext c = ctx.with_prefix(layer_prefix(l));
        if (l > 0) inp = apply_dropout(ctx, inp);
        switch (s.cell) {
            case CellType::rnn: {
                const Var h = memory[l];
                const Var h2 = ad::tanh(ad::add(ad::add(ad::matmul(inp, c.param("W_x")), ad::matmul(h, c.param("W_h"))),
                                                c.param("b")));
                next.push_back(h2);
                inp = h2;
                break;
            }
            case CellType::lstm: {
                const Var h = memory[2 * l];
                const Var cell = memory[2 * l + 1];
                const Var z =
                    ad::add(ad::add(ad::matmul(inp, c.param("W_x")), ad::matmul(h, c.param("W_h"))), c.param("b"));
                const Var i = ad::sigmoid(ad::slice(z, 0, n));
                const Var f = ad::sigmoid(ad::slice(z, n, 2 * n));
                const Var g = ad::tanh(ad::slice(z, 2 * n, 3 * n));
                const Var o = ad::sigmoid(ad::slice(z, 3 * n, 4 * n));
                const Var c2 = ad::add(ad::mul(f, cell), ad::mul(i, g));
                const Var h2 = ad::mul(o, ad::tanh(c2));
                next.push_back(h2);
                next.push_back(c2);
                inp = h2;
                break;
            }
            case CellType::gru: {
                const Var h = memory[l];
                const Var gx = ad::add(ad::matmul(inp, c.param("W_x")), c.param("b_x"));
                const Var gh = ad::add(ad::matmul(h, c.param("W_h")), c.param("b_h"));
                const Var r = ad::sigmoid(ad::add(ad::slice(gx, 0, n), ad::slice(gh, 0, n)));
                const Var z = ad::sigmoid(ad::add(ad::slice(gx, n, 2 * n), ad::slice(gh, n, 2 * n)));
                const Var cand = ad::tanh(ad::add(ad::slice(gx, 2 * n, 3 * n), ad::mul(r, ad::slice(gh, 2 * n, 3 * n))));
                const Var h2 = ad::add(cand, ad::mul(z, ad::sub(h, cand)));
                next.push_back(h2);
                inp = h2;
                break;
            }
            case CellType::cfc: {
                // h' = g * cand + (1 - g) * h * exp(-dt / tau), with a candidate
                // whose recurrent part is gated by h itself.
                const Var h = memory[l];
                const Var g = ad::sigmoid(
                    ad::add(ad::add(ad::matmul(inp, c.param("W_gx")), ad::matmul(h, c.param("W_gh"))), c.param("b_g")));
                const Var cand = ad::add(ad::tanh(ad::add(ad::matmul(inp, c.param("W_cx")), c.param("b_c"))),
                                         ad::mul(h, ad::tanh(ad::add(ad::matmul(h, c.param("W_ch")), c.param("b_ch")))));
                const Var decay = ad::exp(ad::scale(ad::reciprocal(ad::softplus(c.param("rho"))), -s.dt));
                const Var one_minus_g = ad::add_scalar(ad::scale(g, -1.0), 1.0);
                const Var h2 = ad::add(ad::mul(g, cand), ad::mul(one_minus_g, ad::mul(h, decay)));
                next.push_back(h2);
                inp = h2;
                break;
            }
        }
    }
    return next;
}

CellType cell_for(ModelClass c) {
    switch (c) {
        case ModelClass::vanilla_rnn: return CellType::rnn;
        case ModelClass::gru: return CellType::gru;
        case ModelClass::cfc: return CellType::cfc;
        default: return CellType::lstm;
    }
}

void check_io(const IoSignature& io) {
    if (io.num_inputs == 0 || io.num_outputs == 0) throw ConfigError("io", "models need at least one input and output");
    if (io.window_length == 0) throw ConfigError("io.window_length", "must be at least 1");
    if (!(io.sample_period > 0.0) || !std::isfinite(io.sample_period))
        throw ConfigError("io.sample_period", "must be positive");
    const auto& o = io.stats.outputs;
    if (o.mean.size() != io.num_outputs || o.scale.size() != io.num_outputs)
        throw ConfigError("io.stats", "output statistics do not match the output count");
    if (io.stats.inputs &&
        (io.stats.inputs->mean.size() != io.num_inputs || io.stats.inputs->scale.size() != io.num_inputs))
        throw ConfigError("io.stats", "input statistics do not match the input count");
}

void require_drone_io(const IoSignature& io, ModelClass c) {
    if (io.num_inputs != 4 || io.num_outputs != 12 || !io.autoregressive)
        throw ConfigError("model_class", std::string(to_string(c)) +
                                             " needs the autoregressive 4-input / 12-state quadrotor signature");
}

// ---------------------------------------------------------------------------
// Recurrent models sharing the core, feature and head plumbing

class RecurrentModel : public SequenceModel {
public:
    RecurrentModel(const SysIdConfiguration& cfg, const IoSignature& io, CellType cell, bool augment_default)
        : SequenceModel(cfg, io) {
        augment_ = cfg.arch_flag("augment_inputs", augment_default);
        if (augment_ && io.num_inputs != 4)
            throw ConfigError("arch.augment_inputs", "input augmentation needs exactly 4 input channels");
        spec_.cell = cell;
        spec_.hidden = static_cast<std::size_t>(cfg.arch_int("hidden_size", 32));
        spec_.layers = static_cast<std::size_t>(cfg.arch_int("num_layers", 1));
        spec_.dt = io.sample_period;
        spec_.input_size = feature_size() + (io.autoregressive ? io.num_outputs : 0);
    }

protected:
    std::size_t feature_size() const { return io_.num_inputs * (augment_ ? 2 : 1); }
    Var features(Var u) const { return augment_ ? augment_inputs(u) : u; }

    bool augment_ = false;
    CoreSpec spec_;
};

/// Plain RNN / LSTM / GRU / CfC with a linear read-out. Non-autoregressive
/// variants map the flattened window to the initial memory; autoregressive
/// ones start from zero memory and predict increments of the fed-back output.
class BlackBoxModel final : public RecurrentModel {
public:
    BlackBoxModel(const SysIdConfiguration& cfg, const IoSignature& io)
        : RecurrentModel(cfg, io, cell_for(cfg.model_class), false) {
        std::mt19937_64 rng(cfg.seed);
        init_core(params_, spec_, rng);
        const double b = 1.0 / std::sqrt(static_cast<double>(spec_.hidden));
        params_["head.W"] = uniform_tensor({spec_.hidden, io.num_outputs}, b, rng);
        params_["head.b"] = Tensor(Shape{io.num_outputs});
        if (!io.autoregressive) {
            const std::size_t w = io.window_width();
            params_["encoder.W"] = uniform_tensor({w, spec_.memory_slots() * spec_.hidden},
                                                  1.0 / std::sqrt(static_cast<double>(w)), rng);
            params_["encoder.b"] = Tensor(Shape{spec_.memory_slots() * spec_.hidden});
        }
    }

    ModelState init_state(const StepContext& ctx, Var window) const override {
        ModelState st;
        const std::size_t batch = window.value().rows();
        if (io_.autoregressive) {
            st.memory = zero_memory(ctx.tape, spec_, batch);
            st.output = last_window_output(io_, window);
            return st;
        }
        const Var e = ad::add(ad::matmul(window, ctx.param("encoder.W")), ctx.param("encoder.b"));
        for (std::size_t i = 0; i < spec_.memory_slots(); ++i)
            st.memory.push_back(ad::slice(e, i * spec_.hidden, (i + 1) * spec_.hidden));
        st.output = head(ctx, st.memory[spec_.top_slot()]);
        return st;
    }

    ModelState step(const StepContext& ctx, const ModelState& state, Var input) const override {
        Var x = features(input);
        if (io_.autoregressive) x = ad::concat({x, state.output});
        ModelState next;
        next.memory = core_step(ctx, spec_, state.memory, x);
        const Var out = head(ctx, next.memory[spec_.top_slot()]);
        next.output = io_.autoregressive ? ad::add(state.output, out) : out;
        return next;
    }

    std::unique_ptr<SequenceModel> clone() const override { return std::make_unique<BlackBoxModel>(*this); }

private:
    Var head(const StepContext& ctx, Var h) const {
        return ad::add(ad::matmul(apply_dropout(ctx, h), ctx.param("head.W")), ctx.param("head.b"));
    }
};

/// LSTM that predicts only the velocity and body-rate increments; position
/// and attitude follow by integrating the previous velocities with a learned
/// per-axis gain in normalized units.
class KinematicsLstmModel final : public RecurrentModel {
public:
    KinematicsLstmModel(const SysIdConfiguration& cfg, const IoSignature& io)
        : RecurrentModel(cfg, io, CellType::lstm, true) {
        require_drone_io(io, cfg.model_class);
        learn_gains_ = cfg.arch_flag("learn_gains", true);
        std::mt19937_64 rng(cfg.seed);
        init_core(params_, spec_, rng);
        const double b = 1.0 / std::sqrt(static_cast<double>(spec_.hidden));
        params_["head.W"] = uniform_tensor({spec_.hidden, 6}, b, rng);
        params_["head.b"] = Tensor(Shape{6});
        const auto& s = io.stats.outputs.scale;
        std::vector<double> gp(3), ga(3);
        for (std::size_t i = 0; i < 3; ++i) {
            gp[i] = io.sample_period * s[3 + i] / s[i];
            ga[i] = io.sample_period * s[9 + i] / s[6 + i];
        }
        gain_position_ = Tensor::vector(gp);
        gain_attitude_ = Tensor::vector(ga);
        if (learn_gains_) {
            params_["gain.position"] = gain_position_;
            params_["gain.attitude"] = gain_attitude_;
        }
    }

    ModelState init_state(const StepContext& ctx, Var window) const override {
        ModelState st;
        st.memory = zero_memory(ctx.tape, spec_, window.value().rows());
        st.output = last_window_output(io_, window);
        return st;
    }

    ModelState step(const StepContext& ctx, const ModelState& state, Var input) const override {
        const Var x = state.output;
        const Var p = ad::slice(x, 0, 3), v = ad::slice(x, 3, 6), a = ad::slice(x, 6, 9), w = ad::slice(x, 9, 12);
        ModelState next;
        next.memory = core_step(ctx, spec_, state.memory, ad::concat({features(input), x}));
        const Var h = apply_dropout(ctx, next.memory[spec_.top_slot()]);
        const Var d = ad::add(ad::matmul(h, ctx.param("head.W")), ctx.param("head.b"));
        const Var gp = learn_gains_ ? ctx.param("gain.position") : ctx.tape.constant(gain_position_);
        const Var ga = learn_gains_ ? ctx.param("gain.attitude") : ctx.tape.constant(gain_attitude_);
        next.output = ad::concat({ad::add(p, ad::mul(v, gp)), ad::add(v, ad::slice(d, 0, 3)),
                                  ad::add(a, ad::mul(w, ga)), ad::add(w, ad::slice(d, 3, 6))});
        return next;
    }

    std::unique_ptr<SequenceModel> clone() const override { return std::make_unique<KinematicsLstmModel>(*this); }

private:
    bool learn_gains_ = true;
    Tensor gain_position_;
    Tensor gain_attitude_;
};

void drone_step_row(const DroneParams& params, double h, std::span<const double> in, std::span<double> out,
                    std::span<double> jac) {
    using D = Dual<16>;
    Vec<D, 12> x;
    Vec<D, 4> u;
    for (std::size_t i = 0; i < 12; ++i) x[i] = D::variable(in[i], i);
    for (std::size_t i = 0; i < 4; ++i) u[i] = D::variable(in[12 + i], 12 + i);
    const Vec<D, 12> r = drone_step(x, u, params, h);
    for (std::size_t i = 0; i < 12; ++i) {
        out[i] = r[i].v;
        for (std::size_t j = 0; j < 16; ++j) jac[i * 16 + j] = r[i].d[j];
    }
}

/// Nominal rigid-body step plus an LSTM correction of the velocity and
/// body-rate blocks. The correction head starts at zero.
class PhysicsResidualModel final : public RecurrentModel {
public:
    PhysicsResidualModel(const SysIdConfiguration& cfg, const IoSignature& io)
        : RecurrentModel(cfg, io, CellType::lstm, false) {
        require_drone_io(io, cfg.model_class);
        std::mt19937_64 rng(cfg.seed);
        init_core(params_, spec_, rng);
        params_["head.W"] = Tensor(Shape{spec_.hidden, 6});
        params_["head.b"] = Tensor(Shape{6});
        const auto& o = io.stats.outputs;
        inv_scale_.resize(12);
        for (std::size_t i = 0; i < 12; ++i) inv_scale_[i] = 1.0 / o.scale[i];
    }

    ModelState init_state(const StepContext& ctx, Var window) const override {
        ModelState st;
        st.memory = zero_memory(ctx.tape, spec_, window.value().rows());
        st.output = last_window_output(io_, window);
        return st;
    }

    ModelState step(const StepContext& ctx, const ModelState& state, Var input) const override {
        ad::Tape& tape = ctx.tape;
        const auto& o = io_.stats.outputs;
        const Var x = state.output;
        const std::size_t batch = x.value().rows();

        const Var x_phys = ad::add(ad::mul(x, row_constant(tape, o.scale)), row_constant(tape, o.mean));
        Var u_phys = input;
        if (io_.stats.inputs)
            u_phys = ad::add(ad::mul(input, row_constant(tape, io_.stats.inputs->scale)),
                             row_constant(tape, io_.stats.inputs->mean));
        const DroneParams nominal = nominal_;
        const double h = io_.sample_period;
        const Var stepped = ad::custom_rowwise(
            std::vector<Var>{x_phys, u_phys}, 12,
            [nominal, h](std::span<const double> in, std::span<double> out, std::span<double> jac) {
                drone_step_row(nominal, h, in, out, jac);
            });
        const Var x_nom = ad::mul(ad::sub(stepped, row_constant(tape, o.mean)), row_constant(tape, inv_scale_));

        ModelState next;
        next.memory = core_step(ctx, spec_, state.memory, ad::concat({features(input), x}));
        const Var hid = apply_dropout(ctx, next.memory[spec_.top_slot()]);
        const Var d = ad::add(ad::matmul(hid, ctx.param("head.W")), ctx.param("head.b"));
        const Var z = zeros(tape, batch, 3);
        const Var residual = ad::concat({z, ad::slice(d, 0, 3), z, ad::slice(d, 3, 6)});
        next.output = ad::add(x_nom, residual);
        return next;
    }

    std::unique_ptr<SequenceModel> clone() const override { return std::make_unique<PhysicsResidualModel>(*this); }

private:
    DroneParams nominal_;
    std::vector<double> inv_scale_;
};

// ---------------------------------------------------------------------------
// Grey-box tank

void tank_step_row(double level_max, bool overflow, double h, std::span<const double> in, std::span<double> out,
                   std::span<double> jac) {
    using D = Dual<7>;
    const Vec<D, 2> x{D::variable(in[0], 0), D::variable(in[1], 1)};
    const D u = D::variable(in[2], 2);
    const Vec<D, 4> k{D::variable(in[3], 3), D::variable(in[4], 4), D::variable(in[5], 5), D::variable(in[6], 6)};
    const Vec<D, 2> r = tank_step(x, u, k, level_max, overflow, h);
    for (std::size_t i = 0; i < 2; ++i) {
        out[i] = r[i].v;
        for (std::size_t j = 0; j < 7; ++j) jac[i * 7 + j] = r[i].d[j];
    }
}

// Finds the upper level x1 at sample k-2 for which one step reproduces the
// measured lower level at k-1, then returns the upper level at k-1.
// Row layout: (x2 at k-2, x2 at k-1, u at k-2, k1..k4).
void tank_init_row(double level_max, bool overflow, double h, std::span<const double> in, std::span<double> out,
                   std::span<double> jac) {
    const double x2a = in[0], x2b = in[1], u = in[2];
    const Vec<double, 4> k{in[3], in[4], in[5], in[6]};
    auto phi = [&](double x1) { return tank_step<double>({x1, x2a}, u, k, level_max, overflow, h)[1] - x2b; };

    double x1 = 0.0;
    bool interior = false;
    const double f_lo = phi(0.0), f_hi = phi(level_max);
    if (f_lo >= 0.0) {
        x1 = 0.0;
    } else if (f_hi <= 0.0) {
        x1 = level_max;
    } else {
        interior = true;
        double lo = 0.0, hi = level_max;
        x1 = 0.5 * (lo + hi);
        for (int it = 0; it < 200; ++it) {
            using D1 = Dual<1>;
            const D1 xv = D1::variable(x1, 0);
            const Vec<D1, 4> kd{k[0], k[1], k[2], k[3]};
            const D1 f = tank_step<D1>({xv, D1(x2a)}, D1(u), kd, level_max, overflow, h)[1] - D1(x2b);
            if (f.v == 0.0) break;
            if (f.v > 0.0)
                hi = x1;
            else
                lo = x1;
            double nx = f.d[0] > 0.0 ? x1 - f.v / f.d[0] : 0.5 * (lo + hi);
            if (!(nx > lo && nx < hi)) nx = 0.5 * (lo + hi);
            const bool done = std::abs(nx - x1) <= 1e-15 * std::max(1.0, std::abs(x1)) || hi - lo <= 1e-15;
            x1 = nx;
            if (done) break;
        }
    }

    using D = Dual<7>;
    const Vec<D, 2> xs{D::variable(x1, 0), D::variable(x2a, 1)};
    const Vec<D, 4> kd{D::variable(k[0], 3), D::variable(k[1], 4), D::variable(k[2], 5), D::variable(k[3], 6)};
    const Vec<D, 2> r = tank_step(xs, D::variable(u, 2), kd, level_max, overflow, h);
    const D& psi = r[0];
    const D& ph = r[1];
    out[0] = psi.v;

    // Implicit derivative of the solved x1 with respect to (x2a, x2b, u, k).
    std::array<double, 7> dx1{};
    if (interior && std::abs(ph.d[0]) > 1e-300) {
        const double inv = 1.0 / ph.d[0];
        dx1[0] = -ph.d[1] * inv;
        dx1[1] = inv;
        dx1[2] = -ph.d[2] * inv;
        for (std::size_t j = 0; j < 4; ++j) dx1[3 + j] = -ph.d[3 + j] * inv;
    }
    jac[0] = psi.d[1] + psi.d[0] * dx1[0];
    jac[1] = psi.d[0] * dx1[1];
    jac[2] = psi.d[2] + psi.d[0] * dx1[2];
    for (std::size_t j = 0; j < 4; ++j) jac[3 + j] = psi.d[3 + j] + psi.d[0] * dx1[3 + j];
}

/// Two-tank ODE with learnable positive coefficients. The unmeasured upper
/// level is recovered from the last two window samples.
class GreyBoxTankModel final : public SequenceModel {
public:
    GreyBoxTankModel(const SysIdConfiguration& cfg, const IoSignature& io) : SequenceModel(cfg, io) {
        if (io.num_inputs != 1 || io.num_outputs != 1 || io.autoregressive)
            throw ConfigError("model_class", "greybox_tank needs the single-input single-output tank signature");
        if (io.window_length < 2) throw ConfigError("io.window_length", "greybox_tank needs at least two samples");
        const TankParams d;
        level_max_ = cfg.arch_real("level_max", d.level_max);
        overflow_ = cfg.arch_flag("overflow_coupling", d.overflow_coupling);
        params_["k"] = Tensor::vector({ad::inverse_softplus(cfg.arch_real("k1", d.k1)),
                                       ad::inverse_softplus(cfg.arch_real("k2", d.k2)),
                                       ad::inverse_softplus(cfg.arch_real("k3", d.k3)),
                                       ad::inverse_softplus(cfg.arch_real("k4", d.k4))});
    }

    ModelState init_state(const StepContext& ctx, Var window) const override {
        const std::size_t off = (io_.window_length - 2) * 2;
        const Var ua = to_physical_input(ad::slice(window, off, off + 1));
        const Var ya = to_physical_output(ad::slice(window, off + 1, off + 2));
        const Var yb = to_physical_output(ad::slice(window, off + 3, off + 4));
        const Var k = ad::softplus(ctx.param("k"));
        const double L = level_max_, h = io_.sample_period;
        const bool ov = overflow_;
        const Var x1 = ad::custom_rowwise(
            std::vector<Var>{ya, yb, ua, k}, 1,
            [L, ov, h](std::span<const double> in, std::span<double> out, std::span<double> jac) {
                tank_init_row(L, ov, h, in, out, jac);
            });
        ModelState st;
        st.memory = {ad::concat({x1, yb})};
        st.output = ad::slice(window, off + 3, off + 4);
        return st;
    }

    ModelState step(const StepContext& ctx, const ModelState& state, Var input) const override {
        const Var k = ad::softplus(ctx.param("k"));
        const double L = level_max_, h = io_.sample_period;
        const bool ov = overflow_;
        const Var next = ad::custom_rowwise(
            std::vector<Var>{state.memory[0], to_physical_input(input), k}, 2,
            [L, ov, h](std::span<const double> in, std::span<double> out, std::span<double> jac) {
                tank_step_row(L, ov, h, in, out, jac);
            });
        const auto& o = io_.stats.outputs;
        ModelState st;
        st.memory = {next};
        st.output = ad::scale(ad::add_scalar(ad::slice(next, 1, 2), -o.mean[0]), 1.0 / o.scale[0]);
        return st;
    }

    std::unique_ptr<SequenceModel> clone() const override { return std::make_unique<GreyBoxTankModel>(*this); }

private:
    Var to_physical_output(Var y) const {
        const auto& o = io_.stats.outputs;
        return ad::add_scalar(ad::scale(y, o.scale[0]), o.mean[0]);
    }
    Var to_physical_input(Var u) const {
        if (!io_.stats.inputs) return u;
        return ad::add_scalar(ad::scale(u, io_.stats.inputs->scale[0]), io_.stats.inputs->mean[0]);
    }

    double level_max_ = 10.0;
    bool overflow_ = true;
};

// ---------------------------------------------------------------------------

class NaiveModel final : public SequenceModel {
public:
    explicit NaiveModel(const IoSignature& io) : SequenceModel(SysIdConfiguration{}, io) {}

    ModelState init_state(const StepContext&, Var window) const override {
        ModelState st;
        st.output = last_window_output(io_, window);
        return st;
    }
    ModelState step(const StepContext&, const ModelState& state, Var) const override { return state; }
    std::unique_ptr<SequenceModel> clone() const override { return std::make_unique<NaiveModel>(*this); }
};

std::string member_prefix(std::size_t i) { return "m" + std::to_string(i) + "."; }

class EnsembleModel final : public SequenceModel {
public:
    explicit EnsembleModel(std::vector<std::unique_ptr<SequenceModel>> members)
        : SequenceModel(SysIdConfiguration{ModelClass::ensemble, {}, {}, 0}, members.at(0)->io()),
          members_(std::move(members)) {
        for (std::size_t i = 0; i < members_.size(); ++i) {
            if (!(members_[i]->io() == io_))
                throw std::invalid_argument("ensemble members must share one io signature");
            for (const auto& [name, t] : members_[i]->parameters()) params_[member_prefix(i) + name] = t;
        }
    }
    EnsembleModel(const EnsembleModel& o) : SequenceModel(o) {
        for (const auto& m : o.members_) members_.push_back(m->clone());
    }

    ModelState init_state(const StepContext& ctx, Var window) const override {
        ModelState st;
        std::vector<Var> outs;
        for (std::size_t i = 0; i < members_.size(); ++i) {
            st.members.push_back(members_[i]->init_state(ctx.with_prefix(member_prefix(i)), window));
            outs.push_back(st.members.back().output);
        }
        st.output = mean_of(outs);
        return st;
    }

    ModelState step(const StepContext& ctx, const ModelState& state, Var input) const override {
        ModelState st;
        std::vector<Var> outs;
        for (std::size_t i = 0; i < members_.size(); ++i) {
            ModelState ms = state.members[i];
            ms.output = state.output;
            st.members.push_back(members_[i]->step(ctx.with_prefix(member_prefix(i)), ms, input));
            outs.push_back(st.members.back().output);
        }
        st.output = mean_of(outs);
        return st;
    }

    std::unique_ptr<SequenceModel> clone() const override { return std::make_unique<EnsembleModel>(*this); }

    std::vector<std::unique_ptr<SequenceModel>> members() const {
        std::vector<std::unique_ptr<SequenceModel>> out;
        for (std::size_t i = 0; i < members_.size(); ++i) {
            auto m = members_[i]->clone();
            for (auto& [name, t] : m->parameters()) t = params_.at(member_prefix(i) + name);
            out.push_back(std::move(m));
        }
        return out;
    }

private:
    std::vector<std::unique_ptr<SequenceModel>> members_;
};

}  // namespace

std::unique_ptr<SequenceModel> build_model(const SysIdConfiguration& cfg, const IoSignature& io) {
    validate_config(cfg);
    check_io(io);
    switch (cfg.model_class) {
        case ModelClass::vanilla_rnn:
        case ModelClass::lstm:
        case ModelClass::gru:
        case ModelClass::cfc: return std::make_unique<BlackBoxModel>(cfg, io);
        case ModelClass::greybox_tank: return std::make_unique<GreyBoxTankModel>(cfg, io);
        case ModelClass::physics_residual: return std::make_unique<PhysicsResidualModel>(cfg, io);
        case ModelClass::kinematics_lstm: return std::make_unique<KinematicsLstmModel>(cfg, io);
        case ModelClass::ensemble:
            throw ConfigError("model_class", "ensembles are assembled from trained members, not built from a config");
    }
    throw ConfigError("model_class", "unknown model class");
}

std::unique_ptr<SequenceModel> make_naive_model(const IoSignature& io) {
    check_io(io);
    return std::make_unique<NaiveModel>(io);
}

std::unique_ptr<SequenceModel> make_ensemble(std::vector<std::unique_ptr<SequenceModel>> members) {
    if (members.empty()) throw std::invalid_argument("an ensemble needs at least one member");
    return std::make_unique<EnsembleModel>(std::move(members));
}

std::vector<std::unique_ptr<SequenceModel>> ensemble_members(const SequenceModel& model) {
    const auto* e = dynamic_cast<const EnsembleModel*>(&model);
    if (!e) throw std::invalid_argument("model is not an ensemble");
    return e->members();
}

ModelState init_state(const SequenceModel& model, const StepContext& ctx, Var window) {
    const Tensor& w = window.value();
    if (w.rank() != 2 || w.cols() != model.io().window_width())
        throw std::invalid_argument("init window has shape " + ad::shape_string(w.shape()) + ", expected [B, " +
                                    std::to_string(model.io().window_width()) + "]");
    return model.init_state(ctx, window);
}

RolloutResult rollout(const SequenceModel& model, const StepContext& ctx, ModelState state,
                      std::span<const Var> inputs, std::span<const Var> teacher, double forcing_prob,
                      std::mt19937_64* rng) {
    RolloutResult r;
    r.outputs.reserve(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (i > 0 && forcing_prob > 0.0) {
            if (teacher.size() < i) throw std::invalid_argument("teacher forcing needs one target per step");
            const Var target = teacher[i - 1];
            const std::size_t batch = state.output.value().rows();
            const std::size_t width = state.output.value().cols();
            std::vector<bool> forced(batch, true);
            if (forcing_prob < 1.0) {
                if (rng == nullptr) throw std::invalid_argument("teacher forcing needs a random stream");
                std::uniform_real_distribution<double> dist(0.0, 1.0);
                for (std::size_t b = 0; b < batch; ++b) forced[b] = dist(*rng) < forcing_prob;
            }
            const auto n_forced = static_cast<std::size_t>(std::count(forced.begin(), forced.end(), true));
            if (n_forced == batch) {
                state.output = target;
            } else if (n_forced > 0) {
                Tensor keep(Shape{batch, width}), take(Shape{batch, width});
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t j = 0; j < width; ++j) (forced[b] ? take : keep)[b * width + j] = 1.0;
                state.output = ad::add(ad::mul(state.output, ctx.tape.constant(std::move(keep))),
                                       ad::mul(target, ctx.tape.constant(std::move(take))));
            }
        }
        try {
            state = model.step(ctx, state, inputs[i]);
        } catch (const NumericFailure& e) {
            throw NumericFailure(std::string("rollout produced non-finite values: ") + e.what(), i);
        } catch (const GimbalLockError& e) {
            throw NumericFailure(std::string("rollout hit gimbal lock: ") + e.what(), i);
        }
        r.outputs.push_back(state.output);
    }
    r.final_state = std::move(state);
    return r;
}

namespace {
Tensor to_tensor(const Matrix& m) { return Tensor(Shape{m.rows(), m.cols()}, m.data()); }
Matrix to_matrix(const Tensor& t) { return Matrix(t.rows(), t.cols(), t.values()); }
}  // namespace

std::vector<Matrix> predict(const SequenceModel& model, const Matrix& windows, std::span<const Matrix> inputs) {
    ad::Tape tape;
    const auto params = bind_parameters(tape, model.parameters());
    const StepContext ctx{tape, params};
    ModelState st = init_state(model, ctx, tape.constant(to_tensor(windows)));
    std::vector<Var> in;
    in.reserve(inputs.size());
    for (const Matrix& m : inputs) {
        if (m.rows() != windows.rows() || m.cols() != model.io().num_inputs)
            throw std::invalid_argument("prediction inputs must be [B, n_u] per step");
        in.push_back(tape.constant(to_tensor(m)));
    }
    const RolloutResult r = rollout(model, ctx, std::move(st), in);
    std::vector<Matrix> out;
    out.reserve(r.outputs.size());
    for (const Var& v : r.outputs) out.push_back(to_matrix(v.value()));
    return out;
}

Matrix augment_inputs(const Matrix& u) {
    if (u.cols() != 4)
        throw std::invalid_argument("augment_inputs expects 4 rotor channels, got " + std::to_string(u.cols()));
    Matrix out(u.rows(), 8);
    for (std::size_t r = 0; r < u.rows(); ++r)
        for (std::size_t j = 0; j < 4; ++j) {
            out(r, j) = u(r, j);
            out(r, 4 + j) = u(r, j) * u(r, j);
        }
    return out;
}

Var augment_inputs(Var u) {
    if (u.value().cols() != 4)
        throw std::invalid_argument("augment_inputs expects 4 rotor channels, got " +
                                    std::to_string(u.value().cols()));
    return ad::concat({u, ad::square(u)});
}

std::vector<Matrix> nominal_physics_rollout(const DroneParams& params, const NormalizationStats& stats,
                                            double sample_period, const Matrix& x0_normalized,
                                            std::span<const Matrix> inputs_normalized) {
    const auto& o = stats.outputs;
    std::vector<double> inv(12);
    for (std::size_t i = 0; i < 12; ++i) inv[i] = 1.0 / o.scale[i];
    Matrix x = x0_normalized;
    std::vector<Matrix> out;
    for (const Matrix& u : inputs_normalized) {
        Matrix next(x.rows(), 12);
        for (std::size_t b = 0; b < x.rows(); ++b) {
            Vec<double, 12> xp;
            Vec<double, 4> up;
            for (std::size_t i = 0; i < 12; ++i) xp[i] = x(b, i) * o.scale[i] + o.mean[i];
            for (std::size_t i = 0; i < 4; ++i)
                up[i] = stats.inputs ? u(b, i) * stats.inputs->scale[i] + stats.inputs->mean[i] : u(b, i);
            const Vec<double, 12> r = drone_step(xp, up, params, sample_period);
            for (std::size_t i = 0; i < 12; ++i) next(b, i) = (r[i] - o.mean[i]) * inv[i] + 0.0;
        }
        x = next;
        out.push_back(std::move(next));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

json stats_json(const ChannelStats& s) { return json{{"mean", s.mean}, {"scale", s.scale}}; }
ChannelStats stats_from(const json& j) {
    return ChannelStats{j.at("mean").get<std::vector<double>>(), j.at("scale").get<std::vector<double>>()};
}

json io_json(const IoSignature& io) {
    return json{{"num_inputs", io.num_inputs},
                {"num_outputs", io.num_outputs},
                {"window_length", io.window_length},
                {"autoregressive", io.autoregressive},
                {"sample_period", io.sample_period},
                {"stats",
                 {{"outputs", stats_json(io.stats.outputs)},
                  {"inputs", io.stats.inputs ? stats_json(*io.stats.inputs) : json(nullptr)},
                  {"source", io.stats.source}}}};
}

IoSignature io_from(const json& j) {
    IoSignature io;
    io.num_inputs = j.at("num_inputs").get<std::size_t>();
    io.num_outputs = j.at("num_outputs").get<std::size_t>();
    io.window_length = j.at("window_length").get<std::size_t>();
    io.autoregressive = j.at("autoregressive").get<bool>();
    io.sample_period = j.at("sample_period").get<double>();
    const json& s = j.at("stats");
    io.stats.outputs = stats_from(s.at("outputs"));
    if (!s.at("inputs").is_null()) io.stats.inputs = stats_from(s.at("inputs"));
    io.stats.source = s.at("source").get<std::string>();
    return io;
}

json checkpoint_json(const SequenceModel& model) {
    json j;
    j["format"] = 1;
    j["io"] = io_json(model.io());
    if (dynamic_cast<const NaiveModel*>(&model)) {
        j["kind"] = "naive";
        return j;
    }
    if (model.model_class() == ModelClass::ensemble) {
        j["kind"] = "ensemble";
        json members = json::array();
        for (const auto& m : ensemble_members(model)) members.push_back(checkpoint_json(*m));
        j["members"] = std::move(members);
        return j;
    }
    j["kind"] = std::string(to_string(model.model_class()));
    j["config"] = json::parse(serialize_config(model.config()));
    json params = json::object();
    for (const auto& [name, t] : model.parameters()) params[name] = json{{"shape", t.shape()}, {"data", t.values()}};
    j["parameters"] = std::move(params);
    return j;
}

std::unique_ptr<SequenceModel> model_from(const json& j) {
    if (j.at("format").get<int>() != 1) throw ConfigError("checkpoint.format", "unsupported checkpoint format");
    const IoSignature io = io_from(j.at("io"));
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "naive") return make_naive_model(io);
    if (kind == "ensemble") {
        std::vector<std::unique_ptr<SequenceModel>> members;
        for (const json& m : j.at("members")) members.push_back(model_from(m));
        return make_ensemble(std::move(members));
    }
    auto model = build_model(parse_config(j.at("config").dump()), io);
    const json& params = j.at("parameters");
    if (params.size() != model->parameters().size())
        throw ConfigError("checkpoint.parameters", "parameter set does not match the model");
    for (auto& [name, t] : model->parameters()) {
        if (!params.contains(name)) throw ConfigError("checkpoint.parameters." + name, "missing");
        Tensor loaded(params.at(name).at("shape").get<Shape>(), params.at(name).at("data").get<std::vector<double>>());
        if (loaded.shape() != t.shape()) throw ConfigError("checkpoint.parameters." + name, "shape mismatch");
        t = std::move(loaded);
    }
    return model;
}

}  // namespace

std::string save_checkpoint(const SequenceModel& model) { return checkpoint_json(model).dump(); }

std::unique_ptr<SequenceModel> load_checkpoint(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
        return model_from(j);
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint", std::string("malformed checkpoint: ") + e.what());
    }
}

}  // namespace sysid
