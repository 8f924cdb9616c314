#include "sysid/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace sysid {

using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Tensor to_tensor(const Matrix& m) { return Tensor(Shape{m.rows(), m.cols()}, m.data()); }

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id), 0x7a1eu};
    return std::mt19937_64(seq);
}

}  // namespace

void TrainPlan::validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
        throw ConfigError("train.learning_rate", "must be positive");
    if (chunk_length < 1) throw ConfigError("train.chunk_length", "must be at least 1");
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be at least 1");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
        throw ConfigError("train.weight_decay", "must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("train.dropout", "must lie in [0, 1)");
    if (!(teacher_forcing_p0 >= 0.0 && teacher_forcing_p0 <= 1.0))
        throw ConfigError("train.teacher_forcing_p0", "must lie in [0, 1]");
    if (eval_cadence < 1) throw ConfigError("train.eval_cadence", "must be at least 1");
    if (patience < 1) throw ConfigError("train.patience", "must be at least 1");
    if (!(wall_budget_seconds > 0.0)) throw ConfigError("train.wall_budget_seconds", "must be positive");
}

TrainPlan plan_from_config(const SysIdConfiguration& cfg, const TrainPlan& d) {
    TrainPlan p;
    const std::string loss = cfg.train_text("loss", d.loss == LossKind::mse ? "mse" : "mae");
    if (loss == "mse")
        p.loss = LossKind::mse;
    else if (loss == "mae")
        p.loss = LossKind::mae;
    else
        throw ConfigError("train.loss", "unknown loss '" + loss + "'");
    const auto count = [&](const char* key, std::size_t fallback) {
        const std::int64_t v = cfg.train_int(key, static_cast<std::int64_t>(fallback));
        if (v < 0) throw ConfigError(std::string("train.") + key, "must be non-negative");
        return static_cast<std::size_t>(v);
    };
    p.learning_rate = cfg.train_real("learning_rate", d.learning_rate);
    p.epochs = count("epochs", d.epochs);
    p.chunk_length = count("chunk_length", d.chunk_length);
    p.batch_size = count("batch_size", d.batch_size);
    p.weight_decay = cfg.train_real("weight_decay", d.weight_decay);
    p.dropout = cfg.train_real("dropout", d.dropout);
    p.teacher_forcing_p0 = cfg.train_real("teacher_forcing_p0", d.teacher_forcing_p0);
    p.eval_cadence = count("eval_cadence", d.eval_cadence);
    p.patience = count("patience", d.patience);
    p.wall_budget_seconds = cfg.train_real("wall_budget_seconds", d.wall_budget_seconds);
    p.validate();
    return p;
}

void optimizer_step(ad::ParameterMap& params, const ad::Gradients& grads, OptimizerState& st, double lr,
                    double wd) {
    for (const auto& [name, g] : grads) {
        const auto it = params.find(name);
        if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter " + name);
        if (g.shape() != it->second.shape())
            throw std::invalid_argument("gradient shape " + ad::shape_string(g.shape()) + " does not match " +
                                        name + " " + ad::shape_string(it->second.shape()));
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!std::isfinite(g[i])) throw NumericFailure("non-finite gradient for parameter " + name, i);
    }
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (auto& [name, p] : params) {
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        Tensor& m = st.first_moment.try_emplace(name, p.shape()).first->second;
        Tensor& v = st.second_moment.try_emplace(name, p.shape()).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mh = m[i] / c1;
            const double vh = v[i] / c2;
            p[i] -= lr * (mh / (std::sqrt(vh) + st.epsilon) + wd * p[i]);
        }
    }
}

std::vector<Chunk> tbptt_chunks(std::size_t length, std::size_t chunk_length) {
    if (length == 0) throw std::invalid_argument("cannot chunk an empty sequence");
    if (chunk_length == 0) throw std::invalid_argument("chunk_length must be at least 1");
    std::vector<Chunk> out;
    for (std::size_t b = 0; b < length; b += chunk_length)
        out.push_back({b, std::min(length, b + chunk_length), b > 0});
    return out;
}

std::vector<Chunk> tbptt_chunks(const Trajectory& traj, std::size_t window_length, std::size_t chunk_length) {
    if (traj.length() <= window_length)
        throw std::invalid_argument("trajectory has no samples after the init window");
    return tbptt_chunks(traj.length() - window_length, chunk_length);
}

double teacher_forcing_prob(std::size_t epoch, std::size_t total_epochs, double p0) {
    if (total_epochs == 0) return p0;
    return p0 * (1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs));
}

ModelState detach(const ModelState& state, ad::Tape& tape) {
    ModelState out;
    for (const Var& m : state.memory) out.memory.push_back(tape.constant(m.value()));
    if (state.output.valid()) out.output = tape.constant(state.output.value());
    for (const ModelState& s : state.members) out.members.push_back(detach(s, tape));
    return out;
}

Matrix init_window(const Trajectory& traj, std::size_t begin, std::size_t L) {
    if (begin + L > traj.length()) throw std::invalid_argument("init window runs past the trajectory");
    const std::size_t nu = traj.num_inputs(), ny = traj.num_outputs();
    Matrix w(1, L * (nu + ny));
    for (std::size_t k = 0; k < L; ++k) {
        for (std::size_t j = 0; j < nu; ++j) w(0, k * (nu + ny) + j) = traj.inputs()(begin + k, j);
        for (std::size_t j = 0; j < ny; ++j) w(0, k * (nu + ny) + nu + j) = traj.outputs()(begin + k, j);
    }
    return w;
}

std::string_view to_string(StopReason r) {
    switch (r) {
        case StopReason::converged: return "converged";
        case StopReason::patience: return "patience";
        case StopReason::budget: return "budget";
    }
    return "?";
}

std::string learning_curve_csv(const std::vector<CurveRow>& curve) {
    std::ostringstream os;
    os << "epoch,train_loss,val_metric,wall_seconds\n";
    const auto cell = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
    for (const CurveRow& r : curve)
        os << r.epoch << ',' << cell(r.train_loss) << ',' << cell(r.val_metric) << ',' << format_double(r.wall_seconds)
           << '\n';
    return os.str();
}

Var sequence_loss(LossKind loss, std::span<const Var> predictions, std::span<const Var> targets) {
    if (predictions.empty() || predictions.size() != targets.size())
        throw std::invalid_argument("loss needs one target per prediction");
    Var total;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const Var d = ad::sub(predictions[i], targets[i]);
        const Var term = ad::mean(loss == LossKind::mse ? ad::square(d) : ad::abs(d));
        total = total.valid() ? ad::add(total, term) : term;
    }
    return ad::scale(total, 1.0 / static_cast<double>(predictions.size()));
}

namespace {

struct Trainer {
    SequenceModel& model;
    const TrainingSet& data;
    const TrainPlan& plan;
    OptimizerState opt;
    std::mt19937_64 order_rng;
    std::mt19937_64 forcing_rng;
    std::mt19937_64 dropout_rng;

    StepContext context(ad::Tape& tape, const std::map<std::string, Var>& P) {
        return StepContext{tape, P, "", true, plan.dropout, &dropout_rng};
    }

    double update(ad::Tape& tape, Var loss) {
        const ad::Gradients g = tape.backward(loss);
        optimizer_step(model.parameters(), g, opt, plan.learning_rate, plan.weight_decay);
        return loss.value().item();
    }

    // One pass over every sequence in TBPTT chunks; returns the mean loss.
    double sequential_epoch(double forcing) {
        const std::size_t L = model.io().window_length;
        std::vector<std::size_t> order(data.sequences.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), order_rng);
        double weighted = 0.0;
        std::size_t steps = 0;
        for (std::size_t s : order) {
            const Trajectory& seq = data.sequences[s];
            std::unique_ptr<ad::Tape> prev;
            ModelState carried;
            for (const Chunk& c : tbptt_chunks(seq, L, plan.chunk_length)) {
                auto tape = std::make_unique<ad::Tape>();
                const auto P = bind_parameters(*tape, model.parameters());
                const StepContext ctx = context(*tape, P);
                ModelState st = c.carry_state ? detach(carried, *tape)
                                              : init_state(model, ctx, tape->constant(to_tensor(init_window(seq, 0, L))));
                std::vector<Var> in, tgt;
                for (std::size_t j = c.begin; j < c.end; ++j) {
                    in.push_back(tape->constant(to_tensor(seq.inputs().slice_rows(L - 1 + j, L + j))));
                    tgt.push_back(tape->constant(to_tensor(seq.outputs().slice_rows(L + j, L + j + 1))));
                }
                RolloutResult r = rollout(model, ctx, std::move(st), in, tgt, forcing, &forcing_rng);
                const Var loss = sequence_loss(plan.loss, r.outputs, tgt);
                weighted += update(*tape, loss) * static_cast<double>(c.end - c.begin);
                steps += c.end - c.begin;
                carried = std::move(r.final_state);
                prev = std::move(tape);
            }
        }
        return weighted / static_cast<double>(steps);
    }

    // Random-offset non-overlapping windows from every sequence, shuffled and
    // batched; returns the mean batch loss.
    double windowed_epoch(double forcing) {
        const std::size_t L = model.io().window_length;
        struct Window {
            std::size_t seq, last;
        };
        std::size_t H = plan.chunk_length;
        for (const Trajectory& t : data.sequences) {
            if (t.length() <= L) throw std::invalid_argument("training sequence shorter than the init window");
            H = std::min(H, t.length() - L);
        }
        std::vector<Window> windows;
        for (std::size_t s = 0; s < data.sequences.size(); ++s) {
            const std::size_t T = data.sequences[s].length();
            const std::size_t offset = order_rng() % H;
            for (std::size_t last = L - 1 + offset; last + H < T; last += H) windows.push_back({s, last});
            if (windows.empty() || windows.back().seq != s) windows.push_back({s, L - 1});
        }
        std::shuffle(windows.begin(), windows.end(), order_rng);

        double total = 0.0;
        std::size_t batches = 0;
        const std::size_t nu = model.io().num_inputs, ny = model.io().num_outputs;
        for (std::size_t b0 = 0; b0 < windows.size(); b0 += plan.batch_size) {
            const std::size_t B = std::min(plan.batch_size, windows.size() - b0);
            Matrix win(B, model.io().window_width());
            std::vector<Matrix> u(H, Matrix(B, nu)), y(H, Matrix(B, ny));
            for (std::size_t r = 0; r < B; ++r) {
                const Window& w = windows[b0 + r];
                const Trajectory& seq = data.sequences[w.seq];
                const Matrix row = init_window(seq, w.last + 1 - L, L);
                std::copy(row.data().begin(), row.data().end(), win.row(r).begin());
                for (std::size_t i = 0; i < H; ++i) {
                    for (std::size_t j = 0; j < nu; ++j) u[i](r, j) = seq.inputs()(w.last + i, j);
                    for (std::size_t j = 0; j < ny; ++j) y[i](r, j) = seq.outputs()(w.last + 1 + i, j);
                }
            }
            ad::Tape tape;
            const auto P = bind_parameters(tape, model.parameters());
            const StepContext ctx = context(tape, P);
            const ModelState st = init_state(model, ctx, tape.constant(to_tensor(win)));
            std::vector<Var> in, tgt;
            for (std::size_t i = 0; i < H; ++i) {
                in.push_back(tape.constant(to_tensor(u[i])));
                tgt.push_back(tape.constant(to_tensor(y[i])));
            }
            const RolloutResult r = rollout(model, ctx, st, in, tgt, forcing, &forcing_rng);
            total += update(tape, sequence_loss(plan.loss, r.outputs, tgt));
            ++batches;
        }
        return total / static_cast<double>(batches);
    }
};

}  // namespace

TrainResult train(const SequenceModel& model, const TrainingSet& data, const TrainPlan& plan,
                  const Validator& validator, std::uint64_t seed) {
    plan.validate();
    if (data.sequences.empty()) throw std::invalid_argument("training needs at least one sequence");
    for (const Trajectory& t : data.sequences)
        if (t.num_inputs() != model.io().num_inputs || t.num_outputs() != model.io().num_outputs)
            throw std::invalid_argument("training data does not match the model io signature");

    using clock = std::chrono::steady_clock;
    const auto t0 = clock::now();
    const auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - t0).count(); };

    TrainResult res;
    std::unique_ptr<SequenceModel> current = model.clone();
    Trainer tr{*current, data, plan, {}, stream(seed, 1), stream(seed, 2), stream(seed, 3)};

    ad::ParameterMap best_params = current->parameters();
    try {
        res.best_metric = validator(*current);
    } catch (const NumericFailure& e) {
        res.status = TrialStatus::numeric_failure;
        res.failure = e.what();
        res.best_metric = std::numeric_limits<double>::infinity();
        res.model = std::move(current);
        res.wall_seconds = elapsed();
        return res;
    }
    if (std::isnan(res.best_metric)) res.best_metric = std::numeric_limits<double>::infinity();
    res.curve.push_back({0, kNaN, res.best_metric, elapsed()});

    std::size_t stale = 0;
    const std::size_t schedule_total = plan.epochs > 0 ? plan.epochs - 1 : 0;
    for (std::size_t e = 0; e < plan.epochs; ++e) {
        CurveRow row{e + 1, kNaN, kNaN, 0.0};
        try {
            const double p = teacher_forcing_prob(e, schedule_total, plan.teacher_forcing_p0);
            row.train_loss = data.windowed ? tr.windowed_epoch(p) : tr.sequential_epoch(p);
        } catch (const NumericFailure& ex) {
            res.status = TrialStatus::numeric_failure;
            res.failure = ex.what();
            break;
        }
        ++res.epochs_run;
        const bool over_budget = elapsed() >= plan.wall_budget_seconds;
        const bool last = e + 1 == plan.epochs;
        if ((e + 1) % plan.eval_cadence == 0 || last || over_budget) {
            double v = 0.0;
            try {
                v = validator(*current);
            } catch (const NumericFailure& ex) {
                res.status = TrialStatus::numeric_failure;
                res.failure = ex.what();
                row.wall_seconds = elapsed();
                res.curve.push_back(row);
                break;
            }
            row.val_metric = v;
            if (v < res.best_metric) {
                res.best_metric = v;
                best_params = current->parameters();
                stale = 0;
            } else {
                ++stale;
            }
        }
        row.wall_seconds = elapsed();
        res.curve.push_back(row);
        if (over_budget) {
            res.stop = StopReason::budget;
            break;
        }
        if (stale >= plan.patience && !last) {
            res.stop = StopReason::patience;
            break;
        }
    }
    current->parameters() = std::move(best_params);
    res.model = std::move(current);
    res.wall_seconds = elapsed();
    return res;
}

}  // namespace sysid
