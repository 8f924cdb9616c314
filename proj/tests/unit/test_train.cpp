#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "sysid/train.hpp"

using namespace sysid;
using ad::Shape;
using ad::Tensor;
using ad::Var;

namespace {

IoSignature tank_io() {
    IoSignature io;
    io.window_length = 5;
    io.sample_period = 4.0;
    io.stats.outputs = {{5.0}, {2.0}};
    io.stats.inputs = ChannelStats{{3.0}, {1.5}};
    return io;
}

SysIdConfiguration rnn_config(std::uint64_t seed = 2) {
    SysIdConfiguration cfg;
    cfg.model_class = ModelClass::lstm;
    cfg.arch["hidden_size"] = std::int64_t{4};
    cfg.arch["num_layers"] = std::int64_t{1};
    cfg.seed = seed;
    return cfg;
}

Trajectory tank_sequence(std::size_t n, std::uint64_t seed) {
    ExcitationSpec s;
    s.amplitude_low = 1.0;
    s.amplitude_high = 5.0;
    s.duration_samples = n;
    s.hold_samples = 10;
    s.seed = seed;
    const Matrix u = generate_excitation(s);
    const IoSignature io = tank_io();
    NormalizationStats stats = io.stats;
    return normalize(simulate_tank(TankParams{}, u.data(), 4.0, {3.0, 3.0}), stats);
}

Tensor to_tensor(const Matrix& m) { return Tensor(Shape{m.rows(), m.cols()}, m.data()); }

}  // namespace

TEST(Tbptt, ChunkCountsAndCover) {
    const auto c = tbptt_chunks(1024, 50);
    ASSERT_EQ(c.size(), 21u);
    EXPECT_EQ(c.back().end - c.back().begin, 24u);
    EXPECT_FALSE(c.front().carry_state);
    for (std::size_t i = 1; i < c.size(); ++i) {
        EXPECT_EQ(c[i].begin, c[i - 1].end);
        EXPECT_TRUE(c[i].carry_state);
    }
    EXPECT_EQ(tbptt_chunks(1024, 5000).size(), 1u);
    EXPECT_EQ(tbptt_chunks(100, 100).size(), 1u);
    EXPECT_THROW(tbptt_chunks(0, 10), std::invalid_argument);
    EXPECT_THROW(tbptt_chunks(10, 0), std::invalid_argument);
}

TEST(Tbptt, ChunkSizesArePartitionsProperty) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t n = 1 + rng() % 3000, L = 1 + rng() % 200;
        const auto c = tbptt_chunks(n, L);
        std::size_t total = 0;
        for (const Chunk& ch : c) {
            ASSERT_GT(ch.end, ch.begin);
            ASSERT_LE(ch.end - ch.begin, L);
            total += ch.end - ch.begin;
        }
        ASSERT_EQ(total, n);
        ASSERT_EQ(c.size(), (n + L - 1) / L);
    }
}

TEST(Tbptt, ChunkedForwardEqualsUnchunked) {
    const IoSignature io = tank_io();
    const auto model = build_model(rnn_config(), io);
    const Trajectory seq = tank_sequence(200, 3);
    const std::size_t L = io.window_length;

    const auto run = [&](std::size_t chunk) {
        std::vector<double> out;
        ModelState carried;
        std::unique_ptr<ad::Tape> prev;
        for (const Chunk& c : tbptt_chunks(seq, L, chunk)) {
            auto tape = std::make_unique<ad::Tape>();
            const auto P = bind_parameters(*tape, model->parameters());
            const StepContext ctx{*tape, P};
            ModelState st = c.carry_state ? detach(carried, *tape)
                                          : init_state(*model, ctx, tape->constant(to_tensor(init_window(seq, 0, L))));
            std::vector<Var> in;
            for (std::size_t j = c.begin; j < c.end; ++j)
                in.push_back(tape->constant(to_tensor(seq.inputs().slice_rows(L - 1 + j, L + j))));
            RolloutResult r = rollout(*model, ctx, std::move(st), in);
            for (const Var& v : r.outputs) out.push_back(v.value().item());
            carried = std::move(r.final_state);
            prev = std::move(tape);
        }
        return out;
    };
    const auto full = run(100000);
    EXPECT_EQ(full.size(), 195u);
    EXPECT_EQ(run(50), full);
    EXPECT_EQ(run(7), full);
}

TEST(TeacherForcing, ScheduleEndpoints) {
    EXPECT_EQ(teacher_forcing_prob(0, 19, 0.3), 0.3);
    EXPECT_EQ(teacher_forcing_prob(19, 19, 0.3), 0.0);
    EXPECT_DOUBLE_EQ(teacher_forcing_prob(10, 20, 0.3), 0.15);
    EXPECT_EQ(teacher_forcing_prob(0, 0, 0.3), 0.3);
    for (std::size_t e = 1; e <= 19; ++e)
        EXPECT_LE(teacher_forcing_prob(e, 19, 0.3), teacher_forcing_prob(e - 1, 19, 0.3));
}

TEST(InitWindow, InterleavesInputsAndOutputs) {
    Matrix u(3, 2), y(3, 1);
    for (std::size_t k = 0; k < 3; ++k) {
        u(k, 0) = 10.0 * k;
        u(k, 1) = 10.0 * k + 1;
        y(k, 0) = 10.0 * k + 2;
    }
    const Trajectory t(1.0, u, y, {"a", "b"}, {"c"});
    const Matrix w = init_window(t, 1, 2);
    EXPECT_EQ(w, Matrix(1, 6, {10, 11, 12, 20, 21, 22}));
    EXPECT_THROW(init_window(t, 2, 2), std::invalid_argument);
}

TEST(Optimizer, ZeroGradientWithoutDecayIsFixedPoint) {
    ad::ParameterMap p{{"w", Tensor(Shape{2}, {1.5, -2.0})}};
    const ad::ParameterMap before = p;
    ad::Gradients g{{"w", Tensor(Shape{2}, {0.0, 0.0})}};
    OptimizerState st;
    for (int i = 0; i < 10; ++i) optimizer_step(p, g, st, 0.1, 0.0);
    EXPECT_EQ(p, before);
    EXPECT_EQ(st.step, 10);
}

TEST(Optimizer, FirstStepMovesByLearningRate) {
    ad::ParameterMap p{{"w", Tensor(Shape{1}, {1.0})}};
    ad::Gradients g{{"w", Tensor(Shape{1}, {3.0})}};
    OptimizerState st;
    optimizer_step(p, g, st, 0.01, 0.0);
    EXPECT_NEAR(p.at("w")[0], 0.99, 1e-9);
}

TEST(Optimizer, MinimizesQuadraticDeterministically) {
    const auto run = [] {
        ad::ParameterMap p{{"w", Tensor(Shape{3}, {1.0, -2.0, 0.5})}};
        OptimizerState st;
        std::vector<double> losses;
        for (int i = 0; i < 100; ++i) {
            ad::Tape tape;
            const auto P = bind_parameters(tape, p);
            const Var loss = ad::sum(ad::square(P.at("w")));
            losses.push_back(loss.value().item());
            optimizer_step(p, tape.backward(loss), st, 0.1, 0.0);
        }
        return losses;
    };
    const auto a = run();
    EXPECT_LT(a.back(), 0.05 * a.front());
    EXPECT_EQ(a, run());
}

TEST(Optimizer, DecoupledWeightDecayShrinks) {
    ad::ParameterMap p{{"w", Tensor(Shape{1}, {2.0})}};
    ad::Gradients g{{"w", Tensor(Shape{1}, {0.0})}};
    OptimizerState st;
    optimizer_step(p, g, st, 0.1, 0.5);
    EXPECT_DOUBLE_EQ(p.at("w")[0], 2.0 - 0.1 * 0.5 * 2.0);
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
    ad::ParameterMap p{{"encoder.W", Tensor(Shape{2}, {1.0, 1.0})}};
    ad::Gradients g{{"encoder.W", Tensor(Shape{2}, {0.0, std::numeric_limits<double>::quiet_NaN()})}};
    OptimizerState st;
    try {
        optimizer_step(p, g, st, 0.1, 0.0);
        FAIL() << "expected NumericFailure";
    } catch (const NumericFailure& e) {
        EXPECT_NE(std::string(e.what()).find("encoder.W"), std::string::npos);
        EXPECT_EQ(e.index(), 1u);
    }
    EXPECT_EQ(p.at("encoder.W")[0], 1.0);
}

TEST(Plan, ValidationAndConfigOverrides) {
    TrainPlan p;
    EXPECT_NO_THROW(p.validate());
    p.learning_rate = 0.0;
    try {
        p.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field(), "train.learning_rate");
    }
    SysIdConfiguration cfg = rnn_config();
    cfg.train["learning_rate"] = 0.02;
    cfg.train["chunk_length"] = std::int64_t{50};
    cfg.train["teacher_forcing_p0"] = 0.3;
    const TrainPlan q = plan_from_config(cfg);
    EXPECT_EQ(q.learning_rate, 0.02);
    EXPECT_EQ(q.chunk_length, 50u);
    EXPECT_EQ(q.teacher_forcing_p0, 0.3);
    EXPECT_EQ(q.epochs, TrainPlan{}.epochs);
}

TEST(SequenceLoss, MseAndMaeMatchHandComputation) {
    ad::Tape tape;
    const std::vector<Var> pred{tape.constant(Tensor(Shape{1, 2}, {1.0, 2.0})), tape.constant(Tensor(Shape{1, 2}, {0.0, 0.0}))};
    const std::vector<Var> tgt{tape.constant(Tensor(Shape{1, 2}, {0.0, 0.0})), tape.constant(Tensor(Shape{1, 2}, {3.0, -1.0}))};
    EXPECT_DOUBLE_EQ(sequence_loss(LossKind::mse, pred, tgt).value().item(), (0.5 * (1 + 4) + 0.5 * (9 + 1)) / 2);
    EXPECT_DOUBLE_EQ(sequence_loss(LossKind::mae, pred, tgt).value().item(), (0.5 * 3 + 0.5 * 4) / 2);
}

namespace {

struct Fixture {
    std::unique_ptr<SequenceModel> model = build_model(rnn_config(), tank_io());
    TrainingSet data{{tank_sequence(300, 1)}, false};
    Trajectory val = tank_sequence(200, 2);
    Validator validator = [this](const SequenceModel& m) {
        std::vector<Matrix> inputs;
        for (std::size_t k = 5; k < val.length(); ++k) inputs.push_back(val.inputs().slice_rows(k - 1, k));
        const auto pred = predict(m, init_window(val, 0, 5), inputs);
        double acc = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double e = pred[i](0, 0) - val.outputs()(i + 5, 0);
            acc += e * e;
        }
        return std::sqrt(acc / static_cast<double>(pred.size()));
    };
};

}  // namespace

TEST(Train, ZeroEpochsReturnsInitialModel) {
    Fixture f;
    TrainPlan plan;
    plan.epochs = 0;
    const TrainResult r = train(*f.model, f.data, plan, f.validator, 1);
    EXPECT_EQ(r.stop, StopReason::converged);
    EXPECT_EQ(r.epochs_run, 0u);
    ASSERT_EQ(r.curve.size(), 1u);
    EXPECT_TRUE(std::isnan(r.curve[0].train_loss));
    EXPECT_EQ(r.model->parameters(), f.model->parameters());
}

TEST(Train, TinyBudgetStopsAfterOneEpoch) {
    Fixture f;
    TrainPlan plan;
    plan.epochs = 100;
    plan.wall_budget_seconds = 1e-9;
    const TrainResult r = train(*f.model, f.data, plan, f.validator, 1);
    EXPECT_EQ(r.stop, StopReason::budget);
    EXPECT_LE(r.epochs_run, 1u);
    EXPECT_EQ(r.status, TrialStatus::ok);
}

TEST(Train, ReturnsBestEvaluatedSnapshotAndIsDeterministic) {
    Fixture f;
    TrainPlan plan;
    plan.epochs = 15;
    plan.learning_rate = 0.01;
    plan.chunk_length = 50;
    const TrainResult a = train(*f.model, f.data, plan, f.validator, 9);
    ASSERT_EQ(a.status, TrialStatus::ok);
    double best = std::numeric_limits<double>::infinity();
    for (const CurveRow& row : a.curve)
        if (!std::isnan(row.val_metric)) best = std::min(best, row.val_metric);
    EXPECT_EQ(a.best_metric, best);
    EXPECT_EQ(f.validator(*a.model), best);
    EXPECT_LT(best, a.curve.front().val_metric);

    const TrainResult b = train(*f.model, f.data, plan, f.validator, 9);
    EXPECT_EQ(a.model->parameters(), b.model->parameters());
    ASSERT_EQ(a.curve.size(), b.curve.size());
    for (std::size_t i = 0; i < a.curve.size(); ++i) {
        EXPECT_TRUE(a.curve[i].train_loss == b.curve[i].train_loss ||
                    (std::isnan(a.curve[i].train_loss) && std::isnan(b.curve[i].train_loss)));
    }
}

TEST(Train, PatienceStopsEarly) {
    Fixture f;
    TrainPlan plan;
    plan.epochs = 200;
    plan.patience = 2;
    plan.learning_rate = 1.0;
    const Validator worse = [n = 0](const SequenceModel&) mutable { return static_cast<double>(++n); };
    const TrainResult r = train(*f.model, f.data, plan, worse, 1);
    EXPECT_EQ(r.stop, StopReason::patience);
    EXPECT_EQ(r.epochs_run, 2u);
    EXPECT_EQ(r.best_metric, 1.0);
    EXPECT_EQ(r.model->parameters(), f.model->parameters());
}

TEST(Train, WindowedBatchesAndCadence) {
    Fixture f;
    TrainingSet windowed{{tank_sequence(300, 1), tank_sequence(250, 4)}, true};
    TrainPlan plan;
    plan.epochs = 4;
    plan.chunk_length = 20;
    plan.batch_size = 4;
    plan.eval_cadence = 3;
    const TrainResult r = train(*f.model, windowed, plan, f.validator, 2);
    ASSERT_EQ(r.curve.size(), 5u);
    EXPECT_FALSE(std::isnan(r.curve[3].val_metric));
    EXPECT_TRUE(std::isnan(r.curve[1].val_metric));
    EXPECT_FALSE(std::isnan(r.curve[4].val_metric));
    for (std::size_t i = 1; i < r.curve.size(); ++i) EXPECT_TRUE(std::isfinite(r.curve[i].train_loss));
}

TEST(Train, LearningCurveCsvHeaderAndRows) {
    const std::vector<CurveRow> curve{{0, std::nan(""), 2.0, 0.0}, {1, 0.5, std::nan(""), 0.25}};
    const std::string csv = learning_curve_csv(curve);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_metric,wall_seconds");
    EXPECT_NE(csv.find("\n1,0.5,"), std::string::npos);
}
