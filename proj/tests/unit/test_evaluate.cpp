#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "sysid/evaluate.hpp"

using namespace sysid;

namespace {

Trajectory constant_tank(std::size_t n, double level) {
    Matrix u(n, 1, 2.0), y(n, 1, level);
    return Trajectory(4.0, u, y, {"u"}, {"y"});
}

Trajectory tank_run(std::uint64_t seed) { return make_tank_dataset(TankParams{}, seed).train; }

std::vector<Trajectory> short_drone_runs(std::size_t n) {
    const DroneDataset d = make_drone_dataset(DroneParams{}, 5, n, n);
    return d.train;
}

SysIdConfiguration greybox_truth(const TankParams& p) {
    SysIdConfiguration cfg;
    cfg.model_class = ModelClass::greybox_tank;
    cfg.arch["k1"] = p.k1;
    cfg.arch["k2"] = p.k2;
    cfg.arch["k3"] = p.k3;
    cfg.arch["k4"] = p.k4;
    return cfg;
}

}  // namespace

TEST(Folds, TankFoldsAreTheTwoHalves) {
    const auto folds = make_tank_folds(tank_run(1));
    ASSERT_EQ(folds.size(), 2u);
    const Segment a{0, 0, 5, 515}, b{0, 510, 515, 1024};
    EXPECT_EQ(folds[0].validation, std::vector<Segment>{a});
    EXPECT_EQ(folds[0].train, std::vector<Segment>{b});
    EXPECT_EQ(folds[1].validation, std::vector<Segment>{b});
    EXPECT_EQ(folds[1].train, std::vector<Segment>{a});
    EXPECT_EQ(a.body_end - a.body_begin, 510u);
    EXPECT_EQ(b.body_end - b.body_begin, 509u);
    EXPECT_EQ(a.body_begin - a.window_begin, 5u);
    EXPECT_EQ(b.body_begin - b.window_begin, 5u);
    EXPECT_THROW(make_tank_folds(constant_tank(1000, 1.0)), std::invalid_argument);
}

TEST(Folds, ValidationBodiesPartitionTheScoredSamples) {
    const auto folds = make_tank_folds(tank_run(1));
    std::set<std::size_t> seen;
    for (const FoldSplit& f : folds)
        for (const Segment& s : f.validation)
            for (std::size_t k = s.body_begin; k < s.body_end; ++k) EXPECT_TRUE(seen.insert(k).second);
    EXPECT_EQ(seen.size(), 1019u);
    EXPECT_EQ(*seen.begin(), 5u);
    EXPECT_EQ(*seen.rbegin(), 1023u);
    for (const FoldSplit& f : folds)
        for (const Segment& t : f.train)
            for (const Segment& v : f.validation)
                EXPECT_TRUE(t.body_end <= v.body_begin || v.body_end <= t.body_begin);
}

TEST(Folds, DroneLeaveOneOut) {
    const auto runs = short_drone_runs(200);
    const auto folds = make_drone_folds(runs);
    ASSERT_EQ(folds.size(), 3u);
    for (std::size_t k = 0; k < 3; ++k) {
        ASSERT_EQ(folds[k].validation.size(), 1u);
        EXPECT_EQ(folds[k].validation[0].trajectory, k);
        ASSERT_EQ(folds[k].train.size(), 2u);
        std::set<std::size_t> ids{folds[k].validation[0].trajectory};
        for (const Segment& s : folds[k].train) {
            EXPECT_TRUE(ids.insert(s.trajectory).second);
            EXPECT_EQ(s.body_end, 200u);
        }
        EXPECT_EQ(ids.size(), 3u);
    }
    EXPECT_THROW(make_drone_folds(std::span(runs).first(2)), std::invalid_argument);
}

TEST(Protocol, HashCoversDataAndOrder) {
    const auto runs = short_drone_runs(200);
    const EvalProtocol a = EvalProtocol::drone(runs), b = EvalProtocol::drone(runs);
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.hash().size(), 64u);
    std::vector<Trajectory> swapped{runs[1], runs[0], runs[2]};
    EXPECT_NE(EvalProtocol::drone(swapped).hash(), a.hash());
    EXPECT_NE(EvalProtocol::drone(runs, 25).hash(), a.hash());
    EXPECT_NE(EvalProtocol::drone(runs, 50, false).hash(), a.hash());
    EXPECT_NE(EvalProtocol::tank(tank_run(1)).hash(), EvalProtocol::tank(tank_run(2)).hash());
    const EvalProtocol t = EvalProtocol::tank(tank_run(1));
    EXPECT_EQ(t.window_length(), 5u);
    EXPECT_EQ(t.discard_k0(), 51u);
    EXPECT_EQ(t.metric(), "rmse");
    EXPECT_EQ(a.metric(), "mae");
}

TEST(Metrics, RmseUsesTermsFromK0) {
    std::vector<double> y(1024), yh(1024);
    for (std::size_t k = 0; k < 1024; ++k) {
        y[k] = std::sin(0.01 * k);
        yh[k] = y[k] + (k < 50 ? 100.0 : 0.5);
    }
    EXPECT_NEAR(rmse(y, yh, 51), 0.5, 1e-12);
    double acc = 0.0;
    for (std::size_t k = 50; k < 1024; ++k) acc += (y[k] - yh[k]) * (y[k] - yh[k]);
    EXPECT_EQ(rmse(y, yh, 51), std::sqrt(acc / 974.0));
    EXPECT_EQ(rmse(y, y, 1), 0.0);
    EXPECT_THROW(rmse(y, yh, 0), std::invalid_argument);
    EXPECT_THROW(rmse(y, std::vector<double>(3), 1), std::invalid_argument);
}

TEST(Metrics, MaeAndWindowCount) {
    const std::vector<double> a{1, 2, 3, 4}, b{2, 2, 1, 8};
    EXPECT_DOUBLE_EQ(mean_absolute_error(a, b), 7.0 / 4.0);
    EXPECT_EQ(window_count(1000, 50), 19u);
    EXPECT_EQ(window_count(1001, 50), 20u);
    EXPECT_EQ(window_count(50, 50), 0u);
    EXPECT_THROW(window_count(10, 0), std::invalid_argument);
}

TEST(Metrics, GeodesicDistanceExamplesAndProperties) {
    const Mat3 I = euler_to_rotation({0, 0, 0});
    EXPECT_NEAR(geodesic_distance(I, euler_to_rotation({0, 0, std::numbers::pi / 2})), std::numbers::pi / 2, 1e-12);
    EXPECT_EQ(geodesic_distance(I, I), 0.0);
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> ang(-3.0, 3.0), pitch(-1.5, 1.5);
    for (int i = 0; i < 1000; ++i) {
        const Mat3 a = euler_to_rotation({ang(rng), pitch(rng), ang(rng)});
        const Mat3 b = euler_to_rotation({ang(rng), pitch(rng), ang(rng)});
        const double d = geodesic_distance(a, b);
        ASSERT_GE(d, 0.0);
        ASSERT_LE(d, std::numbers::pi);
        ASSERT_NEAR(d, geodesic_distance(b, a), 1e-12);
        ASSERT_LE(geodesic_distance(a, a), 1e-6);
    }
}

TEST(Metrics, WrapAngle) {
    EXPECT_NEAR(wrap_angle(3 * std::numbers::pi / 2), -std::numbers::pi / 2, 1e-12);
    EXPECT_EQ(wrap_angle(std::numbers::pi), std::numbers::pi);
    EXPECT_EQ(wrap_angle(-std::numbers::pi), std::numbers::pi);
    EXPECT_EQ(wrap_angle(0.25), 0.25);
}

TEST(Metrics, MeeOfConstantErrorsAndCumulativeSum) {
    std::vector<Vec<double, 3>> truth(7), pred(7);
    for (std::size_t w = 0; w < 7; ++w) {
        truth[w] = {double(w), 1.0, -2.0};
        pred[w] = {double(w) + 0.06, 1.08, -2.0};
    }
    EXPECT_NEAR(mee(truth, pred, StateGroup::position), 0.1, 1e-12);
    EXPECT_NEAR(cumulative_mee(std::vector<double>(50, 0.1)), 5.0, 1e-12);
    std::vector<Vec<double, 3>> yaw_t(2, Vec<double, 3>{0, 0, 0}), yaw_p(2, Vec<double, 3>{0, 0, std::numbers::pi / 2});
    EXPECT_NEAR(mee(yaw_t, yaw_p, StateGroup::attitude), std::numbers::pi / 2, 1e-12);
    std::vector<Vec<double, 3>> wrap_t(1, Vec<double, 3>{0, 0, std::numbers::pi - 0.01});
    std::vector<Vec<double, 3>> wrap_p(1, Vec<double, 3>{0, 0, -std::numbers::pi + 0.01});
    EXPECT_NEAR(mee(wrap_t, wrap_p, StateGroup::attitude), 0.02, 1e-9);
}

TEST(Metrics, CvAggregateIsArithmeticMean) {
    const std::vector<double> folds{0.25, 0.5, 0.125};
    EXPECT_EQ(arithmetic_mean(folds), (0.25 + 0.5 + 0.125) / 3.0);
}

TEST(Rollout, GeneratingGreyBoxScoresZeroOnBothFolds) {
    const TankParams truth;
    const Trajectory run = tank_run(3);
    const EvalProtocol protocol = EvalProtocol::tank(run);
    const std::vector<Trajectory> data{run};
    for (std::size_t k = 0; k < 2; ++k) {
        const NormalizationStats stats = fold_statistics(protocol, k, data);
        const auto model = build_model(greybox_truth(truth), protocol_io(protocol, data, stats));
        EXPECT_LE(score_fold(*model, protocol, k, data, stats), 1e-9);
        EXPECT_LE(tank_test_rmse(*model, run, stats), 1e-9);
    }
}

TEST(Rollout, NaivePredictorOnConstantDataIsZero) {
    const Trajectory flat = constant_tank(1024, 4.0);
    const EvalProtocol protocol = EvalProtocol::tank(flat);
    const MetricReport r = naive_predictor_score(std::vector<Trajectory>{flat}, protocol);
    ASSERT_EQ(r.per_fold.size(), 2u);
    EXPECT_EQ(r.aggregate, 0.0);
    EXPECT_EQ(r.protocol_hash, protocol.hash());
}

TEST(Rollout, NaiveTankTestRmseMatchesClosedForm) {
    const Trajectory run = tank_run(4);
    const std::vector<Trajectory> data{run};
    const EvalProtocol protocol = EvalProtocol::tank(run);
    const NormalizationStats stats = fold_statistics(protocol, 0, data);
    const auto naive = make_naive_model(protocol_io(protocol, data, stats));
    const double held = run.outputs()(4, 0);
    double acc = 0.0;
    for (std::size_t k = 50; k < 1024; ++k) acc += (run.outputs()(k, 0) - held) * (run.outputs()(k, 0) - held);
    EXPECT_NEAR(tank_test_rmse(*naive, run, stats), std::sqrt(acc / 974.0), 1e-12);
}

TEST(Rollout, WindowedMaeOfNominalPhysicsIsZero) {
    DroneDataset d = make_drone_dataset(DroneParams{}, 5, 1000, 1000);
    const std::vector<Trajectory>& runs = d.train;
    const EvalProtocol protocol = EvalProtocol::drone(runs);
    const NormalizationStats stats = fold_statistics(protocol, 0, runs);
    SysIdConfiguration cfg;
    cfg.model_class = ModelClass::physics_residual;
    cfg.arch["hidden_size"] = std::int64_t{4};
    cfg.arch["num_layers"] = std::int64_t{1};
    auto model = build_model(cfg, protocol_io(protocol, runs, stats));
    for (auto& [name, t] : model->parameters())
        if (name.rfind("head.", 0) == 0)
            for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.0;
    EXPECT_EQ(windowed_rollout(*model, normalize(runs[0], stats), 50).front().rows(), 19u);
    EXPECT_LE(windowed_rollout_mae(*model, runs[0], 50, stats), 1e-9);
    const MeeTable t = mee_table(*model, runs[0], 50, stats);
    for (StateGroup g : kStateGroups) EXPECT_LE(t.cumulative(g), 1e-6);
}

TEST(Rollout, NaiveMeeMatchesDirectComputation) {
    const auto runs = short_drone_runs(301);
    const EvalProtocol protocol = EvalProtocol::drone(runs);
    const NormalizationStats stats = fold_statistics(protocol, 0, runs);
    const auto naive = make_naive_model(protocol_io(protocol, runs, stats));
    const MeeTable t = mee_table(*naive, runs[1], 50, stats);
    ASSERT_EQ(t.values.at(StateGroup::position).size(), 50u);
    const Matrix& y = runs[1].outputs();
    for (std::size_t h : {1u, 10u, 50u}) {
        double acc = 0.0;
        for (std::size_t w = 0; w < 6; ++w) {
            const std::size_t s = 50 * w;
            const double dx = y(s + h, 0) - y(s, 0), dy = y(s + h, 1) - y(s, 1), dz = y(s + h, 2) - y(s, 2);
            acc += std::sqrt(dx * dx + dy * dy + dz * dz);
        }
        EXPECT_NEAR(t.at(StateGroup::position, h), acc / 6.0, 1e-9);
    }
}

TEST(Report, MeeCsvLayout) {
    MeeTable t;
    t.horizon = 50;
    for (StateGroup g : kStateGroups) t.values[g] = std::vector<double>(50, 0.1);
    const std::string csv = mee_table_csv({mee_row("naive", t), published_naive_reference()});
    const auto first = csv.substr(0, csv.find('\n'));
    EXPECT_EQ(first, "model,p_h10,p_h50,p_sum,v_h10,v_h50,v_sum,R_h10,R_h50,R_sum,omega_h10,omega_h50,omega_sum");
    EXPECT_NE(csv.find("naive (published reference),,0.68,,"), std::string::npos);
    EXPECT_THROW(mee_table_csv({MeeRow{"a,b", {}}}), std::invalid_argument);
}

TEST(CrossValidation, GreyBoxTruthAndDeterminism) {
    TankParams truth;
    const Trajectory run = tank_run(6);
    const EvalProtocol protocol = EvalProtocol::tank(run);
    SysIdConfiguration cfg = greybox_truth(truth);
    cfg.train["epochs"] = std::int64_t{0};
    const std::vector<Trajectory> data{run};
    const CvResult r = cross_validation_score(cfg, protocol, data);
    ASSERT_EQ(r.status, TrialStatus::ok);
    ASSERT_EQ(r.report.per_fold.size(), 2u);
    EXPECT_LE(r.report.aggregate, 1e-9);
    EXPECT_EQ(r.report.aggregate, arithmetic_mean(r.report.per_fold));

    SysIdConfiguration rnn;
    rnn.model_class = ModelClass::vanilla_rnn;
    rnn.arch["hidden_size"] = std::int64_t{3};
    rnn.train["epochs"] = std::int64_t{3};
    rnn.train["chunk_length"] = std::int64_t{100};
    const CvResult a = cross_validation_score(rnn, protocol, data, 1);
    const CvResult b = cross_validation_score(rnn, protocol, data, 2);
    EXPECT_EQ(a.report.per_fold, b.report.per_fold);
    EXPECT_EQ(a.report.protocol_hash, protocol.hash());
}

TEST(CrossValidation, RejectsDataNotMatchingFingerprints) {
    const EvalProtocol protocol = EvalProtocol::tank(tank_run(1));
    SysIdConfiguration cfg = greybox_truth(TankParams{});
    EXPECT_THROW(cross_validation_score(cfg, protocol, std::vector<Trajectory>{tank_run(2)}), std::invalid_argument);
}

TEST(Report, MetricReportJson) {
    MetricReport r{"rmse", {0.5, 0.25}, 0.375, std::nullopt, "abc"};
    const std::string j = r.to_json();
    EXPECT_NE(j.find("\"aggregate\": 0.375"), std::string::npos);
    EXPECT_NE(j.find("\"protocol_hash\": \"abc\""), std::string::npos);
}
