#pragma once

// Fold construction, rollout protocols and metrics. The evaluation protocol
// is the only source of the cross-validation score V.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sysid/datamodel.hpp"
#include "sysid/models.hpp"
#include "sysid/simulate.hpp"
#include "sysid/train.hpp"

namespace sysid {

enum class Benchmark { tank, drone };
std::string_view to_string(Benchmark b);
std::optional<Benchmark> benchmark_from_string(std::string_view s);

/// Rows [window_begin, body_begin) of a trajectory initialize the model; rows
/// [body_begin, body_end) are predicted. 0-based, half-open.
struct Segment {
    std::size_t trajectory = 0;
    std::size_t window_begin = 0;
    std::size_t body_begin = 0;
    std::size_t body_end = 0;
    bool operator==(const Segment&) const = default;
};

struct FoldSplit {
    std::vector<Segment> train;
    std::vector<Segment> validation;
    bool operator==(const FoldSplit&) const = default;
};

/// Tank: fold 1 validates on samples 6-515 (window 1-5) and trains on fold 2;
/// fold 2 validates on 516-1024 (window 511-515) and trains on fold 1.
/// Requires exactly 1024 samples.
std::vector<FoldSplit> make_tank_folds(const Trajectory& traj);
/// Leave-one-trajectory-out over exactly 3 trajectories.
std::vector<FoldSplit> make_drone_folds(std::span<const Trajectory> trajs);

/// Immutable scoring protocol. The hash covers every field, including the
/// fingerprints of the training trajectories in order.
class EvalProtocol {
public:
    static EvalProtocol tank(const Trajectory& train);
    static EvalProtocol drone(std::span<const Trajectory> trajs, std::size_t horizon = 50,
                              bool normalize_inputs = true);

    Benchmark benchmark() const { return benchmark_; }
    const std::vector<FoldSplit>& folds() const { return folds_; }
    std::size_t window_length() const { return window_length_; }
    std::size_t horizon() const { return horizon_; }
    /// 1-based first scored test sample (tank test RMSE).
    std::size_t discard_k0() const { return discard_k0_; }
    const std::string& metric() const { return metric_; }
    bool normalize_inputs() const { return normalize_inputs_; }
    const std::vector<std::string>& fingerprints() const { return fingerprints_; }
    const std::string& hash() const { return hash_; }
    std::string canonical_json() const;

private:
    EvalProtocol() = default;
    void seal();

    Benchmark benchmark_ = Benchmark::tank;
    std::vector<FoldSplit> folds_;
    std::size_t window_length_ = 5;
    std::size_t horizon_ = 0;
    std::size_t discard_k0_ = 51;
    std::string metric_;
    bool normalize_inputs_ = true;
    std::vector<std::string> fingerprints_;
    std::string hash_;
};

/// SHA-256 of the canonical CSV bytes of a trajectory.
std::string trajectory_fingerprint(const Trajectory& traj);

// ---------------------------------------------------------------------------
// Metrics

/// sqrt(mean over k = k0..K of (y_k - yhat_k)^2); k0 is 1-based, so the mean
/// has K - k0 + 1 terms.
double rmse(std::span<const double> y_true, std::span<const double> y_pred, std::size_t k0 = 1);
double mean_absolute_error(std::span<const double> a, std::span<const double> b);

/// Rotation angle of R_a^T R_b, with the trace argument clamped to [-1, 1].
double geodesic_distance(const Mat3& a, const Mat3& b);
/// Wraps to (-pi, pi].
double wrap_angle(double a);

enum class StateGroup { position, velocity, attitude, rates };
inline constexpr std::array<StateGroup, 4> kStateGroups{StateGroup::position, StateGroup::velocity,
                                                        StateGroup::attitude, StateGroup::rates};
std::string_view to_string(StateGroup g);

/// Mean over windows of the step-h error of one group: Euclidean norm for
/// position, velocity and rates; geodesic distance between the rotations
/// built from the Euler angles for attitude.
double mee(std::span<const Vec<double, 3>> truth, std::span<const Vec<double, 3>> pred, StateGroup g);

/// mee[group][h-1] for h = 1..H, physical units.
struct MeeTable {
    std::size_t horizon = 0;
    std::map<StateGroup, std::vector<double>> values;
    double at(StateGroup g, std::size_t h) const { return values.at(g).at(h - 1); }
    double cumulative(StateGroup g) const;
};
double cumulative_mee(std::span<const double> per_horizon);

/// Number of scored H-step windows in a T-sample trajectory: floor((T-1)/H).
std::size_t window_count(std::size_t length, std::size_t horizon);

/// Windowed open-loop predictions: result[h-1] holds one row per window
/// (normalized units). Window j starts from the true sample at row j*H.
std::vector<Matrix> windowed_rollout(const SequenceModel& model, const Trajectory& normalized, std::size_t horizon);

/// Mean |x~ - x^| over windows, steps and output channels; `traj` is in
/// physical units and is normalized with `stats`.
double windowed_rollout_mae(const SequenceModel& model, const Trajectory& traj, std::size_t horizon,
                            const NormalizationStats& stats);
/// Same for the physical-unit average of `models` (each normalizing with its
/// own io statistics), scored in the units given by `stats`.
double windowed_rollout_mae(std::span<const SequenceModel* const> models, const Trajectory& traj, std::size_t horizon,
                            const NormalizationStats& stats);

/// MEE table in physical units for a 12-state drone trajectory.
MeeTable mee_table(const SequenceModel& model, const Trajectory& traj, std::size_t horizon,
                   const NormalizationStats& stats);
/// Same, with predictions averaged in physical units over `models`, each
/// normalizing with the statistics of its own io signature.
MeeTable mee_table(std::span<const SequenceModel* const> models, const Trajectory& traj, std::size_t horizon);

/// Open-loop prediction of rows [body_begin, body_end) from the window rows
/// in normalized units; returns one output row per body sample.
Matrix open_loop(const SequenceModel& model, const Trajectory& normalized, const Segment& seg);

/// Tank test metric: 1024-sample test run initialized from samples 1..5 and
/// scored in physical units over k = k0..K.
double tank_test_rmse(const SequenceModel& model, const Trajectory& test, const NormalizationStats& stats,
                      std::size_t k0 = 51);
/// Same, averaging the physical-unit predictions of `models` (each with its
/// own io statistics).
double tank_test_rmse(std::span<const SequenceModel* const> models, const Trajectory& test, std::size_t k0 = 51);

// ---------------------------------------------------------------------------
// Cross-validation

struct MetricReport {
    std::string metric;
    std::vector<double> per_fold;
    double aggregate = 0.0;
    std::optional<MeeTable> mee;
    std::string protocol_hash;
    std::string to_json() const;
};

/// Scores each fold's model on its validation segments with the protocol
/// metric (normalized units with that fold's training statistics).
double score_fold(const SequenceModel& model, const EvalProtocol& protocol, std::size_t fold,
                  std::span<const Trajectory> data, const NormalizationStats& stats);

/// Statistics from a fold's training segments (window and body rows).
NormalizationStats fold_statistics(const EvalProtocol& protocol, std::size_t fold, std::span<const Trajectory> data);

/// The io signature models use under this protocol.
IoSignature protocol_io(const EvalProtocol& protocol, std::span<const Trajectory> data,
                        const NormalizationStats& stats);

/// Plan defaults per benchmark (tank: full-sequence rollouts; drone: 50-step
/// windows in batches of 16).
TrainPlan default_plan(Benchmark b);

struct FoldOutcome {
    std::unique_ptr<SequenceModel> model;
    NormalizationStats stats;
    TrainResult training;
};

struct CvResult {
    MetricReport report;
    TrialStatus status = TrialStatus::ok;
    std::optional<std::size_t> failed_fold;
    std::string failure;
    std::vector<FoldOutcome> folds;
};

/// Trains a fresh model per fold on that fold's training data and scores it
/// on the held-out data; V is the arithmetic mean over folds. `jobs` > 1
/// trains folds concurrently; results do not depend on it. `wall_budget`
/// caps each fold's training time.
CvResult cross_validation_score(const SysIdConfiguration& cfg, const EvalProtocol& protocol,
                                std::span<const Trajectory> data, std::size_t jobs = 1,
                                std::optional<double> wall_budget = std::nullopt);

/// Scores the constant-hold predictor under the protocol.
MetricReport naive_predictor_score(std::span<const Trajectory> data, const EvalProtocol& protocol);

/// Comparison CSV: one row per model, columns p/v/R/omega at h=10, h=50
/// and the cumulative sum. Missing cells are left empty.
struct MeeRow {
    std::string model;
    std::map<std::string, double> cells;
};
MeeRow mee_row(const std::string& name, const MeeTable& table);
std::string mee_table_csv(const std::vector<MeeRow>& rows);
/// Published reference row for the naive predictor (MEE_p at h=50 only).
MeeRow published_naive_reference();

}  // namespace sysid
