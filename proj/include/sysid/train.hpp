#pragma once

// Optimizer, truncated BPTT, scheduled sampling and the early-stopping
// training loop.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sysid/autodiff.hpp"
#include "sysid/datamodel.hpp"
#include "sysid/models.hpp"

namespace sysid {

enum class LossKind { mse, mae };

struct TrainPlan {
    LossKind loss = LossKind::mse;
    double learning_rate = 1e-3;
    std::size_t epochs = 50;
    /// Rollout length per gradient step. Sequences longer than this are cut
    /// into chunks with the forward state carried across.
    std::size_t chunk_length = 100000;
    /// Windows per gradient step (windowed training only).
    std::size_t batch_size = 16;
    double weight_decay = 0.0;
    double dropout = 0.0;
    double teacher_forcing_p0 = 0.0;
    std::size_t eval_cadence = 1;
    std::size_t patience = 10;
    double wall_budget_seconds = 600.0;

    /// Throws ConfigError with `train.`-prefixed field names.
    void validate() const;
};

/// Reads the `train` map of `cfg`, falling back to `defaults` per field.
TrainPlan plan_from_config(const SysIdConfiguration& cfg, const TrainPlan& defaults = {});

struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step = 0;
    ad::ParameterMap first_moment;
    ad::ParameterMap second_moment;
};

/// One Adam step with decoupled weight decay:
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
/// Throws NumericFailure naming the parameter on a non-finite gradient and
/// std::invalid_argument on shape mismatches.
void optimizer_step(ad::ParameterMap& params, const ad::Gradients& grads, OptimizerState& state,
                    double learning_rate, double weight_decay);

/// Contiguous chunk [begin, end) of a sequence. `carry_state` is false only
/// for the first chunk, whose state comes from the init window.
struct Chunk {
    std::size_t begin = 0;
    std::size_t end = 0;
    bool carry_state = false;
    bool operator==(const Chunk&) const = default;
};

/// Splits `length` steps into chunks of `chunk_length`; the last may be short.
std::vector<Chunk> tbptt_chunks(std::size_t length, std::size_t chunk_length);
/// Chunks of the prediction steps of `traj` after a `window_length` init window.
std::vector<Chunk> tbptt_chunks(const Trajectory& traj, std::size_t window_length, std::size_t chunk_length);

/// p0 * (1 - epoch / total_epochs); p0 when total_epochs is 0.
double teacher_forcing_prob(std::size_t epoch, std::size_t total_epochs, double p0);

/// Copies a state onto another tape as constants, cutting the gradient path.
ModelState detach(const ModelState& state, ad::Tape& tape);

/// Flattened init window ([1, window_width]) from rows [begin, begin + L).
Matrix init_window(const Trajectory& traj, std::size_t begin, std::size_t window_length);

/// Training data in normalized units.
///
/// Sequential: each sequence starts with its init window and is rolled out
/// to the end in TBPTT chunks. Windowed: chunk_length-step windows are drawn
/// from every sequence, each initialized from the true samples preceding it,
/// and batched batch_size at a time.
struct TrainingSet {
    std::vector<Trajectory> sequences;
    bool windowed = false;
};

enum class StopReason { converged, patience, budget };
std::string_view to_string(StopReason r);

struct CurveRow {
    std::size_t epoch = 0;
    /// NaN for the initial evaluation row.
    double train_loss = 0.0;
    /// NaN when the epoch was not evaluated.
    double val_metric = 0.0;
    double wall_seconds = 0.0;
};

std::string learning_curve_csv(const std::vector<CurveRow>& curve);

struct TrainResult {
    std::unique_ptr<SequenceModel> model;
    std::vector<CurveRow> curve;
    StopReason stop = StopReason::converged;
    TrialStatus status = TrialStatus::ok;
    double best_metric = 0.0;
    std::size_t epochs_run = 0;
    double wall_seconds = 0.0;
    std::string failure;
};

/// Scores a candidate snapshot on held-out data (lower is better).
using Validator = std::function<double(const SequenceModel&)>;

/// Per-element loss averaged over all steps, rows and channels.
ad::Var sequence_loss(LossKind loss, std::span<const ad::Var> predictions, std::span<const ad::Var> targets);

/// Early-stopping training loop. The model is evaluated before the first
/// epoch and every eval_cadence epochs after it; the returned model is the
/// best evaluated snapshot. Randomness (window order, teacher forcing,
/// dropout) derives from `seed` in streams independent of initialization.
TrainResult train(const SequenceModel& model, const TrainingSet& data, const TrainPlan& plan,
                  const Validator& validator, std::uint64_t seed);

}  // namespace sysid
