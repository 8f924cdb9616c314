#pragma once

// The model zoo behind one sequence-model interface.
//
// Time convention shared by every model and the evaluation pipeline: an
// initial state is built from a window ending at sample k-1; consuming input
// u_{k-1} produces the prediction of y_k. Models work on normalized data; the
// physics-based members denormalize internally with the statistics carried
// in their IoSignature.

#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sysid/autodiff.hpp"
#include "sysid/datamodel.hpp"
#include "sysid/simulate.hpp"

namespace sysid {

struct IoSignature {
    std::size_t num_inputs = 1;
    std::size_t num_outputs = 1;
    /// Samples in the initialization window.
    std::size_t window_length = 5;
    /// Autoregressive models feed their previous output back as an input and
    /// are seeded with the true output at the end of the window.
    bool autoregressive = false;
    double sample_period = 1.0;
    NormalizationStats stats;

    std::size_t window_width() const { return window_length * (num_inputs + num_outputs); }
    bool operator==(const IoSignature&) const = default;
};

/// Recurrent state of a model on a tape. `output` is the current output
/// estimate [B, n_y]; `members` is used by ensembles.
struct ModelState {
    std::vector<ad::Var> memory;
    ad::Var output;
    std::vector<ModelState> members;
};

struct StepContext {
    ad::Tape& tape;
    const std::map<std::string, ad::Var>& params;
    std::string prefix;
    bool training = false;
    double dropout = 0.0;
    std::mt19937_64* rng = nullptr;

    ad::Var param(const std::string& name) const;
    StepContext with_prefix(const std::string& p) const;
};

class SequenceModel {
public:
    SequenceModel(SysIdConfiguration cfg, IoSignature io) : config_(std::move(cfg)), io_(std::move(io)) {}
    virtual ~SequenceModel() = default;

    ModelClass model_class() const { return config_.model_class; }
    const SysIdConfiguration& config() const { return config_; }
    const IoSignature& io() const { return io_; }
    const ad::ParameterMap& parameters() const { return params_; }
    ad::ParameterMap& parameters() { return params_; }
    std::size_t parameter_count() const;

    /// `window` is [B, window_width()]: samples oldest first, each laid out as
    /// (u, y) in normalized units.
    virtual ModelState init_state(const StepContext& ctx, ad::Var window) const = 0;
    /// Consumes one input row per batch entry ([B, n_u]) and returns the next
    /// state, whose output is the prediction for the following sample.
    virtual ModelState step(const StepContext& ctx, const ModelState& state, ad::Var input) const = 0;
    virtual std::unique_ptr<SequenceModel> clone() const = 0;

protected:
    SysIdConfiguration config_;
    IoSignature io_;
    ad::ParameterMap params_;
};

/// Registers every model parameter on `tape`.
std::map<std::string, ad::Var> bind_parameters(ad::Tape& tape, const ad::ParameterMap& params);

/// Deterministic in cfg.seed. Throws ConfigError for unknown classes,
/// ensembles (assembled from trained members instead) or io mismatches.
std::unique_ptr<SequenceModel> build_model(const SysIdConfiguration& cfg, const IoSignature& io);

/// Holds the last window output for the whole horizon.
std::unique_ptr<SequenceModel> make_naive_model(const IoSignature& io);

/// Unweighted mean of the members' outputs; all members must share the
/// io signature. The mean output is fed back to every member.
std::unique_ptr<SequenceModel> make_ensemble(std::vector<std::unique_ptr<SequenceModel>> members);

/// Reconstructs the ensemble members (for ensembles only).
std::vector<std::unique_ptr<SequenceModel>> ensemble_members(const SequenceModel& model);

/// Checks the window width and delegates to the model.
ModelState init_state(const SequenceModel& model, const StepContext& ctx, ad::Var window);

struct RolloutResult {
    std::vector<ad::Var> outputs;
    ModelState final_state;
};

/// Autoregressive chaining over `inputs.size()` steps. Before step i > 0 each
/// batch row's fed-back output is replaced by teacher[i-1] with probability
/// `forcing_prob`. With forcing_prob = 0 the teacher argument is never read.
/// Throws NumericFailure carrying the step index on non-finite values.
RolloutResult rollout(const SequenceModel& model, const StepContext& ctx, ModelState state,
                      std::span<const ad::Var> inputs, std::span<const ad::Var> teacher = {},
                      double forcing_prob = 0.0, std::mt19937_64* rng = nullptr);

/// Plain evaluation helper: windows are [B, window_width()], inputs one
/// [B, n_u] matrix per step. Returns one [B, n_y] matrix per step.
std::vector<Matrix> predict(const SequenceModel& model, const Matrix& windows, std::span<const Matrix> inputs);

/// [u1..u4] -> [u1..u4, u1^2..u4^2].
Matrix augment_inputs(const Matrix& u);
ad::Var augment_inputs(ad::Var u);

/// Nominal quadrotor rollout in normalized coordinates using exactly the
/// arithmetic of the physics-residual model with a zero residual.
std::vector<Matrix> nominal_physics_rollout(const DroneParams& params, const NormalizationStats& stats,
                                            double sample_period, const Matrix& x0_normalized,
                                            std::span<const Matrix> inputs_normalized);

// ---------------------------------------------------------------------------
// Checkpoints: JSON of named tensors with shapes plus config and io
// signature. Round trip is bit-exact.

std::string save_checkpoint(const SequenceModel& model);
std::unique_ptr<SequenceModel> load_checkpoint(std::string_view text);

}  // namespace sysid
