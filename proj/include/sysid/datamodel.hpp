#pragma once

// Core value types shared by every module: dense row-major matrices,
// trajectories, search configurations, trial records and channel
// normalization. All types are immutable values once constructed.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace sysid {

/// Raised when a configuration or data file fails validation. `field()` names
/// the offending entry using dotted paths such as `train.learning_rate`.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Raised when a computation produces non-finite values. `index()` is the
/// step, sample or coordinate at which the failure was detected.
class NumericFailure : public std::runtime_error {
public:
    NumericFailure(const std::string& message, std::size_t index)
        : std::runtime_error(message + " (index " + std::to_string(index) + ")"), index_(index) {}
    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    const std::vector<double>& data() const noexcept { return data_; }
    std::vector<double>& data() noexcept { return data_; }

    /// Rows [begin, end).
    Matrix slice_rows(std::size_t begin, std::size_t end) const;
    /// Columns [begin, end).
    Matrix slice_cols(std::size_t begin, std::size_t end) const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Uniformly sampled multichannel input/output record. Row k of `inputs()`
/// and `outputs()` hold u_k and y_k (0-based internally).
class Trajectory {
public:
    Trajectory(double sample_period, Matrix inputs, Matrix outputs, std::vector<std::string> input_names,
               std::vector<std::string> output_names);

    double sample_period() const noexcept { return sample_period_; }
    std::size_t length() const noexcept { return inputs_.rows(); }
    std::size_t num_inputs() const noexcept { return inputs_.cols(); }
    std::size_t num_outputs() const noexcept { return outputs_.cols(); }
    const Matrix& inputs() const noexcept { return inputs_; }
    const Matrix& outputs() const noexcept { return outputs_; }
    const std::vector<std::string>& input_names() const noexcept { return input_names_; }
    const std::vector<std::string>& output_names() const noexcept { return output_names_; }

    /// Samples [begin, end), 0-based.
    Trajectory slice(std::size_t begin, std::size_t end) const;

    bool operator==(const Trajectory&) const = default;

private:
    double sample_period_;
    Matrix inputs_;
    Matrix outputs_;
    std::vector<std::string> input_names_;
    std::vector<std::string> output_names_;
};

/// Writes `t,<inputs>,<outputs>` with shortest round-trip number formatting,
/// so write/read is bit-exact.
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj);
std::string trajectory_csv(const Trajectory& traj);
/// The first `num_inputs` data columns after `t` are inputs, the rest outputs.
Trajectory read_trajectory_csv(const std::filesystem::path& path, std::size_t num_inputs);
Trajectory parse_trajectory_csv(std::string_view text, std::size_t num_inputs);

// ---------------------------------------------------------------------------
// Configurations

enum class ModelClass { vanilla_rnn, lstm, gru, cfc, greybox_tank, physics_residual, kinematics_lstm, ensemble };

std::string_view to_string(ModelClass c);
std::optional<ModelClass> model_class_from_string(std::string_view name);
const std::vector<ModelClass>& all_model_classes();

using ParamValue = std::variant<bool, std::int64_t, double, std::string>;
using ParamMap = std::map<std::string, ParamValue>;

/// One point of the search space: model class, architecture and training
/// hyperparameters, and the seed that drives initialization.
struct SysIdConfiguration {
    ModelClass model_class = ModelClass::vanilla_rnn;
    ParamMap arch;
    ParamMap train;
    std::uint64_t seed = 0;

    bool operator==(const SysIdConfiguration&) const = default;

    std::int64_t arch_int(const std::string& key, std::int64_t fallback) const;
    double arch_real(const std::string& key, double fallback) const;
    bool arch_flag(const std::string& key, bool fallback) const;
    std::int64_t train_int(const std::string& key, std::int64_t fallback) const;
    double train_real(const std::string& key, double fallback) const;
    std::string train_text(const std::string& key, const std::string& fallback) const;
};

/// Throws ConfigError naming the first invalid field.
void validate_config(const SysIdConfiguration& cfg);

/// Canonical sorted-key JSON; equal configurations give identical bytes.
std::string serialize_config(const SysIdConfiguration& cfg);
SysIdConfiguration parse_config(std::string_view text);

// ---------------------------------------------------------------------------
// Trial records and the ledger

enum class TrialStatus { ok, train_timeout, proposal_error, numeric_failure };
std::string_view to_string(TrialStatus s);
std::optional<TrialStatus> trial_status_from_string(std::string_view name);

struct TrialRecord {
    std::int64_t iteration = 0;
    SysIdConfiguration configuration;
    std::vector<double> per_fold_metrics;
    double aggregate_metric = 0.0;
    double wall_seconds = 0.0;
    std::string rationale;
    TrialStatus status = TrialStatus::ok;
    std::string protocol_hash;
    std::int64_t proposal_retries = 0;

    bool operator==(const TrialRecord&) const = default;
};

double arithmetic_mean(std::span<const double> values);

/// Checks the record-level invariants (aggregate equals the fold mean for ok
/// records, finite metrics). Throws ConfigError.
void validate_record(const TrialRecord& rec);

std::string serialize_record(const TrialRecord& rec);
TrialRecord parse_record(std::string_view line);

/// Append-only JSON-lines ledger. Construction verifies the file can be opened
/// for appending; iterations must be strictly increasing.
class LedgerWriter {
public:
    explicit LedgerWriter(std::filesystem::path path);
    void append(const TrialRecord& rec);
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    std::optional<std::int64_t> last_iteration_;
};

std::vector<TrialRecord> read_ledger(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kMinScale = 1e-6;

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> scale;
    bool operator==(const ChannelStats&) const = default;
};

struct NormalizationStats {
    ChannelStats outputs;
    std::optional<ChannelStats> inputs;
    std::string source;
    bool operator==(const NormalizationStats&) const = default;
};

/// Population mean and standard deviation per column over all given
/// matrices; scales are floored at kMinScale.
ChannelStats compute_channel_stats(std::span<const Matrix* const> blocks);
NormalizationStats compute_normalization(std::span<const Trajectory> trajectories, bool include_inputs,
                                         std::string source);
/// Stats with zero mean and unit scale.
NormalizationStats identity_normalization(std::size_t num_inputs, std::size_t num_outputs);

Trajectory normalize(const Trajectory& traj, const NormalizationStats& stats);
Trajectory denormalize(const Trajectory& traj, const NormalizationStats& stats);
Matrix normalize_block(const Matrix& m, const ChannelStats& stats);
Matrix denormalize_block(const Matrix& m, const ChannelStats& stats);

// ---------------------------------------------------------------------------
// Misc helpers shared across modules

/// Lower-case hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

/// Shortest round-trip decimal representation of `v`.
std::string format_double(double v);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace sysid
