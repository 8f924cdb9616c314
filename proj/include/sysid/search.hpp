#pragma once

// Configuration search: proposers, the propose/score/record loop, progress
// curves and final model selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sysid/datamodel.hpp"
#include "sysid/evaluate.hpp"
#include "sysid/models.hpp"

namespace sysid {

/// What a proposer may see: the ledger so far and its position in the budget.
struct ProposalRequest {
    std::span<const TrialRecord> history;
    std::size_t iteration = 0;
    std::size_t budget = 0;
    /// Why the previous proposal for this iteration was rejected, if it was.
    std::string feedback;
};

struct Proposal {
    std::optional<SysIdConfiguration> config;
    std::string rationale;
    std::int64_t retries = 0;
    /// Set when no configuration could be produced; the trial is recorded as
    /// proposal_error.
    std::string error;
    /// The proposer has nothing left to propose; the search ends.
    bool exhausted = false;
};

class Proposer {
public:
    virtual ~Proposer() = default;
    virtual std::string_view kind() const = 0;
    virtual Proposal propose(const ProposalRequest& request) = 0;
};

// ---------------------------------------------------------------------------

struct ScriptedStep {
    SysIdConfiguration config;
    std::string rationale;
};

/// Replays a fixed list of configurations in order.
class ScriptedProposer : public Proposer {
public:
    explicit ScriptedProposer(std::vector<ScriptedStep> plan);
    std::string_view kind() const override { return "scripted"; }
    Proposal propose(const ProposalRequest& request) override;

private:
    std::vector<ScriptedStep> plan_;
    std::size_t next_ = 0;
};

/// Plan file: a JSON array of {"config": {...}, "rationale": "..."}.
std::vector<ScriptedStep> parse_scripted_plan(std::string_view text);

template <typename T>
struct Range {
    T low;
    T high;
};

struct RandomSearchSpace {
    std::vector<ModelClass> model_classes{ModelClass::lstm, ModelClass::physics_residual};
    Range<std::int64_t> hidden_size{8, 128};
    Range<std::int64_t> num_layers{1, 3};
    Range<double> learning_rate{1e-4, 1e-2};
    Range<double> dropout{0.0, 0.3};
    Range<double> weight_decay{1e-6, 1e-2};
    std::uint64_t seed = 0;
    /// Training fields copied into every draw (epochs, chunk length, ...).
    ParamMap train_base;

    /// Throws ConfigError on empty or inverted ranges.
    void validate() const;
};

RandomSearchSpace parse_search_space(std::string_view text);

/// Independent draws per dimension: uniform class, uniform integers for
/// sizes, log-uniform learning rate and weight decay, uniform dropout.
/// Deterministic in (space.seed, draw_index).
SysIdConfiguration sample_random_config(const RandomSearchSpace& space, std::uint64_t draw_index);

class RandomProposer : public Proposer {
public:
    explicit RandomProposer(RandomSearchSpace space);
    std::string_view kind() const override { return "random"; }
    Proposal propose(const ProposalRequest& request) override;

private:
    RandomSearchSpace space_;
    std::uint64_t draws_ = 0;
};

struct LlmProposerConfig {
    std::string base_url = "http://127.0.0.1:8000/v1";
    std::string model = "default";
    /// Environment variable holding the bearer token; empty for none.
    std::string api_key_env = "SYSID_LLM_API_KEY";
    /// Template with {{problem}}, {{history}}, {{best}}, {{iteration}} and
    /// {{budget}} placeholders; the built-in template is used when empty.
    std::string prompt_template_path;
    std::string problem_path;
    int max_retries = 2;
    double timeout_seconds = 60.0;
    /// Patched when the ledger has no ok trial yet.
    SysIdConfiguration base;

    void validate() const;
};

LlmProposerConfig parse_llm_config(std::string_view text);

/// Chat-completion client. The reply's first JSON object is a merge patch
/// over the best configuration so far; an optional "rationale" string in
/// that object is recorded with the trial.
class LlmProposer : public Proposer {
public:
    explicit LlmProposer(LlmProposerConfig cfg);
    std::string_view kind() const override { return "llm"; }
    Proposal propose(const ProposalRequest& request) override;

    std::string render_prompt(const ProposalRequest& request) const;

private:
    LlmProposerConfig cfg_;
    std::string template_;
    std::string problem_;
};

/// The first balanced {...} block of `text`, ignoring braces inside strings.
std::optional<std::string> extract_first_json_object(std::string_view text);

/// Applies `reply` (see LlmProposer) to `base`. Throws ConfigError.
std::pair<SysIdConfiguration, std::string> apply_config_patch(const SysIdConfiguration& base, std::string_view reply);

// ---------------------------------------------------------------------------

struct SearchBudget {
    std::size_t max_iterations = 15;
    /// While fewer than this many trials have finished ok, proposals must use
    /// a model class not yet tried.
    std::size_t exploration_phase_length = 5;
    std::optional<double> trial_wall_seconds;
    /// Rejections per iteration before the trial is recorded as proposal_error.
    std::size_t max_retries = 3;
    /// Stop once best_so_far has been flat this many iterations.
    std::optional<std::size_t> saturation_window;

    void validate() const;
};

struct SearchResult {
    std::vector<TrialRecord> ledger;
    /// Per-fold models of the best ok trial, keyed by iteration.
    std::map<std::int64_t, std::vector<std::unique_ptr<SequenceModel>>> fold_models;
};

struct SearchOptions {
    std::size_t jobs = 1;
    /// Called after every appended record.
    std::function<void(const TrialRecord&)> on_trial;
};

/// Propose, validate, cross-validate and append until the budget is spent.
/// Every iteration appends exactly one record; the ledger file is opened
/// before the first proposal.
SearchResult run_search(Proposer& proposer, const EvalProtocol& protocol, std::span<const Trajectory> data,
                        const SearchBudget& budget, const std::filesystem::path& ledger_path,
                        const SearchOptions& options = {});

struct CurvePoint {
    std::int64_t iteration = 0;
    double best = 0.0;
    bool operator==(const CurvePoint&) const = default;
};

/// Running minimum of ok trials; failed trials repeat the incumbent. Starts
/// at the first ok trial; empty when there is none.
std::vector<CurvePoint> best_so_far(std::span<const TrialRecord> ledger);

/// Columns: iteration, metric, best_so_far, model_class, status.
std::string search_report_csv(std::span<const TrialRecord> ledger);

struct FinalModel {
    std::int64_t iteration = 0;
    SysIdConfiguration config;
    double cv_metric = 0.0;
    /// One model per fold; each normalizes with its own io statistics.
    std::vector<std::unique_ptr<SequenceModel>> members;
    std::string summary;

    std::vector<const SequenceModel*> member_pointers() const;
};

/// Ensemble of the best ok trial's fold models. Throws std::invalid_argument
/// when no trial finished ok or that trial's fold models are missing.
FinalModel select_final(std::span<const TrialRecord> ledger,
                        std::map<std::int64_t, std::vector<std::unique_ptr<SequenceModel>>>& fold_models);

}  // namespace sysid
