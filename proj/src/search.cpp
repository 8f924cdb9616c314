#include "sysid/search.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <json.hpp>
#include <limits>
#include <random>
#include <set>
#include <sstream>

namespace sysid {

using json = nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::mt19937_64 draw_stream(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), 0x52414E44u};
    return std::mt19937_64(seq);
}

json parse_json(std::string_view text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(what, std::string("malformed JSON: ") + e.what());
    }
}

// Validated training map, borrowed from the configuration parser.
ParamMap parse_train_map(const json& j) {
    return parse_config(json{{"model_class", "lstm"}, {"train", j}}.dump()).train;
}

std::string metric_text(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

}  // namespace

// ---------------------------------------------------------------------------
// Scripted

ScriptedProposer::ScriptedProposer(std::vector<ScriptedStep> plan) : plan_(std::move(plan)) {
    if (plan_.empty()) throw ConfigError("plan", "scripted plan is empty");
}

Proposal ScriptedProposer::propose(const ProposalRequest&) {
    Proposal p;
    if (next_ >= plan_.size()) {
        p.exhausted = true;
        return p;
    }
    p.config = plan_[next_].config;
    p.rationale = plan_[next_].rationale;
    ++next_;
    return p;
}

std::vector<ScriptedStep> parse_scripted_plan(std::string_view text) {
    const json j = parse_json(text, "plan");
    if (!j.is_array() || j.empty()) throw ConfigError("plan", "expected a non-empty JSON array");
    std::vector<ScriptedStep> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string where = "plan[" + std::to_string(i) + "]";
        if (!j[i].is_object() || !j[i].contains("config")) throw ConfigError(where, "expected {\"config\": ...}");
        ScriptedStep s;
        try {
            s.config = parse_config(j[i]["config"].dump());
        } catch (const ConfigError& e) {
            throw ConfigError(where + ".config" + (e.field().empty() ? "" : "." + e.field()), e.what());
        }
        if (j[i].contains("rationale")) {
            if (!j[i]["rationale"].is_string()) throw ConfigError(where + ".rationale", "expected a string");
            s.rationale = j[i]["rationale"].get<std::string>();
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Random

void RandomSearchSpace::validate() const {
    if (model_classes.empty()) throw ConfigError("space.model_classes", "must not be empty");
    for (ModelClass c : model_classes)
        if (c == ModelClass::ensemble) throw ConfigError("space.model_classes", "ensembles cannot be sampled");
    if (hidden_size.low < 1 || hidden_size.high < hidden_size.low)
        throw ConfigError("space.hidden_size", "need 1 <= low <= high");
    if (num_layers.low < 1 || num_layers.high < num_layers.low)
        throw ConfigError("space.num_layers", "need 1 <= low <= high");
    if (!(learning_rate.low > 0.0) || learning_rate.high < learning_rate.low || !std::isfinite(learning_rate.high))
        throw ConfigError("space.learning_rate", "need 0 < low <= high");
    if (!(dropout.low >= 0.0) || dropout.high < dropout.low || !(dropout.high < 1.0))
        throw ConfigError("space.dropout", "need 0 <= low <= high < 1");
    const bool wd_zero = weight_decay.low == 0.0 && weight_decay.high == 0.0;
    if (!wd_zero && (!(weight_decay.low > 0.0) || weight_decay.high < weight_decay.low ||
                     !std::isfinite(weight_decay.high)))
        throw ConfigError("space.weight_decay", "need 0 < low <= high (or both 0)");
}

RandomSearchSpace parse_search_space(std::string_view text) {
    const json j = parse_json(text, "space");
    if (!j.is_object()) throw ConfigError("space", "expected a JSON object");
    RandomSearchSpace s;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const json& v = it.value();
        const std::string field = "space." + k;
        try {
            if (k == "model_classes") {
                s.model_classes.clear();
                for (const auto& c : v) {
                    const auto cls = model_class_from_string(c.get<std::string>());
                    if (!cls) throw ConfigError(field, "unknown model class '" + c.get<std::string>() + "'");
                    s.model_classes.push_back(*cls);
                }
            } else if (k == "hidden_size" || k == "num_layers") {
                if (!v.is_array() || v.size() != 2) throw ConfigError(field, "expected [low, high]");
                Range<std::int64_t> r{v[0].get<std::int64_t>(), v[1].get<std::int64_t>()};
                (k == "hidden_size" ? s.hidden_size : s.num_layers) = r;
            } else if (k == "learning_rate" || k == "dropout" || k == "weight_decay") {
                if (!v.is_array() || v.size() != 2) throw ConfigError(field, "expected [low, high]");
                Range<double> r{v[0].get<double>(), v[1].get<double>()};
                (k == "learning_rate" ? s.learning_rate : k == "dropout" ? s.dropout : s.weight_decay) = r;
            } else if (k == "seed") {
                s.seed = v.get<std::uint64_t>();
            } else if (k == "train") {
                s.train_base = parse_train_map(v);
            } else {
                throw ConfigError(field, "unknown field");
            }
        } catch (const json::exception& e) {
            throw ConfigError(field, e.what());
        }
    }
    s.validate();
    return s;
}

SysIdConfiguration sample_random_config(const RandomSearchSpace& space, std::uint64_t draw_index) {
    space.validate();
    std::mt19937_64 rng = draw_stream(space.seed, draw_index);
    const auto integer = [&](Range<std::int64_t> r) { return std::uniform_int_distribution<std::int64_t>(r.low, r.high)(rng); };
    const auto uniform = [&](Range<double> r) {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        return r.low == r.high ? r.low : r.low + (r.high - r.low) * u;
    };
    const auto log_uniform = [&](Range<double> r) {
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        if (r.low == r.high) return r.low;
        return std::exp(std::log(r.low) + (std::log(r.high) - std::log(r.low)) * u);
    };

    SysIdConfiguration cfg;
    cfg.model_class = space.model_classes[std::uniform_int_distribution<std::size_t>(0, space.model_classes.size() - 1)(rng)];
    cfg.arch["hidden_size"] = integer(space.hidden_size);
    cfg.arch["num_layers"] = integer(space.num_layers);
    cfg.train = space.train_base;
    cfg.train["learning_rate"] = log_uniform(space.learning_rate);
    cfg.train["dropout"] = uniform(space.dropout);
    cfg.train["weight_decay"] = log_uniform(space.weight_decay);
    cfg.seed = rng() >> 11;
    validate_config(cfg);
    return cfg;
}

RandomProposer::RandomProposer(RandomSearchSpace space) : space_(std::move(space)) { space_.validate(); }

Proposal RandomProposer::propose(const ProposalRequest&) {
    Proposal p;
    const std::uint64_t index = draws_++;
    p.config = sample_random_config(space_, index);
    p.rationale = "random draw " + std::to_string(index);
    return p;
}

// ---------------------------------------------------------------------------
// LLM

namespace {

const char* const kDefaultTemplate = R"(Problem:
{{problem}}

Trials so far (iteration | model_class | CV metric | status | configuration | rationale):
{{history}}

Best configuration so far:
{{best}}

This is iteration {{iteration}} of {{budget}}. Reply with exactly one JSON object. It is applied as a JSON merge patch to the best configuration, so give only the fields you want to change (model_class, arch, train, seed). You may add a "rationale" string explaining the hypothesis you are testing.)";

const char* const kDefaultProblem =
    "Identify a discrete-time model of a sampled dynamical system from input/output data. Candidates are scored by "
    "the mean cross-validation error over the protocol folds (lower is better). Model classes: vanilla_rnn, lstm, "
    "gru, cfc, greybox_tank, physics_residual, kinematics_lstm. arch fields: hidden_size, num_layers, learn_gains, "
    "augment_inputs, overflow_coupling, level_max, k1..k4. train fields: loss (mse|mae), learning_rate, "
    "chunk_length, epochs, batch_size, weight_decay, dropout, teacher_forcing_p0, eval_cadence, patience, "
    "wall_budget_seconds.";

void replace_all(std::string& s, const std::string& from, const std::string& to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
        s.replace(pos, from.size(), to);
}

const TrialRecord* best_record(std::span<const TrialRecord> ledger) {
    const TrialRecord* best = nullptr;
    for (const TrialRecord& r : ledger)
        if (r.status == TrialStatus::ok && (!best || r.aggregate_metric < best->aggregate_metric)) best = &r;
    return best;
}

struct Endpoint {
    std::string origin;
    std::string path;
};

Endpoint split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw ConfigError("llm.base_url", "expected scheme://host[:port][/path]");
    const auto slash = url.find('/', scheme + 3);
    Endpoint e{url.substr(0, slash), slash == std::string::npos ? std::string() : url.substr(slash)};
    while (!e.path.empty() && e.path.back() == '/') e.path.pop_back();
    e.path += "/chat/completions";
    return e;
}

}  // namespace

void LlmProposerConfig::validate() const {
    if (max_retries < 0) throw ConfigError("llm.max_retries", "must be non-negative");
    if (!(timeout_seconds > 0.0)) throw ConfigError("llm.timeout_seconds", "must be positive");
    split_url(base_url);
    validate_config(base);
}

LlmProposerConfig parse_llm_config(std::string_view text) {
    const json j = parse_json(text, "llm");
    if (!j.is_object()) throw ConfigError("llm", "expected a JSON object");
    LlmProposerConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        const json& v = it.value();
        try {
            if (k == "base_url") c.base_url = v.get<std::string>();
            else if (k == "model") c.model = v.get<std::string>();
            else if (k == "api_key_env") c.api_key_env = v.get<std::string>();
            else if (k == "prompt_template_path") c.prompt_template_path = v.get<std::string>();
            else if (k == "problem_path") c.problem_path = v.get<std::string>();
            else if (k == "max_retries") c.max_retries = v.get<int>();
            else if (k == "timeout_seconds") c.timeout_seconds = v.get<double>();
            else if (k == "base") c.base = parse_config(v.dump());
            else throw ConfigError("llm." + k, "unknown field");
        } catch (const json::exception& e) {
            throw ConfigError("llm." + k, e.what());
        }
    }
    c.validate();
    return c;
}

std::optional<std::string> extract_first_json_object(std::string_view text) {
    const auto open = text.find('{');
    if (open == std::string_view::npos) return std::nullopt;
    int depth = 0;
    bool in_string = false, escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped) escaped = false;
            else if (c == '\\') escaped = true;
            else if (c == '"') in_string = false;
        } else if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}' && --depth == 0) {
            return std::string(text.substr(open, i - open + 1));
        }
    }
    return std::nullopt;
}

std::pair<SysIdConfiguration, std::string> apply_config_patch(const SysIdConfiguration& base, std::string_view reply) {
    const auto obj = extract_first_json_object(reply);
    if (!obj) throw ConfigError("reply", "no JSON object found");
    json patch = parse_json(*obj, "reply");
    std::string rationale;
    if (patch.contains("rationale")) {
        if (!patch["rationale"].is_string()) throw ConfigError("rationale", "expected a string");
        rationale = patch["rationale"].get<std::string>();
        patch.erase("rationale");
    }
    json doc = json::parse(serialize_config(base));
    if (patch.contains("model_class") && patch["model_class"] != doc["model_class"]) doc.erase("arch");
    doc.merge_patch(patch);
    return {parse_config(doc.dump()), rationale};
}

LlmProposer::LlmProposer(LlmProposerConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    template_ = cfg_.prompt_template_path.empty() ? kDefaultTemplate : read_text_file(cfg_.prompt_template_path);
    problem_ = cfg_.problem_path.empty() ? kDefaultProblem : read_text_file(cfg_.problem_path);
}

std::string LlmProposer::render_prompt(const ProposalRequest& req) const {
    std::ostringstream history;
    for (const TrialRecord& r : req.history)
        history << r.iteration << " | " << to_string(r.configuration.model_class) << " | "
                << (std::isfinite(r.aggregate_metric) ? format_double(r.aggregate_metric) : "-") << " | "
                << to_string(r.status) << " | " << serialize_config(r.configuration) << " | " << r.rationale << '\n';
    if (req.history.empty()) history << "(none)\n";
    const TrialRecord* best = best_record(req.history);
    std::string out = template_;
    replace_all(out, "{{problem}}", problem_);
    replace_all(out, "{{history}}", history.str());
    replace_all(out, "{{best}}", serialize_config(best ? best->configuration : cfg_.base));
    replace_all(out, "{{iteration}}", std::to_string(req.iteration));
    replace_all(out, "{{budget}}", std::to_string(req.budget));
    if (!req.feedback.empty()) out += "\n\nYour previous proposal was rejected: " + req.feedback;
    return out;
}

Proposal LlmProposer::propose(const ProposalRequest& req) {
    const TrialRecord* best = best_record(req.history);
    const SysIdConfiguration& base = best ? best->configuration : cfg_.base;
    const Endpoint ep = split_url(cfg_.base_url);

    httplib::Client client(ep.origin);
    const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    const auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!cfg_.api_key_env.empty())
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
            headers.emplace("Authorization", std::string("Bearer ") + key);

    json messages = json::array(
        {{{"role", "system"}, {"content", "You propose configurations for a system-identification search."}},
         {{"role", "user"}, {"content", render_prompt(req)}}});

    Proposal p;
    std::string last_reply;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
        const json body{{"model", cfg_.model}, {"messages", messages}};
        const auto res = client.Post(ep.path, headers, body.dump(), "application/json");
        if (!res) {
            p.error = "request to " + cfg_.base_url + " failed: " + httplib::to_string(res.error());
            p.rationale = last_reply;
            p.retries = attempt;
            return p;
        }
        if (res->status < 200 || res->status >= 300) {
            p.error = "endpoint returned HTTP " + std::to_string(res->status);
            p.rationale = res->body;
            p.retries = attempt;
            return p;
        }
        std::string content;
        std::string problem;
        try {
            content = json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            content = res->body;
            problem = std::string("reply is not a chat completion: ") + e.what();
        }
        last_reply = content;
        if (problem.empty()) {
            try {
                auto [cfg, rationale] = apply_config_patch(base, content);
                p.config = std::move(cfg);
                p.rationale = rationale.empty() ? content : rationale;
                p.retries = attempt;
                return p;
            } catch (const ConfigError& e) {
                problem = e.what();
            }
        }
        messages.push_back({{"role", "assistant"}, {"content", content}});
        messages.push_back({{"role", "user"},
                            {"content", "Your reply could not be used (" + problem +
                                            "). Reply again with exactly one JSON object patching the configuration."}});
    }
    p.error = "no usable configuration after " + std::to_string(cfg_.max_retries) + " retries";
    p.rationale = last_reply;
    p.retries = cfg_.max_retries;
    return p;
}

// ---------------------------------------------------------------------------
// Search loop

void SearchBudget::validate() const {
    if (max_iterations < 1) throw ConfigError("budget.max_iterations", "must be at least 1");
    if (exploration_phase_length > max_iterations)
        throw ConfigError("budget.exploration_phase_length", "must not exceed max_iterations");
    if (trial_wall_seconds && !(*trial_wall_seconds > 0.0))
        throw ConfigError("budget.trial_wall_seconds", "must be positive");
    if (saturation_window && *saturation_window < 1) throw ConfigError("budget.saturation_window", "must be at least 1");
}

SearchResult run_search(Proposer& proposer, const EvalProtocol& protocol, std::span<const Trajectory> data,
                        const SearchBudget& budget, const std::filesystem::path& ledger_path,
                        const SearchOptions& options) {
    budget.validate();
    LedgerWriter writer(ledger_path);
    SearchResult res;
    std::optional<double> incumbent;
    std::size_t flat = 0;

    using clock = std::chrono::steady_clock;
    for (std::size_t it = 0; it < budget.max_iterations; ++it) {
        const auto t0 = clock::now();
        std::size_t ok_count = 0;
        std::set<ModelClass> tried;
        for (const TrialRecord& r : res.ledger) {
            if (r.status == TrialStatus::ok) ++ok_count;
            if (r.status != TrialStatus::proposal_error) tried.insert(r.configuration.model_class);
        }
        const bool exploring = ok_count < budget.exploration_phase_length;

        Proposal p;
        std::int64_t retries = 0;
        std::string feedback;
        for (std::size_t rejected = 0;; ++rejected) {
            p = proposer.propose(ProposalRequest{res.ledger, it, budget.max_iterations, feedback});
            retries += p.retries;
            if (p.exhausted || !p.config) break;
            try {
                validate_config(*p.config);
            } catch (const ConfigError& e) {
                p.error = std::string("invalid configuration: ") + e.what();
                break;
            }
            if (!exploring || !tried.count(p.config->model_class)) break;
            feedback = "model class " + std::string(to_string(p.config->model_class)) +
                       " was already tried; the exploration phase needs a different class";
            if (rejected == budget.max_retries) {
                p.error = feedback;
                break;
            }
            ++retries;
        }
        if (p.exhausted) break;

        TrialRecord rec;
        rec.iteration = static_cast<std::int64_t>(it);
        rec.protocol_hash = protocol.hash();
        rec.proposal_retries = retries;
        rec.aggregate_metric = kNaN;
        if (p.config) rec.configuration = *p.config;
        CvResult cv;
        if (!p.error.empty()) {
            rec.status = TrialStatus::proposal_error;
            rec.rationale = p.rationale.empty() ? p.error : p.error + "\n" + p.rationale;
        } else {
            rec.rationale = p.rationale;
            try {
                cv = cross_validation_score(rec.configuration, protocol, data, options.jobs, budget.trial_wall_seconds);
                rec.per_fold_metrics = cv.report.per_fold;
                rec.status = cv.status;
                if (cv.status == TrialStatus::numeric_failure) {
                    rec.rationale += (rec.rationale.empty() ? "" : "\n") + cv.failure;
                } else {
                    rec.aggregate_metric = cv.report.aggregate;
                }
            } catch (const NumericFailure& e) {
                rec.status = TrialStatus::numeric_failure;
                rec.rationale += (rec.rationale.empty() ? "" : "\n") + std::string(e.what());
            } catch (const std::exception& e) {
                rec.status = TrialStatus::proposal_error;
                rec.rationale += (rec.rationale.empty() ? "" : "\n") + std::string("rejected: ") + e.what();
            }
        }
        rec.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
        writer.append(rec);
        res.ledger.push_back(rec);
        if (options.on_trial) options.on_trial(rec);

        const bool improved =
            rec.status == TrialStatus::ok && (!incumbent || rec.aggregate_metric < *incumbent);
        if (improved) {
            incumbent = rec.aggregate_metric;
            res.fold_models.clear();
            auto& models = res.fold_models[rec.iteration];
            for (FoldOutcome& f : cv.folds) models.push_back(std::move(f.model));
            flat = 0;
        } else if (incumbent) {
            ++flat;
        }
        if (budget.saturation_window && incumbent && flat >= *budget.saturation_window) break;
    }
    return res;
}

std::vector<CurvePoint> best_so_far(std::span<const TrialRecord> ledger) {
    std::vector<CurvePoint> out;
    std::optional<double> best;
    for (const TrialRecord& r : ledger) {
        if (r.status == TrialStatus::ok && (!best || r.aggregate_metric < *best)) best = r.aggregate_metric;
        if (best) out.push_back({r.iteration, *best});
    }
    return out;
}

std::string search_report_csv(std::span<const TrialRecord> ledger) {
    std::ostringstream os;
    os << "iteration,metric,best_so_far,model_class,status\n";
    std::optional<double> best;
    for (const TrialRecord& r : ledger) {
        if (r.status == TrialStatus::ok && (!best || r.aggregate_metric < *best)) best = r.aggregate_metric;
        os << r.iteration << ',' << metric_text(r.aggregate_metric) << ',' << (best ? format_double(*best) : "")
           << ',' << to_string(r.configuration.model_class) << ',' << to_string(r.status) << '\n';
    }
    return os.str();
}

std::vector<const SequenceModel*> FinalModel::member_pointers() const {
    std::vector<const SequenceModel*> out;
    for (const auto& m : members) out.push_back(m.get());
    return out;
}

FinalModel select_final(std::span<const TrialRecord> ledger,
                        std::map<std::int64_t, std::vector<std::unique_ptr<SequenceModel>>>& fold_models) {
    const TrialRecord* best = best_record(ledger);
    if (!best) throw std::invalid_argument("no trial finished ok; there is no final model");
    const auto it = fold_models.find(best->iteration);
    if (it == fold_models.end() || it->second.empty() ||
        std::any_of(it->second.begin(), it->second.end(), [](const auto& m) { return !m; }))
        throw std::invalid_argument("fold models of trial " + std::to_string(best->iteration) + " are missing");
    FinalModel f;
    f.iteration = best->iteration;
    f.config = best->configuration;
    f.cv_metric = best->aggregate_metric;
    f.members = std::move(it->second);
    fold_models.erase(it);
    f.summary = "trial " + std::to_string(f.iteration) + ": " + std::string(to_string(f.config.model_class)) +
                ", V = " + format_double(f.cv_metric) + ", " + std::to_string(f.members.size()) +
                "-member ensemble\n" + serialize_config(f.config);
    return f;
}

}  // namespace sysid
