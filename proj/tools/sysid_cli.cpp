// sysid_cli: data generation, training, evaluation, search and reporting.
//
// Exit codes: 0 success, 1 numeric or search failure, 2 usage or
// configuration error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sysid/evaluate.hpp"
#include "sysid/search.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace sysid;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

Benchmark parse_benchmark(const std::string& name) {
    const auto b = benchmark_from_string(name);
    if (!b) throw UsageError("unknown benchmark '" + name + "' (expected tank or drone)");
    return *b;
}

void require_dir(const std::string& dir, const char* flag) {
    if (dir.empty()) throw UsageError(std::string(flag) + " is required");
    if (!fs::is_directory(dir)) throw UsageError(std::string(flag) + " directory does not exist: " + dir);
}

std::size_t num_inputs(Benchmark b) { return b == Benchmark::tank ? 1 : 4; }

std::vector<fs::path> training_files(Benchmark b, const fs::path& dir) {
    if (b == Benchmark::tank) return {dir / "train.csv"};
    return {dir / "train_1.csv", dir / "train_2.csv", dir / "train_3.csv"};
}

// Only the training files; the test file is never opened on the search path.
std::vector<Trajectory> load_training(Benchmark b, const fs::path& dir) {
    std::vector<Trajectory> out;
    for (const fs::path& p : training_files(b, dir)) {
        if (!fs::exists(p)) throw UsageError("missing data file " + p.string());
        out.push_back(read_trajectory_csv(p, num_inputs(b)));
    }
    return out;
}

Trajectory load_test(Benchmark b, const fs::path& dir) {
    const fs::path p = dir / "test.csv";
    if (!fs::exists(p)) throw UsageError("missing data file " + p.string());
    return read_trajectory_csv(p, num_inputs(b));
}

EvalProtocol make_protocol(Benchmark b, const std::vector<Trajectory>& train) {
    return b == Benchmark::tank ? EvalProtocol::tank(train.at(0)) : EvalProtocol::drone(train);
}

json parse_file(const std::string& path) {
    try {
        return json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path, std::string("malformed JSON: ") + e.what());
    }
}

SysIdConfiguration load_config(const std::string& path) {
    if (path.empty()) throw UsageError("--config is required");
    return parse_config(read_text_file(path));
}

struct Manifest {
    json doc;
    fs::path path;

    Manifest(const std::string& command, const std::vector<std::string>& argv, const fs::path& out) : path(out / "manifest.json") {
        doc["command"] = command;
        doc["arguments"] = argv;
        doc["tool_version"] = SYSID_VERSION;
    }
    void write() const { write_text_file(path, doc.dump(2) + "\n"); }
};

// ---------------------------------------------------------------------------

TankParams tank_params_from(const json& j) {
    TankParams p;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "k1") p.k1 = it->get<double>();
        else if (k == "k2") p.k2 = it->get<double>();
        else if (k == "k3") p.k3 = it->get<double>();
        else if (k == "k4") p.k4 = it->get<double>();
        else if (k == "level_max") p.level_max = it->get<double>();
        else if (k == "overflow_coupling") p.overflow_coupling = it->get<bool>();
        else throw ConfigError("params." + k, "unknown tank parameter");
    }
    p.validate();
    return p;
}

DroneParams drone_params_from(const json& j) {
    DroneParams p;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "mass") p.mass = it->get<double>();
        else if (k == "inertia") p.inertia = it->get<std::array<double, 3>>();
        else if (k == "gravity") p.gravity = it->get<double>();
        else if (k == "thrust_coefficient") p.thrust_coefficient = it->get<double>();
        else if (k == "arm_length") p.arm_length = it->get<double>();
        else if (k == "drag_to_thrust") p.drag_to_thrust = it->get<double>();
        else throw ConfigError("params." + k, "unknown drone parameter");
    }
    p.validate();
    return p;
}

ExcitationSpec excitation_from(const json& j, ExcitationSpec s) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "kind") {
            const auto kind = excitation_kind_from_string(it->get<std::string>());
            if (!kind) throw ConfigError("excitation.kind", "unknown excitation kind");
            s.kind = *kind;
        } else if (k == "amplitude_low") s.amplitude_low = it->get<double>();
        else if (k == "amplitude_high") s.amplitude_high = it->get<double>();
        else if (k == "hold_samples") s.hold_samples = it->get<std::size_t>();
        else if (k == "chirp_f0") s.chirp_f0 = it->get<double>();
        else if (k == "chirp_f1") s.chirp_f1 = it->get<double>();
        else throw ConfigError("excitation." + k, "unknown excitation field");
    }
    s.validate();
    return s;
}

struct GenDataArgs {
    std::string benchmark;
    std::uint64_t seed = 0;
    std::string out;
    std::string params;
    std::string excitation;
    double noise = 0.0;
    std::size_t length = 18500;
    std::size_t test_length = 19500;
};

int gen_data(const GenDataArgs& a, const std::vector<std::string>& argv) {
    const Benchmark b = parse_benchmark(a.benchmark);
    require_dir(a.out, "--out");
    const json params = a.params.empty() ? json::object() : parse_file(a.params);
    const json excitation = a.excitation.empty() ? json::object() : parse_file(a.excitation);
    if (b == Benchmark::drone && !excitation.empty())
        throw UsageError("--excitation applies to the tank benchmark only");
    const fs::path out(a.out);

    Manifest m("gen-data", argv, out);
    m.doc["benchmark"] = a.benchmark;
    m.doc["seed"] = a.seed;
    m.doc["params"] = params;
    m.doc["excitation"] = excitation;
    m.doc["noise_sigma"] = a.noise;
    std::vector<std::string> files;
    for (const fs::path& p : training_files(b, out)) files.push_back(p.string());
    files.push_back((out / "test.csv").string());
    m.doc["artifacts"] = files;
    if (b == Benchmark::drone) {
        m.doc["length"] = a.length;
        m.doc["test_length"] = a.test_length;
    }
    m.write();

    if (b == Benchmark::tank) {
        const TankParams p = tank_params_from(params);
        TankDataset d = make_tank_dataset(p, a.seed, a.noise);
        if (!excitation.empty()) {
            ExcitationSpec s;
            s.amplitude_low = 1.0;
            s.amplitude_high = 9.0;
            s.hold_samples = 20;
            s.sample_period = 4.0;
            s = excitation_from(excitation, s);
            s.duration_samples = 1024;
            const auto run = [&](std::uint64_t seed) {
                s.seed = seed;
                return simulate_tank(p, generate_excitation(s).data(), 4.0, {3.0, 3.0}, a.noise, seed ^ 0x5EEDull);
            };
            d = TankDataset{run(a.seed), run(a.seed + 0x9E3779B97F4A7C15ull)};
        }
        write_trajectory_csv(out / "train.csv", d.train);
        write_trajectory_csv(out / "test.csv", d.test);
    } else {
        if (a.length < 2 || a.test_length < 2) throw UsageError("--length and --test-length must be at least 2");
        if (a.noise != 0.0) throw UsageError("--noise applies to the tank benchmark only");
        const DroneDataset d = make_drone_dataset(drone_params_from(params), a.seed, a.length, a.test_length);
        for (std::size_t i = 0; i < 3; ++i) write_trajectory_csv(training_files(b, out)[i], d.train[i]);
        write_trajectory_csv(out / "test.csv", d.test);
    }
    std::cout << "wrote " << files.size() << " trajectories to " << out.string() << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------

struct CommonArgs {
    std::string protocol;
    std::string data;
    std::string out;
    std::size_t jobs = 1;
};

struct TrainArgs {
    CommonArgs common;
    std::string config;
    std::optional<std::uint64_t> seed;
};

int train_command(const TrainArgs& a, const std::vector<std::string>& argv) {
    const Benchmark b = parse_benchmark(a.common.protocol);
    require_dir(a.common.data, "--data");
    require_dir(a.common.out, "--out");
    SysIdConfiguration cfg = load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    const auto train = load_training(b, a.common.data);
    const EvalProtocol protocol = make_protocol(b, train);
    const fs::path out(a.common.out);

    Manifest m("train", argv, out);
    m.doc["config"] = json::parse(serialize_config(cfg));
    m.doc["seed"] = cfg.seed;
    m.doc["protocol_hash"] = protocol.hash();
    m.doc["protocol"] = json::parse(protocol.canonical_json());
    std::vector<std::string> files;
    for (std::size_t k = 0; k < protocol.folds().size(); ++k) {
        files.push_back((out / ("fold_" + std::to_string(k + 1) + ".ckpt.json")).string());
        files.push_back((out / ("fold_" + std::to_string(k + 1) + "_curve.csv")).string());
    }
    files.push_back((out / "report.json").string());
    m.doc["artifacts"] = files;
    m.write();

    const CvResult cv = cross_validation_score(cfg, protocol, train, a.common.jobs);
    for (std::size_t k = 0; k < cv.folds.size(); ++k) {
        const std::string stem = "fold_" + std::to_string(k + 1);
        if (cv.folds[k].model) write_text_file(out / (stem + ".ckpt.json"), save_checkpoint(*cv.folds[k].model));
        write_text_file(out / (stem + "_curve.csv"), learning_curve_csv(cv.folds[k].training.curve));
    }
    write_text_file(out / "report.json", cv.report.to_json() + "\n");
    std::cout << "status " << to_string(cv.status) << ", V = " << format_double(cv.report.aggregate) << "\n";
    if (cv.status == TrialStatus::numeric_failure) {
        std::cerr << "fold " << (cv.failed_fold.value_or(0) + 1) << " failed: " << cv.failure << "\n";
        return kFailure;
    }
    return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    CommonArgs common;
    std::vector<std::string> checkpoints;
    std::string config;
};

int eval_command(const EvalArgs& a, const std::vector<std::string>& argv) {
    const Benchmark b = parse_benchmark(a.common.protocol);
    require_dir(a.common.data, "--data");
    require_dir(a.common.out, "--out");
    if (a.checkpoints.empty() == a.config.empty()) throw UsageError("give either --checkpoint (one or more) or --config");
    const auto train = load_training(b, a.common.data);
    const Trajectory test = load_test(b, a.common.data);
    const EvalProtocol protocol = make_protocol(b, train);
    const NormalizationStats train_stats = compute_normalization(train, protocol.normalize_inputs(), "training data");
    const fs::path out(a.common.out);

    Manifest m("eval", argv, out);
    m.doc["protocol_hash"] = protocol.hash();
    m.doc["checkpoints"] = a.checkpoints;
    std::vector<std::unique_ptr<SequenceModel>> models;
    if (!a.config.empty()) {
        const SysIdConfiguration cfg = load_config(a.config);
        m.doc["config"] = json::parse(serialize_config(cfg));
        m.doc["seed"] = cfg.seed;
        models.push_back(build_model(cfg, protocol_io(protocol, train, train_stats)));
    } else {
        for (const std::string& path : a.checkpoints) models.push_back(load_checkpoint(read_text_file(path)));
    }
    std::vector<std::string> files{(out / "report.json").string()};
    if (b == Benchmark::drone) files.push_back((out / "mee.csv").string());
    m.doc["artifacts"] = files;
    m.write();

    std::vector<const SequenceModel*> ptrs;
    for (const auto& p : models) ptrs.push_back(p.get());
    MetricReport r;
    r.protocol_hash = protocol.hash();
    if (b == Benchmark::tank) {
        r.metric = "rmse";
        r.aggregate = tank_test_rmse(ptrs, test, protocol.discard_k0());
        r.per_fold = {r.aggregate};
    } else {
        r.metric = "mae";
        r.aggregate = windowed_rollout_mae(ptrs, test, protocol.horizon(), train_stats);
        r.per_fold = {r.aggregate};
        r.mee = mee_table(ptrs, test, protocol.horizon());
        write_text_file(out / "mee.csv", mee_table_csv({mee_row("model", *r.mee)}));
    }
    write_text_file(out / "report.json", r.to_json() + "\n");
    std::cout << r.metric << " on test data: " << format_double(r.aggregate) << "\n";
    return std::isfinite(r.aggregate) ? kOk : kFailure;
}

// ---------------------------------------------------------------------------

struct SearchArgs {
    CommonArgs common;
    std::string proposer;
    std::string plan;
    std::string space;
    std::string llm_config;
    std::string llm_url;
    std::size_t budget = 15;
    std::uint64_t seed = 0;
    std::optional<std::size_t> exploration;
    std::optional<double> trial_budget;
    std::optional<std::size_t> saturation;
};

int search_command(const SearchArgs& a, const std::vector<std::string>& argv) {
    const Benchmark b = parse_benchmark(a.common.protocol);
    require_dir(a.common.data, "--data");
    require_dir(a.common.out, "--out");
    const fs::path out(a.common.out);
    const fs::path ledger = out / "ledger.jsonl";
    if (fs::exists(ledger)) throw UsageError(ledger.string() + " already exists; choose a fresh --out directory");
    const auto train = load_training(b, a.common.data);
    const EvalProtocol protocol = make_protocol(b, train);

    std::unique_ptr<Proposer> proposer;
    SearchBudget budget;
    budget.max_iterations = a.budget;
    budget.trial_wall_seconds = a.trial_budget;
    budget.saturation_window = a.saturation;
    json proposer_doc;
    if (a.proposer == "scripted") {
        if (a.plan.empty()) throw UsageError("--plan is required for the scripted proposer");
        proposer = std::make_unique<ScriptedProposer>(parse_scripted_plan(read_text_file(a.plan)));
        proposer_doc = {{"kind", "scripted"}, {"plan", parse_file(a.plan)}};
        budget.exploration_phase_length = 0;
    } else if (a.proposer == "random") {
        RandomSearchSpace space = a.space.empty() ? RandomSearchSpace{} : parse_search_space(read_text_file(a.space));
        if (a.space.empty() && b == Benchmark::tank)
            space.model_classes = {ModelClass::vanilla_rnn, ModelClass::lstm, ModelClass::gru, ModelClass::cfc};
        space.seed = a.seed;
        json classes = json::array();
        for (ModelClass c : space.model_classes) classes.push_back(std::string(to_string(c)));
        proposer_doc = {{"kind", "random"},
                        {"seed", space.seed},
                        {"model_classes", classes},
                        {"space_file", a.space}};
        proposer = std::make_unique<RandomProposer>(std::move(space));
        budget.exploration_phase_length = 0;
    } else if (a.proposer == "llm") {
        if (a.llm_config.empty()) throw UsageError("--llm-config is required for the llm proposer");
        LlmProposerConfig c = parse_llm_config(read_text_file(a.llm_config));
        if (!a.llm_url.empty()) c.base_url = a.llm_url;
        c.validate();
        proposer_doc = {{"kind", "llm"}, {"config", parse_file(a.llm_config)}, {"base_url", c.base_url}};
        proposer = std::make_unique<LlmProposer>(std::move(c));
        budget.exploration_phase_length = std::min<std::size_t>(5, a.budget);
    } else {
        throw UsageError("unknown proposer '" + a.proposer + "' (expected scripted, random or llm)");
    }
    if (a.exploration) budget.exploration_phase_length = *a.exploration;
    budget.validate();

    Manifest m("search", argv, out);
    m.doc["seed"] = a.seed;
    m.doc["proposer"] = proposer_doc;
    m.doc["budget"] = {{"max_iterations", budget.max_iterations},
                       {"exploration_phase_length", budget.exploration_phase_length},
                       {"trial_wall_seconds", budget.trial_wall_seconds ? json(*budget.trial_wall_seconds) : json()},
                       {"saturation_window", budget.saturation_window ? json(*budget.saturation_window) : json()}};
    m.doc["protocol_hash"] = protocol.hash();
    m.doc["protocol"] = json::parse(protocol.canonical_json());
    m.doc["artifacts"] = {ledger.string(), (out / "search.csv").string(), (out / "final").string()};
    m.write();

    SearchOptions opts;
    opts.jobs = a.common.jobs;
    opts.on_trial = [](const TrialRecord& r) {
        std::cout << "trial " << r.iteration << " " << to_string(r.configuration.model_class) << " "
                  << to_string(r.status);
        if (std::isfinite(r.aggregate_metric)) std::cout << " V = " << format_double(r.aggregate_metric);
        std::cout << std::endl;
    };
    SearchResult res = run_search(*proposer, protocol, train, budget, ledger, opts);
    write_text_file(out / "search.csv", search_report_csv(res.ledger));
    try {
        const FinalModel f = select_final(res.ledger, res.fold_models);
        fs::create_directories(out / "final");
        for (std::size_t k = 0; k < f.members.size(); ++k)
            write_text_file(out / "final" / ("member_" + std::to_string(k + 1) + ".ckpt.json"),
                            save_checkpoint(*f.members[k]));
        write_text_file(out / "final" / "summary.txt", f.summary + "\n");
        std::cout << f.summary << "\n";
    } catch (const std::invalid_argument& e) {
        std::cerr << "search produced no final model: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}

// ---------------------------------------------------------------------------

MeeTable mee_from_report(const json& j, const std::string& path) {
    if (!j.contains("mee")) throw ConfigError(path, "report has no MEE table");
    MeeTable t;
    for (StateGroup g : kStateGroups) {
        const std::string key(to_string(g));
        const json& by_h = j["mee"].at(key).at("by_horizon");
        std::vector<double>& col = t.values[g];
        for (std::size_t h = 1; h <= by_h.size(); ++h) {
            const json& v = by_h.at(std::to_string(h));
            col.push_back(v.is_null() ? std::nan("") : v.get<double>());
        }
        t.horizon = col.size();
    }
    return t;
}

struct ReportArgs {
    std::string ledger;
    std::string out;
    std::vector<std::string> mee;
    bool reference = false;
};

int report_command(const ReportArgs& a, const std::vector<std::string>& argv) {
    require_dir(a.out, "--out");
    if (a.ledger.empty() || !fs::exists(a.ledger)) throw UsageError("--ledger file does not exist: " + a.ledger);
    const fs::path out(a.out);
    Manifest m("report", argv, out);
    m.doc["ledger"] = a.ledger;
    m.doc["mee_reports"] = a.mee;
    std::vector<std::string> files{(out / "best_so_far.csv").string()};
    if (!a.mee.empty() || a.reference) files.push_back((out / "mee.csv").string());
    m.doc["artifacts"] = files;
    m.write();

    const std::vector<TrialRecord> ledger = read_ledger(a.ledger);
    if (ledger.empty()) {
        std::cerr << "the ledger is empty; there is nothing to report\n";
        return kFailure;
    }
    write_text_file(out / "best_so_far.csv", search_report_csv(ledger));
    if (!a.mee.empty() || a.reference) {
        std::vector<MeeRow> rows;
        for (const std::string& spec : a.mee) {
            const auto eq = spec.find('=');
            const std::string name = eq == std::string::npos ? fs::path(spec).parent_path().filename().string() : spec.substr(0, eq);
            const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
            rows.push_back(mee_row(name, mee_from_report(parse_file(path), path)));
        }
        if (a.reference) rows.push_back(published_naive_reference());
        write_text_file(out / "mee.csv", mee_table_csv(rows));
    }
    const auto curve = best_so_far(ledger);
    if (curve.empty()) {
        std::cerr << "no trial in the ledger finished ok\n";
        return kFailure;
    }
    std::cout << ledger.size() << " trials, best V = " << format_double(curve.back().best) << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"System identification search workbench"};
    app.require_subcommand(1);
    app.set_version_flag("--version", SYSID_VERSION);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "Simulate training and test trajectories");
    gen_cmd->add_option("benchmark", gen.benchmark, "tank or drone")->required();
    gen_cmd->add_option("--seed", gen.seed, "Excitation seed");
    gen_cmd->add_option("--out", gen.out, "Existing output directory")->required();
    gen_cmd->add_option("--params", gen.params, "JSON file of simulator parameters");
    gen_cmd->add_option("--excitation", gen.excitation, "JSON excitation overrides (tank)");
    gen_cmd->add_option("--noise", gen.noise, "Output noise standard deviation (tank)");
    gen_cmd->add_option("--length", gen.length, "Samples per drone training flight");
    gen_cmd->add_option("--test-length", gen.test_length, "Samples in the drone test flight");

    const auto add_common = [](CLI::App* cmd, CommonArgs& c) {
        cmd->add_option("--protocol", c.protocol, "tank or drone")->required();
        cmd->add_option("--data", c.data, "Directory written by gen-data")->required();
        cmd->add_option("--out", c.out, "Existing output directory")->required();
        cmd->add_option("--jobs", c.jobs, "Folds trained concurrently")->check(CLI::PositiveNumber);
    };

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Cross-validate one configuration and save the fold models");
    add_common(train_cmd, tr.common);
    train_cmd->add_option("--config", tr.config, "Configuration JSON")->required();
    train_cmd->add_option("--seed", tr.seed, "Overrides the configuration seed");

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Score checkpoints (averaged) or a configuration on the test data");
    add_common(eval_cmd, ev.common);
    eval_cmd->add_option("--checkpoint", ev.checkpoints, "Checkpoint JSON; repeat for an ensemble");
    eval_cmd->add_option("--config", ev.config, "Configuration scored without training");

    SearchArgs se;
    auto* search_cmd = app.add_subcommand("search", "Run the propose/score/record loop");
    add_common(search_cmd, se.common);
    search_cmd->add_option("--proposer", se.proposer, "scripted, random or llm")->required();
    search_cmd->add_option("--plan", se.plan, "Scripted plan JSON");
    search_cmd->add_option("--space", se.space, "Random search space JSON");
    search_cmd->add_option("--llm-config", se.llm_config, "LLM proposer JSON");
    search_cmd->add_option("--llm-url", se.llm_url, "Overrides the endpoint base URL");
    search_cmd->add_option("--budget", se.budget, "Maximum number of trials")->check(CLI::PositiveNumber);
    search_cmd->add_option("--seed", se.seed, "Random search seed");
    search_cmd->add_option("--exploration", se.exploration, "Exploration phase length");
    search_cmd->add_option("--trial-budget", se.trial_budget, "Wall seconds per fold training");
    search_cmd->add_option("--saturation", se.saturation, "Stop after this many iterations without improvement");

    ReportArgs rp;
    auto* report_cmd = app.add_subcommand("report", "Render best-so-far and MEE comparison CSVs");
    report_cmd->add_option("--ledger", rp.ledger, "Ledger JSONL")->required();
    report_cmd->add_option("--out", rp.out, "Existing output directory")->required();
    report_cmd->add_option("--mee", rp.mee, "name=report.json from eval (drone); repeatable");
    report_cmd->add_flag("--reference", rp.reference, "Append the published naive reference row");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen_cmd) return gen_data(gen, args);
        if (*train_cmd) return train_command(tr, args);
        if (*eval_cmd) return eval_command(ev, args);
        if (*search_cmd) return search_command(se, args);
        if (*report_cmd) return report_command(rp, args);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericFailure& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kFailure;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return kFailure;
    }
    return kUsage;
}
