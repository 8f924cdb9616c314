#include "sysid/datamodel.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace sysid {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Matrix / Trajectory

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw std::invalid_argument("matrix data length " + std::to_string(data_.size()) + " does not match " +
                                    std::to_string(rows) + "x" + std::to_string(cols));
    }
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows_) throw std::out_of_range("row slice out of range");
    return Matrix(end - begin, cols_,
                  std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                      data_.begin() + static_cast<std::ptrdiff_t>(end * cols_)));
}

Matrix Matrix::slice_cols(std::size_t begin, std::size_t end) const {
    if (begin > end || end > cols_) throw std::out_of_range("column slice out of range");
    Matrix out(rows_, end - begin);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = (*this)(r, c);
    return out;
}

Trajectory::Trajectory(double sample_period, Matrix inputs, Matrix outputs, std::vector<std::string> input_names,
                       std::vector<std::string> output_names)
    : sample_period_(sample_period),
      inputs_(std::move(inputs)),
      outputs_(std::move(outputs)),
      input_names_(std::move(input_names)),
      output_names_(std::move(output_names)) {
    if (!(sample_period_ > 0.0) || !std::isfinite(sample_period_))
        throw std::invalid_argument("trajectory sample period must be positive");
    if (inputs_.rows() != outputs_.rows())
        throw std::invalid_argument("trajectory inputs have " + std::to_string(inputs_.rows()) +
                                    " rows but outputs have " + std::to_string(outputs_.rows()));
    if (inputs_.rows() == 0) throw std::invalid_argument("trajectory must contain at least one sample");
    if (input_names_.size() != inputs_.cols() || output_names_.size() != outputs_.cols())
        throw std::invalid_argument("trajectory channel names do not match column counts");
    auto check = [](const Matrix& m, const char* what) {
        for (std::size_t i = 0; i < m.data().size(); ++i)
            if (!std::isfinite(m.data()[i]))
                throw NumericFailure(std::string("non-finite trajectory ") + what, i / std::max<std::size_t>(m.cols(), 1));
    };
    check(inputs_, "input");
    check(outputs_, "output");
}

Trajectory Trajectory::slice(std::size_t begin, std::size_t end) const {
    return Trajectory(sample_period_, inputs_.slice_rows(begin, end), outputs_.slice_rows(begin, end), input_names_,
                      output_names_);
}

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (ec != std::errc()) throw std::runtime_error("number formatting failed");
    return std::string(buf.data(), ptr);
}

namespace {

double parse_number(std::string_view s, std::size_t line) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ConfigError("csv", "line " + std::to_string(line) + ": cannot parse number '" + std::string(s) + "'");
    return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(sep, start);
        parts.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return parts;
}

}  // namespace

std::string trajectory_csv(const Trajectory& traj) {
    std::string out = "t";
    for (const auto& n : traj.input_names()) out += "," + n;
    for (const auto& n : traj.output_names()) out += "," + n;
    out += "\n";
    for (std::size_t k = 0; k < traj.length(); ++k) {
        out += format_double(static_cast<double>(k) * traj.sample_period());
        for (double v : traj.inputs().row(k)) out += "," + format_double(v);
        for (double v : traj.outputs().row(k)) out += "," + format_double(v);
        out += "\n";
    }
    return out;
}

void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& traj) {
    write_text_file(path, trajectory_csv(traj));
}

Trajectory parse_trajectory_csv(std::string_view text, std::size_t num_inputs) {
    std::vector<std::string_view> lines;
    for (auto l : split(text, '\n')) {
        if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
        if (!l.empty()) lines.push_back(l);
    }
    if (lines.size() < 2) throw ConfigError("csv", "trajectory file needs a header and at least one sample");
    auto header = split(lines[0], ',');
    if (header.empty() || header[0] != "t") throw ConfigError("csv", "first header column must be 't'");
    if (header.size() < 1 + num_inputs + 1)
        throw ConfigError("csv", "header has too few columns for " + std::to_string(num_inputs) + " inputs");
    const std::size_t n_y = header.size() - 1 - num_inputs;
    std::vector<std::string> in_names, out_names;
    for (std::size_t i = 0; i < num_inputs; ++i) in_names.emplace_back(header[1 + i]);
    for (std::size_t i = 0; i < n_y; ++i) out_names.emplace_back(header[1 + num_inputs + i]);

    const std::size_t T = lines.size() - 1;
    Matrix u(T, num_inputs), y(T, n_y);
    std::vector<double> t(T);
    for (std::size_t k = 0; k < T; ++k) {
        auto cells = split(lines[k + 1], ',');
        if (cells.size() != header.size())
            throw ConfigError("csv", "line " + std::to_string(k + 2) + ": expected " + std::to_string(header.size()) +
                                         " columns, got " + std::to_string(cells.size()));
        t[k] = parse_number(cells[0], k + 2);
        for (std::size_t i = 0; i < num_inputs; ++i) u(k, i) = parse_number(cells[1 + i], k + 2);
        for (std::size_t i = 0; i < n_y; ++i) y(k, i) = parse_number(cells[1 + num_inputs + i], k + 2);
    }
    double period = T > 1 ? t[1] - t[0] : 1.0;
    if (T > 1 && !(period > 0.0)) throw ConfigError("csv", "time column must be strictly increasing");
    for (std::size_t k = 1; k < T; ++k) {
        if (std::abs((t[k] - t[k - 1]) - period) > 1e-9)
            throw ConfigError("csv", "non-uniform sampling at line " + std::to_string(k + 2));
    }
    return Trajectory(period, std::move(u), std::move(y), std::move(in_names), std::move(out_names));
}

Trajectory read_trajectory_csv(const std::filesystem::path& path, std::size_t num_inputs) {
    return parse_trajectory_csv(read_text_file(path), num_inputs);
}

// ---------------------------------------------------------------------------
// Configurations

namespace {

constexpr std::array<std::pair<ModelClass, std::string_view>, 8> kClassNames{{
    {ModelClass::vanilla_rnn, "vanilla_rnn"},
    {ModelClass::lstm, "lstm"},
    {ModelClass::gru, "gru"},
    {ModelClass::cfc, "cfc"},
    {ModelClass::greybox_tank, "greybox_tank"},
    {ModelClass::physics_residual, "physics_residual"},
    {ModelClass::kinematics_lstm, "kinematics_lstm"},
    {ModelClass::ensemble, "ensemble"},
}};

enum class Kind { flag, integer, real, text };

struct FieldSpec {
    Kind kind;
    double lo;
    double hi;
    bool lo_open;
    bool hi_open;
    std::vector<std::string_view> choices;
};

constexpr double kInf = std::numeric_limits<double>::infinity();

const std::map<std::string, FieldSpec, std::less<>>& arch_schema() {
    static const std::map<std::string, FieldSpec, std::less<>> s{
        {"hidden_size", {Kind::integer, 1, 1 << 16, false, false, {}}},
        {"num_layers", {Kind::integer, 1, 16, false, false, {}}},
        {"learn_gains", {Kind::flag, 0, 0, false, false, {}}},
        {"augment_inputs", {Kind::flag, 0, 0, false, false, {}}},
        {"overflow_coupling", {Kind::flag, 0, 0, false, false, {}}},
        {"level_max", {Kind::real, 0, kInf, true, true, {}}},
        {"k1", {Kind::real, 0, kInf, true, true, {}}},
        {"k2", {Kind::real, 0, kInf, true, true, {}}},
        {"k3", {Kind::real, 0, kInf, true, true, {}}},
        {"k4", {Kind::real, 0, kInf, true, true, {}}},
    };
    return s;
}

const std::map<std::string, FieldSpec, std::less<>>& train_schema() {
    static const std::map<std::string, FieldSpec, std::less<>> s{
        {"loss", {Kind::text, 0, 0, false, false, {"mse", "mae"}}},
        {"learning_rate", {Kind::real, 0, kInf, true, true, {}}},
        {"chunk_length", {Kind::integer, 1, 1e9, false, false, {}}},
        {"epochs", {Kind::integer, 0, 1e9, false, false, {}}},
        {"batch_size", {Kind::integer, 1, 1e9, false, false, {}}},
        {"weight_decay", {Kind::real, 0, kInf, false, true, {}}},
        {"dropout", {Kind::real, 0, 1, false, true, {}}},
        {"teacher_forcing_p0", {Kind::real, 0, 1, false, false, {}}},
        {"eval_cadence", {Kind::integer, 1, 1e9, false, false, {}}},
        {"patience", {Kind::integer, 1, 1e9, false, false, {}}},
        {"wall_budget_seconds", {Kind::real, 0, kInf, true, true, {}}},
    };
    return s;
}

void check_value(const std::string& path, const FieldSpec& spec, const ParamValue& v) {
    auto range = [&](double x) {
        bool ok = std::isfinite(x) && (spec.lo_open ? x > spec.lo : x >= spec.lo) &&
                  (spec.hi_open ? x < spec.hi : x <= spec.hi);
        if (!ok) throw ConfigError(path, "value " + format_double(x) + " out of range");
    };
    switch (spec.kind) {
        case Kind::flag:
            if (!std::holds_alternative<bool>(v)) throw ConfigError(path, "expected a boolean");
            break;
        case Kind::integer:
            if (!std::holds_alternative<std::int64_t>(v)) throw ConfigError(path, "expected an integer");
            range(static_cast<double>(std::get<std::int64_t>(v)));
            break;
        case Kind::real:
            if (!std::holds_alternative<double>(v)) throw ConfigError(path, "expected a number");
            range(std::get<double>(v));
            break;
        case Kind::text: {
            if (!std::holds_alternative<std::string>(v)) throw ConfigError(path, "expected a string");
            const auto& s = std::get<std::string>(v);
            if (std::find(spec.choices.begin(), spec.choices.end(), s) == spec.choices.end())
                throw ConfigError(path, "unknown value '" + s + "'");
            break;
        }
    }
}

void check_map(const std::string& prefix, const ParamMap& m, const std::map<std::string, FieldSpec, std::less<>>& schema) {
    for (const auto& [key, value] : m) {
        auto it = schema.find(key);
        if (it == schema.end()) throw ConfigError(prefix + "." + key, "unknown parameter");
        check_value(prefix + "." + key, it->second, value);
    }
}

ParamValue value_from_json(const std::string& path, const FieldSpec& spec, const json& j) {
    switch (spec.kind) {
        case Kind::flag:
            if (!j.is_boolean()) throw ConfigError(path, "expected a boolean");
            return j.get<bool>();
        case Kind::integer:
            if (j.is_number_integer()) return j.get<std::int64_t>();
            if (j.is_number_float()) {
                double d = j.get<double>();
                if (std::floor(d) == d && std::abs(d) < 9e15) return static_cast<std::int64_t>(d);
            }
            throw ConfigError(path, "expected an integer");
        case Kind::real:
            if (!j.is_number()) throw ConfigError(path, "expected a number");
            return j.get<double>();
        case Kind::text:
            if (!j.is_string()) throw ConfigError(path, "expected a string");
            return j.get<std::string>();
    }
    throw ConfigError(path, "unsupported field kind");
}

json value_to_json(const ParamValue& v) {
    return std::visit([](const auto& x) { return json(x); }, v);
}

ParamMap map_from_json(const std::string& prefix, const json& j,
                       const std::map<std::string, FieldSpec, std::less<>>& schema) {
    if (!j.is_object()) throw ConfigError(prefix, "expected an object");
    ParamMap out;
    for (auto it = j.begin(); it != j.end(); ++it) {
        auto spec = schema.find(it.key());
        if (spec == schema.end()) throw ConfigError(prefix + "." + it.key(), "unknown parameter");
        out[it.key()] = value_from_json(prefix + "." + it.key(), spec->second, it.value());
    }
    return out;
}

template <typename T>
const T* lookup(const ParamMap& m, const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) return nullptr;
    return std::get_if<T>(&it->second);
}

}  // namespace

std::string_view to_string(ModelClass c) {
    for (const auto& [cls, name] : kClassNames)
        if (cls == c) return name;
    return "unknown";
}

std::optional<ModelClass> model_class_from_string(std::string_view name) {
    for (const auto& [cls, n] : kClassNames)
        if (n == name) return cls;
    return std::nullopt;
}

const std::vector<ModelClass>& all_model_classes() {
    static const std::vector<ModelClass> v = [] {
        std::vector<ModelClass> out;
        for (const auto& [cls, name] : kClassNames) out.push_back(cls);
        return out;
    }();
    return v;
}

std::int64_t SysIdConfiguration::arch_int(const std::string& key, std::int64_t fallback) const {
    auto p = lookup<std::int64_t>(arch, key);
    return p ? *p : fallback;
}
double SysIdConfiguration::arch_real(const std::string& key, double fallback) const {
    auto p = lookup<double>(arch, key);
    return p ? *p : fallback;
}
bool SysIdConfiguration::arch_flag(const std::string& key, bool fallback) const {
    auto p = lookup<bool>(arch, key);
    return p ? *p : fallback;
}
std::int64_t SysIdConfiguration::train_int(const std::string& key, std::int64_t fallback) const {
    auto p = lookup<std::int64_t>(train, key);
    return p ? *p : fallback;
}
double SysIdConfiguration::train_real(const std::string& key, double fallback) const {
    auto p = lookup<double>(train, key);
    return p ? *p : fallback;
}
std::string SysIdConfiguration::train_text(const std::string& key, const std::string& fallback) const {
    auto p = lookup<std::string>(train, key);
    return p ? *p : fallback;
}

void validate_config(const SysIdConfiguration& cfg) {
    check_map("arch", cfg.arch, arch_schema());
    check_map("train", cfg.train, train_schema());
}

std::string serialize_config(const SysIdConfiguration& cfg) {
    validate_config(cfg);
    json arch = json::object(), train = json::object();
    for (const auto& [k, v] : cfg.arch) arch[k] = value_to_json(v);
    for (const auto& [k, v] : cfg.train) train[k] = value_to_json(v);
    json j = {{"model_class", std::string(to_string(cfg.model_class))},
              {"arch", arch},
              {"train", train},
              {"seed", cfg.seed}};
    return j.dump();
}

namespace {

SysIdConfiguration config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("", "configuration must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() != "model_class" && it.key() != "arch" && it.key() != "train" && it.key() != "seed")
            throw ConfigError(it.key(), "unknown configuration field");
    }
    SysIdConfiguration cfg;
    if (!j.contains("model_class") || !j["model_class"].is_string())
        throw ConfigError("model_class", "missing or not a string");
    auto cls = model_class_from_string(j["model_class"].get<std::string>());
    if (!cls) throw ConfigError("model_class", "unknown model class '" + j["model_class"].get<std::string>() + "'");
    cfg.model_class = *cls;
    if (j.contains("arch")) cfg.arch = map_from_json("arch", j["arch"], arch_schema());
    if (j.contains("train")) cfg.train = map_from_json("train", j["train"], train_schema());
    if (j.contains("seed")) {
        const auto& s = j["seed"];
        if (!s.is_number_unsigned() && !(s.is_number_integer() && s.get<std::int64_t>() >= 0))
            throw ConfigError("seed", "expected a non-negative integer");
        cfg.seed = s.get<std::uint64_t>();
    }
    validate_config(cfg);
    return cfg;
}

json config_to_json(const SysIdConfiguration& cfg) { return json::parse(serialize_config(cfg)); }

}  // namespace

SysIdConfiguration parse_config(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("", std::string("malformed JSON: ") + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Trial records

namespace {
constexpr std::array<std::pair<TrialStatus, std::string_view>, 4> kStatusNames{{
    {TrialStatus::ok, "ok"},
    {TrialStatus::train_timeout, "train_timeout"},
    {TrialStatus::proposal_error, "proposal_error"},
    {TrialStatus::numeric_failure, "numeric_failure"},
}};

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double number_from(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }
}  // namespace

std::string_view to_string(TrialStatus s) {
    for (const auto& [st, name] : kStatusNames)
        if (st == s) return name;
    return "unknown";
}

std::optional<TrialStatus> trial_status_from_string(std::string_view name) {
    for (const auto& [st, n] : kStatusNames)
        if (n == name) return st;
    return std::nullopt;
}

double arithmetic_mean(std::span<const double> values) {
    if (values.empty()) return std::nan("");
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
}

void validate_record(const TrialRecord& rec) {
    if (rec.iteration < 0) throw ConfigError("iteration", "must be non-negative");
    if (rec.status == TrialStatus::ok) {
        if (rec.per_fold_metrics.empty()) throw ConfigError("per_fold_metrics", "ok trial without fold metrics");
        for (double v : rec.per_fold_metrics)
            if (!std::isfinite(v)) throw ConfigError("per_fold_metrics", "non-finite metric in ok trial");
        double mean = arithmetic_mean(rec.per_fold_metrics);
        if (!(std::abs(mean - rec.aggregate_metric) <= 1e-12))
            throw ConfigError("aggregate_metric", "does not equal the mean of per-fold metrics");
    }
}

std::string serialize_record(const TrialRecord& rec) {
    validate_record(rec);
    json folds = json::array();
    for (double v : rec.per_fold_metrics) folds.push_back(number_or_null(v));
    json j = {{"iteration", rec.iteration},
              {"config", config_to_json(rec.configuration)},
              {"per_fold_metrics", folds},
              {"aggregate_metric", number_or_null(rec.aggregate_metric)},
              {"wall_seconds", rec.wall_seconds},
              {"rationale", rec.rationale},
              {"status", std::string(to_string(rec.status))},
              {"protocol_hash", rec.protocol_hash},
              {"proposal_retries", rec.proposal_retries}};
    return j.dump();
}

TrialRecord parse_record(std::string_view line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw ConfigError("ledger", std::string("malformed record: ") + e.what());
    }
    TrialRecord rec;
    try {
        rec.iteration = j.at("iteration").get<std::int64_t>();
        rec.configuration = config_from_json(j.at("config"));
        for (const auto& v : j.at("per_fold_metrics")) rec.per_fold_metrics.push_back(number_from(v));
        rec.aggregate_metric = number_from(j.at("aggregate_metric"));
        rec.wall_seconds = j.at("wall_seconds").get<double>();
        rec.rationale = j.at("rationale").get<std::string>();
        auto st = trial_status_from_string(j.at("status").get<std::string>());
        if (!st) throw ConfigError("status", "unknown trial status");
        rec.status = *st;
        rec.protocol_hash = j.value("protocol_hash", std::string());
        rec.proposal_retries = j.value("proposal_retries", std::int64_t{0});
    } catch (const json::exception& e) {
        throw ConfigError("ledger", std::string("bad record: ") + e.what());
    }
    validate_record(rec);
    return rec;
}

LedgerWriter::LedgerWriter(std::filesystem::path path) : path_(std::move(path)) {
    std::ofstream probe(path_, std::ios::app);
    if (!probe) throw ConfigError("ledger", "cannot open " + path_.string() + " for appending");
    probe.close();
    for (const auto& rec : read_ledger(path_)) last_iteration_ = rec.iteration;
}

void LedgerWriter::append(const TrialRecord& rec) {
    if (last_iteration_ && rec.iteration <= *last_iteration_)
        throw ConfigError("iteration", "ledger iterations must be strictly increasing");
    auto line = serialize_record(rec);
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) throw ConfigError("ledger", "cannot append to " + path_.string());
    out << line << '\n';
    out.flush();
    if (!out) throw ConfigError("ledger", "write failed for " + path_.string());
    last_iteration_ = rec.iteration;
}

std::vector<TrialRecord> read_ledger(const std::filesystem::path& path) {
    std::vector<TrialRecord> out;
    std::ifstream in(path, std::ios::binary);
    if (!in) return out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(parse_record(line));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

ChannelStats compute_channel_stats(std::span<const Matrix* const> blocks) {
    if (blocks.empty()) throw std::invalid_argument("no data for normalization statistics");
    const std::size_t n = blocks.front()->cols();
    std::vector<double> sum(n, 0.0);
    std::size_t count = 0;
    for (const Matrix* m : blocks) {
        if (m->cols() != n) throw std::invalid_argument("inconsistent channel counts in normalization data");
        for (std::size_t r = 0; r < m->rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) sum[c] += (*m)(r, c);
        count += m->rows();
    }
    if (count == 0) throw std::invalid_argument("no samples for normalization statistics");
    ChannelStats s;
    s.mean.resize(n);
    s.scale.assign(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) s.mean[c] = sum[c] / static_cast<double>(count);
    for (const Matrix* m : blocks)
        for (std::size_t r = 0; r < m->rows(); ++r)
            for (std::size_t c = 0; c < n; ++c) {
                double d = (*m)(r, c) - s.mean[c];
                s.scale[c] += d * d;
            }
    for (auto& v : s.scale) v = std::max(std::sqrt(v / static_cast<double>(count)), kMinScale);
    return s;
}

NormalizationStats compute_normalization(std::span<const Trajectory> trajectories, bool include_inputs,
                                         std::string source) {
    std::vector<const Matrix*> ys, us;
    for (const auto& t : trajectories) {
        ys.push_back(&t.outputs());
        us.push_back(&t.inputs());
    }
    NormalizationStats stats;
    stats.outputs = compute_channel_stats(ys);
    if (include_inputs) stats.inputs = compute_channel_stats(us);
    stats.source = std::move(source);
    return stats;
}

NormalizationStats identity_normalization(std::size_t num_inputs, std::size_t num_outputs) {
    NormalizationStats s;
    s.outputs = {std::vector<double>(num_outputs, 0.0), std::vector<double>(num_outputs, 1.0)};
    s.inputs = ChannelStats{std::vector<double>(num_inputs, 0.0), std::vector<double>(num_inputs, 1.0)};
    s.source = "identity";
    return s;
}

namespace {
void check_stats(const Matrix& m, const ChannelStats& s) {
    if (s.mean.size() != m.cols() || s.scale.size() != m.cols())
        throw std::invalid_argument("normalization stats have " + std::to_string(s.mean.size()) +
                                    " channels but data has " + std::to_string(m.cols()));
    for (double v : s.scale)
        if (!(v > 0.0)) throw std::invalid_argument("normalization scale must be positive");
}
}  // namespace

Matrix normalize_block(const Matrix& m, const ChannelStats& s) {
    check_stats(m, s);
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = (m(r, c) - s.mean[c]) / s.scale[c];
    return out;
}

Matrix denormalize_block(const Matrix& m, const ChannelStats& s) {
    check_stats(m, s);
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r, c) * s.scale[c] + s.mean[c];
    return out;
}

Trajectory normalize(const Trajectory& traj, const NormalizationStats& stats) {
    Matrix u = stats.inputs ? normalize_block(traj.inputs(), *stats.inputs) : traj.inputs();
    return Trajectory(traj.sample_period(), std::move(u), normalize_block(traj.outputs(), stats.outputs),
                      traj.input_names(), traj.output_names());
}

Trajectory denormalize(const Trajectory& traj, const NormalizationStats& stats) {
    Matrix u = stats.inputs ? denormalize_block(traj.inputs(), *stats.inputs) : traj.inputs();
    return Trajectory(traj.sample_period(), std::move(u), denormalize_block(traj.outputs(), stats.outputs),
                      traj.input_names(), traj.output_names());
}

// ---------------------------------------------------------------------------

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("file", "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("file", "cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw ConfigError("file", "write failed for " + path.string());
}

}  // namespace sysid
