#include "sysid/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numbers>
#include <sstream>

#include <json.hpp>

namespace sysid {

using json = nlohmann::json;

std::string_view to_string(Benchmark b) { return b == Benchmark::tank ? "tank" : "drone"; }

std::optional<Benchmark> benchmark_from_string(std::string_view s) {
    if (s == "tank") return Benchmark::tank;
    if (s == "drone") return Benchmark::drone;
    return std::nullopt;
}

std::vector<FoldSplit> make_tank_folds(const Trajectory& traj) {
    if (traj.length() != 1024)
        throw std::invalid_argument("the tank protocol needs exactly 1024 samples, got " +
                                    std::to_string(traj.length()));
    const Segment first{0, 0, 5, 515};
    const Segment second{0, 510, 515, 1024};
    return {FoldSplit{{second}, {first}}, FoldSplit{{first}, {second}}};
}

std::vector<FoldSplit> make_drone_folds(std::span<const Trajectory> trajs) {
    if (trajs.size() != 3)
        throw std::invalid_argument("the drone protocol needs exactly 3 training trajectories, got " +
                                    std::to_string(trajs.size()));
    std::vector<FoldSplit> folds(3);
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t t = 0; t < 3; ++t) {
            if (trajs[t].length() < 2) throw std::invalid_argument("drone trajectories need at least 2 samples");
            const Segment s{t, 0, 1, trajs[t].length()};
            (t == k ? folds[k].validation : folds[k].train).push_back(s);
        }
    return folds;
}

std::string trajectory_fingerprint(const Trajectory& traj) { return sha256_hex(trajectory_csv(traj)); }

EvalProtocol EvalProtocol::tank(const Trajectory& train) {
    EvalProtocol p;
    p.benchmark_ = Benchmark::tank;
    p.folds_ = make_tank_folds(train);
    p.window_length_ = 5;
    p.horizon_ = 0;
    p.discard_k0_ = 51;
    p.metric_ = "rmse";
    p.fingerprints_ = {trajectory_fingerprint(train)};
    p.seal();
    return p;
}

EvalProtocol EvalProtocol::drone(std::span<const Trajectory> trajs, std::size_t horizon, bool normalize_inputs) {
    if (horizon == 0) throw std::invalid_argument("horizon must be at least 1");
    EvalProtocol p;
    p.benchmark_ = Benchmark::drone;
    p.folds_ = make_drone_folds(trajs);
    p.window_length_ = 1;
    p.horizon_ = horizon;
    p.discard_k0_ = 0;
    p.metric_ = "mae";
    p.normalize_inputs_ = normalize_inputs;
    for (const Trajectory& t : trajs) {
        if (t.num_outputs() != 12 || t.num_inputs() != 4)
            throw std::invalid_argument("drone trajectories need 4 inputs and 12 outputs");
        if (t.length() < horizon + 1) throw std::invalid_argument("drone trajectory shorter than one window");
        p.fingerprints_.push_back(trajectory_fingerprint(t));
    }
    p.seal();
    return p;
}

std::string EvalProtocol::canonical_json() const {
    json folds = json::array();
    const auto seg = [](const Segment& s) {
        return json{{"trajectory", s.trajectory},
                    {"window_begin", s.window_begin},
                    {"body_begin", s.body_begin},
                    {"body_end", s.body_end}};
    };
    for (const FoldSplit& f : folds_) {
        json tr = json::array(), va = json::array();
        for (const Segment& s : f.train) tr.push_back(seg(s));
        for (const Segment& s : f.validation) va.push_back(seg(s));
        folds.push_back({{"train", tr}, {"validation", va}});
    }
    return json{{"benchmark", std::string(to_string(benchmark_))},
                {"folds", folds},
                {"window_length", window_length_},
                {"horizon", horizon_},
                {"discard_k0", discard_k0_},
                {"metric", metric_},
                {"normalize_inputs", normalize_inputs_},
                {"normalization", "training-fold statistics"},
                {"fingerprints", fingerprints_}}
        .dump();
}

void EvalProtocol::seal() { hash_ = sha256_hex(canonical_json()); }

// ---------------------------------------------------------------------------

double rmse(std::span<const double> y_true, std::span<const double> y_pred, std::size_t k0) {
    if (y_true.size() != y_pred.size()) throw std::invalid_argument("rmse needs sequences of equal length");
    if (k0 < 1 || k0 > y_true.size()) throw std::invalid_argument("rmse discard index k0 out of range");
    double acc = 0.0;
    for (std::size_t k = k0 - 1; k < y_true.size(); ++k) {
        const double e = y_true[k] - y_pred[k];
        acc += e * e;
    }
    return std::sqrt(acc / static_cast<double>(y_true.size() - k0 + 1));
}

double mean_absolute_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("mae needs non-empty equal-length inputs");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / static_cast<double>(a.size());
}

double wrap_angle(double a) {
    constexpr double pi = std::numbers::pi;
    double r = std::remainder(a, 2.0 * pi);
    if (r <= -pi) r += 2.0 * pi;
    return r;
}

double geodesic_distance(const Mat3& a, const Mat3& b) {
    double tr = 0.0;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) tr += a[i][j] * b[i][j];
    return std::acos(std::clamp((tr - 1.0) / 2.0, -1.0, 1.0));
}

std::string_view to_string(StateGroup g) {
    switch (g) {
        case StateGroup::position: return "p";
        case StateGroup::velocity: return "v";
        case StateGroup::attitude: return "R";
        case StateGroup::rates: return "omega";
    }
    return "?";
}

double mee(std::span<const Vec<double, 3>> truth, std::span<const Vec<double, 3>> pred, StateGroup g) {
    if (truth.size() != pred.size() || truth.empty()) throw std::invalid_argument("mee needs matching windows");
    double acc = 0.0;
    for (std::size_t w = 0; w < truth.size(); ++w) {
        if (g == StateGroup::attitude) {
            Vec<double, 3> a, b;
            for (std::size_t i = 0; i < 3; ++i) {
                a[i] = wrap_angle(truth[w][i]);
                b[i] = wrap_angle(pred[w][i]);
            }
            acc += geodesic_distance(euler_to_rotation(a), euler_to_rotation(b));
        } else {
            double s = 0.0;
            for (std::size_t i = 0; i < 3; ++i) {
                const double e = truth[w][i] - pred[w][i];
                s += e * e;
            }
            acc += std::sqrt(s);
        }
    }
    return acc / static_cast<double>(truth.size());
}

double cumulative_mee(std::span<const double> per_horizon) {
    double s = 0.0;
    for (double v : per_horizon) s += v;
    return s;
}

double MeeTable::cumulative(StateGroup g) const { return cumulative_mee(values.at(g)); }

std::size_t window_count(std::size_t length, std::size_t horizon) {
    if (horizon == 0) throw std::invalid_argument("horizon must be at least 1");
    return length == 0 ? 0 : (length - 1) / horizon;
}

namespace {

void check_io(const SequenceModel& model, const Trajectory& traj) {
    if (traj.num_inputs() != model.io().num_inputs || traj.num_outputs() != model.io().num_outputs)
        throw std::invalid_argument("trajectory channels do not match the model io signature");
}

// Last rows of the init windows: window j ends at row L-1 + j*H.
std::vector<std::size_t> window_ends(std::size_t T, std::size_t L, std::size_t H) {
    std::vector<std::size_t> ends;
    for (std::size_t s = L - 1; s + H < T; s += H) ends.push_back(s);
    return ends;
}

}  // namespace

std::vector<Matrix> windowed_rollout(const SequenceModel& model, const Trajectory& normalized, std::size_t H) {
    check_io(model, normalized);
    const std::size_t L = model.io().window_length;
    if (H == 0) throw std::invalid_argument("horizon must be at least 1");
    const auto ends = window_ends(normalized.length(), L, H);
    if (ends.empty()) throw std::invalid_argument("trajectory too short for one window");
    const std::size_t B = ends.size(), nu = normalized.num_inputs();
    Matrix windows(B, model.io().window_width());
    std::vector<Matrix> inputs(H, Matrix(B, nu));
    for (std::size_t b = 0; b < B; ++b) {
        const Matrix w = init_window(normalized, ends[b] + 1 - L, L);
        std::copy(w.data().begin(), w.data().end(), windows.row(b).begin());
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < nu; ++j) inputs[i](b, j) = normalized.inputs()(ends[b] + i, j);
    }
    return predict(model, windows, inputs);
}

double windowed_rollout_mae(const SequenceModel& model, const Trajectory& traj, std::size_t H,
                            const NormalizationStats& stats) {
    const Trajectory n = normalize(traj, stats);
    const auto pred = windowed_rollout(model, n, H);
    const auto ends = window_ends(n.length(), model.io().window_length, H);
    const std::size_t ny = n.num_outputs();
    double acc = 0.0;
    for (std::size_t h = 1; h <= H; ++h)
        for (std::size_t b = 0; b < ends.size(); ++b)
            for (std::size_t j = 0; j < ny; ++j) acc += std::abs(n.outputs()(ends[b] + h, j) - pred[h - 1](b, j));
    return acc / static_cast<double>(H * ends.size() * ny);
}

namespace {

MeeTable mee_from_predictions(const Trajectory& traj, const std::vector<Matrix>& physical, std::size_t L, std::size_t H) {
    const auto ends = window_ends(traj.length(), L, H);
    MeeTable t;
    t.horizon = H;
    for (std::size_t gi = 0; gi < 4; ++gi) {
        std::vector<double>& col = t.values[kStateGroups[gi]];
        for (std::size_t h = 1; h <= H; ++h) {
            std::vector<Vec<double, 3>> tr(ends.size()), pr(ends.size());
            for (std::size_t b = 0; b < ends.size(); ++b)
                for (std::size_t i = 0; i < 3; ++i) {
                    tr[b][i] = traj.outputs()(ends[b] + h, 3 * gi + i);
                    pr[b][i] = physical[h - 1](b, 3 * gi + i);
                }
            col.push_back(mee(tr, pr, kStateGroups[gi]));
        }
    }
    return t;
}

void check_members(std::span<const SequenceModel* const> models) {
    if (models.empty()) throw std::invalid_argument("need at least one model");
    for (const SequenceModel* m : models)
        if (m->io().window_length != models[0]->io().window_length)
            throw std::invalid_argument("averaged models must share the window length");
}

}  // namespace

MeeTable mee_table(const SequenceModel& model, const Trajectory& traj, std::size_t H, const NormalizationStats& stats) {
    if (traj.num_outputs() != 12) throw std::invalid_argument("MEE needs the 12-state drone layout");
    auto pred = windowed_rollout(model, normalize(traj, stats), H);
    for (Matrix& m : pred) m = denormalize_block(m, stats.outputs);
    return mee_from_predictions(traj, pred, model.io().window_length, H);
}

namespace {

// Physical-unit windowed predictions averaged over the models.
std::vector<Matrix> averaged_windowed_rollout(std::span<const SequenceModel* const> models, const Trajectory& traj,
                                              std::size_t H) {
    check_members(models);
    std::vector<Matrix> avg;
    for (const SequenceModel* m : models) {
        const auto pred = windowed_rollout(*m, normalize(traj, m->io().stats), H);
        if (avg.empty()) avg.assign(pred.size(), Matrix(pred[0].rows(), pred[0].cols()));
        for (std::size_t h = 0; h < pred.size(); ++h) {
            const Matrix phys = denormalize_block(pred[h], m->io().stats.outputs);
            for (std::size_t i = 0; i < phys.data().size(); ++i) avg[h].data()[i] += phys.data()[i];
        }
    }
    for (Matrix& m : avg)
        for (double& v : m.data()) v /= static_cast<double>(models.size());
    return avg;
}

}  // namespace

MeeTable mee_table(std::span<const SequenceModel* const> models, const Trajectory& traj, std::size_t H) {
    if (traj.num_outputs() != 12) throw std::invalid_argument("MEE needs the 12-state drone layout");
    return mee_from_predictions(traj, averaged_windowed_rollout(models, traj, H), models[0]->io().window_length, H);
}

double windowed_rollout_mae(std::span<const SequenceModel* const> models, const Trajectory& traj, std::size_t H,
                            const NormalizationStats& stats) {
    const auto avg = averaged_windowed_rollout(models, traj, H);
    const auto ends = window_ends(traj.length(), models[0]->io().window_length, H);
    const Trajectory n = normalize(traj, stats);
    const std::size_t ny = n.num_outputs();
    double acc = 0.0;
    for (std::size_t h = 1; h <= H; ++h) {
        const Matrix pred = normalize_block(avg[h - 1], stats.outputs);
        for (std::size_t b = 0; b < ends.size(); ++b)
            for (std::size_t j = 0; j < ny; ++j) acc += std::abs(n.outputs()(ends[b] + h, j) - pred(b, j));
    }
    return acc / static_cast<double>(H * ends.size() * ny);
}

Matrix open_loop(const SequenceModel& model, const Trajectory& normalized, const Segment& seg) {
    check_io(model, normalized);
    const std::size_t L = model.io().window_length;
    if (seg.body_begin - seg.window_begin != L || seg.body_end <= seg.body_begin || seg.body_end > normalized.length())
        throw std::invalid_argument("segment does not fit the model window or the trajectory");
    const Matrix window = init_window(normalized, seg.window_begin, L);
    std::vector<Matrix> inputs;
    inputs.reserve(seg.body_end - seg.body_begin);
    for (std::size_t k = seg.body_begin; k < seg.body_end; ++k)
        inputs.push_back(normalized.inputs().slice_rows(k - 1, k));
    const auto pred = predict(model, window, inputs);
    Matrix out(pred.size(), normalized.num_outputs());
    for (std::size_t i = 0; i < pred.size(); ++i)
        std::copy(pred[i].data().begin(), pred[i].data().end(), out.row(i).begin());
    return out;
}

double tank_test_rmse(const SequenceModel& model, const Trajectory& test, const NormalizationStats& stats,
                      std::size_t k0) {
    SequenceModel const* const one[] = {&model};
    if (stats == model.io().stats) return tank_test_rmse(one, test, k0);
    const std::size_t L = model.io().window_length;
    if (test.num_outputs() != 1) throw std::invalid_argument("tank test RMSE needs a single output");
    if (k0 <= L || k0 > test.length()) throw std::invalid_argument("k0 must lie after the init window");
    const Matrix pred = denormalize_block(open_loop(model, normalize(test, stats), Segment{0, 0, L, test.length()}),
                                          stats.outputs);
    std::vector<double> yhat(test.length());
    for (std::size_t k = 0; k < L; ++k) yhat[k] = test.outputs()(k, 0);
    for (std::size_t k = L; k < test.length(); ++k) yhat[k] = pred(k - L, 0);
    return rmse(test.outputs().data(), yhat, k0);
}

double tank_test_rmse(std::span<const SequenceModel* const> models, const Trajectory& test, std::size_t k0) {
    check_members(models);
    const std::size_t L = models[0]->io().window_length;
    if (test.num_outputs() != 1) throw std::invalid_argument("tank test RMSE needs a single output");
    if (k0 <= L || k0 > test.length()) throw std::invalid_argument("k0 must lie after the init window");
    std::vector<double> yhat(test.length(), 0.0);
    for (const SequenceModel* m : models) {
        const NormalizationStats& st = m->io().stats;
        const Matrix pred =
            denormalize_block(open_loop(*m, normalize(test, st), Segment{0, 0, L, test.length()}), st.outputs);
        for (std::size_t k = L; k < test.length(); ++k) yhat[k] += pred(k - L, 0);
    }
    for (std::size_t k = 0; k < L; ++k) yhat[k] = test.outputs()(k, 0);
    for (std::size_t k = L; k < test.length(); ++k) yhat[k] /= static_cast<double>(models.size());
    return rmse(test.outputs().data(), yhat, k0);
}

// ---------------------------------------------------------------------------

std::string MetricReport::to_json() const {
    const auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    json folds = json::array();
    for (double v : per_fold) folds.push_back(num(v));
    json j{{"metric", metric}, {"per_fold", folds}, {"aggregate", num(aggregate)}, {"protocol_hash", protocol_hash}};
    if (mee) {
        json m = json::object();
        for (const auto& [g, vals] : mee->values) {
            json per = json::object();
            for (std::size_t h = 1; h <= vals.size(); ++h) per[std::to_string(h)] = num(vals[h - 1]);
            m[std::string(to_string(g))] = {{"by_horizon", per}, {"cumulative", num(mee->cumulative(g))}};
        }
        j["mee"] = m;
    }
    return j.dump(2);
}

NormalizationStats fold_statistics(const EvalProtocol& protocol, std::size_t fold, std::span<const Trajectory> data) {
    std::vector<Trajectory> parts;
    for (const Segment& s : protocol.folds().at(fold).train)
        parts.push_back(data[s.trajectory].slice(s.window_begin, s.body_end));
    return compute_normalization(parts, protocol.normalize_inputs(), "fold " + std::to_string(fold + 1) + " train");
}

IoSignature protocol_io(const EvalProtocol& protocol, std::span<const Trajectory> data,
                        const NormalizationStats& stats) {
    IoSignature io;
    io.num_inputs = data[0].num_inputs();
    io.num_outputs = data[0].num_outputs();
    io.window_length = protocol.window_length();
    io.autoregressive = protocol.benchmark() == Benchmark::drone;
    io.sample_period = data[0].sample_period();
    io.stats = stats;
    return io;
}

double score_fold(const SequenceModel& model, const EvalProtocol& protocol, std::size_t fold,
                  std::span<const Trajectory> data, const NormalizationStats& stats) {
    double acc = 0.0;
    const auto& val = protocol.folds().at(fold).validation;
    for (const Segment& s : val) {
        const Trajectory& t = data[s.trajectory];
        if (protocol.benchmark() == Benchmark::tank) {
            const Trajectory n = normalize(t, stats);
            const Matrix pred = open_loop(model, n, s);
            const Matrix truth = n.outputs().slice_rows(s.body_begin, s.body_end);
            acc += rmse(truth.data(), pred.data(), 1);
        } else {
            acc += windowed_rollout_mae(model, t.slice(s.window_begin, s.body_end), protocol.horizon(), stats);
        }
    }
    return acc / static_cast<double>(val.size());
}

TrainPlan default_plan(Benchmark b) {
    TrainPlan p;
    if (b == Benchmark::drone) {
        p.chunk_length = 50;
        p.batch_size = 16;
        p.epochs = 20;
    }
    return p;
}

namespace {

FoldOutcome run_fold(const SysIdConfiguration& cfg, const EvalProtocol& protocol, std::size_t k,
                     std::span<const Trajectory> data, std::optional<double> wall_budget) {
    FoldOutcome out;
    out.stats = fold_statistics(protocol, k, data);
    const IoSignature io = protocol_io(protocol, data, out.stats);
    const auto model = build_model(cfg, io);
    TrainPlan plan = plan_from_config(cfg, default_plan(protocol.benchmark()));
    if (wall_budget) plan.wall_budget_seconds = std::min(plan.wall_budget_seconds, *wall_budget);
    TrainingSet set;
    set.windowed = protocol.benchmark() == Benchmark::drone;
    for (const Segment& s : protocol.folds()[k].train)
        set.sequences.push_back(normalize(data[s.trajectory].slice(s.window_begin, s.body_end), out.stats));
    const NormalizationStats stats = out.stats;
    const Validator validator = [&protocol, k, data, stats](const SequenceModel& m) {
        return score_fold(m, protocol, k, data, stats);
    };
    out.training = train(*model, set, plan, validator, cfg.seed * 0x9E3779B97F4A7C15ull + k + 1);
    out.model = std::move(out.training.model);
    return out;
}

}  // namespace

CvResult cross_validation_score(const SysIdConfiguration& cfg, const EvalProtocol& protocol,
                                std::span<const Trajectory> data, std::size_t jobs,
                                std::optional<double> wall_budget) {
    validate_config(cfg);
    const std::size_t K = protocol.folds().size();
    for (const FoldSplit& f : protocol.folds())
        for (const auto* segs : {&f.train, &f.validation})
            for (const Segment& s : *segs)
                if (s.trajectory >= data.size() || s.body_end > data[s.trajectory].length())
                    throw std::invalid_argument("protocol refers to data that was not provided");
    for (std::size_t i = 0; i < data.size() && i < protocol.fingerprints().size(); ++i)
        if (trajectory_fingerprint(data[i]) != protocol.fingerprints()[i])
            throw std::invalid_argument("training data does not match the protocol fingerprints");

    CvResult res;
    res.folds.resize(K);
    if (jobs <= 1) {
        for (std::size_t k = 0; k < K; ++k) res.folds[k] = run_fold(cfg, protocol, k, data, wall_budget);
    } else {
        for (std::size_t b = 0; b < K; b += jobs) {
            std::vector<std::future<FoldOutcome>> running;
            for (std::size_t k = b; k < std::min(K, b + jobs); ++k)
                running.push_back(std::async(std::launch::async, run_fold, std::cref(cfg), std::cref(protocol), k, data, wall_budget));
            for (std::size_t i = 0; i < running.size(); ++i) res.folds[b + i] = running[i].get();
        }
    }

    res.report.metric = protocol.metric();
    res.report.protocol_hash = protocol.hash();
    for (std::size_t k = 0; k < K; ++k) {
        const TrainResult& t = res.folds[k].training;
        res.report.per_fold.push_back(t.best_metric);
        if (t.status == TrialStatus::numeric_failure && res.status != TrialStatus::numeric_failure) {
            res.status = TrialStatus::numeric_failure;
            res.failed_fold = k;
            res.failure = t.failure;
        } else if (t.stop == StopReason::budget && res.status == TrialStatus::ok) {
            res.status = TrialStatus::train_timeout;
        }
    }
    res.report.aggregate = arithmetic_mean(res.report.per_fold);
    return res;
}

MetricReport naive_predictor_score(std::span<const Trajectory> data, const EvalProtocol& protocol) {
    MetricReport r;
    r.metric = protocol.metric();
    r.protocol_hash = protocol.hash();
    for (std::size_t k = 0; k < protocol.folds().size(); ++k) {
        const NormalizationStats stats = fold_statistics(protocol, k, data);
        const auto naive = make_naive_model(protocol_io(protocol, data, stats));
        r.per_fold.push_back(score_fold(*naive, protocol, k, data, stats));
    }
    r.aggregate = arithmetic_mean(r.per_fold);
    return r;
}

// ---------------------------------------------------------------------------

namespace {
const std::vector<std::string>& mee_columns() {
    static const std::vector<std::string> cols = [] {
        std::vector<std::string> c;
        for (StateGroup g : kStateGroups)
            for (const char* s : {"h10", "h50", "sum"}) c.push_back(std::string(to_string(g)) + "_" + s);
        return c;
    }();
    return cols;
}
}  // namespace

MeeRow mee_row(const std::string& name, const MeeTable& table) {
    MeeRow row{name, {}};
    for (StateGroup g : kStateGroups) {
        const std::string p(to_string(g));
        if (table.horizon >= 10) row.cells[p + "_h10"] = table.at(g, 10);
        if (table.horizon >= 50) row.cells[p + "_h50"] = table.at(g, 50);
        row.cells[p + "_sum"] = table.cumulative(g);
    }
    return row;
}

std::string mee_table_csv(const std::vector<MeeRow>& rows) {
    std::ostringstream os;
    os << "model";
    for (const auto& c : mee_columns()) os << ',' << c;
    os << '\n';
    for (const MeeRow& r : rows) {
        if (r.model.find_first_of(",\"\n") != std::string::npos)
            throw std::invalid_argument("model names in the MEE table cannot contain commas, quotes or newlines");
        os << r.model;
        for (const auto& c : mee_columns()) {
            os << ',';
            const auto it = r.cells.find(c);
            if (it != r.cells.end()) os << format_double(it->second);
        }
        os << '\n';
    }
    return os.str();
}

MeeRow published_naive_reference() { return MeeRow{"naive (published reference)", {{"p_h50", 0.680}}}; }

}  // namespace sysid
