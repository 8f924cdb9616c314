#include "sysid/simulate.hpp"

#include <algorithm>
#include <random>

namespace sysid {

void TankParams::validate() const {
    for (double k : {k1, k2, k3, k4})
        if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("tank.k", "tank coefficients must be positive");
    if (!(level_max > 0.0) || !std::isfinite(level_max)) throw ConfigError("tank.level_max", "must be positive");
}

Vec<double, 2> tank_derivative(const Vec<double, 2>& state, double input, const TankParams& params) {
    if (!std::isfinite(state[0]) || !std::isfinite(state[1]) || !std::isfinite(input))
        throw std::invalid_argument("tank_derivative: non-finite argument");
    return tank_rhs<double>(state, input, {params.k1, params.k2, params.k3, params.k4}, params.level_max,
                            params.overflow_coupling);
}

Matrix simulate_tank_states(const TankParams& params, const std::vector<double>& input_signal, double sample_period,
                            const Vec<double, 2>& x0) {
    params.validate();
    if (!(sample_period > 0.0)) throw std::invalid_argument("sample period must be positive");
    if (input_signal.empty()) throw std::invalid_argument("input signal is empty");
    for (double v : x0)
        if (!(v >= 0.0 && v <= params.level_max)) throw std::invalid_argument("initial levels outside [0, level_max]");
    const Vec<double, 4> k{params.k1, params.k2, params.k3, params.k4};
    Matrix states(input_signal.size(), 2);
    Vec<double, 2> x = x0;
    for (std::size_t i = 0; i < input_signal.size(); ++i) {
        states(i, 0) = x[0];
        states(i, 1) = x[1];
        if (!std::isfinite(input_signal[i])) throw NumericFailure("non-finite tank input", i);
        x = tank_step<double>(x, input_signal[i], k, params.level_max, params.overflow_coupling, sample_period);
        if (!std::isfinite(x[0]) || !std::isfinite(x[1])) throw NumericFailure("tank simulation diverged", i + 1);
    }
    return states;
}

Trajectory simulate_tank(const TankParams& params, const std::vector<double>& input_signal, double sample_period,
                         const Vec<double, 2>& x0, double noise_sigma, std::uint64_t noise_seed) {
    Matrix states = simulate_tank_states(params, input_signal, sample_period, x0);
    const std::size_t T = input_signal.size();
    Matrix u(T, 1, input_signal), y(T, 1);
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < T; ++i) {
        y(i, 0) = states(i, 1);
        if (noise_sigma > 0.0) y(i, 0) += noise_sigma * noise(rng);
    }
    return Trajectory(sample_period, std::move(u), std::move(y), {"u"}, {"y"});
}

// ---------------------------------------------------------------------------

void DroneParams::validate() const {
    if (!(mass > 0.0)) throw ConfigError("drone.mass", "must be positive");
    for (double j : inertia)
        if (!(j > 0.0)) throw ConfigError("drone.inertia", "diagonal entries must be positive");
    if (!(thrust_coefficient > 0.0)) throw ConfigError("drone.thrust_coefficient", "must be positive");
    if (!(arm_length > 0.0)) throw ConfigError("drone.arm_length", "must be positive");
    if (!(drag_to_thrust > 0.0)) throw ConfigError("drone.drag_to_thrust", "must be positive");
}

double DroneParams::hover_speed() const { return std::sqrt(mass * gravity / (4.0 * thrust_coefficient)); }

namespace {
Mat3 to_mat3(const std::array<Vec<double, 3>, 3>& m) {
    Mat3 out;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) out[i][j] = m[i][j];
    return out;
}
}  // namespace

Mat3 euler_to_rotation(const Vec<double, 3>& angles) { return to_mat3(euler_rotation<double>(angles)); }

Mat3 euler_rate_matrix(const Vec<double, 3>& angles) { return to_mat3(euler_rates<double>(angles)); }

Vec<double, 12> drone_derivative(const Vec<double, 12>& state, const Vec<double, 4>& input, const DroneParams& params) {
    return drone_rhs<double>(state, input, params);
}

const std::vector<std::string>& drone_state_names() {
    static const std::vector<std::string> names{"px", "py", "pz", "vx", "vy", "vz",
                                                "roll", "pitch", "yaw", "wx", "wy", "wz"};
    return names;
}

const std::vector<std::string>& drone_input_names() {
    static const std::vector<std::string> names{"u1", "u2", "u3", "u4"};
    return names;
}

namespace {

// Corrections in squared-speed units from the stabilizer's thrust and
// torque demands, using the inverse of the (row-orthogonal) mixing matrix.
Vec<double, 4> stabilizer_correction(const Vec<double, 12>& x, const Vec<double, 12>& reference,
                                     const DroneParams& p, const DroneStabilizer& s) {
    const double ax = -s.kp_position * (x[0] - reference[0]) - s.kd_position * x[3];
    const double ay = -s.kp_position * (x[1] - reference[1]) - s.kd_position * x[4];
    const double az = -s.kp_altitude * (x[2] - reference[2]) - s.kd_altitude * x[5];
    const double yaw = x[8];
    // Small-angle inversion of the thrust direction in a yaw-aligned frame.
    const double ax_b = std::cos(yaw) * ax + std::sin(yaw) * ay;
    const double ay_b = -std::sin(yaw) * ax + std::cos(yaw) * ay;
    const double pitch_ref = std::clamp(ax_b / p.gravity, -s.max_tilt, s.max_tilt);
    const double roll_ref = std::clamp(-ay_b / p.gravity, -s.max_tilt, s.max_tilt);
    const double yaw_ref = reference[8];

    const double dF = p.mass * az;
    const Vec<double, 3> err{roll_ref - x[6], pitch_ref - x[7], yaw_ref - x[8]};
    Vec<double, 3> tau;
    for (std::size_t i = 0; i < 3; ++i) tau[i] = p.inertia[i] * (s.kp_attitude * err[i] - s.kd_attitude * x[9 + i]);

    const double a = p.arm_length / std::numbers::sqrt2;
    const double kappa = p.drag_to_thrust;
    const std::array<Vec<double, 4>, 3> sign{{{-1, -1, 1, 1}, {-1, 1, 1, -1}, {-1, 1, -1, 1}}};
    Vec<double, 4> out;
    for (std::size_t i = 0; i < 4; ++i) {
        const double f = dF / 4.0 + sign[0][i] * tau[0] / (4.0 * a) + sign[1][i] * tau[1] / (4.0 * a) +
                         sign[2][i] * tau[2] / (4.0 * kappa);
        out[i] = f / p.thrust_coefficient;
    }
    return out;
}

}  // namespace

Trajectory simulate_drone(const DroneParams& params, const Matrix& excitation, double sample_period,
                          const Vec<double, 12>& x0, const DroneSimOptions& options) {
    params.validate();
    if (!(sample_period > 0.0)) throw std::invalid_argument("sample period must be positive");
    if (excitation.cols() != 4) throw std::invalid_argument("drone excitation needs 4 channels");
    if (excitation.rows() == 0) throw std::invalid_argument("drone excitation is empty");
    const std::size_t T = excitation.rows();
    Matrix u(T, 4), y(T, 12);
    std::mt19937_64 rng(options.noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    Vec<double, 12> x = x0;
    for (std::size_t k = 0; k < T; ++k) {
        for (std::size_t i = 0; i < 12; ++i) {
            if (!std::isfinite(x[i]) || std::abs(x[i]) > options.state_bound)
                throw NumericFailure("drone state left the configured bound", k);
        }
        if (std::abs(x[7]) >= std::numbers::pi / 2.0 - kGimbalMargin)
            throw NumericFailure("drone attitude reached gimbal lock", k);
        Vec<double, 4> cmd;
        for (std::size_t i = 0; i < 4; ++i) cmd[i] = excitation(k, i);
        if (options.stabilizer) {
            const auto corr = stabilizer_correction(x, x0, params, *options.stabilizer);
            for (std::size_t i = 0; i < 4; ++i) {
                const double sq = std::max(cmd[i] * cmd[i] + corr[i], 0.0);
                cmd[i] = std::min(std::sqrt(sq), options.stabilizer->max_speed);
            }
        }
        for (std::size_t i = 0; i < 4; ++i) {
            if (!(cmd[i] >= 0.0)) throw NumericFailure("negative rotor speed", k);
            u(k, i) = cmd[i];
        }
        for (std::size_t i = 0; i < 12; ++i) {
            y(k, i) = x[i];
            if (options.noise_sigma > 0.0) y(k, i) += options.noise_sigma * noise(rng);
        }
        x = drone_step<double>(x, cmd, params, sample_period);
    }
    return Trajectory(sample_period, std::move(u), std::move(y), drone_input_names(), drone_state_names());
}

// ---------------------------------------------------------------------------

std::string_view to_string(ExcitationKind k) {
    switch (k) {
        case ExcitationKind::chirp: return "chirp";
        case ExcitationKind::random: return "random";
        case ExcitationKind::square: return "square";
        case ExcitationKind::constant: return "constant";
    }
    return "unknown";
}

std::optional<ExcitationKind> excitation_kind_from_string(std::string_view s) {
    for (auto k : {ExcitationKind::chirp, ExcitationKind::random, ExcitationKind::square, ExcitationKind::constant})
        if (to_string(k) == s) return k;
    return std::nullopt;
}

void ExcitationSpec::validate() const {
    if (!(amplitude_low <= amplitude_high)) throw ConfigError("excitation.amplitude", "low must not exceed high");
    if (duration_samples < 1) throw ConfigError("excitation.duration_samples", "must be at least 1");
    if (hold_samples < 1) throw ConfigError("excitation.hold_samples", "must be at least 1");
    if (kind == ExcitationKind::chirp) {
        if (!(sample_period > 0.0)) throw ConfigError("excitation.sample_period", "must be positive");
        if (!(chirp_f0 >= 0.0 && chirp_f1 > chirp_f0)) throw ConfigError("excitation.chirp", "need 0 <= f0 < f1");
    }
}

Matrix generate_excitation(const ExcitationSpec& spec, std::size_t channels) {
    spec.validate();
    const std::size_t T = spec.duration_samples;
    const double mid = 0.5 * (spec.amplitude_low + spec.amplitude_high);
    const double half = 0.5 * (spec.amplitude_high - spec.amplitude_low);
    Matrix out(T, channels);
    for (std::size_t c = 0; c < channels; ++c) {
        switch (spec.kind) {
            case ExcitationKind::constant:
                for (std::size_t k = 0; k < T; ++k) out(k, c) = mid;
                break;
            case ExcitationKind::chirp: {
                const double duration = static_cast<double>(T) * spec.sample_period;
                const double rate = (spec.chirp_f1 - spec.chirp_f0) / duration;
                const double phase = static_cast<double>(c) * std::numbers::pi / 2.0;
                for (std::size_t k = 0; k < T; ++k) {
                    const double t = static_cast<double>(k) * spec.sample_period;
                    out(k, c) = mid + half * std::sin(2.0 * std::numbers::pi * (spec.chirp_f0 * t + 0.5 * rate * t * t) +
                                                      phase);
                }
                break;
            }
            case ExcitationKind::random: {
                std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + c);
                std::uniform_real_distribution<double> dist(spec.amplitude_low, spec.amplitude_high);
                double v = 0.0;
                for (std::size_t k = 0; k < T; ++k) {
                    if (k % spec.hold_samples == 0) v = spec.amplitude_low == spec.amplitude_high ? mid : dist(rng);
                    out(k, c) = v;
                }
                break;
            }
            case ExcitationKind::square: {
                std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ULL + c);
                const std::size_t offset = channels > 1 ? rng() % (2 * spec.hold_samples) : 0;
                for (std::size_t k = 0; k < T; ++k) {
                    const bool high = ((k + offset) / spec.hold_samples) % 2 == 0;
                    out(k, c) = high ? spec.amplitude_high : spec.amplitude_low;
                }
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

TankDataset make_tank_dataset(const TankParams& params, std::uint64_t seed, double noise_sigma) {
    ExcitationSpec spec;
    spec.kind = ExcitationKind::random;
    spec.amplitude_low = 1.0;
    spec.amplitude_high = 9.0;
    spec.duration_samples = 1024;
    spec.hold_samples = 20;
    spec.sample_period = 4.0;
    const auto run = [&](std::uint64_t s) {
        spec.seed = s;
        return simulate_tank(params, generate_excitation(spec).data(), 4.0, {3.0, 3.0}, noise_sigma, s ^ 0x5EEDull);
    };
    return {run(seed), run(seed + 0x9E3779B97F4A7C15ull)};
}

DroneDataset make_drone_dataset(const DroneParams& params, std::uint64_t seed, std::size_t train_length,
                                std::size_t test_length) {
    const double hover = params.hover_speed();
    ExcitationSpec spec;
    spec.amplitude_low = 0.9 * hover;
    spec.amplitude_high = 1.1 * hover;
    spec.sample_period = 0.01;
    spec.chirp_f0 = 0.05;
    spec.chirp_f1 = 5.0;
    DroneSimOptions opt;
    opt.stabilizer = DroneStabilizer{};
    const auto run = [&](ExcitationKind kind, std::size_t length, std::size_t hold, std::uint64_t s) {
        spec.kind = kind;
        spec.duration_samples = length;
        spec.hold_samples = hold;
        spec.seed = s;
        return simulate_drone(params, generate_excitation(spec, 4), 0.01, Vec<double, 12>{}, opt);
    };
    DroneDataset d{{}, run(ExcitationKind::random, test_length, 15, seed + 4)};
    d.train.push_back(run(ExcitationKind::chirp, train_length, 1, seed + 1));
    d.train.push_back(run(ExcitationKind::random, train_length, 20, seed + 2));
    d.train.push_back(run(ExcitationKind::square, train_length, 50, seed + 3));
    return d;
}

}  // namespace sysid
