#pragma once

// Synthetic data generation: the cascaded two-tank plant, the quadrotor
// rigid-body plant, and excitation signal generators. The right-hand sides
// and RK4 steps are templates over the scalar type so the model zoo can reuse
// them with dual numbers for exact Jacobians.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sysid/datamodel.hpp"
#include "sysid/dual.hpp"

namespace sysid {

template <typename T, std::size_t N>
using Vec = std::array<T, N>;
using Mat3 = std::array<std::array<double, 3>, 3>;

/// Classic fixed-step fourth-order Runge-Kutta step for x' = f(x).
template <typename T, std::size_t N, typename F>
Vec<T, N> rk4_step(const F& f, const Vec<T, N>& x, double h) {
    auto axpy = [](const Vec<T, N>& a, double s, const Vec<T, N>& b) {
        Vec<T, N> r;
        for (std::size_t i = 0; i < N; ++i) r[i] = a[i] + T(s) * b[i];
        return r;
    };
    const Vec<T, N> k1 = f(x);
    const Vec<T, N> k2 = f(axpy(x, 0.5 * h, k1));
    const Vec<T, N> k3 = f(axpy(x, 0.5 * h, k2));
    const Vec<T, N> k4 = f(axpy(x, h, k3));
    Vec<T, N> out;
    for (std::size_t i = 0; i < N; ++i) out[i] = x[i] + T(h / 6.0) * (k1[i] + T(2.0) * k2[i] + T(2.0) * k3[i] + k4[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Cascaded tanks

struct TankParams {
    double k1 = 0.10;
    double k2 = 0.10;
    double k3 = 0.09;
    double k4 = 0.052;
    double level_max = 10.0;
    bool overflow_coupling = true;

    void validate() const;
};

/// sqrt(max(x, 0)); zero derivative at and below zero.
template <typename T>
T guarded_sqrt(const T& x) {
    using std::sqrt;
    return x > T(0.0) ? sqrt(x) : T(0.0);
}

/// Right-hand side of the tank ODE with coefficient vector k = (k1..k4).
/// With overflow coupling, an upper tank at its ceiling passes any positive
/// net inflow straight to the lower tank.
template <typename T>
Vec<T, 2> tank_rhs(const Vec<T, 2>& x, const T& u, const Vec<T, 4>& k, double level_max, bool overflow) {
    const T s1 = guarded_sqrt(x[0]);
    const T s2 = guarded_sqrt(x[1]);
    T dx1 = -k[0] * s1 + k[3] * u;
    T dx2 = k[1] * s1 - k[2] * s2;
    if (overflow && x[0] >= T(level_max) && dx1 > T(0.0)) {
        dx2 += dx1;
        dx1 = T(0.0);
    }
    return {dx1, dx2};
}

/// One RK4 step with the post-step clamp of both levels into [0, level_max].
template <typename T>
Vec<T, 2> tank_step(const Vec<T, 2>& x, const T& u, const Vec<T, 4>& k, double level_max, bool overflow, double h) {
    auto f = [&](const Vec<T, 2>& s) { return tank_rhs(s, u, k, level_max, overflow); };
    Vec<T, 2> next = rk4_step<T, 2>(f, x, h);
    for (auto& v : next) {
        if (v < T(0.0)) v = T(0.0);
        if (v > T(level_max)) v = T(level_max);
    }
    return next;
}

/// Double-precision ODE right-hand side; rejects non-finite arguments.
Vec<double, 2> tank_derivative(const Vec<double, 2>& state, double input, const TankParams& params);

/// Simulates the tank from x0 under `input_signal` (one value per sample).
/// Row k holds u_k and y_k = x2_k (+ optional Gaussian noise); the state is
/// advanced with x_{k+1} = clamp(RK4(x_k, u_k)).
Trajectory simulate_tank(const TankParams& params, const std::vector<double>& input_signal, double sample_period,
                         const Vec<double, 2>& x0, double noise_sigma = 0.0, std::uint64_t noise_seed = 0);

/// Same integration, returning both levels per sample (T x 2).
Matrix simulate_tank_states(const TankParams& params, const std::vector<double>& input_signal, double sample_period,
                            const Vec<double, 2>& x0);

// ---------------------------------------------------------------------------
// Quadrotor

struct DroneParams {
    double mass = 0.032;
    std::array<double, 3> inertia{1.4e-5, 1.4e-5, 2.2e-5};
    double gravity = 9.81;
    /// Thrust per squared rotor speed; rotor speeds are in krad/s, so hover
    /// sits near 2 krad/s with these defaults.
    double thrust_coefficient = 0.0196;
    double arm_length = 0.033;
    double drag_to_thrust = 0.006;

    void validate() const;
    double hover_speed() const;
};

inline constexpr double kGimbalMargin = 1e-3;

/// Thrown when pitch is within kGimbalMargin of +-pi/2.
class GimbalLockError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Body-to-inertial rotation for ZYX (yaw-pitch-roll) Euler angles
/// (roll, pitch, yaw).
template <typename T>
std::array<Vec<T, 3>, 3> euler_rotation(const Vec<T, 3>& a) {
    using std::cos;
    using std::sin;
    const T cr = cos(a[0]), sr = sin(a[0]);
    const T cp = cos(a[1]), sp = sin(a[1]);
    const T cy = cos(a[2]), sy = sin(a[2]);
    return {{{cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr},
             {sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr},
             {-sp, cp * sr, cp * cr}}};
}

/// Maps body angular velocity to Euler-angle rates.
template <typename T>
std::array<Vec<T, 3>, 3> euler_rates(const Vec<T, 3>& a) {
    using std::cos;
    using std::sin;
    using std::tan;
    if (std::abs(value_of(a[1])) >= std::numbers::pi / 2.0 - kGimbalMargin)
        throw GimbalLockError("pitch too close to +-pi/2 for Euler-rate kinematics");
    const T cr = cos(a[0]), sr = sin(a[0]);
    const T cp = cos(a[1]), tp = tan(a[1]);
    return {{{T(1.0), sr * tp, cr * tp}, {T(0.0), cr, -sr}, {T(0.0), sr / cp, cr / cp}}};
}

/// X-configuration mixing of rotor speeds into (roll, pitch, yaw) torques.
template <typename T>
Vec<T, 3> rotor_torques(const Vec<T, 4>& u, const DroneParams& p) {
    Vec<T, 4> f;
    for (std::size_t i = 0; i < 4; ++i) f[i] = T(p.thrust_coefficient) * u[i] * u[i];
    const double a = p.arm_length / std::numbers::sqrt2;
    return {T(a) * (-f[0] - f[1] + f[2] + f[3]), T(a) * (-f[0] + f[1] + f[2] - f[3]),
            T(p.drag_to_thrust) * (-f[0] + f[1] - f[2] + f[3])};
}

/// State layout: p (0..2), v (3..5), Euler angles (6..8), body rates (9..11).
template <typename T>
Vec<T, 12> drone_rhs(const Vec<T, 12>& x, const Vec<T, 4>& u, const DroneParams& p) {
    const Vec<T, 3> att{x[6], x[7], x[8]};
    const Vec<T, 3> w{x[9], x[10], x[11]};
    const auto R = euler_rotation(att);
    const auto E = euler_rates(att);
    T thrust(0.0);
    for (std::size_t i = 0; i < 4; ++i) thrust += T(p.thrust_coefficient) * u[i] * u[i];
    const Vec<T, 3> tau = rotor_torques(u, p);
    const Vec<T, 3> Jw{T(p.inertia[0]) * w[0], T(p.inertia[1]) * w[1], T(p.inertia[2]) * w[2]};
    const Vec<T, 3> gyro{w[1] * Jw[2] - w[2] * Jw[1], w[2] * Jw[0] - w[0] * Jw[2], w[0] * Jw[1] - w[1] * Jw[0]};

    Vec<T, 12> dx;
    for (std::size_t i = 0; i < 3; ++i) dx[i] = x[3 + i];
    for (std::size_t i = 0; i < 3; ++i) dx[3 + i] = R[i][2] * thrust / T(p.mass);
    dx[5] -= T(p.gravity);
    for (std::size_t i = 0; i < 3; ++i) dx[6 + i] = E[i][0] * w[0] + E[i][1] * w[1] + E[i][2] * w[2];
    for (std::size_t i = 0; i < 3; ++i) dx[9 + i] = (tau[i] - gyro[i]) / T(p.inertia[i]);
    return dx;
}

/// One RK4 step with the rotor speeds held constant over the interval.
template <typename T>
Vec<T, 12> drone_step(const Vec<T, 12>& x, const Vec<T, 4>& u, const DroneParams& p, double h) {
    auto f = [&](const Vec<T, 12>& s) { return drone_rhs(s, u, p); };
    return rk4_step<T, 12>(f, x, h);
}

Mat3 euler_to_rotation(const Vec<double, 3>& angles);
Mat3 euler_rate_matrix(const Vec<double, 3>& angles);
Vec<double, 12> drone_derivative(const Vec<double, 12>& state, const Vec<double, 4>& input, const DroneParams& params);

/// Cascaded PD stabilizer (position -> attitude -> torques) that keeps long
/// excitation runs airborne. Its corrections are added to the excitation in
/// squared-rotor-speed space; the recorded inputs are the applied speeds.
struct DroneStabilizer {
    double kp_position = 1.0;
    double kd_position = 1.5;
    double kp_altitude = 4.0;
    double kd_altitude = 3.0;
    double kp_attitude = 400.0;
    double kd_attitude = 28.0;
    double max_tilt = 0.3;
    double max_speed = 4.0;
};

struct DroneSimOptions {
    std::optional<DroneStabilizer> stabilizer;
    double noise_sigma = 0.0;
    std::uint64_t noise_seed = 0;
    /// Divergence bound on |state| components (position, velocity, rates).
    double state_bound = 1e3;
};

const std::vector<std::string>& drone_state_names();
const std::vector<std::string>& drone_input_names();

/// Simulates the quadrotor from x0. Row k holds the applied rotor speeds u_k
/// and the full state x_k; x_{k+1} = RK4(x_k, u_k). Throws NumericFailure with
/// the first offending sample index if the state leaves the bound.
Trajectory simulate_drone(const DroneParams& params, const Matrix& excitation, double sample_period,
                          const Vec<double, 12>& x0, const DroneSimOptions& options = {});

// ---------------------------------------------------------------------------
// Excitation

enum class ExcitationKind { chirp, random, square, constant };
std::string_view to_string(ExcitationKind k);
std::optional<ExcitationKind> excitation_kind_from_string(std::string_view s);

struct ExcitationSpec {
    ExcitationKind kind = ExcitationKind::random;
    double amplitude_low = 0.0;
    double amplitude_high = 1.0;
    std::size_t duration_samples = 1024;
    std::uint64_t seed = 0;
    /// Chirp sweep range (Hz) and the sampling period it is laid out on.
    double chirp_f0 = 0.01;
    double chirp_f1 = 1.0;
    double sample_period = 1.0;
    /// Random: samples each draw is held for. Square: samples per half period.
    std::size_t hold_samples = 1;

    void validate() const;
};

/// One column per channel. Channels are independent: random draws use
/// per-channel streams, chirps and squares use per-channel phase offsets.
Matrix generate_excitation(const ExcitationSpec& spec, std::size_t channels = 1);

// ---------------------------------------------------------------------------
// Synthetic benchmark data

struct TankDataset {
    Trajectory train;
    Trajectory test;
};

/// 1024-sample training and test runs (Ts = 4 s, levels starting at 3) under
/// held random pump voltages in [1, 9]; the test run uses its own stream.
TankDataset make_tank_dataset(const TankParams& params, std::uint64_t seed, double noise_sigma = 0.0);

struct DroneDataset {
    std::vector<Trajectory> train;
    Trajectory test;
};

/// Three stabilized training flights (chirp, random and square rotor
/// excitation around hover) and one random-excitation test flight, sampled
/// at 100 Hz.
DroneDataset make_drone_dataset(const DroneParams& params, std::uint64_t seed, std::size_t train_length = 18500,
                                std::size_t test_length = 19500);

}  // namespace sysid
