#pragma once

// Forward-mode dual numbers with N tangent directions. The physics kernels in
// simulate.hpp are templates over the scalar type; instantiating them with
// Dual<N> yields exact Jacobians for the custom autodiff primitives.

#include <array>
#include <cmath>
#include <cstddef>

namespace sysid {

template <std::size_t N>
struct Dual {
    double v = 0.0;
    std::array<double, N> d{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)

    static Dual variable(double value, std::size_t index) {
        Dual x(value);
        x.d[index] = 1.0;
        return x;
    }

    Dual& operator+=(const Dual& o) {
        v += o.v;
        for (std::size_t i = 0; i < N; ++i) d[i] += o.d[i];
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v -= o.v;
        for (std::size_t i = 0; i < N; ++i) d[i] -= o.d[i];
        return *this;
    }
    Dual& operator*=(const Dual& o) { return *this = *this * o; }
    Dual& operator/=(const Dual& o) { return *this = *this / o; }

    friend Dual operator+(Dual a, const Dual& b) { return a += b; }
    friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
    friend Dual operator-(const Dual& a) {
        Dual r;
        r.v = -a.v;
        for (std::size_t i = 0; i < N; ++i) r.d[i] = -a.d[i];
        return r;
    }
    friend Dual operator*(const Dual& a, const Dual& b) {
        Dual r;
        r.v = a.v * b.v;
        for (std::size_t i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
        return r;
    }
    friend Dual operator/(const Dual& a, const Dual& b) {
        Dual r;
        r.v = a.v / b.v;
        const double inv = 1.0 / (b.v * b.v);
        for (std::size_t i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) * inv;
        return r;
    }

    friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
    friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
    friend bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
    friend bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
};

template <std::size_t N>
Dual<N> chain(const Dual<N>& a, double value, double deriv) {
    Dual<N> r(value);
    for (std::size_t i = 0; i < N; ++i) r.d[i] = deriv * a.d[i];
    return r;
}

template <std::size_t N>
Dual<N> sin(const Dual<N>& a) { return chain(a, std::sin(a.v), std::cos(a.v)); }
template <std::size_t N>
Dual<N> cos(const Dual<N>& a) { return chain(a, std::cos(a.v), -std::sin(a.v)); }
template <std::size_t N>
Dual<N> tan(const Dual<N>& a) {
    const double c = std::cos(a.v);
    return chain(a, std::tan(a.v), 1.0 / (c * c));
}
template <std::size_t N>
Dual<N> sqrt(const Dual<N>& a) {
    const double s = std::sqrt(a.v);
    return chain(a, s, s > 0.0 ? 0.5 / s : 0.0);
}

inline double value_of(double x) { return x; }
template <std::size_t N>
double value_of(const Dual<N>& x) { return x.v; }

}  // namespace sysid
