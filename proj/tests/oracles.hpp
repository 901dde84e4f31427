#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they are used to check.

#include <cmath>
#include <functional>
#include <vector>

#include "tsexplain/tensor.hpp"

namespace oracles {

// erf on long double: Maclaurin series for small |x|, Lentz continued
// fraction for the complement elsewhere. Good to ~1e-17 absolute.
inline long double erf_ref(long double x) {
    const long double ax = fabsl(x);
    const long double two_over_sqrt_pi = 1.1283791670955125738961589031215452L;
    if (ax < 2.0L) {
        long double term = x, sum = x;
        for (int n = 1; n < 200; ++n) {
            term *= -x * x / n;
            const long double add = term / (2 * n + 1);
            sum += add;
            if (fabsl(add) < 1e-22L * fabsl(sum)) break;
        }
        return two_over_sqrt_pi * sum;
    }
    // erfc(ax) = exp(-ax^2)/sqrt(pi) * K, with K the continued fraction
    // 1/(ax + (1/2)/(ax + 1/(ax + (3/2)/(ax + ...)))), evaluated backward.
    long double f = ax;
    for (int n = 80; n >= 1; --n) f = ax + (n / 2.0L) / f;
    f = 1.0L / f;
    const long double erfc = expl(-ax * ax) / sqrtl(3.14159265358979323846264338327950288L) * f;
    const long double r = 1.0L - erfc;
    return x >= 0 ? r : -r;
}

// Central finite-difference gradient of a scalar function of flat inputs.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double rel_err(double a, double b) {
    const double m = std::max({std::fabs(a), std::fabs(b), 1e-6});
    return std::fabs(a - b) / m;
}

// Kahan-compensated long double sum, for high-precision metric oracles.
struct KahanLD {
    long double sum = 0.0L, comp = 0.0L;
    void add(long double v) {
        const long double y = v - comp;
        const long double t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
};

}  // namespace oracles
