#pragma once

// Independent reference computations used by the unit and acceptance suites.
// Nothing here calls the code path it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Eigenvalues>

#include "nql/relu_net.hpp"

namespace nql::oracle {

/// Central differences of forward() in every flat coordinate.
inline Vector finite_difference_gradient(const Theta& theta, const Vector& x, double h = 1e-5) {
    Vector g(theta.flat.size());
    Theta probe = theta;
    for (Eigen::Index i = 0; i < theta.flat.size(); ++i) {
        const double keep = probe.flat[i];
        probe.flat[i] = keep + h;
        const double up = forward(probe, x);
        probe.flat[i] = keep - h;
        const double down = forward(probe, x);
        probe.flat[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// max_i |a_i - b_i| / max_i |b_i|, with b the reference.
inline double max_relative_error(const Vector& a, const Vector& reference) {
    const double scale = std::max(reference.cwiseAbs().maxCoeff(), 1e-12);
    return (a - reference).cwiseAbs().maxCoeff() / scale;
}

inline double min_eigenvalue(const Matrix& m) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

/// sup{alpha : a - alpha * gamma^2 * b is positive definite} by bisection on
/// the smallest eigenvalue. Returns +inf when feasible up to `cap`.
inline double regularity_bisection(const Matrix& a, const Matrix& b, double gamma, double cap = 1e12,
                                   double tol = 1e-13) {
    auto feasible = [&](double alpha) { return min_eigenvalue(a - alpha * gamma * gamma * b) > 0.0; };
    if (!feasible(0.0)) return 0.0;
    if (feasible(cap)) return std::numeric_limits<double>::infinity();
    double lo = 0.0, hi = 1.0;
    while (feasible(hi)) {
        lo = hi;
        hi *= 2.0;
    }
    while (hi - lo > tol * std::max(1.0, hi)) {
        const double mid = 0.5 * (lo + hi);
        (feasible(mid) ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace nql::oracle
