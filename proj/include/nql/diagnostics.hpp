#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include "nql/error.hpp"
#include "nql/mdp.hpp"
#include "nql/neural_q.hpp"
#include "nql/relu_net.hpp"

namespace nql {

// ---------------------------------------------------------------------------
// Linearized TD quantities
// ---------------------------------------------------------------------------

/// Linearized value of every state-action pair at a displacement theta - theta0.
inline Vector linearized_values(const LinearizedModel& model, const MdpSpec& mdp, const Vector& displacement) {
    Vector out(static_cast<Eigen::Index>(mdp.n_pairs()));
    for (std::size_t k = 0; k < mdp.n_pairs(); ++k)
        out[static_cast<Eigen::Index>(k)] = model.value_at_displacement(displacement, k);
    return out;
}

/// Model over the MDP's feature table, keyed by pair index.
inline LinearizedModel linearize_over(const Theta& theta0, const MdpSpec& mdp) {
    if (theta0.shape.d != mdp.feature_dim()) fail(ErrorKind::ShapeMismatch, "network input size differs from feature size");
    return LinearizedModel(theta0, mdp.features());
}

namespace detail {

inline double max_next_value(const MdpSpec& mdp, const Vector& values, StateId s) {
    double best = values[static_cast<Eigen::Index>(mdp.pair_index(s, 0))];
    for (ActionId b = 1; b < mdp.n_actions(); ++b)
        best = std::max(best, values[static_cast<Eigen::Index>(mdp.pair_index(s, b))]);
    return best;
}

inline Vector state_weights_or_stationary(const MdpSpec& mdp, const PolicySpec& policy, const Vector* weights) {
    return weights ? *weights : stationary_distribution(mdp, policy);
}

} // namespace detail

/// Delta_hat(s,a,s'; theta) from precomputed linearized values.
inline double linearized_td_error(const MdpSpec& mdp, const Vector& values, const Transition& tr) {
    return values[static_cast<Eigen::Index>(mdp.pair_index(tr.s, tr.a))] -
           (tr.r + mdp.gamma() * detail::max_next_value(mdp, values, tr.s_next));
}

/// m_t(theta) = Delta_hat(s_t,a_t,s_{t+1}; theta) * grad f(theta0; s_t,a_t).
inline Vector linearized_semi_gradient(const LinearizedModel& model, const MdpSpec& mdp, const Theta& theta,
                                       const Transition& tr) {
    const Vector values = linearized_values(model, mdp, theta.flat - model.theta0().flat);
    return linearized_td_error(mdp, values, tr) * model.anchor_gradient(mdp.pair_index(tr.s, tr.a));
}

/// E_{s',s}[Delta_hat] per pair: f_hat(s,a) - r(s,a) - gamma * sum_s' P(s'|s,a) max_b f_hat(s',b).
inline Vector expected_linearized_td(const MdpSpec& mdp, const Vector& values) {
    Vector vmax(static_cast<Eigen::Index>(mdp.n_states()));
    for (StateId s = 0; s < mdp.n_states(); ++s) vmax[static_cast<Eigen::Index>(s)] = detail::max_next_value(mdp, values, s);
    Vector out(static_cast<Eigen::Index>(mdp.n_pairs()));
    for (StateId s = 0; s < mdp.n_states(); ++s)
        for (ActionId a = 0; a < mdp.n_actions(); ++a) {
            const double* row = mdp.row(s, a);
            double cont = 0.0;
            for (StateId k = 0; k < mdp.n_states(); ++k) cont += row[k] * vmax[static_cast<Eigen::Index>(k)];
            const auto idx = static_cast<Eigen::Index>(mdp.pair_index(s, a));
            out[idx] = values[idx] - mdp.reward(s, a) - mdp.gamma() * cont;
        }
    return out;
}

/// Population map m_bar(theta) = E_{mu,pi,P}[Delta_hat * grad f(theta0; s,a)] as an exact finite sum.
/// State weights default to the stationary distribution of the learning policy.
inline Vector population_semi_gradient(const LinearizedModel& model, const MdpSpec& mdp, const PolicySpec& policy,
                                       const Theta& theta, const Vector* state_weights = nullptr) {
    require_same_shape(theta, model.theta0());
    const Vector w = pair_weights(mdp, policy, detail::state_weights_or_stationary(mdp, policy, state_weights));
    const Vector delta = expected_linearized_td(mdp, linearized_values(model, mdp, theta.flat - model.theta0().flat));
    Vector out = Vector::Zero(theta.flat.size());
    for (std::size_t k = 0; k < mdp.n_pairs(); ++k) {
        const double c = w[static_cast<Eigen::Index>(k)] * delta[static_cast<Eigen::Index>(k)];
        if (c != 0.0) out += c * model.anchor_gradient(k);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Second-moment matrices
// ---------------------------------------------------------------------------

struct SigmaPair {
    Matrix sigma_pi;
    std::optional<Matrix> sigma_star;
    std::vector<ActionId> greedy_actions; // b_max per state, when sigma_star is present
    bool exact = true;
    std::size_t n_samples = 0;
    double scale_m = 1.0;

    const Matrix& star() const {
        if (!sigma_star) fail(ErrorKind::DirectionMissing, "sigma_star needs a direction theta");
        return *sigma_star;
    }
};

/// b_max(s) = argmax_b |<grad f(theta0; s,b), direction>|, ties to the lowest action.
inline std::vector<ActionId> greedy_directions(const LinearizedModel& model, const MdpSpec& mdp, const Vector& direction) {
    std::vector<ActionId> out(mdp.n_states());
    for (StateId s = 0; s < mdp.n_states(); ++s) {
        Vector score(static_cast<Eigen::Index>(mdp.n_actions()));
        for (ActionId b = 0; b < mdp.n_actions(); ++b)
            score[static_cast<Eigen::Index>(b)] = std::abs(model.anchor_gradient(mdp.pair_index(s, b)).dot(direction));
        out[s] = argmax_lowest(score);
    }
    return out;
}

/// (1/m) sum_s mu(s) g(s,b(s)) g(s,b(s))^T for a fixed action pattern.
inline Matrix sigma_star_for_pattern(const LinearizedModel& model, const MdpSpec& mdp, const Vector& state_weights,
                                     const std::vector<ActionId>& pattern) {
    const auto P = model.theta0().flat.size();
    Matrix out = Matrix::Zero(P, P);
    for (StateId s = 0; s < mdp.n_states(); ++s) {
        const double w = state_weights[static_cast<Eigen::Index>(s)];
        if (w == 0.0) continue;
        const Vector& g = model.anchor_gradient(mdp.pair_index(s, pattern[s]));
        out.selfadjointView<Eigen::Lower>().rankUpdate(g, w);
    }
    out = out.selfadjointView<Eigen::Lower>();
    return out / static_cast<double>(model.theta0().shape.m);
}

/// Exact Sigma_pi and, given a direction, Sigma*_pi(direction).
inline SigmaPair estimate_sigma(const LinearizedModel& model, const MdpSpec& mdp, const PolicySpec& policy,
                                const Vector* direction = nullptr, const Vector* state_weights = nullptr) {
    const Vector mu = detail::state_weights_or_stationary(mdp, policy, state_weights);
    const Vector w = pair_weights(mdp, policy, mu);
    const auto P = model.theta0().flat.size();
    SigmaPair out;
    out.scale_m = static_cast<double>(model.theta0().shape.m);
    out.sigma_pi = Matrix::Zero(P, P);
    for (std::size_t k = 0; k < mdp.n_pairs(); ++k) {
        const double wk = w[static_cast<Eigen::Index>(k)];
        if (wk == 0.0) continue;
        out.sigma_pi.selfadjointView<Eigen::Lower>().rankUpdate(model.anchor_gradient(k), wk);
    }
    out.sigma_pi = out.sigma_pi.selfadjointView<Eigen::Lower>();
    out.sigma_pi /= out.scale_m;
    if (direction) {
        if (direction->size() != P) fail(ErrorKind::ShapeMismatch, "direction has wrong length");
        out.greedy_actions = greedy_directions(model, mdp, *direction);
        out.sigma_star = sigma_star_for_pattern(model, mdp, mu, out.greedy_actions);
    }
    return out;
}

inline SigmaPair estimate_sigma(const Theta& theta0, const MdpSpec& mdp, const PolicySpec& policy,
                                const Theta* direction = nullptr) {
    const LinearizedModel model = linearize_over(theta0, mdp);
    return estimate_sigma(model, mdp, policy, direction ? &direction->flat : nullptr);
}

/// Monte-Carlo cross-check: s ~ weights, a ~ pi(.|s), n independent draws.
inline SigmaPair estimate_sigma_monte_carlo(const LinearizedModel& model, const MdpSpec& mdp, const PolicySpec& policy,
                                            std::size_t n, Rng& rng, const Vector* state_weights = nullptr) {
    const Vector mu = detail::state_weights_or_stationary(mdp, policy, state_weights);
    // Counts per pair, then one rank update per distinct pair.
    std::vector<std::size_t> counts(mdp.n_pairs(), 0);
    for (std::size_t i = 0; i < n; ++i) {
        const StateId s = sample_categorical(mu, rng);
        const Eigen::RowVectorXd pi = policy.probabilities.row(static_cast<Eigen::Index>(s));
        const ActionId a = sample_categorical(pi.data(), mdp.n_actions(), rng);
        ++counts[mdp.pair_index(s, a)];
    }
    const auto P = model.theta0().flat.size();
    SigmaPair out;
    out.exact = false;
    out.n_samples = n;
    out.scale_m = static_cast<double>(model.theta0().shape.m);
    out.sigma_pi = Matrix::Zero(P, P);
    for (std::size_t k = 0; k < counts.size(); ++k)
        if (counts[k])
            out.sigma_pi.selfadjointView<Eigen::Lower>().rankUpdate(model.anchor_gradient(k),
                                                                   static_cast<double>(counts[k]) / static_cast<double>(n));
    out.sigma_pi = out.sigma_pi.selfadjointView<Eigen::Lower>();
    out.sigma_pi /= out.scale_m;
    return out;
}

// ---------------------------------------------------------------------------
// Regularity check
// ---------------------------------------------------------------------------

enum class RegularityStatus { Pass, Fail, Inconclusive };

inline std::string to_string(RegularityStatus s) {
    switch (s) {
    case RegularityStatus::Pass: return "PASS";
    case RegularityStatus::Fail: return "FAIL";
    case RegularityStatus::Inconclusive: return "INCONCLUSIVE";
    }
    return "?";
}

struct RegularityOptions {
    double safety_fraction = 0.95; // alpha used for beta is this fraction of the supremum
    /// Restrict both matrices to the range of Sigma_pi. Overparameterized
    /// networks always have a singular Sigma_pi, whose null space is invisible
    /// to every quantity built from gradients at theta0.
    bool restrict_to_range = false;
    double singular_tol = 1e-12;
    double range_rel_tol = 1e-10;
};

struct RegularityResult {
    RegularityStatus status = RegularityStatus::Inconclusive;
    double sup_alpha = 0.0;
    bool unbounded = false;
    double alpha_used = 0.0;
    double beta = 0.0; // 1 - alpha_used^{-1/2}; 0 unless the check passed
    double sigma_min_eig = 0.0;
    std::size_t reduced_dim = 0;
};

inline Matrix symmetrized(const Matrix& a) { return 0.5 * (a + a.transpose()); }

namespace detail {

inline RegularityResult finish_regularity(RegularityResult res, const RegularityOptions& opt) {
    if (res.unbounded) {
        res.status = RegularityStatus::Pass;
        res.sup_alpha = std::numeric_limits<double>::infinity();
        // No finite alpha constrains beta; any value in (0,1) is admissible.
        res.alpha_used = std::numeric_limits<double>::infinity();
        res.beta = 1.0;
        return res;
    }
    res.alpha_used = opt.safety_fraction * res.sup_alpha;
    if (res.sup_alpha > 1.0 && res.alpha_used > 1.0) {
        res.status = RegularityStatus::Pass;
        res.beta = 1.0 - 1.0 / std::sqrt(res.alpha_used);
    } else {
        res.status = RegularityStatus::Fail;
        res.beta = 0.0;
    }
    return res;
}

/// Largest generalized eigenvalue of B x = l A x with A positive definite.
inline double max_generalized_eig(const Matrix& b, const Matrix& a) {
    Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(b, a, Eigen::EigenvaluesOnly);
    if (ges.info() != Eigen::Success) fail(ErrorKind::NonConvergence, "generalized eigensolver failed");
    return ges.eigenvalues().maxCoeff();
}

/// Orthonormal basis of the numerical range of a PSD matrix.
struct RangeBasis {
    Matrix basis;
    double min_eig_full = 0.0;
};

inline RangeBasis range_basis(const Matrix& a, double rel_tol) {
    Eigen::SelfAdjointEigenSolver<Matrix> es(a);
    const Vector& ev = es.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < ev.size(); ++i)
        if (ev[i] > rel_tol * top) keep.push_back(i);
    RangeBasis out;
    out.min_eig_full = ev.minCoeff();
    out.basis.resize(a.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t j = 0; j < keep.size(); ++j) out.basis.col(static_cast<Eigen::Index>(j)) = es.eigenvectors().col(keep[j]);
    return out;
}

inline RegularityResult regularity_in_basis(const Matrix& a, const Matrix& b, const Matrix& basis, double gamma,
                                            double leak_tol) {
    RegularityResult res;
    res.reduced_dim = static_cast<std::size_t>(basis.cols());
    const Matrix ar = symmetrized(basis.transpose() * a * basis);
    const Matrix br = symmetrized(basis.transpose() * b * basis);
    // Mass of Sigma* outside the range of Sigma_pi makes every alpha > 0 infeasible.
    const double bnorm = b.norm();
    if (bnorm > 0.0 && (b - basis * br * basis.transpose()).norm() > leak_tol * bnorm) {
        res.sup_alpha = 0.0;
        return res;
    }
    const double top = br.size() ? max_generalized_eig(br, ar) : 0.0;
    if (!(top > 0.0)) {
        res.unbounded = true;
        return res;
    }
    res.sup_alpha = 1.0 / (gamma * gamma * top);
    return res;
}

} // namespace detail

/// sup{alpha : Sigma_pi - alpha gamma^2 Sigma* > 0} by generalized eigenvalues.
inline RegularityResult check_regularity(const SigmaPair& pair, double gamma, const RegularityOptions& opt = {}) {
    if (!(gamma > 0.0 && gamma < 1.0)) fail(ErrorKind::BadDiscount, "gamma must lie in (0,1)");
    const Matrix a = symmetrized(pair.sigma_pi);
    const Matrix b = symmetrized(pair.star());

    if (opt.restrict_to_range) {
        const auto rb = detail::range_basis(a, opt.range_rel_tol);
        if (rb.basis.cols() == 0) fail(ErrorKind::SigmaSingular, "Sigma_pi is zero");
        auto res = detail::regularity_in_basis(a, b, rb.basis, gamma, 1e-8);
        res.sigma_min_eig = rb.min_eig_full;
        return detail::finish_regularity(res, opt);
    }

    Eigen::SelfAdjointEigenSolver<Matrix> es(a, Eigen::EigenvaluesOnly);
    RegularityResult res;
    res.sigma_min_eig = es.eigenvalues().minCoeff();
    res.reduced_dim = static_cast<std::size_t>(a.rows());
    if (res.sigma_min_eig < opt.singular_tol)
        fail(ErrorKind::SigmaSingular, "Sigma_pi has min eigenvalue " + std::to_string(res.sigma_min_eig) +
                                           " (below 1e-12); the check is inconclusive");
    const double top = detail::max_generalized_eig(b, a);
    if (!(top > 0.0)) {
        res.unbounded = true;
    } else {
        res.sup_alpha = 1.0 / (gamma * gamma * top);
    }
    return detail::finish_regularity(res, opt);
}

namespace detail {

/// Anchor gradients of every pair in coordinates of an orthonormal basis of their span.
inline Matrix gradient_span_coordinates(const LinearizedModel& model, const MdpSpec& mdp) {
    const auto P = model.theta0().flat.size();
    const auto n = static_cast<Eigen::Index>(mdp.n_pairs());
    Matrix g(P, n);
    for (Eigen::Index k = 0; k < n; ++k) g.col(k) = model.anchor_gradient(static_cast<std::size_t>(k));
    Eigen::ColPivHouseholderQR<Matrix> qr(g);
    qr.setThreshold(1e-12);
    const Eigen::Index r = qr.rank();
    const Matrix upper = qr.matrixR().topRows(r).template triangularView<Eigen::Upper>();
    return upper * qr.colsPermutation().transpose();
}

inline Matrix weighted_gram(const Matrix& coords, const Vector& w, double m) {
    Matrix out = Matrix::Zero(coords.rows(), coords.rows());
    for (Eigen::Index k = 0; k < coords.cols(); ++k)
        if (w[k] != 0.0) out.selfadjointView<Eigen::Lower>().rankUpdate(coords.col(k), w[k]);
    out = out.selfadjointView<Eigen::Lower>();
    return out / m;
}

} // namespace detail

/// Nonzero spectrum of Sigma_pi, via the pair-space Gram matrix.
inline Vector sigma_spectrum(const LinearizedModel& model, const MdpSpec& mdp, const PolicySpec& policy,
                             const Vector* state_weights = nullptr, double rel_tol = 1e-10) {
    const Vector w = pair_weights(mdp, policy, detail::state_weights_or_stationary(mdp, policy, state_weights));
    const auto n = static_cast<Eigen::Index>(mdp.n_pairs());
    Matrix gram(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j <= i; ++j)
            gram(i, j) = gram(j, i) = std::sqrt(w[i] * w[j]) *
                                      model.anchor_gradient(std::size_t(i)).dot(model.anchor_gradient(std::size_t(j)));
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram / static_cast<double>(model.theta0().shape.m), Eigen::EigenvaluesOnly);
    const Vector& ev = es.eigenvalues();
    const double top = std::max(ev.maxCoeff(), 0.0);
    std::vector<double> keep;
    for (Eigen::Index i = ev.size(); i-- > 0;)
        if (ev[i] > rel_tol * top) keep.push_back(ev[i]);
    return Eigen::Map<const Vector>(keep.data(), static_cast<Eigen::Index>(keep.size()));
}

/// Regularity for every direction at once: the minimum supremum over all
/// greedy action patterns b(s), each giving one Sigma* matrix. Works in the
/// range of Sigma_pi, expressed in coordinates of the span of the anchor
/// gradients, so the cost does not grow with the parameter count.
inline RegularityResult check_regularity_all_directions(const LinearizedModel& model, const MdpSpec& mdp,
                                                        const PolicySpec& policy, const RegularityOptions& opt = {},
                                                        std::size_t max_patterns = 1u << 16) {
    const double n_patterns = std::pow(static_cast<double>(mdp.n_actions()), static_cast<double>(mdp.n_states()));
    if (n_patterns > static_cast<double>(max_patterns))
        fail(ErrorKind::InvalidArgument, "too many greedy action patterns to enumerate");
    const Vector mu = stationary_distribution(mdp, policy);
    const Vector w = pair_weights(mdp, policy, mu);
    const double m = static_cast<double>(model.theta0().shape.m);
    const Matrix coords = detail::gradient_span_coordinates(model, mdp);
    const Matrix a = detail::weighted_gram(coords, w, m);
    const auto rb = detail::range_basis(a, opt.range_rel_tol);
    if (rb.basis.cols() == 0) fail(ErrorKind::SigmaSingular, "Sigma_pi is zero");

    RegularityResult worst;
    worst.unbounded = true;
    std::vector<ActionId> pattern(mdp.n_states(), 0);
    for (;;) {
        Vector star_w = Vector::Zero(w.size());
        for (StateId s = 0; s < mdp.n_states(); ++s)
            star_w[static_cast<Eigen::Index>(mdp.pair_index(s, pattern[s]))] = mu[static_cast<Eigen::Index>(s)];
        const Matrix b = detail::weighted_gram(coords, star_w, m);
        auto res = detail::regularity_in_basis(a, b, rb.basis, mdp.gamma(), 1e-8);
        if (!res.unbounded && (worst.unbounded || res.sup_alpha < worst.sup_alpha)) worst = res;
        std::size_t i = 0;
        while (i < pattern.size() && ++pattern[i] == mdp.n_actions()) pattern[i++] = 0;
        if (i == pattern.size()) break;
    }
    const bool full_rank = coords.rows() == model.theta0().flat.size();
    worst.sigma_min_eig = full_rank ? rb.min_eig_full : 0.0;
    worst.reduced_dim = static_cast<std::size_t>(rb.basis.cols());
    return detail::finish_regularity(worst, opt);
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

struct MixingEstimate {
    double lambda = 0.0;
    double rho = 0.0;
    std::size_t tau_star = 0;
};

/// Smallest t >= 0 with lambda * rho^t <= eta_T.
inline std::size_t mixing_time_tau(double lambda, double rho, double eta_T) {
    if (!(rho > 0.0 && rho < 1.0) || !(lambda > 0.0) || !(eta_T > 0.0))
        fail(ErrorKind::InvalidArgument, "mixing_time_tau needs lambda > 0, rho in (0,1), eta_T > 0");
    auto ok = [&](std::size_t t) { return lambda * std::pow(rho, static_cast<double>(t)) <= eta_T; };
    // Start from the closed-form guess and correct for rounding either way.
    double guess = std::ceil(std::log(eta_T / lambda) / std::log(rho));
    std::size_t t = guess > 0.0 ? static_cast<std::size_t>(guess) : 0;
    while (t > 0 && ok(t - 1)) --t;
    while (!ok(t)) ++t;
    return t;
}

inline MixingEstimate estimate_mixing(const MdpSpec& mdp, const PolicySpec& policy, double eta_T,
                                      std::size_t horizon = 200) {
    const auto curve = tv_mixing_curve(mdp, policy, horizon);
    MixingEstimate est;
    est.lambda = curve.envelope.lambda;
    est.rho = curve.envelope.rho;
    est.tau_star = mixing_time_tau(est.lambda, est.rho, eta_T);
    return est;
}

// ---------------------------------------------------------------------------
// Probe reports
// ---------------------------------------------------------------------------

struct ProbeCell {
    std::string probe;
    std::size_t m = 0;
    std::size_t L = 0;
    double omega = 0.0;
    std::uint64_t seed = 0;
    std::size_t n_samples = 0;
    double value = 0.0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) fail(ErrorKind::NoData, "median of an empty set");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct ProbeReport {
    std::vector<ProbeCell> cells;

    /// Median value of one probe per width, ordered by m.
    std::map<std::size_t, double> medians_by_width(const std::string& probe) const {
        std::map<std::size_t, std::vector<double>> groups;
        for (const auto& c : cells)
            if (c.probe == probe) groups[c.m].push_back(c.value);
        std::map<std::size_t, double> out;
        for (auto& [m, vals] : groups) out[m] = median(std::move(vals));
        return out;
    }

    void append(const ProbeReport& other) { cells.insert(cells.end(), other.cells.begin(), other.cells.end()); }
};

inline constexpr const char* kProbeCsvHeader = "probe,m,L,omega,seed,value";

inline void write_probe_csv(std::ostream& os, const ProbeReport& report) {
    os << kProbeCsvHeader << '\n';
    for (const auto& c : report.cells)
        os << c.probe << ',' << c.m << ',' << c.L << ',' << format_double(c.omega) << ',' << c.seed << ','
           << format_double(c.value) << '\n';
}

/// Human-readable per-probe, per-width medians.
inline void write_probe_summary(std::ostream& os, const ProbeReport& report) {
    std::vector<std::string> probes;
    for (const auto& c : report.cells)
        if (std::find(probes.begin(), probes.end(), c.probe) == probes.end()) probes.push_back(c.probe);
    for (const auto& p : probes) {
        os << p << '\n';
        for (const auto& [m, med] : report.medians_by_width(p)) {
            std::size_t n = 0;
            for (const auto& c : report.cells) n += (c.probe == p && c.m == m);
            os << "  m=" << m << "  median=" << format_double(med) << "  cells=" << n << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Linearization probe
// ---------------------------------------------------------------------------

struct LinearizationProbeOptions {
    double omega_coeff = 1.0;
    std::optional<double> omega; // fixed radius overriding the width rule
    std::size_t n_seeds = 20;
    std::uint64_t base_seed = 0;
};

inline constexpr std::uint64_t kProbeStream = 7;

/// For each shape and seed: draw theta0, put every layer on the sphere of radius
/// omega(m) around it, and record the worst |f - f_hat| over the inputs
/// ("linearization_gap") and the worst relative gradient change
/// ("gradient_perturbation").
inline ProbeReport linearization_probe(const std::vector<NetShape>& shapes, const std::vector<Vector>& inputs,
                                       const LinearizationProbeOptions& opt = {}) {
    ProbeReport report;
    for (const auto& shape : shapes) {
        shape.validate();
        const double omega = opt.omega ? *opt.omega : theorem_radius(shape.m, shape.L, opt.omega_coeff);
        for (std::size_t i = 0; i < opt.n_seeds; ++i) {
            const std::uint64_t seed = opt.base_seed + i;
            Rng rng = make_rng(seed, kProbeStream);
            const Theta theta0 = init_gaussian(shape, rng);
            Theta theta = theta0;
            theta.flat += sphere_perturbation(shape, omega, rng);
            double gap = 0.0, grad_ratio = 0.0;
            for (const auto& x : inputs) {
                const auto at0 = value_and_gradient(theta0, x);
                const auto at = value_and_gradient(theta, x);
                const double lin = at0.value + at0.gradient.dot(theta.flat - theta0.flat);
                gap = std::max(gap, std::abs(at.value - lin));
                const double g0 = at0.gradient.norm();
                if (g0 > 0.0) grad_ratio = std::max(grad_ratio, (at.gradient - at0.gradient).norm() / g0);
            }
            report.cells.push_back({"linearization_gap", shape.m, shape.L, omega, seed, inputs.size(), gap});
            report.cells.push_back({"gradient_perturbation", shape.m, shape.L, omega, seed, inputs.size(), grad_ratio});
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Estimation-gap inequality
// ---------------------------------------------------------------------------

/// <m_bar(a) - m_bar(b), a - b> - beta * E_{mu,pi}[(f_hat(a) - f_hat(b))^2].
inline double estimation_gap_check(const LinearizedModel& model, const MdpSpec& mdp, const PolicySpec& policy,
                                   const Theta& theta_a, const Theta& theta_b, double beta,
                                   const Vector* state_weights = nullptr) {
    require_same_shape(theta_a, theta_b);
    const Vector mu = detail::state_weights_or_stationary(mdp, policy, state_weights);
    const Vector diff = theta_a.flat - theta_b.flat;
    const Vector ma = population_semi_gradient(model, mdp, policy, theta_a, &mu);
    const Vector mb = population_semi_gradient(model, mdp, policy, theta_b, &mu);
    const Vector w = pair_weights(mdp, policy, mu);
    double second_moment = 0.0;
    for (std::size_t k = 0; k < mdp.n_pairs(); ++k) {
        const double u = model.anchor_gradient(k).dot(diff);
        second_moment += w[static_cast<Eigen::Index>(k)] * u * u;
    }
    return (ma - mb).dot(diff) - beta * second_moment;
}

// ---------------------------------------------------------------------------
// Markovian bias
// ---------------------------------------------------------------------------

enum class BiasReference { Initial, Current, Fixed };

struct BiasProbeOptions {
    BiasReference reference = BiasReference::Initial;
    std::optional<Theta> fixed_reference;
    std::size_t window = 100;
};

struct BiasTrace {
    std::vector<double> zeta;            // zeta_t for every step
    std::vector<double> window_mean;     // mean of zeta_t per window
    std::vector<double> window_abs_mean; // mean of |zeta_t| per window
    std::size_t window = 0;
    double eta = 0.0;
    std::optional<MixingEstimate> mixing; // absent when the chain's envelope cannot be fitted

    /// tau* * eta, the shape of the bias envelope for a constant step size.
    double envelope() const { return mixing ? static_cast<double>(mixing->tau_star) * eta : 0.0; }
};

/// Replays a run and evaluates zeta_t = <m_t(theta_t) - m_bar(theta_t), theta_t - reference>
/// along its trajectory, with exact m_bar under the stationary distribution.
inline BiasTrace bias_probe(const RunConfig& config, const MdpSpec& base_mdp, const PolicySpec& policy,
                            const BiasProbeOptions& opt = {}) {
    if (opt.window < 1) fail(ErrorKind::InvalidArgument, "bias window must be positive");
    if (opt.reference == BiasReference::Fixed && !opt.fixed_reference)
        fail(ErrorKind::InvalidArgument, "fixed reference point missing");
    const MdpSpec mdp = config.gamma ? with_gamma(base_mdp, *config.gamma) : base_mdp;
    const Vector mu = stationary_distribution(mdp, policy);
    const Vector w = pair_weights(mdp, policy, mu);

    BiasTrace trace;
    trace.window = opt.window;
    trace.eta = step_size(config);
    try {
        trace.mixing = estimate_mixing(mdp, policy, trace.eta);
    } catch (const Error&) {
        trace.mixing.reset();
    }
    trace.zeta.reserve(config.horizon);

    std::optional<LinearizedModel> model;
    TrainOptions topt;
    topt.eval_weights = mu;
    topt.q_star = QTable::Zero(static_cast<Eigen::Index>(mdp.n_states()), static_cast<Eigen::Index>(mdp.n_actions()));
    topt.observer = [&](const StepView& v) {
        if (!model) {
            model.emplace(v.before, mdp.features());
            model->precompute_all();
        }
        const Vector disp = v.before.flat - model->theta0().flat;
        Vector ref_disp;
        switch (opt.reference) {
        case BiasReference::Initial: ref_disp = disp; break;
        case BiasReference::Current: ref_disp = Vector::Zero(disp.size()); break;
        case BiasReference::Fixed: ref_disp = v.before.flat - opt.fixed_reference->flat; break;
        }
        const Vector values = linearized_values(*model, mdp, disp);
        const Vector expected = expected_linearized_td(mdp, values);
        double pop = 0.0;
        for (std::size_t k = 0; k < mdp.n_pairs(); ++k) {
            const double wk = w[static_cast<Eigen::Index>(k)];
            if (wk != 0.0) pop += wk * expected[static_cast<Eigen::Index>(k)] * model->anchor_gradient(k).dot(ref_disp);
        }
        const std::size_t k_t = mdp.pair_index(v.transition.s, v.transition.a);
        const double sample = linearized_td_error(mdp, values, v.transition) * model->anchor_gradient(k_t).dot(ref_disp);
        trace.zeta.push_back(sample - pop);
    };
    RunConfig quiet = config;
    quiet.log_every = std::max<std::size_t>(config.horizon, 1);
    quiet.gamma.reset();
    train(quiet, mdp, policy, topt);

    for (std::size_t start = 0; start + opt.window <= trace.zeta.size(); start += opt.window) {
        double sum = 0.0, abs_sum = 0.0;
        for (std::size_t i = start; i < start + opt.window; ++i) {
            sum += trace.zeta[i];
            abs_sum += std::abs(trace.zeta[i]);
        }
        trace.window_mean.push_back(sum / static_cast<double>(opt.window));
        trace.window_abs_mean.push_back(abs_sum / static_cast<double>(opt.window));
    }
    return trace;
}

inline ProbeReport bias_report(const BiasTrace& trace, const RunConfig& config) {
    ProbeReport r;
    double sum = 0.0, abs_sum = 0.0;
    for (double z : trace.zeta) {
        sum += z;
        abs_sum += std::abs(z);
    }
    const double n = static_cast<double>(std::max<std::size_t>(trace.zeta.size(), 1));
    r.cells.push_back({"bias_mean_zeta", config.width, config.depth, config.omega(), config.seed, trace.zeta.size(), sum / n});
    r.cells.push_back({"bias_mean_abs_zeta", config.width, config.depth, config.omega(), config.seed, trace.zeta.size(), abs_sum / n});
    r.cells.push_back({"bias_envelope_tau_eta", config.width, config.depth, config.omega(), config.seed, 0, trace.envelope()});
    return r;
}

// ---------------------------------------------------------------------------
// Projected linear fixed point (optional utility)
// ---------------------------------------------------------------------------

struct FixedPointResult {
    Theta theta;
    bool converged = false;
    std::size_t iterations = 0;
    double last_step = 0.0;
};

/// Damped iteration theta <- Pi(theta - eta * m_bar(theta)); converged when a step moves less than 1e-10.
/// Non-convergence is reported, not thrown.
inline FixedPointResult projected_fixed_point(const LinearizedModel& model, const MdpSpec& mdp, const PolicySpec& policy,
                                              double omega, double eta, std::size_t max_iterations = 100'000) {
    const Vector mu = stationary_distribution(mdp, policy);
    const BallConstraint ball{model.theta0(), omega};
    FixedPointResult res;
    res.theta = model.theta0();
    for (std::size_t it = 0; it < max_iterations; ++it) {
        Theta next = res.theta;
        next.flat -= eta * population_semi_gradient(model, mdp, policy, res.theta, &mu);
        project_ball_inplace(next, ball);
        res.last_step = (next.flat - res.theta.flat).norm();
        res.theta = std::move(next);
        res.iterations = it + 1;
        if (res.last_step <= 1e-10) {
            res.converged = true;
            break;
        }
    }
    return res;
}

} // namespace nql
