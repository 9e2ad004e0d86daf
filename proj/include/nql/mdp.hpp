#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "nql/error.hpp"
#include "nql/types.hpp"

namespace nql {

/// Unvalidated MDP tables as read from a file or produced by a generator.
///
/// Layouts are flattened row-major: `transition[(s * A + a) * S + s']`,
/// `reward[s * A + a]`, `features[(s * A + a) * feature_dim + k]`.
/// An empty `features` means one-hot features over state-action pairs.
/// An empty `initial` means the uniform initial-state distribution.
struct MdpInput {
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    double gamma = 0.9;
    std::vector<double> transition;
    std::vector<double> reward;
    std::size_t feature_dim = 0;
    std::vector<double> features;
    std::vector<double> initial;
};

/// Validated finite MDP. Construct through build_mdp().
class MdpSpec {
public:
    std::size_t n_states() const { return n_states_; }
    std::size_t n_actions() const { return n_actions_; }
    std::size_t n_pairs() const { return n_states_ * n_actions_; }
    std::size_t pair_index(StateId s, ActionId a) const { return s * n_actions_ + a; }
    double gamma() const { return gamma_; }

    double p(StateId s, ActionId a, StateId next) const {
        return transition_[(s * n_actions_ + a) * n_states_ + next];
    }
    const double* row(StateId s, ActionId a) const {
        return transition_.data() + (s * n_actions_ + a) * n_states_;
    }
    double reward(StateId s, ActionId a) const { return reward_[s * n_actions_ + a]; }

    std::size_t feature_dim() const { return feature_dim_; }
    const Vector& feature(StateId s, ActionId a) const { return features_[pair_index(s, a)]; }
    const std::vector<Vector>& features() const { return features_; }

    const Vector& initial() const { return initial_; }

    /// Set when any supplied feature exceeded the unit ball and the table was rescaled.
    bool features_rescaled() const { return features_rescaled_; }
    /// Set when some transition row was off by a tolerable amount and renormalized.
    bool rows_renormalized() const { return rows_renormalized_; }

    MdpInput to_input() const {
        MdpInput in;
        in.n_states = n_states_;
        in.n_actions = n_actions_;
        in.gamma = gamma_;
        in.transition = transition_;
        in.reward = reward_;
        in.feature_dim = feature_dim_;
        in.features.reserve(n_pairs() * feature_dim_);
        for (const auto& f : features_)
            in.features.insert(in.features.end(), f.data(), f.data() + f.size());
        in.initial.assign(initial_.data(), initial_.data() + initial_.size());
        return in;
    }

    friend MdpSpec build_mdp(MdpInput raw);

private:
    MdpSpec() = default;

    std::size_t n_states_ = 0;
    std::size_t n_actions_ = 0;
    double gamma_ = 0.0;
    std::vector<double> transition_;
    std::vector<double> reward_;
    std::size_t feature_dim_ = 0;
    std::vector<Vector> features_;
    Vector initial_;
    bool features_rescaled_ = false;
    bool rows_renormalized_ = false;
};

inline constexpr double kRowTolerance = 1e-9;

inline MdpSpec build_mdp(MdpInput raw) {
    const std::size_t S = raw.n_states, A = raw.n_actions;
    if (S == 0 || A == 0) fail(ErrorKind::ShapeMismatch, "n_states and n_actions must be positive");
    if (!(raw.gamma > 0.0 && raw.gamma < 1.0))
        fail(ErrorKind::BadDiscount, "gamma=" + std::to_string(raw.gamma) + " is outside (0,1)");
    if (raw.transition.size() != S * A * S)
        fail(ErrorKind::ShapeMismatch, "transition needs " + std::to_string(S * A * S) + " entries, got " +
                                           std::to_string(raw.transition.size()));
    if (raw.reward.size() != S * A)
        fail(ErrorKind::ShapeMismatch, "reward needs " + std::to_string(S * A) + " entries, got " +
                                           std::to_string(raw.reward.size()));

    MdpSpec mdp;
    mdp.n_states_ = S;
    mdp.n_actions_ = A;
    mdp.gamma_ = raw.gamma;

    for (std::size_t sa = 0; sa < S * A; ++sa) {
        double* row = raw.transition.data() + sa * S;
        double sum = 0.0;
        for (std::size_t k = 0; k < S; ++k) {
            if (!std::isfinite(row[k]) || row[k] < 0.0)
                fail(ErrorKind::NonStochasticRow, "negative or non-finite probability in row " + std::to_string(sa));
            sum += row[k];
        }
        if (std::abs(sum - 1.0) > kRowTolerance)
            fail(ErrorKind::NonStochasticRow,
                 "row (s=" + std::to_string(sa / A) + ", a=" + std::to_string(sa % A) + ") sums to " + std::to_string(sum));
        if (sum != 1.0) {
            for (std::size_t k = 0; k < S; ++k) row[k] /= sum;
            mdp.rows_renormalized_ = true;
        }
    }
    mdp.transition_ = std::move(raw.transition);

    for (std::size_t sa = 0; sa < S * A; ++sa) {
        const double r = raw.reward[sa];
        if (!std::isfinite(r) || std::abs(r) > 1.0)
            fail(ErrorKind::RewardOutOfRange,
                 "reward(s=" + std::to_string(sa / A) + ", a=" + std::to_string(sa % A) + ")=" + std::to_string(r));
    }
    mdp.reward_ = std::move(raw.reward);

    if (raw.features.empty()) {
        mdp.feature_dim_ = S * A;
        mdp.features_.assign(S * A, Vector::Zero(static_cast<Eigen::Index>(S * A)));
        for (std::size_t sa = 0; sa < S * A; ++sa) mdp.features_[sa][static_cast<Eigen::Index>(sa)] = 1.0;
    } else {
        const std::size_t d = raw.feature_dim;
        if (d == 0 || raw.features.size() != S * A * d)
            fail(ErrorKind::ShapeMismatch, "features need n_states*n_actions*feature_dim entries");
        mdp.feature_dim_ = d;
        double max_norm = 0.0;
        for (std::size_t sa = 0; sa < S * A; ++sa) {
            Vector f = Eigen::Map<const Vector>(raw.features.data() + sa * d, static_cast<Eigen::Index>(d));
            if (!f.allFinite()) fail(ErrorKind::InvalidArgument, "non-finite feature entry");
            max_norm = std::max(max_norm, f.norm());
            mdp.features_.push_back(std::move(f));
        }
        if (max_norm > 1.0) {
            for (auto& f : mdp.features_) f /= max_norm;
            mdp.features_rescaled_ = true;
        }
    }

    if (raw.initial.empty()) {
        mdp.initial_ = Vector::Constant(static_cast<Eigen::Index>(S), 1.0 / static_cast<double>(S));
    } else {
        if (raw.initial.size() != S) fail(ErrorKind::ShapeMismatch, "initial distribution needs n_states entries");
        mdp.initial_ = Eigen::Map<const Vector>(raw.initial.data(), static_cast<Eigen::Index>(S));
        if ((mdp.initial_.array() < 0.0).any() || std::abs(mdp.initial_.sum() - 1.0) > kRowTolerance)
            fail(ErrorKind::NonStochasticRow, "initial distribution is not a probability vector");
        mdp.initial_ /= mdp.initial_.sum();
    }
    return mdp;
}

/// Same MDP with another discount; revalidated.
inline MdpSpec with_gamma(const MdpSpec& mdp, double gamma) {
    MdpInput in = mdp.to_input();
    in.gamma = gamma;
    return build_mdp(std::move(in));
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

enum class PolicyKind { Uniform, FixedStochastic, EpsilonGreedy };

inline std::string to_string(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::Uniform: return "uniform";
    case PolicyKind::FixedStochastic: return "fixed";
    case PolicyKind::EpsilonGreedy: return "epsilon_greedy";
    }
    return "unknown";
}

/// A stationary learning policy, always resolved to an explicit table pi(a|s).
struct PolicySpec {
    PolicyKind kind = PolicyKind::Uniform;
    double epsilon = 0.0;
    Matrix probabilities; // states x actions

    double prob(StateId s, ActionId a) const {
        return probabilities(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a));
    }
};

inline PolicySpec uniform_policy(std::size_t n_states, std::size_t n_actions) {
    PolicySpec p;
    p.kind = PolicyKind::Uniform;
    p.probabilities = Matrix::Constant(static_cast<Eigen::Index>(n_states), static_cast<Eigen::Index>(n_actions),
                                       1.0 / static_cast<double>(n_actions));
    return p;
}

inline PolicySpec uniform_policy(const MdpSpec& mdp) { return uniform_policy(mdp.n_states(), mdp.n_actions()); }

inline PolicySpec fixed_policy(const Matrix& probabilities) {
    for (Eigen::Index s = 0; s < probabilities.rows(); ++s) {
        if ((probabilities.row(s).array() < 0.0).any() || !probabilities.row(s).allFinite() ||
            std::abs(probabilities.row(s).sum() - 1.0) > kRowTolerance)
            fail(ErrorKind::NonStochasticRow, "policy row " + std::to_string(s) + " is not a distribution");
    }
    PolicySpec p;
    p.kind = PolicyKind::FixedStochastic;
    p.probabilities = probabilities;
    for (Eigen::Index s = 0; s < p.probabilities.rows(); ++s) p.probabilities.row(s) /= p.probabilities.row(s).sum();
    return p;
}

/// Epsilon-greedy with respect to a frozen table, so the induced chain is time-homogeneous.
inline PolicySpec epsilon_greedy_policy(const QTable& frozen, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) fail(ErrorKind::InvalidArgument, "epsilon must lie in [0,1]");
    PolicySpec p;
    p.kind = PolicyKind::EpsilonGreedy;
    p.epsilon = epsilon;
    const auto A = frozen.cols();
    p.probabilities = Matrix::Constant(frozen.rows(), A, epsilon / static_cast<double>(A));
    for (Eigen::Index s = 0; s < frozen.rows(); ++s)
        p.probabilities(s, static_cast<Eigen::Index>(argmax_lowest(frozen.row(s)))) += 1.0 - epsilon;
    return p;
}

inline void check_policy_shape(const MdpSpec& mdp, const PolicySpec& policy) {
    if (static_cast<std::size_t>(policy.probabilities.rows()) != mdp.n_states() ||
        static_cast<std::size_t>(policy.probabilities.cols()) != mdp.n_actions())
        fail(ErrorKind::ShapeMismatch, "policy table does not match the MDP");
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct Transition {
    StateId s = 0;
    ActionId a = 0;
    double r = 0.0;
    StateId s_next = 0;
};

/// Inverse-CDF draw; roundoff at the top end falls back to the last index with mass.
inline std::size_t sample_categorical(const double* probs, std::size_t n, Rng& rng) {
    const double u = uniform01(rng);
    double cum = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (probs[i] <= 0.0) continue;
        cum += probs[i];
        last = i;
        if (u < cum) return i;
    }
    return last;
}

inline std::size_t sample_categorical(const Vector& probs, Rng& rng) {
    return sample_categorical(probs.data(), static_cast<std::size_t>(probs.size()), rng);
}

inline Transition sample_transition(const MdpSpec& mdp, const PolicySpec& policy, StateId s, Rng& rng) {
    if (s >= mdp.n_states()) fail(ErrorKind::InvalidArgument, "state id " + std::to_string(s) + " out of range");
    const Eigen::RowVectorXd pi = policy.probabilities.row(static_cast<Eigen::Index>(s));
    Transition tr;
    tr.s = s;
    tr.a = sample_categorical(pi.data(), mdp.n_actions(), rng);
    tr.r = mdp.reward(s, tr.a);
    tr.s_next = sample_categorical(mdp.row(s, tr.a), mdp.n_states(), rng);
    return tr;
}

// ---------------------------------------------------------------------------
// Exact oracles
// ---------------------------------------------------------------------------

inline QTable bellman_optimality(const MdpSpec& mdp, const QTable& q) {
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    if (static_cast<std::size_t>(q.rows()) != S || static_cast<std::size_t>(q.cols()) != A)
        fail(ErrorKind::ShapeMismatch, "Q table does not match the MDP");
    const Vector vmax = q.rowwise().maxCoeff();
    QTable out(q.rows(), q.cols());
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            const double* row = mdp.row(s, a);
            double cont = 0.0;
            for (std::size_t k = 0; k < S; ++k) cont += row[k] * vmax[static_cast<Eigen::Index>(k)];
            out(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = mdp.reward(s, a) + mdp.gamma() * cont;
        }
    return out;
}

struct ValueIterationResult {
    QTable q;
    std::size_t iterations = 0;
    double residual = 0.0; // ||Tq - q||_inf of the returned table
};

inline ValueIterationResult value_iteration(const MdpSpec& mdp, double tol, std::size_t max_iterations = 1'000'000) {
    if (!(tol > 0.0)) fail(ErrorKind::InvalidArgument, "tolerance must be positive");
    ValueIterationResult res;
    res.q = QTable::Zero(static_cast<Eigen::Index>(mdp.n_states()), static_cast<Eigen::Index>(mdp.n_actions()));
    for (std::size_t it = 0; it < max_iterations; ++it) {
        QTable next = bellman_optimality(mdp, res.q);
        res.residual = (next - res.q).cwiseAbs().maxCoeff();
        res.iterations = it + 1;
        if (res.residual <= tol) return res;
        res.q = std::move(next);
    }
    fail(ErrorKind::NonConvergence, "value iteration hit the cap of " + std::to_string(max_iterations) + " iterations");
}

/// P_pi(s'|s) = sum_a pi(a|s) P(s'|s,a).
inline Matrix induced_chain(const MdpSpec& mdp, const PolicySpec& policy) {
    check_policy_shape(mdp, policy);
    const std::size_t S = mdp.n_states(), A = mdp.n_actions();
    Matrix chain = Matrix::Zero(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(S));
    for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < A; ++a) {
            const double w = policy.prob(s, a);
            if (w == 0.0) continue;
            const double* row = mdp.row(s, a);
            for (std::size_t k = 0; k < S; ++k)
                chain(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(k)) += w * row[k];
        }
    return chain;
}

namespace detail {

inline std::vector<int> bfs_levels(const Matrix& chain, bool reverse) {
    const auto n = chain.rows();
    std::vector<int> level(static_cast<std::size_t>(n), -1);
    std::vector<Eigen::Index> queue{0};
    level[0] = 0;
    for (std::size_t head = 0; head < queue.size(); ++head) {
        const auto u = queue[head];
        for (Eigen::Index v = 0; v < n; ++v) {
            const double w = reverse ? chain(v, u) : chain(u, v);
            if (w > 0.0 && level[static_cast<std::size_t>(v)] < 0) {
                level[static_cast<std::size_t>(v)] = level[static_cast<std::size_t>(u)] + 1;
                queue.push_back(v);
            }
        }
    }
    return level;
}

} // namespace detail

/// Throws Reducible or Periodic when the chain has no unique limit distribution.
inline void check_ergodic(const Matrix& chain) {
    const auto fwd = detail::bfs_levels(chain, false);
    const auto bwd = detail::bfs_levels(chain, true);
    for (std::size_t i = 0; i < fwd.size(); ++i)
        if (fwd[i] < 0 || bwd[i] < 0) fail(ErrorKind::Reducible, "state " + std::to_string(i) + " is not in the communicating class of state 0");
    // Period = gcd over edges (u,v) of level(u) + 1 - level(v).
    int period = 0;
    for (Eigen::Index u = 0; u < chain.rows(); ++u)
        for (Eigen::Index v = 0; v < chain.cols(); ++v)
            if (chain(u, v) > 0.0)
                period = std::gcd(period, std::abs(fwd[static_cast<std::size_t>(u)] + 1 - fwd[static_cast<std::size_t>(v)]));
    if (period != 1) fail(ErrorKind::Periodic, "induced chain has period " + std::to_string(period));
}

inline constexpr double kPowerTolerance = 1e-12;

inline Vector stationary_distribution(const Matrix& chain, std::size_t max_iterations = 1'000'000) {
    check_ergodic(chain);
    const auto n = chain.rows();
    Eigen::RowVectorXd mu = Eigen::RowVectorXd::Constant(n, 1.0 / static_cast<double>(n));
    for (std::size_t it = 0; it < max_iterations; ++it) {
        Eigen::RowVectorXd next = mu * chain;
        next /= next.sum();
        const double delta = (next - mu).lpNorm<1>();
        mu = std::move(next);
        if (delta <= kPowerTolerance) return mu.transpose();
    }
    fail(ErrorKind::NonConvergence, "power iteration hit its cap");
}

inline Vector stationary_distribution(const MdpSpec& mdp, const PolicySpec& policy) {
    return stationary_distribution(induced_chain(mdp, policy));
}

/// d(t) = sup_s d_TV(P^t(s,.), mu) for t = 0..horizon, by exact matrix powers.
inline std::vector<double> tv_distances(const Matrix& chain, const Vector& mu, std::size_t horizon) {
    std::vector<double> out;
    out.reserve(horizon + 1);
    Matrix power = Matrix::Identity(chain.rows(), chain.cols());
    for (std::size_t t = 0; t <= horizon; ++t) {
        double worst = 0.0;
        for (Eigen::Index s = 0; s < power.rows(); ++s)
            worst = std::max(worst, 0.5 * (power.row(s).transpose() - mu).lpNorm<1>());
        out.push_back(worst);
        power = power * chain;
    }
    return out;
}

struct GeometricEnvelope {
    double lambda = 0.0;
    double rho = 0.0;
    std::size_t fit_begin = 0; // first t in the fit window
    std::size_t fit_end = 0;   // one past the last t in the window
};

inline constexpr double kTvFloor = 1e-13;

/// Least squares of log d(t) on t over t >= 1 while d(t) > 1e-13; the slope
/// gives rho, and lambda is raised if needed so that lambda*rho^t dominates
/// every point of the window.
inline GeometricEnvelope fit_geometric_envelope(const std::vector<double>& distance) {
    GeometricEnvelope env;
    env.fit_begin = 1;
    env.fit_end = 1;
    while (env.fit_end < distance.size() && distance[env.fit_end] > kTvFloor) ++env.fit_end;
    const std::size_t n = env.fit_end - env.fit_begin;
    if (n < 2) fail(ErrorKind::FitDegenerate, "fewer than two TV distances above 1e-13 from t=1");

    double mt = 0.0, my = 0.0;
    for (std::size_t t = env.fit_begin; t < env.fit_end; ++t) {
        mt += static_cast<double>(t);
        my += std::log(distance[t]);
    }
    mt /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t t = env.fit_begin; t < env.fit_end; ++t) {
        const double dt = static_cast<double>(t) - mt;
        sxy += dt * (std::log(distance[t]) - my);
        sxx += dt * dt;
    }
    const double slope = sxy / sxx;
    env.rho = std::exp(slope);
    if (!(env.rho > 0.0 && env.rho < 1.0))
        fail(ErrorKind::FitDegenerate, "fitted rate " + std::to_string(env.rho) + " is not in (0,1)");
    env.lambda = std::exp(my - slope * mt);
    for (std::size_t t = env.fit_begin; t < env.fit_end; ++t)
        env.lambda = std::max(env.lambda, distance[t] / std::pow(env.rho, static_cast<double>(t)));
    return env;
}

struct MixingCurve {
    std::vector<double> distance; // indexed by t
    GeometricEnvelope envelope;
};

inline MixingCurve tv_mixing_curve(const MdpSpec& mdp, const PolicySpec& policy, std::size_t horizon) {
    if (horizon < 2) fail(ErrorKind::InvalidArgument, "mixing horizon must be at least 2");
    const Matrix chain = induced_chain(mdp, policy);
    MixingCurve curve;
    curve.distance = tv_distances(chain, stationary_distribution(chain), horizon);
    curve.envelope = fit_geometric_envelope(curve.distance);
    return curve;
}

/// Joint weights w(s,a) = mu(s) pi(a|s), flattened by MdpSpec::pair_index.
inline Vector pair_weights(const MdpSpec& mdp, const PolicySpec& policy, const Vector& state_weights) {
    Vector w(static_cast<Eigen::Index>(mdp.n_pairs()));
    for (std::size_t s = 0; s < mdp.n_states(); ++s)
        for (std::size_t a = 0; a < mdp.n_actions(); ++a)
            w[static_cast<Eigen::Index>(mdp.pair_index(s, a))] = state_weights[static_cast<Eigen::Index>(s)] * policy.prob(s, a);
    return w;
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Seeded random MDP: Dirichlet(1) transition rows, uniform rewards in [-1,1],
/// one-hot features.
inline MdpSpec random_mdp(std::size_t n_states, std::size_t n_actions, double gamma, std::uint64_t seed) {
    Rng rng = make_rng(seed, 0x6d6470);
    std::exponential_distribution<double> expo(1.0);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    MdpInput in;
    in.n_states = n_states;
    in.n_actions = n_actions;
    in.gamma = gamma;
    in.transition.resize(n_states * n_actions * n_states);
    for (std::size_t sa = 0; sa < n_states * n_actions; ++sa) {
        double sum = 0.0;
        for (std::size_t k = 0; k < n_states; ++k) sum += in.transition[sa * n_states + k] = expo(rng);
        for (std::size_t k = 0; k < n_states; ++k) in.transition[sa * n_states + k] /= sum;
    }
    in.reward.resize(n_states * n_actions);
    for (auto& r : in.reward) r = unif(rng);
    return build_mdp(std::move(in));
}

/// Two-state, single-action chain that leaves state 0 with probability p and state 1 with probability q.
inline MdpSpec two_state_chain(double p, double q, double gamma = 0.5, double r0 = 1.0, double r1 = -1.0) {
    MdpInput in;
    in.n_states = 2;
    in.n_actions = 1;
    in.gamma = gamma;
    in.transition = {1.0 - p, p, q, 1.0 - q};
    in.reward = {r0, r1};
    return build_mdp(std::move(in));
}

} // namespace nql
