#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "nql/error.hpp"
#include "nql/mdp.hpp"
#include "nql/relu_net.hpp"

namespace nql {

enum class StepRule {
    TheoremSqrtT, // eta = 1 / (2 beta m sqrt(T)), the schedule the rate proof telescopes with
    TheoremT,     // eta = 1 / (2 beta m T), as printed in the theorem statement
    Explicit,
};

inline std::string to_string(StepRule rule) {
    switch (rule) {
    case StepRule::TheoremSqrtT: return "theorem-sqrtT";
    case StepRule::TheoremT: return "theorem-T";
    case StepRule::Explicit: return "explicit";
    }
    return "unknown";
}

inline StepRule parse_step_rule(const std::string& name) {
    if (name == "theorem-sqrtT") return StepRule::TheoremSqrtT;
    if (name == "theorem-T") return StepRule::TheoremT;
    if (name == "explicit") return StepRule::Explicit;
    fail(ErrorKind::InvalidArgument, "unknown step rule '" + name + "'");
}

enum class SamplerMode {
    Markovian,     // one continuous trajectory, s_{t+1} is the previous s_next
    IidStationary, // every s_t drawn afresh from the stationary distribution
};

inline std::string to_string(SamplerMode mode) {
    return mode == SamplerMode::Markovian ? "markovian" : "iid-stationary";
}

inline SamplerMode parse_sampler_mode(const std::string& name) {
    if (name == "markovian") return SamplerMode::Markovian;
    if (name == "iid-stationary") return SamplerMode::IidStationary;
    fail(ErrorKind::InvalidArgument, "unknown sampler '" + name + "'");
}

struct RunConfig {
    std::size_t width = 64;       // m
    std::size_t depth = 2;        // L
    std::size_t horizon = 1000;   // T
    double omega_coeff = 1.0;     // omega = coeff * m^{-1/2} L^{-9/4}
    double beta = 0.5;
    StepRule step_rule = StepRule::TheoremSqrtT;
    double eta = 0.0;             // used by StepRule::Explicit
    std::optional<double> gamma;  // overrides the MDP discount when set
    std::uint64_t seed = 0;
    std::size_t log_every = 1;
    std::size_t burn_in = 0;
    SamplerMode sampler = SamplerMode::Markovian;
    std::size_t max_params = 4'000'000;

    double omega() const { return theorem_radius(width, depth, omega_coeff); }

    NetShape shape(std::size_t feature_dim) const { return NetShape{feature_dim, width, depth}; }

    void validate() const {
        if (horizon < 1) fail(ErrorKind::InvalidArgument, "horizon T must be at least 1");
        if (width < 1) fail(ErrorKind::InvalidArgument, "width m must be at least 1");
        if (depth < 2) fail(ErrorKind::InvalidArgument, "depth L must be at least 2");
        if (!(omega_coeff > 0.0)) fail(ErrorKind::InvalidArgument, "omega coefficient must be positive");
        if (!(beta > 0.0 && beta < 1.0)) fail(ErrorKind::InvalidArgument, "beta must lie in (0,1)");
        if (step_rule == StepRule::Explicit && !(eta > 0.0))
            fail(ErrorKind::InvalidArgument, "explicit step rule needs eta > 0");
        if (log_every < 1) fail(ErrorKind::InvalidArgument, "log_every must be at least 1");
    }
};

/// Constant step size; independent of t.
inline double step_size(const RunConfig& config) {
    const double m = static_cast<double>(config.width);
    const double T = static_cast<double>(config.horizon);
    switch (config.step_rule) {
    case StepRule::TheoremSqrtT: return 1.0 / (2.0 * config.beta * m * std::sqrt(T));
    case StepRule::TheoremT: return 1.0 / (2.0 * config.beta * m * T);
    case StepRule::Explicit: return config.eta;
    }
    return config.eta;
}

/// Delta = q(s,a) - (r + gamma * max_b q(s',b)), max ties to the lowest action.
template <class QFn>
inline double td_error_with(QFn&& q, const Transition& tr, double gamma, std::size_t n_actions) {
    double best = q(tr.s_next, ActionId{0});
    for (ActionId b = 1; b < n_actions; ++b) best = std::max(best, q(tr.s_next, b));
    return q(tr.s, tr.a) - (tr.r + gamma * best);
}

inline double td_error(const Theta& theta, const Transition& tr, double gamma, const MdpSpec& mdp) {
    return td_error_with([&](StateId s, ActionId a) { return forward(theta, mdp.feature(s, a)); }, tr, gamma,
                         mdp.n_actions());
}

/// g_t = Delta_t * grad f(theta; phi(s_t, a_t)).
inline Vector semi_gradient(const Theta& theta, const Transition& tr, double gamma, const MdpSpec& mdp) {
    const double delta = td_error(theta, tr, gamma, mdp);
    return delta * gradient(theta, mdp.feature(tr.s, tr.a));
}

/// Q(s,a; theta) for every pair.
inline QTable network_q_table(const Theta& theta, const MdpSpec& mdp) {
    QTable q(static_cast<Eigen::Index>(mdp.n_states()), static_cast<Eigen::Index>(mdp.n_actions()));
    for (StateId s = 0; s < mdp.n_states(); ++s)
        for (ActionId a = 0; a < mdp.n_actions(); ++a)
            q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = forward(theta, mdp.feature(s, a));
    return q;
}

struct LogRow {
    std::size_t t = 0;
    double td_err_sq = 0.0;       // Delta_t^2 at theta_t
    double grad_norm = 0.0;       // ||g_t||_2 at theta_t
    double max_layer_dist = 0.0;  // max_l ||W_l - W_l^(0)||_F after the update
    bool proj_active = false;     // projection moved at least one layer in this update
    double q_gap_sq = 0.0;        // E_w[(Q(s,a;theta_t) - Q*(s,a))^2]
    double lin_gap_sq = 0.0;      // E_w[(f(theta_t) - f_hat(theta_t))^2]
    std::vector<double> layer_dist;
};

struct RunRecord {
    RunConfig config;
    NetShape shape;
    double gamma = 0.0;
    double omega = 0.0;
    double eta = 0.0;
    std::string eval_weighting; // "stationary" or "initial"
    std::vector<LogRow> rows;
    double max_dist_seen = 0.0; // over every step, logged or not
    std::size_t projected_steps = 0;
    Theta theta0;
    Theta final_theta;
};

/// Read-only view of one update, handed to an optional observer.
struct StepView {
    std::size_t t;
    const Theta& before;
    const Transition& transition;
    double td_error;
    const Vector& semi_gradient;
    const Theta& after;
    const ProjectionInfo& projection;
};

using StepObserver = std::function<void(const StepView&)>;

struct TrainOptions {
    std::optional<QTable> q_star;          // computed by value iteration when absent
    std::optional<Vector> eval_weights;    // state weights for the gap metrics
    StepObserver observer;
};

inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kDataStream = 2;

/// Projected neural Q-learning with Gaussian initialization.
inline RunRecord train(const RunConfig& config, const MdpSpec& base_mdp, const PolicySpec& policy,
                       const TrainOptions& options = {}) {
    config.validate();
    const MdpSpec mdp = config.gamma ? with_gamma(base_mdp, *config.gamma) : base_mdp;
    check_policy_shape(mdp, policy);
    const NetShape shape = config.shape(mdp.feature_dim());
    if (shape.n_params() > config.max_params)
        fail(ErrorKind::WidthCapExceeded, std::to_string(shape.n_params()) + " parameters exceed the cap of " +
                                              std::to_string(config.max_params));

    RunRecord rec;
    rec.config = config;
    rec.shape = shape;
    rec.gamma = mdp.gamma();
    rec.omega = config.omega();
    rec.eta = step_size(config);

    std::optional<Vector> stationary;
    try {
        stationary = stationary_distribution(mdp, policy);
    } catch (const Error&) {
        if (config.sampler == SamplerMode::IidStationary) throw;
    }
    Vector state_weights;
    if (options.eval_weights) {
        state_weights = *options.eval_weights;
        rec.eval_weighting = "explicit";
    } else if (stationary) {
        state_weights = *stationary;
        rec.eval_weighting = "stationary";
    } else {
        state_weights = mdp.initial();
        rec.eval_weighting = "initial";
    }
    const Vector weights = pair_weights(mdp, policy, state_weights);
    const QTable q_star = options.q_star ? *options.q_star : value_iteration(mdp, 1e-10).q;

    Rng init_rng = make_rng(config.seed, kInitStream);
    Rng data_rng = make_rng(config.seed, kDataStream);

    rec.theta0 = init_gaussian(shape, init_rng);
    const BallConstraint ball{rec.theta0, rec.omega};
    const LinearizedModel lin(rec.theta0, mdp.features());

    auto draw_state = [&](const Vector& dist) { return sample_categorical(dist, data_rng); };
    StateId s = config.sampler == SamplerMode::Markovian ? draw_state(mdp.initial()) : draw_state(*stationary);
    if (config.sampler == SamplerMode::Markovian)
        for (std::size_t k = 0; k < config.burn_in; ++k) s = sample_transition(mdp, policy, s, data_rng).s_next;

    Theta theta = rec.theta0;
    Theta next = theta;
    for (std::size_t t = 0; t < config.horizon; ++t) {
        const Transition tr = sample_transition(mdp, policy, s, data_rng);
        const double delta = td_error(theta, tr, mdp.gamma(), mdp);
        const Vector g = delta * gradient(theta, mdp.feature(tr.s, tr.a));

        next.flat = theta.flat - rec.eta * g;
        const ProjectionInfo proj = project_ball_inplace(next, ball);
        const double max_dist = *std::max_element(proj.distances.begin(), proj.distances.end());
        rec.max_dist_seen = std::max(rec.max_dist_seen, max_dist);
        if (proj.any_active()) ++rec.projected_steps;

        if (t % config.log_every == 0 || t + 1 == config.horizon) {
            LogRow row;
            row.t = t;
            row.td_err_sq = delta * delta;
            row.grad_norm = g.norm();
            row.max_layer_dist = max_dist;
            row.proj_active = proj.any_active();
            row.layer_dist = proj.distances;
            const Vector displacement = theta.flat - rec.theta0.flat;
            for (StateId ss = 0; ss < mdp.n_states(); ++ss)
                for (ActionId aa = 0; aa < mdp.n_actions(); ++aa) {
                    const std::size_t k = mdp.pair_index(ss, aa);
                    const double w = weights[static_cast<Eigen::Index>(k)];
                    if (w == 0.0) continue;
                    const double f = forward(theta, mdp.feature(ss, aa));
                    const double q_gap = f - q_star(static_cast<Eigen::Index>(ss), static_cast<Eigen::Index>(aa));
                    const double lin_gap = f - lin.value_at_displacement(displacement, k);
                    row.q_gap_sq += w * q_gap * q_gap;
                    row.lin_gap_sq += w * lin_gap * lin_gap;
                }
            rec.rows.push_back(std::move(row));
        }

        if (options.observer) options.observer(StepView{t, theta, tr, delta, g, next, proj});

        std::swap(theta, next);
        s = config.sampler == SamplerMode::Markovian ? tr.s_next : draw_state(*stationary);
    }
    rec.final_theta = std::move(theta);
    return rec;
}

// ---------------------------------------------------------------------------
// Run CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kRunCsvHeader = "t,td_err_sq,grad_norm,max_layer_dist,proj_active,q_gap_sq,lin_gap_sq";

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_run_csv(std::ostream& os, const RunRecord& rec) {
    os << kRunCsvHeader << '\n';
    for (const auto& r : rec.rows)
        os << r.t << ',' << format_double(r.td_err_sq) << ',' << format_double(r.grad_norm) << ','
           << format_double(r.max_layer_dist) << ',' << (r.proj_active ? 1 : 0) << ',' << format_double(r.q_gap_sq)
           << ',' << format_double(r.lin_gap_sq) << '\n';
}

/// Mean of q_gap_sq over the first and last `fraction` of logged rows.
struct GapTrend {
    double head = 0.0;
    double tail = 0.0;
};

inline GapTrend gap_trend(const RunRecord& rec, double fraction = 0.1) {
    const std::size_t n = rec.rows.size();
    if (n == 0) fail(ErrorKind::NoData, "run has no logged rows");
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n))));
    GapTrend g;
    for (std::size_t i = 0; i < k; ++i) {
        g.head += rec.rows[i].q_gap_sq;
        g.tail += rec.rows[n - 1 - i].q_gap_sq;
    }
    g.head /= static_cast<double>(k);
    g.tail /= static_cast<double>(k);
    return g;
}

} // namespace nql
