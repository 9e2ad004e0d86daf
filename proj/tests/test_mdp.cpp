#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "nql/mdp.hpp"

namespace nql {
namespace {

MdpInput flip_chain(double gamma = 0.5) {
    MdpInput in;
    in.n_states = 2;
    in.n_actions = 1;
    in.gamma = gamma;
    in.transition = {0.0, 1.0, 1.0, 0.0};
    in.reward = {0.0, 0.0};
    return in;
}

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an nql::Error";
    return ErrorKind::Io;
}

TEST(BuildMdp, RejectsDiscountOutsideOpenInterval) {
    auto in = flip_chain(1.2);
    EXPECT_EQ(kind_of([&] { build_mdp(in); }), ErrorKind::BadDiscount);
    in.gamma = 0.0;
    EXPECT_EQ(kind_of([&] { build_mdp(in); }), ErrorKind::BadDiscount);
    in.gamma = 1.0;
    EXPECT_EQ(kind_of([&] { build_mdp(in); }), ErrorKind::BadDiscount);
}

TEST(BuildMdp, RejectsRewardOutOfRange) {
    auto in = flip_chain();
    in.reward[0] = 2.0;
    EXPECT_EQ(kind_of([&] { build_mdp(in); }), ErrorKind::RewardOutOfRange);
}

TEST(BuildMdp, AcceptsFlipChain) {
    const auto mdp = build_mdp(flip_chain());
    EXPECT_EQ(mdp.n_states(), 2u);
    EXPECT_EQ(mdp.n_actions(), 1u);
    for (StateId s = 0; s < 2; ++s) EXPECT_EQ(mdp.p(s, 0, 0) + mdp.p(s, 0, 1), 1.0);
    EXPECT_FALSE(mdp.rows_renormalized());
    // default one-hot features over pairs
    EXPECT_EQ(mdp.feature_dim(), 2u);
    EXPECT_DOUBLE_EQ(mdp.feature(1, 0)[1], 1.0);
}

TEST(BuildMdp, RowTolerance) {
    auto in = flip_chain();
    in.transition = {0.5, 0.5 + 1e-10, 1.0, 0.0};
    const auto mdp = build_mdp(in);
    EXPECT_TRUE(mdp.rows_renormalized());
    EXPECT_NEAR(mdp.p(0, 0, 0) + mdp.p(0, 0, 1), 1.0, 1e-15);

    in.transition = {0.5, 0.5 + 1e-6, 1.0, 0.0};
    EXPECT_EQ(kind_of([&] { build_mdp(in); }), ErrorKind::NonStochasticRow);
    in.transition = {1.5, -0.5, 1.0, 0.0};
    EXPECT_EQ(kind_of([&] { build_mdp(in); }), ErrorKind::NonStochasticRow);
}

TEST(BuildMdp, RescalesFeaturesIntoUnitBall) {
    auto in = flip_chain();
    in.feature_dim = 2;
    in.features = {3.0, 4.0, 0.5, 0.0};
    const auto mdp = build_mdp(in);
    EXPECT_TRUE(mdp.features_rescaled());
    EXPECT_NEAR(mdp.feature(0, 0).norm(), 1.0, 1e-15);
    EXPECT_NEAR(mdp.feature(1, 0).norm(), 0.1, 1e-15);
    in.features = {0.6, 0.8, 0.5, 0.0};
    EXPECT_FALSE(build_mdp(in).features_rescaled());
}

TEST(BuildMdp, ShapeChecks) {
    auto in = flip_chain();
    in.reward.push_back(0.0);
    EXPECT_EQ(kind_of([&] { build_mdp(in); }), ErrorKind::ShapeMismatch);
}

TEST(SampleTransition, PointMassRow) {
    const auto mdp = build_mdp(flip_chain());
    const auto pi = uniform_policy(mdp);
    Rng rng = make_rng(3);
    for (int i = 0; i < 100; ++i) {
        const auto tr = sample_transition(mdp, pi, 0, rng);
        EXPECT_EQ(tr.s_next, 1u);
        EXPECT_EQ(tr.r, mdp.reward(0, tr.a));
    }
    EXPECT_THROW(sample_transition(mdp, pi, 2, rng), Error);
}

TEST(SampleTransition, DeterministicGivenSeed) {
    const auto mdp = random_mdp(5, 3, 0.9, 11);
    const auto pi = uniform_policy(mdp);
    Rng a = make_rng(42), b = make_rng(42);
    for (int i = 0; i < 50; ++i) {
        const auto x = sample_transition(mdp, pi, 2, a);
        const auto y = sample_transition(mdp, pi, 2, b);
        EXPECT_EQ(x.a, y.a);
        EXPECT_EQ(x.s_next, y.s_next);
        EXPECT_EQ(x.r, y.r);
    }
}

TEST(SampleTransition, BinomialFrequency) {
    MdpInput in;
    in.n_states = 2;
    in.n_actions = 1;
    in.gamma = 0.5;
    in.transition = {0.3, 0.7, 0.5, 0.5};
    in.reward = {0.0, 0.0};
    const auto mdp = build_mdp(in);
    const auto pi = uniform_policy(mdp);
    Rng rng = make_rng(2024);
    const int n = 10000;
    int hits = 0;
    for (int i = 0; i < n; ++i) hits += sample_transition(mdp, pi, 0, rng).s_next == 1;
    EXPECT_LE(std::abs(hits / double(n) - 0.7), 3.0 * std::sqrt(0.21 / n));
}

// Pearson chi-square per (s,a) row against P; critical value for df=4 at 1e-3.
TEST(SampleTransition, ChiSquareGoodnessOfFit) {
    constexpr double kCritical = 18.4668;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto mdp = random_mdp(5, 2, 0.9, seed);
        Matrix probs(5, 2);
        probs.col(0).setConstant(1.0);
        probs.col(1).setConstant(0.0);
        const auto pi = fixed_policy(probs);
        Rng rng = make_rng(seed, 99);
        const int n = 4000;
        for (StateId s = 0; s < 5; ++s) {
            std::vector<int> counts(5, 0);
            for (int i = 0; i < n; ++i) ++counts[sample_transition(mdp, pi, s, rng).s_next];
            double chi2 = 0.0;
            for (StateId k = 0; k < 5; ++k) {
                const double expect = n * mdp.p(s, 0, k);
                chi2 += (counts[k] - expect) * (counts[k] - expect) / expect;
            }
            EXPECT_LT(chi2, kCritical) << "seed " << seed << " state " << s;
        }
    }
}

TEST(Bellman, ZeroContinuation) {
    MdpInput in = flip_chain();
    in.reward = {1.0, 1.0};
    const auto mdp = build_mdp(in);
    const QTable tq = bellman_optimality(mdp, QTable::Zero(2, 1));
    EXPECT_EQ(tq(0, 0), 1.0);
    EXPECT_EQ(tq(1, 0), 1.0);
}

TEST(Bellman, ContractionOnRandomPairs) {
    for (std::uint64_t seed : {1u, 7u, 19u}) {
        const auto mdp = random_mdp(4, 3, 0.8, seed);
        Rng rng = make_rng(seed, 5);
        std::normal_distribution<double> normal(0.0, 3.0);
        for (int i = 0; i < 100; ++i) {
            QTable q1(4, 3), q2(4, 3);
            for (Eigen::Index k = 0; k < q1.size(); ++k) {
                q1.data()[k] = normal(rng);
                q2.data()[k] = normal(rng);
            }
            const double lhs = (bellman_optimality(mdp, q1) - bellman_optimality(mdp, q2)).cwiseAbs().maxCoeff();
            const double rhs = mdp.gamma() * (q1 - q2).cwiseAbs().maxCoeff();
            EXPECT_LE(lhs, rhs * (1 + 1e-12) + 1e-15);
        }
    }
}

TEST(ValueIteration, GeometricSeries) {
    MdpInput in = flip_chain(0.5);
    in.reward = {1.0, 1.0};
    const auto res = value_iteration(build_mdp(in), 1e-12);
    EXPECT_NEAR(res.q(0, 0), 2.0, 1e-9);
    EXPECT_NEAR(res.q(1, 0), 2.0, 1e-9);
    EXPECT_GT(res.iterations, 1u);
}

TEST(ValueIteration, NoContinuationValue) {
    const auto base = random_mdp(4, 2, 0.5, 3);
    const auto mdp = with_gamma(base, 1e-15);
    const auto res = value_iteration(mdp, 1e-12);
    for (StateId s = 0; s < 4; ++s)
        for (ActionId a = 0; a < 2; ++a)
            EXPECT_NEAR(res.q(Eigen::Index(s), Eigen::Index(a)), mdp.reward(s, a), 1e-9);
}

TEST(ValueIteration, FixedPointAndTwoStartAgreement) {
    const auto mdp = random_mdp(5, 2, 0.9, 5);
    const auto res = value_iteration(mdp, 1e-11);
    EXPECT_LE((bellman_optimality(mdp, res.q) - res.q).cwiseAbs().maxCoeff(), 1e-9);

    // Independent start far from zero; iterate until the sup-norm change is tiny.
    QTable q = QTable::Constant(5, 2, 37.0);
    q(2, 1) = -50.0;
    for (int i = 0; i < 100000; ++i) {
        QTable next = bellman_optimality(mdp, q);
        const double change = (next - q).cwiseAbs().maxCoeff();
        q = next;
        if (change < 1e-13) break;
    }
    EXPECT_LE((q - res.q).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(ValueIteration, ErrorsAndCap) {
    const auto mdp = random_mdp(3, 2, 0.99, 1);
    EXPECT_THROW(value_iteration(mdp, 0.0), Error);
    try {
        value_iteration(mdp, 1e-12, 5);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::NonConvergence);
    }
}

TEST(Stationary, SymmetricAndClosedForm) {
    const auto sym = two_state_chain(0.25, 0.25);
    const Vector mu = stationary_distribution(sym, uniform_policy(sym));
    EXPECT_NEAR(mu[0], 0.5, 1e-12);
    EXPECT_NEAR(mu[1], 0.5, 1e-12);

    const auto asym = two_state_chain(0.2, 0.6);
    const Vector nu = stationary_distribution(asym, uniform_policy(asym));
    EXPECT_NEAR(nu[0], 0.75, 1e-11);
    EXPECT_NEAR(nu[1], 0.25, 1e-11);
}

TEST(Stationary, MatchesLongRunFrequency) {
    const auto mdp = random_mdp(5, 2, 0.9, 8);
    const auto pi = uniform_policy(mdp);
    const Matrix chain = induced_chain(mdp, pi);
    const Vector mu = stationary_distribution(chain);
    EXPECT_LE((mu.transpose() * chain - mu.transpose()).lpNorm<1>(), 1e-10);

    Rng rng = make_rng(8, 1);
    std::vector<double> visits(5, 0.0);
    StateId s = 0;
    const int n = 1'000'000;
    for (int i = 0; i < n; ++i) {
        visits[s] += 1.0;
        s = sample_transition(mdp, pi, s, rng).s_next;
    }
    for (StateId k = 0; k < 5; ++k) EXPECT_NEAR(visits[k] / n, mu[Eigen::Index(k)], 1e-2);
}

TEST(Stationary, RejectsReducibleAndPeriodic) {
    const auto periodic = build_mdp(flip_chain());
    EXPECT_EQ(kind_of([&] { stationary_distribution(periodic, uniform_policy(periodic)); }), ErrorKind::Periodic);

    MdpInput in = flip_chain();
    in.transition = {1.0, 0.0, 0.5, 0.5};
    const auto reducible = build_mdp(in);
    EXPECT_EQ(kind_of([&] { stationary_distribution(reducible, uniform_policy(reducible)); }), ErrorKind::Reducible);
}

TEST(TvMixing, FlipChainRate) {
    const auto mdp = two_state_chain(0.25, 0.25);
    const auto curve = tv_mixing_curve(mdp, uniform_policy(mdp), 30);
    EXPECT_LE(curve.distance[0], 1.0);
    EXPECT_NEAR(curve.envelope.rho, 0.5, 1e-6);
    EXPECT_NEAR(curve.envelope.lambda, 0.5, 1e-6);
}

TEST(TvMixing, RankOneChainMixesInOneStep) {
    MdpInput in;
    in.n_states = 3;
    in.n_actions = 1;
    in.gamma = 0.5;
    in.transition = {0.2, 0.3, 0.5, 0.2, 0.3, 0.5, 0.2, 0.3, 0.5};
    in.reward = {0, 0, 0};
    const auto mdp = build_mdp(in);
    const auto pi = uniform_policy(mdp);
    const Matrix chain = induced_chain(mdp, pi);
    const auto d = tv_distances(chain, stationary_distribution(chain), 5);
    EXPECT_GT(d[0], 0.0);
    EXPECT_NEAR(d[1], 0.0, 1e-15);
    EXPECT_EQ(kind_of([&] { tv_mixing_curve(mdp, pi, 5); }), ErrorKind::FitDegenerate);
    EXPECT_EQ(kind_of([&] { tv_mixing_curve(mdp, pi, 1); }), ErrorKind::InvalidArgument);
}

TEST(TvMixing, EnvelopeDominatesFitWindow) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto mdp = random_mdp(6, 2, 0.9, seed);
        const auto curve = tv_mixing_curve(mdp, uniform_policy(mdp), 40);
        const auto& env = curve.envelope;
        for (std::size_t t = env.fit_begin; t < env.fit_end; ++t)
            EXPECT_LE(curve.distance[t], env.lambda * std::pow(env.rho, double(t)) * (1 + 1e-6));
        for (double d : curve.distance) EXPECT_LE(d, 1.0);
    }
}

TEST(Policy, EpsilonGreedyAndTies) {
    QTable q(2, 3);
    q << 1.0, 3.0, 3.0,
         0.0, 0.0, 0.0;
    const auto pi = epsilon_greedy_policy(q, 0.3);
    EXPECT_NEAR(pi.prob(0, 1), 0.1 + 0.7, 1e-15);
    EXPECT_NEAR(pi.prob(0, 2), 0.1, 1e-15);
    EXPECT_NEAR(pi.prob(1, 0), 0.8, 1e-15);
    for (Eigen::Index s = 0; s < 2; ++s) EXPECT_NEAR(pi.probabilities.row(s).sum(), 1.0, 1e-15);
    EXPECT_THROW(epsilon_greedy_policy(q, 1.5), Error);

    Matrix bad(1, 2);
    bad << 0.5, 0.6;
    EXPECT_THROW(fixed_policy(bad), Error);
}

} // namespace
} // namespace nql
