#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "nql/error.hpp"
#include "nql/types.hpp"

namespace nql {

/// Layer sizes of f(theta; x) = sqrt(m) W_L relu(W_{L-1} ... relu(W_1 x)).
/// W_1 is m x d, W_2..W_{L-1} are m x m, W_L is 1 x m. No biases.
struct NetShape {
    std::size_t d = 1;
    std::size_t m = 1;
    std::size_t L = 2;

    void validate() const {
        if (d < 1 || m < 1 || L < 2)
            fail(ErrorKind::InvalidArgument, "net shape needs d >= 1, m >= 1, L >= 2 (got d=" + std::to_string(d) +
                                                 ", m=" + std::to_string(m) + ", L=" + std::to_string(L) + ")");
    }

    std::size_t rows(std::size_t l) const { return l + 1 == L ? 1 : m; }
    std::size_t cols(std::size_t l) const { return l == 0 ? d : m; }

    std::size_t offset(std::size_t l) const {
        if (l == 0) return 0;
        return m * d + (l - 1) * m * m;
    }

    /// m*d + (L-2)*m^2 + m.
    std::size_t n_params() const { return m * d + (L - 2) * m * m + m; }

    bool operator==(const NetShape&) const = default;
};

using LayerMap = Eigen::Map<RowMatrix>;
using ConstLayerMap = Eigen::Map<const RowMatrix>;

/// Network parameters. The flat vector is the concatenation of every layer
/// matrix stored row-major, in layer order.
struct Theta {
    NetShape shape;
    Vector flat;

    Theta() = default;
    explicit Theta(const NetShape& s) : shape(s), flat(Vector::Zero(static_cast<Eigen::Index>(s.n_params()))) {
        shape.validate();
    }
    Theta(const NetShape& s, Vector values) : shape(s), flat(std::move(values)) {
        shape.validate();
        if (static_cast<std::size_t>(flat.size()) != shape.n_params())
            fail(ErrorKind::ShapeMismatch, "flat parameter vector has wrong length");
    }

    std::size_t n_layers() const { return shape.L; }

    ConstLayerMap layer(std::size_t l) const {
        return {flat.data() + shape.offset(l), static_cast<Eigen::Index>(shape.rows(l)),
                static_cast<Eigen::Index>(shape.cols(l))};
    }
    LayerMap layer(std::size_t l) {
        return {flat.data() + shape.offset(l), static_cast<Eigen::Index>(shape.rows(l)),
                static_cast<Eigen::Index>(shape.cols(l))};
    }

    /// Flat segment of layer l in a vector laid out like `flat`.
    static auto segment(const NetShape& s, Vector& v, std::size_t l) {
        return v.segment(static_cast<Eigen::Index>(s.offset(l)), static_cast<Eigen::Index>(s.rows(l) * s.cols(l)));
    }
    static auto segment(const NetShape& s, const Vector& v, std::size_t l) {
        return v.segment(static_cast<Eigen::Index>(s.offset(l)), static_cast<Eigen::Index>(s.rows(l) * s.cols(l)));
    }
};

inline void require_same_shape(const Theta& a, const Theta& b) {
    if (!(a.shape == b.shape)) fail(ErrorKind::ShapeMismatch, "parameter shapes differ");
}

/// Every entry i.i.d. N(0, 1/m).
inline Theta init_gaussian(const NetShape& shape, Rng& rng) {
    Theta theta(shape);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(shape.m)));
    for (Eigen::Index i = 0; i < theta.flat.size(); ++i) theta.flat[i] = normal(rng);
    return theta;
}

inline double relu(double z) { return z > 0.0 ? z : 0.0; }

inline double forward(const Theta& theta, const Vector& x) {
    const auto& s = theta.shape;
    if (static_cast<std::size_t>(x.size()) != s.d) fail(ErrorKind::ShapeMismatch, "input has wrong dimension");
    Vector h = x;
    for (std::size_t l = 0; l + 1 < s.L; ++l) h = (theta.layer(l) * h).unaryExpr(&relu);
    return std::sqrt(static_cast<double>(s.m)) * theta.layer(s.L - 1).row(0).dot(h);
}

struct ValueAndGradient {
    double value = 0.0;
    Vector gradient;
};

/// Backpropagation through the network. relu'(0) is taken as 0.
inline ValueAndGradient value_and_gradient(const Theta& theta, const Vector& x) {
    const auto& s = theta.shape;
    if (static_cast<std::size_t>(x.size()) != s.d) fail(ErrorKind::ShapeMismatch, "input has wrong dimension");
    const double scale = std::sqrt(static_cast<double>(s.m));

    // acts[0] = x, acts[l+1] = relu(pre[l]).
    std::vector<Vector> pre(s.L - 1), acts(s.L);
    acts[0] = x;
    for (std::size_t l = 0; l + 1 < s.L; ++l) {
        pre[l] = theta.layer(l) * acts[l];
        acts[l + 1] = pre[l].unaryExpr(&relu);
    }

    ValueAndGradient out;
    out.value = scale * theta.layer(s.L - 1).row(0).dot(acts[s.L - 1]);
    out.gradient = Vector::Zero(static_cast<Eigen::Index>(s.n_params()));
    Theta::segment(s, out.gradient, s.L - 1) = scale * acts[s.L - 1];

    Vector back = scale * theta.layer(s.L - 1).row(0).transpose();
    for (std::size_t l = s.L - 1; l-- > 0;) {
        back = (pre[l].array() > 0.0).select(back, 0.0);
        LayerMap block(out.gradient.data() + s.offset(l), static_cast<Eigen::Index>(s.rows(l)),
                       static_cast<Eigen::Index>(s.cols(l)));
        block.noalias() = back * acts[l].transpose();
        if (l > 0) back = theta.layer(l).transpose() * back;
    }
    return out;
}

inline Vector gradient(const Theta& theta, const Vector& x) { return value_and_gradient(theta, x).gradient; }

// ---------------------------------------------------------------------------
// Linearization around a frozen snapshot
// ---------------------------------------------------------------------------

/// f_hat(theta; x) = f(theta0; x) + <grad f(theta0; x), theta - theta0>.
///
/// Inputs registered at construction are addressed by key (state-action id);
/// their anchor value and gradient are computed on first use and then never
/// change. Concurrent first queries for one key are serialized per key.
class LinearizedModel {
public:
    LinearizedModel(Theta theta0, std::vector<Vector> inputs)
        : theta0_(std::move(theta0)), inputs_(std::move(inputs)), entries_(inputs_.size()),
          once_(std::make_unique<std::once_flag[]>(inputs_.size())) {
        for (const auto& x : inputs_)
            if (static_cast<std::size_t>(x.size()) != theta0_.shape.d)
                fail(ErrorKind::ShapeMismatch, "registered input has wrong dimension");
    }

    const Theta& theta0() const { return theta0_; }
    std::size_t n_keys() const { return inputs_.size(); }
    const Vector& input(std::size_t key) const { return inputs_.at(key); }

    double anchor_value(std::size_t key) const { return entry(key).value; }
    const Vector& anchor_gradient(std::size_t key) const { return entry(key).gradient; }

    double value(const Theta& theta, std::size_t key) const {
        require_same_shape(theta, theta0_);
        const auto& e = entry(key);
        return e.value + e.gradient.dot(theta.flat - theta0_.flat);
    }

    /// Same as value() but with a precomputed displacement theta - theta0.
    double value_at_displacement(const Vector& displacement, std::size_t key) const {
        const auto& e = entry(key);
        return e.value + e.gradient.dot(displacement);
    }

    void precompute_all() const {
        for (std::size_t k = 0; k < inputs_.size(); ++k) (void)entry(k);
    }

private:
    const ValueAndGradient& entry(std::size_t key) const {
        if (key >= inputs_.size()) fail(ErrorKind::InvalidArgument, "unknown input key " + std::to_string(key));
        std::call_once(once_[key], [&] { entries_[key] = value_and_gradient(theta0_, inputs_[key]); });
        return entries_[key];
    }

    Theta theta0_;
    std::vector<Vector> inputs_;
    mutable std::vector<ValueAndGradient> entries_;
    mutable std::unique_ptr<std::once_flag[]> once_;
};

inline LinearizedModel linearize(const Theta& theta0, std::vector<Vector> inputs = {}) {
    return LinearizedModel(theta0, std::move(inputs));
}

/// Uncached evaluation at an arbitrary input.
inline double linear_forward(const LinearizedModel& model, const Theta& theta, const Vector& x) {
    require_same_shape(theta, model.theta0());
    const auto anchor = value_and_gradient(model.theta0(), x);
    return anchor.value + anchor.gradient.dot(theta.flat - model.theta0().flat);
}

// ---------------------------------------------------------------------------
// Per-layer Frobenius ball
// ---------------------------------------------------------------------------

/// omega = coeff * m^{-1/2} * L^{-9/4}.
inline double theorem_radius(std::size_t m, std::size_t L, double coeff = 1.0) {
    return coeff / std::sqrt(static_cast<double>(m)) * std::pow(static_cast<double>(L), -2.25);
}

struct BallConstraint {
    Theta theta0;
    double omega = 0.0;

    bool contains(const Theta& theta, double slack = 0.0) const;
};

inline std::vector<double> layer_distances(const Theta& theta, const Theta& theta0) {
    require_same_shape(theta, theta0);
    std::vector<double> out(theta.n_layers());
    for (std::size_t l = 0; l < out.size(); ++l)
        out[l] = (Theta::segment(theta.shape, theta.flat, l) - Theta::segment(theta.shape, theta0.flat, l)).norm();
    return out;
}

inline bool BallConstraint::contains(const Theta& theta, double slack) const {
    for (double dist : layer_distances(theta, theta0))
        if (dist > omega + slack) return false;
    return true;
}

struct ProjectionInfo {
    std::vector<double> distances; // after projection
    std::vector<bool> active;      // layer was pulled back onto its sphere
    bool any_active() const {
        for (bool a : active)
            if (a) return true;
        return false;
    }
};

/// Exact Euclidean projection of each layer onto its Frobenius ball, in place.
inline ProjectionInfo project_ball_inplace(Theta& theta, const BallConstraint& ball) {
    require_same_shape(theta, ball.theta0);
    ProjectionInfo info;
    info.distances.resize(theta.n_layers());
    info.active.resize(theta.n_layers(), false);
    for (std::size_t l = 0; l < theta.n_layers(); ++l) {
        auto w = Theta::segment(theta.shape, theta.flat, l);
        const auto w0 = Theta::segment(ball.theta0.shape, ball.theta0.flat, l);
        const double dist = (w - w0).norm();
        if (dist > ball.omega) {
            w = w0 + (ball.omega / dist) * (w - w0);
            info.active[l] = true;
            info.distances[l] = (w - w0).norm();
        } else {
            info.distances[l] = dist;
        }
    }
    return info;
}

inline Theta project_ball(Theta theta, const BallConstraint& ball) {
    project_ball_inplace(theta, ball);
    return theta;
}

/// Displacement whose every layer block is uniform on the sphere of the given radius.
inline Vector sphere_perturbation(const NetShape& shape, double radius, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector v(static_cast<Eigen::Index>(shape.n_params()));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
    for (std::size_t l = 0; l < shape.L; ++l) {
        auto block = Theta::segment(shape, v, l);
        const double n = block.norm();
        if (n > 0.0) block *= radius / n;
    }
    return v;
}

// ---------------------------------------------------------------------------
// Snapshot files
// ---------------------------------------------------------------------------

// Text layout:
//   nql-theta 1
//   <d> <m> <L>
//   one line per matrix row, layers in order, values in %.17g
inline void write_theta(std::ostream& os, const Theta& theta) {
    os << "nql-theta 1\n" << theta.shape.d << ' ' << theta.shape.m << ' ' << theta.shape.L << '\n';
    char buf[40];
    for (std::size_t l = 0; l < theta.n_layers(); ++l) {
        const auto w = theta.layer(l);
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            for (Eigen::Index j = 0; j < w.cols(); ++j) {
                std::snprintf(buf, sizeof buf, "%.17g", w(i, j));
                if (j) os << ' ';
                os << buf;
            }
            os << '\n';
        }
    }
}

inline Theta read_theta(std::istream& is) {
    std::string magic;
    int version = 0;
    if (!(is >> magic >> version) || magic != "nql-theta" || version != 1)
        fail(ErrorKind::ParseError, "not an nql-theta v1 snapshot");
    NetShape shape;
    if (!(is >> shape.d >> shape.m >> shape.L)) fail(ErrorKind::ParseError, "missing shape header");
    shape.validate();
    Theta theta(shape);
    std::string token;
    for (Eigen::Index i = 0; i < theta.flat.size(); ++i) {
        if (!(is >> token)) fail(ErrorKind::ParseError, "snapshot truncated at value " + std::to_string(i));
        char* end = nullptr;
        theta.flat[i] = std::strtod(token.c_str(), &end);
        if (end != token.c_str() + token.size()) fail(ErrorKind::ParseError, "bad number '" + token + "' in snapshot");
    }
    if (is >> token) fail(ErrorKind::ParseError, "trailing data after snapshot");
    return theta;
}

inline void save_theta(const std::string& path, const Theta& theta) {
    std::ofstream os(path);
    if (!os) fail(ErrorKind::Io, "cannot write " + path);
    write_theta(os, theta);
}

inline Theta load_theta(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Io, "cannot read " + path);
    return read_theta(is);
}

} // namespace nql
