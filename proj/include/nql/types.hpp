#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace nql {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using StateId = std::size_t;
using ActionId = std::size_t;

/// Rows are states, columns are actions.
using QTable = Matrix;

using Rng = std::mt19937_64;

/// Independent stream for (seed, purpose); used so that e.g. network
/// initialization and trajectory sampling never share draws.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Lowest index wins ties.
template <class Row>
inline std::size_t argmax_lowest(const Row& row) {
    std::size_t best = 0;
    for (Eigen::Index i = 1; i < row.size(); ++i)
        if (row(i) > row(static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(i);
    return best;
}

} // namespace nql
