#pragma once

// Small synthetic data sets shared by the unit tests.

#include "hglmm/design.hpp"
#include "hglmm/hierarchy.hpp"

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

namespace fixtures {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline MatrixXd gaussian_matrix(std::mt19937_64& g, Eigen::Index n, Eigen::Index p, double scale = 1.0) {
    std::normal_distribution<double> N(0.0, scale);
    MatrixXd X(n, p);
    for (Eigen::Index j = 0; j < p; ++j)
        for (Eigen::Index i = 0; i < n; ++i) X(i, j) = N(g);
    return X;
}

/// Symmetric square root; works for singular covariances.
inline MatrixXd chol_lower(const MatrixXd& S) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

/// Two-level (or one-level when leaves_per_group == 0) Gaussian data with
/// X_l = [1 or random] blocks drawn independently per level.
struct Truth {
    VectorXd beta;
    std::vector<MatrixXd> sigma;              // per level
    std::vector<std::vector<VectorXd>> u;     // [l-1][node in creation order]
    VectorXd eta;                             // per row
};

struct Generated {
    std::vector<std::vector<std::string>> labels;
    MatrixXd X;
    VectorXd y;
    Truth truth;
    std::vector<std::size_t> group_of_row;
    std::vector<std::size_t> leaf_of_row;  // creation order
};

/// Balanced tree: `groups` groups, each with `leaves` leaves (depth 2) or no
/// leaves (depth 1, leaves == 0), `n` rows per bottom node. q = {q0, q1[, q2]}.
/// The first fixed-effect column is an intercept when `intercept` is set;
/// random-effect columns are always random so leaves stay full rank.
inline Generated generate_gaussian(std::mt19937_64& g, std::size_t groups, std::size_t leaves, std::size_t n,
                                   const std::vector<Eigen::Index>& q, const std::vector<MatrixXd>& sigma,
                                   double phi, bool intercept = true) {
    const std::size_t depth = leaves == 0 ? 1 : 2;
    std::normal_distribution<double> N;
    Generated out;
    Eigen::Index p = 0;
    for (auto v : q) p += v;
    out.truth.beta = gaussian_matrix(g, q[0], 1).col(0);
    out.truth.sigma = sigma;
    out.truth.u.resize(depth);
    for (std::size_t i = 0; i < groups; ++i) out.truth.u[0].push_back(chol_lower(sigma[0]) * gaussian_matrix(g, q[1], 1).col(0));
    const std::size_t bottoms = depth == 1 ? groups : groups * leaves;
    if (depth == 2)
        for (std::size_t k = 0; k < bottoms; ++k)
            out.truth.u[1].push_back(chol_lower(sigma[1]) * gaussian_matrix(g, q[2], 1).col(0));
    const auto rows = static_cast<Eigen::Index>(bottoms * n);
    out.X = gaussian_matrix(g, rows, p);
    if (intercept) out.X.col(0).setOnes();
    out.y.resize(rows);
    out.truth.eta.resize(rows);
    Eigen::Index r = 0;
    for (std::size_t b = 0; b < bottoms; ++b) {
        const std::size_t grp = depth == 1 ? b : b / leaves;
        for (std::size_t k = 0; k < n; ++k, ++r) {
            double eta = out.X.row(r).head(q[0]).dot(out.truth.beta) + out.X.row(r).segment(q[0], q[1]).dot(out.truth.u[0][grp]);
            if (depth == 2) eta += out.X.row(r).tail(q[2]).dot(out.truth.u[1][b]);
            out.truth.eta(r) = eta;
            out.y(r) = eta + std::sqrt(phi) * N(g);
            std::vector<std::string> lab{"g" + std::to_string(grp)};
            if (depth == 2) lab.push_back("l" + std::to_string(b));
            out.labels.push_back(std::move(lab));
            out.group_of_row.push_back(grp);
            out.leaf_of_row.push_back(b);
        }
    }
    return out;
}

}  // namespace fixtures
