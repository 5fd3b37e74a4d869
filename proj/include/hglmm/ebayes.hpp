#pragma once

#include "hglmm/error.hpp"
#include "hglmm/hierarchy.hpp"
#include "hglmm/linalg.hpp"
#include "hglmm/moment_fit.hpp"
#include "hglmm/parallel.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace hglmm {

struct NodeRefinement {
    VectorXd b_bar;          // refined path effects, length p_l
    VectorXd u_hat;          // posterior mean of the node's own random effect, length q_l
    MatrixXd posterior_cov;  // q_l x q_l
};

/// Refined estimates for every node; levels[l][i] follows the hierarchy's
/// node order. The root carries b_bar = beta_bar and empty u_hat.
struct RefinedEstimates {
    std::vector<std::vector<NodeRefinement>> levels;

    const NodeRefinement& at(std::size_t l, std::size_t i) const { return levels.at(l).at(i); }
};

struct RandomEffectPosterior {
    VectorXd mean;
    MatrixXd cov;
};

/// Posterior of u in the Gaussian regression Y = Z2 u + e, e ~ N(0, I),
/// u ~ N(0, sigma). sigma may be singular: u is restricted to its support,
/// so components in the null space of sigma are exactly 0.
inline RandomEffectPosterior gaussian_posterior(const MatrixXd& Z2, const VectorXd& Y, const MatrixXd& sigma) {
    const auto q = sigma.rows();
    RandomEffectPosterior out{VectorXd::Zero(q), MatrixXd::Zero(q, q)};
    SymEigen es = sym_eigen(sigma);
    const double lmax = es.values.size() ? es.values(0) : 0.0;
    if (!(lmax > 0.0)) return out;
    Eigen::Index s = 0;
    while (s < es.values.size() && es.values(s) > 1e-12 * lmax) ++s;
    // Scaled support basis: u = Q diag(sqrt(lambda)) v, v ~ N(0, I).
    const MatrixXd F = es.vectors.leftCols(s) * es.values.head(s).cwiseSqrt().asDiagonal();
    if (Z2.rows() == 0) {
        out.cov = symmetrize(F * F.transpose());
        return out;
    }
    // With G = Z2 F = U diag(s) R^T (full R), (I + G^T G)^-1 = R diag(1 / (1 + s^2)) R^T
    // and (I + G^T G)^-1 G^T = R diag(s / (1 + s^2)) U^T, both free of cancellation.
    const MatrixXd G = Z2 * F;
    Eigen::JacobiSVD<MatrixXd> svd(G, Eigen::ComputeThinU | Eigen::ComputeFullV);
    const VectorXd& sv = svd.singularValues();
    const MatrixXd& R = svd.matrixV();
    VectorXd e = VectorXd::Ones(s);
    VectorXd shrink = VectorXd::Zero(sv.size());
    for (Eigen::Index k = 0; k < sv.size(); ++k) {
        e(k) = 1.0 / (1.0 + sv(k) * sv(k));
        shrink(k) = sv(k) * e(k);
    }
    const VectorXd v = R.leftCols(sv.size()) * shrink.cwiseProduct(svd.matrixU().transpose() * Y);
    const MatrixXd FR = F * R;
    out.mean = F * v;
    out.cov = symmetrize(FR * e.asDiagonal() * FR.transpose());
    return out;
}

/// Top-down empirical Bayes refinement of all node effects.
inline RefinedEstimates refine(const FittedModel& model, std::size_t jobs = 1) {
    const auto& h = model.hierarchy;
    const std::size_t d = h.depth();
    if (model.estimates.size() != d + 1 || model.sigma_bars.size() != d)
        throw UsageError("refine: fitted model is incomplete");

    RefinedEstimates out;
    out.levels.resize(d + 1);
    out.levels[0].push_back({model.beta_bar, VectorXd(0), MatrixXd(0, 0)});
    for (std::size_t l = 0; l < d; ++l) {
        const auto& children = h.level(l + 1);
        const auto p = static_cast<Eigen::Index>(model.dims.p(l));
        const auto q = static_cast<Eigen::Index>(model.dims.q(l + 1));
        const MatrixXd& sigma = model.sigma(l + 1);
        auto& next = out.levels[l + 1];
        next.resize(children.size());
        parallel_for(children.size(), jobs, [&](std::size_t k) {
            const auto& est = model.estimates[l + 1][k];
            const VectorXd& parent_b = out.levels[l][children[k].parent].b_bar;
            // Y = Z b_hat - Z1 b_bar_parent with Z = diag(D) V^T.
            const MatrixXd V1 = est.V.topRows(p);
            const MatrixXd V2 = est.V.bottomRows(q);
            const VectorXd Y = est.D.cwiseProduct(est.V.transpose() * est.b_hat - V1.transpose() * parent_b);
            const MatrixXd Z2 = est.D.asDiagonal() * V2.transpose();
            RandomEffectPosterior post = gaussian_posterior(Z2, Y, sigma);
            NodeRefinement nr;
            nr.b_bar.resize(p + q);
            nr.b_bar << parent_b, post.mean;
            nr.u_hat = std::move(post.mean);
            nr.posterior_cov = std::move(post.cov);
            next[k] = std::move(nr);
        });
    }
    return out;
}

struct NodeEffectRow {
    NodeId node;
    std::string label;
    std::size_t n_obs = 0;
    double effect = 0.0;
    double posterior_sd = 0.0;
};

/// Per-node random effect for one covariate at a level, with its posterior
/// standard deviation, sorted by observation count (descending).
inline std::vector<NodeEffectRow> node_effect_report(const RefinedEstimates& refined, const Hierarchy& h,
                                                     std::size_t level, std::size_t covariate) {
    if (level < 1 || level > h.depth())
        throw UsageError("report level must be in 1.." + std::to_string(h.depth()));
    const auto& nodes = h.level(level);
    std::vector<NodeEffectRow> rows;
    rows.reserve(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& r = refined.at(level, i);
        if (covariate >= static_cast<std::size_t>(r.u_hat.size()))
            throw UsageError("covariate index " + std::to_string(covariate) + " out of range for level " +
                             std::to_string(level));
        const auto c = static_cast<Eigen::Index>(covariate);
        rows.push_back({nodes[i].id, nodes[i].label, nodes[i].n_obs, r.u_hat(c),
                        std::sqrt(std::max(0.0, r.posterior_cov(c, c)))});
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const NodeEffectRow& a, const NodeEffectRow& b) { return a.n_obs > b.n_obs; });
    return rows;
}

}  // namespace hglmm
