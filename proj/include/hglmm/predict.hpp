#pragma once

#include "hglmm/ebayes.hpp"
#include "hglmm/error.hpp"
#include "hglmm/hierarchy.hpp"
#include "hglmm/leaf_fit.hpp"
#include "hglmm/linalg.hpp"
#include "hglmm/moment_fit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hglmm {

/// Everything needed to score new observations: fixed effects, refined
/// random effects per node, and the hierarchy used to resolve paths.
struct ScoringModel {
    Family family = Family::gaussian;
    EffectDims dims;
    Hierarchy hierarchy;
    VectorXd beta;
    std::vector<MatrixXd> sigma;  // [l-1]
    double phi = 1.0;
    // [l][i] for l = 1..d; index 0 unused (root)
    std::vector<std::vector<VectorXd>> u_hat;
    std::vector<std::vector<MatrixXd>> posterior_cov;

    static ScoringModel from_fit(const FittedModel& fit, const RefinedEstimates& refined) {
        ScoringModel m;
        m.family = fit.family;
        m.dims = fit.dims;
        m.hierarchy = fit.hierarchy;
        m.beta = fit.beta_bar;
        m.phi = fit.phi_bar;
        for (const auto& lc : fit.sigma_bars) m.sigma.push_back(lc.sigma_bar);
        const std::size_t d = fit.hierarchy.depth();
        m.u_hat.resize(d + 1);
        m.posterior_cov.resize(d + 1);
        for (std::size_t l = 1; l <= d; ++l) {
            for (const auto& nr : refined.levels.at(l)) {
                m.u_hat[l].push_back(nr.u_hat);
                m.posterior_cov[l].push_back(nr.posterior_cov);
            }
        }
        return m;
    }
};

/// One observation to score. `node` may be shorter than d when the deepest
/// levels of its path were never observed.
struct PredictionRequest {
    VectorXd x;                      // fixed features, q_0
    std::vector<VectorXd> x_levels;  // per-level random features, q_1..q_d
    NodeId node;
};

/// eta = x^T beta + sum_l x_l^T u_{pi(i, l)}, with u = 0 below the deepest
/// known ancestor.
inline double linear_predictor(const PredictionRequest& req, const ScoringModel& model) {
    const std::size_t d = model.dims.depth();
    if (static_cast<std::size_t>(req.x.size()) != model.dims.q(0))
        throw UsageError("fixed feature vector has length " + std::to_string(req.x.size()) + ", expected " +
                         std::to_string(model.dims.q(0)));
    if (req.x_levels.size() != d) throw UsageError("expected random features for " + std::to_string(d) + " levels");
    for (std::size_t l = 1; l <= d; ++l)
        if (static_cast<std::size_t>(req.x_levels[l - 1].size()) != model.dims.q(l))
            throw UsageError("random feature vector for level " + std::to_string(l) + " has wrong length");
    if (req.node.depth() > d) throw UsageError("node " + req.node.to_string() + " deeper than the model");

    double eta = req.x.dot(model.beta);
    const std::size_t known = req.node.depth();
    if (known == 0) return eta;
    const std::size_t idx = model.hierarchy.find(req.node);
    if (idx == Hierarchy::npos) throw UsageError("node " + req.node.to_string() + " is not in the model");
    const auto path = model.hierarchy.path_indices(known, idx);
    for (std::size_t l = 1; l <= known; ++l) eta += req.x_levels[l - 1].dot(model.u_hat[l][path[l]]);
    return eta;
}

inline double inv_logit(double eta) { return detail::inv_logit(eta); }

inline double predict_response(double eta, Family family) {
    return family == Family::logistic ? inv_logit(eta) : eta;
}

// ---------------------------------------------------------------------------
// Global and local baselines

/// Stacks the fixed-effect columns (first q0) of a set of leaves.
inline std::pair<MatrixXd, VectorXd> stack_fixed(std::span<const LeafBlock* const> blocks, std::size_t q0) {
    Eigen::Index n = 0;
    for (const auto* b : blocks) n += b->y.size();
    MatrixXd X(n, static_cast<Eigen::Index>(q0));
    VectorXd y(n);
    Eigen::Index row = 0;
    for (const auto* b : blocks) {
        const auto m = b->y.size();
        X.middleRows(row, m) = b->X.leftCols(static_cast<Eigen::Index>(q0));
        y.segment(row, m) = b->y;
        row += m;
    }
    return {std::move(X), std::move(y)};
}

inline VectorXd fit_glm(const MatrixXd& X, const VectorXd& y, Family family, const FirthOptions& firth = {}) {
    return family == Family::gaussian ? least_squares_min_norm(X, y) : firth_logistic(X, y, firth);
}

/// Single pooled GLM on the fixed features of all leaves.
inline VectorXd fit_global_baseline(const std::vector<LeafBlock>& blocks, std::size_t q0, Family family,
                                    const FirthOptions& firth = {}) {
    std::vector<const LeafBlock*> ptrs;
    for (const auto& b : blocks) ptrs.push_back(&b);
    auto [X, y] = stack_fixed(ptrs, q0);
    return fit_glm(X, y, family, firth);
}

/// Independent GLM per node of `level`, each fit on the fixed features of the
/// leaves below it. Returns coefficients indexed like hierarchy.level(level).
inline std::vector<VectorXd> fit_local_baseline(const std::vector<LeafBlock>& blocks, const Hierarchy& h,
                                                std::size_t level, std::size_t q0, Family family,
                                                const FirthOptions& firth = {}) {
    const std::size_t d = h.depth();
    if (level < 1 || level > d) throw UsageError("local baseline level must be in 1.." + std::to_string(d));
    std::vector<std::vector<const LeafBlock*>> members(h.level_size(level));
    for (std::size_t k = 0; k < blocks.size(); ++k) members[h.path_indices(d, k)[level]].push_back(&blocks[k]);
    std::vector<VectorXd> out(members.size());
    for (std::size_t g = 0; g < members.size(); ++g) {
        if (members[g].empty()) throw DataError("local baseline group " + h.node(level, g).id.to_string() + " is empty");
        auto [X, y] = stack_fixed(members[g], q0);
        out[g] = fit_glm(X, y, family, firth);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

inline double fixed_effect_loss(const VectorXd& beta, const VectorXd& beta_hat) {
    return (beta - beta_hat).squaredNorm();
}

/// tr{(S_hat S^-1 - I)^2}.
inline double covariance_loss(const MatrixXd& sigma, const MatrixXd& sigma_hat) {
    const auto q = sigma.rows();
    const MatrixXd M = sigma.ldlt().solve(sigma_hat.transpose()).transpose() - MatrixXd::Identity(q, q);
    return (M * M).trace();
}

/// |N_l|^-1 sum_i || S^-1/2 (u_i - u_hat_i) ||^2.
inline double random_effect_loss(const MatrixXd& sigma, std::span<const VectorXd> u, std::span<const VectorXd> u_hat) {
    if (u.size() != u_hat.size()) throw UsageError("random_effect_loss: size mismatch");
    if (u.empty()) return 0.0;
    const MatrixXd W = inverse_sqrt_pd(sigma);
    double acc = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) acc += (W * (u[i] - u_hat[i])).squaredNorm();
    return acc / static_cast<double>(u.size());
}

struct PredictionLoss {
    double value = 0.0;
    std::size_t clamped = 0;  // fitted means clamped away from {0, 1}
};

/// Mean Bernoulli KL divergence KL(mu || mu_hat).
inline PredictionLoss kl_prediction_loss(std::span<const double> mu, std::span<const double> mu_hat) {
    if (mu.size() != mu_hat.size()) throw UsageError("kl_prediction_loss: size mismatch");
    constexpr double eps = 1e-12;
    PredictionLoss out;
    double acc = 0.0;
    for (std::size_t k = 0; k < mu.size(); ++k) {
        double m = mu[k];
        double mh = mu_hat[k];
        if (mh < eps || mh > 1.0 - eps) {
            mh = std::clamp(mh, eps, 1.0 - eps);
            ++out.clamped;
        }
        double term = 0.0;
        if (m > 0.0) term += m * std::log(m / mh);
        if (m < 1.0) term += (1.0 - m) * std::log((1.0 - m) / (1.0 - mh));
        acc += term;
    }
    out.value = mu.empty() ? 0.0 : acc / static_cast<double>(mu.size());
    return out;
}

/// Mean of (mu - mu_hat)^2 / phi.
inline double gaussian_prediction_loss(std::span<const double> mu, std::span<const double> mu_hat, double phi) {
    if (mu.size() != mu_hat.size()) throw UsageError("gaussian_prediction_loss: size mismatch");
    double acc = 0.0;
    for (std::size_t k = 0; k < mu.size(); ++k) acc += (mu[k] - mu_hat[k]) * (mu[k] - mu_hat[k]);
    return mu.empty() ? 0.0 : acc / (phi * static_cast<double>(mu.size()));
}

struct Misclassification {
    double rate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::size_t n = 0;

    double standard_error() const { return n ? std::sqrt(rate * (1.0 - rate) / static_cast<double>(n)) : 0.0; }
};

/// Error rate of the rule p >= threshold, with a normal-approximation 95% CI.
inline Misclassification misclassification(std::span<const double> prob, std::span<const double> labels,
                                           double threshold = 0.5) {
    if (prob.size() != labels.size()) throw UsageError("misclassification: size mismatch");
    if (prob.empty()) throw UsageError("misclassification: empty evaluation set");
    std::size_t wrong = 0;
    for (std::size_t k = 0; k < prob.size(); ++k) {
        if (labels[k] != 0.0 && labels[k] != 1.0) throw UsageError("misclassification: labels must be 0 or 1");
        const double pred = prob[k] >= threshold ? 1.0 : 0.0;
        if (pred != labels[k]) ++wrong;
    }
    Misclassification m;
    m.n = prob.size();
    m.rate = static_cast<double>(wrong) / static_cast<double>(m.n);
    const double half = 1.96 * m.standard_error();
    m.ci_low = m.rate - half;
    m.ci_high = m.rate + half;
    return m;
}

/// Simulation-mode evaluation summary.
struct EvalReport {
    double fixed_effect_loss = 0.0;
    std::vector<double> covariance_loss;     // per level
    std::vector<double> random_effect_loss;  // per level
    double prediction_loss = 0.0;
    std::optional<Misclassification> misclassification;
    double seconds = 0.0;
};

// ---------------------------------------------------------------------------
// Local-vs-global comparison by group size

struct BucketRow {
    std::string label;
    std::size_t n_rows = 0;
    double local_error = 0.0;
    double local_se = 0.0;
    double global_error = 0.0;
    double global_se = 0.0;
};

/// Group-size buckets used for the local/global comparison table.
inline constexpr std::array<std::pair<double, double>, 4> kBucketEdges{
    {{10, 20}, {20, 50}, {50, 100}, {100, 1000}}};

inline std::optional<std::size_t> bucket_of(std::size_t group_size) {
    const double n = static_cast<double>(group_size);
    if (n >= kBucketEdges[0].first && n <= kBucketEdges[0].second) return 0;
    for (std::size_t b = 1; b < kBucketEdges.size(); ++b)
        if (n > kBucketEdges[b].first && n <= kBucketEdges[b].second) return b;
    return std::nullopt;
}

/// Per-bucket misclassification of local and global predictions. Each row
/// carries its group's training size; SEs are binomial.
inline std::vector<BucketRow> compare_by_bucket(std::span<const std::size_t> group_size_of_row,
                                                std::span<const double> labels, std::span<const double> p_local,
                                                std::span<const double> p_global) {
    const std::array<const char*, 4> names{"[10,20]", "(20,50]", "(50,100]", "(100,1000]"};
    std::array<std::size_t, 4> n{}, wl{}, wg{};
    for (std::size_t k = 0; k < labels.size(); ++k) {
        auto b = bucket_of(group_size_of_row[k]);
        if (!b) continue;
        ++n[*b];
        if ((p_local[k] >= 0.5 ? 1.0 : 0.0) != labels[k]) ++wl[*b];
        if ((p_global[k] >= 0.5 ? 1.0 : 0.0) != labels[k]) ++wg[*b];
    }
    std::vector<BucketRow> rows;
    for (std::size_t b = 0; b < 4; ++b) {
        BucketRow r;
        r.label = names[b];
        r.n_rows = n[b];
        if (n[b]) {
            const double nn = static_cast<double>(n[b]);
            r.local_error = static_cast<double>(wl[b]) / nn;
            r.global_error = static_cast<double>(wg[b]) / nn;
            r.local_se = std::sqrt(r.local_error * (1 - r.local_error) / nn);
            r.global_se = std::sqrt(r.global_error * (1 - r.global_error) / nn);
        }
        rows.push_back(r);
    }
    return rows;
}

}  // namespace hglmm
