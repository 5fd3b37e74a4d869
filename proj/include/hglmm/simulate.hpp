#pragma once

#include "hglmm/design.hpp"
#include "hglmm/ebayes.hpp"
#include "hglmm/error.hpp"
#include "hglmm/moment_fit.hpp"
#include "hglmm/predict.hpp"
#include "hglmm/rng.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

namespace hglmm {

/// Two-level data-generating process: t fixed effects, inverse-Wishart
/// covariances, Pareto-skewed allocation, Rademacher predictors.
struct SimConfig {
    std::size_t N = 1000;
    std::size_t groups = 50;   // |N_1|
    std::size_t leaves = 500;  // |N_2|
    std::size_t q0 = 5, q1 = 5, q2 = 5;
    Family family = Family::logistic;
    std::uint64_t seed = 0;
    std::uint64_t replicate = 0;
    double t_dof = 4.0;
    double wishart_dof = 10.0;
    double wishart_scale = 0.1;
    double pareto_scale = 1.0;
    double pareto_shape = 1.0;
    double phi = 1.0;

    void validate() const {
        if (N < 1) throw UsageError("simulation needs N >= 1");
        if (groups < 1 || leaves < groups) throw UsageError("simulation needs leaves >= groups >= 1");
        if (q0 < 1 || q1 < 1 || q2 < 1) throw UsageError("simulation dimensions must be >= 1");
        if (!(t_dof > 0) || !(pareto_scale > 0) || !(pareto_shape > 0) || !(phi >= 0))
            throw UsageError("simulation distribution parameters must be positive");
        if (!(wishart_dof > static_cast<double>(std::max(q1, q2)) - 1.0))
            throw UsageError("inverse-Wishart degrees of freedom must exceed dimension - 1");
    }

    /// Generator for this (seed, replicate) pair.
    Philox rng() const { return Philox(seed).split(replicate); }
};

struct SimParameters {
    VectorXd beta;
    MatrixXd sigma1;
    MatrixXd sigma2;
};

struct Allocation {
    std::vector<std::size_t> group_of_leaf;   // size leaves
    std::vector<std::size_t> leaf_of_sample;  // size N
    std::vector<std::size_t> leaf_counts;     // size leaves, sums to N
};

struct SimDataset {
    SimConfig config;
    SimParameters params;
    Allocation allocation;
    std::vector<VectorXd> u1;  // per group
    std::vector<VectorXd> u2;  // per leaf
    MatrixXd x;                // N x q0 fixed predictors
    MatrixXd z;                // N x max(q1, q2) shared random predictors
    VectorXd mu;               // conditional means
    VectorXd y;
};

namespace detail {

inline double std_normal(Philox& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    return nd(rng);
}

inline double chi_squared(Philox& rng, double dof) {
    std::chi_squared_distribution<double> cd(dof);
    return cd(rng);
}

inline double student_t(Philox& rng, double dof) { return std_normal(rng) / std::sqrt(chi_squared(rng, dof) / dof); }

/// Inverse-Wishart(I, dof) times `scale`, via the Bartlett decomposition of
/// the Wishart draw.
inline MatrixXd inverse_wishart(Philox& rng, std::size_t q, double dof, double scale) {
    const auto n = static_cast<Eigen::Index>(q);
    MatrixXd A = MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        A(i, i) = std::sqrt(chi_squared(rng, dof - static_cast<double>(i)));
        for (Eigen::Index j = 0; j < i; ++j) A(i, j) = std_normal(rng);
    }
    // W = A A^T, so W^-1 = A^-T A^-1.
    const MatrixXd Ainv = A.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(n, n));
    return symmetrize(scale * Ainv.transpose() * Ainv);
}

inline double pareto(Philox& rng, double scale, double shape) {
    // 1 - U lies in (0, 1]
    return scale / std::pow(1.0 - uniform01(rng), 1.0 / shape);
}

inline std::vector<std::size_t> multinomial(Philox& rng, std::size_t trials, const std::vector<double>& weights) {
    double remaining = 0.0;
    for (double w : weights) remaining += w;
    std::vector<std::size_t> counts(weights.size(), 0);
    std::size_t left = trials;
    for (std::size_t k = 0; k + 1 < weights.size() && left > 0; ++k) {
        const double p = remaining > 0 ? std::clamp(weights[k] / remaining, 0.0, 1.0) : 0.0;
        std::binomial_distribution<std::size_t> bd(left, p);
        counts[k] = bd(rng);
        left -= counts[k];
        remaining -= weights[k];
    }
    if (!weights.empty()) counts.back() += left;
    return counts;
}

inline VectorXd mvnormal(Philox& rng, const MatrixXd& chol_lower) {
    VectorXd e(chol_lower.rows());
    for (Eigen::Index k = 0; k < e.size(); ++k) e(k) = std_normal(rng);
    return chol_lower * e;
}

inline double rademacher(Philox& rng) { return (rng() >> 63) ? 1.0 : -1.0; }

}  // namespace detail

inline SimParameters draw_parameters(const SimConfig& cfg, Philox& rng) {
    cfg.validate();
    SimParameters p;
    p.beta.resize(static_cast<Eigen::Index>(cfg.q0));
    for (Eigen::Index k = 0; k < p.beta.size(); ++k) p.beta(k) = detail::student_t(rng, cfg.t_dof);
    p.sigma1 = detail::inverse_wishart(rng, cfg.q1, cfg.wishart_dof, cfg.wishart_scale);
    p.sigma2 = detail::inverse_wishart(rng, cfg.q2, cfg.wishart_dof, cfg.wishart_scale);
    return p;
}

/// Pareto rates -> multinomial sample counts per leaf; leaves are assigned to
/// groups by the same scheme. Samples and leaves are laid out contiguously.
/// Rates and the leaf-to-group map are drawn before anything that depends on N.
inline Allocation allocate(const SimConfig& cfg, Philox& rng) {
    cfg.validate();
    Allocation a;
    std::vector<double> leaf_rate(cfg.leaves);
    for (auto& r : leaf_rate) r = detail::pareto(rng, cfg.pareto_scale, cfg.pareto_shape);
    std::vector<double> group_rate(cfg.groups);
    for (auto& r : group_rate) r = detail::pareto(rng, cfg.pareto_scale, cfg.pareto_shape);
    const auto leaves_per_group = detail::multinomial(rng, cfg.leaves, group_rate);
    a.leaf_counts = detail::multinomial(rng, cfg.N, leaf_rate);
    a.group_of_leaf.reserve(cfg.leaves);
    for (std::size_t g = 0; g < cfg.groups; ++g)
        for (std::size_t k = 0; k < leaves_per_group[g]; ++k) a.group_of_leaf.push_back(g);
    a.leaf_of_sample.reserve(cfg.N);
    for (std::size_t leaf = 0; leaf < cfg.leaves; ++leaf)
        for (std::size_t k = 0; k < a.leaf_counts[leaf]; ++k) a.leaf_of_sample.push_back(leaf);
    return a;
}

inline SimDataset draw_effects_and_responses(const SimConfig& cfg, const SimParameters& params,
                                             const Allocation& alloc, Philox& rng) {
    cfg.validate();
    SimDataset ds;
    ds.config = cfg;
    ds.params = params;
    ds.allocation = alloc;
    auto chol = [](const MatrixXd& S) {
        Eigen::LLT<MatrixXd> llt(S);
        if (llt.info() == Eigen::Success) return MatrixXd(llt.matrixL());
        // Degenerate covariance: symmetric square root of the PSD part.
        SymEigen es = sym_eigen(S);
        return MatrixXd(es.vectors * es.values.cwiseMax(0.0).cwiseSqrt().asDiagonal());
    };
    const MatrixXd L1 = chol(params.sigma1);
    const MatrixXd L2 = chol(params.sigma2);
    ds.u1.resize(cfg.groups);
    for (auto& u : ds.u1) u = detail::mvnormal(rng, L1);
    ds.u2.resize(cfg.leaves);
    for (auto& u : ds.u2) u = detail::mvnormal(rng, L2);

    const auto N = static_cast<Eigen::Index>(cfg.N);
    const auto q0 = static_cast<Eigen::Index>(cfg.q0);
    const auto q1 = static_cast<Eigen::Index>(cfg.q1);
    const auto q2 = static_cast<Eigen::Index>(cfg.q2);
    const auto qz = std::max(q1, q2);
    ds.x.resize(N, q0);
    ds.z.resize(N, qz);
    ds.mu.resize(N);
    ds.y.resize(N);
    for (Eigen::Index k = 0; k < N; ++k) {
        for (Eigen::Index c = 0; c < q0; ++c) ds.x(k, c) = detail::rademacher(rng);
        for (Eigen::Index c = 0; c < qz; ++c) ds.z(k, c) = detail::rademacher(rng);
        const std::size_t leaf = alloc.leaf_of_sample[static_cast<std::size_t>(k)];
        const std::size_t group = alloc.group_of_leaf[leaf];
        const double eta = ds.x.row(k).dot(params.beta) + ds.z.row(k).head(q1).dot(ds.u1[group]) +
                           ds.z.row(k).head(q2).dot(ds.u2[leaf]);
        if (cfg.family == Family::logistic) {
            ds.mu(k) = detail::inv_logit(eta);
            ds.y(k) = uniform01(rng) < ds.mu(k) ? 1.0 : 0.0;
        } else {
            ds.mu(k) = eta;
            ds.y(k) = eta + std::sqrt(cfg.phi) * detail::std_normal(rng);
        }
    }
    return ds;
}

/// Full replicate from (seed, replicate). Parameters, allocation and
/// effects/responses use separate sub-streams, so one replicate shares its
/// parameters, rates, group map and random effects across sample sizes.
inline SimDataset simulate(const SimConfig& cfg) {
    const Philox base = cfg.rng();
    Philox param_rng = base.split(0), alloc_rng = base.split(1), data_rng = base.split(2);
    const SimParameters params = draw_parameters(cfg, param_rng);
    const Allocation alloc = allocate(cfg, alloc_rng);
    return draw_effects_and_responses(cfg, params, alloc, data_rng);
}

inline std::string sim_group_label(std::size_t g) { return "g" + std::to_string(g + 1); }
inline std::string sim_leaf_label(std::size_t leaf) { return "l" + std::to_string(leaf + 1); }

/// Leaf blocks for a simulated dataset. Empty leaves and groups do not
/// appear in the hierarchy.
inline Design simulation_design(const SimDataset& ds) {
    const auto& cfg = ds.config;
    const auto N = ds.x.rows();
    const auto q0 = static_cast<Eigen::Index>(cfg.q0);
    const auto q1 = static_cast<Eigen::Index>(cfg.q1);
    const auto q2 = static_cast<Eigen::Index>(cfg.q2);
    MatrixXd X(N, q0 + q1 + q2);
    X.leftCols(q0) = ds.x;
    X.middleCols(q0, q1) = ds.z.leftCols(q1);
    X.rightCols(q2) = ds.z.leftCols(q2);
    std::vector<std::vector<std::string>> labels(static_cast<std::size_t>(N));
    for (std::size_t k = 0; k < labels.size(); ++k) {
        const std::size_t leaf = ds.allocation.leaf_of_sample[k];
        labels[k] = {sim_group_label(ds.allocation.group_of_leaf[leaf]), sim_leaf_label(leaf)};
    }
    return assemble_design(labels, X, ds.y, 2);
}

inline EffectDims simulation_dims(const SimConfig& cfg) { return EffectDims({cfg.q0, cfg.q1, cfg.q2}); }

/// Losses of a fitted model against the simulation truth. Nodes absent from
/// the fitted hierarchy contribute u_hat = 0.
inline EvalReport simulation_losses(const SimDataset& ds, const ScoringModel& model) {
    const auto& cfg = ds.config;
    EvalReport rep;
    rep.fixed_effect_loss = fixed_effect_loss(ds.params.beta, model.beta);
    rep.covariance_loss = {covariance_loss(ds.params.sigma1, model.sigma.at(0)),
                           covariance_loss(ds.params.sigma2, model.sigma.at(1))};

    const auto& h = model.hierarchy;
    std::vector<VectorXd> u1_hat(cfg.groups, VectorXd::Zero(static_cast<Eigen::Index>(cfg.q1)));
    std::vector<VectorXd> u2_hat(cfg.leaves, VectorXd::Zero(static_cast<Eigen::Index>(cfg.q2)));
    std::vector<NodeId> leaf_node(cfg.leaves);
    for (std::size_t leaf = 0; leaf < cfg.leaves; ++leaf) {
        const std::size_t g = ds.allocation.group_of_leaf[leaf];
        const std::vector<std::string> labels{sim_group_label(g), sim_leaf_label(leaf)};
        const NodeId id = h.resolve(labels);
        leaf_node[leaf] = id;
        if (id.depth() >= 1) u1_hat[g] = model.u_hat[1][h.find(ancestor(id, 1))];
        if (id.depth() == 2) u2_hat[leaf] = model.u_hat[2][h.find(id)];
    }
    rep.random_effect_loss = {random_effect_loss(ds.params.sigma1, ds.u1, u1_hat),
                              random_effect_loss(ds.params.sigma2, ds.u2, u2_hat)};

    std::vector<double> mu(ds.mu.data(), ds.mu.data() + ds.mu.size());
    std::vector<double> mu_hat(mu.size());
    const auto q1 = static_cast<Eigen::Index>(cfg.q1);
    const auto q2 = static_cast<Eigen::Index>(cfg.q2);
    for (std::size_t k = 0; k < mu.size(); ++k) {
        const auto r = static_cast<Eigen::Index>(k);
        const std::size_t leaf = ds.allocation.leaf_of_sample[k];
        const std::size_t g = ds.allocation.group_of_leaf[leaf];
        const double eta = ds.x.row(r).dot(model.beta) + ds.z.row(r).head(q1).dot(u1_hat[g]) +
                           ds.z.row(r).head(q2).dot(u2_hat[leaf]);
        mu_hat[k] = predict_response(eta, cfg.family);
    }
    rep.prediction_loss = cfg.family == Family::logistic ? kl_prediction_loss(mu, mu_hat).value
                                                         : gaussian_prediction_loss(mu, mu_hat, cfg.phi);
    return rep;
}

/// Simulate, fit, refine, and score one replicate. `seconds` covers fit and
/// refinement only.
inline EvalReport run_replicate(const SimConfig& cfg, const FitOptions& options = {}) {
    const SimDataset ds = simulate(cfg);
    const Design design = simulation_design(ds);
    const auto t0 = std::chrono::steady_clock::now();
    const FittedModel fitted = fit(design.blocks, design.hierarchy, simulation_dims(cfg), cfg.family, options);
    const RefinedEstimates refined = refine(fitted, options.jobs);
    const auto t1 = std::chrono::steady_clock::now();
    EvalReport rep = simulation_losses(ds, ScoringModel::from_fit(fitted, refined));
    rep.seconds = std::chrono::duration<double>(t1 - t0).count();
    return rep;
}

}  // namespace hglmm
