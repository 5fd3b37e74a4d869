#pragma once

#include "hglmm/error.hpp"
#include "hglmm/hierarchy.hpp"
#include "hglmm/linalg.hpp"

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace hglmm {

enum class Family { gaussian, logistic };

inline std::string to_string(Family f) { return f == Family::gaussian ? "gaussian" : "logistic"; }

inline Family parse_family(const std::string& s) {
    if (s == "gaussian" || s == "normal") return Family::gaussian;
    if (s == "logistic" || s == "binomial") return Family::logistic;
    throw UsageError("unknown family '" + s + "' (expected gaussian or logistic)");
}

/// Observations at one leaf. X stacks the per-level feature blocks
/// [X_0 X_1 ... X_d] column-wise.
struct LeafBlock {
    NodeId leaf;
    VectorXd y;
    MatrixXd X;
};

/// Preliminary estimate b_hat of the path effects at a node together with a
/// factored precision summary Z = diag(D) V^T, so that Z (b_hat - b) is
/// approximately standard normal on the r-dimensional identified subspace.
struct NodeEstimate {
    NodeId node;
    VectorXd b_hat;  // length p_{|node|}
    MatrixXd V;      // p x r, orthonormal columns
    VectorXd D;      // r, strictly positive
    std::size_t n_obs = 0;

    Eigen::Index rank() const { return D.size(); }
    Eigen::Index dim() const { return b_hat.size(); }
    MatrixXd precision_factor() const { return D.asDiagonal() * V.transpose(); }
};

struct GaussianLeafFit {
    NodeEstimate estimate;  // D holds the raw singular values of X (not yet scaled by phi)
    double phi_hat = 0.0;
    double dof = 0.0;       // n_i - r_i
};

namespace detail {

inline void check_block(const LeafBlock& block) {
    if (block.X.rows() != block.y.size())
        throw InternalError("leaf " + block.leaf.to_string() + ": X has " + std::to_string(block.X.rows()) +
                            " rows but y has " + std::to_string(block.y.size()));
    if (block.y.size() < 1) throw DataError("leaf " + block.leaf.to_string() + " has no observations");
    if (!block.X.allFinite() || !block.y.allFinite())
        throw DataError("leaf " + block.leaf.to_string() + " contains non-finite values");
}

}  // namespace detail

/// Minimum-norm least squares at a leaf, plus the residual dispersion.
inline GaussianLeafFit fit_leaf_gaussian(const LeafBlock& block) {
    detail::check_block(block);
    const auto n = block.X.rows();
    CompactSvd svd = compact_svd(block.X);
    const auto r = svd.rank();

    GaussianLeafFit out;
    out.estimate.node = block.leaf;
    out.estimate.n_obs = static_cast<std::size_t>(n);
    VectorXd coef = (svd.U.transpose() * block.y).cwiseQuotient(svd.S);
    out.estimate.b_hat = svd.V * coef;
    out.estimate.V = std::move(svd.V);
    out.estimate.D = std::move(svd.S);
    if (r < n) {
        const double rss = (block.y - block.X * out.estimate.b_hat).squaredNorm();
        out.dof = static_cast<double>(n - r);
        out.phi_hat = rss / out.dof;
    }
    return out;
}

struct DispersionTerm {
    double phi_hat = 0.0;
    double dof = 0.0;
};

/// Degrees-of-freedom weighted pooled dispersion. Summation runs in input
/// order so results are reproducible.
inline double pool_dispersion(std::span<const DispersionTerm> terms) {
    double num = 0.0;
    double den = 0.0;
    for (const auto& t : terms) {
        num += t.dof * t.phi_hat;
        den += t.dof;
    }
    if (!(den > 0.0)) throw FitError("dispersion unidentifiable: every leaf is saturated (n_i == rank)");
    return num / den;
}

struct FirthOptions {
    double tol = 1e-8;            // max-norm of the penalized score
    int max_iter = 25;
    double penalty_weight = 0.5;  // multiplier of log det I(b); 0.5 is Firth's Jeffreys penalty
    int max_halvings = 30;
};

struct FirthFit {
    NodeEstimate estimate;
    int iterations = 0;
    double gradient_norm = 0.0;
};

namespace detail {

inline double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double inv_logit(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

struct FirthState {
    VectorXd mu;
    VectorXd w;
    Eigen::LLT<MatrixXd> info;
    double penalized_loglik = -std::numeric_limits<double>::infinity();
    bool ok = false;
};

inline FirthState firth_state(const MatrixXd& Xr, const VectorXd& y, const VectorXd& c, double weight) {
    FirthState s;
    const VectorXd eta = Xr * c;
    s.mu.resize(eta.size());
    s.w.resize(eta.size());
    double loglik = 0.0;
    for (Eigen::Index k = 0; k < eta.size(); ++k) {
        s.mu(k) = inv_logit(eta(k));
        s.w(k) = s.mu(k) * (1.0 - s.mu(k));
        loglik += y(k) * eta(k) - log1pexp(eta(k));
    }
    MatrixXd A = Xr.transpose() * s.w.asDiagonal() * Xr;
    s.info.compute(A);
    if (s.info.info() != Eigen::Success) return s;
    const VectorXd diagL = MatrixXd(s.info.matrixL()).diagonal();
    if ((diagL.array() <= 0.0).any()) return s;
    const double logdet = 2.0 * diagL.array().log().sum();
    s.penalized_loglik = loglik + weight * logdet;
    s.ok = std::isfinite(s.penalized_loglik);
    return s;
}

/// Penalized score X^T (y - mu + 2 w_pen h (1/2 - mu)) in reduced coordinates.
inline VectorXd firth_score(const MatrixXd& Xr, const VectorXd& y, const FirthState& s, double weight) {
    MatrixXd B = Xr.transpose() * s.w.cwiseSqrt().asDiagonal();
    s.info.matrixL().solveInPlace(B);
    const VectorXd h = B.colwise().squaredNorm().transpose();
    const VectorXd resid =
        (y - s.mu).array() + 2.0 * weight * h.array() * (0.5 - s.mu.array());
    return Xr.transpose() * resid;
}

/// Hessian of l(b) + weight * log det I(b). With g = w (1 - 2 mu), dI/db_k =
/// X^T diag(g x_k) X and d2I/db_k db_l = X^T diag(w (1 - 6 w) x_k x_l) X.
inline MatrixXd firth_hessian(const MatrixXd& Xr, const FirthState& s, double weight) {
    const auto r = Xr.cols();
    const MatrixXd A = s.info.solve(MatrixXd::Identity(r, r));
    const VectorXd lev = (Xr * A).cwiseProduct(Xr).rowwise().sum();  // x_i^T A x_i
    const VectorXd g = s.w.array() * (1.0 - 2.0 * s.mu.array());
    const VectorXd c2 = s.w.array() * (1.0 - 6.0 * s.w.array()) * lev.array();
    MatrixXd H = -(Xr.transpose() * s.w.asDiagonal() * Xr);
    H += weight * (Xr.transpose() * c2.asDiagonal() * Xr);
    std::vector<MatrixXd> T(static_cast<std::size_t>(r));
    for (Eigen::Index k = 0; k < r; ++k)
        T[static_cast<std::size_t>(k)] = A * (Xr.transpose() * g.cwiseProduct(Xr.col(k)).asDiagonal() * Xr);
    for (Eigen::Index k = 0; k < r; ++k)
        for (Eigen::Index l = 0; l <= k; ++l) {
            const double t = T[static_cast<std::size_t>(l)].cwiseProduct(T[static_cast<std::size_t>(k)].transpose()).sum();
            H(k, l) -= weight * t;
            if (l != k) H(l, k) -= weight * t;
        }
    return H;
}

/// Penalized Newton on a full-column-rank design. Uses the exact Hessian
/// when it is negative definite and its absolute eigenvalues otherwise, with
/// step halving on the penalized log-likelihood.
inline VectorXd firth_solve(const MatrixXd& Xr, const VectorXd& y, const FirthOptions& opt,
                            const std::string& where, int& iterations, double& grad_norm) {
    const auto r = Xr.cols();
    VectorXd c = VectorXd::Zero(r);
    if (r == 0) {
        iterations = 0;
        grad_norm = 0.0;
        return c;
    }
    FirthState s = firth_state(Xr, y, c, opt.penalty_weight);
    for (int it = 0; it <= opt.max_iter; ++it) {
        if (!s.ok) throw FitError(where + ": information matrix became singular in Firth iterations");
        const VectorXd score = firth_score(Xr, y, s, opt.penalty_weight);
        grad_norm = score.lpNorm<Eigen::Infinity>();
        iterations = it;
        if (grad_norm < opt.tol) return c;
        if (it == opt.max_iter) break;
        VectorXd delta;
        const MatrixXd neg = -firth_hessian(Xr, s, opt.penalty_weight);
        Eigen::LLT<MatrixXd> neg_h(neg);
        if (neg_h.info() == Eigen::Success) {
            delta = neg_h.solve(score);
        } else {
            // Non-concave region: Newton on |eigenvalues| of the Hessian.
            Eigen::SelfAdjointEigenSolver<MatrixXd> es(neg);
            const VectorXd lam = es.eigenvalues().cwiseAbs();
            const double floor = 1e-8 * std::max(lam.maxCoeff(), 1e-300);
            delta = es.eigenvectors() *
                    (es.eigenvectors().transpose() * score).cwiseQuotient(lam.cwiseMax(floor));
        }
        if (delta.size() == 0 || !delta.allFinite()) delta = s.info.solve(score);
        double step = 1.0;
        bool moved = false;
        // Near the optimum the objective is flat to rounding; allow ties.
        const double slack = 1e-13 * (1.0 + std::abs(s.penalized_loglik));
        for (int h = 0; h <= opt.max_halvings; ++h, step *= 0.5) {
            VectorXd trial = c + step * delta;
            FirthState ts = firth_state(Xr, y, trial, opt.penalty_weight);
            if (ts.ok && ts.penalized_loglik >= s.penalized_loglik - slack) {
                c = std::move(trial);
                s = std::move(ts);
                moved = true;
                break;
            }
        }
        if (!moved) break;
    }
    throw ConvergenceError(where + ": Firth iterations did not converge (gradient max-norm " +
                               std::to_string(grad_norm) + " after " + std::to_string(iterations) +
                               " iterations)",
                           iterations, grad_norm);
}

/// Precision factor from the Fisher information in reduced coordinates.
inline void logistic_precision(const MatrixXd& Xr, const MatrixXd& Vx, const VectorXd& c, NodeEstimate& est) {
    if (Xr.cols() == 0) {
        est.V = MatrixXd(Vx.rows(), 0);
        est.D = VectorXd(0);
        return;
    }
    const VectorXd eta = Xr * c;
    VectorXd w(eta.size());
    for (Eigen::Index k = 0; k < eta.size(); ++k) {
        const double m = inv_logit(eta(k));
        w(k) = m * (1.0 - m);
    }
    SymEigen es = sym_eigen(Xr.transpose() * w.asDiagonal() * Xr);
    const double lmax = es.values.size() ? es.values(0) : 0.0;
    Eigen::Index keep = 0;
    while (keep < es.values.size() && es.values(keep) > 1e-12 * lmax && es.values(keep) > 0.0) ++keep;
    est.V = Vx * es.vectors.leftCols(keep);
    est.D = es.values.head(keep).cwiseSqrt();
}

}  // namespace detail

/// Firth bias-reduced logistic fit at a leaf. Rank-deficient designs are
/// solved in the row space of X, so the estimate has no component in the
/// null space of X.
inline FirthFit fit_leaf_logistic_firth(const LeafBlock& block, const FirthOptions& opt = {}) {
    detail::check_block(block);
    for (Eigen::Index k = 0; k < block.y.size(); ++k)
        if (block.y(k) != 0.0 && block.y(k) != 1.0)
            throw DataError("leaf " + block.leaf.to_string() + ": logistic response must be 0 or 1");

    CompactSvd svd = compact_svd(block.X, /*want_u=*/false);
    const MatrixXd Xr = block.X * svd.V;  // n x r, full column rank

    FirthFit out;
    const VectorXd c = detail::firth_solve(Xr, block.y, opt, "leaf " + block.leaf.to_string(), out.iterations,
                                           out.gradient_norm);
    out.estimate.node = block.leaf;
    out.estimate.n_obs = static_cast<std::size_t>(block.y.size());
    out.estimate.b_hat = svd.V * c;
    detail::logistic_precision(Xr, svd.V, c, out.estimate);
    return out;
}

/// Firth logistic regression on an arbitrary design; returns the
/// minimum-norm coefficient vector.
inline VectorXd firth_logistic(const MatrixXd& X, const VectorXd& y, const FirthOptions& opt = {}) {
    LeafBlock block{NodeId(), y, X};
    return fit_leaf_logistic_firth(block, opt).estimate.b_hat;
}

/// Minimum-norm least squares on an arbitrary design.
inline VectorXd least_squares_min_norm(const MatrixXd& X, const VectorXd& y) {
    CompactSvd svd = compact_svd(X);
    return svd.V * (svd.U.transpose() * y).cwiseQuotient(svd.S);
}

}  // namespace hglmm
