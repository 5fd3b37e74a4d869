#pragma once

#include "hglmm/error.hpp"
#include "hglmm/hierarchy.hpp"
#include "hglmm/leaf_fit.hpp"
#include "hglmm/linalg.hpp"
#include "hglmm/parallel.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace hglmm {

enum class WeightKind { identity, semi_weighted };

inline std::string to_string(WeightKind k) { return k == WeightKind::identity ? "identity" : "semi_weighted"; }

inline WeightKind parse_weight_kind(const std::string& s) {
    if (s == "identity" || s == "unweighted") return WeightKind::identity;
    if (s == "semi_weighted" || s == "semi-weighted") return WeightKind::semi_weighted;
    throw UsageError("unknown weight scheme '" + s + "' (expected identity or semi_weighted)");
}

/// Per-child weighting of the moment equations. The semi-weighted scheme
/// needs a pilot covariance for the level being combined.
struct WeightScheme {
    WeightKind kind = WeightKind::semi_weighted;
    std::optional<MatrixXd> prior_covariance;
};

/// Row blocks of a child's right singular vectors: V1 (parent effects) and
/// V2 (the child's own random effect).
struct SplitBasis {
    MatrixXd V1;  // p_{l-1} x r
    MatrixXd V2;  // q_l x r
    VectorXd D;   // r
};

inline SplitBasis split_singular_basis(const NodeEstimate& est, std::size_t parent_dim, std::size_t child_dim) {
    const auto p = static_cast<Eigen::Index>(parent_dim);
    const auto q = static_cast<Eigen::Index>(child_dim);
    if (est.V.rows() != p + q || est.b_hat.size() != p + q)
        throw InternalError("node " + est.node.to_string() + ": basis has " + std::to_string(est.V.rows()) +
                            " rows, expected " + std::to_string(p + q));
    return {est.V.topRows(p), est.V.bottomRows(q), est.D};
}

/// Weight matrix of one child in factored form W = K diag(e) K^T with
/// K = diag(D) Y, Y orthogonal. V2K = V2 K is formed directly so that the
/// random-effect block of the weights stays accurate when D is very large.
struct ChildWeight {
    MatrixXd K;    // r x r
    VectorXd e;    // r, positive
    MatrixXd V2K;  // q_l x r

    MatrixXd dense() const { return symmetrize(K * e.asDiagonal() * K.transpose()); }
};

/// Weight matrices W_ij for each child. Identity weights give W = I. The
/// semi-weighted scheme uses W = (D^-2 + V2^T S V2)^-1 with S the pilot
/// covariance. Writing S = F F^T and H = F^T V2 diag(D) = U diag(s) Y1^T,
/// W = diag(D) Y diag(1 / (1 + s^2)) Y^T diag(D), which needs no inversion.
inline std::vector<ChildWeight> choose_weights(std::span<const NodeEstimate> children, std::size_t parent_dim,
                                               const WeightScheme& scheme) {
    if (scheme.kind == WeightKind::semi_weighted && !scheme.prior_covariance)
        throw UsageError("semi-weighted scheme requires a pilot covariance");
    MatrixXd Qf, F;
    if (scheme.kind == WeightKind::semi_weighted) {
        SymEigen es = sym_eigen(symmetrize(*scheme.prior_covariance));
        const double lmax = es.values.size() ? es.values(0) : 0.0;
        Eigen::Index sdim = 0;
        while (lmax > 0.0 && sdim < es.values.size() && es.values(sdim) > 1e-12 * lmax) ++sdim;
        Qf = es.vectors.leftCols(sdim);
        F = Qf * es.values.head(sdim).cwiseSqrt().asDiagonal();
    }
    std::vector<ChildWeight> out;
    out.reserve(children.size());
    for (const auto& child : children) {
        const auto r = child.rank();
        const auto q = child.V.rows() - static_cast<Eigen::Index>(parent_dim);
        if (scheme.kind == WeightKind::semi_weighted && scheme.prior_covariance->rows() != q)
            throw InternalError("pilot covariance has wrong dimension for node " + child.node.to_string());
        const MatrixXd G = child.V.bottomRows(q) * child.D.asDiagonal();
        ChildWeight w;
        if (scheme.kind == WeightKind::identity) {
            w.K = child.D.asDiagonal();
            w.e = child.D.cwiseAbs2().cwiseInverse();
            w.V2K = G;
        } else if (F.cols() == 0 || r == 0) {
            w.K = child.D.asDiagonal();
            w.e = VectorXd::Ones(r);
            w.V2K = G;
        } else {
            const MatrixXd H = F.transpose() * G;
            Eigen::JacobiSVD<MatrixXd> svd(H, Eigen::ComputeFullV);
            const MatrixXd& Y = svd.matrixV();
            const VectorXd& sv = svd.singularValues();
            w.e = VectorXd::Ones(r);
            for (Eigen::Index k = 0; k < sv.size(); ++k) w.e(k) = 1.0 / (1.0 + sv(k) * sv(k));
            w.K = child.D.asDiagonal() * Y;
            w.V2K = G * Y;
            // Directions annihilated by H lie in the null space of S.
            for (Eigen::Index k = 0; k < r; ++k)
                if (k >= sv.size() || sv(k) == 0.0) w.V2K.col(k) -= Qf * (Qf.transpose() * w.V2K.col(k));
        }
        out.push_back(std::move(w));
    }
    return out;
}

/// Output of combining one parent's children.
struct ChildCombination {
    NodeEstimate parent;           // b_hat_i with precision summary from Omega_i
    MatrixXd sigma_hat;            // PSD-projected level covariance estimate
    double sigma_min_eigen_before = 0.0;
    VectorXd sigma_clipped_spectrum;
    std::size_t n_children = 0;
    bool diffuse = false;          // no child carried information
    bool sigma_singular = false;   // covariance system solved by least norm
};

namespace detail {

/// Orthonormal basis of q x q symmetric matrices, as q^2-vectors.
inline MatrixXd sym_basis(Eigen::Index q) {
    const Eigen::Index m = q * (q + 1) / 2;
    MatrixXd B = MatrixXd::Zero(q * q, m);
    Eigen::Index k = 0;
    const double s = 1.0 / std::sqrt(2.0);
    for (Eigen::Index a = 0; a < q; ++a)
        for (Eigen::Index b = a; b < q; ++b, ++k) {
            if (a == b) {
                B(a + a * q, k) = 1.0;
            } else {
                B(a + b * q, k) = s;
                B(b + a * q, k) = s;
            }
        }
    return B;
}

}  // namespace detail

/// Moment-based combination of the children of node `parent_id` at level l.
/// parent_dim = p_{l-1}, child_dim = q_l.
inline ChildCombination combine_children(const NodeId& parent_id, std::span<const NodeEstimate> children,
                                         std::span<const ChildWeight> weights, std::size_t parent_dim,
                                         std::size_t child_dim, std::vector<std::string>* warnings = nullptr) {
    if (weights.size() != children.size()) throw InternalError("one weight matrix per child is required");
    const auto p = static_cast<Eigen::Index>(parent_dim);
    const auto q = static_cast<Eigen::Index>(child_dim);

    ChildCombination out;
    out.n_children = children.size();
    out.parent.node = parent_id;

    MatrixXd omega = MatrixXd::Zero(p, p);
    VectorXd rhs = VectorXd::Zero(p);
    std::vector<SplitBasis> split;
    split.reserve(children.size());
    std::vector<VectorXd> coords;  // V^T b_hat per child
    coords.reserve(children.size());
    bool any_info = false;
    std::size_t n_obs = 0;
    for (std::size_t j = 0; j < children.size(); ++j) {
        const auto& child = children[j];
        split.push_back(split_singular_basis(child, parent_dim, child_dim));
        coords.push_back(child.V.transpose() * child.b_hat);
        n_obs += child.n_obs;
        if (child.rank() == 0) continue;
        any_info = true;
        const auto& w = weights[j];
        const MatrixXd V1K = split.back().V1 * w.K;
        omega.noalias() += V1K * w.e.asDiagonal() * V1K.transpose();
        rhs.noalias() += V1K * w.e.cwiseProduct(w.K.transpose() * coords.back());
    }
    out.parent.n_obs = n_obs;

    if (!any_info) {
        out.diffuse = true;
        out.parent.b_hat = VectorXd::Zero(p);
        out.parent.V = MatrixXd(p, 0);
        out.parent.D = VectorXd(0);
        out.sigma_hat = MatrixXd::Zero(q, q);
        out.sigma_clipped_spectrum = VectorXd::Zero(q);
        if (warnings) warnings->push_back("node " + parent_id.to_string() + ": no informative children, diffuse estimate");
        return out;
    }

    // b_hat_i = Omega^+ rhs; precision summary from the eigen-decomposition of Omega.
    SymEigen es = sym_eigen(symmetrize(omega));
    const double lmax = es.values.size() ? es.values(0) : 0.0;
    Eigen::Index keep = 0;
    while (keep < es.values.size() && es.values(keep) > 1e-12 * lmax && es.values(keep) > 0.0) ++keep;
    const MatrixXd Q = es.vectors.leftCols(keep);
    const VectorXd lam = es.values.head(keep);
    out.parent.b_hat = Q * (Q.transpose() * rhs).cwiseQuotient(lam);
    out.parent.V = Q;
    out.parent.D = lam.cwiseSqrt();

    // Covariance matching: sum_j a_j a_j^T = sum_j noise_j + sum_j A_j S A_j.
    MatrixXd scatter = MatrixXd::Zero(q, q);
    MatrixXd noise = MatrixXd::Zero(q, q);
    for (std::size_t j = 0; j < children.size(); ++j) {
        const auto& child = children[j];
        if (child.rank() == 0) continue;
        const auto& sb = split[j];
        const auto& w = weights[j];
        const VectorXd a =
            w.V2K * w.e.cwiseProduct(w.K.transpose() * (coords[j] - sb.V1.transpose() * out.parent.b_hat));
        scatter.noalias() += a * a.transpose();
        // V2 W D^-1 = V2K diag(e) Y^T with Y orthogonal.
        noise.noalias() += w.V2K * w.e.cwiseAbs2().asDiagonal() * w.V2K.transpose();
    }
    // Operator S -> sum_j A_j S A_j in the orthonormal symmetric basis. For
    // E = (e_a e_b^T + e_b e_a^T)/sqrt(2), A E A = (A_a A_b^T + A_b A_a^T)/sqrt(2).
    const Eigen::Index m = q * (q + 1) / 2;
    MatrixXd L = MatrixXd::Zero(q * q, m);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    for (std::size_t j = 0; j < children.size(); ++j) {
        if (children[j].rank() == 0) continue;
        const auto& w = weights[j];
        const MatrixXd A = symmetrize(w.V2K * w.e.asDiagonal() * w.V2K.transpose());
        Eigen::Index k = 0;
        for (Eigen::Index a = 0; a < q; ++a)
            for (Eigen::Index b = a; b < q; ++b, ++k) {
                Eigen::Map<MatrixXd> col(L.col(k).data(), q, q);
                if (a == b) {
                    col.noalias() += A.col(a) * A.col(a).transpose();
                } else {
                    const MatrixXd outer = A.col(a) * A.col(b).transpose();
                    col += inv_sqrt2 * (outer + outer.transpose());
                }
            }
    }
    const MatrixXd R = symmetrize(scatter - noise);
    const Eigen::Map<const VectorXd> rvec(R.data(), q * q);
    Eigen::JacobiSVD<MatrixXd> svd(L, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const VectorXd& sv = svd.singularValues();
    const double cutoff = sv.size() && sv(0) > 0 ? pinv_cutoff(L.rows(), L.cols(), sv(0)) * 1e3 : 0.0;
    Eigen::Index srank = 0;
    while (srank < sv.size() && sv(srank) > cutoff && sv(srank) > 0.0) ++srank;
    out.sigma_singular = srank < L.cols();
    if (out.sigma_singular && warnings)
        warnings->push_back("node " + parent_id.to_string() +
                            ": covariance moment system is singular, using least-norm solution");
    const VectorXd s = svd.matrixV().leftCols(srank) *
                       (svd.matrixU().leftCols(srank).transpose() * rvec).cwiseQuotient(sv.head(srank));
    const VectorXd svec = detail::sym_basis(q) * s;
    const MatrixXd raw = symmetrize(Eigen::Map<const MatrixXd>(svec.data(), q, q));
    PsdProjection proj = project_psd(raw);
    out.sigma_hat = std::move(proj.matrix);
    out.sigma_min_eigen_before = proj.min_eigenvalue_before;
    out.sigma_clipped_spectrum = std::move(proj.clipped_spectrum);
    return out;
}

struct LevelCovariance {
    std::size_t level = 0;
    MatrixXd sigma_bar;
    double contributing_weight = 0.0;
    double min_eigen_before = 0.0;  // of the weighted mean, before the final projection
    VectorXd clipped_spectrum;
};

struct WeightedCovariance {
    MatrixXd sigma;
    double weight = 0.0;
};

/// Weighted mean of per-parent estimates (weights M_i), symmetrized and
/// projected onto the PSD cone.
inline LevelCovariance pool_level_covariance(std::size_t level, std::span<const WeightedCovariance> parts) {
    if (parts.empty()) throw FitError("level " + std::to_string(level) + ": no covariance estimates to pool");
    const auto q = parts.front().sigma.rows();
    MatrixXd acc = MatrixXd::Zero(q, q);
    double wsum = 0.0;
    for (const auto& part : parts) {
        if (part.sigma.rows() != q || part.sigma.cols() != q)
            throw InternalError("covariance dimension mismatch while pooling level " + std::to_string(level));
        acc += part.weight * part.sigma;
        wsum += part.weight;
    }
    if (!(wsum > 0.0)) throw FitError("level " + std::to_string(level) + ": total pooling weight is zero");
    LevelCovariance out;
    out.level = level;
    out.contributing_weight = wsum;
    PsdProjection proj = project_psd(symmetrize(acc / wsum));
    out.sigma_bar = std::move(proj.matrix);
    out.min_eigen_before = proj.min_eigenvalue_before;
    out.clipped_spectrum = std::move(proj.clipped_spectrum);
    return out;
}

struct FitOptions {
    WeightKind weights = WeightKind::semi_weighted;
    FirthOptions firth;
    std::size_t jobs = 1;
    /// When set, replaces the pilot and final covariance of every level
    /// (index l-1 for level l). Used to pin the model to its global or local
    /// limits.
    std::optional<std::vector<MatrixXd>> fixed_sigma;
};

/// Per-parent record of the covariance estimate feeding Sigma_bar_l.
struct ParentRecord {
    MatrixXd sigma_hat;
    double min_eigen_before = 0.0;
    VectorXd clipped_spectrum;
    std::size_t n_children = 0;
    bool diffuse = false;
};

struct FittedModel {
    Family family = Family::gaussian;
    Hierarchy hierarchy;
    EffectDims dims;
    VectorXd beta_bar;
    std::vector<LevelCovariance> sigma_bars;  // [l-1] for level l
    double phi_bar = 1.0;
    double phi_scale = 1.0;  // dispersion actually used to scale leaf precision
    std::vector<std::vector<NodeEstimate>> estimates;      // [l][node index]
    std::vector<std::vector<ParentRecord>> parent_records;  // [l-1][parent index at level l-1]
    std::vector<std::string> warnings;

    const MatrixXd& sigma(std::size_t level) const { return sigma_bars.at(level - 1).sigma_bar; }
};

namespace detail {

struct LevelPass {
    std::vector<ChildCombination> combos;
    LevelCovariance pooled;
};

inline LevelPass combine_level(const Hierarchy& h, const EffectDims& dims, std::size_t l,
                               const std::vector<NodeEstimate>& children, const WeightScheme& scheme,
                               std::size_t jobs, std::vector<std::string>& warnings) {
    const auto& parents = h.level(l - 1);
    LevelPass pass;
    pass.combos.resize(parents.size());
    std::vector<std::vector<std::string>> local_warn(parents.size());
    parallel_for(parents.size(), jobs, [&](std::size_t i) {
        const auto& pnode = parents[i];
        std::vector<NodeEstimate> kids;
        kids.reserve(pnode.children.size());
        for (std::size_t c : pnode.children) kids.push_back(children[c]);
        try {
            auto W = choose_weights(kids, dims.p(l - 1), scheme);
            pass.combos[i] = combine_children(pnode.id, kids, W, dims.p(l - 1), dims.q(l), &local_warn[i]);
        } catch (const FitError& e) {
            throw FitError("node " + pnode.id.to_string() + ": " + e.what());
        }
    });
    for (auto& w : local_warn)
        for (auto& s : w) warnings.push_back(std::move(s));
    std::vector<WeightedCovariance> parts;
    for (const auto& c : pass.combos)
        if (!c.diffuse) parts.push_back({c.sigma_hat, static_cast<double>(c.n_children)});
    if (parts.empty()) throw FitError("level " + std::to_string(l) + ": every parent is uninformative");
    pass.pooled = pool_level_covariance(l, parts);
    return pass;
}

}  // namespace detail

/// Bottom-up moment fit. `blocks[k]` holds the data of leaf k (ascending
/// NodeId order at level d).
inline FittedModel fit(const std::vector<LeafBlock>& blocks, const Hierarchy& hierarchy, const EffectDims& dims,
                       Family family, const FitOptions& options = {}) {
    const std::size_t d = hierarchy.depth();
    if (dims.depth() != d)
        throw UsageError("effect dimensions describe " + std::to_string(dims.depth()) + " levels, hierarchy has " +
                         std::to_string(d));
    const auto& leaves = hierarchy.level(d);
    if (blocks.size() != leaves.size())
        throw UsageError("expected " + std::to_string(leaves.size()) + " leaf blocks, got " +
                         std::to_string(blocks.size()));
    if (options.fixed_sigma && options.fixed_sigma->size() != d)
        throw UsageError("fixed_sigma needs one matrix per level");

    FittedModel model;
    model.family = family;
    model.hierarchy = hierarchy;
    model.dims = dims;
    model.estimates.resize(d + 1);
    model.parent_records.resize(d);

    const auto pd = static_cast<Eigen::Index>(dims.p(d));
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        if (blocks[k].leaf != leaves[k].id)
            throw UsageError("leaf block " + std::to_string(k) + " is for node " + blocks[k].leaf.to_string() +
                             ", expected " + leaves[k].id.to_string());
        if (blocks[k].X.cols() != pd)
            throw UsageError("leaf " + blocks[k].leaf.to_string() + " has " + std::to_string(blocks[k].X.cols()) +
                             " columns, expected p_d = " + std::to_string(pd));
    }

    // Step 1: leaves.
    auto& leaf_est = model.estimates[d];
    leaf_est.resize(blocks.size());
    if (family == Family::gaussian) {
        std::vector<DispersionTerm> terms(blocks.size());
        parallel_for(blocks.size(), options.jobs, [&](std::size_t k) {
            auto g = fit_leaf_gaussian(blocks[k]);
            leaf_est[k] = std::move(g.estimate);
            terms[k] = {g.phi_hat, g.dof};
        });
        model.phi_bar = pool_dispersion(terms);
        // Residuals at the rounding level of the response carry no noise
        // information; floor the scale there (relative residual sqrt(eps)).
        double ymax = 0.0;
        for (const auto& b : blocks) ymax = std::max(ymax, b.y.cwiseAbs().maxCoeff());
        const double floor = std::numeric_limits<double>::epsilon() * std::max(1.0, ymax * ymax);
        double scale = model.phi_bar;
        if (!(scale >= floor)) {
            scale = floor;
            model.warnings.push_back("pooled dispersion is at rounding level; precision scaled at the floor");
        }
        model.phi_scale = scale;
        const double f = 1.0 / std::sqrt(scale);
        for (auto& e : leaf_est) e.D *= f;
    } else {
        parallel_for(blocks.size(), options.jobs, [&](std::size_t k) {
            leaf_est[k] = fit_leaf_logistic_firth(blocks[k], options.firth).estimate;
        });
        model.phi_bar = 1.0;
        model.phi_scale = 1.0;
    }

    // Steps 2-4: prune level by level.
    model.sigma_bars.resize(d);
    for (std::size_t l = d; l >= 1; --l) {
        WeightScheme scheme{WeightKind::identity, std::nullopt};
        detail::LevelPass pass;
        if (options.fixed_sigma) {
            if (options.weights == WeightKind::semi_weighted)
                scheme = {WeightKind::semi_weighted, (*options.fixed_sigma)[l - 1]};
            pass = detail::combine_level(model.hierarchy, dims, l, model.estimates[l], scheme, options.jobs,
                                         model.warnings);
        } else {
            std::vector<std::string> pilot_warnings;
            pass = detail::combine_level(model.hierarchy, dims, l, model.estimates[l], scheme, options.jobs,
                                         pilot_warnings);
            if (options.weights == WeightKind::semi_weighted) {
                scheme = {WeightKind::semi_weighted, pass.pooled.sigma_bar};
                pass = detail::combine_level(model.hierarchy, dims, l, model.estimates[l], scheme, options.jobs,
                                             model.warnings);
            } else {
                model.warnings.insert(model.warnings.end(), pilot_warnings.begin(), pilot_warnings.end());
            }
        }
        auto& records = model.parent_records[l - 1];
        auto& parents = model.estimates[l - 1];
        records.resize(pass.combos.size());
        parents.resize(pass.combos.size());
        for (std::size_t i = 0; i < pass.combos.size(); ++i) {
            auto& c = pass.combos[i];
            records[i] = {c.sigma_hat, c.sigma_min_eigen_before, c.sigma_clipped_spectrum, c.n_children, c.diffuse};
            parents[i] = std::move(c.parent);
        }
        model.sigma_bars[l - 1] = std::move(pass.pooled);
        if (options.fixed_sigma) {
            auto& lc = model.sigma_bars[l - 1];
            PsdProjection proj = project_psd((*options.fixed_sigma)[l - 1]);
            lc.sigma_bar = proj.matrix;
            lc.min_eigen_before = proj.min_eigenvalue_before;
            lc.clipped_spectrum = proj.clipped_spectrum;
        }
    }
    model.beta_bar = model.estimates[0].at(0).b_hat;
    return model;
}

}  // namespace hglmm
