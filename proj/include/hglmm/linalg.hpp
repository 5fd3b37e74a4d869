#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace hglmm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Compact SVD X = U diag(S) V^T with numerically-zero singular values
/// removed. The cutoff is max(n, p) * eps * sigma_max, the usual pinv rule.
struct CompactSvd {
    MatrixXd U;  // n x r
    VectorXd S;  // r, strictly positive, descending
    MatrixXd V;  // p x r

    Eigen::Index rank() const { return S.size(); }
};

inline double pinv_cutoff(Eigen::Index rows, Eigen::Index cols, double sigma_max) {
    return static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon() *
           sigma_max;
}

inline CompactSvd compact_svd(const MatrixXd& X, bool want_u = true) {
    CompactSvd out;
    const Eigen::Index n = X.rows();
    const Eigen::Index p = X.cols();
    if (n == 0 || p == 0) {
        out.U.resize(n, 0);
        out.S.resize(0);
        out.V.resize(p, 0);
        return out;
    }
    const unsigned opts = want_u ? (Eigen::ComputeThinU | Eigen::ComputeThinV) : Eigen::ComputeThinV;
    Eigen::JacobiSVD<MatrixXd, Eigen::ColPivHouseholderQRPreconditioner> svd(X, opts);
    const VectorXd& sv = svd.singularValues();
    const double cutoff = sv.size() > 0 ? pinv_cutoff(n, p, sv(0)) : 0.0;
    Eigen::Index r = 0;
    while (r < sv.size() && sv(r) > cutoff && sv(r) > 0.0) ++r;
    out.S = sv.head(r);
    out.V = svd.matrixV().leftCols(r);
    if (want_u) out.U = svd.matrixU().leftCols(r);
    return out;
}

inline MatrixXd symmetrize(const MatrixXd& A) { return 0.5 * (A + A.transpose()); }

/// Eigen-decomposition of a symmetric matrix with eigenvalues in descending
/// order (Eigen returns ascending).
struct SymEigen {
    VectorXd values;   // descending
    MatrixXd vectors;  // columns match values
};

inline SymEigen sym_eigen(const MatrixXd& A) {
    SymEigen out;
    if (A.rows() == 0) {
        out.values.resize(0);
        out.vectors.resize(0, 0);
        return out;
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(A));
    out.values = es.eigenvalues().reverse();
    out.vectors = es.eigenvectors().rowwise().reverse();
    return out;
}

/// Result of projecting a symmetric matrix onto the PSD cone.
struct PsdProjection {
    MatrixXd matrix;
    double min_eigenvalue_before = 0.0;  // smallest eigenvalue prior to clipping
    VectorXd clipped_spectrum;           // eigenvalues after clipping (all >= 0)
    bool clipped = false;
};

/// Nearest PSD matrix in Frobenius norm: negative eigenvalues set to 0.
inline PsdProjection project_psd(const MatrixXd& A) {
    PsdProjection out;
    if (A.rows() == 0) {
        out.matrix = A;
        out.clipped_spectrum.resize(0);
        return out;
    }
    SymEigen es = sym_eigen(A);
    out.min_eigenvalue_before = es.values.minCoeff();
    out.clipped = out.min_eigenvalue_before < 0.0;
    out.clipped_spectrum = es.values.cwiseMax(0.0);
    out.matrix = symmetrize(es.vectors * out.clipped_spectrum.asDiagonal() * es.vectors.transpose());
    return out;
}

/// Pseudo-inverse of a symmetric PSD matrix, dropping eigenvalues below
/// rel_tol * lambda_max.
inline MatrixXd pinv_psd(const MatrixXd& A, double rel_tol = 1e-12) {
    if (A.rows() == 0) return A;
    SymEigen es = sym_eigen(A);
    const double lmax = es.values.size() > 0 ? es.values(0) : 0.0;
    VectorXd inv = VectorXd::Zero(es.values.size());
    if (lmax > 0.0) {
        for (Eigen::Index k = 0; k < es.values.size(); ++k)
            if (es.values(k) > rel_tol * lmax) inv(k) = 1.0 / es.values(k);
    }
    return symmetrize(es.vectors * inv.asDiagonal() * es.vectors.transpose());
}

/// Inverse symmetric square root of a positive-definite matrix.
inline MatrixXd inverse_sqrt_pd(const MatrixXd& A) {
    SymEigen es = sym_eigen(A);
    VectorXd d = es.values.array().max(std::numeric_limits<double>::min()).rsqrt();
    return symmetrize(es.vectors * d.asDiagonal() * es.vectors.transpose());
}

inline bool all_finite(const MatrixXd& A) { return A.allFinite(); }
inline bool all_finite(const VectorXd& v) { return v.allFinite(); }

}  // namespace hglmm
