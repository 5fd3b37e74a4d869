#include "hglmm/design.hpp"
#include "hglmm/ebayes.hpp"

#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace hglmm;

namespace {

double prior_norm(const MatrixXd& S, const VectorXd& u) { return std::sqrt(u.dot(S.ldlt().solve(u))); }

}  // namespace

TEST(Posterior, HalfShrinkage) {
    VectorXd y(2);
    y << 1.0, -3.0;
    auto post = gaussian_posterior(MatrixXd::Identity(2, 2), y, MatrixXd::Identity(2, 2));
    EXPECT_LT((post.mean - y / 2).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_LT((post.cov - 0.5 * MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Posterior, DegeneratePriorGivesZero) {
    VectorXd y = VectorXd::Constant(3, 5.0);
    auto post = gaussian_posterior(MatrixXd::Identity(3, 2), y, MatrixXd::Zero(2, 2));
    EXPECT_EQ(post.mean, VectorXd::Zero(2));
    EXPECT_EQ(post.cov, MatrixXd::Zero(2, 2));
}

TEST(Posterior, NullSpaceComponentsAreExactlyZero) {
    MatrixXd S = MatrixXd::Zero(2, 2);
    S(0, 0) = 1.0;
    std::mt19937_64 g(1);
    const MatrixXd Z = fixtures::gaussian_matrix(g, 4, 2);
    const VectorXd y = fixtures::gaussian_matrix(g, 4, 1).col(0);
    auto post = gaussian_posterior(Z, y, S);
    EXPECT_EQ(post.mean(1), 0.0);
    EXPECT_EQ(post.cov(1, 1), 0.0);
    // Along the support it is the scalar regression posterior.
    const double zz = Z.col(0).squaredNorm();
    EXPECT_NEAR(post.mean(0), Z.col(0).dot(y) / (zz + 1.0), 1e-14);
}

TEST(Posterior, RankZeroChildGetsPrior) {
    MatrixXd S(2, 2);
    S << 2.0, 0.3, 0.3, 1.0;
    auto post = gaussian_posterior(MatrixXd(0, 2), VectorXd(0), S);
    EXPECT_EQ(post.mean, VectorXd::Zero(2));
    EXPECT_LT((post.cov - S).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Posterior, MatchesTextbookFormula) {
    std::mt19937_64 g(2);
    for (int rep = 0; rep < 20; ++rep) {
        const MatrixXd Z = fixtures::gaussian_matrix(g, 5, 3);
        const VectorXd y = fixtures::gaussian_matrix(g, 5, 1).col(0);
        const MatrixXd B = fixtures::gaussian_matrix(g, 3, 3);
        const MatrixXd S = B * B.transpose() + 0.1 * MatrixXd::Identity(3, 3);
        auto post = gaussian_posterior(Z, y, S);
        const MatrixXd P = Z.transpose() * Z + S.inverse();
        EXPECT_LT((post.mean - P.ldlt().solve(Z.transpose() * y)).cwiseAbs().maxCoeff(), 1e-10);
        EXPECT_LT((post.cov - MatrixXd(P.inverse())).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(Posterior, ShrinkageDominance) {
    std::mt19937_64 g(3);
    for (int rep = 0; rep < 50; ++rep) {
        const MatrixXd Z = fixtures::gaussian_matrix(g, 6, 2);
        const VectorXd y = fixtures::gaussian_matrix(g, 6, 1, 3.0).col(0);
        const MatrixXd B = fixtures::gaussian_matrix(g, 2, 2);
        const MatrixXd S = B * B.transpose() + 0.05 * MatrixXd::Identity(2, 2);
        auto post = gaussian_posterior(Z, y, S);
        const VectorXd unshrunk = (Z.transpose() * Z).ldlt().solve(Z.transpose() * y);
        EXPECT_LE(prior_norm(S, post.mean), prior_norm(S, unshrunk) + 1e-12);
    }
}

TEST(Posterior, MonotoneInInformation) {
    std::mt19937_64 g(4);
    const MatrixXd Z = fixtures::gaussian_matrix(g, 6, 2);
    const VectorXd u = fixtures::gaussian_matrix(g, 2, 1).col(0);
    const MatrixXd S = MatrixXd::Identity(2, 2);
    double prev_gap = std::numeric_limits<double>::infinity();
    double prev_norm = 0.0;
    for (double c : {1e-3, 1.0, 1e3}) {
        // Data exactly consistent with u: Y = cZ u.
        const MatrixXd Zc = c * Z;
        auto post = gaussian_posterior(Zc, Zc * u, S);
        const double gap = (post.mean - u).norm();
        EXPECT_LT(gap, prev_gap);
        EXPECT_GT(post.mean.norm(), prev_norm);
        prev_gap = gap;
        prev_norm = post.mean.norm();
    }
    EXPECT_LT(prev_gap, 1e-5);
    auto tiny = gaussian_posterior(1e-9 * Z, 1e-9 * Z * u, S);
    EXPECT_LT(tiny.mean.norm(), 1e-15);
}

TEST(Refine, Depth1MatchesConditionalGaussian) {
    std::mt19937_64 g(5);
    MatrixXd S(1, 1);
    S << 0.7;
    for (int rep = 0; rep < 5; ++rep) {
        auto gen = fixtures::generate_gaussian(g, 3, 0, 8, {1, 1}, {S}, 1.0);
        Design d = assemble_design(gen.labels, gen.X, gen.y, 1);
        auto m = fit(d.blocks, d.hierarchy, EffectDims({1, 1}), Family::gaussian);
        auto r = refine(m);
        ASSERT_EQ(r.levels[1].size(), 3u);
        EXPECT_EQ(r.at(0, 0).b_bar, m.beta_bar);
        for (std::size_t i = 0; i < 3; ++i) {
            const auto& b = d.blocks[i];
            const VectorXd ref = oracle::conditional_gaussian_mean(b.X.leftCols(1), b.X.rightCols(1), b.y, m.beta_bar,
                                                                   m.sigma(1), m.phi_bar);
            EXPECT_LT((r.at(1, i).u_hat - ref).cwiseAbs().maxCoeff(), 1e-8);
            // b_bar = (b_bar_parent, u_hat) exactly.
            EXPECT_EQ(r.at(1, i).b_bar.head(1), m.beta_bar);
            EXPECT_EQ(r.at(1, i).b_bar.tail(1), r.at(1, i).u_hat);
        }
    }
}

TEST(Refine, Depth2BlockStructureAndPsd) {
    std::mt19937_64 g(6);
    auto gen = fixtures::generate_gaussian(g, 4, 3, 12, {2, 1, 2},
                                           {0.4 * MatrixXd::Identity(1, 1), 0.3 * MatrixXd::Identity(2, 2)}, 1.0);
    Design d = assemble_design(gen.labels, gen.X, gen.y, 2);
    auto m = fit(d.blocks, d.hierarchy, EffectDims({2, 1, 2}), Family::gaussian);
    auto r = refine(m, 2);
    const auto& h = m.hierarchy;
    for (std::size_t l = 1; l <= 2; ++l)
        for (std::size_t i = 0; i < h.level_size(l); ++i) {
            const auto& nr = r.at(l, i);
            const auto& parent = r.at(l - 1, h.node(l, i).parent);
            EXPECT_EQ(nr.b_bar.head(parent.b_bar.size()), parent.b_bar);
            EXPECT_EQ(nr.b_bar.tail(nr.u_hat.size()), nr.u_hat);
            EXPECT_LT((nr.posterior_cov - nr.posterior_cov.transpose()).cwiseAbs().maxCoeff(), 1e-15);
            EXPECT_GE(Eigen::SelfAdjointEigenSolver<MatrixXd>(nr.posterior_cov).eigenvalues().minCoeff(), -1e-12);
        }
}

TEST(Report, SortedByCountWithSquareRootSd) {
    RefinedEstimates r;
    r.levels.resize(2);
    r.levels[0].push_back({VectorXd::Zero(1), VectorXd(0), MatrixXd(0, 0)});
    MatrixXd cov = MatrixXd::Zero(2, 2);
    cov(0, 0) = 0.04;
    VectorXd u(2);
    u << 0.3, 1.0;
    r.levels[1].push_back({VectorXd::Zero(3), VectorXd::Zero(2), MatrixXd::Zero(2, 2)});
    r.levels[1].push_back({VectorXd::Zero(3), u, cov});
    auto [h, leaf] = Hierarchy::build({{"a"}, {"b"}, {"b"}}, 1);
    auto rows = node_effect_report(r, h, 1, 0);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].label, "b");
    EXPECT_EQ(rows[0].n_obs, 2u);
    EXPECT_DOUBLE_EQ(rows[0].effect, 0.3);
    EXPECT_DOUBLE_EQ(rows[0].posterior_sd, 0.2);
    EXPECT_EQ(rows[1].effect, 0.0);
    EXPECT_THROW(node_effect_report(r, h, 1, 2), UsageError);
    EXPECT_THROW(node_effect_report(r, h, 2, 0), UsageError);
}

TEST(Report, MatchesStoredFields) {
    std::mt19937_64 g(7);
    auto gen = fixtures::generate_gaussian(g, 5, 0, 10, {1, 2}, {0.5 * MatrixXd::Identity(2, 2)}, 1.0);
    Design d = assemble_design(gen.labels, gen.X, gen.y, 1);
    auto m = fit(d.blocks, d.hierarchy, EffectDims({1, 2}), Family::gaussian);
    auto r = refine(m);
    auto rows = node_effect_report(r, m.hierarchy, 1, 1);
    for (const auto& row : rows) {
        const auto i = m.hierarchy.find(row.node);
        EXPECT_EQ(row.effect, r.at(1, i).u_hat(1));
        EXPECT_EQ(row.posterior_sd, std::sqrt(r.at(1, i).posterior_cov(1, 1)));
    }
}
