#pragma once

#include "hglmm/error.hpp"
#include "hglmm/hierarchy.hpp"
#include "hglmm/leaf_fit.hpp"

#include <string>
#include <vector>

namespace hglmm {

/// Observations grouped into leaf blocks over a hierarchy.
struct Design {
    Hierarchy hierarchy;
    std::vector<LeafBlock> blocks;          // ascending leaf order
    std::vector<std::size_t> leaf_of_row;   // leaf index of each input row
    std::vector<std::size_t> row_in_leaf;   // position of each row inside its block
};

/// Groups rows by their label path. X is the full n x p_d design
/// [X_0 X_1 ... X_d]; rows keep their input order inside each block.
inline Design assemble_design(const std::vector<std::vector<std::string>>& row_labels, const MatrixXd& X,
                              const VectorXd& y, std::size_t depth, NestingMode mode = NestingMode::normalize) {
    if (static_cast<std::size_t>(X.rows()) != row_labels.size() || y.size() != X.rows())
        throw UsageError("design: labels, X and y must have the same number of rows");
    Design out;
    auto built = Hierarchy::build(row_labels, depth, mode);
    out.hierarchy = std::move(built.first);
    out.leaf_of_row = std::move(built.second);
    const auto& leaves = out.hierarchy.level(depth);
    out.blocks.resize(leaves.size());
    std::vector<Eigen::Index> fill(leaves.size(), 0);
    for (std::size_t k = 0; k < leaves.size(); ++k) {
        const auto n = static_cast<Eigen::Index>(leaves[k].n_obs);
        out.blocks[k].leaf = leaves[k].id;
        out.blocks[k].X.resize(n, X.cols());
        out.blocks[k].y.resize(n);
    }
    out.row_in_leaf.resize(row_labels.size());
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
        const auto k = out.leaf_of_row[r];
        const auto pos = fill[k]++;
        out.blocks[k].X.row(pos) = X.row(static_cast<Eigen::Index>(r));
        out.blocks[k].y(pos) = y(static_cast<Eigen::Index>(r));
        out.row_in_leaf[r] = static_cast<std::size_t>(pos);
    }
    return out;
}

}  // namespace hglmm
