#pragma once

#include "hglmm/simulate.hpp"
#include "hglmm/io/csv.hpp"
#include "hglmm/io/model_spec.hpp"

#include <string>
#include <vector>

namespace hglmm::io {

/// Simulated rows in the CLI's CSV schema: group, leaf, x1.., z1.., y, mu.
inline Table simulation_table(const SimDataset& ds) {
    Table t;
    t.header = {"group", "leaf"};
    for (Eigen::Index c = 0; c < ds.x.cols(); ++c) t.header.push_back("x" + std::to_string(c + 1));
    for (Eigen::Index c = 0; c < ds.z.cols(); ++c) t.header.push_back("z" + std::to_string(c + 1));
    t.header.push_back("y");
    t.header.push_back("mu");
    t.rows.reserve(static_cast<std::size_t>(ds.x.rows()));
    for (Eigen::Index r = 0; r < ds.x.rows(); ++r) {
        const std::size_t leaf = ds.allocation.leaf_of_sample[static_cast<std::size_t>(r)];
        std::vector<std::string> row{sim_group_label(ds.allocation.group_of_leaf[leaf]), sim_leaf_label(leaf)};
        for (Eigen::Index c = 0; c < ds.x.cols(); ++c) row.push_back(format_double(ds.x(r, c)));
        for (Eigen::Index c = 0; c < ds.z.cols(); ++c) row.push_back(format_double(ds.z(r, c)));
        row.push_back(format_double(ds.y(r)));
        row.push_back(format_double(ds.mu(r)));
        t.rows.push_back(std::move(row));
    }
    return t;
}

/// Model spec matching simulation_design() for a simulated table.
inline ModelSpec simulation_spec(const SimConfig& cfg) {
    ModelSpec s;
    s.family = cfg.family;
    s.response = "y";
    s.fixed.clear();
    for (std::size_t c = 0; c < cfg.q0; ++c) s.fixed.push_back("x" + std::to_string(c + 1));
    LevelSpec l1{"group", {}}, l2{"leaf", {}};
    for (std::size_t c = 0; c < cfg.q1; ++c) l1.random.push_back("z" + std::to_string(c + 1));
    for (std::size_t c = 0; c < cfg.q2; ++c) l2.random.push_back("z" + std::to_string(c + 1));
    s.levels = {l1, l2};
    return s;
}

}  // namespace hglmm::io
