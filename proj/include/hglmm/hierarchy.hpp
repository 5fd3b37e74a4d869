#pragma once

#include "hglmm/error.hpp"

#include <compare>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hglmm {

/// Node label: the sequence of 1-based child indices from the root. The
/// empty path is the root.
class NodeId {
public:
    NodeId() = default;
    explicit NodeId(std::vector<std::uint32_t> path) : path_(std::move(path)) {
        for (auto j : path_)
            if (j == 0) throw UsageError("NodeId child indices are 1-based");
    }

    std::size_t depth() const noexcept { return path_.size(); }
    bool is_root() const noexcept { return path_.empty(); }
    const std::vector<std::uint32_t>& path() const noexcept { return path_; }

    NodeId child(std::uint32_t j) const {
        auto p = path_;
        p.push_back(j);
        return NodeId(std::move(p));
    }

    NodeId parent() const {
        if (is_root()) throw UsageError("root has no parent");
        return NodeId(std::vector<std::uint32_t>(path_.begin(), path_.end() - 1));
    }

    std::string to_string() const {
        if (is_root()) return "*";
        std::string s;
        for (std::size_t k = 0; k < path_.size(); ++k) {
            if (k) s += '.';
            s += std::to_string(path_[k]);
        }
        return s;
    }

    auto operator<=>(const NodeId&) const = default;
    bool operator==(const NodeId&) const = default;

private:
    std::vector<std::uint32_t> path_;
};

/// Ancestor of `node` at depth `k`; ancestor(i, |i|) == i.
inline NodeId ancestor(const NodeId& node, std::size_t k) {
    if (k > node.depth())
        throw std::domain_error("ancestor level " + std::to_string(k) + " exceeds depth " +
                                std::to_string(node.depth()) + " of node " + node.to_string());
    return NodeId(std::vector<std::uint32_t>(node.path().begin(), node.path().begin() + k));
}

/// Fixed-effect and per-level random-effect dimensions q_0..q_d.
class EffectDims {
public:
    EffectDims() = default;
    explicit EffectDims(std::vector<std::size_t> q) : q_(std::move(q)) {
        if (q_.size() < 2) throw UsageError("EffectDims needs q_0 and at least one random level");
        for (std::size_t l = 1; l < q_.size(); ++l)
            if (q_[l] == 0) throw UsageError("random-effect dimension q_" + std::to_string(l) + " is 0");
        if (q_[0] == 0) throw UsageError("fixed-effect dimension q_0 is 0");
    }

    std::size_t depth() const noexcept { return q_.size() - 1; }
    std::size_t q(std::size_t l) const { return q_.at(l); }
    /// Cumulative dimension p_l = q_0 + ... + q_l.
    std::size_t p(std::size_t l) const {
        return std::accumulate(q_.begin(), q_.begin() + static_cast<std::ptrdiff_t>(l) + 1, std::size_t{0});
    }
    const std::vector<std::size_t>& q_all() const noexcept { return q_; }

    bool operator==(const EffectDims&) const = default;

private:
    std::vector<std::size_t> q_;
};

struct HierarchyNode {
    NodeId id;
    std::string label;       // raw grouping label at this level ("" for the root)
    std::size_t parent = 0;  // index into the previous level
    std::vector<std::size_t> children;  // indices into the next level, ascending child number
    std::size_t n_obs = 0;   // observations in the subtree
};

enum class NestingMode {
    normalize,  // a label is scoped by its parent; repeated labels become distinct nodes
    strict,     // a label may appear under one parent only
};

/// Depth-d tree of grouping factors. Levels are stored in ascending NodeId
/// order, so level sets are contiguous and ordered. Immutable after build.
class Hierarchy {
public:
    Hierarchy() = default;

    std::size_t depth() const noexcept { return levels_.empty() ? 0 : levels_.size() - 1; }
    std::size_t level_size(std::size_t l) const { return levels_.at(l).size(); }
    const std::vector<HierarchyNode>& level(std::size_t l) const { return levels_.at(l); }
    const HierarchyNode& node(std::size_t l, std::size_t idx) const { return levels_.at(l).at(idx); }
    const HierarchyNode& root() const { return levels_.at(0).at(0); }

    /// Index of `id` within level |id|, or npos.
    std::size_t find(const NodeId& id) const {
        auto it = index_.find(id);
        return it == index_.end() ? npos : it->second;
    }

    /// Deepest known node along a label path. Stops at the first label that
    /// has no matching child, returning a NodeId shorter than the path.
    NodeId resolve(std::span<const std::string> labels) const {
        std::size_t idx = 0;
        NodeId id;
        for (std::size_t l = 0; l < labels.size() && l < depth(); ++l) {
            const auto& lookup = child_lookup_.at(l).at(idx);
            auto it = lookup.find(labels[l]);
            if (it == lookup.end()) break;
            idx = it->second;
            id = levels_[l + 1][idx].id;
        }
        return id;
    }

    /// Indices of the ancestors of leaf `leaf_idx` at every level 0..d.
    std::vector<std::size_t> path_indices(std::size_t level_of_node, std::size_t idx) const {
        std::vector<std::size_t> out(level_of_node + 1);
        out[level_of_node] = idx;
        for (std::size_t l = level_of_node; l > 0; --l) out[l - 1] = levels_[l][out[l]].parent;
        return out;
    }

    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    /// Builds from per-row label tuples of length d. Children are numbered
    /// by first appearance in row order. Returns the leaf index of each row.
    static std::pair<Hierarchy, std::vector<std::size_t>> build(
        const std::vector<std::vector<std::string>>& row_labels, std::size_t depth,
        NestingMode mode = NestingMode::normalize);

    /// Rebuilds a hierarchy from its leaf label paths (in leaf order) and
    /// per-leaf observation counts, as stored in a model archive.
    static Hierarchy from_leaves(const std::vector<std::vector<std::string>>& leaf_labels,
                                 const std::vector<std::size_t>& leaf_counts, std::size_t depth);

    /// Checks the structural invariants; throws InternalError on violation.
    void validate() const;

private:
    std::vector<std::vector<HierarchyNode>> levels_;
    std::map<NodeId, std::size_t> index_;
    // child_lookup_[l][i]: label -> child index at level l+1, for node i at level l
    std::vector<std::vector<std::unordered_map<std::string, std::size_t>>> child_lookup_;
};

inline std::pair<Hierarchy, std::vector<std::size_t>> Hierarchy::build(
    const std::vector<std::vector<std::string>>& row_labels, std::size_t depth, NestingMode mode) {
    if (depth < 1) throw UsageError("hierarchy depth must be at least 1");
    if (row_labels.empty()) throw DataError("cannot build a hierarchy from zero observations");

    // Creation-order tree: nodes per level in first-appearance order.
    struct Proto {
        std::string label;
        std::size_t parent;
        std::vector<std::size_t> children;
        std::size_t n_obs = 0;
    };
    std::vector<std::vector<Proto>> proto(depth + 1);
    proto[0].push_back({"", 0, {}, 0});
    std::vector<std::vector<std::unordered_map<std::string, std::size_t>>> lookup(depth);
    lookup[0].resize(1);
    // strict mode: first parent seen for each label per level
    std::vector<std::unordered_map<std::string, std::size_t>> owner(depth + 1);

    std::vector<std::size_t> proto_leaf(row_labels.size());
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
        const auto& labels = row_labels[r];
        if (labels.size() != depth)
            throw DataError("row " + std::to_string(r + 1) + " has " + std::to_string(labels.size()) +
                            " grouping labels, expected " + std::to_string(depth));
        std::size_t cur = 0;
        for (std::size_t l = 0; l < depth; ++l) {
            auto& table = lookup[l][cur];
            auto it = table.find(labels[l]);
            std::size_t next;
            if (it == table.end()) {
                if (mode == NestingMode::strict && l >= 1) {
                    auto [oit, inserted] = owner[l + 1].emplace(labels[l], cur);
                    if (!inserted && oit->second != cur)
                        throw DataError("ragged nesting: label '" + labels[l] + "' at level " +
                                        std::to_string(l + 1) + " appears under both '" +
                                        proto[l][oit->second].label + "' and '" + proto[l][cur].label +
                                        "'");
                }
                next = proto[l + 1].size();
                proto[l + 1].push_back({labels[l], cur, {}, 0});
                proto[l][cur].children.push_back(next);
                table.emplace(labels[l], next);
                if (l + 1 < depth) lookup[l + 1].emplace_back();
            } else {
                next = it->second;
            }
            cur = next;
        }
        proto_leaf[r] = cur;
        ++proto[depth][cur].n_obs;
    }

    // Reorder each level breadth-first (parent order, then child number),
    // which is ascending NodeId order.
    Hierarchy h;
    h.levels_.resize(depth + 1);
    h.child_lookup_.resize(depth);
    std::vector<std::vector<std::size_t>> new_index(depth + 1);
    new_index[0] = {0};
    h.levels_[0].push_back(HierarchyNode{NodeId(), "", 0, {}, 0});
    std::vector<std::size_t> order_prev = {0};  // proto indices in new order
    for (std::size_t l = 0; l < depth; ++l) {
        std::vector<std::size_t> order_next;
        new_index[l + 1].assign(proto[l + 1].size(), 0);
        for (std::size_t pos = 0; pos < order_prev.size(); ++pos) {
            const auto& pnode = proto[l][order_prev[pos]];
            std::uint32_t j = 0;
            for (std::size_t c : pnode.children) {
                ++j;
                new_index[l + 1][c] = order_next.size();
                order_next.push_back(c);
                HierarchyNode node;
                node.id = h.levels_[l][pos].id.child(j);
                node.label = proto[l + 1][c].label;
                node.parent = pos;
                h.levels_[l][pos].children.push_back(h.levels_[l + 1].size());
                h.levels_[l + 1].push_back(std::move(node));
            }
        }
        order_prev = std::move(order_next);
    }
    for (std::size_t i = 0; i < proto[depth].size(); ++i)
        h.levels_[depth][new_index[depth][i]].n_obs = proto[depth][i].n_obs;
    for (std::size_t l = depth; l > 0; --l)
        for (const auto& node : h.levels_[l]) h.levels_[l - 1][node.parent].n_obs += node.n_obs;

    for (std::size_t l = 0; l <= depth; ++l)
        for (std::size_t i = 0; i < h.levels_[l].size(); ++i) h.index_.emplace(h.levels_[l][i].id, i);
    for (std::size_t l = 0; l < depth; ++l) {
        h.child_lookup_[l].resize(h.levels_[l].size());
        for (std::size_t i = 0; i < h.levels_[l].size(); ++i)
            for (std::size_t c : h.levels_[l][i].children)
                h.child_lookup_[l][i].emplace(h.levels_[l + 1][c].label, c);
    }

    std::vector<std::size_t> leaf_of_row(row_labels.size());
    for (std::size_t r = 0; r < row_labels.size(); ++r) leaf_of_row[r] = new_index[depth][proto_leaf[r]];
    return {std::move(h), std::move(leaf_of_row)};
}

inline Hierarchy Hierarchy::from_leaves(const std::vector<std::vector<std::string>>& leaf_labels,
                                        const std::vector<std::size_t>& leaf_counts, std::size_t depth) {
    if (leaf_labels.size() != leaf_counts.size()) throw DataError("leaf labels and counts differ in length");
    auto [h, leaf_of_row] = build(leaf_labels, depth, NestingMode::normalize);
    if (h.levels_[depth].size() != leaf_labels.size()) throw DataError("duplicate leaf label paths");
    for (std::size_t k = 0; k < leaf_of_row.size(); ++k)
        if (leaf_of_row[k] != k) throw DataError("leaf label paths are not in hierarchy order");
    for (auto& level : h.levels_)
        for (auto& n : level) n.n_obs = 0;
    for (std::size_t k = 0; k < leaf_counts.size(); ++k) h.levels_[depth][k].n_obs = leaf_counts[k];
    for (std::size_t l = depth; l > 0; --l)
        for (const auto& node : h.levels_[l]) h.levels_[l - 1][node.parent].n_obs += node.n_obs;
    return h;
}

inline void Hierarchy::validate() const {
    const std::size_t d = depth();
    if (levels_.empty() || levels_[0].size() != 1) throw InternalError("hierarchy must have one root");
    for (std::size_t l = 1; l <= d; ++l) {
        std::size_t total_children = 0;
        for (const auto& p : levels_[l - 1]) total_children += p.children.size();
        if (total_children != levels_[l].size())
            throw InternalError("level " + std::to_string(l) + " size does not match parent child counts");
        for (std::size_t i = 0; i < levels_[l].size(); ++i) {
            const auto& n = levels_[l][i];
            if (n.id.depth() != l) throw InternalError("node depth mismatch at " + n.id.to_string());
            if (ancestor(n.id, l - 1) != levels_[l - 1].at(n.parent).id)
                throw InternalError("parent link mismatch at " + n.id.to_string());
            if (i > 0 && !(levels_[l][i - 1].id < n.id))
                throw InternalError("level " + std::to_string(l) + " not in ascending NodeId order");
        }
    }
    for (std::size_t l = 0; l < d; ++l)
        for (const auto& n : levels_[l])
            if (n.children.empty()) throw InternalError("internal node " + n.id.to_string() + " has no children");
}

}  // namespace hglmm
