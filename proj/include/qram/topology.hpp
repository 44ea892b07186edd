#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "qram/common.hpp"

namespace qram {

// Routers of a perfect binary routing tree, numbered breadth-first from the
// root (id 0). Level 1 is the root; level n routers feed 2^n memory cells
// through their two output legs.
struct TreeTopology {
    int depth = 0;                               // n >= 1
    int router_count = 0;                        // 2^n - 1
    std::uint64_t memory_size = 0;               // 2^n
    std::vector<int> level;                      // level[r] in [1, n]
    std::vector<int> parent;                     // parent[r], -1 for the root
    std::vector<std::array<int, 2>> children;    // children[r], {-1,-1} at level n
    std::vector<std::array<std::int64_t, 2>> leaf_cells;  // {-1,-1} above level n

    bool is_leaf_router(int r) const { return level[static_cast<std::size_t>(r)] == depth; }
};

enum class RouterKind { TwoLevel, ThreeLevel };

// Local model of one router qudit. Three-level routers add the inert wait
// state |W> on top of the routing subspace {|0>, |1>}; qubit gates lift to
// qutrits by acting as identity on |W>.
struct RouterModel {
    RouterKind kind = RouterKind::ThreeLevel;

    int local_dim() const { return kind == RouterKind::ThreeLevel ? 3 : 2; }
    static constexpr std::uint8_t wait_digit = 2;  // digit encoding of |W>
};

inline TreeTopology build_tree(int depth) {
    if (depth < 1) throw std::invalid_argument("build_tree: depth must be >= 1");
    if (depth > 16) throw std::invalid_argument("build_tree: depth beyond supported scale");
    TreeTopology t;
    t.depth = depth;
    t.router_count = (1 << depth) - 1;
    t.memory_size = std::uint64_t{1} << depth;
    const int R = t.router_count;
    t.level.resize(static_cast<std::size_t>(R));
    t.parent.resize(static_cast<std::size_t>(R));
    t.children.assign(static_cast<std::size_t>(R), {-1, -1});
    t.leaf_cells.assign(static_cast<std::size_t>(R), {-1, -1});
    for (int r = 0; r < R; ++r) {
        int lvl = 1;
        while ((1 << lvl) - 1 <= r) ++lvl;
        t.level[static_cast<std::size_t>(r)] = lvl;
        t.parent[static_cast<std::size_t>(r)] = r == 0 ? -1 : (r - 1) / 2;
        if (lvl < depth) {
            t.children[static_cast<std::size_t>(r)] = {2 * r + 1, 2 * r + 2};
        } else {
            // Index of the router within its level equals its path bits, so
            // its legs address cells 2*idx and 2*idx + 1.
            const std::int64_t idx = r - ((1 << (lvl - 1)) - 1);
            t.leaf_cells[static_cast<std::size_t>(r)] = {2 * idx, 2 * idx + 1};
        }
    }
    return t;
}

// Routers visited by address i, root first. Address bit m (most significant
// first) selects the output leg at level m.
inline std::vector<int> branch(const TreeTopology& tree, std::uint64_t address) {
    if (address >= tree.memory_size) throw std::invalid_argument("branch: address out of range");
    std::vector<int> path;
    path.reserve(static_cast<std::size_t>(tree.depth));
    int r = 0;
    for (int m = 1; m <= tree.depth; ++m) {
        path.push_back(r);
        if (m < tree.depth) {
            const int bit = static_cast<int>((address >> (tree.depth - m)) & 1u);
            r = tree.children[static_cast<std::size_t>(r)][static_cast<std::size_t>(bit)];
        }
    }
    return path;
}

inline std::vector<int> subtree_routers(const TreeTopology& tree, int root) {
    std::vector<int> out;
    std::vector<int> stack{root};
    while (!stack.empty()) {
        const int r = stack.back();
        stack.pop_back();
        out.push_back(r);
        const auto& ch = tree.children[static_cast<std::size_t>(r)];
        if (ch[0] >= 0) {
            stack.push_back(ch[0]);
            stack.push_back(ch[1]);
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Support envelope of a fault on router r in the two-level analysis: walk
// upward while the current node is a left child; the walk stops at the first
// node that is a right child or at the root, and the envelope is that node's
// subtree. Faults cannot cross a right-child link because an idle all-zero
// router exchanges contents with its left output only.
inline std::vector<int> propagation_envelope(const TreeTopology& tree, int r) {
    if (r < 0 || r >= tree.router_count)
        throw std::invalid_argument("propagation_envelope: router out of range");
    int cur = r;
    while (tree.parent[static_cast<std::size_t>(cur)] >= 0) {
        const int p = tree.parent[static_cast<std::size_t>(cur)];
        const bool is_left = tree.children[static_cast<std::size_t>(p)][0] == cur;
        if (!is_left) break;  // right children block upward propagation
        cur = p;
    }
    return subtree_routers(tree, cur);
}

// One contracted block of a coarse graining: the depth-d binary subtree rooted
// at `top`, acting as a single D-dimensional super-router with D = 2^d + 1.
struct SuperRouter {
    int top = -1;
    std::vector<int> members;  // 2^d - 1 original routers, sorted
    int dimension = 0;         // 2^d + 1
};

struct GrainedTree {
    int depth = 0;  // n of the underlying tree
    int d = 1;
    int u = 1;
    std::vector<int> contracted_levels;   // levels covered by blocks, ascending
    std::vector<int> noiseless_peripheries;  // uncontracted levels
    std::vector<SuperRouter> super_routers;

    // Super-router containing original router r, or -1 if r is peripheral.
    int super_of(int r) const {
        for (std::size_t s = 0; s < super_routers.size(); ++s)
            if (std::binary_search(super_routers[s].members.begin(),
                                   super_routers[s].members.end(), r))
                return static_cast<int>(s);
        return -1;
    }
};

// Contract runs of d consecutive levels into super-routers. The offset u in
// [1, d] leaves the first (u mod d) levels uncontracted; whatever does not
// complete a full run at the bottom stays uncontracted as well.
inline GrainedTree coarse_grain(const TreeTopology& tree, int d, int u) {
    if (d < 1 || d > tree.depth) throw std::invalid_argument("coarse_grain: d out of [1, depth]");
    if (u < 1 || u > d) throw std::invalid_argument("coarse_grain: u out of [1, d]");
    GrainedTree g;
    g.depth = tree.depth;
    g.d = d;
    g.u = u;
    const int prefix = u % d;
    for (int lvl = 1; lvl <= prefix; ++lvl) g.noiseless_peripheries.push_back(lvl);
    int start = prefix + 1;
    while (start + d - 1 <= tree.depth) {
        for (int lvl = start; lvl < start + d; ++lvl) g.contracted_levels.push_back(lvl);
        // one super-router per router at the top level of the block
        for (int r = 0; r < tree.router_count; ++r) {
            if (tree.level[static_cast<std::size_t>(r)] != start) continue;
            SuperRouter s;
            s.top = r;
            for (int m : subtree_routers(tree, r))
                if (tree.level[static_cast<std::size_t>(m)] < start + d) s.members.push_back(m);
            std::sort(s.members.begin(), s.members.end());
            s.dimension = (1 << d) + 1;
            g.super_routers.push_back(std::move(s));
        }
        start += d;
    }
    for (int lvl = start; lvl <= tree.depth; ++lvl) g.noiseless_peripheries.push_back(lvl);
    std::sort(g.noiseless_peripheries.begin(), g.noiseless_peripheries.end());
    return g;
}

inline nlohmann::json topology_to_json(const TreeTopology& tree) {
    nlohmann::json j;
    j["depth"] = tree.depth;
    j["router_count"] = tree.router_count;
    j["memory_size"] = tree.memory_size;
    nlohmann::json routers = nlohmann::json::array();
    for (int r = 0; r < tree.router_count; ++r) {
        nlohmann::json e;
        e["id"] = r;
        e["level"] = tree.level[static_cast<std::size_t>(r)];
        e["parent"] = tree.parent[static_cast<std::size_t>(r)];
        e["children"] = tree.children[static_cast<std::size_t>(r)];
        e["leaf_cells"] = tree.leaf_cells[static_cast<std::size_t>(r)];
        routers.push_back(std::move(e));
    }
    j["routers"] = std::move(routers);
    return j;
}

inline TreeTopology topology_from_json(const nlohmann::json& j) {
    TreeTopology t = build_tree(j.at("depth").get<int>());
    // The breadth-first numbering is canonical, so rebuilding and validating
    // against the stored arrays is both a parse and an integrity check.
    if (j.at("router_count").get<int>() != t.router_count)
        throw std::invalid_argument("topology_from_json: router_count mismatch");
    for (const auto& e : j.at("routers")) {
        const int r = e.at("id").get<int>();
        if (r < 0 || r >= t.router_count || e.at("parent").get<int>() != t.parent[static_cast<std::size_t>(r)])
            throw std::invalid_argument("topology_from_json: inconsistent router record");
    }
    return t;
}

}  // namespace qram
