#include <catch2/catch_amalgamated.hpp>

#include "qram/topology.hpp"

using namespace qram;

TEST_CASE("build_tree produces the breadth-first routing tree") {
    const TreeTopology t = build_tree(3);
    REQUIRE(t.depth == 3);
    REQUIRE(t.router_count == 7);
    REQUIRE(t.memory_size == 8);
    REQUIRE(t.level == std::vector<int>{1, 2, 2, 3, 3, 3, 3});
    REQUIRE(t.parent == std::vector<int>{-1, 0, 0, 1, 1, 2, 2});
    REQUIRE(t.children[0] == std::array<int, 2>{1, 2});
    REQUIRE(t.children[2] == std::array<int, 2>{5, 6});
    REQUIRE(t.children[4] == std::array<int, 2>{-1, -1});
    REQUIRE(t.leaf_cells[3] == std::array<std::int64_t, 2>{0, 1});
    REQUIRE(t.leaf_cells[5] == std::array<std::int64_t, 2>{4, 5});
    REQUIRE(t.leaf_cells[6] == std::array<std::int64_t, 2>{6, 7});
    REQUIRE(t.leaf_cells[1] == std::array<std::int64_t, 2>{-1, -1});
    REQUIRE_THROWS_AS(build_tree(0), std::invalid_argument);
}

TEST_CASE("branch follows address bits most significant first") {
    const TreeTopology t = build_tree(3);
    REQUIRE(branch(t, 0) == std::vector<int>{0, 1, 3});
    REQUIRE(branch(t, 5) == std::vector<int>{0, 2, 5});  // 101: right, left
    REQUIRE(branch(t, 7) == std::vector<int>{0, 2, 6});
    // last router's legs contain the addressed cell
    for (std::uint64_t a = 0; a < 8; ++a) {
        const auto path = branch(t, a);
        const auto cells = t.leaf_cells[static_cast<std::size_t>(path.back())];
        REQUIRE((cells[0] == static_cast<std::int64_t>(a) ||
                 cells[1] == static_cast<std::int64_t>(a)));
    }
    REQUIRE_THROWS_AS(branch(t, 8), std::invalid_argument);
}

TEST_CASE("propagation envelope stops at the first right-child ancestor") {
    const TreeTopology t3 = build_tree(3);
    // leftmost leaf router: every ancestor link is a left-child link
    REQUIRE(propagation_envelope(t3, 3) == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
    // right child of the root is its own envelope top
    REQUIRE(propagation_envelope(t3, 2) == std::vector<int>{2, 5, 6});
    // a right child deep in the tree stays put
    REQUIRE(propagation_envelope(t3, 6) == std::vector<int>{6});
    // left child under a right child climbs exactly one step
    REQUIRE(propagation_envelope(t3, 5) == std::vector<int>{2, 5, 6});
    REQUIRE(propagation_envelope(t3, 0) == std::vector<int>{0, 1, 2, 3, 4, 5, 6});

    const TreeTopology t2 = build_tree(2);
    REQUIRE(propagation_envelope(t2, 1) == std::vector<int>{0, 1, 2});
}

TEST_CASE("coarse graining contracts runs of d levels with offset u") {
    const TreeTopology t4 = build_tree(4);

    SECTION("d=2 u=1 leaves levels 1 and 4 peripheral") {
        const GrainedTree g = coarse_grain(t4, 2, 1);
        REQUIRE(g.noiseless_peripheries == std::vector<int>{1, 4});
        REQUIRE(g.contracted_levels == std::vector<int>{2, 3});
        REQUIRE(g.super_routers.size() == 2);
        REQUIRE(g.super_routers[0].top == 1);
        REQUIRE(g.super_routers[0].members == std::vector<int>{1, 3, 4});
        REQUIRE(g.super_routers[1].members == std::vector<int>{2, 5, 6});
        REQUIRE(g.super_routers[0].dimension == 5);
        REQUIRE(g.super_of(4) == 0);
        REQUIRE(g.super_of(0) == -1);
        REQUIRE(g.super_of(9) == -1);
    }

    SECTION("d=2 u=2 contracts from the root") {
        const GrainedTree g = coarse_grain(t4, 2, 2);
        REQUIRE(g.noiseless_peripheries.empty());
        REQUIRE(g.contracted_levels == std::vector<int>{1, 2, 3, 4});
        REQUIRE(g.super_routers.size() == 1 + 4);
        REQUIRE(g.super_routers[0].members == std::vector<int>{0, 1, 2});
        // level-3 block tops are routers 3..6
        REQUIRE(g.super_routers[1].top == 3);
        REQUIRE(g.super_routers[1].members == std::vector<int>{3, 7, 8});
    }

    SECTION("whole tree as one super-router") {
        const TreeTopology t2 = build_tree(2);
        const GrainedTree g = coarse_grain(t2, 2, 2);
        REQUIRE(g.super_routers.size() == 1);
        REQUIRE(g.super_routers[0].members == std::vector<int>{0, 1, 2});
        REQUIRE(g.super_routers[0].dimension == 5);
        REQUIRE(g.noiseless_peripheries.empty());
    }

    SECTION("d=1 is the identity graining") {
        const TreeTopology t2 = build_tree(2);
        const GrainedTree g = coarse_grain(t2, 1, 1);
        REQUIRE(g.super_routers.size() == 3);
        for (int r = 0; r < 3; ++r) {
            REQUIRE(g.super_routers[static_cast<std::size_t>(r)].members == std::vector<int>{r});
            REQUIRE(g.super_routers[static_cast<std::size_t>(r)].dimension == 3);
            REQUIRE(g.super_of(r) == r);
        }
        REQUIRE(g.noiseless_peripheries.empty());
    }

    SECTION("parameter validation") {
        REQUIRE_THROWS_AS(coarse_grain(t4, 0, 1), std::invalid_argument);
        REQUIRE_THROWS_AS(coarse_grain(t4, 5, 1), std::invalid_argument);
        REQUIRE_THROWS_AS(coarse_grain(t4, 2, 3), std::invalid_argument);
        REQUIRE_THROWS_AS(coarse_grain(t4, 2, 0), std::invalid_argument);
    }
}

TEST_CASE("topology serializes to json and back") {
    const TreeTopology t = build_tree(3);
    const nlohmann::json j = topology_to_json(t);
    REQUIRE(j.at("depth") == 3);
    REQUIRE(j.at("routers").size() == 7);
    const TreeTopology back = topology_from_json(j);
    REQUIRE(back.router_count == t.router_count);
    REQUIRE(back.level == t.level);
    REQUIRE(back.parent == t.parent);

    nlohmann::json bad = j;
    bad["routers"][3]["parent"] = 2;
    REQUIRE_THROWS_AS(topology_from_json(bad), std::invalid_argument);
}
