#include <catch2/catch_amalgamated.hpp>

#include "qram/channels.hpp"

using namespace qram;
using Catch::Approx;

TEST_CASE("lifted pauli matrices act on the routing subspace only") {
    const Eigen::MatrixXcd x3 = pauli_matrix(PauliOp::X, 3);
    REQUIRE(x3(2, 2) == cplx{1, 0});
    REQUIRE(x3(0, 1) == cplx{1, 0});
    REQUIRE(x3(1, 0) == cplx{1, 0});
    REQUIRE(x3(0, 0) == cplx{0, 0});
    const Eigen::MatrixXcd y2 = pauli_matrix(PauliOp::Y, 2);
    REQUIRE(y2(0, 1) == cplx{0, -1});
    REQUIRE(y2(1, 0) == cplx{0, 1});
    // unitarity of the lift
    const Eigen::MatrixXcd z3 = pauli_matrix(PauliOp::Z, 3);
    REQUIRE(((z3.adjoint() * z3) - Eigen::MatrixXcd::Identity(3, 3)).norm() < 1e-14);
}

TEST_CASE("standard channels are trace preserving") {
    REQUIRE(is_trace_preserving(identity_channel(3)));
    REQUIRE(is_trace_preserving(bernoulli_x_channel(0.1, 3)));
    REQUIRE(is_trace_preserving(depolarizing_channel(0.3, 2)));
    REQUIRE(is_trace_preserving(pair_depolarizing_channel(0.2, 3, 3)));
    REQUIRE(is_trace_preserving(coherent_phase_channel(0.7, 2)));
    REQUIRE(is_trace_preserving(coherent_pair_phase_channel(0.4, 2, 2)));
    REQUIRE(is_trace_preserving(amplitude_damping_channel(0.25, 3)));
    REQUIRE(is_trace_preserving(
        pauli_channel({{PauliOp::X, 0.05}, {PauliOp::Z, 0.1}}, 2)));
    REQUIRE_THROWS_AS(pauli_channel({{PauliOp::X, 1.5}}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(pauli_channel({{PauliOp::X, -0.1}}, 2), std::invalid_argument);
}

TEST_CASE("error rate matches the closed forms of reference channels") {
    // identity: zero
    REQUIRE(error_rate(identity_channel(2)) == Approx(0.0).margin(1e-14));
    // probability-p unitary insertion: p
    REQUIRE(error_rate(bernoulli_x_channel(0.05, 2)) == Approx(0.05));
    REQUIRE(error_rate(bernoulli_x_channel(0.05, 3)) == Approx(0.05));
    // depolarizing: p
    REQUIRE(error_rate(depolarizing_channel(0.01, 2)) == Approx(0.01));
    REQUIRE(error_rate(pair_depolarizing_channel(0.003, 2, 2)) == Approx(0.003));
    // coherent rotation: sin^2 kappa
    const double kappa = 0.23;
    REQUIRE(error_rate(coherent_phase_channel(kappa, 2)) ==
            Approx(std::sin(kappa) * std::sin(kappa)));
    REQUIRE(error_rate(coherent_pair_phase_channel(kappa, 2, 2)) ==
            Approx(std::sin(kappa) * std::sin(kappa)));
    // amplitude damping: gamma
    REQUIRE(error_rate(amplitude_damping_channel(0.2, 2)) == Approx(0.2));
    // on a qubit the Hermitian part stays definite, so the rate keeps the
    // sin^2 form past pi/2 ...
    REQUIRE(error_rate(coherent_phase_channel(2.0, 2)) ==
            Approx(std::sin(2.0) * std::sin(2.0)));
    // ... but the wait level pins an eigenvalue at +1, the spectrum straddles
    // zero, and the rate saturates
    REQUIRE(error_rate(coherent_phase_channel(2.0, 3)) == Approx(1.0));
}

TEST_CASE("polar split separates coherent and incoherent parts") {
    const double kappa = 0.31;
    const PolarSplit s = polar_split(coherent_phase_unitary(kappa, 2));
    REQUIRE(s.kappa == Approx(kappa));
    REQUIRE((s.p0 - Eigen::MatrixXcd::Identity(2, 2)).norm() < 1e-12);

    // dominant element of amplitude damping is purely incoherent
    const Channel ad = amplitude_damping_channel(0.3, 2);
    const PolarSplit s2 = polar_split(dominant_kraus(ad));
    REQUIRE(s2.kappa == Approx(0.0).margin(1e-12));
    REQUIRE(s2.p0(1, 1).real() == Approx(std::sqrt(0.7)));

    // reassembly
    const Eigen::MatrixXcd k0 = dominant_kraus(ad);
    REQUIRE((s2.v0 * s2.p0 - k0).norm() < 1e-12);
}

TEST_CASE("infidelity bounds have the documented scalings") {
    const double eps = 1e-3;
    REQUIRE(bound_wait_stochastic(eps, 8, 1) == Approx(4 * eps * 9 * 2));
    REQUIRE(bound_two_level_stochastic(eps, 8, 1) == Approx(2 * eps * 9 * 4));
    REQUIRE(bound_arbitrary_init(eps, 8, 1) == Approx(4 * eps * 9 * 9));
    REQUIRE(bound_arbitrary_init_stated(eps, 8, 1) == Approx(4 * eps * 9 * 4));
    REQUIRE(bound_coherent(eps, 8, 1) == Approx(4 * eps * 81 * 4));
    REQUIRE(bound_coherent(eps, 8, 1, 2.0) == Approx(2 * eps * 81 * 4));
    REQUIRE(bound_twirl_insitu(eps, 8, 1) == Approx(8 * eps * 9 * 2));
    REQUIRE(bound_twirl_classical(eps, 8, 1) == Approx(8 * eps * 81 * 2));
    // doubling the rate doubles every bound
    REQUIRE(bound_wait_stochastic(2 * eps, 8, 1) == Approx(2 * bound_wait_stochastic(eps, 8, 1)));
}

TEST_CASE("infidelity composition round-trips single entries") {
    REQUIRE(combine_infidelities_fvg({0.037}) == Approx(0.037));
    REQUIRE(combine_infidelities_fvg({}) == Approx(0.0));
    REQUIRE(combine_infidelities_fvg({0.01, 0.02}) == Approx(0.0595980117).epsilon(1e-6));
    // saturation
    REQUIRE(combine_infidelities_fvg({0.9, 0.9}) == Approx(1.0));
    REQUIRE_THROWS_AS(combine_infidelities_fvg({1.5}), std::invalid_argument);
}

TEST_CASE("noise model json expands scopes") {
    const TreeTopology tree = build_tree(2);
    const nlohmann::json j = {
        {"channels",
         {{{"type", "depolarizing"}, {"p", 0.01}, {"scope", "per_router_control"}},
          {{"type", "pair_depolarizing"}, {"p", 0.003}, {"scope", "per_router_pair"}},
          {{"type", "bernoulli_x"},
           {"p", 0.05},
           {"scope", "sites"},
           {"sites", {{{"kind", "router_hold"}, {"index", 1}}}}},
          {{"type", "coherent_pair_phase"},
           {"kappa", 0.1},
           {"scope", "per_parent_child_hold"}}}}};
    const NoiseModel m = noise_model_from_json(j, tree, RouterKind::ThreeLevel);
    // 3 controls + 3 pairs + 1 explicit + 2 parent-child links
    REQUIRE(m.placements.size() == 3 + 3 + 1 + 2);
    REQUIRE(m.placements[0].sites.size() == 1);
    REQUIRE(m.placements[0].channel.dims == std::vector<int>{3});
    REQUIRE(m.placements[3].sites.size() == 2);
    REQUIRE(m.placements[3].channel.dims == std::vector<int>{3, 3});
    REQUIRE(model_error_rate(m) == Approx(0.05));

    const nlohmann::json bad = {{"channels",
                                 {{{"type", "depolarizing"},
                                   {"p", 0.01},
                                   {"scope", "sites"},
                                   {"sites", {{{"kind", "router_control"}, {"index", 9}}}}}}}};
    REQUIRE_THROWS_AS(noise_model_from_json(bad, tree, RouterKind::ThreeLevel),
                      std::invalid_argument);
}

TEST_CASE("grain accounting assigns placements to the smallest fitting block") {
    const TreeTopology tree = build_tree(2);
    NoiseModel m;
    // single-router placement: assignable at d=1
    ChannelPlacement p1;
    p1.name = "single";
    p1.sites = {{ChannelSite::Kind::RouterControl, 1}, {ChannelSite::Kind::RouterHold, 1}};
    p1.channel = pair_depolarizing_channel(0.01, 2, 2);
    m.placements.push_back(p1);
    // two-router cluster: needs the d=2 (u=2) super-router
    ChannelPlacement p2;
    p2.name = "cluster";
    p2.sites = {{ChannelSite::Kind::RouterHold, 0}, {ChannelSite::Kind::RouterHold, 1}};
    p2.channel = pair_depolarizing_channel(0.02, 2, 2);
    m.placements.push_back(p2);
    // off-tree placement: unassignable
    ChannelPlacement p3;
    p3.name = "bus";
    p3.sites = {{ChannelSite::Kind::Bus, 0}};
    p3.channel = depolarizing_channel(0.5, 2);
    m.placements.push_back(p3);

    const GrainAccounting acc = grain_accounting(tree, m);
    REQUIRE(acc.assigned.size() == 2);
    REQUIRE(acc.unassignable == std::vector<std::size_t>{2});
    REQUIRE(acc.assigned[0].d == 1);
    REQUIRE(acc.assigned[0].u == 1);
    REQUIRE(acc.assigned[1].d == 2);
    REQUIRE(acc.assigned[1].u == 2);
    REQUIRE(acc.eps_by_d.at(1) == Approx(0.01));
    REQUIRE(acc.eps_by_d.at(2) == Approx(0.02));
}
