#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "qram/circuit.hpp"

using namespace qram;
using Catch::Approx;

namespace {

// Final state of an ideal query: answer on the interface qubits, tree and
// legs restored to the background exactly.
SparseState expected_output(const SiteLayout& L,
                            const std::vector<std::pair<std::uint64_t, cplx>>& addr,
                            const std::vector<int>& memory, const BasisKey& background) {
    SparseState s;
    s.layout = &L;
    const int n = L.tree.depth;
    for (const auto& [a, alpha] : addr) {
        const int x = memory[static_cast<std::size_t>(a)] & 1;
        BasisKey base = background;
        for (int m = 1; m <= n; ++m)
            base.set_digit(L.address_site(m), static_cast<std::uint8_t>((a >> (n - m)) & 1u));
        for (int b = 0; b < 2; ++b) {
            BasisKey k = base;
            k.set_digit(L.bus_site(), static_cast<std::uint8_t>(b));
            if (!L.doubled) {
                s.amps[k] += alpha * std::sqrt(0.5) * ((x && b) ? -1.0 : 1.0);
            } else {
                for (int b2 = 0; b2 < 2; ++b2) {
                    BasisKey k2 = k;
                    k2.set_digit(L.bprime_site(), static_cast<std::uint8_t>(b2));
                    s.amps[k2] += alpha * 0.5 * ((x && b2) ? -1.0 : 1.0);
                }
            }
        }
    }
    return s;
}

std::vector<std::pair<std::uint64_t, cplx>> uniform_addresses(int n) {
    std::vector<std::pair<std::uint64_t, cplx>> a;
    const std::uint64_t N = std::uint64_t{1} << n;
    for (std::uint64_t i = 0; i < N; ++i)
        a.emplace_back(i, cplx{1.0 / std::sqrt(static_cast<double>(N)), 0.0});
    return a;
}

std::vector<int> random_memory(int n, std::mt19937_64& rng) {
    std::vector<int> x(std::size_t{1} << n);
    for (auto& v : x) v = static_cast<int>(rng() & 1);
    return x;
}

}  // namespace

TEST_CASE("serial calendar has the expected layer budget") {
    for (int n : {1, 2, 3, 4}) {
        const QueryCircuit qc = build_query(n, RouterKind::ThreeLevel, Schedule::Serial, false);
        const int H = n * (n + 3) / 2 + n + 1;
        REQUIRE(static_cast<int>(qc.layers.size()) == 2 * H + 1);
        REQUIRE(qc.tau == 2 * H);
        REQUIRE(qc.copy_layers == std::vector<std::size_t>{static_cast<std::size_t>(H)});
        REQUIRE(qc.noisy_layer_count() == qc.layers.size());
    }
    REQUIRE(build_query(1, RouterKind::ThreeLevel, Schedule::Serial, false).tau == 8);
    REQUIRE(build_query(2, RouterKind::ThreeLevel, Schedule::Serial, false).tau == 16);
    REQUIRE(build_query(4, RouterKind::ThreeLevel, Schedule::Serial, false).tau == 38);
}

TEST_CASE("pipelined calendar is linear in depth") {
    for (int n : {1, 2, 3, 4}) {
        const QueryCircuit qc = build_query(n, RouterKind::ThreeLevel, Schedule::Pipelined, false);
        REQUIRE(qc.tau == 6 * n + 2);
        REQUIRE(static_cast<int>(qc.layers.size()) == 6 * n + 3);
    }
}

TEST_CASE("doubled circuit repeats the query around the phase-copy cx") {
    const QueryCircuit qc = build_query(2, RouterKind::ThreeLevel, Schedule::Serial, true);
    const QueryCircuit single = build_query(2, RouterKind::ThreeLevel, Schedule::Serial, false);
    REQUIRE(qc.layers.size() == 2 * single.layers.size() + 1);
    REQUIRE(qc.cx_layer == static_cast<std::ptrdiff_t>(single.layers.size()));
    REQUIRE(qc.copy_layers.size() == 2);
    const Layer& cx = qc.layers[static_cast<std::size_t>(qc.cx_layer)];
    REQUIRE(cx.events.size() == 1);
    REQUIRE(cx.events[0].kind == GateEvent::Kind::Cx);
    REQUIRE(cx.events[0].a.kind == ChannelSite::Kind::BPrime);
    REQUIRE(cx.events[0].b.kind == ChannelSite::Kind::Bus);
    REQUIRE(qc.tau == single.tau);
}

TEST_CASE("ideal queries retrieve phases and restore the tree") {
    std::mt19937_64 rng(7);
    for (Schedule sched : {Schedule::Serial, Schedule::Pipelined}) {
        for (int n : {1, 2, 3}) {
            const SiteLayout L = make_layout(build_tree(n), RouterModel{RouterKind::ThreeLevel},
                                             false);
            const auto addr = uniform_addresses(n);
            const auto memory = random_memory(n, rng);
            SparseState psi = prepare_query_input(L, addr, idle_background(L));
            const QueryCircuit qc = build_query(n, RouterKind::ThreeLevel, sched, false);
            run_circuit(qc, psi, memory);
            const SparseState want = expected_output(L, addr, memory, idle_background(L));
            INFO("schedule " << schedule_name(sched) << " n " << n);
            REQUIRE(fidelity_pure(psi, want) == Approx(1.0));
            REQUIRE(subsystem_fidelity(psi, query_output_sites(L),
                                       ideal_query_target(L, addr, memory)) == Approx(1.0));
        }
    }
}

TEST_CASE("two-level all-zero query is exact") {
    std::mt19937_64 rng(11);
    const int n = 2;
    const SiteLayout L = make_layout(build_tree(n), RouterModel{RouterKind::TwoLevel}, false);
    const auto addr = uniform_addresses(n);
    const auto memory = random_memory(n, rng);
    SparseState psi = prepare_query_input(L, addr, idle_background(L));
    const QueryCircuit qc = build_query(n, RouterKind::TwoLevel, Schedule::Serial, false);
    run_circuit(qc, psi, memory);
    REQUIRE(fidelity_pure(psi, expected_output(L, addr, memory, idle_background(L))) ==
            Approx(1.0));
}

TEST_CASE("stray tree content corrupts a single query but not a doubled one") {
    const int n = 2;
    // Garbage on the right leg of the right leaf router reaches the copy
    // layer on three of the four branches; with x_3 = 1 those branches pick
    // up a relative sign.
    const std::vector<int> memory{0, 0, 0, 1};
    const auto addr = uniform_addresses(n);

    SECTION("single query picks up branch-dependent junk phases") {
        const SiteLayout L = make_layout(build_tree(n), RouterModel{RouterKind::TwoLevel}, false);
        BasisKey bg = idle_background(L);
        bg.set_digit(L.leg_site(3), 1);
        SparseState psi = prepare_query_input(L, addr, bg);
        run_circuit(build_query(n, RouterKind::TwoLevel, Schedule::Serial, false), psi, memory);
        const double f = subsystem_fidelity(psi, query_output_sites(L),
                                            ideal_query_target(L, addr, memory));
        REQUIRE(f == Approx(0.25));
    }

    SECTION("doubled query cancels the junk") {
        const SiteLayout L = make_layout(build_tree(n), RouterModel{RouterKind::TwoLevel}, true);
        BasisKey bg = idle_background(L);
        bg.set_digit(L.leg_site(3), 1);
        SparseState psi = prepare_query_input(L, addr, bg);
        run_circuit(build_query(n, RouterKind::TwoLevel, Schedule::Serial, true), psi, memory);
        REQUIRE(subsystem_fidelity(psi, query_output_sites(L),
                                   ideal_query_target(L, addr, memory)) == Approx(1.0));
        REQUIRE(fidelity_pure(psi, expected_output(L, addr, memory, bg)) == Approx(1.0));
    }
}

TEST_CASE("doubled query works from random basis backgrounds") {
    std::mt19937_64 rng(23);
    for (RouterKind kind : {RouterKind::TwoLevel, RouterKind::ThreeLevel}) {
        const int n = 2;
        const SiteLayout L = make_layout(build_tree(n), RouterModel{kind}, true);
        const int qd = L.router.local_dim();
        for (int rep = 0; rep < 4; ++rep) {
            BasisKey bg{};
            for (int r = 0; r < L.tree.router_count; ++r) {
                bg.set_digit(L.control_site(r), static_cast<std::uint8_t>(rng() % qd));
                bg.set_digit(L.hold_site(r), static_cast<std::uint8_t>(rng() % qd));
            }
            for (std::uint64_t c = 0; c < L.tree.memory_size; ++c)
                bg.set_digit(L.leg_site(static_cast<std::int64_t>(c)),
                             static_cast<std::uint8_t>(rng() % qd));
            const auto memory = random_memory(n, rng);
            const auto addr = uniform_addresses(n);
            SparseState psi = prepare_query_input(L, addr, bg);
            run_circuit(build_query(n, kind, Schedule::Serial, true), psi, memory);
            INFO("router " << router_kind_name(kind) << " rep " << rep);
            REQUIRE(subsystem_fidelity(psi, query_output_sites(L),
                                       ideal_query_target(L, addr, memory)) == Approx(1.0));
        }
    }
}

TEST_CASE("empty query leaves any basis configuration invariant") {
    std::mt19937_64 rng(5);
    const int n = 2;
    const SiteLayout L = make_layout(build_tree(n), RouterModel{RouterKind::TwoLevel}, false);
    const QueryCircuit qc = build_query(n, RouterKind::TwoLevel, Schedule::Serial, false);
    const QueryCircuit empty = build_empty_query(qc);
    for (const auto& layer : empty.layers)
        for (const auto& e : layer.events) REQUIRE_FALSE(touches_interface(e));
    for (int rep = 0; rep < 5; ++rep) {
        BasisKey bg{};
        for (int r = 0; r < L.tree.router_count; ++r) {
            bg.set_digit(L.control_site(r), static_cast<std::uint8_t>(rng() & 1));
            bg.set_digit(L.hold_site(r), static_cast<std::uint8_t>(rng() & 1));
        }
        for (std::uint64_t c = 0; c < L.tree.memory_size; ++c)
            bg.set_digit(L.leg_site(static_cast<std::int64_t>(c)),
                         static_cast<std::uint8_t>(rng() & 1));
        SparseState psi = basis_state(L, bg);
        const auto memory = random_memory(n, rng);
        SparseState before = psi;
        run_circuit(empty, psi, memory);
        REQUIRE(fidelity_pure(psi, before) == Approx(1.0));
    }
}

TEST_CASE("noise callback fires once per noisy layer") {
    const QueryCircuit qc = build_query(1, RouterKind::ThreeLevel, Schedule::Serial, false);
    const SiteLayout L = make_layout(build_tree(1), RouterModel{RouterKind::ThreeLevel}, false);
    SparseState psi = prepare_query_input(L, {{0, 1.0}}, idle_background(L));
    std::size_t firings = 0;
    run_circuit(qc, psi, {0, 0}, [&](SparseState&, std::size_t i) {
        REQUIRE(i == firings);
        ++firings;
    });
    REQUIRE(firings == static_cast<std::size_t>(qc.tau + 1));

    const QueryCircuit dbl = build_query(1, RouterKind::ThreeLevel, Schedule::Serial, true);
    const SiteLayout L2 = make_layout(build_tree(1), RouterModel{RouterKind::ThreeLevel}, true);
    SparseState psi2 = prepare_query_input(L2, {{0, 1.0}}, idle_background(L2));
    firings = 0;
    run_circuit(dbl, psi2, {0, 0}, [&](SparseState&, std::size_t) { ++firings; });
    REQUIRE(firings == 2 * static_cast<std::size_t>(dbl.tau + 1) + 1);
}

TEST_CASE("run_circuit validates its inputs") {
    const QueryCircuit qc = build_query(2, RouterKind::ThreeLevel, Schedule::Serial, false);
    const SiteLayout wrong_depth = make_layout(build_tree(1), RouterModel{RouterKind::ThreeLevel},
                                               false);
    SparseState psi = prepare_query_input(wrong_depth, {{0, 1.0}}, idle_background(wrong_depth));
    REQUIRE_THROWS_AS(run_circuit(qc, psi, {0, 0, 0, 0}), std::invalid_argument);

    const SiteLayout L = make_layout(build_tree(2), RouterModel{RouterKind::ThreeLevel}, false);
    SparseState psi2 = prepare_query_input(L, {{0, 1.0}}, idle_background(L));
    REQUIRE_THROWS_AS(run_circuit(qc, psi2, {0, 0}), std::invalid_argument);
    const QueryCircuit dbl = build_query(2, RouterKind::ThreeLevel, Schedule::Serial, true);
    REQUIRE_THROWS_AS(run_circuit(dbl, psi2, {0, 0, 0, 0}), std::invalid_argument);
}

TEST_CASE("circuit text round trip preserves structure and hash") {
    for (bool doubled : {false, true}) {
        const QueryCircuit qc = build_query(2, RouterKind::ThreeLevel, Schedule::Serial, doubled);
        const std::string text = circuit_to_text(qc);
        const QueryCircuit back = circuit_from_text(text);
        REQUIRE(circuit_to_text(back) == text);
        REQUIRE(circuit_hash(back) == circuit_hash(qc));
        REQUIRE(back.copy_layers == qc.copy_layers);
        REQUIRE(back.cx_layer == qc.cx_layer);
        REQUIRE(back.tau == qc.tau);
    }
    REQUIRE_THROWS_AS(circuit_from_text("bogus"), std::invalid_argument);
}

TEST_CASE("ideal target enumerates interface amplitudes") {
    const SiteLayout L = make_layout(build_tree(1), RouterModel{RouterKind::ThreeLevel}, false);
    const AmpMap t = ideal_query_target(L, {{1, 1.0}}, {0, 1});
    REQUIRE(t.size() == 2);
    BasisKey k{};
    k.set_digit(0, 1);
    REQUIRE(t.at(k).real() == Approx(std::sqrt(0.5)));
    k.set_digit(1, 1);
    REQUIRE(t.at(k).real() == Approx(-std::sqrt(0.5)));
}
