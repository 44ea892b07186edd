#pragma once

#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qram/channels.hpp"
#include "qram/common.hpp"
#include "qram/state.hpp"
#include "qram/topology.hpp"

namespace qram {

// One gate of a layer. Routing resolves its four qudits through the layout;
// everything else names sites symbolically so circuits serialize without a
// layout in hand.
struct GateEvent {
    enum class Kind { Routing, Swap, Copy, Cx, Frame };
    Kind kind = Kind::Routing;
    int router = -1;           // Routing
    ChannelSite a{}, b{};      // Swap endpoints; Cx control (a) and target (b); Frame site (a)
    PauliOp pauli = PauliOp::I;  // Frame

    static GateEvent routing(int r) {
        GateEvent e;
        e.kind = Kind::Routing;
        e.router = r;
        return e;
    }
    static GateEvent swap(ChannelSite x, ChannelSite y) {
        GateEvent e;
        e.kind = Kind::Swap;
        e.a = x;
        e.b = y;
        return e;
    }
    static GateEvent copy() {
        GateEvent e;
        e.kind = Kind::Copy;
        return e;
    }
    static GateEvent cx(ChannelSite ctrl, ChannelSite targ) {
        GateEvent e;
        e.kind = Kind::Cx;
        e.a = ctrl;
        e.b = targ;
        return e;
    }
    static GateEvent frame(ChannelSite s, PauliOp p) {
        GateEvent e;
        e.kind = Kind::Frame;
        e.a = s;
        e.pauli = p;
        return e;
    }
};

// What a layer does to each in-flight wave; wave 0 is the bus, waves 1..n are
// the address bits. Twirl dressing reconstructs qudit trajectories from these.
struct WaveTag {
    enum class Action { Inject, Route, Absorb, Copy, Eject, Unabsorb };
    Action action = Action::Route;
    int wave = 0;
    int level = 0;       // for Route / Absorb / Unabsorb
    bool upstream = false;
};

struct Layer {
    std::vector<GateEvent> events;
    std::vector<WaveTag> tags;
    bool noisy = true;
};

enum class Schedule { Serial, Pipelined };

struct QueryCircuit {
    int depth = 0;
    Schedule schedule = Schedule::Serial;
    RouterKind router_kind = RouterKind::ThreeLevel;
    bool doubled = false;
    std::vector<Layer> layers;
    int tau = 0;  // noisy routing layers of a single query (copy excluded)
    std::vector<std::size_t> copy_layers;
    std::ptrdiff_t cx_layer = -1;  // doubled circuits only

    std::size_t noisy_layer_count() const {
        std::size_t c = 0;
        for (const auto& l : layers) c += l.noisy ? 1 : 0;
        return c;
    }
};

namespace detail {

inline ChannelSite addr_site(int m) { return {ChannelSite::Kind::Address, m}; }
inline ChannelSite bus_site() { return {ChannelSite::Kind::Bus, 0}; }
inline ChannelSite bprime_site() { return {ChannelSite::Kind::BPrime, 0}; }
inline ChannelSite rc_site(int r) { return {ChannelSite::Kind::RouterControl, r}; }
inline ChannelSite rh_site(int r) { return {ChannelSite::Kind::RouterHold, r}; }

inline Layer route_layer(const TreeTopology& tree, int level, int wave, bool upstream) {
    Layer l;
    for (int r = 0; r < tree.router_count; ++r)
        if (tree.level[static_cast<std::size_t>(r)] == level)
            l.events.push_back(GateEvent::routing(r));
    l.tags.push_back({WaveTag::Action::Route, wave, level, upstream});
    return l;
}

inline Layer absorb_layer(const TreeTopology& tree, int level, int wave, bool upstream) {
    Layer l;
    for (int r = 0; r < tree.router_count; ++r)
        if (tree.level[static_cast<std::size_t>(r)] == level)
            l.events.push_back(GateEvent::swap(rc_site(r), rh_site(r)));
    l.tags.push_back({upstream ? WaveTag::Action::Unabsorb : WaveTag::Action::Absorb, wave,
                      level, upstream});
    return l;
}

inline Layer inject_layer(ChannelSite src, int wave, bool upstream) {
    Layer l;
    l.events.push_back(GateEvent::swap(src, rh_site(0)));
    l.tags.push_back({upstream ? WaveTag::Action::Eject : WaveTag::Action::Inject, wave, 0,
                      upstream});
    return l;
}

// Downstream half of the serial calendar: each address bit is injected,
// routed to its level, and absorbed before the next one starts; the bus
// follows last and ends on the leaf legs.
inline std::vector<Layer> serial_downstream(const TreeTopology& tree) {
    std::vector<Layer> out;
    const int n = tree.depth;
    for (int m = 1; m <= n; ++m) {
        out.push_back(inject_layer(addr_site(m), m, false));
        for (int t = 1; t <= m - 1; ++t) out.push_back(route_layer(tree, t, m, false));
        out.push_back(absorb_layer(tree, m, m, false));
    }
    out.push_back(inject_layer(bus_site(), 0, false));
    for (int t = 1; t <= n; ++t) out.push_back(route_layer(tree, t, 0, false));
    return out;
}

// Downstream half of the pipelined calendar: wave m is injected at timestep
// 2m-1 (the bus at 2n+1) and advances one level per step, so consecutive
// waves never contend for a hold. Timesteps with no scheduled action are
// kept as idle layers; noise does not pause for them.
inline std::vector<Layer> pipelined_downstream(const TreeTopology& tree) {
    const int n = tree.depth;
    const int steps = 3 * n + 1;  // bus reaches the legs at the last step
    std::vector<Layer> out(static_cast<std::size_t>(steps));
    auto at = [&](int t) -> Layer& { return out[static_cast<std::size_t>(t - 1)]; };
    auto add_route = [&](int t, int level, int wave) {
        Layer& l = at(t);
        for (int r = 0; r < tree.router_count; ++r)
            if (tree.level[static_cast<std::size_t>(r)] == level)
                l.events.push_back(GateEvent::routing(r));
        l.tags.push_back({WaveTag::Action::Route, wave, level, false});
    };
    for (int m = 1; m <= n; ++m) {
        const int t0 = 2 * m - 1;
        Layer& inj = at(t0);
        inj.events.push_back(GateEvent::swap(addr_site(m), rh_site(0)));
        inj.tags.push_back({WaveTag::Action::Inject, m, 0, false});
        for (int lvl = 1; lvl <= m - 1; ++lvl) add_route(t0 + lvl, lvl, m);
        Layer& ab = at(t0 + m);
        for (int r = 0; r < tree.router_count; ++r)
            if (tree.level[static_cast<std::size_t>(r)] == m)
                ab.events.push_back(GateEvent::swap(rc_site(r), rh_site(r)));
        ab.tags.push_back({WaveTag::Action::Absorb, m, m, false});
    }
    const int tb = 2 * n + 1;
    Layer& inj = at(tb);
    inj.events.push_back(GateEvent::swap(bus_site(), rh_site(0)));
    inj.tags.push_back({WaveTag::Action::Inject, 0, 0, false});
    for (int lvl = 1; lvl <= n; ++lvl) add_route(tb + lvl, lvl, 0);
    return out;
}

inline WaveTag mirror_tag(const WaveTag& t) {
    WaveTag m = t;
    m.upstream = true;
    if (t.action == WaveTag::Action::Inject) m.action = WaveTag::Action::Eject;
    if (t.action == WaveTag::Action::Absorb) m.action = WaveTag::Action::Unabsorb;
    return m;
}

// Reflect the downstream half: every layer is its own inverse, so replaying
// them in reverse order retrieves the addresses and restores the tree.
inline std::vector<Layer> mirror_layers(const std::vector<Layer>& down) {
    std::vector<Layer> up;
    up.reserve(down.size());
    for (auto it = down.rbegin(); it != down.rend(); ++it) {
        Layer l = *it;
        for (auto& t : l.tags) t = mirror_tag(t);
        up.push_back(std::move(l));
    }
    return up;
}

}  // namespace detail

// Layers of one query: downstream half, noisy copy layer, mirrored upstream
// half. tau counts the non-copy layers.
inline QueryCircuit build_query(int depth, RouterKind kind, Schedule sched, bool doubled) {
    const TreeTopology tree = build_tree(depth);
    std::vector<Layer> down = sched == Schedule::Serial ? detail::serial_downstream(tree)
                                                        : detail::pipelined_downstream(tree);
    QueryCircuit qc;
    qc.depth = depth;
    qc.schedule = sched;
    qc.router_kind = kind;
    qc.doubled = doubled;
    std::vector<Layer> one;
    one.insert(one.end(), down.begin(), down.end());
    Layer copy;
    copy.events.push_back(GateEvent::copy());
    copy.tags.push_back({WaveTag::Action::Copy, 0, 0, false});
    one.push_back(copy);
    const std::vector<Layer> up = detail::mirror_layers(down);
    one.insert(one.end(), up.begin(), up.end());
    qc.tau = static_cast<int>(one.size()) - 1;
    if (!doubled) {
        qc.layers = one;
        qc.copy_layers = {down.size()};
    } else {
        qc.layers = one;
        qc.copy_layers = {down.size()};
        Layer cx;
        cx.events.push_back(GateEvent::cx(detail::bprime_site(), detail::bus_site()));
        cx.noisy = true;
        qc.cx_layer = static_cast<std::ptrdiff_t>(qc.layers.size());
        qc.layers.push_back(cx);
        const std::size_t base = qc.layers.size();
        qc.layers.insert(qc.layers.end(), one.begin(), one.end());
        qc.copy_layers.push_back(base + down.size());
    }
    return qc;
}

// Does the event touch the address, bus, or doubling-target qubits?
inline bool touches_interface(const GateEvent& e) {
    auto iface = [](const ChannelSite& s) {
        return s.kind == ChannelSite::Kind::Address || s.kind == ChannelSite::Kind::Bus ||
               s.kind == ChannelSite::Kind::BPrime;
    };
    switch (e.kind) {
        case GateEvent::Kind::Routing: return false;
        case GateEvent::Kind::Copy: return false;
        case GateEvent::Kind::Swap: return iface(e.a) || iface(e.b);
        case GateEvent::Kind::Cx: return iface(e.a) || iface(e.b);
        case GateEvent::Kind::Frame: return iface(e.a);
    }
    return false;
}

// The same calendar with every event touching the address/bus/B' qubits
// removed: the dynamics of the tree alone, with an unchanged noise calendar.
inline QueryCircuit build_empty_query(const QueryCircuit& qc) {
    QueryCircuit out = qc;
    for (auto& layer : out.layers) {
        std::vector<GateEvent> kept;
        for (const auto& e : layer.events)
            if (!touches_interface(e)) kept.push_back(e);
        layer.events = std::move(kept);
    }
    return out;
}

// --- execution ---------------------------------------------------------------

using NoiseFn = std::function<void(SparseState&, std::size_t)>;

inline void apply_event(SparseState& psi, const SiteLayout& L, const GateEvent& e,
                        const std::vector<int>& memory) {
    switch (e.kind) {
        case GateEvent::Kind::Routing: {
            apply_routing(psi, L.control_site(e.router), L.hold_site(e.router),
                          L.child_hold_site(e.router, 0), L.child_hold_site(e.router, 1));
            return;
        }
        case GateEvent::Kind::Swap:
            apply_swap(psi, resolve_site(L, e.a), resolve_site(L, e.b));
            return;
        case GateEvent::Kind::Copy: {
            // Z^{x_c} on every leg at once: one pass over the support.
            for (auto& [k, a] : psi.amps) {
                int parity = 0;
                for (std::uint64_t c = 0; c < L.tree.memory_size; ++c)
                    if (memory[static_cast<std::size_t>(c)] &&
                        k.digit(L.leg_site(static_cast<std::int64_t>(c))) == 1)
                        parity ^= 1;
                if (parity) a = -a;
            }
            return;
        }
        case GateEvent::Kind::Cx:
            apply_cx(psi, resolve_site(L, e.a), resolve_site(L, e.b));
            return;
        case GateEvent::Kind::Frame:
            apply_pauli(psi, resolve_site(L, e.a), e.pauli);
            return;
    }
}

// Run the circuit in place. `noise` is invoked after every noisy layer with a
// running firing index; pass an empty function for the ideal circuit.
inline void run_circuit(const QueryCircuit& qc, SparseState& psi, const std::vector<int>& memory,
                        const NoiseFn& noise = {}) {
    const SiteLayout& L = *psi.layout;
    if (L.tree.depth != qc.depth) throw std::invalid_argument("run_circuit: depth mismatch");
    if (L.router.kind != qc.router_kind)
        throw std::invalid_argument("run_circuit: router model mismatch");
    if (qc.doubled && !L.doubled)
        throw std::invalid_argument("run_circuit: doubled circuit needs a doubled layout");
    if (memory.size() != L.tree.memory_size)
        throw std::invalid_argument("run_circuit: memory size mismatch");
    std::size_t firing = 0;
    for (const auto& layer : qc.layers) {
        for (const auto& e : layer.events) apply_event(psi, L, e, memory);
        if (layer.noisy && noise) noise(psi, firing++);
    }
}

// Sites whose joint state carries the query answer.
inline std::vector<std::size_t> query_output_sites(const SiteLayout& L) {
    std::vector<std::size_t> sites;
    for (int m = 1; m <= L.tree.depth; ++m) sites.push_back(L.address_site(m));
    sites.push_back(L.bus_site());
    if (L.doubled) sites.push_back(L.bprime_site());
    return sites;
}

// Ideal answer on the output sites, keyed in site-list order: single query
// sum_i alpha_i |i> Z^{x_i}|+>; doubled query leaves the bus at |+> and puts
// the phase on B'.
inline AmpMap ideal_query_target(const SiteLayout& L,
                                 const std::vector<std::pair<std::uint64_t, cplx>>& address_amps,
                                 const std::vector<int>& memory) {
    if (memory.size() != L.tree.memory_size)
        throw std::invalid_argument("ideal_query_target: memory size mismatch");
    AmpMap target;
    const int n = L.tree.depth;
    const double rh = std::sqrt(0.5), h = 0.5;
    for (const auto& [addr, alpha] : address_amps) {
        const int x = memory[static_cast<std::size_t>(addr)] & 1;
        BasisKey base{};
        for (int m = 1; m <= n; ++m)
            base.set_digit(static_cast<std::size_t>(m - 1),
                           static_cast<std::uint8_t>((addr >> (n - m)) & 1u));
        if (!L.doubled) {
            for (int b = 0; b < 2; ++b) {
                BasisKey k = base;
                k.set_digit(static_cast<std::size_t>(n), static_cast<std::uint8_t>(b));
                const double sign = (x && b) ? -1.0 : 1.0;
                target[k] += alpha * rh * sign;
            }
        } else {
            for (int b = 0; b < 2; ++b)
                for (int b2 = 0; b2 < 2; ++b2) {
                    BasisKey k = base;
                    k.set_digit(static_cast<std::size_t>(n), static_cast<std::uint8_t>(b));
                    k.set_digit(static_cast<std::size_t>(n + 1), static_cast<std::uint8_t>(b2));
                    const double sign = (x && b2) ? -1.0 : 1.0;
                    target[k] += alpha * h * sign;
                }
        }
    }
    return target;
}

// --- serialization -------------------------------------------------------------

inline std::string schedule_name(Schedule s) {
    return s == Schedule::Serial ? "serial" : "pipelined";
}

inline Schedule schedule_from_name(const std::string& s) {
    if (s == "serial") return Schedule::Serial;
    if (s == "pipelined") return Schedule::Pipelined;
    throw std::invalid_argument("unknown schedule: " + s);
}

inline std::string router_kind_name(RouterKind k) {
    return k == RouterKind::ThreeLevel ? "three_level" : "two_level";
}

inline RouterKind router_kind_from_name(const std::string& s) {
    if (s == "three_level") return RouterKind::ThreeLevel;
    if (s == "two_level") return RouterKind::TwoLevel;
    throw std::invalid_argument("unknown router kind: " + s);
}

inline std::string tag_action_name(WaveTag::Action a) {
    switch (a) {
        case WaveTag::Action::Inject: return "inject";
        case WaveTag::Action::Route: return "route";
        case WaveTag::Action::Absorb: return "absorb";
        case WaveTag::Action::Copy: return "copy";
        case WaveTag::Action::Eject: return "eject";
        case WaveTag::Action::Unabsorb: return "unabsorb";
    }
    throw std::logic_error("tag_action_name");
}

inline WaveTag::Action tag_action_from_name(const std::string& s) {
    if (s == "inject") return WaveTag::Action::Inject;
    if (s == "route") return WaveTag::Action::Route;
    if (s == "absorb") return WaveTag::Action::Absorb;
    if (s == "copy") return WaveTag::Action::Copy;
    if (s == "eject") return WaveTag::Action::Eject;
    if (s == "unabsorb") return WaveTag::Action::Unabsorb;
    throw std::invalid_argument("unknown tag action: " + s);
}

// Line-oriented text form: a header, then one block per layer listing tags
// and events. Stable across runs, so its hash identifies the circuit.
inline std::string circuit_to_text(const QueryCircuit& qc) {
    std::ostringstream out;
    out << "qram-circuit v1\n";
    out << "depth " << qc.depth << " schedule " << schedule_name(qc.schedule) << " router "
        << router_kind_name(qc.router_kind) << " doubled " << (qc.doubled ? 1 : 0) << " tau "
        << qc.tau << " layers " << qc.layers.size() << "\n";
    for (std::size_t i = 0; i < qc.layers.size(); ++i) {
        const Layer& l = qc.layers[i];
        out << "layer " << i << " noisy " << (l.noisy ? 1 : 0) << "\n";
        for (const auto& t : l.tags)
            out << "tag " << tag_action_name(t.action) << " wave " << t.wave << " level "
                << t.level << " up " << (t.upstream ? 1 : 0) << "\n";
        for (const auto& e : l.events) {
            switch (e.kind) {
                case GateEvent::Kind::Routing:
                    out << "routing " << e.router << "\n";
                    break;
                case GateEvent::Kind::Swap:
                    out << "swap " << site_kind_name(e.a.kind) << " " << e.a.index << " "
                        << site_kind_name(e.b.kind) << " " << e.b.index << "\n";
                    break;
                case GateEvent::Kind::Copy:
                    out << "copy\n";
                    break;
                case GateEvent::Kind::Cx:
                    out << "cx " << site_kind_name(e.a.kind) << " " << e.a.index << " "
                        << site_kind_name(e.b.kind) << " " << e.b.index << "\n";
                    break;
                case GateEvent::Kind::Frame:
                    out << "frame " << site_kind_name(e.a.kind) << " " << e.a.index << " "
                        << pauli_name(e.pauli) << "\n";
                    break;
            }
        }
    }
    return out.str();
}

inline std::uint64_t circuit_hash(const QueryCircuit& qc) {
    return fnv1a64(circuit_to_text(qc));
}

inline QueryCircuit circuit_from_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "qram-circuit v1")
        throw std::invalid_argument("circuit_from_text: bad magic line");
    QueryCircuit qc;
    {
        std::string kw;
        std::string sched, router;
        int doubled = 0;
        std::size_t layers = 0;
        std::getline(in, line);
        std::istringstream h(line);
        int tau = 0;
        h >> kw >> qc.depth >> kw >> sched >> kw >> router >> kw >> doubled >> kw >> tau >> kw >>
            layers;
        if (!h) throw std::invalid_argument("circuit_from_text: bad header");
        qc.schedule = schedule_from_name(sched);
        qc.router_kind = router_kind_from_name(router);
        qc.doubled = doubled != 0;
        qc.tau = tau;
        qc.layers.resize(layers);
    }
    Layer* cur = nullptr;
    std::size_t cur_index = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string op;
        ls >> op;
        if (op == "layer") {
            int noisy = 1;
            std::string kw;
            ls >> cur_index >> kw >> noisy;
            if (cur_index >= qc.layers.size())
                throw std::invalid_argument("circuit_from_text: layer index out of range");
            cur = &qc.layers[cur_index];
            cur->noisy = noisy != 0;
            continue;
        }
        if (cur == nullptr) throw std::invalid_argument("circuit_from_text: event before layer");
        if (op == "tag") {
            std::string action, kw;
            WaveTag t;
            int up = 0;
            ls >> action >> kw >> t.wave >> kw >> t.level >> kw >> up;
            t.action = tag_action_from_name(action);
            t.upstream = up != 0;
            cur->tags.push_back(t);
        } else if (op == "routing") {
            int r = -1;
            ls >> r;
            cur->events.push_back(GateEvent::routing(r));
        } else if (op == "swap" || op == "cx") {
            std::string ka, kb;
            int ia = 0, ib = 0;
            ls >> ka >> ia >> kb >> ib;
            const ChannelSite a{site_kind_from_name(ka), ia};
            const ChannelSite b{site_kind_from_name(kb), ib};
            cur->events.push_back(op == "swap" ? GateEvent::swap(a, b) : GateEvent::cx(a, b));
        } else if (op == "copy") {
            cur->events.push_back(GateEvent::copy());
            if (!cur->tags.empty() && cur->tags.front().action == WaveTag::Action::Copy)
                qc.copy_layers.push_back(cur_index);
        } else if (op == "frame") {
            std::string k, p;
            int idx = 0;
            ls >> k >> idx >> p;
            cur->events.push_back(
                GateEvent::frame({site_kind_from_name(k), idx}, pauli_from_name(p[0])));
        } else {
            throw std::invalid_argument("circuit_from_text: unknown directive " + op);
        }
        if (op == "cx") qc.cx_layer = static_cast<std::ptrdiff_t>(cur_index);
    }
    return qc;
}

}  // namespace qram
