#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qram/common.hpp"
#include "qram/topology.hpp"

namespace qram {

// Site order within one register: address qubits A_1..A_n (most significant
// bit first), the bus qubit, optionally the doubling target B', then the
// router qudits breadth-first (control before hold), then the 2^n leaf legs.
// Legs share the router radix so hold<->leg swaps are digit exchanges.
struct SiteLayout {
    TreeTopology tree;
    RouterModel router;
    bool doubled = false;
    std::size_t site_count = 0;
    std::vector<int> radix;
    std::vector<std::string> label;

    int depth() const { return tree.depth; }

    std::size_t address_site(int m) const {  // m in [1, depth], MSB first
        if (m < 1 || m > tree.depth) throw std::invalid_argument("address_site: bad bit index");
        return static_cast<std::size_t>(m - 1);
    }
    std::size_t bus_site() const { return static_cast<std::size_t>(tree.depth); }
    std::size_t bprime_site() const {
        if (!doubled) throw std::logic_error("bprime_site: layout is not doubled");
        return static_cast<std::size_t>(tree.depth) + 1;
    }
    std::size_t router_base() const {
        return static_cast<std::size_t>(tree.depth) + 1 + (doubled ? 1 : 0);
    }
    std::size_t control_site(int r) const { return router_base() + 2 * static_cast<std::size_t>(r); }
    std::size_t hold_site(int r) const { return router_base() + 2 * static_cast<std::size_t>(r) + 1; }
    std::size_t leg_base() const {
        return router_base() + 2 * static_cast<std::size_t>(tree.router_count);
    }
    std::size_t leg_site(std::int64_t cell) const {
        return leg_base() + static_cast<std::size_t>(cell);
    }
    // Hold qudit fed by output `side` (0 = left) of router r: a child router's
    // hold above the leaf level, a leg at the leaf level.
    std::size_t child_hold_site(int r, int side) const {
        const auto& ch = tree.children[static_cast<std::size_t>(r)];
        if (ch[0] >= 0) return hold_site(ch[static_cast<std::size_t>(side)]);
        return leg_site(tree.leaf_cells[static_cast<std::size_t>(r)][static_cast<std::size_t>(side)]);
    }
    std::uint8_t idle_digit() const {
        return router.kind == RouterKind::ThreeLevel ? RouterModel::wait_digit : 0;
    }
};

inline SiteLayout make_layout(const TreeTopology& tree, RouterModel router, bool doubled) {
    SiteLayout L;
    L.tree = tree;
    L.router = router;
    L.doubled = doubled;
    const int n = tree.depth;
    const int R = tree.router_count;
    L.site_count = static_cast<std::size_t>(n) + 1 + (doubled ? 1 : 0) +
                   2 * static_cast<std::size_t>(R) + (std::size_t{1} << n);
    if (L.site_count > BasisKey::kMaxSites)
        throw std::invalid_argument("make_layout: register exceeds key capacity");
    L.radix.assign(L.site_count, 2);
    L.label.assign(L.site_count, "");
    const int qd = router.local_dim();
    // Injection swaps an interface qubit with the root hold, which parks the
    // hold's previous digit (possibly the wait state) in the interface site
    // until the mirrored ejection returns it, so those sites share the router
    // radix. B' never routes and stays a qubit.
    for (int m = 1; m <= n; ++m) {
        L.label[L.address_site(m)] = "a" + std::to_string(m);
        L.radix[L.address_site(m)] = qd;
    }
    L.label[L.bus_site()] = "bus";
    L.radix[L.bus_site()] = qd;
    if (doubled) L.label[L.bprime_site()] = "bprime";
    for (int r = 0; r < R; ++r) {
        L.radix[L.control_site(r)] = qd;
        L.radix[L.hold_site(r)] = qd;
        L.label[L.control_site(r)] = "r" + std::to_string(r) + "c";
        L.label[L.hold_site(r)] = "r" + std::to_string(r) + "h";
    }
    for (std::uint64_t c = 0; c < tree.memory_size; ++c) {
        L.radix[L.leg_site(static_cast<std::int64_t>(c))] = qd;
        L.label[L.leg_site(static_cast<std::int64_t>(c))] = "leg" + std::to_string(c);
    }
    return L;
}

using AmpMap = std::unordered_map<BasisKey, cplx, BasisKeyHash>;

struct SparseState {
    const SiteLayout* layout = nullptr;
    AmpMap amps;

    double norm2() const {
        double s = 0;
        for (const auto& [k, a] : amps) s += std::norm(a);
        return s;
    }
    void normalize() {
        const double s = std::sqrt(norm2());
        if (s <= 0) throw std::runtime_error("normalize: zero state");
        for (auto& [k, a] : amps) a /= s;
    }
    void prune(double eps = 1e-14) {
        for (auto it = amps.begin(); it != amps.end();) {
            if (std::abs(it->second) <= eps)
                it = amps.erase(it);
            else
                ++it;
        }
    }
};

inline SparseState basis_state(const SiteLayout& L, const BasisKey& key) {
    SparseState s;
    s.layout = &L;
    s.amps.emplace(key, cplx{1.0, 0.0});
    return s;
}

// Register configuration with every router qudit and leg inert and the
// address/bus/B' qubits at |0>.
inline BasisKey idle_background(const SiteLayout& L) {
    BasisKey k{};
    const std::uint8_t idle = L.idle_digit();
    if (idle != 0) {
        for (int r = 0; r < L.tree.router_count; ++r) {
            k.set_digit(L.control_site(r), idle);
            k.set_digit(L.hold_site(r), idle);
        }
        for (std::uint64_t c = 0; c < L.tree.memory_size; ++c)
            k.set_digit(L.leg_site(static_cast<std::int64_t>(c)), idle);
    }
    return k;
}

// sum_i alpha_i |i>_A (x) |+>_bus (x) |+>_B' (x) |background>. The background
// key carries the router and leg digits; its address/bus/B' digits are
// overwritten.
inline SparseState prepare_query_input(const SiteLayout& L,
                                       const std::vector<std::pair<std::uint64_t, cplx>>& address_amps,
                                       const BasisKey& background) {
    SparseState s;
    s.layout = &L;
    const double half = 0.5, root_half = std::sqrt(0.5);
    for (const auto& [addr, alpha] : address_amps) {
        if (addr >= L.tree.memory_size) throw std::invalid_argument("prepare_query_input: address out of range");
        BasisKey base = background;
        for (int m = 1; m <= L.tree.depth; ++m)
            base.set_digit(L.address_site(m),
                           static_cast<std::uint8_t>((addr >> (L.tree.depth - m)) & 1u));
        base.set_digit(L.bus_site(), 0);
        if (L.doubled) base.set_digit(L.bprime_site(), 0);
        for (int b = 0; b < 2; ++b) {
            BasisKey k1 = base;
            k1.set_digit(L.bus_site(), static_cast<std::uint8_t>(b));
            if (!L.doubled) {
                s.amps[k1] += alpha * root_half;
            } else {
                for (int b2 = 0; b2 < 2; ++b2) {
                    BasisKey k2 = k1;
                    k2.set_digit(L.bprime_site(), static_cast<std::uint8_t>(b2));
                    s.amps[k2] += alpha * half;
                }
            }
        }
    }
    return s;
}

// Same preparation over a superposed background: each background key carries
// router/leg digits with weight w; interface digits are overwritten.
inline SparseState prepare_query_input(const SiteLayout& L,
                                       const std::vector<std::pair<std::uint64_t, cplx>>& address_amps,
                                       const AmpMap& background) {
    SparseState s;
    s.layout = &L;
    for (const auto& [bg, w] : background) {
        SparseState part = prepare_query_input(L, address_amps, bg);
        for (const auto& [k, a] : part.amps) s.amps[k] += w * a;
    }
    return s;
}

// --- gate primitives -------------------------------------------------------
// Permutation gates rebuild the map; diagonal gates scale amplitudes in
// place. Keys of an unordered_map cannot be mutated, hence the remap helper.

template <class F>
inline void remap_keys(SparseState& psi, F&& f) {
    AmpMap next;
    next.reserve(psi.amps.size());
    for (const auto& [k, a] : psi.amps) {
        BasisKey k2 = k;
        cplx a2 = a;
        f(k2, a2);
        next[k2] += a2;
    }
    psi.amps = std::move(next);
}

inline void swap_digits(BasisKey& k, std::size_t s1, std::size_t s2) {
    const auto d1 = k.digit(s1), d2 = k.digit(s2);
    k.set_digit(s1, d2);
    k.set_digit(s2, d1);
}

inline void apply_swap(SparseState& psi, std::size_t s1, std::size_t s2) {
    remap_keys(psi, [&](BasisKey& k, cplx&) { swap_digits(k, s1, s2); });
}

inline void apply_cswap(SparseState& psi, std::size_t ctrl, std::uint8_t on_digit,
                        std::size_t s1, std::size_t s2) {
    remap_keys(psi, [&](BasisKey& k, cplx&) {
        if (k.digit(ctrl) == on_digit) swap_digits(k, s1, s2);
    });
}

// Routing gate of one router: the two commuting controlled swaps. Control 0
// exchanges the hold with the left output, control 1 with the right; the wait
// digit routes nothing.
inline void apply_routing(SparseState& psi, std::size_t ctrl, std::size_t hold,
                          std::size_t left, std::size_t right) {
    remap_keys(psi, [&](BasisKey& k, cplx&) {
        const auto c = k.digit(ctrl);
        if (c == 0)
            swap_digits(k, hold, left);
        else if (c == 1)
            swap_digits(k, hold, right);
    });
}

inline void apply_cx(SparseState& psi, std::size_t ctrl, std::size_t targ) {
    remap_keys(psi, [&](BasisKey& k, cplx&) {
        if (k.digit(ctrl) == 1) k.set_digit(targ, k.digit(targ) ^ 1u);
    });
}

// Z^x on one site; phase -1 on digit 1 when x is odd, all other digits fixed.
inline void apply_phase_flag(SparseState& psi, std::size_t site, int x) {
    if ((x & 1) == 0) return;
    for (auto& [k, a] : psi.amps)
        if (k.digit(site) == 1) a = -a;
}

enum class PauliOp : std::uint8_t { I = 0, X = 1, Y = 2, Z = 3 };

inline char pauli_name(PauliOp p) { return "IXYZ"[static_cast<int>(p)]; }

// Qubit Pauli lifted to a router qudit: acts on the {|0>,|1>} routing
// subspace and fixes |W>.
inline void apply_pauli(SparseState& psi, std::size_t site, PauliOp p) {
    switch (p) {
        case PauliOp::I:
            return;
        case PauliOp::Z:
            apply_phase_flag(psi, site, 1);
            return;
        case PauliOp::X:
            remap_keys(psi, [&](BasisKey& k, cplx&) {
                const auto d = k.digit(site);
                if (d < 2) k.set_digit(site, d ^ 1u);
            });
            return;
        case PauliOp::Y:
            remap_keys(psi, [&](BasisKey& k, cplx& a) {
                const auto d = k.digit(site);
                if (d == 0) {
                    k.set_digit(site, 1);
                    a *= cplx{0, 1};
                } else if (d == 1) {
                    k.set_digit(site, 0);
                    a *= cplx{0, -1};
                }
            });
            return;
    }
}

// General single-site operator (d x d, row = out, col = in). Splits support;
// used for Kraus elements and coherent errors, not for routing.
inline void apply_single_site(SparseState& psi, std::size_t site, const Eigen::MatrixXcd& u) {
    const int d = psi.layout->radix[site];
    if (u.rows() != d || u.cols() != d)
        throw std::invalid_argument("apply_single_site: operator does not match site radix");
    AmpMap next;
    next.reserve(psi.amps.size() * static_cast<std::size_t>(d));
    for (const auto& [k, a] : psi.amps) {
        const int in = k.digit(site);
        for (int out = 0; out < d; ++out) {
            const cplx w = u(out, in);
            if (w == cplx{0, 0}) continue;
            BasisKey k2 = k;
            k2.set_digit(site, static_cast<std::uint8_t>(out));
            next[k2] += w * a;
        }
    }
    psi.amps = std::move(next);
    psi.prune(0.0);
}

// General two-site operator; index convention (d1*d2) with site1 major.
inline void apply_two_site(SparseState& psi, std::size_t s1, std::size_t s2,
                           const Eigen::MatrixXcd& u) {
    const int d1 = psi.layout->radix[s1];
    const int d2 = psi.layout->radix[s2];
    if (u.rows() != d1 * d2 || u.cols() != d1 * d2)
        throw std::invalid_argument("apply_two_site: operator does not match site radices");
    AmpMap next;
    next.reserve(psi.amps.size() * 2);
    for (const auto& [k, a] : psi.amps) {
        const int in = k.digit(s1) * d2 + k.digit(s2);
        for (int out = 0; out < d1 * d2; ++out) {
            const cplx w = u(out, in);
            if (w == cplx{0, 0}) continue;
            BasisKey k2 = k;
            k2.set_digit(s1, static_cast<std::uint8_t>(out / d2));
            k2.set_digit(s2, static_cast<std::uint8_t>(out % d2));
            next[k2] += w * a;
        }
    }
    psi.amps = std::move(next);
    psi.prune(0.0);
}

// --- overlaps and fidelities -------------------------------------------------

inline cplx overlap(const SparseState& a, const SparseState& b) {  // <a|b>
    const AmpMap& probe = a.amps.size() <= b.amps.size() ? a.amps : b.amps;
    const AmpMap& other = a.amps.size() <= b.amps.size() ? b.amps : a.amps;
    const bool probe_is_a = a.amps.size() <= b.amps.size();
    cplx s{0, 0};
    for (const auto& [k, v] : probe) {
        const auto it = other.find(k);
        if (it == other.end()) continue;
        s += probe_is_a ? std::conj(v) * it->second : std::conj(it->second) * v;
    }
    return s;
}

inline double fidelity_pure(const SparseState& a, const SparseState& b) {
    return std::norm(overlap(a, b));
}

// <target| Tr_rest(|psi><psi|) |target> for a target pure on `sites`. The
// target map keys place digit j of the subsystem at key position j.
inline double subsystem_fidelity(const SparseState& psi, const std::vector<std::size_t>& sites,
                                 const AmpMap& target) {
    AmpMap acc;  // rest-configuration -> <target | slice>
    for (const auto& [k, a] : psi.amps) {
        BasisKey sub{};
        BasisKey rest = k;
        for (std::size_t j = 0; j < sites.size(); ++j) {
            sub.set_digit(j, k.digit(sites[j]));
            rest.set_digit(sites[j], 0);
        }
        const auto it = target.find(sub);
        if (it == target.end()) continue;
        acc[rest] += std::conj(it->second) * a;
    }
    double f = 0;
    for (const auto& [k, v] : acc) f += std::norm(v);
    return f;
}

// --- diagnostics -------------------------------------------------------------

inline std::string key_digits(const BasisKey& k, std::size_t site_count) {
    std::string s(site_count, '0');
    for (std::size_t i = 0; i < site_count; ++i) s[i] = static_cast<char>('0' + k.digit(i));
    return s;
}

// Human-readable dump: a header naming each site, then one line per basis
// amplitude above the threshold, sorted by digit string.
inline std::string dump_state(const SparseState& psi, double threshold = 0.0) {
    const SiteLayout& L = *psi.layout;
    std::ostringstream out;
    out.precision(17);
    out << "# sites " << L.site_count << "\n";
    for (std::size_t i = 0; i < L.site_count; ++i)
        out << "# site " << i << " " << L.label[i] << " radix " << L.radix[i] << "\n";
    std::vector<std::pair<std::string, cplx>> rows;
    rows.reserve(psi.amps.size());
    for (const auto& [k, a] : psi.amps)
        if (std::abs(a) > threshold) rows.emplace_back(key_digits(k, L.site_count), a);
    std::sort(rows.begin(), rows.end(),
              [](const auto& x, const auto& y) { return x.first < y.first; });
    out << "# amplitudes " << rows.size() << "\n";
    for (const auto& [digits, a] : rows)
        out << digits << " " << a.real() << " " << a.imag() << "\n";
    return out.str();
}

}  // namespace qram
