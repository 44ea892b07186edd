#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "qram/channels.hpp"
#include "qram/circuit.hpp"
#include "qram/common.hpp"
#include "qram/montecarlo.hpp"
#include "qram/state.hpp"
#include "qram/topology.hpp"

// Exact reference evolutions the sampler is validated against: density-operator
// propagation for arbitrary channels, exhaustive enumeration of stochastic
// Pauli configurations, and the phase-invariance probe for superposed router
// initializations.

namespace qram {

// --- sparse density operator -------------------------------------------------

struct KeyPair {
    BasisKey row{}, col{};
    bool operator==(const KeyPair& o) const { return row == o.row && col == o.col; }
};

struct KeyPairHash {
    std::size_t operator()(const KeyPair& p) const {
        BasisKeyHash h;
        return static_cast<std::size_t>(
            splitmix64(static_cast<std::uint64_t>(h(p.row)) ^
                       (static_cast<std::uint64_t>(h(p.col)) * 0x9e3779b97f4a7c15ull)));
    }
};

using DensityMap = std::unordered_map<KeyPair, cplx, KeyPairHash>;

struct SparseDensity {
    const SiteLayout* layout = nullptr;
    DensityMap rho;

    double trace() const {
        double t = 0;
        for (const auto& [kp, v] : rho)
            if (kp.row == kp.col) t += v.real();
        return t;
    }

    void prune(double eps) {
        for (auto it = rho.begin(); it != rho.end();) {
            if (std::abs(it->second) <= eps)
                it = rho.erase(it);
            else
                ++it;
        }
    }
};

inline SparseDensity density_from_pure(const SparseState& psi) {
    SparseDensity d;
    d.layout = psi.layout;
    d.rho.reserve(psi.amps.size() * psi.amps.size());
    for (const auto& [kr, ar] : psi.amps)
        for (const auto& [kc, ac] : psi.amps) d.rho[{kr, kc}] += ar * std::conj(ac);
    return d;
}

// Apply a permutation-phase transform to both indices: rho -> U rho U^dag with
// U given per basis key as (key, phase) -> (key', phase').
template <class F>
inline void remap_density(SparseDensity& d, F&& f) {
    DensityMap next;
    next.reserve(d.rho.size());
    for (const auto& [kp, v] : d.rho) {
        BasisKey r = kp.row;
        cplx pr{1.0, 0.0};
        f(r, pr);
        BasisKey c = kp.col;
        cplx pc{1.0, 0.0};
        f(c, pc);
        next[{r, c}] += v * pr * std::conj(pc);
    }
    d.rho = std::move(next);
}

// The same gate semantics as apply_event, lifted to density operators. Every
// circuit event is a permutation times diagonal phases, so one per-key
// transform serves both sides.
inline void density_apply_event(SparseDensity& d, const SiteLayout& L, const GateEvent& e,
                                const std::vector<int>& memory) {
    switch (e.kind) {
        case GateEvent::Kind::Routing: {
            const std::size_t ctrl = L.control_site(e.router), hold = L.hold_site(e.router);
            const std::size_t left = L.child_hold_site(e.router, 0),
                              right = L.child_hold_site(e.router, 1);
            remap_density(d, [&](BasisKey& k, cplx&) {
                const auto c = k.digit(ctrl);
                if (c == 0)
                    swap_digits(k, hold, left);
                else if (c == 1)
                    swap_digits(k, hold, right);
            });
            return;
        }
        case GateEvent::Kind::Swap: {
            const std::size_t s1 = resolve_site(L, e.a), s2 = resolve_site(L, e.b);
            remap_density(d, [&](BasisKey& k, cplx&) { swap_digits(k, s1, s2); });
            return;
        }
        case GateEvent::Kind::Copy: {
            remap_density(d, [&](BasisKey& k, cplx& p) {
                int parity = 0;
                for (std::uint64_t c = 0; c < L.tree.memory_size; ++c)
                    if (memory[static_cast<std::size_t>(c)] &&
                        k.digit(L.leg_site(static_cast<std::int64_t>(c))) == 1)
                        parity ^= 1;
                if (parity) p = -p;
            });
            return;
        }
        case GateEvent::Kind::Cx: {
            const std::size_t ctrl = resolve_site(L, e.a), targ = resolve_site(L, e.b);
            remap_density(d, [&](BasisKey& k, cplx&) {
                if (k.digit(ctrl) == 1) k.set_digit(targ, k.digit(targ) ^ 1u);
            });
            return;
        }
        case GateEvent::Kind::Frame: {
            const std::size_t s = resolve_site(L, e.a);
            const PauliOp p = e.pauli;
            remap_density(d, [&](BasisKey& k, cplx& ph) {
                const auto dgt = k.digit(s);
                if (dgt > 1) return;  // wait digit is inert under lifted Paulis
                switch (p) {
                    case PauliOp::I: return;
                    case PauliOp::X: k.set_digit(s, dgt ^ 1u); return;
                    case PauliOp::Y:
                        k.set_digit(s, dgt ^ 1u);
                        ph *= dgt == 0 ? cplx{0.0, 1.0} : cplx{0.0, -1.0};
                        return;
                    case PauliOp::Z:
                        if (dgt == 1) ph = -ph;
                        return;
                }
            });
            return;
        }
    }
}

// rho -> sum_k K rho K^dag for a compiled one- or two-site placement.
inline void density_apply_channel(SparseDensity& d, const SiteLayout& L,
                                  const CompiledPlacement& cp) {
    const Channel& ch = *cp.channel;
    const std::size_t s1 = cp.sites[0];
    const bool pair = cp.sites.size() == 2;
    const std::size_t s2 = pair ? cp.sites[1] : 0;
    const int d2 = pair ? L.radix[s2] : 1;
    const int dim = ch.total_dim();
    auto digit_index = [&](const BasisKey& k) {
        return pair ? k.digit(s1) * d2 + k.digit(s2) : static_cast<int>(k.digit(s1));
    };
    auto write_digits = [&](BasisKey& k, int idx) {
        if (pair) {
            k.set_digit(s1, static_cast<std::uint8_t>(idx / d2));
            k.set_digit(s2, static_cast<std::uint8_t>(idx % d2));
        } else {
            k.set_digit(s1, static_cast<std::uint8_t>(idx));
        }
    };
    DensityMap next;
    next.reserve(d.rho.size());
    for (const auto& K : ch.kraus) {
        for (const auto& [kp, v] : d.rho) {
            const int ir = digit_index(kp.row), ic = digit_index(kp.col);
            for (int orow = 0; orow < dim; ++orow) {
                const cplx wr = K(orow, ir);
                if (wr == cplx{0.0, 0.0}) continue;
                for (int ocol = 0; ocol < dim; ++ocol) {
                    const cplx wc = K(ocol, ic);
                    if (wc == cplx{0.0, 0.0}) continue;
                    KeyPair out = kp;
                    write_digits(out.row, orow);
                    write_digits(out.col, ocol);
                    next[out] += v * wr * std::conj(wc);
                }
            }
        }
    }
    d.rho = std::move(next);
    d.prune(0.0);
}

// F = <t| Tr_rest rho |t> on the given sites.
inline double density_subsystem_fidelity(const SparseDensity& d,
                                         const std::vector<std::size_t>& sites,
                                         const AmpMap& target) {
    const SiteLayout& L = *d.layout;
    auto split = [&](const BasisKey& k, BasisKey& sub, BasisKey& rest) {
        sub = BasisKey{};
        rest = k;
        for (std::size_t i = 0; i < sites.size(); ++i) {
            sub.set_digit(i, k.digit(sites[i]));
            rest.set_digit(sites[i], 0);
        }
    };
    (void)L;
    cplx f{0.0, 0.0};
    for (const auto& [kp, v] : d.rho) {
        BasisKey sub_r, rest_r, sub_c, rest_c;
        split(kp.row, sub_r, rest_r);
        split(kp.col, sub_c, rest_c);
        if (!(rest_r == rest_c)) continue;
        const auto tr = target.find(sub_r);
        if (tr == target.end()) continue;
        const auto tc = target.find(sub_c);
        if (tc == target.end()) continue;
        f += std::conj(tr->second) * v * tc->second;
    }
    return f.real();
}

// --- invariant checks ---------------------------------------------------------

struct DensityInvariants {
    double hermiticity_deviation = 0;  // max |rho_rc - conj(rho_cr)|
    double trace_deviation = 0;        // |Tr rho - 1|
    double min_eigenvalue = 0;         // NaN when the dimension check was skipped
    bool psd_checked = false;
};

inline Eigen::MatrixXcd density_to_dense(const SparseDensity& d) {
    const SiteLayout& L = *d.layout;
    long dim = 1;
    for (std::size_t s = 0; s < L.site_count; ++s) {
        dim *= L.radix[s];
        if (dim > 4096) throw std::runtime_error("density_to_dense: dimension above dense cap");
    }
    auto index_of = [&](const BasisKey& k) {
        long idx = 0;
        for (std::size_t s = 0; s < L.site_count; ++s) idx = idx * L.radix[s] + k.digit(s);
        return idx;
    };
    Eigen::MatrixXcd m = Eigen::MatrixXcd::Zero(dim, dim);
    for (const auto& [kp, v] : d.rho) m(index_of(kp.row), index_of(kp.col)) += v;
    return m;
}

inline DensityInvariants density_check_invariants(const SparseDensity& d) {
    DensityInvariants inv;
    inv.trace_deviation = std::abs(d.trace() - 1.0);
    for (const auto& [kp, v] : d.rho) {
        const auto mirror = d.rho.find({kp.col, kp.row});
        const cplx other = mirror == d.rho.end() ? cplx{0.0, 0.0} : mirror->second;
        inv.hermiticity_deviation =
            std::max(inv.hermiticity_deviation, std::abs(v - std::conj(other)));
    }
    const SiteLayout& L = *d.layout;
    long dim = 1;
    bool small = true;
    for (std::size_t s = 0; s < L.site_count && small; ++s) {
        dim *= L.radix[s];
        if (dim > 4096) small = false;
    }
    if (small) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(density_to_dense(d));
        inv.min_eigenvalue = es.eigenvalues().minCoeff();
        inv.psd_checked = true;
    } else {
        inv.min_eigenvalue = std::numeric_limits<double>::quiet_NaN();
    }
    return inv;
}

// --- exact density evolution ---------------------------------------------------

// Evolving a density operator squares the footprint, so the register dimension
// is capped: any model up to 2^14 total dimension, and beyond that only models
// whose every placement stays inside a single router (which keeps three-level
// depth 2 reachable, just under 2^21).
inline void check_density_cap(const SiteLayout& L, const NoiseModel& noise) {
    double log2_dim = 0;
    for (std::size_t s = 0; s < L.site_count; ++s) log2_dim += std::log2(double(L.radix[s]));
    if (log2_dim <= 14.0 + 1e-9) return;
    if (log2_dim > 21.0 + 1e-9) throw std::runtime_error("run_density: dimension cap exceeded");
    for (const auto& p : noise.placements) {
        std::optional<int> router;
        for (const auto& s : p.sites) {
            const auto r = site_router(s);
            if (!r)
                throw std::runtime_error(
                    "run_density: above 2^14 every placement must stay inside one router");
            if (router && *router != *r)
                throw std::runtime_error(
                    "run_density: above 2^14 every placement must stay inside one router");
            router = r;
        }
    }
}

// Exact evolution under the full circuit: gates layer by layer, then after
// every noisy layer each placement's channel, in placement order (the same
// canonical order the sampler uses).
inline SparseDensity run_density(const QueryCircuit& qc, SparseDensity rho,
                                 const std::vector<int>& memory, const NoiseModel& noise) {
    const SiteLayout& L = *rho.layout;
    if (L.tree.depth != qc.depth) throw std::invalid_argument("run_density: depth mismatch");
    if (L.router.kind != qc.router_kind)
        throw std::invalid_argument("run_density: router model mismatch");
    if (memory.size() != L.tree.memory_size)
        throw std::invalid_argument("run_density: memory size mismatch");
    check_density_cap(L, noise);
    const std::vector<CompiledPlacement> compiled = compile_noise(L, noise);
    for (const auto& layer : qc.layers) {
        for (const auto& e : layer.events) density_apply_event(rho, L, e, memory);
        if (layer.noisy)
            for (const auto& cp : compiled) density_apply_channel(rho, L, cp);
    }
    return rho;
}

// --- exhaustive configuration enumeration --------------------------------------

// F = sum_chi Pr(chi) F_chi over every assignment of mixed-unitary branches to
// noise firings. Depth-first with shared prefixes; identity branches reuse the
// parent state without copying.
inline double exhaustive_chi_fidelity(const QueryCircuit& qc, const SiteLayout& L,
                                      const NoiseModel& noise,
                                      const std::vector<std::pair<std::uint64_t, cplx>>& addr,
                                      const std::vector<int>& memory, const SparseState& input) {
    const std::vector<CompiledPlacement> compiled = compile_noise(L, noise);
    long double per_firing = 1;
    for (const auto& cp : compiled) {
        if (!cp.channel->is_mixed_unitary)
            throw std::invalid_argument(
                "exhaustive_chi_fidelity: model must be mixed-unitary (stochastic Pauli)");
        per_firing *= static_cast<long double>(cp.channel->unitaries.size());
    }
    long double configs = 1;
    const long double cap = 16777216.0L;  // 2^24
    for (const auto& layer : qc.layers) {
        if (!layer.noisy) continue;
        configs *= per_firing;
        if (configs > cap)
            throw std::runtime_error("exhaustive_chi_fidelity: configuration cap exceeded");
    }
    const AmpMap target = ideal_query_target(L, addr, memory);
    const std::vector<std::size_t> out_sites = query_output_sites(L);

    // Program: gate layers interleaved with one branch point per (firing,
    // placement).
    struct Step {
        bool branch = false;
        std::size_t idx = 0;  // layer index or placement index
    };
    std::vector<Step> prog;
    for (std::size_t li = 0; li < qc.layers.size(); ++li) {
        prog.push_back({false, li});
        if (qc.layers[li].noisy)
            for (std::size_t p = 0; p < compiled.size(); ++p) prog.push_back({true, p});
    }

    double total = 0;
    std::function<void(SparseState&, std::size_t, double)> walk = [&](SparseState& psi,
                                                                      std::size_t ip, double pr) {
        while (ip < prog.size() && !prog[ip].branch) {
            for (const auto& e : qc.layers[prog[ip].idx].events) apply_event(psi, L, e, memory);
            ++ip;
        }
        if (ip == prog.size()) {
            total += pr * subsystem_fidelity(psi, out_sites, target);
            return;
        }
        const CompiledPlacement& cp = compiled[prog[ip].idx];
        const Channel& ch = *cp.channel;
        for (std::size_t k = 0; k < ch.unitaries.size(); ++k) {
            if (ch.probs[k] <= 0.0) continue;
            // Each branch walks on its own copy: the recursion applies later
            // gate layers in place, which must not leak into sibling branches.
            SparseState branch = psi;
            if (cp.skip.empty() || !cp.skip[k]) apply_operator(branch, cp, ch.unitaries[k]);
            walk(branch, ip + 1, pr * ch.probs[k]);
        }
    };
    SparseState psi0 = input;
    walk(psi0, 0, 1.0);
    return total;
}

inline double exhaustive_chi_fidelity(const QueryCircuit& qc, const SiteLayout& L,
                                      const NoiseModel& noise,
                                      const std::vector<std::pair<std::uint64_t, cplx>>& addr,
                                      const std::vector<int>& memory, const BasisKey& background) {
    return exhaustive_chi_fidelity(qc, L, noise, addr, memory,
                                   prepare_query_input(L, addr, background));
}

inline double exhaustive_chi_fidelity(const QueryCircuit& qc, const SiteLayout& L,
                                      const NoiseModel& noise,
                                      const std::vector<std::pair<std::uint64_t, cplx>>& addr,
                                      const std::vector<int>& memory, const AmpMap& background) {
    return exhaustive_chi_fidelity(qc, L, noise, addr, memory,
                                   prepare_query_input(L, addr, background));
}

// --- phase-invariance probe ----------------------------------------------------

// Product background over the router qudits: each at sqrt(1-p_w)|0> +
// e^{i phi} sqrt(p_w)|1>, one phase per qudit in (control, hold) pairs ordered
// by router id. Legs stay at |0> (two-level trees).
inline AmpMap phased_product_background(const SiteLayout& L, double p_w,
                                        const std::vector<double>& phases) {
    const std::size_t qudits = 2 * static_cast<std::size_t>(L.tree.router_count);
    if (phases.size() != qudits)
        throw std::invalid_argument("phased_product_background: one phase per router qudit");
    if (!(p_w >= 0.0 && p_w <= 1.0))
        throw std::invalid_argument("phased_product_background: p_w outside [0,1]");
    const double a0 = std::sqrt(1.0 - p_w), a1 = std::sqrt(p_w);
    AmpMap bg;
    bg.emplace(BasisKey{}, cplx{1.0, 0.0});
    for (std::size_t q = 0; q < qudits; ++q) {
        const int r = static_cast<int>(q / 2);
        const std::size_t site = q % 2 == 0 ? L.control_site(r) : L.hold_site(r);
        const cplx w1 = a1 * std::exp(cplx{0.0, phases[q]});
        AmpMap next;
        next.reserve(bg.size() * 2);
        for (const auto& [k, a] : bg) {
            if (a0 != 0.0) next[k] += a * a0;
            if (a1 != 0.0) {
                BasisKey k1 = k;
                k1.set_digit(site, 1);
                next[k1] += a * w1;
            }
        }
        bg = std::move(next);
    }
    return bg;
}

inline AmpMap sample_phased_background(const SiteLayout& L, double p_w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * 3.141592653589793238462643);
    std::vector<double> phases(2 * static_cast<std::size_t>(L.tree.router_count));
    for (double& p : phases) p = angle(rng);
    return phased_product_background(L, p_w, phases);
}

struct PhaseInvarianceReport {
    std::vector<double> fidelities;
    double max_deviation = 0;
};

// Exact query fidelity for several router initializations that differ only by
// the diagonal phases of their |1> components. Diagonal (dephasing) models and
// depth-1 calendars leave the fidelity exactly phase-free. Bit-flip noise that
// fires between a routing layer and its mirror misroutes the return pass,
// strands interface content in the tree, and then genuinely picks up the
// phases, so invariance assertions must stay within the first two regimes.
inline PhaseInvarianceReport phase_invariance_check(
    const QueryCircuit& qc, const SiteLayout& L, const NoiseModel& noise,
    const std::vector<std::pair<std::uint64_t, cplx>>& addr, const std::vector<int>& memory,
    double p_w, std::uint64_t trials, std::uint64_t seed) {
    if (qc.router_kind != RouterKind::TwoLevel || !qc.doubled)
        throw std::invalid_argument("phase_invariance_check: needs a doubled two-level circuit");
    if (qc.depth > 2) throw std::invalid_argument("phase_invariance_check: depth capped at 2");
    if (trials < 2) throw std::invalid_argument("phase_invariance_check: needs at least 2 draws");
    std::mt19937_64 rng(seed);
    PhaseInvarianceReport rep;
    const std::vector<double> zero(2 * static_cast<std::size_t>(L.tree.router_count), 0.0);
    rep.fidelities.push_back(exhaustive_chi_fidelity(
        qc, L, noise, addr, memory, phased_product_background(L, p_w, zero)));
    for (std::uint64_t t = 1; t < trials; ++t)
        rep.fidelities.push_back(exhaustive_chi_fidelity(qc, L, noise, addr, memory,
                                                         sample_phased_background(L, p_w, rng)));
    double lo = rep.fidelities[0], hi = rep.fidelities[0];
    for (double f : rep.fidelities) {
        lo = std::min(lo, f);
        hi = std::max(hi, f);
    }
    rep.max_deviation = hi - lo;
    return rep;
}

}  // namespace qram
