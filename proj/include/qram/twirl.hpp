#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qram/channels.hpp"
#include "qram/circuit.hpp"
#include "qram/common.hpp"
#include "qram/montecarlo.hpp"
#include "qram/state.hpp"
#include "qram/topology.hpp"

namespace qram {

// --- Pauli process matrices ----------------------------------------------------

// Qubit Pauli words in index order I, X, Y, Z; for two sites the first site is
// the major index (word m = 4a + b means P_a on site 1, P_b on site 2).
inline std::vector<Eigen::MatrixXcd> pauli_word_basis(int sites) {
    if (sites != 1 && sites != 2)
        throw std::invalid_argument("pauli_word_basis: one or two qubit sites");
    std::vector<Eigen::MatrixXcd> singles;
    for (int p = 0; p < 4; ++p) singles.push_back(pauli_matrix(static_cast<PauliOp>(p), 2));
    if (sites == 1) return singles;
    std::vector<Eigen::MatrixXcd> out;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) out.push_back(kron(singles[a], singles[b]));
    return out;
}

inline std::string pauli_word_name(int m, int sites) {
    if (sites == 1) return {pauli_name(static_cast<PauliOp>(m))};
    return {pauli_name(static_cast<PauliOp>(m / 4)), pauli_name(static_cast<PauliOp>(m % 4))};
}

// Kraus set actually realized by the channel: mixed-unitary decompositions are
// folded back into sqrt(p} U form so the chi matrix reflects the mixture.
inline std::vector<Eigen::MatrixXcd> effective_kraus(const Channel& c) {
    if (!c.is_mixed_unitary) return c.kraus;
    std::vector<Eigen::MatrixXcd> ks;
    for (std::size_t k = 0; k < c.probs.size(); ++k)
        ks.push_back(std::sqrt(c.probs[k]) * c.unitaries[k]);
    return ks;
}

// Process matrix in the normalized Pauli basis: E(rho) = sum_{mn} chi_{mn}
// P_m rho P_n^dag. Trace-preserving channels have trace(chi) = 1.
inline Eigen::MatrixXcd chi_matrix(const Channel& c) {
    const int d = c.total_dim();
    if (d != 2 && d != 4) throw std::invalid_argument("chi_matrix: qubit or two-qubit channel");
    const int sites = d == 2 ? 1 : 2;
    const auto basis = pauli_word_basis(sites);
    const auto ks = effective_kraus(c);
    const int nb = static_cast<int>(basis.size());
    Eigen::MatrixXcd a(static_cast<Eigen::Index>(ks.size()), nb);
    for (std::size_t k = 0; k < ks.size(); ++k)
        for (int m = 0; m < nb; ++m)
            a(static_cast<Eigen::Index>(k), m) = (basis[m].adjoint() * ks[k]).trace() / double(d);
    return a.transpose() * a.conjugate();
}

// --- twirling groups -------------------------------------------------------------

struct TwirlGroup {
    std::vector<std::string> labels;
    std::vector<Eigen::MatrixXcd> elements;
    bool closed = false;
};

namespace twirl_detail {

// Matches up to a global phase, normalizing by the first entry above tol.
inline bool same_up_to_phase(const Eigen::MatrixXcd& a, const Eigen::MatrixXcd& b,
                             double tol = 1e-9) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const cplx x = a(i), y = b(i);
        if (std::abs(x) > tol || std::abs(y) > tol) {
            if (std::abs(x) < tol || std::abs(y) < tol) return false;
            const cplx phase = y / x;
            return (a * phase - b).cwiseAbs().maxCoeff() < tol;
        }
    }
    return true;  // both zero
}

inline std::ptrdiff_t find_up_to_phase(const std::vector<Eigen::MatrixXcd>& set,
                                       const Eigen::MatrixXcd& m) {
    for (std::size_t i = 0; i < set.size(); ++i)
        if (same_up_to_phase(set[i], m)) return static_cast<std::ptrdiff_t>(i);
    return -1;
}

}  // namespace twirl_detail

// Closure up to global phase plus presence of the identity.
inline bool check_group_closure(TwirlGroup& g) {
    g.closed = false;
    const Eigen::Index d = g.elements.empty() ? 0 : g.elements.front().rows();
    if (d == 0) return false;
    if (twirl_detail::find_up_to_phase(g.elements, Eigen::MatrixXcd::Identity(d, d)) < 0)
        return false;
    for (const auto& a : g.elements)
        for (const auto& b : g.elements)
            if (twirl_detail::find_up_to_phase(g.elements, a * b) < 0) return false;
    g.closed = true;
    return true;
}

// Pauli words on one or two qubits, one representative per phase class.
inline TwirlGroup pauli_group(int sites) {
    TwirlGroup g;
    g.elements = pauli_word_basis(sites);
    for (int m = 0; m < static_cast<int>(g.elements.size()); ++m)
        g.labels.push_back(pauli_word_name(m, sites));
    check_group_closure(g);
    return g;
}

// <1(x)Z, Z(x)1, X(x)X, i>: the two-qubit group that preserves the single-photon
// routing manifold of a dual-rail router embedding. 32 elements including the
// phase center; closes exactly, not just up to phase.
inline TwirlGroup embedding_group() {
    const Eigen::MatrixXcd I2 = Eigen::MatrixXcd::Identity(2, 2);
    const Eigen::MatrixXcd X = pauli_matrix(PauliOp::X, 2);
    const Eigen::MatrixXcd Z = pauli_matrix(PauliOp::Z, 2);
    std::vector<Eigen::MatrixXcd> gens = {kron(I2, Z), kron(Z, I2), kron(X, X),
                                          cplx{0, 1} * kron(I2, I2)};
    std::vector<Eigen::MatrixXcd> elems = {kron(I2, I2)};
    bool grew = true;
    while (grew) {
        grew = false;
        for (std::size_t i = 0; i < elems.size(); ++i)
            for (const auto& gen : gens) {
                const Eigen::MatrixXcd cand = elems[i] * gen;
                bool found = false;
                for (const auto& e : elems)
                    if ((e - cand).cwiseAbs().maxCoeff() < 1e-9) {
                        found = true;
                        break;
                    }
                if (!found) {
                    elems.push_back(cand);
                    grew = true;
                }
            }
    }
    TwirlGroup g;
    g.elements = std::move(elems);
    const auto words = pauli_word_basis(2);
    for (const auto& e : g.elements) {
        const std::ptrdiff_t w = twirl_detail::find_up_to_phase(words, e);
        std::ostringstream label;
        label << pauli_word_name(static_cast<int>(w), 2);
        const cplx phase = (words[static_cast<std::size_t>(w)].adjoint() * e).trace() / 4.0;
        const int quarter =
            static_cast<int>(std::lround(std::arg(phase) / (M_PI / 2))) & 3;
        if (quarter) label << "*i^" << quarter;
        g.labels.push_back(label.str());
    }
    check_group_closure(g);
    return g;
}

// --- channel twirling ------------------------------------------------------------

// Group-averaged channel (1/|G|) sum_T T^dag E(T rho T^dag) T. A Pauli-diagonal
// result is returned in canonical mixed-unitary form; otherwise the Kraus union
// is compressed through the Choi eigendecomposition.
inline Channel twirl_channel(const Channel& c, const TwirlGroup& g) {
    const int d = c.total_dim();
    if (g.elements.empty() || g.elements.front().rows() != d)
        throw std::invalid_argument("twirl_channel: group dimension mismatch");
    const auto ks = effective_kraus(c);
    const double scale = 1.0 / std::sqrt(static_cast<double>(g.elements.size()));
    std::vector<Eigen::MatrixXcd> pool;
    pool.reserve(ks.size() * g.elements.size());
    for (const auto& t : g.elements)
        for (const auto& k : ks) pool.push_back(scale * t.adjoint() * k * t);

    // Compress: Choi matrix J = sum_k vec(K) vec(K)^dag, then eigenvectors.
    Eigen::MatrixXcd choi = Eigen::MatrixXcd::Zero(d * d, d * d);
    for (const auto& k : pool) {
        const Eigen::Map<const Eigen::VectorXcd> v(k.data(), d * d);
        choi += v * v.adjoint();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(choi);
    std::vector<Eigen::MatrixXcd> compressed;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        const double lam = es.eigenvalues()(i);
        if (lam < 1e-12) continue;
        Eigen::MatrixXcd k(d, d);
        Eigen::Map<Eigen::VectorXcd>(k.data(), d * d) =
            std::sqrt(lam) * es.eigenvectors().col(i);
        compressed.push_back(std::move(k));
    }
    Channel out;
    out.dims = c.dims;
    out.kraus = std::move(compressed);

    // Pauli-diagonal chi: rebuild as the canonical Pauli mixture.
    if (d == 2 || d == 4) {
        const Eigen::MatrixXcd chi = chi_matrix(out);
        Eigen::MatrixXcd off = chi;
        off.diagonal().setZero();
        if (off.cwiseAbs().maxCoeff() < 1e-12) {
            const auto basis = pauli_word_basis(d == 2 ? 1 : 2);
            std::vector<double> probs;
            std::vector<Eigen::MatrixXcd> us;
            double total = 0;
            for (Eigen::Index m = 0; m < chi.rows(); ++m) {
                const double p = std::max(0.0, chi(m, m).real());
                total += p;
                probs.push_back(p);
                us.push_back(basis[static_cast<std::size_t>(m)]);
            }
            for (double& p : probs) p /= total;
            return mixed_unitary_channel(c.dims, std::move(probs), std::move(us));
        }
    }
    return out;
}

// --- embedding-group and qutrit analyses -------------------------------------------

// Generalized qutrit Paulis omega^c X3^a Z3^b over a, b, c in {0,1,2}.
inline std::vector<Eigen::MatrixXcd> qutrit_pauli_elements() {
    const cplx omega = std::polar(1.0, 2.0 * M_PI / 3.0);
    Eigen::MatrixXcd x3 = Eigen::MatrixXcd::Zero(3, 3);
    x3(0, 1) = 1;
    x3(1, 2) = 1;
    x3(2, 0) = 1;
    Eigen::MatrixXcd z3 = Eigen::MatrixXcd::Zero(3, 3);
    z3(0, 0) = 1;
    z3(1, 1) = omega;
    z3(2, 2) = omega * omega;
    std::vector<Eigen::MatrixXcd> out;
    for (int c = 0; c < 3; ++c)
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                Eigen::MatrixXcd m = Eigen::MatrixXcd::Identity(3, 3);
                for (int i = 0; i < a; ++i) m = x3 * m;
                for (int i = 0; i < b; ++i) m = z3 * m;
                out.push_back(std::pow(omega, c) * m);
            }
    return out;
}

// Does the operator exchange |0> and |1> (up to phases) while fixing |2>?
inline bool is_active_bit_flip_fixing_wait(const Eigen::MatrixXcd& m, double tol = 1e-9) {
    if (m.rows() != 3 || m.cols() != 3) return false;
    return std::abs(m(0, 1)) > 1 - tol && std::abs(m(1, 0)) > 1 - tol &&
           std::abs(m(2, 2)) > 1 - tol && std::abs(m(0, 0)) < tol && std::abs(m(1, 1)) < tol &&
           std::abs(m(0, 2)) < tol && std::abs(m(1, 2)) < tol && std::abs(m(2, 0)) < tol &&
           std::abs(m(2, 1)) < tol;
}

struct EmbeddingTwirlReport {
    TwirlGroup group;
    // Pauli-word indices grouped by their sign character under the group; the
    // twirled chi matrix can only couple words within one class.
    std::vector<std::vector<int>> chi_classes;
    double max_cross_class = 0;      // largest |chi| between distinct classes, random channels
    double zz_fixed_point_dev = 0;   // chi distance of exp(i kappa ZZ) from its twirl
    int qutrit_elements = 0;
    int qutrit_bitflip_count = -1;   // elements flipping the active subspace while fixing |W>
};

// Random CPTP channel on total dimension d with `nk` Kraus operators.
inline Channel random_channel(int d, int nk, std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<Eigen::MatrixXcd> ks;
    for (int k = 0; k < nk; ++k) {
        Eigen::MatrixXcd m(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) m(i, j) = cplx{gauss(rng), gauss(rng)};
        ks.push_back(std::move(m));
    }
    Eigen::MatrixXcd s = Eigen::MatrixXcd::Zero(d, d);
    for (const auto& k : ks) s += k.adjoint() * k;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(s);
    const Eigen::MatrixXcd isqrt = es.eigenvectors() *
                                   es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                                   es.eigenvectors().adjoint();
    Channel c;
    c.dims = d == 4 ? std::vector<int>{2, 2} : std::vector<int>{d};
    for (auto& k : ks) c.kraus.push_back(k * isqrt);
    return c;
}

// Builds the dual-rail embedding group, verifies that twirled channels keep
// chi support inside the character classes (so Kraus operators stay in
// span{Pauli words, exp(i kappa ZZ)}), and enumerates the qutrit Pauli group
// to show no element bit-flips the active subspace while fixing the wait state.
inline EmbeddingTwirlReport analyze_embedding_twirl(std::uint64_t seed = 7, int samples = 2) {
    EmbeddingTwirlReport rep;
    rep.group = embedding_group();
    const auto words = pauli_word_basis(2);

    // Character of each Pauli word under conjugation by the generators.
    const Eigen::MatrixXcd I2 = Eigen::MatrixXcd::Identity(2, 2);
    const Eigen::MatrixXcd X = pauli_matrix(PauliOp::X, 2);
    const Eigen::MatrixXcd Z = pauli_matrix(PauliOp::Z, 2);
    const std::vector<Eigen::MatrixXcd> gens = {kron(I2, Z), kron(Z, I2), kron(X, X)};
    std::map<std::vector<int>, std::vector<int>> by_char;
    std::vector<std::vector<int>> word_char(16);
    for (int m = 0; m < 16; ++m) {
        std::vector<int> sig;
        for (const auto& g : gens) {
            const Eigen::MatrixXcd conj = g * words[static_cast<std::size_t>(m)] * g.adjoint();
            sig.push_back((conj - words[static_cast<std::size_t>(m)]).cwiseAbs().maxCoeff() < 1e-9
                              ? 1
                              : -1);
        }
        word_char[static_cast<std::size_t>(m)] = sig;
        by_char[sig].push_back(m);
    }
    for (auto& [sig, members] : by_char) rep.chi_classes.push_back(members);

    std::mt19937_64 rng(seed);
    for (int s = 0; s < samples; ++s) {
        const Channel c = random_channel(4, 3, rng);
        const Channel tw = twirl_channel(c, rep.group);
        const Eigen::MatrixXcd chi = chi_matrix(tw);
        for (int m = 0; m < 16; ++m)
            for (int n = 0; n < 16; ++n)
                if (word_char[static_cast<std::size_t>(m)] !=
                    word_char[static_cast<std::size_t>(n)])
                    rep.max_cross_class = std::max(rep.max_cross_class, std::abs(chi(m, n)));
    }

    // exp(i kappa ZZ) commutes with every generator, so it is a fixed point.
    {
        Channel zz;
        zz.dims = {2, 2};
        zz.kraus = {coherent_pair_phase_unitary(0.31, 2, 2)};
        const Eigen::MatrixXcd before = chi_matrix(zz);
        const Eigen::MatrixXcd after = chi_matrix(twirl_channel(zz, rep.group));
        rep.zz_fixed_point_dev = (before - after).cwiseAbs().maxCoeff();
    }

    const auto qutrits = qutrit_pauli_elements();
    rep.qutrit_elements = static_cast<int>(qutrits.size());
    rep.qutrit_bitflip_count = 0;
    for (const auto& m : qutrits)
        if (is_active_bit_flip_fixing_wait(m)) ++rep.qutrit_bitflip_count;
    return rep;
}

// --- delayed twirling frames -----------------------------------------------------

inline bool pauli_x_bit(PauliOp p) { return p == PauliOp::X || p == PauliOp::Y; }
inline bool pauli_z_bit(PauliOp p) { return p == PauliOp::Z || p == PauliOp::Y; }
inline PauliOp pauli_from_bits(bool x, bool z) {
    if (x && z) return PauliOp::Y;
    if (x) return PauliOp::X;
    if (z) return PauliOp::Z;
    return PauliOp::I;
}

// An X-type label that landed on an in-flight address token: recorded at the
// hold level it struck, consumed when that wave is absorbed into controls.
struct PendingFlip {
    int origin_level = 0;
    int destination_level = 0;
    std::size_t recorded_layer = 0;  // base-circuit layer of the label
    bool consumed = false;
    std::size_t consumed_layer = 0;  // base-circuit layer of the absorbing swap
};

struct DressingSwap {
    std::size_t layer = 0;  // dressed-circuit layer holding the SWAP
    int router = -1;
};

// One sampled twirl of a single query. Labels are drawn for the downstream
// half (through the copy layer); the upstream half replays the same labels at
// the mirrored positions, which is what completes each twirl inside the query
// and keeps the whole dressed list palindromic.
struct TwirlFrame {
    int depth = 0;
    Schedule schedule = Schedule::Serial;
    std::vector<std::map<std::size_t, PauliOp>> layer_paulis;  // per base layer, site -> label
    PauliOp t_bus = PauliOp::I, t_bprime = PauliOp::I;         // T between query and CX
    PauliOp m_bus = PauliOp::I, m_bprime = PauliOp::I;         // M = CX T^dag CX, phase dropped
    std::vector<PendingFlip> pending_flips;
    std::vector<DressingSwap> dressing_swaps;  // filled by dress_circuit
};

namespace twirl_detail {

inline void require_twirlable(const QueryCircuit& qc) {
    if (qc.router_kind != RouterKind::TwoLevel)
        throw std::invalid_argument("delayed twirling requires a two-level circuit");
    if (qc.doubled)
        throw std::invalid_argument("delayed twirling starts from a single (non-doubled) query");
    if (qc.layers.size() < 3 || qc.copy_layers.size() != 1)
        throw std::invalid_argument("delayed twirling requires one copy layer");
    if (qc.copy_layers.front() * 2 + 1 != qc.layers.size())
        throw std::invalid_argument("delayed twirling requires a palindromic query");
}

// Frames and dressing always work against the doubled layout, so site indices
// stay valid when the twirled query is doubled around the CX.
inline SiteLayout twirl_layout(const QueryCircuit& qc) {
    return make_layout(build_tree(qc.depth), RouterModel{qc.router_kind}, true);
}

inline std::vector<std::size_t> layer_support(const SiteLayout& L, const Layer& layer) {
    std::vector<std::size_t> s;
    for (const auto& e : layer.events) {
        switch (e.kind) {
            case GateEvent::Kind::Routing:
                s.push_back(L.control_site(e.router));
                s.push_back(L.hold_site(e.router));
                s.push_back(L.child_hold_site(e.router, 0));
                s.push_back(L.child_hold_site(e.router, 1));
                break;
            case GateEvent::Kind::Swap:
            case GateEvent::Kind::Cx:
                s.push_back(resolve_site(L, e.a));
                s.push_back(resolve_site(L, e.b));
                break;
            case GateEvent::Kind::Copy:
                for (std::uint64_t c = 0; c < L.tree.memory_size; ++c)
                    s.push_back(L.leg_site(static_cast<std::int64_t>(c)));
                break;
            case GateEvent::Kind::Frame:
                s.push_back(resolve_site(L, e.a));
                break;
        }
    }
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
}

// Symbolic name of every site, for emitting frame events and dump lines.
inline std::vector<ChannelSite> site_table(const SiteLayout& L) {
    std::vector<ChannelSite> t(L.radix.size());
    for (int m = 1; m <= L.tree.depth; ++m)
        t[L.address_site(m)] = {ChannelSite::Kind::Address, m};
    t[L.bus_site()] = {ChannelSite::Kind::Bus, 0};
    if (L.doubled) t[L.bprime_site()] = {ChannelSite::Kind::BPrime, 0};
    for (int r = 0; r < L.tree.router_count; ++r) {
        t[L.control_site(r)] = {ChannelSite::Kind::RouterControl, r};
        t[L.hold_site(r)] = {ChannelSite::Kind::RouterHold, r};
    }
    for (std::uint64_t c = 0; c < L.tree.memory_size; ++c)
        t[L.leg_site(static_cast<std::int64_t>(c))] = {ChannelSite::Kind::Leg,
                                                       static_cast<int>(c)};
    return t;
}

// Root path of each router: ancestors[r][k] is the level-(k+1) router on the
// path from the root down to r (the last entry is r itself).
inline std::vector<std::vector<int>> ancestor_chains(const TreeTopology& tree) {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(tree.router_count));
    for (int r = 0; r < tree.router_count; ++r) {
        std::vector<int> chain;
        for (int a = r; a >= 0; a = tree.parent[static_cast<std::size_t>(a)])
            chain.push_back(a);
        std::reverse(chain.begin(), chain.end());
        out[static_cast<std::size_t>(r)] = std::move(chain);
    }
    return out;
}

struct DressingWalk {
    std::vector<Layer> dressed;  // the single twirled query, when emitting
    std::size_t copy_layer = 0;  // dressed index of the copy layer
    std::vector<PendingFlip> pending;
    std::vector<DressingSwap> swaps;
};

// Single pass over the base layers. Tracks, for every router, where the
// content destined for its control currently sits (its "feed") and the X-type
// label parity accumulated on that worldline; routing layers whose router has
// odd parity receive a children-SWAP, placed after the gate downstream and
// before it upstream so the two halves stay mutual inverses. The same pass
// records the pending-flip ledger from labels striking in-flight hold tokens.
inline DressingWalk dressing_walk(const QueryCircuit& qc, const SiteLayout& L,
                                  const TwirlFrame& frame, bool emit) {
    const TreeTopology& tree = L.tree;
    const int n = tree.depth;
    const std::size_t center = qc.copy_layers.front();
    const std::size_t total = qc.layers.size();
    const auto chains = ancestor_chains(tree);
    const auto table = site_table(L);

    std::vector<std::size_t> feed(static_cast<std::size_t>(tree.router_count));
    std::vector<char> parity(static_cast<std::size_t>(tree.router_count), 0);
    for (int r = 0; r < tree.router_count; ++r)
        feed[static_cast<std::size_t>(r)] = L.address_site(tree.level[static_cast<std::size_t>(r)]);
    std::vector<int> occupant(static_cast<std::size_t>(n) + 2, -1);  // hold level -> wave

    DressingWalk walk;

    auto apply_labels = [&](std::size_t base_layer, bool record) {
        const auto& labels = frame.layer_paulis[base_layer];
        for (const auto& [site, p] : labels) {
            if (!pauli_x_bit(p)) continue;
            for (int r = 0; r < tree.router_count; ++r)
                if (feed[static_cast<std::size_t>(r)] == site)
                    parity[static_cast<std::size_t>(r)] ^= 1;
            if (record && table[site].kind == ChannelSite::Kind::RouterHold) {
                const int lvl = tree.level[static_cast<std::size_t>(table[site].index)];
                const int wave = occupant[static_cast<std::size_t>(lvl)];
                if (wave >= 1)
                    walk.pending.push_back({lvl, wave, base_layer, false, 0});
            }
        }
    };

    auto move_tokens = [&](const Layer& layer, std::size_t base_layer) {
        // Occupancy updates are two-phase (all clears, then all sets) so
        // multi-tag pipelined layers do not depend on tag order.
        std::vector<std::size_t> clears;
        std::vector<std::pair<std::size_t, int>> sets;
        for (const auto& t : layer.tags) {
            const int w = t.wave;
            auto each_feed = [&](auto&& fn) {
                for (int r = 0; r < tree.router_count; ++r)
                    if (tree.level[static_cast<std::size_t>(r)] == w)
                        fn(static_cast<std::size_t>(r));
            };
            switch (t.action) {
                case WaveTag::Action::Inject:
                    if (w >= 1)
                        each_feed([&](std::size_t r) { feed[r] = L.hold_site(0); });
                    sets.push_back({1, w});
                    break;
                case WaveTag::Action::Eject:
                    if (w >= 1)
                        each_feed([&](std::size_t r) { feed[r] = L.address_site(w); });
                    clears.push_back(1);
                    break;
                case WaveTag::Action::Route: {
                    const std::size_t j = static_cast<std::size_t>(t.level);
                    if (w >= 1) {
                        each_feed([&](std::size_t r) {
                            const auto& chain = chains[r];
                            feed[r] = L.hold_site(
                                chain[t.upstream ? j - 1 : j]);  // level j or j+1 ancestor
                        });
                    }
                    if (t.upstream) {
                        sets.push_back({j, w});
                        if (j + 1 < occupant.size()) clears.push_back(j + 1);
                    } else {
                        if (j + 1 < occupant.size()) sets.push_back({j + 1, w});
                        clears.push_back(j);
                    }
                    break;
                }
                case WaveTag::Action::Absorb:
                    each_feed([&](std::size_t r) { feed[r] = L.control_site(static_cast<int>(r)); });
                    clears.push_back(static_cast<std::size_t>(t.level));
                    for (auto& pf : walk.pending)
                        if (!pf.consumed && pf.destination_level == w) {
                            pf.consumed = true;
                            pf.consumed_layer = base_layer;
                        }
                    break;
                case WaveTag::Action::Unabsorb:
                    each_feed([&](std::size_t r) { feed[r] = L.hold_site(static_cast<int>(r)); });
                    sets.push_back({static_cast<std::size_t>(t.level), w});
                    break;
                case WaveTag::Action::Copy:
                    break;
            }
        }
        for (std::size_t lvl : clears) occupant[lvl] = -1;
        for (const auto& [lvl, w] : sets) occupant[lvl] = w;
    };

    auto emit_pauli = [&](std::size_t base_layer) {
        if (!emit) return;
        Layer l;
        l.noisy = false;
        for (const auto& [site, p] : frame.layer_paulis[base_layer])
            if (p != PauliOp::I) l.events.push_back(GateEvent::frame(table[site], p));
        walk.dressed.push_back(std::move(l));
    };

    auto dressing_layer = [&](const Layer& base) {
        Layer d;
        d.noisy = true;  // physical SWAPs, part of the noise calendar
        for (const auto& e : base.events) {
            if (e.kind != GateEvent::Kind::Routing) continue;
            if (!parity[static_cast<std::size_t>(e.router)]) continue;
            const int r = e.router;
            ChannelSite c0, c1;
            if (tree.is_leaf_router(r)) {
                c0 = {ChannelSite::Kind::Leg, static_cast<int>(tree.leaf_cells[static_cast<std::size_t>(r)][0])};
                c1 = {ChannelSite::Kind::Leg, static_cast<int>(tree.leaf_cells[static_cast<std::size_t>(r)][1])};
            } else {
                c0 = {ChannelSite::Kind::RouterHold, tree.children[static_cast<std::size_t>(r)][0]};
                c1 = {ChannelSite::Kind::RouterHold, tree.children[static_cast<std::size_t>(r)][1]};
            }
            d.events.push_back(GateEvent::swap(c0, c1));
            if (emit) walk.swaps.push_back({walk.dressed.size(), r});
        }
        return d;
    };

    for (std::size_t u = 0; u < total; ++u) {
        const Layer& base = qc.layers[u];
        const bool is_route =
            !base.tags.empty() &&
            std::any_of(base.tags.begin(), base.tags.end(),
                        [](const WaveTag& t) { return t.action == WaveTag::Action::Route; });
        const std::size_t pauli_of = u <= center ? u : total - 1 - u;
        if (u < center) {
            emit_pauli(pauli_of);
            apply_labels(pauli_of, /*record=*/true);
            if (emit) walk.dressed.push_back(base);
            move_tokens(base, u);
            if (is_route) {
                Layer d = dressing_layer(base);
                if (emit) walk.dressed.push_back(std::move(d));
            }
        } else if (u == center) {
            emit_pauli(pauli_of);
            apply_labels(pauli_of, /*record=*/true);
            if (emit) {
                walk.copy_layer = walk.dressed.size();
                walk.dressed.push_back(base);
            }
            move_tokens(base, u);
            emit_pauli(pauli_of);  // the twirl closes right after the copy
            apply_labels(pauli_of, /*record=*/false);
        } else {
            if (is_route) {
                Layer d = dressing_layer(base);
                if (emit) walk.dressed.push_back(std::move(d));
            }
            if (emit) walk.dressed.push_back(base);
            move_tokens(base, u);
            emit_pauli(pauli_of);
            apply_labels(pauli_of, /*record=*/false);
        }
    }
    return walk;
}

inline WaveTag reverse_tag(const WaveTag& t) {
    WaveTag m = t;
    m.upstream = !t.upstream;
    switch (t.action) {
        case WaveTag::Action::Inject: m.action = WaveTag::Action::Eject; break;
        case WaveTag::Action::Eject: m.action = WaveTag::Action::Inject; break;
        case WaveTag::Action::Absorb: m.action = WaveTag::Action::Unabsorb; break;
        case WaveTag::Action::Unabsorb: m.action = WaveTag::Action::Absorb; break;
        default: break;
    }
    return m;
}

}  // namespace twirl_detail

// Uniform Pauli labels for the downstream half of the query (each one is
// replayed at its mirror layer), plus the outer T with its compiled
// correction M = CX T^dag CX; the pending-flip ledger is resolved immediately.
inline TwirlFrame sample_twirl_frame(const QueryCircuit& qc, std::mt19937_64& rng) {
    twirl_detail::require_twirlable(qc);
    const SiteLayout L = twirl_detail::twirl_layout(qc);
    const std::size_t total = qc.layers.size();
    const std::size_t center = qc.copy_layers.front();
    TwirlFrame f;
    f.depth = qc.depth;
    f.schedule = qc.schedule;
    f.layer_paulis.resize(total);
    std::uniform_int_distribution<int> die(0, 3);
    for (std::size_t u = 0; u <= center; ++u) {
        for (std::size_t site : twirl_detail::layer_support(L, qc.layers[u])) {
            const PauliOp p = static_cast<PauliOp>(die(rng));
            if (p != PauliOp::I) f.layer_paulis[u][site] = p;
        }
    }
    for (std::size_t u = center + 1; u < total; ++u)
        f.layer_paulis[u] = f.layer_paulis[total - 1 - u];
    f.t_bus = static_cast<PauliOp>(die(rng));
    f.t_bprime = static_cast<PauliOp>(die(rng));
    // Conjugate T through CX (control B', target B): X_B and Z_B' pass, Z_B
    // spreads to Z_B', X_B' spreads to X_B. The global phase is dropped.
    const bool xb = pauli_x_bit(f.t_bus), zb = pauli_z_bit(f.t_bus);
    const bool xp = pauli_x_bit(f.t_bprime), zp = pauli_z_bit(f.t_bprime);
    f.m_bus = pauli_from_bits(xb ^ xp, zb);
    f.m_bprime = pauli_from_bits(xp, zp ^ zb);

    const auto walk = twirl_detail::dressing_walk(qc, L, f, /*emit=*/false);
    f.pending_flips = walk.pending;
    return f;
}

inline TwirlFrame sample_twirl_frame(const QueryCircuit& qc, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_twirl_frame(qc, rng);
}

// Builds the full in-situ twirled doubled query
//   Q_tw' = Q_tw^dag  M  CX  T  Q_tw
// from a single query and its frame: layer Paulis inserted (downstream half
// sampled, upstream half the mirrored replay), routing layers dressed with
// children SWAPs driven by the accumulated control-feed parity, and the
// second query the literal reversal of the first. Dressing layers are
// materialized (and noisy) even when empty, so the noise calendar and tau do
// not depend on the sampled frame. Updates the frame's ledger and swap list.
inline QueryCircuit dress_circuit(const QueryCircuit& qc, TwirlFrame& frame) {
    twirl_detail::require_twirlable(qc);
    if (frame.depth != qc.depth || frame.schedule != qc.schedule ||
        frame.layer_paulis.size() != qc.layers.size())
        throw std::invalid_argument("dress_circuit: frame was sampled for a different circuit");
    const SiteLayout L = twirl_detail::twirl_layout(qc);
    auto walk = twirl_detail::dressing_walk(qc, L, frame, /*emit=*/true);
    for (const auto& pf : walk.pending)
        if (!pf.consumed)
            throw std::runtime_error("dress_circuit: unconsumed pending flip at circuit end");
    frame.pending_flips = walk.pending;

    QueryCircuit out;
    out.depth = qc.depth;
    out.schedule = qc.schedule;
    out.router_kind = qc.router_kind;
    out.doubled = true;
    const std::vector<Layer>& one = walk.dressed;
    out.layers = one;

    Layer tlayer;
    tlayer.noisy = false;
    if (frame.t_bus != PauliOp::I)
        tlayer.events.push_back(GateEvent::frame(detail::bus_site(), frame.t_bus));
    if (frame.t_bprime != PauliOp::I)
        tlayer.events.push_back(GateEvent::frame(detail::bprime_site(), frame.t_bprime));
    out.layers.push_back(std::move(tlayer));

    Layer cx;
    cx.events.push_back(GateEvent::cx(detail::bprime_site(), detail::bus_site()));
    cx.noisy = true;
    out.cx_layer = static_cast<std::ptrdiff_t>(out.layers.size());
    out.layers.push_back(std::move(cx));

    Layer mlayer;
    mlayer.noisy = false;
    if (frame.m_bus != PauliOp::I)
        mlayer.events.push_back(GateEvent::frame(detail::bus_site(), frame.m_bus));
    if (frame.m_bprime != PauliOp::I)
        mlayer.events.push_back(GateEvent::frame(detail::bprime_site(), frame.m_bprime));
    out.layers.push_back(std::move(mlayer));

    const std::size_t base2 = out.layers.size();
    for (auto it = one.rbegin(); it != one.rend(); ++it) {
        Layer l = *it;
        for (auto& t : l.tags) t = twirl_detail::reverse_tag(t);
        out.layers.push_back(std::move(l));
    }

    out.copy_layers = {walk.copy_layer, base2 + (one.size() - 1 - walk.copy_layer)};
    int noisy_one = 0;
    for (const auto& l : one) noisy_one += l.noisy ? 1 : 0;
    out.tau = noisy_one - 1;  // per-query noisy layers, copy excluded

    frame.dressing_swaps.clear();
    for (const auto& s : walk.swaps) {
        frame.dressing_swaps.push_back(s);
        frame.dressing_swaps.push_back({base2 + (one.size() - 1 - s.layer), s.router});
    }
    return out;
}

// --- frame serialization -----------------------------------------------------------

// Line format: a header, the outer T/M pair, then one line per downstream
// layer holding (site, label) pairs. The mirrored half and the ledger are
// reconstructed on load, since both are determined by the sampled half.
inline std::string frame_to_text(const TwirlFrame& f) {
    std::ostringstream out;
    const std::size_t total = f.layer_paulis.size();
    const std::size_t center = (total - 1) / 2;
    out << "qram-frame v1\n";
    out << "depth " << f.depth << " schedule " << schedule_name(f.schedule) << " layers "
        << total << "\n";
    out << "outer " << pauli_name(f.t_bus) << " " << pauli_name(f.t_bprime) << " corr "
        << pauli_name(f.m_bus) << " " << pauli_name(f.m_bprime) << "\n";
    const TreeTopology tree = build_tree(f.depth);
    const SiteLayout L = make_layout(tree, RouterModel{RouterKind::TwoLevel}, true);
    const auto table = twirl_detail::site_table(L);
    for (std::size_t u = 0; u <= center; ++u) {
        if (f.layer_paulis[u].empty()) continue;
        out << "layer " << u;
        for (const auto& [site, p] : f.layer_paulis[u])
            out << " " << site_kind_name(table[site].kind) << " " << table[site].index << " "
                << pauli_name(p);
        out << "\n";
    }
    return out.str();
}

inline TwirlFrame frame_from_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "qram-frame v1")
        throw std::invalid_argument("frame_from_text: bad magic line");
    TwirlFrame f;
    std::size_t total = 0;
    {
        std::string kw, sched;
        std::getline(in, line);
        std::istringstream h(line);
        h >> kw >> f.depth >> kw >> sched >> kw >> total;
        if (!h) throw std::invalid_argument("frame_from_text: bad header");
        f.schedule = schedule_from_name(sched);
    }
    {
        std::string kw, tb, tp, mb, mp;
        std::getline(in, line);
        std::istringstream o(line);
        o >> kw >> tb >> tp >> kw >> mb >> mp;
        if (!o) throw std::invalid_argument("frame_from_text: bad outer line");
        f.t_bus = pauli_from_name(tb[0]);
        f.t_bprime = pauli_from_name(tp[0]);
        f.m_bus = pauli_from_name(mb[0]);
        f.m_bprime = pauli_from_name(mp[0]);
    }
    f.layer_paulis.resize(total);
    const TreeTopology tree = build_tree(f.depth);
    const SiteLayout L = make_layout(tree, RouterModel{RouterKind::TwoLevel}, true);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string op;
        std::size_t u = 0;
        ls >> op >> u;
        if (op != "layer" || u >= total)
            throw std::invalid_argument("frame_from_text: bad layer line");
        std::string kind, label;
        int idx = 0;
        while (ls >> kind >> idx >> label)
            f.layer_paulis[u][resolve_site(L, {site_kind_from_name(kind), idx})] =
                pauli_from_name(label[0]);
    }
    const std::size_t center = (total - 1) / 2;
    for (std::size_t u = center + 1; u < total; ++u)
        f.layer_paulis[u] = f.layer_paulis[total - 1 - u];
    // Ledger is a function of the sampled half; rebuild it.
    const QueryCircuit qc =
        build_query(f.depth, RouterKind::TwoLevel, f.schedule, /*doubled=*/false);
    if (qc.layers.size() != total)
        throw std::invalid_argument("frame_from_text: layer count does not match the calendar");
    const auto walk =
        twirl_detail::dressing_walk(qc, twirl_detail::twirl_layout(qc), f, /*emit=*/false);
    f.pending_flips = walk.pending;
    return f;
}

// --- edge twirling (classical corrections) ------------------------------------------

struct EdgeFrame {
    std::vector<PauliOp> address;  // per address qubit, m = 1..n at index m-1
    PauliOp bus = PauliOp::I;
    PauliOp bprime = PauliOp::I;
};

inline EdgeFrame sample_edge_frame(int depth, bool doubled, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> die(0, 3);
    EdgeFrame f;
    for (int m = 1; m <= depth; ++m) f.address.push_back(static_cast<PauliOp>(die(rng)));
    f.bus = static_cast<PauliOp>(die(rng));
    f.bprime = doubled ? static_cast<PauliOp>(die(rng)) : PauliOp::I;
    return f;
}

inline EdgeFrame sample_edge_frame(int depth, bool doubled, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sample_edge_frame(depth, doubled, rng);
}

// For m = 1..n in order: an X-type Pauli on address qubit m exchanges
// x_i <-> x_{NOT_m(i)}, where NOT_m flips the m-th address bit (most
// significant first). The composition is one XOR-mask permutation.
inline std::vector<int> memory_reshuffle(const std::vector<int>& x,
                                         const std::vector<PauliOp>& paulis) {
    const std::size_t n = paulis.size();
    if (x.size() != (std::size_t{1} << n))
        throw std::invalid_argument("memory_reshuffle: memory size must be 2^n");
    std::uint64_t mask = 0;
    for (std::size_t m = 1; m <= n; ++m)
        if (pauli_x_bit(paulis[m - 1])) mask |= std::uint64_t{1} << (n - m);
    std::vector<int> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i ^ mask];
    return out;
}

struct EdgeTwirledQuery {
    QueryCircuit circuit;
    std::vector<int> memory;  // reshuffled; run the circuit with this vector
    EdgeFrame frame;
};

// Paulis at the circuit boundary only, with the memory permuted so the
// flipped addresses still reach their data. The closing layer is compiled to
// one Pauli per site: the address labels repeat, the bus keeps its Z part,
// and B' takes Z^(z_B xor z_B') to cancel the phase the CX picked up.
inline EdgeTwirledQuery build_edge_twirled_circuit(const TreeTopology& tree,
                                                   const std::vector<int>& memory,
                                                   const EdgeFrame& frame,
                                                   Schedule sched = Schedule::Serial,
                                                   RouterKind kind = RouterKind::TwoLevel,
                                                   bool doubled = true) {
    const int n = tree.depth;
    if (static_cast<int>(frame.address.size()) != n)
        throw std::invalid_argument("build_edge_twirled_circuit: one Pauli per address qubit");
    if (memory.size() != tree.memory_size)
        throw std::invalid_argument("build_edge_twirled_circuit: memory size mismatch");
    EdgeTwirledQuery out;
    out.frame = frame;
    out.memory = memory_reshuffle(memory, frame.address);

    QueryCircuit qc = build_query(n, kind, sched, doubled);
    Layer pre;
    pre.noisy = false;
    for (int m = 1; m <= n; ++m)
        if (frame.address[static_cast<std::size_t>(m - 1)] != PauliOp::I)
            pre.events.push_back(
                GateEvent::frame(detail::addr_site(m), frame.address[static_cast<std::size_t>(m - 1)]));
    if (frame.bus != PauliOp::I)
        pre.events.push_back(GateEvent::frame(detail::bus_site(), frame.bus));
    if (doubled && frame.bprime != PauliOp::I)
        pre.events.push_back(GateEvent::frame(detail::bprime_site(), frame.bprime));

    Layer post;
    post.noisy = false;
    for (int m = 1; m <= n; ++m)
        if (frame.address[static_cast<std::size_t>(m - 1)] != PauliOp::I)
            post.events.push_back(
                GateEvent::frame(detail::addr_site(m), frame.address[static_cast<std::size_t>(m - 1)]));
    const bool zb = pauli_z_bit(frame.bus);
    const bool zp = pauli_z_bit(frame.bprime);
    if (zb) post.events.push_back(GateEvent::frame(detail::bus_site(), PauliOp::Z));
    if (doubled && (zb ^ zp))
        post.events.push_back(GateEvent::frame(detail::bprime_site(), PauliOp::Z));

    out.circuit = qc;
    out.circuit.layers.clear();
    out.circuit.layers.push_back(std::move(pre));
    out.circuit.layers.insert(out.circuit.layers.end(), qc.layers.begin(), qc.layers.end());
    out.circuit.layers.push_back(std::move(post));
    for (auto& c : out.circuit.copy_layers) c += 1;
    if (out.circuit.cx_layer >= 0) out.circuit.cx_layer += 1;
    return out;
}

// --- frame-averaged Monte Carlo --------------------------------------------------

// Expected fidelity of the in-situ twirled doubled query: each trajectory
// samples a fresh frame, dresses the query, and runs it under sampled noise.
inline McResult estimate_insitu_twirled_fidelity(
    const QueryCircuit& single_query, const NoiseModel& noise,
    const std::vector<std::pair<std::uint64_t, cplx>>& addr, const std::vector<int>& memory,
    const McOptions& opt) {
    twirl_detail::require_twirlable(single_query);
    const SiteLayout L = twirl_detail::twirl_layout(single_query);
    const std::vector<CompiledPlacement> compiled = compile_noise(L, noise);
    const AmpMap target = ideal_query_target(L, addr, memory);
    const std::vector<std::size_t> out_sites = query_output_sites(L);
    return run_trajectories(
        opt.trials, opt.seed, opt.threads, [&](std::uint64_t, std::mt19937_64& rng) {
            TwirlFrame frame = sample_twirl_frame(single_query, rng);
            const QueryCircuit qc = dress_circuit(single_query, frame);
            SparseState psi =
                opt.background_state.empty()
                    ? prepare_query_input(L, addr,
                                          sample_config(L, opt.init, rng, opt.fixed_background))
                    : prepare_query_input(L, addr, opt.background_state);
            run_circuit(qc, psi, memory, [&](SparseState& s, std::size_t) {
                for (const auto& cp : compiled) apply_channel_sampled(s, cp, rng);
            });
            return subsystem_fidelity(psi, out_sites, target);
        });
}

// Expected fidelity of the edge-twirled query with reshuffled memory; scored
// against the ideal answer for the original memory.
inline McResult estimate_edge_twirled_fidelity(
    int depth, const NoiseModel& noise, const std::vector<std::pair<std::uint64_t, cplx>>& addr,
    const std::vector<int>& memory, const McOptions& opt, Schedule sched = Schedule::Serial,
    RouterKind kind = RouterKind::TwoLevel, bool doubled = true) {
    const TreeTopology tree = build_tree(depth);
    const SiteLayout L = make_layout(tree, RouterModel{kind}, doubled);
    const std::vector<CompiledPlacement> compiled = compile_noise(L, noise);
    const AmpMap target = ideal_query_target(L, addr, memory);
    const std::vector<std::size_t> out_sites = query_output_sites(L);
    return run_trajectories(
        opt.trials, opt.seed, opt.threads, [&](std::uint64_t, std::mt19937_64& rng) {
            const EdgeFrame frame = sample_edge_frame(depth, doubled, rng);
            const EdgeTwirledQuery etq =
                build_edge_twirled_circuit(tree, memory, frame, sched, kind, doubled);
            SparseState psi =
                opt.background_state.empty()
                    ? prepare_query_input(L, addr,
                                          sample_config(L, opt.init, rng, opt.fixed_background))
                    : prepare_query_input(L, addr, opt.background_state);
            run_circuit(etq.circuit, psi, etq.memory, [&](SparseState& s, std::size_t) {
                for (const auto& cp : compiled) apply_channel_sampled(s, cp, rng);
            });
            return subsystem_fidelity(psi, out_sites, target);
        });
}

}  // namespace qram
