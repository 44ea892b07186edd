#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "qram/common.hpp"
#include "qram/state.hpp"
#include "qram/topology.hpp"

namespace qram {

// Qubit Pauli lifted to a d-level router qudit: acts on the routing subspace
// {|0>,|1>} and fixes every higher level (the wait state).
inline Eigen::MatrixXcd pauli_matrix(PauliOp p, int d) {
    Eigen::MatrixXcd m = Eigen::MatrixXcd::Identity(d, d);
    const cplx i{0, 1};
    switch (p) {
        case PauliOp::I: break;
        case PauliOp::X:
            m(0, 0) = 0; m(1, 1) = 0; m(0, 1) = 1; m(1, 0) = 1;
            break;
        case PauliOp::Y:
            m(0, 0) = 0; m(1, 1) = 0; m(0, 1) = -i; m(1, 0) = i;
            break;
        case PauliOp::Z:
            m(1, 1) = -1;
            break;
    }
    return m;
}

// exp(i kappa Z) on the routing subspace, identity on the wait state.
inline Eigen::MatrixXcd coherent_phase_unitary(double kappa, int d) {
    Eigen::MatrixXcd m = Eigen::MatrixXcd::Identity(d, d);
    m(0, 0) = std::polar(1.0, kappa);
    m(1, 1) = std::polar(1.0, -kappa);
    return m;
}

inline Eigen::MatrixXcd kron(const Eigen::MatrixXcd& a, const Eigen::MatrixXcd& b) {
    Eigen::MatrixXcd out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

// exp(i kappa Z(x)Z) on two qudits, wait states untouched.
inline Eigen::MatrixXcd coherent_pair_phase_unitary(double kappa, int d1, int d2) {
    const Eigen::MatrixXcd zz = kron(pauli_matrix(PauliOp::Z, d1), pauli_matrix(PauliOp::Z, d2));
    Eigen::MatrixXcd m = Eigen::MatrixXcd::Identity(d1 * d2, d1 * d2);
    for (int k = 0; k < d1 * d2; ++k) m(k, k) = std::exp(cplx{0, kappa} * zz(k, k));
    return m;
}

// A completely positive trace-preserving map on one or two qudits. When the
// channel is a probabilistic mixture of unitaries, the decomposition is kept
// so trajectory sampling can draw the label without measuring norms.
struct Channel {
    std::vector<int> dims;                  // one or two local dimensions
    std::vector<Eigen::MatrixXcd> kraus;
    bool is_mixed_unitary = false;
    std::vector<double> probs;              // parallel to `unitaries`
    std::vector<Eigen::MatrixXcd> unitaries;

    int total_dim() const {
        int d = 1;
        for (int x : dims) d *= x;
        return d;
    }
};

inline bool is_trace_preserving(const Channel& c, double tol = 1e-10) {
    const int d = c.total_dim();
    Eigen::MatrixXcd s = Eigen::MatrixXcd::Zero(d, d);
    for (const auto& k : c.kraus) s += k.adjoint() * k;
    return (s - Eigen::MatrixXcd::Identity(d, d)).cwiseAbs().maxCoeff() < tol;
}

inline Channel identity_channel(int d) {
    Channel c;
    c.dims = {d};
    c.kraus = {Eigen::MatrixXcd::Identity(d, d)};
    c.is_mixed_unitary = true;
    c.probs = {1.0};
    c.unitaries = c.kraus;
    return c;
}

inline Channel mixed_unitary_channel(std::vector<int> dims, std::vector<double> probs,
                                     std::vector<Eigen::MatrixXcd> unitaries) {
    if (probs.size() != unitaries.size() || probs.empty())
        throw std::invalid_argument("mixed_unitary_channel: size mismatch");
    double total = 0;
    for (double p : probs) {
        if (p < -1e-12) throw std::invalid_argument("mixed_unitary_channel: negative probability");
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9)
        throw std::invalid_argument("mixed_unitary_channel: probabilities must sum to 1");
    Channel c;
    c.dims = std::move(dims);
    c.is_mixed_unitary = true;
    c.probs = std::move(probs);
    c.unitaries = std::move(unitaries);
    for (std::size_t k = 0; k < c.probs.size(); ++k)
        c.kraus.push_back(std::sqrt(c.probs[k]) * c.unitaries[k]);
    return c;
}

// Apply U with probability p, identity otherwise.
inline Channel bernoulli_unitary_channel(const Eigen::MatrixXcd& u, double p, int d) {
    return mixed_unitary_channel({d}, {1.0 - p, p}, {Eigen::MatrixXcd::Identity(d, d), u});
}

inline Channel bernoulli_x_channel(double p, int d) {
    return bernoulli_unitary_channel(pauli_matrix(PauliOp::X, d), p, d);
}

// rates[P] = probability of Pauli P; the identity takes the remainder.
inline Channel pauli_channel(const std::map<PauliOp, double>& rates, int d) {
    std::vector<double> probs;
    std::vector<Eigen::MatrixXcd> us;
    double rest = 1.0;
    probs.push_back(0.0);  // placeholder for identity
    us.push_back(pauli_matrix(PauliOp::I, d));
    for (const auto& [p, r] : rates) {
        if (p == PauliOp::I) continue;
        if (r < 0) throw std::invalid_argument("pauli_channel: negative rate");
        rest -= r;
        probs.push_back(r);
        us.push_back(pauli_matrix(p, d));
    }
    if (rest < -1e-12) throw std::invalid_argument("pauli_channel: rates exceed 1");
    probs[0] = std::max(0.0, rest);
    return mixed_unitary_channel({d}, std::move(probs), std::move(us));
}

// Uniform over the three non-identity Paulis with total probability p.
inline Channel depolarizing_channel(double p, int d) {
    return pauli_channel({{PauliOp::X, p / 3}, {PauliOp::Y, p / 3}, {PauliOp::Z, p / 3}}, d);
}

// Two-qudit Pauli mixture; labels index (first, second).
inline Channel pair_pauli_channel(const std::map<std::pair<PauliOp, PauliOp>, double>& rates,
                                  int d1, int d2) {
    std::vector<double> probs{0.0};
    std::vector<Eigen::MatrixXcd> us{Eigen::MatrixXcd::Identity(d1 * d2, d1 * d2)};
    double rest = 1.0;
    for (const auto& [pp, r] : rates) {
        if (pp.first == PauliOp::I && pp.second == PauliOp::I) continue;
        if (r < 0) throw std::invalid_argument("pair_pauli_channel: negative rate");
        rest -= r;
        probs.push_back(r);
        us.push_back(kron(pauli_matrix(pp.first, d1), pauli_matrix(pp.second, d2)));
    }
    if (rest < -1e-12) throw std::invalid_argument("pair_pauli_channel: rates exceed 1");
    probs[0] = std::max(0.0, rest);
    return mixed_unitary_channel({d1, d2}, std::move(probs), std::move(us));
}

// Uniform over the fifteen non-identity Pauli pairs with total probability p.
inline Channel pair_depolarizing_channel(double p, int d1, int d2) {
    std::map<std::pair<PauliOp, PauliOp>, double> rates;
    const PauliOp all[4] = {PauliOp::I, PauliOp::X, PauliOp::Y, PauliOp::Z};
    for (PauliOp a : all)
        for (PauliOp b : all)
            if (!(a == PauliOp::I && b == PauliOp::I)) rates[{a, b}] = p / 15.0;
    return pair_pauli_channel(rates, d1, d2);
}

inline Channel coherent_phase_channel(double kappa, int d) {
    Channel c;
    c.dims = {d};
    c.kraus = {coherent_phase_unitary(kappa, d)};
    c.is_mixed_unitary = true;
    c.probs = {1.0};
    c.unitaries = c.kraus;
    return c;
}

inline Channel coherent_pair_phase_channel(double kappa, int d1, int d2) {
    Channel c;
    c.dims = {d1, d2};
    c.kraus = {coherent_pair_phase_unitary(kappa, d1, d2)};
    c.is_mixed_unitary = true;
    c.probs = {1.0};
    c.unitaries = c.kraus;
    return c;
}

// Relaxation of the routing subspace toward |0>; wait states are untouched.
inline Channel amplitude_damping_channel(double gamma, int d) {
    if (gamma < 0 || gamma > 1) throw std::invalid_argument("amplitude_damping_channel: bad gamma");
    Eigen::MatrixXcd k0 = Eigen::MatrixXcd::Identity(d, d);
    k0(1, 1) = std::sqrt(1.0 - gamma);
    Eigen::MatrixXcd k1 = Eigen::MatrixXcd::Zero(d, d);
    k1(0, 1) = std::sqrt(gamma);
    Channel c;
    c.dims = {d};
    c.kraus = {k0, k1};
    return c;
}

// --- error strength functionals ---------------------------------------------

// Largest-singular-value Kraus element: the branch a faultless run follows.
inline Eigen::MatrixXcd dominant_kraus(const Channel& c) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < c.kraus.size(); ++k) {
        Eigen::JacobiSVD<Eigen::MatrixXcd> svd(c.kraus[k]);
        const double nrm = svd.singularValues()(0);
        if (nrm > best) {
            best = nrm;
            arg = k;
        }
    }
    return c.kraus[arg];
}

// Error rate of a channel: 1 - m^2 where m lower-bounds |<v|K0|v>| over unit
// vectors via the Hermitian part of the dominant Kraus element K0. When the
// Hermitian part has eigenvalues on both sides of zero the bound degenerates
// to m = 0 and the rate saturates at 1.
inline double error_rate(const Channel& c) {
    const Eigen::MatrixXcd k0 = dominant_kraus(c);
    const Eigen::MatrixXcd h = 0.5 * (k0 + k0.adjoint());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(h);
    const auto& ev = es.eigenvalues();
    const double lo = ev.minCoeff(), hi = ev.maxCoeff();
    double m = 0.0;
    if (lo > 0)
        m = lo;
    else if (hi < 0)
        m = -hi;
    const double rate = 1.0 - m * m;
    return std::clamp(rate, 0.0, 1.0);
}

struct PolarSplit {
    Eigen::MatrixXcd v0;     // unitary factor
    Eigen::MatrixXcd p0;     // positive semidefinite factor, k0 = v0 * p0
    double kappa = 0.0;      // largest eigenphase magnitude of v0
};

// Polar decomposition of a Kraus element; kappa measures its coherent part.
inline PolarSplit polar_split(const Eigen::MatrixXcd& k0) {
    Eigen::JacobiSVD<Eigen::MatrixXcd> svd(k0, Eigen::ComputeFullU | Eigen::ComputeFullV);
    PolarSplit s;
    s.v0 = svd.matrixU() * svd.matrixV().adjoint();
    s.p0 = svd.matrixV() * svd.singularValues().asDiagonal() * svd.matrixV().adjoint();
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(s.v0);
    double kmax = 0.0;
    for (int i = 0; i < es.eigenvalues().size(); ++i)
        kmax = std::max(kmax, std::abs(std::arg(es.eigenvalues()(i))));
    s.kappa = kmax;
    return s;
}

// --- query infidelity bounds --------------------------------------------------

// Fresh three-level query, stochastic noise of rate eps, tau routing layers.
inline double bound_wait_stochastic(double eps, int tau, int n) {
    return 4.0 * eps * (tau + 1) * (n + 1);
}

// Single two-level query from the all-zero configuration.
inline double bound_two_level_stochastic(double eps, int tau, int n) {
    return 2.0 * eps * (tau + 1) * (n + 1) * (n + 1);
}

// Doubled query from an arbitrary initial configuration; the conservative
// form used for enforcement counts the doubling overhead inside the square.
inline double bound_arbitrary_init(double eps, int tau, int n) {
    return 4.0 * eps * (tau + 1) * (n + 2) * (n + 2);
}

inline double bound_arbitrary_init_stated(double eps, int tau, int n) {
    return 4.0 * eps * (tau + 1) * (n + 1) * (n + 1);
}

// Coherent noise: amplitudes add before probabilities, squaring the layer
// count. The prefactor is exposed for sensitivity studies.
inline double bound_coherent(double eps, int tau, int n, double prefactor = 4.0) {
    return prefactor * eps * double(tau + 1) * double(tau + 1) * (n + 1) * (n + 1);
}

// Delayed-twirl protocols restore stochastic scaling at a factor-2 cost in
// queries; the classical-memory variant pays one extra layer-count factor.
inline double bound_twirl_insitu(double eps, int tau, int n) {
    return 8.0 * eps * (tau + 1) * (n + 1);
}

inline double bound_twirl_classical(double eps, int tau, int n) {
    return 8.0 * eps * double(tau + 1) * double(tau + 1) * (n + 1);
}

// Fuchs-van-de-Graaf style composition: convert each infidelity to a
// distance, add, convert back. Exact round trip for a single entry.
inline double combine_infidelities_fvg(const std::vector<double>& deltas) {
    double dist = 0;
    for (double d : deltas) {
        if (d < 0 || d > 1) throw std::invalid_argument("combine_infidelities_fvg: delta out of [0,1]");
        dist += std::sqrt(std::max(0.0, 2.0 * d - d * d));
    }
    dist = std::min(1.0, dist);
    return 1.0 - std::sqrt(std::max(0.0, 1.0 - dist * dist));
}

// --- noise models ---------------------------------------------------------------

struct ChannelSite {
    enum class Kind { RouterControl, RouterHold, Leg, Bus, Address, BPrime };
    Kind kind = Kind::RouterControl;
    int index = 0;  // router id, leg cell, or address bit (1-based like A_m)

    friend bool operator==(const ChannelSite& a, const ChannelSite& b) {
        return a.kind == b.kind && a.index == b.index;
    }
};

inline std::size_t resolve_site(const SiteLayout& L, const ChannelSite& s) {
    switch (s.kind) {
        case ChannelSite::Kind::RouterControl: return L.control_site(s.index);
        case ChannelSite::Kind::RouterHold: return L.hold_site(s.index);
        case ChannelSite::Kind::Leg: return L.leg_site(s.index);
        case ChannelSite::Kind::Bus: return L.bus_site();
        case ChannelSite::Kind::Address: return L.address_site(s.index);
        case ChannelSite::Kind::BPrime: return L.bprime_site();
    }
    throw std::logic_error("resolve_site: bad kind");
}

// Routers whose qudits a site belongs to, for coarse-graining assignment;
// empty for bus/address/leg/B' sites.
inline std::optional<int> site_router(const ChannelSite& s) {
    if (s.kind == ChannelSite::Kind::RouterControl || s.kind == ChannelSite::Kind::RouterHold)
        return s.index;
    return std::nullopt;
}

struct ChannelPlacement {
    std::string name;
    std::vector<ChannelSite> sites;  // one or two
    Channel channel;
};

// Noise fires once per placement after every noisy layer, in placement order.
struct NoiseModel {
    std::vector<ChannelPlacement> placements;

    bool empty() const { return placements.empty(); }
};

inline double model_error_rate(const NoiseModel& m) {
    double eps = 0;
    for (const auto& p : m.placements) eps = std::max(eps, error_rate(p.channel));
    return eps;
}

// --- noise model serialization ----------------------------------------------

inline std::string site_kind_name(ChannelSite::Kind k) {
    switch (k) {
        case ChannelSite::Kind::RouterControl: return "router_control";
        case ChannelSite::Kind::RouterHold: return "router_hold";
        case ChannelSite::Kind::Leg: return "leg";
        case ChannelSite::Kind::Bus: return "bus";
        case ChannelSite::Kind::Address: return "address";
        case ChannelSite::Kind::BPrime: return "bprime";
    }
    throw std::logic_error("site_kind_name: bad kind");
}

inline ChannelSite::Kind site_kind_from_name(const std::string& s) {
    if (s == "router_control") return ChannelSite::Kind::RouterControl;
    if (s == "router_hold") return ChannelSite::Kind::RouterHold;
    if (s == "leg") return ChannelSite::Kind::Leg;
    if (s == "bus") return ChannelSite::Kind::Bus;
    if (s == "address") return ChannelSite::Kind::Address;
    if (s == "bprime") return ChannelSite::Kind::BPrime;
    throw std::invalid_argument("unknown site kind: " + s);
}

inline PauliOp pauli_from_name(char c) {
    switch (c) {
        case 'I': return PauliOp::I;
        case 'X': return PauliOp::X;
        case 'Y': return PauliOp::Y;
        case 'Z': return PauliOp::Z;
    }
    throw std::invalid_argument(std::string("unknown Pauli label: ") + c);
}

namespace detail {

inline Channel build_channel_from_json(const nlohmann::json& e, int d1, int d2, bool pair) {
    const std::string type = e.at("type").get<std::string>();
    if (type == "bernoulli_x") {
        if (pair) throw std::invalid_argument("bernoulli_x is a single-site channel");
        return bernoulli_x_channel(e.at("p").get<double>(), d1);
    }
    if (type == "pauli") {
        if (pair) throw std::invalid_argument("pauli is a single-site channel; use pair_pauli");
        std::map<PauliOp, double> rates;
        for (const auto& [k, v] : e.at("rates").items()) {
            if (k.size() != 1) throw std::invalid_argument("pauli: bad label " + k);
            rates[pauli_from_name(k[0])] = v.get<double>();
        }
        return pauli_channel(rates, d1);
    }
    if (type == "depolarizing") {
        if (pair) throw std::invalid_argument("depolarizing is single-site; use pair_depolarizing");
        return depolarizing_channel(e.at("p").get<double>(), d1);
    }
    if (type == "pair_depolarizing") {
        if (!pair) throw std::invalid_argument("pair_depolarizing needs two sites");
        return pair_depolarizing_channel(e.at("p").get<double>(), d1, d2);
    }
    if (type == "pair_pauli") {
        if (!pair) throw std::invalid_argument("pair_pauli needs two sites");
        std::map<std::pair<PauliOp, PauliOp>, double> rates;
        for (const auto& [k, v] : e.at("rates").items()) {
            if (k.size() != 2) throw std::invalid_argument("pair_pauli: bad label " + k);
            rates[{pauli_from_name(k[0]), pauli_from_name(k[1])}] = v.get<double>();
        }
        return pair_pauli_channel(rates, d1, d2);
    }
    if (type == "coherent_phase") {
        if (pair) throw std::invalid_argument("coherent_phase is a single-site channel");
        return coherent_phase_channel(e.at("kappa").get<double>(), d1);
    }
    if (type == "coherent_pair_phase") {
        if (!pair) throw std::invalid_argument("coherent_pair_phase needs two sites");
        return coherent_pair_phase_channel(e.at("kappa").get<double>(), d1, d2);
    }
    if (type == "amplitude_damping") {
        if (pair) throw std::invalid_argument("amplitude_damping is a single-site channel");
        return amplitude_damping_channel(e.at("gamma").get<double>(), d1);
    }
    throw std::invalid_argument("unknown channel type: " + type);
}

}  // namespace detail

// Expand a noise configuration against a concrete tree. Router qudits carry
// the router radix; bus/address/B' sites are qubits.
inline NoiseModel noise_model_from_json(const nlohmann::json& j, const TreeTopology& tree,
                                        RouterKind kind) {
    NoiseModel model;
    const int qd = RouterModel{kind}.local_dim();
    auto radix_of = [&](const ChannelSite& s) {
        // Address and bus sites share the router radix (they park the wait
        // digit mid-circuit); only B' is always a qubit.
        return s.kind == ChannelSite::Kind::BPrime ? 2 : qd;
    };
    auto add = [&](const nlohmann::json& e, std::vector<ChannelSite> sites, const std::string& tag) {
        for (const auto& s : sites) {
            if ((s.kind == ChannelSite::Kind::RouterControl ||
                 s.kind == ChannelSite::Kind::RouterHold) &&
                (s.index < 0 || s.index >= tree.router_count))
                throw std::invalid_argument("noise model: router index out of range");
            if (s.kind == ChannelSite::Kind::Leg &&
                (s.index < 0 || static_cast<std::uint64_t>(s.index) >= tree.memory_size))
                throw std::invalid_argument("noise model: leg index out of range");
            if (s.kind == ChannelSite::Kind::Address &&
                (s.index < 1 || s.index > tree.depth))
                throw std::invalid_argument("noise model: address bit out of range");
        }
        ChannelPlacement p;
        p.name = e.value("name", e.at("type").get<std::string>()) + tag;
        const bool pair = sites.size() == 2;
        const int d1 = radix_of(sites[0]);
        const int d2 = pair ? radix_of(sites[1]) : 1;
        p.channel = detail::build_channel_from_json(e, d1, d2, pair);
        p.sites = std::move(sites);
        model.placements.push_back(std::move(p));
    };
    for (const auto& e : j.at("channels")) {
        const std::string scope = e.value("scope", std::string("sites"));
        if (scope == "sites") {
            std::vector<ChannelSite> sites;
            for (const auto& s : e.at("sites"))
                sites.push_back({site_kind_from_name(s.at("kind").get<std::string>()),
                                 s.value("index", 0)});
            if (sites.empty() || sites.size() > 2)
                throw std::invalid_argument("noise model: channels act on one or two sites");
            add(e, std::move(sites), "");
        } else if (scope == "per_router_qudit") {
            for (int r = 0; r < tree.router_count; ++r) {
                add(e, {{ChannelSite::Kind::RouterControl, r}}, "@r" + std::to_string(r) + "c");
                add(e, {{ChannelSite::Kind::RouterHold, r}}, "@r" + std::to_string(r) + "h");
            }
        } else if (scope == "per_router_control") {
            for (int r = 0; r < tree.router_count; ++r)
                add(e, {{ChannelSite::Kind::RouterControl, r}}, "@r" + std::to_string(r) + "c");
        } else if (scope == "per_router_hold") {
            for (int r = 0; r < tree.router_count; ++r)
                add(e, {{ChannelSite::Kind::RouterHold, r}}, "@r" + std::to_string(r) + "h");
        } else if (scope == "per_router_pair") {
            for (int r = 0; r < tree.router_count; ++r)
                add(e,
                    {{ChannelSite::Kind::RouterControl, r}, {ChannelSite::Kind::RouterHold, r}},
                    "@r" + std::to_string(r));
        } else if (scope == "per_parent_child_hold") {
            for (int r = 0; r < tree.router_count; ++r) {
                const auto& ch = tree.children[static_cast<std::size_t>(r)];
                if (ch[0] < 0) continue;
                for (int side = 0; side < 2; ++side)
                    add(e,
                        {{ChannelSite::Kind::RouterHold, r},
                         {ChannelSite::Kind::RouterHold, ch[static_cast<std::size_t>(side)]}},
                        "@r" + std::to_string(r) + (side == 0 ? "L" : "R"));
            }
        } else {
            throw std::invalid_argument("unknown noise scope: " + scope);
        }
    }
    return model;
}

inline nlohmann::json noise_sites_to_json(const std::vector<ChannelSite>& sites) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : sites)
        arr.push_back({{"kind", site_kind_name(s.kind)}, {"index", s.index}});
    return arr;
}

// --- coarse graining accounting ------------------------------------------------

struct GrainAssignment {
    std::size_t placement = 0;
    int d = 0;
    int u = 0;
    int super_index = -1;
    double eps = 0;
};

struct GrainAccounting {
    std::vector<GrainAssignment> assigned;
    std::vector<std::size_t> unassignable;   // placements with off-tree or split support
    std::map<int, double> eps_by_d;          // d -> max over (u, super-router) of summed rates
};

// Assign each placement to the coarsest-fitting super-router: smallest d,
// then smallest u, such that every router its sites touch lies inside one
// super-router of coarse_grain(tree, d, u). Placements touching non-router
// sites are reported, not assigned.
inline GrainAccounting grain_accounting(const TreeTopology& tree, const NoiseModel& model) {
    GrainAccounting acc;
    // eps sums per (d, u, super): keyed for the max reduction afterwards.
    std::map<std::tuple<int, int, int>, double> sums;
    std::vector<std::vector<GrainedTree>> grains(static_cast<std::size_t>(tree.depth) + 1);
    for (int d = 1; d <= tree.depth; ++d)
        for (int u = 1; u <= d; ++u)
            grains[static_cast<std::size_t>(d)].push_back(coarse_grain(tree, d, u));
    for (std::size_t i = 0; i < model.placements.size(); ++i) {
        const auto& p = model.placements[i];
        std::vector<int> routers;
        bool off_tree = false;
        for (const auto& s : p.sites) {
            if (auto r = site_router(s))
                routers.push_back(*r);
            else
                off_tree = true;
        }
        std::sort(routers.begin(), routers.end());
        routers.erase(std::unique(routers.begin(), routers.end()), routers.end());
        if (off_tree || routers.empty()) {
            acc.unassignable.push_back(i);
            continue;
        }
        bool placed = false;
        for (int d = 1; d <= tree.depth && !placed; ++d) {
            for (int u = 1; u <= d && !placed; ++u) {
                const GrainedTree& g = grains[static_cast<std::size_t>(d)][static_cast<std::size_t>(u - 1)];
                for (std::size_t s = 0; s < g.super_routers.size(); ++s) {
                    const auto& mem = g.super_routers[s].members;
                    bool all_in = true;
                    for (int r : routers)
                        if (!std::binary_search(mem.begin(), mem.end(), r)) {
                            all_in = false;
                            break;
                        }
                    if (all_in) {
                        const double eps = error_rate(p.channel);
                        acc.assigned.push_back({i, d, u, static_cast<int>(s), eps});
                        sums[{d, u, static_cast<int>(s)}] += eps;
                        placed = true;
                        break;
                    }
                }
            }
        }
        if (!placed) acc.unassignable.push_back(i);
    }
    for (const auto& [key, total] : sums) {
        const int d = std::get<0>(key);
        auto it = acc.eps_by_d.find(d);
        if (it == acc.eps_by_d.end())
            acc.eps_by_d[d] = total;
        else
            it->second = std::max(it->second, total);
    }
    return acc;
}

}  // namespace qram
