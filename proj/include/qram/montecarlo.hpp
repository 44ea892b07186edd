#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <thread>
#include <vector>

#include "qram/channels.hpp"
#include "qram/circuit.hpp"
#include "qram/common.hpp"
#include "qram/state.hpp"
#include "qram/topology.hpp"

namespace qram {

// How the router qudits start before a query.
enum class InitKind { Idle, AllZero, RandomBasis, Fixed };

inline std::string init_kind_name(InitKind k) {
    switch (k) {
        case InitKind::Idle: return "idle";
        case InitKind::AllZero: return "all_zero";
        case InitKind::RandomBasis: return "random_basis";
        case InitKind::Fixed: return "fixed";
    }
    throw std::logic_error("init_kind_name");
}

inline InitKind init_kind_from_name(const std::string& s) {
    if (s == "idle") return InitKind::Idle;
    if (s == "all_zero") return InitKind::AllZero;
    if (s == "random_basis") return InitKind::RandomBasis;
    if (s == "fixed") return InitKind::Fixed;
    throw std::invalid_argument("unknown init kind: " + s);
}

// Draw a background configuration. RandomBasis scrambles the router qudits
// uniformly and leaves the legs idle; Fixed echoes the supplied key.
inline BasisKey sample_config(const SiteLayout& L, InitKind kind, std::mt19937_64& rng,
                              const BasisKey& fixed = BasisKey{}) {
    switch (kind) {
        case InitKind::Idle:
            return idle_background(L);
        case InitKind::AllZero:
            return BasisKey{};
        case InitKind::Fixed:
            return fixed;
        case InitKind::RandomBasis: {
            BasisKey k = idle_background(L);
            const int qd = L.router.local_dim();
            std::uniform_int_distribution<int> digit(0, qd - 1);
            for (int r = 0; r < L.tree.router_count; ++r) {
                k.set_digit(L.control_site(r), static_cast<std::uint8_t>(digit(rng)));
                k.set_digit(L.hold_site(r), static_cast<std::uint8_t>(digit(rng)));
            }
            return k;
        }
    }
    throw std::logic_error("sample_config");
}

// Addresses whose branches avoid the faulted routers (v_chi) and, more
// strictly, every faulted router's propagation envelope (v_chi_prime).
struct GoodAddresses {
    std::vector<std::uint64_t> v_chi;
    std::vector<std::uint64_t> v_chi_prime;
};

inline GoodAddresses good_addresses(const TreeTopology& tree, const std::vector<int>& faulted) {
    std::vector<char> bad(static_cast<std::size_t>(tree.router_count), 0);
    std::vector<char> bad_env(static_cast<std::size_t>(tree.router_count), 0);
    for (int r : faulted) {
        if (r < 0 || r >= tree.router_count)
            throw std::invalid_argument("good_addresses: router out of range");
        bad[static_cast<std::size_t>(r)] = 1;
        for (int s : propagation_envelope(tree, r)) bad_env[static_cast<std::size_t>(s)] = 1;
    }
    GoodAddresses out;
    for (std::uint64_t a = 0; a < tree.memory_size; ++a) {
        bool hit = false, hit_env = false;
        for (int r : branch(tree, a)) {
            hit = hit || bad[static_cast<std::size_t>(r)];
            hit_env = hit_env || bad_env[static_cast<std::size_t>(r)];
        }
        if (!hit) out.v_chi.push_back(a);
        if (!hit_env) out.v_chi_prime.push_back(a);
    }
    return out;
}

// --- trajectory sampling -------------------------------------------------------

struct CompiledPlacement {
    std::vector<std::size_t> sites;
    const Channel* channel = nullptr;
    std::vector<char> skip;  // per branch: exact-identity unitaries need no work
};

inline std::vector<CompiledPlacement> compile_noise(const SiteLayout& L, const NoiseModel& m) {
    std::vector<CompiledPlacement> out;
    out.reserve(m.placements.size());
    for (const auto& p : m.placements) {
        CompiledPlacement cp;
        cp.channel = &p.channel;
        for (const auto& s : p.sites) cp.sites.push_back(resolve_site(L, s));
        const int d = p.channel.total_dim();
        int expect = 1;
        for (std::size_t s = 0; s < cp.sites.size(); ++s)
            expect *= L.radix[cp.sites[s]];
        if (expect != d)
            throw std::invalid_argument("compile_noise: channel dimension mismatch at " + p.name);
        if (p.channel.is_mixed_unitary) {
            cp.skip.resize(p.channel.unitaries.size(), 0);
            for (std::size_t k = 0; k < p.channel.unitaries.size(); ++k) {
                const auto& u = p.channel.unitaries[k];
                cp.skip[k] = u.isApprox(Eigen::MatrixXcd::Identity(u.rows(), u.cols())) ? 1 : 0;
            }
        }
        out.push_back(std::move(cp));
    }
    return out;
}

inline void apply_operator(SparseState& psi, const CompiledPlacement& cp,
                           const Eigen::MatrixXcd& op) {
    if (cp.sites.size() == 1)
        apply_single_site(psi, cp.sites[0], op);
    else
        apply_two_site(psi, cp.sites[0], cp.sites[1], op);
}

// One stochastic realization of the channel. Mixed-unitary channels draw the
// label from fixed probabilities; general channels measure the Kraus norms.
inline void apply_channel_sampled(SparseState& psi, const CompiledPlacement& cp,
                                  std::mt19937_64& rng) {
    const Channel& ch = *cp.channel;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    if (ch.is_mixed_unitary) {
        double u = unit(rng);
        std::size_t pick = ch.probs.size() - 1;
        for (std::size_t k = 0; k < ch.probs.size(); ++k) {
            if (u < ch.probs[k]) {
                pick = k;
                break;
            }
            u -= ch.probs[k];
        }
        if (!cp.skip.empty() && cp.skip[pick]) return;
        apply_operator(psi, cp, ch.unitaries[pick]);
        return;
    }
    std::vector<SparseState> branches;
    std::vector<double> weights;
    branches.reserve(ch.kraus.size());
    double total = 0;
    for (const auto& k : ch.kraus) {
        SparseState cand = psi;
        apply_operator(cand, cp, k);
        const double w = cand.norm2();
        total += w;
        branches.push_back(std::move(cand));
        weights.push_back(w);
    }
    if (total <= 0) throw std::runtime_error("apply_channel_sampled: vanishing state");
    double u = unit(rng) * total;
    std::size_t pick = weights.size() - 1;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        if (u < weights[k]) {
            pick = k;
            break;
        }
        u -= weights[k];
    }
    psi = std::move(branches[pick]);
    psi.normalize();
}

struct McOptions {
    std::uint64_t trials = 10000;
    std::uint64_t seed = 1;
    unsigned threads = 0;  // 0: hardware concurrency
    InitKind init = InitKind::Idle;
    BasisKey fixed_background{};
    AmpMap background_state{};  // when non-empty, a superposed background overriding `init`
};

struct McResult {
    double fidelity = 0;
    double std_error = 0;
    std::uint64_t trials = 0;
};

inline McResult summarize_samples(const std::vector<double>& f) {
    McResult r;
    r.trials = f.size();
    double mean = 0;
    for (double v : f) mean += v;
    mean /= static_cast<double>(f.size());
    double var = 0;
    for (double v : f) var += (v - mean) * (v - mean);
    var = f.size() > 1 ? var / (static_cast<double>(f.size() - 1)) : 0.0;
    r.fidelity = mean;
    r.std_error = std::sqrt(var / static_cast<double>(f.size()));
    return r;
}

// Per-trajectory seeds depend only on (seed, index), and samples are reduced
// in index order, so the estimate is bit-identical for any thread count.
template <class TrajectoryFn>
inline McResult run_trajectories(std::uint64_t trials, std::uint64_t seed, unsigned threads,
                                 TrajectoryFn&& traj) {
    if (trials == 0) throw std::invalid_argument("run_trajectories: trials must be positive");
    std::vector<double> samples(trials, 0.0);
    unsigned nt = threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : threads;
    nt = static_cast<unsigned>(std::min<std::uint64_t>(nt, trials));
    if (nt <= 1) {
        for (std::uint64_t t = 0; t < trials; ++t) {
            std::mt19937_64 rng(derive_seed(seed, t));
            samples[t] = traj(t, rng);
        }
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < nt; ++w) {
            pool.emplace_back([&, w]() {
                for (std::uint64_t t = w; t < trials; t += nt) {
                    std::mt19937_64 rng(derive_seed(seed, t));
                    samples[t] = traj(t, rng);
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    return summarize_samples(samples);
}

// Monte-Carlo estimate of the query fidelity on the interface qubits under
// the given noise model.
inline McResult estimate_query_fidelity(const QueryCircuit& qc, const SiteLayout& L,
                                        const NoiseModel& noise,
                                        const std::vector<std::pair<std::uint64_t, cplx>>& addr,
                                        const std::vector<int>& memory, const McOptions& opt) {
    const std::vector<CompiledPlacement> compiled = compile_noise(L, noise);
    const AmpMap target = ideal_query_target(L, addr, memory);
    const std::vector<std::size_t> out_sites = query_output_sites(L);
    return run_trajectories(
        opt.trials, opt.seed, opt.threads, [&](std::uint64_t, std::mt19937_64& rng) {
            SparseState psi =
                opt.background_state.empty()
                    ? prepare_query_input(L, addr, sample_config(L, opt.init, rng, opt.fixed_background))
                    : prepare_query_input(L, addr, opt.background_state);
            run_circuit(qc, psi, memory, [&](SparseState& s, std::size_t) {
                for (const auto& cp : compiled) apply_channel_sampled(s, cp, rng);
            });
            return subsystem_fidelity(psi, out_sites, target);
        });
}

}  // namespace qram
