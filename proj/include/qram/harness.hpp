#pragma once
// Declarative experiment harness: validated sweep configurations, per-row
// fidelity-bound selection, scaling-exponent fits, coherent-vs-stochastic
// comparisons on GHZ addresses, and CSV/JSON result emission.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <qram/channels.hpp>
#include <qram/circuit.hpp>
#include <qram/montecarlo.hpp>
#include <qram/oracle.hpp>
#include <qram/twirl.hpp>

namespace qram {

// --- experiment configuration ---------------------------------------------------

enum class Variant { ThreeLevel, TwoLevel };
enum class TwirlMode { None, InSitu, EdgeClassical };
enum class HarnessInit { AllWait, AllZero, RandomBasis, RandomPhase, Supplied };

inline std::string variant_name(Variant v) {
    return v == Variant::ThreeLevel ? "three-level" : "two-level";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "three-level") return Variant::ThreeLevel;
    if (s == "two-level") return Variant::TwoLevel;
    throw std::invalid_argument("unknown variant: " + s);
}

inline RouterKind variant_router_kind(Variant v) {
    return v == Variant::ThreeLevel ? RouterKind::ThreeLevel : RouterKind::TwoLevel;
}

inline std::string twirl_mode_name(TwirlMode m) {
    switch (m) {
        case TwirlMode::None: return "none";
        case TwirlMode::InSitu: return "in-situ";
        case TwirlMode::EdgeClassical: return "edge-classical";
    }
    throw std::logic_error("twirl_mode_name");
}

inline TwirlMode twirl_mode_from_name(const std::string& s) {
    if (s == "none") return TwirlMode::None;
    if (s == "in-situ") return TwirlMode::InSitu;
    if (s == "edge-classical") return TwirlMode::EdgeClassical;
    throw std::invalid_argument("unknown twirl mode: " + s);
}

inline std::string harness_init_name(HarnessInit i) {
    switch (i) {
        case HarnessInit::AllWait: return "all-wait";
        case HarnessInit::AllZero: return "all-zero";
        case HarnessInit::RandomBasis: return "random-basis";
        case HarnessInit::RandomPhase: return "random-phase";
        case HarnessInit::Supplied: return "supplied";
    }
    throw std::logic_error("harness_init_name");
}

inline HarnessInit harness_init_from_name(const std::string& s) {
    if (s == "all-wait") return HarnessInit::AllWait;
    if (s == "all-zero") return HarnessInit::AllZero;
    if (s == "random-basis") return HarnessInit::RandomBasis;
    if (s == "random-phase") return HarnessInit::RandomPhase;
    if (s == "supplied") return HarnessInit::Supplied;
    throw std::invalid_argument("unknown init mode: " + s);
}

struct ExperimentConfig {
    Variant variant = Variant::ThreeLevel;
    HarnessInit init = HarnessInit::AllWait;
    Schedule schedule = Schedule::Serial;
    int n_min = 1;
    int n_max = 1;
    bool doubled = false;
    TwirlMode twirl = TwirlMode::None;
    nlohmann::json noise;                   // {"channels": [...]}
    std::string address = "uniform";        // "uniform" | "ghz" | "basis:<k>"
    nlohmann::json memory = "alternating";  // "alternating" | "zero" | explicit bit array
    double p_w = 0.5;                       // wait weight for random-phase backgrounds
    std::vector<int> background;            // supplied digits, (control, hold) per router
    std::uint64_t trials = 2000;
    std::uint64_t seed = 1;
    unsigned threads = 0;
    std::string out;
};

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["variant"] = variant_name(c.variant);
    j["init"] = harness_init_name(c.init);
    j["schedule"] = schedule_name(c.schedule);
    j["n_min"] = c.n_min;
    j["n_max"] = c.n_max;
    j["doubled"] = c.doubled;
    j["twirl"] = twirl_mode_name(c.twirl);
    j["noise"] = c.noise;
    j["address"] = c.address;
    j["memory"] = c.memory;
    j["p_w"] = c.p_w;
    if (!c.background.empty()) j["background"] = c.background;
    j["trials"] = c.trials;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    if (!c.out.empty()) j["out"] = c.out;
    return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.init = harness_init_from_name(j.value("init", std::string("all-wait")));
    c.schedule = schedule_from_name(j.value("schedule", std::string("serial")));
    c.n_min = j.value("n_min", 1);
    c.n_max = j.value("n_max", c.n_min);
    c.twirl = twirl_mode_from_name(j.value("twirl", std::string("none")));
    c.doubled = j.value("doubled", c.twirl != TwirlMode::None);
    c.noise = j.at("noise");
    c.address = j.value("address", std::string("uniform"));
    c.memory = j.contains("memory") ? j.at("memory") : nlohmann::json("alternating");
    c.p_w = j.value("p_w", 0.5);
    if (j.contains("background")) c.background = j.at("background").get<std::vector<int>>();
    c.trials = j.value("trials", std::uint64_t{2000});
    c.seed = j.value("seed", std::uint64_t{1});
    c.threads = j.value("threads", 0u);
    c.out = j.value("out", std::string());
    return c;
}

// Fiducial = the configuration the routing identity assumes: every router
// idle. On two-level routers the idle configuration is all-zero.
inline bool is_fiducial_init(Variant v, HarnessInit i) {
    if (i == HarnessInit::AllWait) return true;
    return v == Variant::TwoLevel && i == HarnessInit::AllZero;
}

inline void validate_config(const ExperimentConfig& c) {
    if (c.n_min < 1 || c.n_max < c.n_min)
        throw std::invalid_argument("config: depth range requires 1 <= n_min <= n_max");
    if (c.trials == 0) throw std::invalid_argument("config: trials must be positive");
    if (!(c.p_w >= 0.0 && c.p_w <= 1.0))
        throw std::invalid_argument("config: p_w must lie in [0, 1]");
    if (c.twirl == TwirlMode::InSitu && c.variant != Variant::TwoLevel)
        throw std::invalid_argument("config: in-situ twirling requires two-level routers");
    if (c.twirl == TwirlMode::EdgeClassical && c.variant != Variant::TwoLevel)
        throw std::invalid_argument("config: edge twirling requires two-level routers");
    if (c.twirl != TwirlMode::None && !c.doubled)
        throw std::invalid_argument("config: twirling requires query doubling");
    if (c.twirl != TwirlMode::None && c.init == HarnessInit::RandomPhase)
        throw std::invalid_argument("config: random-phase initialization requires an untwirled run");
    if (c.twirl != TwirlMode::None && c.init == HarnessInit::Supplied)
        throw std::invalid_argument("config: supplied background requires an untwirled run");
    if (!is_fiducial_init(c.variant, c.init) && !c.doubled)
        throw std::invalid_argument("config: arbitrary initialization requires query doubling");
    if (c.init == HarnessInit::Supplied) {
        if (c.n_min != c.n_max)
            throw std::invalid_argument("config: supplied background requires a single depth");
        const std::size_t want = 2u * (std::size_t{1} << unsigned(c.n_min)) - 2u;
        if (c.background.size() != want)
            throw std::invalid_argument("config: supplied background must list every router qudit");
        const int dim = c.variant == Variant::ThreeLevel ? 3 : 2;
        for (int d : c.background)
            if (d < 0 || d >= dim)
                throw std::invalid_argument("config: supplied background digit out of range");
    }
    if (c.memory.is_array() && c.n_min != c.n_max)
        throw std::invalid_argument("config: memory array requires a single depth");
    if (!c.noise.is_object() || !c.noise.contains("channels"))
        throw std::invalid_argument("config: noise must declare a channels list");
}

// --- bound selection -------------------------------------------------------------

// A noise declaration is coherent when any channel keeps unitary phases; any
// other mixed-unitary declaration is treated as stochastic.
inline bool noise_is_coherent(const nlohmann::json& noise) {
    if (!noise.is_object() || !noise.contains("channels")) return false;
    for (const auto& e : noise.at("channels"))
        if (e.value("type", std::string()).rfind("coherent", 0) == 0) return true;
    return false;
}

struct BoundChoice {
    std::string label;
    double value = 0;
};

// The applicable infidelity bound for one sweep row. Twirled rows always get
// the stochastic-style twirl bounds (that is the point of twirling); for a
// three-level fiducial query the per-layer twirl restores the plain waiting
// bound without doubling. Untwirled coherent rows square both the layer count
// and the depth factor of the matching stochastic bound.
inline BoundChoice select_bound(Variant variant, bool fiducial_init, TwirlMode twirl,
                                bool coherent, double eps, int tau, int n) {
    if (twirl == TwirlMode::InSitu) {
        if (variant == Variant::ThreeLevel && fiducial_init)
            return {"wait_stochastic", bound_wait_stochastic(eps, tau, n)};
        return {"twirl_insitu", bound_twirl_insitu(eps, tau, n)};
    }
    if (twirl == TwirlMode::EdgeClassical)
        return {"twirl_edge", bound_twirl_classical(eps, tau, n)};
    const double t = tau + 1.0;
    const double d1 = n + 1.0;
    const double d2 = n + 2.0;
    if (!coherent) {
        if (variant == Variant::ThreeLevel && fiducial_init)
            return {"wait_stochastic", bound_wait_stochastic(eps, tau, n)};
        if (fiducial_init)
            return {"two_level_stochastic", bound_two_level_stochastic(eps, tau, n)};
        return {"arbitrary_init", bound_arbitrary_init(eps, tau, n)};
    }
    if (variant == Variant::ThreeLevel && fiducial_init)
        return {"wait_coherent", bound_coherent(eps, tau, n, 4.0)};
    if (fiducial_init) return {"two_level_coherent", 2.0 * eps * t * t * d1 * d1 * d1 * d1};
    return {"arbitrary_init_coherent", 4.0 * eps * t * t * d2 * d2 * d2 * d2};
}

inline double max_placement_error_rate(const NoiseModel& m) {
    double e = 0;
    for (const auto& p : m.placements) e = std::max(e, error_rate(p.channel));
    return e;
}

// --- address and memory declarations ----------------------------------------------

inline std::vector<std::pair<std::uint64_t, cplx>> make_address(const std::string& spec, int n) {
    const std::uint64_t cells = std::uint64_t{1} << unsigned(n);
    std::vector<std::pair<std::uint64_t, cplx>> a;
    if (spec == "uniform") {
        const double amp = 1.0 / std::sqrt(static_cast<double>(cells));
        for (std::uint64_t k = 0; k < cells; ++k) a.push_back({k, cplx{amp, 0}});
    } else if (spec == "ghz") {
        const double amp = 1.0 / std::sqrt(2.0);
        a.push_back({0, cplx{amp, 0}});
        a.push_back({cells - 1, cplx{amp, 0}});
    } else if (spec.rfind("basis:", 0) == 0) {
        const std::uint64_t k = std::stoull(spec.substr(6));
        if (k >= cells) throw std::invalid_argument("address: basis index out of range");
        a.push_back({k, cplx{1, 0}});
    } else {
        throw std::invalid_argument("unknown address spec: " + spec);
    }
    return a;
}

inline std::vector<int> make_memory(const nlohmann::json& spec, int n) {
    const std::size_t cells = std::size_t{1} << unsigned(n);
    std::vector<int> x(cells, 0);
    if (spec.is_string()) {
        const std::string s = spec.get<std::string>();
        if (s == "alternating") {
            for (std::size_t i = 0; i < cells; ++i) x[i] = static_cast<int>(i & 1u);
        } else if (s != "zero") {
            throw std::invalid_argument("unknown memory spec: " + s);
        }
    } else if (spec.is_array()) {
        if (spec.size() != cells)
            throw std::invalid_argument("memory array must match the depth's cell count");
        for (std::size_t i = 0; i < cells; ++i) {
            const int v = spec[i].get<int>();
            if (v != 0 && v != 1) throw std::invalid_argument("memory cells must be bits");
            x[i] = v;
        }
    } else {
        throw std::invalid_argument("memory spec must be a string or a bit array");
    }
    return x;
}

// --- estimators the sweep needs beyond the core runners ---------------------------

// Fidelity under per-trajectory random-phase product backgrounds: each router
// qudit at sqrt(1-p_w)|0> + e^{i phi} sqrt(p_w)|1> with fresh uniform phases.
inline McResult estimate_query_fidelity_phased(const QueryCircuit& qc, const SiteLayout& L,
                                               const NoiseModel& noise,
                                               const std::vector<std::pair<std::uint64_t, cplx>>& addr,
                                               const std::vector<int>& memory, double p_w,
                                               const McOptions& opt) {
    const std::vector<CompiledPlacement> compiled = compile_noise(L, noise);
    const AmpMap target = ideal_query_target(L, addr, memory);
    const std::vector<std::size_t> out_sites = query_output_sites(L);
    return run_trajectories(
        opt.trials, opt.seed, opt.threads, [&](std::uint64_t, std::mt19937_64& rng) {
            SparseState psi = prepare_query_input(L, addr, sample_phased_background(L, p_w, rng));
            run_circuit(qc, psi, memory, [&](SparseState& s, std::size_t) {
                for (const auto& cp : compiled) apply_channel_sampled(s, cp, rng);
            });
            return subsystem_fidelity(psi, out_sites, target);
        });
}

// --- sweep -------------------------------------------------------------------------

struct SweepRow {
    int n = 0;
    int tau = 0;
    double eps = 0;
    std::string variant;
    std::string init;
    std::string twirl;
    std::string noise;
    double mean_f = 0;
    double std_error = 0;
    std::string bound_label;
    double bound = 0;
    bool bound_ok = false;
    std::string circuit_hash;
};

struct SweepResult {
    ExperimentConfig config;
    std::vector<SweepRow> rows;
};

inline std::string hash_hex(const std::string& text) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "0x%016llx",
                  static_cast<unsigned long long>(fnv1a64(text)));
    return buf;
}

inline std::string noise_label(const nlohmann::json& noise) {
    std::vector<std::string> seen;
    if (noise.is_object() && noise.contains("channels"))
        for (const auto& e : noise.at("channels")) {
            const std::string t = e.value("type", std::string("?"));
            if (std::find(seen.begin(), seen.end(), t) == seen.end()) seen.push_back(t);
        }
    if (seen.empty()) return "none";
    std::string out = seen.front();
    for (std::size_t i = 1; i < seen.size(); ++i) out += "+" + seen[i];
    return out;
}

inline InitKind init_kind_for(HarnessInit i) {
    switch (i) {
        case HarnessInit::AllWait: return InitKind::Idle;
        case HarnessInit::AllZero: return InitKind::AllZero;
        case HarnessInit::RandomBasis: return InitKind::RandomBasis;
        case HarnessInit::Supplied: return InitKind::Fixed;
        case HarnessInit::RandomPhase: return InitKind::Idle;  // phased runner overrides
    }
    throw std::logic_error("init_kind_for");
}

inline BasisKey supplied_background_key(const SiteLayout& L, const std::vector<int>& digits) {
    BasisKey k;
    for (int r = 0; r < L.tree.router_count; ++r) {
        k.set_digit(L.control_site(r), static_cast<std::uint8_t>(digits[2 * std::size_t(r)]));
        k.set_digit(L.hold_site(r), static_cast<std::uint8_t>(digits[2 * std::size_t(r) + 1]));
    }
    return k;
}

// One row per depth; per-row seeds derive from the config seed and the row
// index, so the result is reproducible and thread-count independent.
inline SweepResult run_sweep(const ExperimentConfig& cfg) {
    validate_config(cfg);
    SweepResult out{cfg, {}};
    const RouterKind kind = variant_router_kind(cfg.variant);
    const bool coherent = noise_is_coherent(cfg.noise);
    const std::string nlabel = noise_label(cfg.noise);
    for (int n = cfg.n_min; n <= cfg.n_max; ++n) {
        const std::uint64_t row_index = static_cast<std::uint64_t>(n - cfg.n_min);
        const TreeTopology tree = build_tree(n);
        const NoiseModel model = noise_model_from_json(cfg.noise, tree, kind);
        const double eps = max_placement_error_rate(model);
        const auto addr = make_address(cfg.address, n);
        const std::vector<int> memory = make_memory(cfg.memory, n);
        McOptions opt;
        opt.trials = cfg.trials;
        opt.seed = derive_seed(cfg.seed, row_index);
        opt.threads = cfg.threads;
        opt.init = init_kind_for(cfg.init);
        SweepRow row;
        row.n = n;
        row.eps = eps;
        row.variant = variant_name(cfg.variant);
        row.init = harness_init_name(cfg.init);
        row.twirl = twirl_mode_name(cfg.twirl);
        row.noise = nlabel;
        McResult r;
        if (cfg.twirl == TwirlMode::None) {
            const QueryCircuit qc = build_query(n, kind, cfg.schedule, cfg.doubled);
            const SiteLayout L = make_layout(tree, RouterModel{kind}, cfg.doubled);
            if (cfg.init == HarnessInit::Supplied)
                opt.fixed_background = supplied_background_key(L, cfg.background);
            row.tau = qc.tau;
            row.circuit_hash = hash_hex(circuit_to_text(qc));
            r = cfg.init == HarnessInit::RandomPhase
                    ? estimate_query_fidelity_phased(qc, L, model, addr, memory, cfg.p_w, opt)
                    : estimate_query_fidelity(qc, L, model, addr, memory, opt);
        } else if (cfg.twirl == TwirlMode::InSitu) {
            const QueryCircuit single = build_query(n, kind, cfg.schedule, false);
            TwirlFrame probe = sample_twirl_frame(single, derive_seed(cfg.seed, row_index));
            row.tau = dress_circuit(single, probe).tau;
            row.circuit_hash = hash_hex(circuit_to_text(single));
            r = estimate_insitu_twirled_fidelity(single, model, addr, memory, opt);
        } else {
            const QueryCircuit qc = build_query(n, kind, cfg.schedule, true);
            row.tau = qc.tau;
            row.circuit_hash = hash_hex(circuit_to_text(qc));
            r = estimate_edge_twirled_fidelity(n, model, addr, memory, opt, cfg.schedule, kind,
                                               true);
        }
        row.mean_f = r.fidelity;
        row.std_error = r.std_error;
        const BoundChoice bc = select_bound(cfg.variant, is_fiducial_init(cfg.variant, cfg.init),
                                            cfg.twirl, coherent, eps, row.tau, n);
        row.bound_label = bc.label;
        row.bound = bc.value;
        row.bound_ok = (1.0 - row.mean_f) <= bc.value + 3.0 * row.std_error;
        out.rows.push_back(std::move(row));
    }
    return out;
}

// --- result emission ---------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string sweep_to_csv(const SweepResult& r) {
    std::ostringstream out;
    out << "n,tau,eps,variant,init,twirl,noise,mean_f,std_error,bound_label,bound,bound_ok\n";
    for (const auto& w : r.rows)
        out << w.n << ',' << w.tau << ',' << format_double(w.eps) << ',' << w.variant << ','
            << w.init << ',' << w.twirl << ',' << w.noise << ',' << format_double(w.mean_f)
            << ',' << format_double(w.std_error) << ',' << w.bound_label << ','
            << format_double(w.bound) << ',' << (w.bound_ok ? 1 : 0) << '\n';
    return out.str();
}

// Sidecar: the config that produced the CSV, a content hash of the CSV text,
// and one circuit hash per row.
inline nlohmann::json sweep_sidecar(const SweepResult& r, const std::string& csv) {
    nlohmann::json j;
    j["config"] = config_to_json(r.config);
    j["row_count"] = r.rows.size();
    j["csv_hash_fnv1a64"] = hash_hex(csv);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& w : r.rows)
        arr.push_back({{"n", w.n}, {"circuit_hash", w.circuit_hash}});
    j["circuits"] = arr;
    return j;
}

inline void write_sweep_outputs(const SweepResult& r, const std::string& path) {
    const std::string csv = sweep_to_csv(r);
    {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot write " + path);
        f << csv;
    }
    {
        std::ofstream f(path + ".json");
        if (!f) throw std::runtime_error("cannot write " + path + ".json");
        f << sweep_sidecar(r, csv).dump(2) << "\n";
    }
}

// --- scaling fit -------------------------------------------------------------------

struct ScalingFit {
    double exponent = 0;
    double intercept = 0;
    double ci_low = 0;
    double ci_high = 0;
};

// Least-squares slope of log(1-F) against log(n+1). The confidence interval
// is a parametric bootstrap: per-point Normal(F, stderr) resamples, percentile
// 2.5/97.5 of the refit slopes.
inline ScalingFit fit_scaling_exponent(const std::vector<int>& ns,
                                       const std::vector<double>& mean_f,
                                       const std::vector<double>& std_err, int bootstrap = 1000,
                                       std::uint64_t seed = 1) {
    if (ns.size() != mean_f.size() || ns.size() != std_err.size())
        throw std::invalid_argument("fit_scaling_exponent: length mismatch");
    const std::set<int> distinct(ns.begin(), ns.end());
    if (distinct.size() < 3)
        throw std::invalid_argument("fit_scaling_exponent: need at least three distinct depths");
    for (std::size_t i = 0; i < ns.size(); ++i) {
        const double infid = 1.0 - mean_f[i];
        if (!(infid > 0.0))
            throw std::invalid_argument("fit_scaling_exponent: infidelity must be positive");
        if (!(std_err[i] / infid < 0.1))
            throw std::invalid_argument(
                "fit_scaling_exponent: relative error must stay below 10%");
    }
    std::vector<double> x(ns.size());
    for (std::size_t i = 0; i < ns.size(); ++i) x[i] = std::log(ns[i] + 1.0);
    auto slope_of = [&](const std::vector<double>& f, double& intercept) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        const double m = static_cast<double>(f.size());
        for (std::size_t i = 0; i < f.size(); ++i) {
            const double y = std::log(1.0 - f[i]);
            sx += x[i];
            sy += y;
            sxx += x[i] * x[i];
            sxy += x[i] * y;
        }
        const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        intercept = (sy - slope * sx) / m;
        return slope;
    };
    ScalingFit fit;
    fit.exponent = slope_of(mean_f, fit.intercept);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> slopes;
    slopes.reserve(static_cast<std::size_t>(bootstrap));
    std::vector<double> f(ns.size());
    for (int rep = 0; rep < bootstrap; ++rep) {
        for (std::size_t i = 0; i < ns.size(); ++i) {
            double v = mean_f[i] + std_err[i] * gauss(rng);
            // keep the resampled infidelity positive
            f[i] = std::min(v, 1.0 - 1e-300);
        }
        double unused = 0;
        slopes.push_back(slope_of(f, unused));
    }
    std::sort(slopes.begin(), slopes.end());
    const std::size_t last = slopes.size() - 1;
    fit.ci_low = slopes[static_cast<std::size_t>(0.025 * static_cast<double>(last))];
    fit.ci_high = slopes[static_cast<std::size_t>(std::ceil(0.975 * static_cast<double>(last)))];
    return fit;
}

// --- GHZ coherent-vs-stochastic comparison ------------------------------------------

struct GhzRow {
    int n = 0;
    int tau = 0;
    double coherent_infidelity = 0;
    double stochastic_infidelity = 0;
    double stochastic_stderr = 0;
    double bound = 0;  // squared-factor waiting bound, prefactor 4
};

struct GhzComparison {
    double kappa = 0;
    double eps = 0;
    std::vector<GhzRow> rows;
};

// GHZ address on a three-level all-wait tree: uniform e^{i kappa Z} rotations
// on every router qudit versus a Pauli-Z channel of equal rate sin^2(kappa).
// The coherent series is deterministic (single-branch channels), so it runs
// one trajectory per depth.
inline GhzComparison ghz_coherent_experiment(double kappa, int n_min, int n_max,
                                             std::uint64_t trials, std::uint64_t seed,
                                             Schedule sched = Schedule::Serial) {
    const double eps = std::sin(kappa) * std::sin(kappa);
    if (!(eps <= 1e-2))
        throw std::invalid_argument("ghz_coherent_experiment: sin^2(kappa) must not exceed 1e-2");
    if (n_min < 1 || n_max < n_min)
        throw std::invalid_argument("ghz_coherent_experiment: depth range requires 1 <= n_min <= n_max");
    if (trials == 0) throw std::invalid_argument("ghz_coherent_experiment: trials must be positive");
    nlohmann::json coh_entry;
    coh_entry["scope"] = "per_router_qudit";
    coh_entry["type"] = "coherent_phase";
    coh_entry["kappa"] = kappa;
    nlohmann::json sto_entry;
    sto_entry["scope"] = "per_router_qudit";
    sto_entry["type"] = "pauli";
    sto_entry["rates"] = {{"Z", eps}};
    nlohmann::json coh;
    coh["channels"] = nlohmann::json::array({coh_entry});
    nlohmann::json sto;
    sto["channels"] = nlohmann::json::array({sto_entry});
    GhzComparison out;
    out.kappa = kappa;
    out.eps = eps;
    for (int n = n_min; n <= n_max; ++n) {
        const TreeTopology tree = build_tree(n);
        const QueryCircuit qc = build_query(n, RouterKind::ThreeLevel, sched, false);
        const SiteLayout L = make_layout(tree, RouterModel{RouterKind::ThreeLevel}, false);
        const auto addr = make_address("ghz", n);
        const auto memory = make_memory("alternating", n);
        GhzRow row;
        row.n = n;
        row.tau = qc.tau;
        row.bound = bound_coherent(eps, qc.tau, n, 4.0);
        McOptions copt;
        copt.trials = 1;
        copt.seed = derive_seed(seed, static_cast<std::uint64_t>(2 * n));
        copt.threads = 1;
        const NoiseModel cm = noise_model_from_json(coh, tree, RouterKind::ThreeLevel);
        row.coherent_infidelity =
            1.0 - estimate_query_fidelity(qc, L, cm, addr, memory, copt).fidelity;
        McOptions sopt;
        sopt.trials = trials;
        sopt.seed = derive_seed(seed, static_cast<std::uint64_t>(2 * n + 1));
        sopt.threads = 0;
        const NoiseModel sm = noise_model_from_json(sto, tree, RouterKind::ThreeLevel);
        const McResult sr = estimate_query_fidelity(qc, L, sm, addr, memory, sopt);
        row.stochastic_infidelity = 1.0 - sr.fidelity;
        row.stochastic_stderr = sr.std_error;
        out.rows.push_back(row);
    }
    return out;
}

// --- oracle cross-check --------------------------------------------------------------

struct OracleReport {
    double mc_fidelity = 0;
    double mc_std_error = 0;
    double chi_fidelity = 0;
    double density_fidelity = 0;
    double mc_deviation_sigmas = 0;  // |mc - chi| in stderr units
    double cross_deviation = 0;      // |chi - density|
    bool agree = false;
};

// Checks the sampled estimator against both exact oracles on one fixed basis
// background: branch enumeration and full density evolution.
inline OracleReport verify_oracles(const QueryCircuit& qc, const SiteLayout& L,
                                   const NoiseModel& noise,
                                   const std::vector<std::pair<std::uint64_t, cplx>>& addr,
                                   const std::vector<int>& memory, const McOptions& base,
                                   const BasisKey& background = BasisKey{}) {
    McOptions opt = base;
    opt.init = InitKind::Fixed;
    opt.fixed_background = background;
    OracleReport rep;
    const McResult mc = estimate_query_fidelity(qc, L, noise, addr, memory, opt);
    rep.mc_fidelity = mc.fidelity;
    rep.mc_std_error = mc.std_error;
    rep.chi_fidelity = exhaustive_chi_fidelity(qc, L, noise, addr, memory, background);
    SparseDensity rho = density_from_pure(prepare_query_input(L, addr, background));
    rho = run_density(qc, std::move(rho), memory, noise);
    rep.density_fidelity =
        density_subsystem_fidelity(rho, query_output_sites(L), ideal_query_target(L, addr, memory));
    rep.mc_deviation_sigmas =
        std::abs(mc.fidelity - rep.chi_fidelity) / std::max(mc.std_error, 1e-15);
    rep.cross_deviation = std::abs(rep.chi_fidelity - rep.density_fidelity);
    rep.agree = rep.mc_deviation_sigmas <= 3.0 && rep.cross_deviation <= 1e-10;
    return rep;
}

// --- paired twirl comparison ----------------------------------------------------------

struct TwirlCompareRow {
    std::string twirl;
    int tau = 0;
    double eps = 0;
    double mean_f = 0;
    double std_error = 0;
    std::string bound_label;
    double bound = 0;
    bool bound_ok = false;
};

// Untwirled doubled query versus both twirl protocols under one noise model
// (two-level routers, fiducial background).
inline std::vector<TwirlCompareRow> twirl_compare(int n, const nlohmann::json& noise,
                                                  const std::string& address,
                                                  const nlohmann::json& memory_spec,
                                                  std::uint64_t trials, std::uint64_t seed,
                                                  Schedule sched = Schedule::Serial) {
    const TreeTopology tree = build_tree(n);
    const NoiseModel model = noise_model_from_json(noise, tree, RouterKind::TwoLevel);
    const double eps = max_placement_error_rate(model);
    const bool coherent = noise_is_coherent(noise);
    const auto addr = make_address(address, n);
    const auto memory = make_memory(memory_spec, n);
    std::vector<TwirlCompareRow> rows;
    auto push = [&](TwirlMode mode, int tau, const McResult& r) {
        TwirlCompareRow w;
        w.twirl = twirl_mode_name(mode);
        w.tau = tau;
        w.eps = eps;
        w.mean_f = r.fidelity;
        w.std_error = r.std_error;
        const BoundChoice bc =
            select_bound(Variant::TwoLevel, true, mode, coherent, eps, tau, n);
        w.bound_label = bc.label;
        w.bound = bc.value;
        w.bound_ok = (1.0 - w.mean_f) <= bc.value + 3.0 * w.std_error;
        rows.push_back(std::move(w));
    };
    {
        const QueryCircuit qc = build_query(n, RouterKind::TwoLevel, sched, true);
        const SiteLayout L = make_layout(tree, RouterModel{RouterKind::TwoLevel}, true);
        McOptions opt;
        opt.trials = trials;
        opt.seed = derive_seed(seed, 0);
        push(TwirlMode::None, qc.tau, estimate_query_fidelity(qc, L, model, addr, memory, opt));
    }
    {
        const QueryCircuit single = build_query(n, RouterKind::TwoLevel, sched, false);
        TwirlFrame probe = sample_twirl_frame(single, derive_seed(seed, 100));
        const int tau = dress_circuit(single, probe).tau;
        McOptions opt;
        opt.trials = trials;
        opt.seed = derive_seed(seed, 1);
        push(TwirlMode::InSitu, tau,
             estimate_insitu_twirled_fidelity(single, model, addr, memory, opt));
    }
    {
        const QueryCircuit qc = build_query(n, RouterKind::TwoLevel, sched, true);
        McOptions opt;
        opt.trials = trials;
        opt.seed = derive_seed(seed, 2);
        push(TwirlMode::EdgeClassical, qc.tau,
             estimate_edge_twirled_fidelity(n, model, addr, memory, opt, sched,
                                            RouterKind::TwoLevel, true));
    }
    return rows;
}

}  // namespace qram
