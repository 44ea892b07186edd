// Command-line front end: single runs, depth sweeps, twirl comparisons,
// oracle cross-checks, and correlated-noise graining reports. Every command
// reads an experiment config (JSON) and honours --seed/--trials/--out
// overrides so runs stay reproducible from the shell.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "qram/harness.hpp"

namespace {

using namespace qram;

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> trials;
    std::optional<std::string> out;
};

void add_common(CLI::App* sub, CommonArgs& a) {
    sub->add_option("--config", a.config_path, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", a.seed, "override the config seed");
    sub->add_option("--trials", a.trials, "override the config trial count");
    sub->add_option("--out", a.out, "override the config output path");
}

ExperimentConfig load_config(const CommonArgs& a) {
    std::ifstream f(a.config_path);
    if (!f) throw std::runtime_error("cannot open config: " + a.config_path);
    nlohmann::json j;
    f >> j;
    ExperimentConfig c = config_from_json(j);
    if (a.seed) c.seed = *a.seed;
    if (a.trials) c.trials = *a.trials;
    if (a.out) c.out = *a.out;
    return c;
}

void print_rows(const SweepResult& r) {
    for (const auto& row : r.rows) {
        std::printf("n=%d tau=%d eps=%g %s/%s/%s noise=%s\n", row.n, row.tau, row.eps,
                    row.variant.c_str(), row.init.c_str(), row.twirl.c_str(), row.noise.c_str());
        std::printf("  mean_f=%.6f +- %.6f   1-F=%.3e   bound[%s]=%.3e   %s\n", row.mean_f,
                    row.std_error, 1.0 - row.mean_f, row.bound_label.c_str(), row.bound,
                    row.bound_ok ? "ok" : "VIOLATED");
    }
}

int cmd_query(const CommonArgs& a) {
    ExperimentConfig c = load_config(a);
    c.n_max = c.n_min;  // single run: first grid point only
    const SweepResult r = run_sweep(c);
    print_rows(r);
    if (!c.out.empty()) {
        write_sweep_outputs(r, c.out);
        std::printf("wrote %s and %s.json\n", c.out.c_str(), c.out.c_str());
    }
    return 0;
}

int cmd_sweep(const CommonArgs& a, bool enforce) {
    const ExperimentConfig c = load_config(a);
    const SweepResult r = run_sweep(c);
    if (c.out.empty()) {
        std::fputs(sweep_to_csv(r).c_str(), stdout);
    } else {
        write_sweep_outputs(r, c.out);
        std::printf("wrote %s and %s.json\n", c.out.c_str(), c.out.c_str());
    }
    bool violated = false;
    for (const auto& row : r.rows)
        if (!row.bound_ok) {
            violated = true;
            std::fprintf(stderr, "bound violated at n=%d: 1-F=%.6e > %s=%.6e + 3*stderr\n", row.n,
                         1.0 - row.mean_f, row.bound_label.c_str(), row.bound);
        }
    return (enforce && violated) ? 1 : 0;
}

int cmd_twirl_compare(const CommonArgs& a) {
    const ExperimentConfig c = load_config(a);
    const auto rows =
        twirl_compare(c.n_min, c.noise, c.address, c.memory, c.trials, c.seed, c.schedule);
    std::ostringstream csv;
    csv << "twirl,tau,eps,mean_f,std_error,bound_label,bound,bound_ok\n";
    for (const auto& w : rows) {
        std::printf("%-14s tau=%d  mean_f=%.6f +- %.6f  1-F=%.3e  bound[%s]=%.3e  %s\n",
                    w.twirl.c_str(), w.tau, w.mean_f, w.std_error, 1.0 - w.mean_f,
                    w.bound_label.c_str(), w.bound, w.bound_ok ? "ok" : "VIOLATED");
        csv << w.twirl << ',' << w.tau << ',' << format_double(w.eps) << ','
            << format_double(w.mean_f) << ',' << format_double(w.std_error) << ','
            << w.bound_label << ',' << format_double(w.bound) << ',' << (w.bound_ok ? 1 : 0)
            << '\n';
    }
    if (!c.out.empty()) {
        std::ofstream f(c.out);
        f << csv.str();
        std::printf("wrote %s\n", c.out.c_str());
    }
    return 0;
}

int cmd_verify(const CommonArgs& a) {
    const ExperimentConfig c = load_config(a);
    validate_config(c);
    const int n = c.n_min;
    const TreeTopology tree = build_tree(n);
    const RouterKind kind = variant_router_kind(c.variant);
    const QueryCircuit qc = build_query(n, kind, c.schedule, c.doubled);
    const SiteLayout L = make_layout(tree, RouterModel{kind}, c.doubled);
    const NoiseModel m = noise_model_from_json(c.noise, tree, kind);
    McOptions opt;
    opt.trials = c.trials;
    opt.seed = c.seed;
    opt.threads = c.threads;
    const OracleReport rep = verify_oracles(qc, L, m, make_address(c.address, n),
                                            make_memory(c.memory, n), opt, idle_background(L));
    std::printf("monte_carlo  F=%.8f +- %.2e\n", rep.mc_fidelity, rep.mc_std_error);
    std::printf("chi_matrix   F=%.8f\n", rep.chi_fidelity);
    std::printf("density      F=%.8f\n", rep.density_fidelity);
    std::printf("mc deviation: %.2f sigma   chi-density deviation: %.2e\n",
                rep.mc_deviation_sigmas, rep.cross_deviation);
    std::printf("%s\n", rep.agree ? "oracles agree" : "ORACLES DISAGREE");
    return rep.agree ? 0 : 1;
}

int cmd_grain(const CommonArgs& a) {
    const ExperimentConfig c = load_config(a);
    const int n = c.n_min;
    const TreeTopology tree = build_tree(n);
    const NoiseModel m = noise_model_from_json(c.noise, tree, variant_router_kind(c.variant));
    const GrainAccounting acc = grain_accounting(tree, m);
    nlohmann::json report;
    report["assignments"] = nlohmann::json::array();
    for (const auto& g : acc.assigned) {
        const auto& p = m.placements[g.placement];
        std::printf("%-28s -> d=%d u=%d super=%d  eps=%g\n", p.name.c_str(), g.d, g.u,
                    g.super_index, g.eps);
        report["assignments"].push_back({{"placement", p.name},
                                         {"d", g.d},
                                         {"u", g.u},
                                         {"super_index", g.super_index},
                                         {"eps", g.eps}});
    }
    report["unassignable"] = nlohmann::json::array();
    for (std::size_t i : acc.unassignable) {
        std::printf("%-28s -> unassignable (off-tree or split support)\n",
                    m.placements[i].name.c_str());
        report["unassignable"].push_back(m.placements[i].name);
    }
    report["eps_by_d"] = nlohmann::json::object();
    for (const auto& [d, eps] : acc.eps_by_d) {
        std::printf("eps_%d = %g\n", d, eps);
        report["eps_by_d"][std::to_string(d)] = eps;
    }
    if (!c.out.empty()) {
        std::ofstream f(c.out);
        f << report.dump(2) << "\n";
        std::printf("wrote %s\n", c.out.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"noisy bucket-brigade quantum RAM simulator"};
    app.require_subcommand(1);

    CommonArgs qa, sa, ta, va, ga;
    bool enforce = false;

    CLI::App* query = app.add_subcommand("query", "run one configuration and report fidelity");
    add_common(query, qa);
    CLI::App* sweep = app.add_subcommand("sweep", "run a depth grid, write CSV + JSON sidecar");
    add_common(sweep, sa);
    sweep->add_flag("--enforce", enforce, "exit nonzero if any row violates its bound");
    CLI::App* twirl =
        app.add_subcommand("twirl-compare", "untwirled vs in-situ vs edge twirling at one depth");
    add_common(twirl, ta);
    CLI::App* verify =
        app.add_subcommand("verify", "cross-check Monte Carlo against the exact oracles");
    add_common(verify, va);
    CLI::App* grain =
        app.add_subcommand("grain", "correlated-noise graining assignments and rates");
    add_common(grain, ga);

    CLI11_PARSE(app, argc, argv);
    try {
        if (query->parsed()) return cmd_query(qa);
        if (sweep->parsed()) return cmd_sweep(sa, enforce);
        if (twirl->parsed()) return cmd_twirl_compare(ta);
        if (verify->parsed()) return cmd_verify(va);
        if (grain->parsed()) return cmd_grain(ga);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
