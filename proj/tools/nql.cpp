// nql: command-line driver for runs, sweeps, probes, oracles and plots.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nql/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitPartial = 3;

struct CommonFlags {
    std::string config;
    std::string out;
    std::optional<std::uint64_t> seed;
};

struct ConfigLoadFailed {
    std::string message;
};

nql::ExperimentConfig load(const CommonFlags& f) {
    try {
        nql::ExperimentConfig cfg = nql::load_config(f.config);
        if (f.seed) nql::override_seed(cfg, *f.seed);
        if (!f.out.empty()) cfg.output_dir = f.out;
        return cfg;
    } catch (const std::exception& e) {
        throw ConfigLoadFailed{e.what()};
    }
}

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", f.config, "experiment config (JSON)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    cmd->add_option("--out", f.out, "output directory (overrides output_dir)");
    cmd->add_option("--seed", f.seed, "override the run seed");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Projected neural Q-learning laboratory"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(nql::kArtifactVersion));

    CommonFlags gen_f, run_f, sweep_f, diag_f, oracle_f, plot_f;

    auto* gen = app.add_subcommand("gen-mdp", "write a seeded random MDP file");
    std::size_t gen_states = 5, gen_actions = 2;
    double gen_gamma = 0.9;
    std::string gen_name = "mdp.json";
    gen->add_option("--states", gen_states, "number of states")->check(CLI::PositiveNumber);
    gen->add_option("--actions", gen_actions, "number of actions")->check(CLI::PositiveNumber);
    gen->add_option("--gamma", gen_gamma, "discount factor in (0,1)");
    gen->add_option("--name", gen_name, "file name inside --out");
    add_common(gen, gen_f, false);

    auto* run = app.add_subcommand("run", "train once with the run section of the config");
    add_common(run, run_f);

    auto* sweep = app.add_subcommand("sweep", "train every cell of the sweep grid");
    std::optional<std::size_t> workers;
    add_common(sweep, sweep_f);
    sweep->add_option("--workers", workers, "parallel workers")->check(CLI::PositiveNumber);

    auto* diag = app.add_subcommand("diagnose", "sigma, regularity, mixing, linearization, bias and gap probes");
    std::vector<std::string> probes;
    add_common(diag, diag_f);
    diag->add_option("--probe", probes, "restrict to these probes")->check(CLI::IsMember(nql::all_probe_names()));

    auto* oracle = app.add_subcommand("oracle", "value iteration and stationary distribution");
    double tol = 1e-10;
    add_common(oracle, oracle_f);
    oracle->add_option("--tol", tol, "value iteration tolerance");

    auto* plot = app.add_subcommand("plot", "render SVG plots from a run, aggregate or probe CSV");
    std::string input;
    std::vector<std::string> kinds;
    plot->add_option("--input", input, "CSV to plot")->required()->check(CLI::ExistingFile);
    plot->add_option("--kind", kinds, "plot kind (q_gap, td_err, lin_gap, final_gap_vs_m, probe_vs_m)");
    plot->add_option("--out", plot_f.out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*gen) {
            const std::uint64_t seed = gen_f.seed.value_or(0);
            const nql::MdpSpec mdp = nql::random_mdp(gen_states, gen_actions, gen_gamma, seed);
            const nql::fs::path path = nql::fs::path(gen_f.out.empty() ? "." : gen_f.out) / gen_name;
            nql::save_mdp(path, mdp);
            std::cout << "wrote " << path.string() << " (" << gen_states << " states, " << gen_actions
                      << " actions, seed " << seed << ")\n";
            return kExitOk;
        }

        if (*run) {
            const nql::ExperimentConfig cfg = load(run_f);
            const auto out = nql::run_single(cfg, cfg.output_dir);
            const nql::GapTrend trend = nql::gap_trend(out.record);
            std::cout << "run " << nql::config_hash(cfg) << ": eta=" << nql::format_double(out.record.eta)
                      << " omega=" << nql::format_double(out.record.omega) << " q_gap_sq first10%="
                      << nql::format_double(trend.head) << " last10%=" << nql::format_double(trend.tail) << "\n"
                      << "wrote " << out.csv.string() << "\n";
            return kExitOk;
        }

        if (*sweep) {
            nql::ExperimentConfig cfg = load(sweep_f);
            if (workers) cfg.workers = *workers;
            const auto res = nql::run_sweep(cfg, cfg.output_dir, cfg.workers);
            std::cout << "sweep " << res.config_hash << ": " << res.cells.size() << " cells, " << res.failed()
                      << " failed\nwrote " << res.aggregate.string() << "\n";
            for (const auto& c : res.cells)
                if (!c.ok) std::cerr << nql::cell_name(c.cell.index) << " " << c.status << ": " << c.message << "\n";
            return res.failed() ? kExitPartial : kExitOk;
        }

        if (*diag) {
            nql::ExperimentConfig cfg = load(diag_f);
            if (!probes.empty()) cfg.diagnostics.probes = probes;
            const auto res = nql::run_diagnostics(cfg, cfg.output_dir);
            for (const auto& line : res.lines) std::cout << line << "\n";
            nql::write_probe_summary(std::cout, res.report);
            return kExitOk;
        }

        if (*oracle) {
            const nql::ExperimentConfig cfg = load(oracle_f);
            const auto vi = nql::run_oracle(cfg, cfg.output_dir, tol);
            std::cout << "value iteration: " << vi.iterations << " iterations, residual "
                      << nql::format_double(vi.residual) << "\n"
                      << vi.q << "\n";
            return kExitOk;
        }

        if (*plot) {
            const auto files = nql::emit_plots(input, plot_f.out.empty() ? "." : plot_f.out, kinds);
            for (const auto& f : files) std::cout << "wrote " << f.string() << "\n";
            return kExitOk;
        }
    } catch (const ConfigLoadFailed& e) {
        std::cerr << "config error: " << e.message << "\n";
        return kExitConfig;
    } catch (const nql::Error& e) {
        std::cerr << "error [" << nql::to_string(e.kind()) << "]: " << e.what() << "\n";
        return nql::is_config_error(e.kind()) ? kExitConfig : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitRuntime;
}
