#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "nql/diagnostics.hpp"
#include "nql/error.hpp"
#include "nql/mdp.hpp"
#include "nql/neural_q.hpp"
#include "nql/relu_net.hpp"

namespace nql {

inline constexpr const char* kArtifactVersion = "0.1.0";

using Json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<std::size_t, std::size_t> line_column(const std::string& text, std::size_t byte) {
    std::size_t line = 1, col = 1;
    const std::size_t end = std::min(byte > 0 ? byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < end; ++i) {
        if (text[i] == '\n') {
            ++line;
            col = 1;
        } else {
            ++col;
        }
    }
    return {line, col};
}

inline void allow_keys(const Json& obj, std::initializer_list<const char*> keys, const std::string& where) {
    if (!obj.is_object()) fail(ErrorKind::SchemaMismatch, where + " must be an object");
    for (const auto& item : obj.items()) {
        const bool known = std::any_of(keys.begin(), keys.end(), [&](const char* k) { return item.key() == k; });
        if (!known) fail(ErrorKind::UnknownKey, "unknown key '" + item.key() + "' in " + where);
    }
}

template <class T>
T get_as(const Json& v, const std::string& where) {
    try {
        if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
            if (v.is_number_integer() && v.get<long long>() < 0) fail(ErrorKind::SchemaMismatch, where + " must be non-negative");
            if (!v.is_number_integer()) fail(ErrorKind::SchemaMismatch, where + " must be an integer");
        }
        return v.get<T>();
    } catch (const Json::exception& e) {
        fail(ErrorKind::SchemaMismatch, where + ": " + e.what());
    }
}

template <class T>
T get_or(const Json& obj, const char* key, T fallback, const std::string& where) {
    const auto it = obj.find(key);
    return it == obj.end() ? fallback : get_as<T>(*it, where + "." + key);
}

template <class T>
T require(const Json& obj, const char* key, const std::string& where) {
    const auto it = obj.find(key);
    if (it == obj.end()) fail(ErrorKind::MissingRequired, "missing required key '" + std::string(key) + "' in " + where);
    return get_as<T>(*it, where + "." + key);
}

template <class T>
std::vector<T> get_list(const Json& obj, const char* key, const std::string& where) {
    const auto it = obj.find(key);
    if (it == obj.end()) return {};
    if (!it->is_array()) fail(ErrorKind::SchemaMismatch, where + "." + key + " must be a list");
    std::vector<T> out;
    for (std::size_t i = 0; i < it->size(); ++i)
        out.push_back(get_as<T>((*it)[i], where + "." + key + "[" + std::to_string(i) + "]"));
    return out;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

inline std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace detail

/// Parses JSON text; syntax errors carry line and column.
inline Json parse_json(const std::string& text, const std::string& origin) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        const auto [line, col] = detail::line_column(text, e.byte);
        fail(ErrorKind::ParseError, origin + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// MDP file
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_one_hot(const MdpSpec& mdp) {
    if (mdp.feature_dim() != mdp.n_pairs()) return false;
    for (std::size_t k = 0; k < mdp.n_pairs(); ++k) {
        const Vector& f = mdp.features()[k];
        for (Eigen::Index j = 0; j < f.size(); ++j)
            if (f[j] != (static_cast<std::size_t>(j) == k ? 1.0 : 0.0)) return false;
    }
    return true;
}

} // namespace detail

/// Transition entries are ordered (s, a, s'), rewards and features (s, a).
inline Json mdp_to_json(const MdpSpec& mdp) {
    const MdpInput in = mdp.to_input();
    Json j;
    j["n_states"] = in.n_states;
    j["n_actions"] = in.n_actions;
    j["gamma"] = in.gamma;
    j["transition"] = in.transition;
    j["reward"] = in.reward;
    if (!detail::is_one_hot(mdp)) {
        j["feature_dim"] = in.feature_dim;
        j["features"] = in.features;
    }
    const Vector uniform = Vector::Constant(static_cast<Eigen::Index>(in.n_states), 1.0 / static_cast<double>(in.n_states));
    if (mdp.initial() != uniform) j["initial"] = in.initial;
    return j;
}

inline MdpSpec mdp_from_json(const Json& j, const std::string& where = "mdp file") {
    detail::allow_keys(j, {"n_states", "n_actions", "gamma", "transition", "reward", "feature_dim", "features", "initial"}, where);
    MdpInput in;
    in.n_states = detail::require<std::size_t>(j, "n_states", where);
    in.n_actions = detail::require<std::size_t>(j, "n_actions", where);
    in.gamma = detail::require<double>(j, "gamma", where);
    if (!j.contains("transition")) fail(ErrorKind::MissingRequired, "missing required key 'transition' in " + where);
    if (!j.contains("reward")) fail(ErrorKind::MissingRequired, "missing required key 'reward' in " + where);
    in.transition = detail::get_list<double>(j, "transition", where);
    in.reward = detail::get_list<double>(j, "reward", where);
    in.features = detail::get_list<double>(j, "features", where);
    in.feature_dim = detail::get_or<std::size_t>(j, "feature_dim", 0, where);
    if (!in.features.empty() && in.feature_dim == 0) fail(ErrorKind::MissingRequired, "features need feature_dim in " + where);
    in.initial = detail::get_list<double>(j, "initial", where);
    return build_mdp(std::move(in));
}

inline void save_mdp(const fs::path& path, const MdpSpec& mdp) { detail::write_file(path, mdp_to_json(mdp).dump(2) + "\n"); }

inline MdpSpec load_mdp(const fs::path& path) {
    return mdp_from_json(parse_json(detail::read_file(path), path.string()), path.string());
}

// ---------------------------------------------------------------------------
// Experiment config
// ---------------------------------------------------------------------------

struct MdpSource {
    std::optional<std::string> file; // absolute after resolution
    std::size_t n_states = 0;
    std::size_t n_actions = 0;
    double gamma = 0.9;
    std::uint64_t seed = 0;
};

struct PolicyConfig {
    PolicyKind kind = PolicyKind::Uniform;
    double epsilon = 0.1;
    std::vector<std::vector<double>> probabilities;
};

/// Axes of the sweep grid. Empty axes take the run value; an empty gamma
/// axis keeps the MDP's discount.
struct SweepGrid {
    std::vector<std::size_t> width, depth, horizon;
    std::vector<double> omega_coeff, beta, gamma;
    std::vector<std::uint64_t> seed;
};

inline const std::vector<std::string>& all_probe_names() {
    static const std::vector<std::string> names{"sigma", "regularity", "mixing", "linearization", "bias", "gap"};
    return names;
}

struct DiagnosticsConfig {
    std::vector<std::string> probes = all_probe_names();
    std::vector<std::size_t> widths{64, 256, 1024};
    std::size_t depth = 2;
    std::size_t n_seeds = 20;
    double omega_coeff = 1.0;
    std::size_t mixing_horizon = 200;
    std::size_t bias_window = 100;
    std::string bias_reference = "initial";
    std::size_t gap_pairs = 100;
    double safety_fraction = 0.95;
};

struct ExperimentConfig {
    MdpSource mdp;
    PolicyConfig policy;
    RunConfig run;
    SweepGrid sweep;
    DiagnosticsConfig diagnostics;
    std::string output_dir = "out";
    std::size_t workers = 1;
    bool save_theta = false;
    std::string mdp_digest; // content hash of the MDP file, when one is used
};

inline PolicyKind parse_policy_kind(const std::string& name) {
    if (name == "uniform") return PolicyKind::Uniform;
    if (name == "fixed") return PolicyKind::FixedStochastic;
    if (name == "epsilon_greedy") return PolicyKind::EpsilonGreedy;
    fail(ErrorKind::SchemaMismatch, "unknown policy kind '" + name + "'");
}

inline std::string policy_kind_name(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::Uniform: return "uniform";
    case PolicyKind::FixedStochastic: return "fixed";
    case PolicyKind::EpsilonGreedy: return "epsilon_greedy";
    }
    return "uniform";
}

namespace detail {

inline RunConfig parse_run(const Json& j, const std::string& where) {
    allow_keys(j, {"width", "depth", "horizon", "omega_coeff", "beta", "step_rule", "eta", "gamma", "seed", "log_every",
                   "burn_in", "sampler", "max_params"},
               where);
    RunConfig c;
    c.width = get_or(j, "width", c.width, where);
    c.depth = get_or(j, "depth", c.depth, where);
    c.horizon = get_or(j, "horizon", c.horizon, where);
    c.omega_coeff = get_or(j, "omega_coeff", c.omega_coeff, where);
    c.beta = get_or(j, "beta", c.beta, where);
    try {
        c.step_rule = parse_step_rule(get_or<std::string>(j, "step_rule", to_string(c.step_rule), where));
        c.sampler = parse_sampler_mode(get_or<std::string>(j, "sampler", to_string(c.sampler), where));
    } catch (const Error& e) {
        fail(ErrorKind::SchemaMismatch, where + ": " + e.what());
    }
    c.eta = get_or(j, "eta", c.eta, where);
    if (j.contains("gamma") && !j.at("gamma").is_null()) c.gamma = get_as<double>(j.at("gamma"), where + ".gamma");
    c.seed = get_or(j, "seed", c.seed, where);
    c.log_every = get_or(j, "log_every", c.log_every, where);
    c.burn_in = get_or(j, "burn_in", c.burn_in, where);
    c.max_params = get_or(j, "max_params", c.max_params, where);
    return c;
}

inline Json run_to_json(const RunConfig& c) {
    Json j;
    j["width"] = c.width;
    j["depth"] = c.depth;
    j["horizon"] = c.horizon;
    j["omega_coeff"] = c.omega_coeff;
    j["beta"] = c.beta;
    j["step_rule"] = to_string(c.step_rule);
    j["eta"] = c.eta;
    j["gamma"] = c.gamma ? Json(*c.gamma) : Json(nullptr);
    j["seed"] = c.seed;
    j["log_every"] = c.log_every;
    j["burn_in"] = c.burn_in;
    j["sampler"] = to_string(c.sampler);
    j["max_params"] = c.max_params;
    return j;
}

} // namespace detail

/// Builds a resolved config from parsed JSON. Relative MDP paths resolve against `base_dir`.
inline ExperimentConfig config_from_json(const Json& j, const fs::path& base_dir = fs::current_path()) {
    using namespace detail;
    allow_keys(j, {"mdp", "policy", "run", "sweep", "diagnostics", "output_dir", "workers", "save_theta"}, "config");
    ExperimentConfig cfg;

    if (!j.contains("mdp")) fail(ErrorKind::MissingRequired, "missing required key 'mdp' in config");
    const Json& m = j.at("mdp");
    allow_keys(m, {"file", "generate"}, "mdp");
    if (m.contains("file") == m.contains("generate"))
        fail(ErrorKind::MissingRequired, "mdp needs exactly one of 'file' or 'generate'");
    if (m.contains("file")) {
        fs::path p = get_as<std::string>(m.at("file"), "mdp.file");
        if (p.is_relative()) p = base_dir / p;
        p = p.lexically_normal();
        cfg.mdp.file = p.string();
        cfg.mdp_digest = hex64(fnv1a(mdp_to_json(load_mdp(p)).dump()));
    } else {
        const Json& g = m.at("generate");
        allow_keys(g, {"n_states", "n_actions", "gamma", "seed"}, "mdp.generate");
        cfg.mdp.n_states = require<std::size_t>(g, "n_states", "mdp.generate");
        cfg.mdp.n_actions = require<std::size_t>(g, "n_actions", "mdp.generate");
        cfg.mdp.gamma = get_or(g, "gamma", cfg.mdp.gamma, "mdp.generate");
        cfg.mdp.seed = get_or(g, "seed", cfg.mdp.seed, "mdp.generate");
        if (cfg.mdp.n_states < 1 || cfg.mdp.n_actions < 1)
            fail(ErrorKind::SchemaMismatch, "mdp.generate needs at least one state and one action");
    }

    if (j.contains("policy")) {
        const Json& p = j.at("policy");
        allow_keys(p, {"kind", "epsilon", "probabilities"}, "policy");
        cfg.policy.kind = parse_policy_kind(get_or<std::string>(p, "kind", "uniform", "policy"));
        cfg.policy.epsilon = get_or(p, "epsilon", cfg.policy.epsilon, "policy");
        if (cfg.policy.kind == PolicyKind::FixedStochastic) {
            if (!p.contains("probabilities")) fail(ErrorKind::MissingRequired, "fixed policy needs 'probabilities'");
            cfg.policy.probabilities = get_as<std::vector<std::vector<double>>>(p.at("probabilities"), "policy.probabilities");
        }
    }

    if (j.contains("run")) cfg.run = parse_run(j.at("run"), "run");
    cfg.run.validate();

    if (j.contains("sweep")) {
        const Json& s = j.at("sweep");
        allow_keys(s, {"width", "depth", "horizon", "omega_coeff", "beta", "gamma", "seed"}, "sweep");
        cfg.sweep.width = get_list<std::size_t>(s, "width", "sweep");
        cfg.sweep.depth = get_list<std::size_t>(s, "depth", "sweep");
        cfg.sweep.horizon = get_list<std::size_t>(s, "horizon", "sweep");
        cfg.sweep.omega_coeff = get_list<double>(s, "omega_coeff", "sweep");
        cfg.sweep.beta = get_list<double>(s, "beta", "sweep");
        cfg.sweep.gamma = get_list<double>(s, "gamma", "sweep");
        cfg.sweep.seed = get_list<std::uint64_t>(s, "seed", "sweep");
    }
    if (cfg.sweep.width.empty()) cfg.sweep.width = {cfg.run.width};
    if (cfg.sweep.depth.empty()) cfg.sweep.depth = {cfg.run.depth};
    if (cfg.sweep.horizon.empty()) cfg.sweep.horizon = {cfg.run.horizon};
    if (cfg.sweep.omega_coeff.empty()) cfg.sweep.omega_coeff = {cfg.run.omega_coeff};
    if (cfg.sweep.beta.empty()) cfg.sweep.beta = {cfg.run.beta};
    if (cfg.sweep.gamma.empty() && cfg.run.gamma) cfg.sweep.gamma = {*cfg.run.gamma};
    if (cfg.sweep.seed.empty()) cfg.sweep.seed = {cfg.run.seed};

    if (j.contains("diagnostics")) {
        const Json& d = j.at("diagnostics");
        auto& dc = cfg.diagnostics;
        allow_keys(d, {"probes", "widths", "depth", "n_seeds", "omega_coeff", "mixing_horizon", "bias_window",
                       "bias_reference", "gap_pairs", "safety_fraction"},
                   "diagnostics");
        if (d.contains("probes")) dc.probes = get_list<std::string>(d, "probes", "diagnostics");
        for (const auto& p : dc.probes)
            if (std::find(all_probe_names().begin(), all_probe_names().end(), p) == all_probe_names().end())
                fail(ErrorKind::SchemaMismatch, "unknown probe '" + p + "'");
        if (d.contains("widths")) dc.widths = get_list<std::size_t>(d, "widths", "diagnostics");
        dc.depth = get_or(d, "depth", dc.depth, "diagnostics");
        dc.n_seeds = get_or(d, "n_seeds", dc.n_seeds, "diagnostics");
        dc.omega_coeff = get_or(d, "omega_coeff", dc.omega_coeff, "diagnostics");
        dc.mixing_horizon = get_or(d, "mixing_horizon", dc.mixing_horizon, "diagnostics");
        dc.bias_window = get_or(d, "bias_window", dc.bias_window, "diagnostics");
        dc.bias_reference = get_or<std::string>(d, "bias_reference", dc.bias_reference, "diagnostics");
        if (dc.bias_reference != "initial" && dc.bias_reference != "current")
            fail(ErrorKind::SchemaMismatch, "diagnostics.bias_reference must be 'initial' or 'current'");
        dc.gap_pairs = get_or(d, "gap_pairs", dc.gap_pairs, "diagnostics");
        dc.safety_fraction = get_or(d, "safety_fraction", dc.safety_fraction, "diagnostics");
    }

    cfg.output_dir = get_or<std::string>(j, "output_dir", cfg.output_dir, "config");
    cfg.workers = get_or(j, "workers", cfg.workers, "config");
    if (cfg.workers < 1) fail(ErrorKind::SchemaMismatch, "workers must be at least 1");
    cfg.save_theta = get_or(j, "save_theta", cfg.save_theta, "config");
    return cfg;
}

inline ExperimentConfig load_config(const fs::path& path) {
    const std::string text = detail::read_file(path);
    const fs::path base = path.has_parent_path() ? fs::absolute(path).parent_path() : fs::current_path();
    return config_from_json(parse_json(text, path.string()), base);
}

/// Fully resolved config with every default spelled out.
inline Json config_to_json(const ExperimentConfig& cfg) {
    Json j;
    if (cfg.mdp.file) {
        j["mdp"]["file"] = *cfg.mdp.file;
    } else {
        j["mdp"]["generate"] = {{"n_states", cfg.mdp.n_states},
                                {"n_actions", cfg.mdp.n_actions},
                                {"gamma", cfg.mdp.gamma},
                                {"seed", cfg.mdp.seed}};
    }
    j["policy"]["kind"] = policy_kind_name(cfg.policy.kind);
    if (cfg.policy.kind == PolicyKind::EpsilonGreedy) j["policy"]["epsilon"] = cfg.policy.epsilon;
    if (cfg.policy.kind == PolicyKind::FixedStochastic) j["policy"]["probabilities"] = cfg.policy.probabilities;
    j["run"] = detail::run_to_json(cfg.run);
    j["sweep"] = {{"width", cfg.sweep.width},   {"depth", cfg.sweep.depth}, {"horizon", cfg.sweep.horizon},
                  {"omega_coeff", cfg.sweep.omega_coeff}, {"beta", cfg.sweep.beta}, {"gamma", cfg.sweep.gamma},
                  {"seed", cfg.sweep.seed}};
    const auto& d = cfg.diagnostics;
    j["diagnostics"] = {{"probes", d.probes},
                        {"widths", d.widths},
                        {"depth", d.depth},
                        {"n_seeds", d.n_seeds},
                        {"omega_coeff", d.omega_coeff},
                        {"mixing_horizon", d.mixing_horizon},
                        {"bias_window", d.bias_window},
                        {"bias_reference", d.bias_reference},
                        {"gap_pairs", d.gap_pairs},
                        {"safety_fraction", d.safety_fraction}};
    j["output_dir"] = cfg.output_dir;
    j["workers"] = cfg.workers;
    j["save_theta"] = cfg.save_theta;
    return j;
}

/// Hash of everything that determines output bytes: the MDP file enters by
/// content, worker count and output location are excluded.
inline std::string config_hash(const ExperimentConfig& cfg) {
    Json j = config_to_json(cfg);
    j.erase("output_dir");
    j.erase("workers");
    if (cfg.mdp.file) j["mdp"] = {{"digest", cfg.mdp_digest}};
    j["version"] = kArtifactVersion;
    return detail::hex64(detail::fnv1a(j.dump()));
}

/// Overrides every seed that drives network initialization and data.
inline void override_seed(ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.run.seed = seed;
    cfg.sweep.seed = {seed};
}

inline MdpSpec build_experiment_mdp(const ExperimentConfig& cfg) {
    if (cfg.mdp.file) return load_mdp(*cfg.mdp.file);
    return random_mdp(cfg.mdp.n_states, cfg.mdp.n_actions, cfg.mdp.gamma, cfg.mdp.seed);
}

/// The epsilon-greedy policy is greedy with respect to Q* of the configured MDP, frozen once.
inline PolicySpec build_experiment_policy(const ExperimentConfig& cfg, const MdpSpec& mdp) {
    switch (cfg.policy.kind) {
    case PolicyKind::Uniform: return uniform_policy(mdp);
    case PolicyKind::EpsilonGreedy: return epsilon_greedy_policy(value_iteration(mdp, 1e-10).q, cfg.policy.epsilon);
    case PolicyKind::FixedStochastic: {
        const auto& rows = cfg.policy.probabilities;
        Matrix p(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
        for (std::size_t s = 0; s < rows.size(); ++s) {
            if (rows[s].size() != static_cast<std::size_t>(p.cols()))
                fail(ErrorKind::ShapeMismatch, "policy rows have different lengths");
            for (std::size_t a = 0; a < rows[s].size(); ++a)
                p(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a)) = rows[s][a];
        }
        PolicySpec pol = fixed_policy(p);
        check_policy_shape(mdp, pol);
        return pol;
    }
    }
    return uniform_policy(mdp);
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

inline Json run_metadata(const RunRecord& rec, const ExperimentConfig& cfg) {
    Json j;
    j["version"] = kArtifactVersion;
    j["config_hash"] = config_hash(cfg);
    j["run"] = detail::run_to_json(rec.config);
    j["seeds"] = {{"seed", rec.config.seed}, {"init_stream", kInitStream}, {"data_stream", kDataStream}};
    j["gamma"] = rec.gamma;
    j["omega"] = rec.omega;
    j["eta"] = rec.eta;
    j["n_params"] = rec.shape.n_params();
    j["eval_weighting"] = rec.eval_weighting;
    j["logged_rows"] = rec.rows.size();
    j["projected_steps"] = rec.projected_steps;
    j["max_layer_dist"] = rec.max_dist_seen;
    return j;
}

struct RunOutputs {
    RunRecord record;
    fs::path csv;
    fs::path metadata;
};

/// Trains the `run` section once and writes run.csv, run.json and, optionally, theta_final.txt.
inline RunOutputs run_single(const ExperimentConfig& cfg, const fs::path& out_dir) {
    const MdpSpec mdp = build_experiment_mdp(cfg);
    const PolicySpec policy = build_experiment_policy(cfg, mdp);
    RunOutputs out{train(cfg.run, mdp, policy), out_dir / "run.csv", out_dir / "run.json"};
    std::ostringstream csv;
    write_run_csv(csv, out.record);
    detail::write_file(out.csv, csv.str());
    Json meta = run_metadata(out.record, cfg);
    meta["status"] = "OK";
    detail::write_file(out.metadata, meta.dump(2) + "\n");
    detail::write_file(out_dir / "resolved_config.json", config_to_json(cfg).dump(2) + "\n");
    if (cfg.save_theta) save_theta((out_dir / "theta_final.txt").string(), out.record.final_theta);
    return out;
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepCell {
    std::size_t index = 0;
    RunConfig config;
};

/// Grid cells in lexicographic order of (width, depth, horizon, omega_coeff, beta, gamma, seed).
inline std::vector<SweepCell> expand_grid(const ExperimentConfig& cfg) {
    std::vector<SweepCell> cells;
    std::vector<std::optional<double>> gammas;
    for (double g : cfg.sweep.gamma) gammas.emplace_back(g);
    if (gammas.empty()) gammas.emplace_back(std::nullopt);
    for (std::size_t m : cfg.sweep.width)
        for (std::size_t L : cfg.sweep.depth)
            for (std::size_t T : cfg.sweep.horizon)
                for (double w : cfg.sweep.omega_coeff)
                    for (double b : cfg.sweep.beta)
                        for (const auto& g : gammas)
                            for (std::uint64_t seed : cfg.sweep.seed) {
                                SweepCell c;
                                c.index = cells.size();
                                c.config = cfg.run;
                                c.config.width = m;
                                c.config.depth = L;
                                c.config.horizon = T;
                                c.config.omega_coeff = w;
                                c.config.beta = b;
                                c.config.gamma = g;
                                c.config.seed = seed;
                                cells.push_back(c);
                            }
    return cells;
}

struct CellResult {
    SweepCell cell;
    bool ok = false;
    std::string status; // "OK" or "FAILED(<Kind>)"
    std::string message;
    double gamma = 0.0;
    double omega = 0.0;
    double eta = 0.0;
    double initial_q_gap_sq = 0.0;
    double final_q_gap_sq = 0.0;
    double mean_td_err_sq = 0.0;
    double max_layer_dist = 0.0;
    std::size_t projected_steps = 0;
    double wall_seconds = 0.0;
};

struct SweepResult {
    std::string config_hash;
    std::vector<CellResult> cells;
    fs::path aggregate;

    std::size_t failed() const {
        return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const CellResult& c) { return !c.ok; }));
    }
};

inline constexpr const char* kAggregateCsvHeader =
    "cell,width,depth,horizon,omega_coeff,beta,gamma,seed,status,omega,eta,initial_q_gap_sq,final_q_gap_sq,"
    "mean_td_err_sq,max_layer_dist,projected_steps";

inline std::string cell_name(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "cell_%04zu", index);
    return buf;
}

namespace detail {

inline CellResult run_cell(const SweepCell& cell, const ExperimentConfig& cfg, const MdpSpec& mdp,
                           const PolicySpec& policy, const std::optional<QTable>& q_star, const fs::path& runs_dir) {
    CellResult r;
    r.cell = cell;
    r.gamma = cell.config.gamma ? *cell.config.gamma : mdp.gamma();
    const auto start = std::chrono::steady_clock::now();
    const fs::path meta_path = runs_dir / (cell_name(cell.index) + ".json");
    try {
        TrainOptions opt;
        if (!cell.config.gamma) opt.q_star = q_star;
        const RunRecord rec = train(cell.config, mdp, policy, opt);
        r.omega = rec.omega;
        r.eta = rec.eta;
        const GapTrend trend = gap_trend(rec);
        r.initial_q_gap_sq = trend.head;
        r.final_q_gap_sq = trend.tail;
        double td = 0.0;
        for (const auto& row : rec.rows) td += row.td_err_sq;
        r.mean_td_err_sq = td / static_cast<double>(rec.rows.size());
        r.max_layer_dist = rec.max_dist_seen;
        r.projected_steps = rec.projected_steps;

        std::ostringstream csv;
        write_run_csv(csv, rec);
        write_file(runs_dir / (cell_name(cell.index) + ".csv"), csv.str());
        if (cfg.save_theta) save_theta((runs_dir / (cell_name(cell.index) + "_theta.txt")).string(), rec.final_theta);
        Json meta = run_metadata(rec, cfg);
        meta["cell"] = cell.index;
        meta["status"] = "OK";
        write_file(meta_path, meta.dump(2) + "\n");
        r.ok = true;
        r.status = "OK";
    } catch (const Error& e) {
        r.status = "FAILED(" + std::string(to_string(e.kind())) + ")";
        r.message = e.what();
    } catch (const std::exception& e) {
        r.status = "FAILED(Exception)";
        r.message = e.what();
    }
    if (!r.ok) {
        Json meta;
        meta["version"] = kArtifactVersion;
        meta["cell"] = cell.index;
        meta["run"] = run_to_json(cell.config);
        meta["status"] = r.status;
        meta["message"] = r.message;
        try {
            write_file(meta_path, meta.dump(2) + "\n");
        } catch (const Error&) {
        }
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

inline std::string format_aggregate_row(const CellResult& r) {
    const RunConfig& c = r.cell.config;
    std::ostringstream os;
    os << cell_name(r.cell.index) << ',' << c.width << ',' << c.depth << ',' << c.horizon << ',' << format_double(c.omega_coeff)
       << ',' << format_double(c.beta) << ',' << format_double(r.gamma) << ',' << c.seed << ',' << r.status << ',';
    if (r.ok) {
        os << format_double(r.omega) << ',' << format_double(r.eta) << ',' << format_double(r.initial_q_gap_sq) << ','
           << format_double(r.final_q_gap_sq) << ',' << format_double(r.mean_td_err_sq) << ','
           << format_double(r.max_layer_dist) << ',' << r.projected_steps;
    } else {
        os << ",,,,,,";
    }
    return os.str();
}

} // namespace detail

/// Runs every grid cell on `workers` threads, then writes the aggregate,
/// timing and summary files. Failed cells are recorded, not thrown.
inline SweepResult run_sweep(const ExperimentConfig& cfg, const fs::path& out_dir, std::size_t workers) {
    const MdpSpec mdp = build_experiment_mdp(cfg);
    const PolicySpec policy = build_experiment_policy(cfg, mdp);
    const std::vector<SweepCell> cells = expand_grid(cfg);
    const fs::path runs_dir = out_dir / "runs";
    fs::create_directories(runs_dir);
    detail::write_file(out_dir / "resolved_config.json", config_to_json(cfg).dump(2) + "\n");

    std::optional<QTable> q_star;
    try {
        q_star = value_iteration(mdp, 1e-10).q;
    } catch (const Error&) {
    }

    SweepResult result;
    result.config_hash = config_hash(cfg);
    result.cells.resize(cells.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < cells.size(); i = next++)
            result.cells[i] = detail::run_cell(cells[i], cfg, mdp, policy, q_star, runs_dir);
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, cells.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    std::sort(result.cells.begin(), result.cells.end(),
              [](const CellResult& a, const CellResult& b) { return a.cell.index < b.cell.index; });

    std::ostringstream agg, timing, summary;
    agg << kAggregateCsvHeader << '\n';
    timing << "cell,wall_seconds\n";
    for (const auto& r : result.cells) {
        agg << detail::format_aggregate_row(r) << '\n';
        timing << cell_name(r.cell.index) << ',' << format_double(r.wall_seconds) << '\n';
    }
    result.aggregate = out_dir / "aggregate.csv";
    detail::write_file(result.aggregate, agg.str());
    detail::write_file(out_dir / "timing.csv", timing.str());

    summary << "# Sweep summary\n\n";
    summary << "- version: " << kArtifactVersion << "\n- config hash: " << result.config_hash << "\n- cells: "
            << result.cells.size() << "\n- failed: " << result.failed() << "\n\n";
    summary << "| cell | m | L | T | seed | status | final q_gap_sq |\n|---|---|---|---|---|---|---|\n";
    for (const auto& r : result.cells)
        summary << "| " << cell_name(r.cell.index) << " | " << r.cell.config.width << " | " << r.cell.config.depth << " | "
                << r.cell.config.horizon << " | " << r.cell.config.seed << " | " << r.status << " | "
                << (r.ok ? format_double(r.final_q_gap_sq) : std::string("-")) << " |\n";
    bool any_failed = false;
    for (const auto& r : result.cells)
        if (!r.ok) {
            if (!any_failed) summary << "\n## Failures\n\n";
            any_failed = true;
            summary << "- " << cell_name(r.cell.index) << ": " << r.message << "\n";
        }
    detail::write_file(out_dir / "summary.md", summary.str());
    return result;
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

struct DiagnoseResult {
    ProbeReport report;
    std::vector<std::string> lines; // human-readable verdicts
};

/// Runs the configured probes over (width, seed) and writes probes.csv and probe_summary.md.
inline DiagnoseResult run_diagnostics(const ExperimentConfig& cfg, const fs::path& out_dir) {
    const MdpSpec mdp = build_experiment_mdp(cfg);
    const PolicySpec policy = build_experiment_policy(cfg, mdp);
    const auto& dc = cfg.diagnostics;
    auto wants = [&](const char* p) { return std::find(dc.probes.begin(), dc.probes.end(), p) != dc.probes.end(); };
    const std::uint64_t base_seed = cfg.run.seed;
    DiagnoseResult out;
    auto cell = [&](const char* probe, std::size_t m, std::size_t L, double omega, std::uint64_t seed, std::size_t n,
                    double v) { out.report.cells.push_back({probe, m, L, omega, seed, n, v}); };

    if (wants("mixing")) {
        const auto curve = tv_mixing_curve(mdp, policy, dc.mixing_horizon);
        out.lines.push_back("mixing: lambda=" + format_double(curve.envelope.lambda) + " rho=" + format_double(curve.envelope.rho));
        for (std::size_t m : dc.widths) {
            RunConfig rc = cfg.run;
            rc.width = m;
            const std::size_t tau = mixing_time_tau(curve.envelope.lambda, curve.envelope.rho, step_size(rc));
            cell("mixing_rho", m, dc.depth, 0.0, 0, dc.mixing_horizon, curve.envelope.rho);
            cell("mixing_lambda", m, dc.depth, 0.0, 0, dc.mixing_horizon, curve.envelope.lambda);
            cell("mixing_tau_star", m, dc.depth, 0.0, 0, dc.mixing_horizon, static_cast<double>(tau));
        }
    }

    if (wants("linearization")) {
        std::vector<NetShape> shapes;
        for (std::size_t m : dc.widths) shapes.push_back({mdp.feature_dim(), m, dc.depth});
        LinearizationProbeOptions opt;
        opt.omega_coeff = dc.omega_coeff;
        opt.n_seeds = dc.n_seeds;
        opt.base_seed = base_seed;
        out.report.append(linearization_probe(shapes, mdp.features(), opt));
    }

    const bool per_net = wants("sigma") || wants("regularity") || wants("gap");
    for (std::size_t m : dc.widths) {
        const NetShape shape{mdp.feature_dim(), m, dc.depth};
        const double omega = theorem_radius(m, dc.depth, dc.omega_coeff);
        for (std::size_t i = 0; per_net && i < dc.n_seeds; ++i) {
            const std::uint64_t seed = base_seed + i;
            Rng rng = make_rng(seed, kInitStream);
            const Theta theta0 = init_gaussian(shape, rng);
            const LinearizedModel model = linearize_over(theta0, mdp);
            if (wants("sigma")) {
                const Vector spec = sigma_spectrum(model, mdp, policy);
                cell("sigma_pi_max_eig", m, dc.depth, omega, seed, mdp.n_pairs(), spec.size() ? spec[0] : 0.0);
                cell("sigma_pi_min_nonzero_eig", m, dc.depth, omega, seed, mdp.n_pairs(), spec.size() ? spec[spec.size() - 1] : 0.0);
                cell("sigma_pi_rank", m, dc.depth, omega, seed, mdp.n_pairs(), static_cast<double>(spec.size()));
            }
            std::optional<RegularityResult> reg;
            if (wants("regularity") || wants("gap")) {
                RegularityOptions ro;
                ro.safety_fraction = dc.safety_fraction;
                ro.restrict_to_range = true;
                try {
                    reg = check_regularity_all_directions(model, mdp, policy, ro);
                } catch (const Error& e) {
                    out.lines.push_back("regularity m=" + std::to_string(m) + " seed=" + std::to_string(seed) +
                                        ": INCONCLUSIVE (" + e.what() + ")");
                }
            }
            if (wants("regularity") && reg) {
                cell("regularity_sup_alpha", m, dc.depth, omega, seed, mdp.n_pairs(), reg->sup_alpha);
                cell("regularity_beta", m, dc.depth, omega, seed, mdp.n_pairs(), reg->beta);
                out.lines.push_back("regularity m=" + std::to_string(m) + " seed=" + std::to_string(seed) + ": " +
                                    to_string(reg->status) + " sup_alpha=" + format_double(reg->sup_alpha));
            }
            if (wants("gap")) {
                const double beta = reg && reg->status == RegularityStatus::Pass ? std::min(reg->beta, 1.0) : cfg.run.beta;
                Rng pr = make_rng(seed, kProbeStream);
                double worst = std::numeric_limits<double>::infinity();
                for (std::size_t k = 0; k < dc.gap_pairs; ++k) {
                    Theta a = theta0, b = theta0;
                    a.flat += sphere_perturbation(shape, omega * uniform01(pr), pr);
                    b.flat += sphere_perturbation(shape, omega * uniform01(pr), pr);
                    worst = std::min(worst, estimation_gap_check(model, mdp, policy, a, b, beta));
                }
                cell("estimation_gap_min_margin", m, dc.depth, omega, seed, dc.gap_pairs, worst);
            }
        }
    }

    if (wants("bias")) {
        BiasProbeOptions bo;
        bo.window = dc.bias_window;
        bo.reference = dc.bias_reference == "current" ? BiasReference::Current : BiasReference::Initial;
        for (std::size_t m : dc.widths)
            for (std::size_t i = 0; i < dc.n_seeds; ++i) {
                RunConfig rc = cfg.run;
                rc.width = m;
                rc.depth = dc.depth;
                rc.omega_coeff = dc.omega_coeff;
                rc.seed = base_seed + i;
                out.report.append(bias_report(bias_probe(rc, mdp, policy, bo), rc));
            }
    }

    std::ostringstream csv, summary;
    write_probe_csv(csv, out.report);
    detail::write_file(out_dir / "probes.csv", csv.str());
    summary << "# Probe summary\n\nconfig hash: " << config_hash(cfg) << "\n\n```\n";
    write_probe_summary(summary, out.report);
    summary << "```\n";
    for (const auto& l : out.lines) summary << "\n- " << l;
    summary << "\n";
    detail::write_file(out_dir / "probe_summary.md", summary.str());
    detail::write_file(out_dir / "resolved_config.json", config_to_json(cfg).dump(2) + "\n");
    return out;
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

/// Writes Q* and the stationary distribution of the configured policy.
inline ValueIterationResult run_oracle(const ExperimentConfig& cfg, const fs::path& out_dir, double tol = 1e-10) {
    const MdpSpec mdp = build_experiment_mdp(cfg);
    const PolicySpec policy = build_experiment_policy(cfg, mdp);
    const ValueIterationResult vi = value_iteration(mdp, tol);
    std::ostringstream q;
    q << "s,a,q\n";
    for (StateId s = 0; s < mdp.n_states(); ++s)
        for (ActionId a = 0; a < mdp.n_actions(); ++a)
            q << s << ',' << a << ',' << format_double(vi.q(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(a))) << '\n';
    detail::write_file(out_dir / "qstar.csv", q.str());
    std::ostringstream mu;
    mu << "s,mu\n";
    const Vector dist = stationary_distribution(mdp, policy);
    for (StateId s = 0; s < mdp.n_states(); ++s) mu << s << ',' << format_double(dist[static_cast<Eigen::Index>(s)]) << '\n';
    detail::write_file(out_dir / "stationary.csv", mu.str());
    return vi;
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

namespace detail {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        const auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) fail(ErrorKind::SchemaMismatch, "missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline CsvTable read_csv(const fs::path& path) {
    std::istringstream in(read_file(path));
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) fail(ErrorKind::NoData, path.string() + " is empty");
    t.header = split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto row = split_csv_line(line);
        if (row.size() != t.header.size()) fail(ErrorKind::SchemaMismatch, path.string() + ": ragged row");
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline double to_double(const std::string& s) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) fail(ErrorKind::SchemaMismatch, "not a number: '" + s + "'");
    return v;
}

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

/// Log-log line chart as a standalone SVG document.
inline std::string loglog_svg(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<Series>& series) {
    double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            xmin = std::min(xmin, std::log10(x));
            xmax = std::max(xmax, std::log10(x));
            ymin = std::min(ymin, std::log10(y));
            ymax = std::max(ymax, std::log10(y));
        }
    xmin = std::floor(xmin);
    xmax = std::max(std::ceil(xmax), xmin + 1);
    ymin = std::floor(ymin);
    ymax = std::max(std::ceil(ymax), ymin + 1);
    const double W = 640, H = 420, left = 70, right = 150, top = 40, bottom = 50;
    const double pw = W - left - right, ph = H - top - bottom;
    auto px = [&](double x) { return left + (std::log10(x) - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return top + ph - (std::log10(y) - ymin) / (ymax - ymin) * ph; };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
       << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << fmt(W / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
    os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
       << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int e = static_cast<int>(xmin); e <= static_cast<int>(xmax); ++e) {
        const double x = left + (e - xmin) / (xmax - xmin) * pw;
        os << "<line x1=\"" << fmt(x) << "\" y1=\"" << top << "\" x2=\"" << fmt(x) << "\" y2=\"" << top + ph
           << "\" stroke=\"#ddd\"/>\n<text x=\"" << fmt(x) << "\" y=\"" << top + ph + 16
           << "\" text-anchor=\"middle\">1e" << e << "</text>\n";
    }
    for (int e = static_cast<int>(ymin); e <= static_cast<int>(ymax); ++e) {
        const double y = top + ph - (e - ymin) / (ymax - ymin) * ph;
        os << "<line x1=\"" << left << "\" y1=\"" << fmt(y) << "\" x2=\"" << left + pw << "\" y2=\"" << fmt(y)
           << "\" stroke=\"#ddd\"/>\n<text x=\"" << left - 6 << "\" y=\"" << fmt(y + 4)
           << "\" text-anchor=\"end\">1e" << e << "</text>\n";
    }
    os << "<text x=\"" << fmt(left + pw / 2) << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << xlabel << "</text>\n";
    os << "<text x=\"16\" y=\"" << fmt(top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
       << fmt(top + ph / 2) << ")\">" << ylabel << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = colors[i % 6];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t k = 0; k < series[i].points.size(); ++k)
            os << (k ? " " : "") << fmt(px(series[i].points[k].first)) << ',' << fmt(py(series[i].points[k].second));
        os << "\"/>\n";
        if (series[i].points.size() <= 32)
            for (const auto& [x, y] : series[i].points)
                os << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        const double ly = top + 10 + 18.0 * static_cast<double>(i);
        os << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << fmt(ly) << "\" x2=\"" << left + pw + 30 << "\" y2=\""
           << fmt(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n<text x=\"" << left + pw + 36 << "\" y=\""
           << fmt(ly + 4) << "\">" << series[i].name << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline std::string join_header(const std::vector<std::string>& h) {
    std::string s;
    for (std::size_t i = 0; i < h.size(); ++i) s += (i ? "," : "") + h[i];
    return s;
}

} // namespace detail

/// Plot kinds per input schema: run CSV -> q_gap, td_err, lin_gap;
/// aggregate CSV -> final_gap_vs_m; probe CSV -> probe_vs_m.
inline std::vector<std::string> plot_kinds_for(const std::string& header) {
    if (header == kRunCsvHeader) return {"q_gap", "td_err", "lin_gap"};
    if (header == kAggregateCsvHeader) return {"final_gap_vs_m"};
    if (header == kProbeCsvHeader) return {"probe_vs_m"};
    return {};
}

/// Renders SVG files into out_dir and returns their paths. Nothing is written
/// when the input has no usable rows.
inline std::vector<fs::path> emit_plots(const fs::path& csv_path, const fs::path& out_dir,
                                        std::vector<std::string> kinds = {}) {
    using detail::Series;
    const detail::CsvTable t = detail::read_csv(csv_path);
    const std::string header = detail::join_header(t.header);
    const auto available = plot_kinds_for(header);
    if (available.empty()) fail(ErrorKind::SchemaMismatch, csv_path.string() + ": unrecognized header '" + header + "'");
    if (kinds.empty()) kinds = {available.front()};
    for (const auto& k : kinds)
        if (std::find(available.begin(), available.end(), k) == available.end())
            fail(ErrorKind::InvalidArgument, "plot kind '" + k + "' does not apply to " + csv_path.string());
    if (t.rows.empty()) fail(ErrorKind::NoData, csv_path.string() + " has no data rows");

    std::vector<std::pair<fs::path, std::string>> docs;
    for (const auto& kind : kinds) {
        std::vector<Series> series;
        std::string title, xlabel, ylabel;
        if (header == kRunCsvHeader) {
            const std::string col = kind == "q_gap" ? "q_gap_sq" : kind == "td_err" ? "td_err_sq" : "lin_gap_sq";
            const std::size_t ct = t.column("t"), cv = t.column(col);
            Series s{col, {}};
            for (const auto& row : t.rows) {
                const double y = detail::to_double(row[cv]);
                if (y > 0.0 && std::isfinite(y)) s.points.emplace_back(detail::to_double(row[ct]) + 1.0, y);
            }
            series.push_back(std::move(s));
            title = col + " vs t";
            xlabel = "t + 1";
            ylabel = col;
        } else if (header == kAggregateCsvHeader) {
            const std::size_t cm = t.column("width"), cl = t.column("depth"), cs = t.column("status"),
                              cg = t.column("final_q_gap_sq");
            std::map<std::string, std::map<double, std::vector<double>>> groups;
            for (const auto& row : t.rows)
                if (row[cs] == "OK") groups["L=" + row[cl]][detail::to_double(row[cm])].push_back(detail::to_double(row[cg]));
            for (auto& [name, by_m] : groups) {
                Series s{name, {}};
                for (auto& [m, vals] : by_m) {
                    const double med = median(vals);
                    if (med > 0.0) s.points.emplace_back(m, med);
                }
                series.push_back(std::move(s));
            }
            title = "final q_gap_sq vs width (median over cells)";
            xlabel = "m";
            ylabel = "final q_gap_sq";
        } else {
            const std::size_t cp = t.column("probe"), cm = t.column("m"), cv = t.column("value");
            std::map<std::string, std::map<double, std::vector<double>>> groups;
            for (const auto& row : t.rows) groups[row[cp]][detail::to_double(row[cm])].push_back(detail::to_double(row[cv]));
            for (auto& [name, by_m] : groups) {
                Series s{name, {}};
                for (auto& [m, vals] : by_m) {
                    const double med = median(vals);
                    if (med > 0.0 && m > 0.0 && std::isfinite(med)) s.points.emplace_back(m, med);
                }
                if (!s.points.empty()) series.push_back(std::move(s));
            }
            title = "probe medians vs width";
            xlabel = "m";
            ylabel = "median value";
        }
        series.erase(std::remove_if(series.begin(), series.end(), [](const Series& s) { return s.points.empty(); }),
                     series.end());
        if (series.empty()) fail(ErrorKind::NoData, csv_path.string() + ": nothing positive to plot for " + kind);
        docs.emplace_back(out_dir / (kind + ".svg"), detail::loglog_svg(title, xlabel, ylabel, series));
    }
    std::vector<fs::path> written;
    for (const auto& [path, text] : docs) {
        detail::write_file(path, text);
        written.push_back(path);
    }
    return written;
}

} // namespace nql
