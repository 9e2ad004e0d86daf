#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "nql/harness.hpp"

namespace nql {
namespace {

class Scratch : public ::testing::Test {
protected:
    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir_ = fs::temp_directory_path() / "nql_tests" / (std::string(info->test_suite_name()) + "_" + info->name());
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }

    fs::path write(const std::string& name, const std::string& text) const {
        const fs::path p = dir_ / name;
        std::ofstream(p) << text;
        return p;
    }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    static std::size_t count_lines(const std::string& text) {
        return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
    }

    fs::path dir_;
};

constexpr const char* kMinimal = R"({"mdp": {"generate": {"n_states": 3, "n_actions": 2, "seed": 4}}})";

ErrorKind kind_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorKind::Io;
}

TEST_F(Scratch, MinimalConfigEchoesDefaults) {
    const ExperimentConfig cfg = load_config(write("c.json", kMinimal));
    const Json j = config_to_json(cfg);
    EXPECT_EQ(j["run"]["omega_coeff"], 1.0);
    EXPECT_EQ(j["run"]["beta"], 0.5);
    EXPECT_EQ(j["run"]["step_rule"], "theorem-sqrtT");
    EXPECT_EQ(j["run"]["seed"], 0);
    EXPECT_TRUE(j["run"]["gamma"].is_null());
    EXPECT_EQ(j["mdp"]["generate"]["gamma"], 0.9);
    EXPECT_EQ(j["policy"]["kind"], "uniform");
    EXPECT_EQ(j["sweep"]["width"], Json::array({64}));
    EXPECT_EQ(j["workers"], 1);
}

TEST_F(Scratch, StrictSchema) {
    const std::string typo = R"({"mdp": {"generate": {"n_states": 2, "n_actions": 1}}, "run": {"omega_coef": 2}})";
    try {
        load_config(write("typo.json", typo));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::UnknownKey);
        EXPECT_NE(std::string(e.what()).find("omega_coef"), std::string::npos);
    }
    EXPECT_EQ(kind_of([&] { load_config(write("none.json", R"({"run": {}})")); }), ErrorKind::MissingRequired);
    EXPECT_EQ(kind_of([&] { load_config(write("gen.json", R"({"mdp": {"generate": {"n_states": 2}}})")); }),
              ErrorKind::MissingRequired);
    EXPECT_EQ(kind_of([&] { load_config(write("type.json", R"({"mdp": {"generate": {"n_states": "x", "n_actions": 1}}})")); }),
              ErrorKind::SchemaMismatch);
}

TEST_F(Scratch, ParseErrorCarriesLineAndColumn) {
    try {
        load_config(write("bad.json", "{\n  \"mdp\": {\n    \"file\": ,\n}"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ParseError);
        EXPECT_NE(std::string(e.what()).find("bad.json:3:13"), std::string::npos) << e.what();
    }
}

TEST_F(Scratch, ResolvedConfigReloadsToSameHash) {
    save_mdp(dir_ / "mdp.json", random_mdp(4, 2, 0.8, 3));
    const std::string text = R"({"mdp": {"file": "mdp.json"}, "policy": {"kind": "epsilon_greedy", "epsilon": 0.2},
        "run": {"width": 32, "horizon": 50}, "sweep": {"seed": [1, 2]}})";
    const ExperimentConfig a = load_config(write("c.json", text));
    const fs::path echoed = write("resolved.json", config_to_json(a).dump(2));
    const ExperimentConfig b = load_config(echoed);
    EXPECT_EQ(config_hash(a), config_hash(b));
    EXPECT_EQ(config_to_json(a), config_to_json(b));

    ExperimentConfig c = a;
    c.workers = 8;
    c.output_dir = "elsewhere";
    EXPECT_EQ(config_hash(c), config_hash(a));
    c.run.beta = 0.4;
    EXPECT_NE(config_hash(c), config_hash(a));
}

TEST_F(Scratch, MdpFileRoundTrip) {
    MdpInput in = random_mdp(3, 2, 0.7, 5).to_input();
    in.feature_dim = 2;
    in.features.assign(12, 0.25);
    in.initial = {0.5, 0.25, 0.25};
    const MdpSpec mdp = build_mdp(in);
    save_mdp(dir_ / "m.json", mdp);
    const MdpSpec back = load_mdp(dir_ / "m.json");
    EXPECT_EQ(back.to_input().transition, mdp.to_input().transition);
    EXPECT_EQ(back.to_input().features, mdp.to_input().features);
    EXPECT_EQ(back.initial(), mdp.initial());

    const MdpSpec plain = random_mdp(2, 2, 0.9, 1);
    EXPECT_FALSE(mdp_to_json(plain).contains("features"));
    EXPECT_EQ(kind_of([&] { mdp_from_json(Json::parse(R"({"n_states":1,"n_actions":1,"gamma":0.5,"transition":[1],"reward":[2]})")); }),
              ErrorKind::RewardOutOfRange);
}

TEST_F(Scratch, GridOrderIsLexicographic) {
    const auto cfg = load_config(write("c.json", R"({"mdp": {"generate": {"n_states": 2, "n_actions": 1}},
        "sweep": {"width": [8, 4], "depth": [2, 3], "seed": [5, 6]}})"));
    const auto cells = expand_grid(cfg);
    ASSERT_EQ(cells.size(), 8u);
    EXPECT_EQ(cells[0].config.width, 8u);
    EXPECT_EQ(cells[0].config.seed, 5u);
    EXPECT_EQ(cells[1].config.seed, 6u);
    EXPECT_EQ(cells[2].config.depth, 3u);
    EXPECT_EQ(cells[4].config.width, 4u);
}

TEST_F(Scratch, SweepWritesOneCsvPerCell) {
    auto cfg = load_config(write("c.json", R"({"mdp": {"generate": {"n_states": 3, "n_actions": 2, "seed": 1}},
        "run": {"horizon": 100, "log_every": 5}, "sweep": {"width": [64, 256], "seed": [0, 1]}})"));
    const auto res = run_sweep(cfg, dir_ / "out", 2);
    EXPECT_EQ(res.failed(), 0u);
    std::size_t csvs = 0;
    for (const auto& e : fs::directory_iterator(dir_ / "out" / "runs")) csvs += e.path().extension() == ".csv";
    EXPECT_EQ(csvs, 4u);
    const std::string agg = slurp(res.aggregate);
    EXPECT_EQ(count_lines(agg), 5u);
    EXPECT_EQ(agg.substr(0, agg.find('\n')), kAggregateCsvHeader);
    EXPECT_EQ(count_lines(slurp(dir_ / "out" / "runs" / "cell_0003.csv")), 22u);
    EXPECT_TRUE(fs::exists(dir_ / "out" / "summary.md"));
    EXPECT_TRUE(fs::exists(dir_ / "out" / "timing.csv"));
    EXPECT_EQ(agg.find("wall"), std::string::npos);
}

TEST_F(Scratch, AggregateIndependentOfWorkerCount) {
    const auto cfg = load_config(write("c.json", R"({"mdp": {"generate": {"n_states": 4, "n_actions": 2, "seed": 2}},
        "run": {"horizon": 200, "log_every": 10}, "sweep": {"width": [8, 16, 32], "depth": [2, 3], "seed": [0, 1]}})"));
    const auto one = run_sweep(cfg, dir_ / "w1", 1);
    const auto four = run_sweep(cfg, dir_ / "w4", 4);
    EXPECT_EQ(slurp(one.aggregate), slurp(four.aggregate));
    EXPECT_EQ(slurp(dir_ / "w1" / "summary.md"), slurp(dir_ / "w4" / "summary.md"));
    EXPECT_EQ(slurp(dir_ / "w1" / "runs" / "cell_0007.csv"), slurp(dir_ / "w4" / "runs" / "cell_0007.csv"));
}

TEST_F(Scratch, FailingCellIsIsolated) {
    const auto cfg = load_config(write("c.json", R"({"mdp": {"generate": {"n_states": 3, "n_actions": 2}},
        "run": {"horizon": 50}, "sweep": {"gamma": [0.5, 1.2, 0.9]}})"));
    const auto res = run_sweep(cfg, dir_ / "out", 3);
    ASSERT_EQ(res.cells.size(), 3u);
    EXPECT_EQ(res.failed(), 1u);
    EXPECT_EQ(res.cells[1].status, "FAILED(BadDiscount)");
    EXPECT_TRUE(res.cells[0].ok);
    EXPECT_TRUE(res.cells[2].ok);
    EXPECT_EQ(count_lines(slurp(res.aggregate)), 4u);
    EXPECT_FALSE(fs::exists(dir_ / "out" / "runs" / "cell_0001.csv"));
    EXPECT_TRUE(fs::exists(dir_ / "out" / "runs" / "cell_0001.json"));
    EXPECT_EQ(count_lines(slurp(dir_ / "out" / "runs" / "cell_0002.csv")), 51u);
}

TEST_F(Scratch, PlotsFromRunCsv) {
    const auto cfg = load_config(write("c.json", R"({"mdp": {"generate": {"n_states": 3, "n_actions": 2}},
        "run": {"width": 16, "horizon": 200}})"));
    const auto run = run_single(cfg, dir_ / "run");
    fs::copy_file(run.csv, dir_ / "copy.csv");
    const auto a = emit_plots(run.csv, dir_ / "pa", {"q_gap", "td_err"});
    const auto b = emit_plots(dir_ / "copy.csv", dir_ / "pb", {"q_gap", "td_err"});
    ASSERT_EQ(a.size(), 2u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_GT(fs::file_size(a[i]), 0u);
        EXPECT_EQ(slurp(a[i]), slurp(b[i]));
    }
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir_ / "pa")) ++files;
    EXPECT_EQ(files, 2u);
    EXPECT_NE(slurp(a[0]).find("<svg"), std::string::npos);
}

TEST_F(Scratch, PlotRejectsEmptyAndForeignInput) {
    const fs::path empty = write("empty.csv", std::string(kRunCsvHeader) + "\n");
    EXPECT_EQ(kind_of([&] { emit_plots(empty, dir_ / "p"); }), ErrorKind::NoData);
    EXPECT_FALSE(fs::exists(dir_ / "p"));
    EXPECT_EQ(kind_of([&] { emit_plots(write("x.csv", "a,b\n1,2\n"), dir_ / "p"); }), ErrorKind::SchemaMismatch);
    EXPECT_EQ(kind_of([&] { emit_plots(write("y.csv", std::string(kRunCsvHeader) + "\n0,1,1,0,0,1,0\n"), dir_ / "p", {"probe_vs_m"}); }),
              ErrorKind::InvalidArgument);
}

TEST_F(Scratch, DiagnosticsWriteProbeCsv) {
    const auto cfg = load_config(write("c.json", R"({"mdp": {"generate": {"n_states": 3, "n_actions": 2, "gamma": 0.3}},
        "run": {"horizon": 100}, "diagnostics": {"widths": [16, 32], "n_seeds": 2, "gap_pairs": 10, "bias_window": 20}})"));
    const auto res = run_diagnostics(cfg, dir_ / "d");
    const std::string csv = slurp(dir_ / "d" / "probes.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')), kProbeCsvHeader);
    for (const char* p : {"linearization_gap", "sigma_pi_rank", "regularity_sup_alpha", "mixing_tau_star",
                          "estimation_gap_min_margin", "bias_mean_abs_zeta"})
        EXPECT_NE(csv.find(p), std::string::npos) << p;
    for (const auto& c : res.report.cells)
        if (c.probe == "estimation_gap_min_margin") EXPECT_GE(c.value, -1e-8);
    EXPECT_FALSE(emit_plots(dir_ / "d" / "probes.csv", dir_ / "d").empty());
}

TEST_F(Scratch, OracleWritesQStar) {
    const auto cfg = load_config(write("c.json", kMinimal));
    const auto vi = run_oracle(cfg, dir_ / "o");
    EXPECT_LE(vi.residual, 1e-10);
    EXPECT_EQ(count_lines(slurp(dir_ / "o" / "qstar.csv")), 7u);
    EXPECT_EQ(count_lines(slurp(dir_ / "o" / "stationary.csv")), 4u);
}

int run_cli(const std::string& args, const fs::path& cwd) {
    const std::string cmd = "cd '" + cwd.string() + "' && '" + NQL_CLI_PATH + "' " + args + " >cli.log 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST_F(Scratch, CliExitCodes) {
    EXPECT_EQ(run_cli("gen-mdp --states 3 --actions 2 --seed 9 --out .", dir_), 0);
    ASSERT_TRUE(fs::exists(dir_ / "mdp.json"));
    write("ok.json", R"({"mdp": {"file": "mdp.json"}, "run": {"width": 8, "horizon": 30}, "sweep": {"seed": [0, 1]}})");
    EXPECT_EQ(run_cli("run --config ok.json --out r", dir_), 0);
    EXPECT_TRUE(fs::exists(dir_ / "r" / "run.csv"));
    EXPECT_EQ(run_cli("sweep --config ok.json --out s --workers 2", dir_), 0);
    EXPECT_EQ(run_cli("plot --input r/run.csv --out p", dir_), 0);
    EXPECT_TRUE(fs::exists(dir_ / "p" / "q_gap.svg"));
    EXPECT_EQ(run_cli("oracle --config ok.json --out o", dir_), 0);
    EXPECT_EQ(run_cli("diagnose --config ok.json --out d --probe mixing --probe linearization", dir_), 0);

    write("typo.json", R"({"mdp": {"file": "mdp.json"}, "run": {"omega_coef": 1}})");
    EXPECT_EQ(run_cli("run --config typo.json", dir_), 1);
    EXPECT_EQ(run_cli("sweep --bogus", dir_), 1);
    write("partial.json", R"({"mdp": {"file": "mdp.json"}, "run": {"width": 8, "horizon": 30}, "sweep": {"gamma": [0.5, 1.2]}})");
    EXPECT_EQ(run_cli("sweep --config partial.json --out q", dir_), 3);
    write("huge.json", R"({"mdp": {"file": "mdp.json"}, "run": {"width": 100000, "depth": 3}})");
    EXPECT_EQ(run_cli("run --config huge.json --out h", dir_), 2);
    write("empty.csv", std::string(kRunCsvHeader) + "\n");
    EXPECT_EQ(run_cli("plot --input empty.csv --out e", dir_), 2);
}

TEST_F(Scratch, CliSeedOverride) {
    write("c.json", R"({"mdp": {"generate": {"n_states": 2, "n_actions": 2}}, "run": {"width": 8, "horizon": 20}})");
    ASSERT_EQ(run_cli("run --config c.json --out a --seed 11", dir_), 0);
    ASSERT_EQ(run_cli("run --config c.json --out b --seed 11", dir_), 0);
    ASSERT_EQ(run_cli("run --config c.json --out c --seed 12", dir_), 0);
    EXPECT_EQ(slurp(dir_ / "a" / "run.csv"), slurp(dir_ / "b" / "run.csv"));
    EXPECT_NE(slurp(dir_ / "a" / "run.csv"), slurp(dir_ / "c" / "run.csv"));
    EXPECT_EQ(Json::parse(slurp(dir_ / "a" / "resolved_config.json"))["run"]["seed"], 11);
}

} // namespace
} // namespace nql
