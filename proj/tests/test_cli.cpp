#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "p4p/core.hpp"
#include "p4p/riskadjust.hpp"
#include "p4p/sim.hpp"

using namespace p4p;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("p4p_cli_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
    std::string dir(const std::string& name) const {
        fs::create_directories(path / name);
        return (path / name).string();
    }
};

const std::string& binary() {
    static const std::string bin = [] {
        const char* env = std::getenv("P4PEVAL_BIN");
        REQUIRE_MESSAGE(env != nullptr, "P4PEVAL_BIN must point at the CLI binary");
        return std::string(env);
    }();
    return bin;
}

// Runs the CLI with stdout+stderr captured; returns the decoded exit code.
int run_cli(const std::string& args, const std::string& capture_file) {
    const std::string cmd =
        "\"" + binary() + "\" " + args + " > \"" + capture_file + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    if (status == -1) return -1;
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), path << " should exist");
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char c : text)
        if (c == '\n') ++n;
    return n;
}

json read_json(const std::string& path) { return json::parse(read_file(path)); }

// Patient-level fixture with real heterogeneity so the risk models have
// something to estimate but converge quickly.
GeneratorTruth admissions_truth(std::uint64_t seed) {
    GeneratorTruth truth;
    truth.hospitals = 10;
    truth.wards_per_hospital = 2;
    truth.patients_per_ward_month = 4;
    truth.treated_fraction = 0.4;
    truth.surgical_fraction = 0.5;
    truth.years = {2010, 2011};
    truth.seed = seed;
    for (int k = 0; k < kOutcomeCount; ++k) {
        truth.patient[k].sigma_mu_sq = 0.15;
        truth.patient[k].sigma_nu_sq = 0.05;
        truth.patient[k].eta = {0.2, 0.005, 0.3, -0.1, 0.15};
    }
    return truth;
}

GeneratorTruth panel_truth(std::uint64_t seed) {
    GeneratorTruth truth;
    truth.hospitals = 15;
    truth.wards_per_hospital = 2;
    truth.patients_per_ward_month = 20;
    truth.treated_fraction = 0.4;
    truth.surgical_fraction = 0.5;
    truth.years = {2010, 2011, 2012};
    truth.seed = seed;
    truth.sigma = Matrix::Identity(kOutcomeCount, kOutcomeCount) * 2.5e-4;
    for (int r = 0; r < kOutcomeCount; ++r)
        for (int c = 0; c < kOutcomeCount; ++c)
            if (r != c) truth.sigma(r, c) = 1e-4;
    for (int k = 0; k < kOutcomeCount; ++k) {
        truth.panel[k].intercept = 0.30;  // keep every Gaussian cell inside [0, 1]
        truth.panel[k].sigma_alpha_sq = 1e-4;
        truth.panel[k].treated_year[2011] = -0.006;
        truth.panel[k].treated_year[2012] = -0.010;
    }
    return truth;
}

}  // namespace

TEST_CASE("usage errors come from the argument parser") {
    TempDir dir;
    const std::string log = dir.file("log.txt");
    CHECK(run_cli("", log) != 0);                       // a subcommand is required
    CHECK(run_cli("--help", log) == 0);
    CHECK(read_file(log).find("validate") != std::string::npos);
    CHECK(run_cli("frobnicate", log) != 0);             // unknown subcommand
    CHECK(run_cli("validate", log) != 0);               // --input is required
    CHECK(run_cli("did --panel x.csv --definitely-not-a-flag", log) != 0);
}

TEST_CASE("validate checks assumptions and always writes a manifest") {
    TempDir dir;
    const std::string log = dir.file("log.txt");
    const std::string data = dir.file("admissions.csv");
    save_admissions(generate_synthetic(admissions_truth(11)), data);

    SUBCASE("a clean extract passes") {
        const std::string out = dir.dir("ok");
        CHECK(run_cli("validate --input \"" + data + "\" --out \"" + out + "\"", log) == 0);
        CHECK(read_file(log).find("validation passed") != std::string::npos);
        const json manifest = read_json(out + "/manifest.json");
        CHECK(manifest.at("command") == "validate");
        CHECK(manifest.at("status") == "ok");
        CHECK(manifest.at("exit_code") == 0);
        CHECK(manifest.at("parameters").at("fatal") == false);
        REQUIRE(manifest.at("inputs").size() == 1);
        CHECK(manifest.at("inputs").at(0).at("path") == data);
        CHECK(manifest.at("inputs").at(0).at("sha256").get<std::string>().size() == 64);
    }
    SUBCASE("a missing input exits 1 with an error manifest") {
        const std::string out = dir.dir("missing");
        CHECK(run_cli("validate --input \"" + dir.file("nope.csv") + "\" --out \"" + out + "\"",
                      log) == 1);
        const json manifest = read_json(out + "/manifest.json");
        CHECK(manifest.at("status") == "error");
        CHECK(manifest.at("exit_code") == 1);
        CHECK(manifest.at("message").get<std::string>().find("nope.csv") != std::string::npos);
    }
    SUBCASE("a ward that switches treatment groups is rejected at ingestion") {
        const std::string bad = dir.file("switching.csv");
        std::ofstream out(bad);
        out << "hospital_id,ward_id,year,month,gender,age,intcare,drg_weight,comorbidity,"
               "technology,teaching,specialised,surgical,ownership,treated,"
               "mortality,readmissions,return_or,transfers,voldisch\n";
        out << "H01,W01,2010,1,0,60,0,1.0,0,0,0,0,1,PUBLIC,0,0,0,0,0,0\n";
        out << "H01,W01,2011,1,0,61,0,1.0,0,0,0,0,1,PUBLIC,1,0,0,0,0,0\n";
        out.close();
        const std::string outdir = dir.dir("switch");
        CHECK(run_cli("validate --input \"" + bad + "\" --out \"" + outdir + "\"", log) == 2);
        CHECK(read_json(outdir + "/manifest.json").at("status") == "error");
    }
    SUBCASE("fatal design gaps exit 2 and are flagged in the manifest") {
        GeneratorTruth all_treated = admissions_truth(12);
        all_treated.treated_fraction = 1.0;  // no control group in any year
        const std::string bad = dir.file("all_treated.csv");
        save_admissions(generate_synthetic(all_treated), bad);
        const std::string out = dir.dir("fatal");
        CHECK(run_cli("validate --input \"" + bad + "\" --out \"" + out + "\"", log) == 2);
        const json manifest = read_json(out + "/manifest.json");
        CHECK(manifest.at("parameters").at("fatal") == true);
        CHECK(manifest.at("status") == "error");
    }
}

TEST_CASE("summarize writes the per-year descriptive table") {
    TempDir dir;
    const std::string log = dir.file("log.txt");
    const std::string data = dir.file("admissions.csv");
    save_admissions(generate_synthetic(admissions_truth(21)), data);

    const std::string out = dir.dir("sum");
    CHECK(run_cli("summarize --input \"" + data + "\" --out \"" + out + "\"", log) == 0);
    const std::string csv = read_file(out + "/summary.csv");
    CHECK(csv.rfind("variable,year,mean,sd,n", 0) == 0);
    CHECK(csv.find("\nage,2010,") != std::string::npos);
    CHECK(csv.find("\nmortality,2011,") != std::string::npos);
    const json manifest = read_json(out + "/manifest.json");
    REQUIRE(manifest.at("outputs").size() == 1);
    CHECK(manifest.at("outputs").at(0).at("name") == "summary.csv");
    CHECK(manifest.at("outputs").at(0).at("bytes").get<std::uint64_t>() > 0);
}

TEST_CASE("adjust risk-adjusts into a deterministic ward-month panel") {
    TempDir dir;
    const std::string log = dir.file("log.txt");
    const std::string data = dir.file("admissions.csv");
    const GeneratorTruth truth = admissions_truth(31);
    save_admissions(generate_synthetic(truth), data);

    const std::string out1 = dir.dir("a1");
    REQUIRE(run_cli("adjust --input \"" + data + "\" --out \"" + out1 + "\"", log) == 0);
    const std::string panel_text = read_file(out1 + "/panel.csv");
    CHECK(line_count(panel_text) == 1u + 10u * 2u * 2u * 12u);  // header + cells

    const json manifest = read_json(out1 + "/manifest.json");
    CHECK(manifest.at("status") == "ok");
    for (const auto& [outcome, flag] : manifest.at("parameters").at("converged").items())
        CHECK_MESSAGE(flag == true, outcome);

    // the panel must load cleanly and keep the masking structure
    const PanelDataset panel = load_panel(out1 + "/panel.csv");
    CHECK(panel.cells.size() == 10u * 2u * 2u * 12u);
    bool masked_right = true;
    for (const PanelCell& cell : panel.cells) {
        const double ror = cell.ho[static_cast<int>(Outcome::return_or)];
        masked_right = masked_right && (cell.surgical == 1 ? std::isfinite(ror) : std::isnan(ror));
    }
    CHECK(masked_right);

    SUBCASE("reruns and worker counts do not change a byte") {
        const std::string out2 = dir.dir("a2");
        REQUIRE(run_cli("adjust --input \"" + data + "\" --out \"" + out2 + "\"", log) == 0);
        CHECK(read_file(out2 + "/panel.csv") == panel_text);

        const std::string out3 = dir.dir("a3");
        REQUIRE(run_cli("adjust --input \"" + data + "\" --workers 3 --out \"" + out3 + "\"",
                        log) == 0);
        CHECK(read_file(out3 + "/panel.csv") == panel_text);
    }
    SUBCASE("an unconverged risk model exits 3 and the manifest says so") {
        StudyConfig strict;
        strict.tolerances.glmm_gradient_tol = 1e-18;
        strict.tolerances.glmm_max_outer_iterations = 1;
        const std::string config = dir.file("strict.json");
        save_study_config(strict, config);
        const std::string out = dir.dir("strict");
        CHECK(run_cli("adjust --input \"" + data + "\" --config \"" + config + "\" --out \"" +
                          out + "\"",
                      log) == 3);
        const json m = read_json(out + "/manifest.json");
        CHECK(m.at("status") == "non_converged");
        CHECK(m.at("exit_code") == 3);
        bool any_false = false;
        for (const auto& [outcome, flag] : m.at("parameters").at("converged").items())
            any_false = any_false || flag == false;
        CHECK(any_false);
        CHECK(fs::exists(out + "/panel.csv"));  // partial results still land
    }
}

TEST_CASE("did fits, bootstraps, tests trends, and reruns byte-identically") {
    TempDir dir;
    const std::string log = dir.file("log.txt");
    const std::string panel_path = dir.file("panel.csv");
    save_panel(generate_panel(panel_truth(41)), panel_path);

    StudyConfig config;
    config.pre_years = {2010};
    config.post_years = {2011, 2012};
    config.reference_year = 2010;
    config.bootstrap_replicates = 100;
    config.seed = 7;
    const std::string config_path = dir.file("config.json");
    save_study_config(config, config_path);

    const std::string out1 = dir.dir("d1");
    REQUIRE(run_cli("did --panel \"" + panel_path + "\" --config \"" + config_path +
                        "\" --out \"" + out1 + "\"",
                    log) == 0);

    const std::string coefficients = read_file(out1 + "/coefficients.csv");
    CHECK(coefficients.rfind("term,mortality,mortality_se", 0) == 0);
    CHECK(coefficients.find("\nTREATED:YEAR_2012,") != std::string::npos);

    const json joint = read_json(out1 + "/joint_test.json");
    CHECK(joint.size() == 5);
    for (const char* key : {"lambda", "stat", "df1", "df2", "p"}) CHECK(joint.contains(key));
    CHECK(joint.at("p").get<double>() >= 0.0);
    CHECK(joint.at("p").get<double>() <= 1.0);

    const std::string margins = read_file(out1 + "/margins.csv");
    CHECK(margins.rfind("outcome,year,group,level,predicted_pct", 0) == 0);

    const std::string summary = read_file(out1 + "/did_summary.csv");
    CHECK(summary.find("reduction_pct") != std::string::npos);
    CHECK(summary.find("saved_count") != std::string::npos);

    const json manifest = read_json(out1 + "/manifest.json");
    CHECK(manifest.at("parameters").at("scheme") == "base");
    CHECK(manifest.at("parameters").at("bootstrap_replicates") == 100);
    CHECK(manifest.at("parameters").at("converged") == true);
    CHECK(manifest.at("outputs").size() == 4);

    SUBCASE("a rerun with the same seed reproduces every artifact") {
        const std::string out2 = dir.dir("d2");
        REQUIRE(run_cli("did --panel \"" + panel_path + "\" --config \"" + config_path +
                            "\" --out \"" + out2 + "\"",
                        log) == 0);
        for (const char* name :
             {"/coefficients.csv", "/joint_test.json", "/margins.csv", "/did_summary.csv"})
            CHECK(read_file(out2 + name) == read_file(out1 + name));
    }
    SUBCASE("the surgical scheme drops OR returns and adds the triple interaction") {
        const std::string out2 = dir.dir("surgical");
        REQUIRE(run_cli("did --panel \"" + panel_path + "\" --scheme surgical --config \"" +
                            config_path + "\" --out \"" + out2 + "\"",
                        log) == 0);
        const std::string table = read_file(out2 + "/coefficients.csv");
        CHECK(table.find("SURGICAL:TREATED:YEAR_2012") != std::string::npos);
        CHECK(table.find("return_or") == std::string::npos);
        // no savings values outside the base scheme: the last two columns of
        // every data row stay empty
        const std::string stacked = read_file(out2 + "/did_summary.csv");
        std::istringstream rows(stacked);
        std::string row;
        std::getline(rows, row);  // header
        bool all_unfilled = true;
        std::size_t data_rows = 0;
        while (std::getline(rows, row)) {
            ++data_rows;
            all_unfilled = all_unfilled && row.size() >= 2 && row.substr(row.size() - 2) == ",,";
        }
        CHECK(data_rows > 0);
        CHECK(all_unfilled);
        CHECK(stacked.find("surgical") != std::string::npos);
        CHECK(stacked.find("medical") != std::string::npos);
    }
    SUBCASE("configuration and input errors map to the documented exit codes") {
        CHECK(run_cli("did --panel \"" + panel_path + "\" --scheme bogus --out \"" +
                          dir.dir("e1") + "\"",
                      log) == 2);
        StudyConfig small = config;
        small.bootstrap_replicates = 50;  // below the supported minimum
        const std::string small_path = dir.file("small.json");
        save_study_config(small, small_path);
        CHECK(run_cli("did --panel \"" + panel_path + "\" --config \"" + small_path +
                          "\" --out \"" + dir.dir("e2") + "\"",
                      log) == 2);
        CHECK(run_cli("did --panel \"" + dir.file("absent.csv") + "\" --out \"" +
                          dir.dir("e3") + "\"",
                      log) == 1);
    }
}

TEST_CASE("simulate runs a reproducible panel-mode recovery study") {
    TempDir dir;
    const std::string log = dir.file("log.txt");
    GeneratorTruth truth = panel_truth(51);
    truth.hospitals = 10;
    truth.years = {2010, 2011};
    truth.panel[0].treated_year = {{2011, -0.01}};
    const std::string truth_path = dir.file("truth.json");
    save_generator_truth(truth, truth_path);

    const std::string out1 = dir.dir("s1");
    REQUIRE(run_cli("simulate --truth \"" + truth_path +
                        "\" --mode panel --replicates 50 --no-bootstrap --out \"" + out1 + "\"",
                    log) == 0);
    const std::string csv = read_file(out1 + "/recovery.csv");
    CHECK(csv.rfind("term,outcome,truth,", 0) == 0);
    CHECK(line_count(csv) == 1u + 5u);  // one term x five outcomes
    const json report = read_json(out1 + "/recovery.json");
    CHECK(report.at("mode") == "panel_only");
    CHECK(report.at("failed_replicates") == 0);
    const json manifest = read_json(out1 + "/manifest.json");
    CHECK(manifest.at("parameters").at("bootstrap") == false);
    CHECK(manifest.at("parameters").at("replicates") == 50);

    SUBCASE("a rerun is byte-identical") {
        const std::string out2 = dir.dir("s2");
        REQUIRE(run_cli("simulate --truth \"" + truth_path +
                            "\" --mode panel --replicates 50 --no-bootstrap --out \"" + out2 +
                            "\"",
                        log) == 0);
        CHECK(read_file(out2 + "/recovery.csv") == csv);
        CHECK(read_file(out2 + "/recovery.json") == read_file(out1 + "/recovery.json"));
    }
    SUBCASE("option abuse maps to configuration errors") {
        CHECK(run_cli("simulate --truth \"" + truth_path +
                          "\" --mode panel --replicates 10 --no-bootstrap --out \"" +
                          dir.dir("e1") + "\"",
                      log) == 2);
        CHECK(run_cli("simulate --truth \"" + truth_path + "\" --mode sideways --out \"" +
                          dir.dir("e2") + "\"",
                      log) == 2);
        CHECK(run_cli("simulate --truth \"" + dir.file("absent.json") + "\" --out \"" +
                          dir.dir("e3") + "\"",
                      log) == 1);
    }
}
