#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "p4p/core.hpp"
#include "p4p/errors.hpp"
#include "p4p/numerics.hpp"
#include "p4p/riskadjust.hpp"
#include "p4p/sim.hpp"

using namespace p4p;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("p4p_sim_test_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

bool records_equal(const AdmissionRecord& a, const AdmissionRecord& b) {
    return a.hospital_id == b.hospital_id && a.ward_id == b.ward_id && a.year == b.year &&
           a.month == b.month && a.gender == b.gender && a.age == b.age &&
           a.intcare == b.intcare && a.drg_weight == b.drg_weight &&
           a.comorbidity == b.comorbidity && a.technology == b.technology &&
           a.teaching == b.teaching && a.specialised == b.specialised &&
           a.surgical == b.surgical && a.ownership == b.ownership && a.treated == b.treated &&
           a.outcomes == b.outcomes;
}

PanelCell make_cell(const std::string& hospital, const std::string& ward, int year, int month,
                    int treated, double mortality_value) {
    PanelCell c;
    c.hospital_id = hospital;
    c.ward_id = ward;
    c.year = year;
    c.month = month;
    c.month_index = 12 * (year - 2010) + month;
    c.treated = treated;
    c.surgical = 1;
    c.n_patients = 10;
    c.ho.fill(mortality_value);
    return c;
}

}  // namespace

TEST_CASE("generator truth round-trips through JSON exactly") {
    GeneratorTruth truth;
    truth.seed = 777;
    truth.hospitals = 23;
    truth.wards_per_hospital = 3;
    truth.patients_per_ward_month = 7;
    truth.treated_fraction = 0.25;
    truth.surgical_fraction = 0.625;
    truth.ownership_mix = {0.5, 0.375, 0.125};
    truth.years = {2011, 2012, 2014};
    truth.patient[0].alpha = -2.5;
    truth.patient[0].eta = {0.125, 0.01, 0.25, -0.0625, 0.3125};
    truth.patient[0].sigma_mu_sq = 0.375;
    truth.patient[1].sigma_nu_sq = 0.0625;
    truth.panel[0].intercept = 0.09375;
    truth.panel[0].treated = 0.015625;
    truth.panel[0].year = {{2012, -0.0078125}, {2014, 0.00390625}};
    truth.panel[0].treated_year = {{2012, -0.005}, {2014, -0.011}};
    truth.panel[0].month = 0.0001220703125;
    truth.panel[0].sigma_alpha_sq = 0.00048828125;
    truth.panel[2].surgical.main = 0.03125;
    truth.panel[2].surgical.treated = -0.015625;
    truth.panel[2].surgical.year = {{2014, 0.0625}};
    truth.panel[2].surgical.treated_year = {{2012, -0.03125}};
    truth.panel[3].profit.main = 0.25;
    truth.panel[4].noprofit.treated_year = {{2014, 0.125}};
    truth.sigma = Matrix::Identity(kOutcomeCount, kOutcomeCount) * 2.5e-4;
    truth.sigma(0, 1) = truth.sigma(1, 0) = 1e-4;

    TempDir dir;
    const std::string path = dir.file("truth.json");
    save_generator_truth(truth, path);
    const GeneratorTruth loaded = load_generator_truth(path);

    CHECK(loaded.seed == truth.seed);
    CHECK(loaded.hospitals == truth.hospitals);
    CHECK(loaded.wards_per_hospital == truth.wards_per_hospital);
    CHECK(loaded.patients_per_ward_month == truth.patients_per_ward_month);
    CHECK(loaded.treated_fraction == truth.treated_fraction);
    CHECK(loaded.surgical_fraction == truth.surgical_fraction);
    CHECK(loaded.ownership_mix == truth.ownership_mix);
    CHECK(loaded.years == truth.years);
    for (int k = 0; k < kOutcomeCount; ++k) {
        CAPTURE(k);
        CHECK(loaded.patient[k].alpha == truth.patient[k].alpha);
        CHECK(loaded.patient[k].eta == truth.patient[k].eta);
        CHECK(loaded.patient[k].sigma_mu_sq == truth.patient[k].sigma_mu_sq);
        CHECK(loaded.patient[k].sigma_nu_sq == truth.patient[k].sigma_nu_sq);
        CHECK(loaded.panel[k].intercept == truth.panel[k].intercept);
        CHECK(loaded.panel[k].treated == truth.panel[k].treated);
        CHECK(loaded.panel[k].year == truth.panel[k].year);
        CHECK(loaded.panel[k].treated_year == truth.panel[k].treated_year);
        CHECK(loaded.panel[k].month == truth.panel[k].month);
        CHECK(loaded.panel[k].sigma_alpha_sq == truth.panel[k].sigma_alpha_sq);
        CHECK(loaded.panel[k].surgical.main == truth.panel[k].surgical.main);
        CHECK(loaded.panel[k].surgical.treated == truth.panel[k].surgical.treated);
        CHECK(loaded.panel[k].surgical.year == truth.panel[k].surgical.year);
        CHECK(loaded.panel[k].surgical.treated_year == truth.panel[k].surgical.treated_year);
        CHECK(loaded.panel[k].profit.main == truth.panel[k].profit.main);
        CHECK(loaded.panel[k].noprofit.treated_year == truth.panel[k].noprofit.treated_year);
    }
    CHECK(loaded.sigma == truth.sigma);

    SUBCASE("an empty object keeps every constructor default") {
        const GeneratorTruth parsed = parse_generator_truth_json("{}");
        const GeneratorTruth defaults;
        CHECK(parsed.hospitals == defaults.hospitals);
        CHECK(parsed.years == defaults.years);
        CHECK(parsed.seed == defaults.seed);
        CHECK(parsed.patient[0].alpha == defaults.patient[0].alpha);
        CHECK(parsed.panel[1].intercept == defaults.panel[1].intercept);
        CHECK(parsed.sigma == defaults.sigma);
    }
}

TEST_CASE("generator truth validation rejects malformed parameter sets") {
    GeneratorTruth truth;

    SUBCASE("structure bounds") {
        truth.hospitals = 0;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.hospitals = 10000;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.hospitals = 40;
        truth.wards_per_hospital = 0;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.wards_per_hospital = 2;
        truth.patients_per_ward_month = 0;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
    }
    SUBCASE("fractions and mix") {
        truth.treated_fraction = 1.5;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.treated_fraction = 0.3;
        truth.surgical_fraction = -0.1;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.surgical_fraction = 0.5;
        truth.ownership_mix = {0.0, 0.0, 0.0};
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.ownership_mix = {0.7, -0.2, 0.5};
        CHECK_THROWS_AS(truth.validate(), ConfigError);
    }
    SUBCASE("years must be strictly increasing and non-empty") {
        truth.years = {};
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.years = {2011, 2011};
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.years = {2012, 2010};
        CHECK_THROWS_AS(truth.validate(), ConfigError);
    }
    SUBCASE("outcome parameters") {
        truth.patient[2].eta = {1.0, 2.0};
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.patient[2].eta = {0, 0, 0, 0, 0};
        truth.patient[1].sigma_mu_sq = -0.1;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.patient[1].sigma_mu_sq = 0.0;
        truth.panel[4].sigma_alpha_sq = -1e-6;
        CHECK_THROWS_AS(truth.validate(), ConfigError);
    }
    SUBCASE("residual covariance must be a symmetric positive-definite 5 x 5") {
        truth.sigma = Matrix::Identity(4, 4);
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.sigma = Matrix::Identity(kOutcomeCount, kOutcomeCount) * 1e-4;
        truth.sigma(0, 1) = 5e-5;  // asymmetric
        CHECK_THROWS_AS(truth.validate(), ConfigError);
        truth.sigma(1, 0) = 5e-5;
        truth.sigma(0, 0) = -1e-4;  // indefinite
        CHECK_THROWS_AS(truth.validate(), ConfigError);
    }
}

TEST_CASE("generator truth JSON parsing reports malformed fields") {
    CHECK_THROWS_AS(parse_generator_truth_json("not json"), ConfigError);
    CHECK_THROWS_AS(parse_generator_truth_json("[1,2]"), ConfigError);
    CHECK_THROWS_AS(
        parse_generator_truth_json(R"({"panel":{"mortality":{"treated_year":{"x":1}}}})"),
        ConfigError);
    CHECK_THROWS_AS(
        parse_generator_truth_json(R"({"panel":{"mortality":{"treated_year":{"2011":"a"}}}})"),
        ConfigError);
    CHECK_THROWS_AS(parse_generator_truth_json(R"({"sigma":[[1,0],[0,1]]})"), ConfigError);
    CHECK_THROWS_AS(parse_generator_truth_json(R"({"structure":{"hospitals":"many"}})"),
                    ConfigError);
    // parse failures include validation: years out of order arrive as ConfigError too
    CHECK_THROWS_AS(parse_generator_truth_json(R"({"structure":{"years":[2012,2010]}})"),
                    ConfigError);
}

TEST_CASE("patient-mode generation is deterministic and respects the declared structure") {
    GeneratorTruth truth;
    truth.hospitals = 12;
    truth.wards_per_hospital = 2;
    truth.patients_per_ward_month = 3;
    truth.years = {2010, 2011};
    truth.seed = 4321;

    const AdmissionDataset a = generate_synthetic(truth);
    const AdmissionDataset b = generate_synthetic(truth);
    REQUIRE(a.records().size() == b.records().size());
    CHECK(a.records().size() == 12u * 2u * 2u * 12u * 3u);
    bool all_equal = true;
    for (std::size_t i = 0; i < a.records().size(); ++i)
        all_equal = all_equal && records_equal(a.records()[i], b.records()[i]);
    CHECK(all_equal);

    std::set<std::string> hospitals, wards;
    bool covariates_feasible = true, constant_flags = true;
    int treated_wards = 0, surgical_wards = 0, ward_count = 0;
    for (const AdmissionRecord& r : a.records()) {
        hospitals.insert(r.hospital_id);
        wards.insert(r.hospital_id + "/" + r.ward_id);
        covariates_feasible = covariates_feasible && r.age >= 2.0 && r.intcare >= 0 &&
                              r.drg_weight > 0.0 && r.comorbidity >= 0 &&
                              (r.gender == 0 || r.gender == 1);
        for (int k = 0; k < kOutcomeCount; ++k)
            covariates_feasible =
                covariates_feasible && (r.outcomes[k] == 0 || r.outcomes[k] == 1);
    }
    CHECK(hospitals.size() == 12);
    CHECK(wards.size() == 24);
    CHECK(covariates_feasible);

    // ward flags are constant over time and both comparison groups exist
    std::map<std::string, std::pair<int, int>> flags;
    for (const AdmissionRecord& r : a.records()) {
        const std::string key = r.hospital_id + "/" + r.ward_id;
        auto [it, inserted] = flags.emplace(key, std::make_pair(r.treated, r.surgical));
        if (!inserted)
            constant_flags =
                constant_flags && it->second == std::make_pair(r.treated, r.surgical);
    }
    CHECK(constant_flags);
    for (const auto& [key, f] : flags) {
        ward_count += 1;
        treated_wards += f.first;
        surgical_wards += f.second;
    }
    CHECK(treated_wards > 0);
    CHECK(treated_wards < ward_count);
    CHECK(surgical_wards < ward_count);

    SUBCASE("a different seed changes the draw") {
        GeneratorTruth other = truth;
        other.seed = 4322;
        const AdmissionDataset c = generate_synthetic(other);
        REQUIRE(c.records().size() == a.records().size());
        bool any_difference = false;
        for (std::size_t i = 0; i < a.records().size(); ++i)
            any_difference = any_difference || !records_equal(a.records()[i], c.records()[i]);
        CHECK(any_difference);
    }
    SUBCASE("the dataset passes the design assumption checks") {
        const DidAssumptionReport report = validate_did_assumptions(a);
        CHECK_FALSE(report.fatal());
    }
}

TEST_CASE("patient-mode draws match the truth rates in a large sample") {
    // default truth: zero variances, zero covariate effects, no DID shifts, so
    // every admission is Bernoulli(base rate) for each defined outcome
    GeneratorTruth truth;
    truth.hospitals = 40;
    truth.wards_per_hospital = 2;
    truth.patients_per_ward_month = 10;
    truth.years = {2010, 2011};
    truth.treated_fraction = 0.3;
    truth.seed = 99;

    const AdmissionDataset ds = generate_synthetic(truth);
    const double n = static_cast<double>(ds.records().size());
    REQUIRE(n == 40.0 * 2 * 2 * 12 * 10);

    const std::array<double, kOutcomeCount> base = {0.05, 0.12, 0.04, 0.05, 0.10};
    for (int k = 0; k < kOutcomeCount; ++k) {
        const Outcome o = kAllOutcomes[k];
        double sum = 0.0, count = 0.0;
        for (const AdmissionRecord& r : ds.records()) {
            if (!r.outcome_defined(o)) continue;
            sum += r.outcome(o);
            count += 1.0;
        }
        const double rate = sum / count;
        const double se = std::sqrt(base[k] * (1.0 - base[k]) / count);
        CAPTURE(outcome_name(o));
        CHECK(std::abs(rate - base[k]) < 4.0 * se);
        if (o == Outcome::return_or) CHECK(count < n);  // surgical wards only
    }
}

TEST_CASE("panel-mode generation is deterministic, masked, and centred on the truth") {
    GeneratorTruth truth;
    truth.hospitals = 40;
    truth.wards_per_hospital = 2;
    truth.surgical_fraction = 0.5;
    truth.seed = 2024;

    const PanelDataset a = generate_panel(truth);
    const PanelDataset b = generate_panel(truth);
    REQUIRE(a.cells.size() == 40u * 2u * 4u * 12u);
    REQUIRE(a.cells.size() == b.cells.size());
    bool identical = true, masking_right = true, month_index_right = true;
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        const PanelCell& x = a.cells[i];
        const PanelCell& y = b.cells[i];
        identical = identical && x.hospital_id == y.hospital_id && x.ward_id == y.ward_id &&
                    x.year == y.year && x.month == y.month && x.treated == y.treated;
        for (int k = 0; k < kOutcomeCount; ++k)
            identical = identical && (x.ho[k] == y.ho[k] ||
                                      (std::isnan(x.ho[k]) && std::isnan(y.ho[k])));
        const double ror = x.ho[static_cast<int>(Outcome::return_or)];
        masking_right = masking_right && (x.surgical == 1 ? std::isfinite(ror) : std::isnan(ror));
        month_index_right =
            month_index_right && x.month_index == 12 * (x.year - a.first_year) + x.month;
    }
    CHECK(identical);
    CHECK(masking_right);
    CHECK(month_index_right);

    // default truth has no shifts: each defined ho is N(intercept, 1e-4)
    const std::array<double, kOutcomeCount> base = {0.05, 0.12, 0.04, 0.05, 0.10};
    for (int k = 0; k < kOutcomeCount; ++k) {
        double sum = 0.0, count = 0.0;
        for (const PanelCell& cell : a.cells) {
            if (!cell.ho_defined(kAllOutcomes[k])) continue;
            sum += cell.ho[k];
            count += 1.0;
        }
        const double se = 0.01 / std::sqrt(count);
        CAPTURE(k);
        CHECK(std::abs(sum / count - base[k]) < 4.0 * se);
    }
}

TEST_CASE("four-means DID matches hand arithmetic on a constructed panel") {
    PanelDataset panel;
    panel.first_year = 2010;
    // treated pre {1, 3}, treated post {5, 7}, control pre {0, 2}, control post {1, 3}
    panel.cells.push_back(make_cell("H01", "W01", 2010, 1, 1, 1.0));
    panel.cells.push_back(make_cell("H01", "W01", 2010, 2, 1, 3.0));
    panel.cells.push_back(make_cell("H01", "W01", 2011, 1, 1, 5.0));
    panel.cells.push_back(make_cell("H01", "W01", 2011, 2, 1, 7.0));
    panel.cells.push_back(make_cell("H02", "W01", 2010, 1, 0, 0.0));
    panel.cells.push_back(make_cell("H02", "W01", 2010, 2, 0, 2.0));
    panel.cells.push_back(make_cell("H02", "W01", 2011, 1, 0, 1.0));
    panel.cells.push_back(make_cell("H02", "W01", 2011, 2, 0, 3.0));
    // a third year must not contaminate the 2010 vs 2011 contrast
    panel.cells.push_back(make_cell("H02", "W01", 2012, 1, 0, 50.0));

    CHECK(four_means_did(panel, Outcome::mortality, 2010, 2011) ==
          doctest::Approx((6.0 - 2.0) - (2.0 - 1.0)).epsilon(1e-14));

    SUBCASE("NaN cells are dropped, not averaged") {
        PanelCell masked = make_cell("H01", "W02", 2011, 1, 1, 1e6);
        masked.surgical = 0;
        masked.ho.fill(std::numeric_limits<double>::quiet_NaN());
        panel.cells.push_back(masked);
        CHECK(four_means_did(panel, Outcome::return_or, 2010, 2011) ==
              doctest::Approx(3.0).epsilon(1e-14));
    }
    SUBCASE("an empty group-year cell is an error") {
        CHECK_THROWS_AS(four_means_did(panel, Outcome::mortality, 2010, 2012),
                        StructureError);  // no treated cells in 2012
    }
}

TEST_CASE("the implied panel DID is exact when the patient model is degenerate") {
    // zero variances and zero covariate effects collapse the probe average to
    // four inverse-link evaluations
    GeneratorTruth truth;
    truth.years = {2010, 2011};
    const double alpha = truth.patient[0].alpha;
    truth.panel[0].treated = 0.1;
    truth.panel[0].year[2011] = 0.2;
    truth.panel[0].treated_year[2011] = 0.3;

    const double expected = (inv_logit(alpha + 0.1 + 0.2 + 0.3) - inv_logit(alpha + 0.1)) -
                            (inv_logit(alpha + 0.2) - inv_logit(alpha));
    CHECK(panel_truth_did(truth, Outcome::mortality, 2011, 2000) ==
          doctest::Approx(expected).epsilon(1e-13));

    // other outcomes have no injected shifts: implied DID is exactly zero
    CHECK(panel_truth_did(truth, Outcome::transfers, 2011, 2000) == 0.0);

    SUBCASE("probe year must be an observed non-reference year") {
        CHECK_THROWS_AS(panel_truth_did(truth, Outcome::mortality, 2010), ConfigError);
        CHECK_THROWS_AS(panel_truth_did(truth, Outcome::mortality, 2012), ConfigError);
        CHECK_THROWS_AS(panel_truth_did(truth, Outcome::mortality, 2011, 0), ConfigError);
    }
    SUBCASE("with covariate effects the implied DID moves away from the logit shift") {
        truth.patient[0].eta = {0.2, 0.01, 0.3, -0.1, 0.15};
        const double implied = panel_truth_did(truth, Outcome::mortality, 2011, 200000);
        CHECK(implied != doctest::Approx(expected).epsilon(1e-6));
        CHECK(std::isfinite(implied));
    }
}

TEST_CASE("recovery study options are validated") {
    GeneratorTruth truth;
    RecoveryOptions options;
    options.mode = RecoveryMode::panel_only;

    options.replicates = 10;
    CHECK_THROWS_AS(recovery_study(truth, options), ConfigError);
    options.replicates = 50;
    options.workers = 0;
    CHECK_THROWS_AS(recovery_study(truth, options), ConfigError);
    options.workers = 1;
    options.probe_draws = 999;
    CHECK_THROWS_AS(recovery_study(truth, options), ConfigError);
    options.probe_draws = 1000;
    GeneratorTruth one_year = truth;
    one_year.years = {2010};
    CHECK_THROWS_AS(recovery_study(one_year, options), ConfigError);
}

TEST_CASE("panel-mode recovery recentres on the injected coefficients") {
    GeneratorTruth truth;
    truth.hospitals = 10;
    truth.wards_per_hospital = 2;
    truth.patients_per_ward_month = 20;
    truth.treated_fraction = 0.4;
    truth.surgical_fraction = 1.0;
    truth.years = {2010, 2011};
    truth.seed = 515;
    truth.sigma = Matrix::Identity(kOutcomeCount, kOutcomeCount) * 2.5e-4;
    for (int r = 0; r < kOutcomeCount; ++r)
        for (int c = 0; c < kOutcomeCount; ++c)
            if (r != c) truth.sigma(r, c) = 1e-4;
    for (int k = 0; k < kOutcomeCount; ++k) {
        truth.panel[k].sigma_alpha_sq = 1e-4;
        truth.panel[k].treated_year[2011] = -0.01;
    }

    RecoveryOptions options;
    options.mode = RecoveryMode::panel_only;
    options.replicates = 50;
    options.run_bootstrap = false;

    const RecoveryReport report = recovery_study(truth, options);
    REQUIRE(report.rows.size() == 1u * kOutcomeCount);
    CHECK(report.replicates == 50);
    CHECK(report.failed_replicates == 0);
    CHECK(report.seed == 515);
    CHECK(report.mode == RecoveryMode::panel_only);

    for (const RecoveryRow& row : report.rows) {
        CAPTURE(outcome_name(row.outcome));
        CHECK(row.term == "TREATED:YEAR_2011");
        CHECK(row.truth == -0.01);  // panel mode targets the injected coefficient itself
        CHECK(row.replicates_used == 50);
        CHECK(std::isnan(row.coverage));  // bootstrap off
        CHECK(row.mc_se > 0.0);
        CHECK(std::abs(row.bias) < 3.0 * row.mc_se);
        CHECK(row.bias == doctest::Approx(row.mean_estimate - row.truth).epsilon(1e-14));
    }
    CHECK_THROWS_AS(report.at("TREATED:YEAR_2099", Outcome::mortality), Error);

    SUBCASE("worker count does not change the result") {
        RecoveryOptions parallel = options;
        parallel.workers = 3;
        const RecoveryReport again = recovery_study(truth, parallel);
        REQUIRE(again.rows.size() == report.rows.size());
        for (std::size_t i = 0; i < report.rows.size(); ++i) {
            CHECK(again.rows[i].mean_estimate == report.rows[i].mean_estimate);
            CHECK(again.rows[i].empirical_se == report.rows[i].empirical_se);
        }
    }
    SUBCASE("reports serialize to CSV and JSON") {
        TempDir dir;
        report.save_csv(dir.file("recovery.csv"));
        report.save_json(dir.file("recovery.json"));

        std::ifstream csv(dir.file("recovery.csv"));
        std::string line;
        std::vector<std::string> lines;
        while (std::getline(csv, line)) lines.push_back(line);
        REQUIRE(lines.size() == 1u + report.rows.size());
        CHECK(lines[0] ==
              "term,outcome,truth,mean_estimate,bias,empirical_se,mc_se,coverage,"
              "replicates_used");
        CHECK(lines[1].find("TREATED:YEAR_2011,mortality,") == 0);
        CHECK(lines[1].find(",,50") != std::string::npos);  // empty coverage column

        std::ifstream jf(dir.file("recovery.json"));
        const nlohmann::json j = nlohmann::json::parse(jf);
        CHECK(j.at("mode") == "panel_only");
        CHECK(j.at("replicates") == 50);
        CHECK(j.at("failed_replicates") == 0);
        CHECK(j.at("rows").size() == report.rows.size());
        CHECK_FALSE(j.at("rows").at(0).contains("coverage"));
        CHECK(j.at("rows").at(0).at("term") == "TREATED:YEAR_2011");
    }
}
