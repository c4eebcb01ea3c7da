#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "p4p/core.hpp"
#include "p4p/did.hpp"
#include "p4p/riskadjust.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// Ground-truth description for the synthetic-data oracle
//
// Two generating modes share one parameter set:
//  * patient mode (generate_synthetic): Bernoulli outcomes with the DID
//    shifts injected on the logit scale; the implied panel-level effect
//    differs from the logit shift through the link and is obtained with
//    panel_truth_did rather than assumed.
//  * panel mode (generate_panel): ward-month outcome means drawn from the
//    second-stage model itself (Gaussian, hospital intercepts, residual
//    covariance sigma) — correctly specified for fit_multivariate_mixed.
//    Parameters should keep the means well inside [0,1]; values are not
//    clamped.
// ---------------------------------------------------------------------------

struct LevelShifts {
    double main = 0.0;                       // level main effect
    std::map<int, double> year;              // level × year
    double treated = 0.0;                    // level × treated
    std::map<int, double> treated_year;      // level × treated × year
};

struct OutcomePatientTruth {
    double alpha = 0.0;                      // logit-scale intercept
    std::vector<double> eta = {0, 0, 0, 0, 0};  // gender, age, intcare, drg_weight, comorbidity
    double sigma_mu_sq = 0.0;                // ward-year intercept variance
    double sigma_nu_sq = 0.0;                // hospital-year intercept variance
};

struct OutcomePanelTruth {
    double intercept = 0.1;                  // panel mode baseline mean
    double treated = 0.0;                    // group main effect
    std::map<int, double> year;              // common year shocks
    std::map<int, double> treated_year;      // the DID effects under recovery
    double month = 0.0;                      // linear month-index trend
    double sigma_alpha_sq = 0.0;             // hospital intercept variance (panel mode)
    LevelShifts surgical, profit, noprofit;  // extended-scheme shifts
};

struct GeneratorTruth {
    std::array<OutcomePatientTruth, kOutcomeCount> patient;
    std::array<OutcomePanelTruth, kOutcomeCount> panel;
    Matrix sigma;  // panel-mode residual covariance; defaults to 1e-4 * I

    int hospitals = 40;
    int wards_per_hospital = 2;
    int patients_per_ward_month = 10;
    double treated_fraction = 0.3;
    double surgical_fraction = 0.5;
    std::array<double, 3> ownership_mix = {0.7, 0.2, 0.1};  // public, profit, noprofit
    std::vector<int> years = {2010, 2011, 2012, 2013};
    std::uint64_t seed = 1;

    GeneratorTruth();
    void validate() const;  // throws ConfigError
};

GeneratorTruth parse_generator_truth_json(const std::string& text);
GeneratorTruth load_generator_truth(const std::string& path);
void save_generator_truth(const GeneratorTruth& truth, const std::string& path);

// Patient-level draws per the risk model with logit-scale DID shifts;
// return_or generated only on surgical wards. Deterministic per seed.
AdmissionDataset generate_synthetic(const GeneratorTruth& truth);

// Ward-month panel drawn from the second-stage model; return_or masked on
// medical wards. Deterministic per seed.
PanelDataset generate_panel(const GeneratorTruth& truth);

// Brute-force DID of unweighted group-year cell means; the independent oracle
// for delta on designs without a MONTH trend.
double four_means_did(const PanelDataset& panel, Outcome outcome, int pre_year, int post_year);

// Large-sample panel-level DID implied by the patient model for
// TREATED:YEAR_<year> vs the first year, evaluated by Monte-Carlo probe draws
// with common random numbers. This, not the logit shift, is the recovery
// target for end-to-end runs.
double panel_truth_did(const GeneratorTruth& truth, Outcome outcome, int year,
                       int probe_draws = 1'000'000);

// ---------------------------------------------------------------------------
// Recovery studies
// ---------------------------------------------------------------------------

enum class RecoveryMode {
    full_pipeline,  // generate admissions, risk-adjust, collapse, fit
    panel_only      // generate the panel directly, fit
};

struct RecoveryOptions {
    RecoveryMode mode = RecoveryMode::full_pipeline;
    int replicates = 200;  // at least 50
    bool run_bootstrap = false;
    int bootstrap_replicates = 200;
    int workers = 1;
    InteractionScheme scheme;
    MvmmOptions fit;
    Tolerances stage_one_tolerances;
    int probe_draws = 1'000'000;
};

struct RecoveryRow {
    std::string term;
    Outcome outcome = Outcome::mortality;
    double truth = 0.0;
    double mean_estimate = 0.0;
    double bias = 0.0;
    double empirical_se = 0.0;  // across replicates
    double mc_se = 0.0;         // empirical_se / sqrt(replicates used)
    double coverage = 0.0;      // NaN when the bootstrap is off
    int replicates_used = 0;
};

struct RecoveryReport {
    std::vector<RecoveryRow> rows;  // delta terms × outcomes
    int replicates = 0;
    int failed_replicates = 0;
    RecoveryMode mode = RecoveryMode::full_pipeline;
    std::uint64_t seed = 0;

    const RecoveryRow& at(const std::string& term, Outcome o) const;
    void save_csv(const std::string& path) const;
    void save_json(const std::string& path) const;
};

// Replicate r uses the derived seed (truth.seed, r); failures are counted and
// dropped. Throws ConfigError when replicates < 50.
RecoveryReport recovery_study(const GeneratorTruth& truth, const RecoveryOptions& options = {});

}  // namespace p4p
