#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "p4p/core.hpp"
#include "p4p/numerics.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// Stage one: multilevel logistic risk adjustment.
//
// Per outcome, a Bernoulli GLMM with logit link:
//   logit P(y=1) = alpha + eta'x + mu[ward-year] + nu[hospital-year],
//   mu ~ N(0, sigma_mu_sq), nu ~ N(0, sigma_nu_sq),
// fit by Laplace-approximate maximum likelihood: penalized IRLS over
// (alpha, eta, mu, nu) inside a quasi-Newton search over the two
// log-variances. Ward-years nest in hospital-years, so the random-effect
// Hessian is block diagonal per hospital-year and solves are linear in n.
// ---------------------------------------------------------------------------

struct LogisticMixedSpec {
    Outcome outcome = Outcome::mortality;
    std::vector<std::string> covariates{"gender", "age", "intcare", "drg_weight", "comorbidity"};
    // Degenerate limit used by oracle checks: no random effects, plain
    // logistic regression; sigma estimates reported as exactly zero.
    bool fix_variances_to_zero = false;
    // Outer stop: gradient norm below this times the objective magnitude.
    double gradient_tol = 1e-5;
    int max_outer_iterations = 200;
};

struct WardYearKey {
    std::string hospital_id;
    std::string ward_id;
    int year = 0;
    auto operator<=>(const WardYearKey&) const = default;
};

struct HospitalYearKey {
    std::string hospital_id;
    int year = 0;
    auto operator<=>(const HospitalYearKey&) const = default;
};

struct LogisticMixedFit {
    Outcome outcome = Outcome::mortality;
    std::vector<std::string> covariates;

    double alpha = 0.0;  // intercept
    Vector eta;          // fixed-effect coefficients, aligned with covariates
    Vector beta_se;      // joint-information SEs for (alpha, eta...)

    double sigma_mu_sq = 0.0;  // ward-year variance
    double sigma_nu_sq = 0.0;  // hospital-year variance

    std::vector<WardYearKey> ward_years;  // sorted
    Vector mu_hat;                        // posterior modes, aligned with ward_years
    std::vector<HospitalYearKey> hospital_years;
    Vector nu_hat;

    double loglik = 0.0;  // maximized Laplace objective
    bool converged = false;
    int outer_iterations = 0;

    int ward_year_index(const WardYearKey& k) const;        // -1 if unseen
    int hospital_year_index(const HospitalYearKey& k) const;

private:
    friend LogisticMixedFit fit_logistic_mixed(const AdmissionDataset&, const LogisticMixedSpec&);
    std::map<WardYearKey, int> ward_index_;
    std::map<HospitalYearKey, int> hospital_index_;
};

// Fits on the records where the outcome is defined (all records, except that
// return_or uses surgical wards only). Throws SeparationError,
// StructureError (fewer than 2 ward-years or fewer than 2 hospitals),
// DesignError (unknown covariate name). Non-convergence is flagged, not thrown.
LogisticMixedFit fit_logistic_mixed(const AdmissionDataset& ds, const LogisticMixedSpec& spec);

struct PredictionResult {
    // Aligned with ds.records(); NaN where the outcome is undefined
    // (return_or on medical wards). All defined values lie in (0, 1).
    std::vector<double> probabilities;
    // Records predicted with mu = nu = 0 because their ward-year was unseen.
    std::size_t population_level_records = 0;
};

PredictionResult predict_probabilities(const LogisticMixedFit& fit, const AdmissionDataset& ds);

// ---------------------------------------------------------------------------
// Ward-month panel
// ---------------------------------------------------------------------------

struct PanelCell {
    std::string hospital_id;
    std::string ward_id;
    int year = 0;
    int month = 0;
    int month_index = 0;  // 12·(year − first_year) + month
    int treated = 0;
    int surgical = 0;
    Ownership ownership = Ownership::public_owned;
    int n_patients = 0;
    // mean predicted probability per outcome; ho[return_or] = NaN for
    // medical wards (structurally missing, never zero-filled)
    std::array<double, kOutcomeCount> ho{};

    bool ho_defined(Outcome o) const { return o != Outcome::return_or || surgical == 1; }
};

struct PanelDataset {
    int first_year = 0;
    std::vector<PanelCell> cells;  // sorted by (hospital_id, ward_id, year, month); keys unique

    std::vector<std::string> hospitals() const;  // sorted distinct
    std::vector<int> years() const;              // sorted distinct
};

// One probability vector per outcome, each aligned with ds.records() (NaN on
// undefined rows), as produced by predict_probabilities.
using OutcomeProbabilities = std::array<std::vector<double>, kOutcomeCount>;

// Averages predicted probabilities within each (hospital, ward, year, month)
// cell; empty cells are absent. The config supplies the month_index origin.
PanelDataset collapse_to_panel(const AdmissionDataset& ds, const OutcomeProbabilities& probs,
                               const StudyConfig& config);

void save_panel(const PanelDataset& panel, const std::string& path);
PanelDataset load_panel(const std::string& path);

// Group-stability checks on the collapsed panel (same report as the
// record-level overload): switching wards, attrition, empty groups per year.
DidAssumptionReport validate_did_assumptions(const PanelDataset& panel);

}  // namespace p4p
