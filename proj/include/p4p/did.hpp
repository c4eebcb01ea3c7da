#pragma once

#include <map>
#include <string>
#include <vector>

#include "p4p/core.hpp"
#include "p4p/numerics.hpp"
#include "p4p/riskadjust.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// Stage two: multivariate difference-in-differences on the ward-month panel.
//
// Per outcome k:
//   ho_ik = x_i' b_k + alpha_{h(i),k} + eps_ik
// with hospital random intercepts independent across outcomes and an
// unstructured K×K residual covariance Sigma shared by all cells. RETURN is
// structurally missing on medical wards and is marginalized, not dropped.
// ---------------------------------------------------------------------------

enum class SchemeKind { base, surgical, ownership };

std::string_view scheme_name(SchemeKind k);
SchemeKind parse_scheme(std::string_view name);

struct InteractionScheme {
    SchemeKind kind = SchemeKind::base;
    int reference_year = 2010;  // fixed references: medical wards, public ownership

    // surgical drops return_or (its triple interaction would be collinear on
    // the rows where the outcome exists); base and ownership keep all five
    std::vector<Outcome> outcomes() const;
};

struct DesignRowInfo {
    int year = 0;
    int month_index = 0;
    int treated = 0;
    int surgical = 0;
    Ownership ownership = Ownership::public_owned;
    int n_patients = 0;
    int hospital = 0;  // index into DidDesign::hospitals
};

struct BuildOptions {
    // MONTH enters linearly with one slope per outcome; switched off for
    // oracle comparisons against plain four-means DID
    bool include_month = true;
};

struct DidDesign {
    InteractionScheme scheme;
    std::vector<std::string> column_names;  // p, "intercept" first
    std::vector<Outcome> outcomes;          // K response columns
    Matrix x;                               // n × p
    Matrix y;                               // n × K, NaN = structurally missing
    std::vector<DesignRowInfo> rows;        // n
    std::vector<std::string> hospitals;     // sorted distinct ids
    std::vector<int> years;                 // sorted distinct years
};

// One row per panel cell; indicator coding against the scheme references;
// throws DesignError on collinear columns (named) and when the panel fails
// the group-stability assumptions.
DidDesign build_design(const PanelDataset& panel, const InteractionScheme& scheme,
                       const BuildOptions& options = {});

struct MultivariateMixedFit;

struct MvmmOptions {
    double em_rel_tol = 1e-9;  // relative observed-log-likelihood change
    int em_max_iterations = 2000;
    // quasi-Newton polish of the variance parameters (profile likelihood with
    // GLS fixed effects); off inside bootstrap replicates for speed
    bool refine = false;
    bool fix_hospital_variance_zero = false;  // drop alpha entirely
    bool sigma_diagonal = false;              // constrain Sigma to a diagonal
    bool weight_by_n = false;                 // n_patients-weighted sensitivity fit

    // cluster frequency weights, one per design hospital; resampled-out
    // hospitals carry 0, duplicated draws count > 1 (cluster bootstrap)
    const std::vector<double>* hospital_multiplicity = nullptr;
    // start EM from a previous fit's parameters instead of the OLS seed
    const MultivariateMixedFit* warm_start = nullptr;
};

struct MultivariateMixedFit {
    InteractionScheme scheme;
    std::vector<std::string> column_names;  // p
    std::vector<Outcome> outcomes;          // K
    Matrix b;                               // p × K fixed effects
    Vector sigma_alpha_sq;                  // K hospital-intercept variances
    Matrix sigma;                           // K × K residual covariance
    double loglik = 0.0;
    bool converged = false;
    int em_iterations = 0;
    bool ridged = false;   // Sigma update needed a 1e-8 diagonal ridge
    bool refined = false;

    double coefficient(const std::string& term, Outcome o) const;  // throws Error
};

// Maximum-likelihood fit by EM on per-hospital sufficient statistics with a
// joint Gaussian E-step over (random intercepts, missing coordinates).
// Deterministic; non-convergence is flagged. Throws StructureError when the
// panel has < 2 hospitals or < 2 time points in either group.
MultivariateMixedFit fit_multivariate_mixed(const DidDesign& design,
                                            const MvmmOptions& options = {});

struct DidCoefficients {
    SchemeKind kind = SchemeKind::base;
    std::vector<std::string> terms;  // delta rows, then tau rows for extended schemes
    std::vector<Outcome> outcomes;
    Matrix estimates;  // terms × outcomes

    std::vector<std::string> delta_terms() const;  // TREATED:YEAR_j
    std::vector<std::string> tau_terms() const;    // throws SchemeMismatchError on base
    double estimate(const std::string& term, Outcome o) const;
};

// Pulls the treated×year rows (and the scheme's triple interactions) out of
// the fit, shaped term × outcome.
DidCoefficients extract_did_coefficients(const MultivariateMixedFit& fit);

}  // namespace p4p
