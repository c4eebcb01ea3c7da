#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p4p/did.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// Cluster bootstrap
//
// Hospitals are resampled with replacement; a hospital drawn twice enters the
// refit as two independent clusters. Index sets are pre-generated from the
// seed, so results do not depend on the worker count.
// ---------------------------------------------------------------------------

struct BootstrapOptions {
    int replicates = 200;  // B; fewer than 100 is rejected
    std::uint64_t seed = 0;
    int workers = 1;
    MvmmOptions fit;  // options for the full fit; replicate refits warm-start
                      // from it with the quasi-Newton polish switched off
};

struct BootstrapCoefficient {
    std::string term;
    Outcome outcome = Outcome::mortality;
    double estimate = 0.0;  // full-sample fit
    double se = 0.0;        // standard deviation across replicates
    double p = 1.0;         // normal approximation, 2*Phi(-|estimate/se|)
    double ci_low = 0.0;    // 2.5th replicate percentile
    double ci_high = 0.0;   // 97.5th replicate percentile
};

struct BootstrapResult {
    std::vector<std::string> terms;
    std::vector<Outcome> outcomes;
    std::vector<BootstrapCoefficient> coefficients;  // term-major, outcome-minor
    int replicates = 0;
    int n_failed = 0;
    bool valid = true;  // false when more than 10% of replicates failed
    std::uint64_t seed = 0;
    MultivariateMixedFit full_fit;

    const BootstrapCoefficient& at(const std::string& term, Outcome o) const;
};

// Throws ConfigError when replicates < 100. Replicates that fail to converge
// (or lose the group structure in the resample) are dropped and counted.
BootstrapResult cluster_bootstrap(const DidDesign& design, const BootstrapOptions& options);

// ---------------------------------------------------------------------------
// Joint parallel-trend test
// ---------------------------------------------------------------------------

struct JointTestResult {
    double lambda = 1.0;  // Wilks' lambda: det(E) / det(E + H)
    double stat = 0.0;    // Rao's F transformation
    double df1 = 0.0;
    double df2 = 0.0;
    double p = 1.0;
    std::string term;  // hypothesis row, e.g. TREATED:YEAR_2011
    int n_rows = 0;    // complete panel cells entering the test
};

// Tests the pre-period treated-by-year shift jointly across outcomes on the
// cells observing every outcome. placebo_year < 0 picks the second-smallest
// panel year. Throws DesignError when the residual cross-product matrix is
// rank deficient (suggesting an outcome should be removed).
JointTestResult wilks_parallel_trend_test(const PanelDataset& panel,
                                          const InteractionScheme& scheme = {},
                                          int placebo_year = -1);

// ---------------------------------------------------------------------------
// Presentation
// ---------------------------------------------------------------------------

// Significance stars: *** p<0.01, ** p<0.05, * p<0.1.
std::string significance_stars(double p);

struct CoefficientTable {
    std::vector<std::string> header;            // term, <outcome>, <outcome>_se, ...
    std::vector<std::vector<std::string>> rows;  // estimates with stars, "(se)"

    void save_csv(const std::string& path) const;
};

// Rows = model terms, columns = outcomes; the estimate cell carries the star
// code, the companion column the bracketed bootstrap SE.
CoefficientTable coefficient_table(const MultivariateMixedFit& fit, const BootstrapResult& boot);

}  // namespace p4p
