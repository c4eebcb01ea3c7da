#pragma once

#include <map>
#include <string>
#include <vector>

#include "p4p/did.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// Marginal effects on the percent scale
//
// Predictions put the hospital intercepts at zero and average MONTH within
// each year; extended schemes get one prediction per level (medical/surgical
// or public/profit/noprofit), the base scheme a single "all" level.
// ---------------------------------------------------------------------------

struct MarginalCell {
    Outcome outcome = Outcome::mortality;
    int year = 0;
    int treated = 0;
    std::string level;
    double predicted_pct = 0.0;
};

struct MarginalEffectsTable {
    std::vector<Outcome> outcomes;
    std::vector<int> years;
    std::vector<std::string> levels;
    std::vector<MarginalCell> cells;

    double predicted(Outcome o, int year, int treated, const std::string& level = "all") const;
    // treated minus control, percent
    double difference(Outcome o, int year, const std::string& level = "all") const;
    void save_csv(const std::string& path) const;
};

MarginalEffectsTable marginal_effects(const MultivariateMixedFit& fit, const DidDesign& design);

// ---------------------------------------------------------------------------
// Year-over-year DID reductions
// ---------------------------------------------------------------------------

struct DidSummary {
    std::vector<Outcome> outcomes;
    std::string level;
    std::vector<int> years;            // first comparison year onward
    std::vector<int> reduction_years;  // years[1:]
    Matrix differences_pct;            // outcomes × years, treated - control
    Matrix reductions_pct;             // outcomes × reduction_years,
                                       // difference(previous year) - difference(year)

    double difference(Outcome o, int year) const;
    double reduction(Outcome o, int year) const;
};

// first_comparison_year < 0 picks the table's second-smallest year (the last
// pre-treatment year under the default study window). Throws ConfigError when
// that year or a follow-up year is missing.
DidSummary did_reduction(const MarginalEffectsTable& table, const std::string& level = "all",
                         int first_comparison_year = -1);

// ---------------------------------------------------------------------------
// Event counts
// ---------------------------------------------------------------------------

struct SavingsEntry {
    Outcome outcome = Outcome::mortality;
    int year = 0;
    long long count = 0;     // round(|reduction| × treated volume)
    std::string direction;   // "saved" when the gap narrowed, else "excess"
};

// treated_volume: admissions in the treated group per reduction year.
std::vector<SavingsEntry> savings_count(const DidSummary& summary,
                                        const std::map<int, double>& treated_volume);

// One row per (outcome, year): difference, reduction and optional savings.
void save_did_summary_csv(const DidSummary& summary, const std::vector<SavingsEntry>* savings,
                          const std::string& path);

// Stacked blocks, one per summary (extended schemes report one level each);
// savings attach to rows of the first summary only.
void save_did_summary_csv(const std::vector<DidSummary>& summaries,
                          const std::vector<SavingsEntry>* first_summary_savings,
                          const std::string& path);

}  // namespace p4p
