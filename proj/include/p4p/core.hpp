#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "p4p/errors.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// Outcomes and ownership
// ---------------------------------------------------------------------------

enum class Outcome : int {
    mortality = 0,
    readmissions = 1,
    return_or = 2,  // returns to the operating room; defined only on surgical wards
    transfers = 3,
    voldisch = 4,
};

inline constexpr int kOutcomeCount = 5;
inline constexpr std::array<Outcome, kOutcomeCount> kAllOutcomes = {
    Outcome::mortality, Outcome::readmissions, Outcome::return_or,
    Outcome::transfers, Outcome::voldisch};

std::string_view outcome_name(Outcome o);          // "mortality", "readmissions", ...
std::string_view outcome_panel_column(Outcome o);  // "ho_mortality", ..., "ho_return", ...
Outcome parse_outcome(std::string_view name);      // throws ConfigError on unknown name

enum class Ownership : int {
    public_owned = 0,
    private_profit = 1,
    private_nonprofit = 2,
};

std::string_view ownership_label(Ownership o);     // CSV labels PUBLIC / PROFIT / NOPROFIT
Ownership parse_ownership(std::string_view label); // throws ConfigError on unknown label

// ---------------------------------------------------------------------------
// Records and datasets
// ---------------------------------------------------------------------------

struct AdmissionRecord {
    std::string hospital_id;
    std::string ward_id;  // unique within hospital
    int year = 0;
    int month = 0;  // 1..12

    // patient-level covariates
    int gender = 0;          // binary
    double age = 0.0;        // non-negative years
    int intcare = 0;         // intensive-care transits
    double drg_weight = 0.0; // reimbursement weight
    int comorbidity = 0;     // Elixhauser count

    // ward/hospital attributes, constant within (hospital_id, ward_id)
    int technology = 0;
    int teaching = 0;
    int specialised = 0;
    int surgical = 0;
    Ownership ownership = Ownership::public_owned;
    int treated = 0;

    // binary outcomes; the return_or slot is meaningful only when surgical = 1
    std::array<int, kOutcomeCount> outcomes{};

    int outcome(Outcome o) const { return outcomes[static_cast<int>(o)]; }
    bool outcome_defined(Outcome o) const { return o != Outcome::return_or || surgical == 1; }
};

// Total lexicographic order over every field; used to fix summation order so
// estimates are exactly insensitive to input row permutation.
bool record_before(const AdmissionRecord& a, const AdmissionRecord& b);

// Covariate lookup by column name (gender, age, intcare, drg_weight,
// comorbidity, technology, teaching, specialised). Throws DesignError.
double covariate_value(const AdmissionRecord& r, std::string_view name);

// One (hospital, ward) group with its constant attributes and member rows.
struct WardGroup {
    std::string hospital_id;
    std::string ward_id;
    int treated = 0;
    int surgical = 0;
    int technology = 0;
    int teaching = 0;
    int specialised = 0;
    Ownership ownership = Ownership::public_owned;
    std::vector<std::size_t> rows;  // indices into records(), load order
    std::vector<int> years;         // sorted distinct years with admissions
};

class AdmissionDataset {
public:
    // Validates every record invariant (month range, binary fields,
    // non-negative covariates, return_or defined iff surgical) and the
    // constancy of ward attributes across rows. Throws ValidationError.
    explicit AdmissionDataset(std::vector<AdmissionRecord> records);

    const std::vector<AdmissionRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }

    // Wards sorted by (hospital_id, ward_id); hospitals sorted and distinct.
    const std::vector<WardGroup>& wards() const { return wards_; }
    const std::vector<std::string>& hospitals() const { return hospitals_; }
    std::vector<int> years() const;  // sorted distinct years observed

private:
    std::vector<AdmissionRecord> records_;
    std::vector<WardGroup> wards_;
    std::vector<std::string> hospitals_;
};

// ---------------------------------------------------------------------------
// Study configuration
// ---------------------------------------------------------------------------

struct Tolerances {
    double glmm_gradient_tol = 1e-5;   // outer quasi-Newton gradient norm
    int glmm_max_outer_iterations = 200;
    double em_rel_tol = 1e-9;          // relative log-likelihood change
    int em_max_iterations = 2000;
};

struct StudyConfig {
    std::vector<int> pre_years{2010, 2011};
    std::vector<int> post_years{2012, 2013};
    int reference_year = 2010;
    std::vector<Outcome> outcomes{kAllOutcomes.begin(), kAllOutcomes.end()};
    int bootstrap_replicates = 200;
    std::uint64_t seed = 20120101;
    Tolerances tolerances;

    void validate() const;  // throws ConfigError

    std::vector<int> years() const;  // sorted pre ∪ post
    int first_year() const;
    bool in_window(int year) const;
    // 1..12·nyears, continuous across years (month 1 of the first year = 1)
    int month_index(int year, int month) const;
};

StudyConfig load_study_config(const std::string& path);           // JSON file
StudyConfig parse_study_config_json(const std::string& text);     // JSON text
void save_study_config(const StudyConfig& config, const std::string& path);

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

// Strictly parses the admissions CSV (exact column set, header required) and
// validates against the config's year window. Row order is preserved.
// Throws IoError (missing file), SchemaError (malformed cell, line + column),
// ValidationError (semantic violations such as a switching ward).
AdmissionDataset load_admissions(const std::string& path, const StudyConfig& config);

// Canonical column order; return_or written as the empty string for medical
// wards; floats in shortest round-trip form. load(save(ds)) == ds.
void save_admissions(const AdmissionDataset& ds, const std::string& path);

// ---------------------------------------------------------------------------
// Descriptive summaries
// ---------------------------------------------------------------------------

struct SummaryCell {
    double mean = 0.0;
    double sd = 0.0;  // population (divide-by-n) standard deviation
    std::int64_t n = 0;
};

struct SummaryTable {
    std::vector<int> years;              // sorted
    std::vector<std::string> variables;  // fixed reporting order
    // cells[variable index][year index]; n = 0 marks an empty cell
    std::vector<std::vector<SummaryCell>> cells;

    const SummaryCell& at(std::string_view variable, int year) const;  // throws Error
    void save_csv(const std::string& path) const;
};

// Per-year mean and population sd of every covariate, ward attribute
// (ownership expanded to own_public / own_profit / own_noprofit), and outcome;
// return_or summarized over surgical admissions only.
SummaryTable summarize(const AdmissionDataset& ds);

// ---------------------------------------------------------------------------
// Design-assumption validation
// ---------------------------------------------------------------------------

struct DidAssumptionReport {
    // wards whose treated flag is not constant across rows; must be empty
    std::vector<std::string> switching_wards;
    // wards absent from some observed year: "H03/W1 absent in 2013" (warning)
    std::vector<std::string> attrition;
    // observed years with an empty treatment or control group (fatal)
    std::vector<int> years_without_treated;
    std::vector<int> years_without_control;

    bool fatal() const;
    std::string to_string() const;
};

// Checks the group-stability assumptions the DID design relies on: no ward
// switches groups, attrition is surfaced, and both groups are populated in
// every observed year. Fatal conditions throw nothing here; callers decide.
DidAssumptionReport validate_did_assumptions(const AdmissionDataset& ds);

}  // namespace p4p
