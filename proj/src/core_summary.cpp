#include "p4p/core.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "p4p/csv.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// SummaryTable
// ---------------------------------------------------------------------------

const SummaryCell& SummaryTable::at(std::string_view variable, int year) const {
    auto vit = std::find(variables.begin(), variables.end(), variable);
    if (vit == variables.end()) {
        throw Error("summary has no variable '" + std::string(variable) + "'");
    }
    auto yit = std::find(years.begin(), years.end(), year);
    if (yit == years.end()) throw Error("summary has no year " + std::to_string(year));
    return cells[vit - variables.begin()][yit - years.begin()];
}

void SummaryTable::save_csv(const std::string& path) const {
    CsvWriter writer(path);
    writer.write_row({"variable", "year", "mean", "sd", "n"});
    for (std::size_t v = 0; v < variables.size(); ++v) {
        for (std::size_t y = 0; y < years.size(); ++y) {
            const SummaryCell& c = cells[v][y];
            writer.write_row({variables[v], std::to_string(years[y]), format_double(c.mean),
                              format_double(c.sd), std::to_string(c.n)});
        }
    }
    writer.flush();
}

namespace {

struct Accumulator {
    double sum = 0.0;
    double sumsq = 0.0;
    std::int64_t n = 0;
    void add(double x) {
        sum += x;
        sumsq += x * x;
        ++n;
    }
    SummaryCell cell() const {
        SummaryCell c;
        c.n = n;
        if (n == 0) return c;
        c.mean = sum / static_cast<double>(n);
        const double var = std::max(0.0, sumsq / static_cast<double>(n) - c.mean * c.mean);
        c.sd = std::sqrt(var);
        return c;
    }
};

}  // namespace

SummaryTable summarize(const AdmissionDataset& ds) {
    SummaryTable table;
    table.years = ds.years();
    table.variables = {"gender",     "age",          "intcare",   "drg_weight", "comorbidity",
                       "technology", "teaching",     "specialised", "surgical", "own_public",
                       "own_profit", "own_noprofit", "treated",   "mortality",  "readmissions",
                       "return_or",  "transfers",    "voldisch",  "n_admissions"};

    std::map<int, std::size_t> year_pos;
    for (std::size_t i = 0; i < table.years.size(); ++i) year_pos[table.years[i]] = i;

    std::vector<std::vector<Accumulator>> acc(
        table.variables.size(), std::vector<Accumulator>(table.years.size()));

    auto var_pos = [&](std::string_view name) {
        return static_cast<std::size_t>(
            std::find(table.variables.begin(), table.variables.end(), name) -
            table.variables.begin());
    };
    const std::size_t v_treated = var_pos("treated");
    const std::size_t v_pub = var_pos("own_public");
    const std::size_t v_prof = var_pos("own_profit");
    const std::size_t v_nonp = var_pos("own_noprofit");
    const std::size_t v_nadm = var_pos("n_admissions");
    std::array<std::size_t, kOutcomeCount> v_out{};
    for (Outcome o : kAllOutcomes) v_out[static_cast<int>(o)] = var_pos(outcome_name(o));

    for (const AdmissionRecord& r : ds.records()) {
        const std::size_t y = year_pos.at(r.year);
        std::size_t v = 0;
        acc[v++][y].add(r.gender);
        acc[v++][y].add(r.age);
        acc[v++][y].add(r.intcare);
        acc[v++][y].add(r.drg_weight);
        acc[v++][y].add(r.comorbidity);
        acc[v++][y].add(r.technology);
        acc[v++][y].add(r.teaching);
        acc[v++][y].add(r.specialised);
        acc[v++][y].add(r.surgical);
        acc[v_pub][y].add(r.ownership == Ownership::public_owned ? 1.0 : 0.0);
        acc[v_prof][y].add(r.ownership == Ownership::private_profit ? 1.0 : 0.0);
        acc[v_nonp][y].add(r.ownership == Ownership::private_nonprofit ? 1.0 : 0.0);
        acc[v_treated][y].add(r.treated);
        for (Outcome o : kAllOutcomes) {
            if (!r.outcome_defined(o)) continue;
            acc[v_out[static_cast<int>(o)]][y].add(r.outcome(o));
        }
        acc[v_nadm][y].add(1.0);
    }

    table.cells.resize(table.variables.size());
    for (std::size_t v = 0; v < table.variables.size(); ++v) {
        table.cells[v].resize(table.years.size());
        for (std::size_t y = 0; y < table.years.size(); ++y) {
            table.cells[v][y] = acc[v][y].cell();
        }
    }
    // n_admissions reports a count, not a mean-of-ones
    for (std::size_t y = 0; y < table.years.size(); ++y) {
        SummaryCell& c = table.cells[v_nadm][y];
        c.mean = static_cast<double>(c.n);
        c.sd = 0.0;
    }
    return table;
}

// ---------------------------------------------------------------------------
// DID assumption validation
// ---------------------------------------------------------------------------

bool DidAssumptionReport::fatal() const {
    return !switching_wards.empty() || !years_without_treated.empty() ||
           !years_without_control.empty();
}

std::string DidAssumptionReport::to_string() const {
    std::ostringstream out;
    if (switching_wards.empty() && attrition.empty() && years_without_treated.empty() &&
        years_without_control.empty()) {
        out << "ok: no group switching, no attrition, both groups present in every year\n";
        return out.str();
    }
    for (const std::string& w : switching_wards) out << "fatal: ward switches group: " << w << '\n';
    for (int y : years_without_treated) out << "fatal: no treated ward in year " << y << '\n';
    for (int y : years_without_control) out << "fatal: no control ward in year " << y << '\n';
    for (const std::string& a : attrition) out << "warning: attrition: " << a << '\n';
    return out.str();
}

DidAssumptionReport validate_did_assumptions(const AdmissionDataset& ds) {
    DidAssumptionReport report;

    // re-scan record-level flags rather than trusting the ward index
    std::map<std::pair<std::string, std::string>, std::set<int>> treatments;
    for (const AdmissionRecord& r : ds.records()) {
        treatments[{r.hospital_id, r.ward_id}].insert(r.treated);
    }
    for (const auto& [key, flags] : treatments) {
        if (flags.size() > 1) report.switching_wards.push_back(key.first + "/" + key.second);
    }

    const std::vector<int> years = ds.years();
    std::map<int, std::array<int, 2>> group_counts;  // year -> {control, treated} ward counts
    for (int y : years) group_counts[y] = {0, 0};
    for (const WardGroup& w : ds.wards()) {
        for (int y : w.years) ++group_counts[y][w.treated];
        if (w.years.size() < years.size()) {
            std::string missing;
            for (int y : years) {
                if (!std::count(w.years.begin(), w.years.end(), y)) {
                    if (!missing.empty()) missing += ", ";
                    missing += std::to_string(y);
                }
            }
            report.attrition.push_back(w.hospital_id + "/" + w.ward_id + " absent in " + missing);
        }
    }
    for (int y : years) {
        if (group_counts[y][1] == 0) report.years_without_treated.push_back(y);
        if (group_counts[y][0] == 0) report.years_without_control.push_back(y);
    }
    return report;
}

}  // namespace p4p
