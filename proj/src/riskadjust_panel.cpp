#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "p4p/csv.hpp"
#include "p4p/riskadjust.hpp"

namespace p4p {

std::vector<std::string> PanelDataset::hospitals() const {
    std::set<std::string> out;
    for (const PanelCell& c : cells) out.insert(c.hospital_id);
    return {out.begin(), out.end()};
}

std::vector<int> PanelDataset::years() const {
    std::set<int> out;
    for (const PanelCell& c : cells) out.insert(c.year);
    return {out.begin(), out.end()};
}

namespace {

using CellKey = std::tuple<std::string, std::string, int, int>;  // hospital, ward, year, month

CellKey key_of(const PanelCell& c) { return {c.hospital_id, c.ward_id, c.year, c.month}; }

}  // namespace

PanelDataset collapse_to_panel(const AdmissionDataset& ds, const OutcomeProbabilities& probs,
                               const StudyConfig& config) {
    for (Outcome o : kAllOutcomes) {
        if (probs[static_cast<int>(o)].size() != ds.size()) {
            throw Error("probability vector for " + std::string(outcome_name(o)) +
                        " is not aligned with the dataset (" +
                        std::to_string(probs[static_cast<int>(o)].size()) + " vs " +
                        std::to_string(ds.size()) + " records)");
        }
    }

    struct Accum {
        std::array<double, kOutcomeCount> sum{};
        std::array<int, kOutcomeCount> n{};
        int n_patients = 0;
        std::size_t any_row = 0;
    };
    std::map<CellKey, Accum> groups;

    // fixed accumulation order: canonical record order, not input order
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return record_before(ds.records()[a], ds.records()[b]);
    });

    for (std::size_t i : order) {
        const AdmissionRecord& r = ds.records()[i];
        Accum& acc = groups[{r.hospital_id, r.ward_id, r.year, r.month}];
        acc.any_row = i;
        ++acc.n_patients;
        for (int k = 0; k < kOutcomeCount; ++k) {
            const double p = probs[k][i];
            if (std::isnan(p)) continue;
            acc.sum[k] += p;
            ++acc.n[k];
        }
    }

    PanelDataset panel;
    panel.first_year = config.first_year();
    panel.cells.reserve(groups.size());
    for (const auto& [key, acc] : groups) {
        const AdmissionRecord& r = ds.records()[acc.any_row];
        PanelCell cell;
        cell.hospital_id = std::get<0>(key);
        cell.ward_id = std::get<1>(key);
        cell.year = std::get<2>(key);
        cell.month = std::get<3>(key);
        cell.month_index = config.month_index(cell.year, cell.month);
        cell.treated = r.treated;
        cell.surgical = r.surgical;
        cell.ownership = r.ownership;
        cell.n_patients = acc.n_patients;
        for (int k = 0; k < kOutcomeCount; ++k) {
            cell.ho[k] = acc.n[k] > 0 ? acc.sum[k] / acc.n[k]
                                      : std::numeric_limits<double>::quiet_NaN();
        }
        panel.cells.push_back(std::move(cell));
    }
    return panel;
}

// ---------------------------------------------------------------------------
// Panel CSV
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string>& panel_columns() {
    static const std::vector<std::string> cols = {
        "hospital_id", "ward_id", "year", "month", "month_index", "treated", "surgical",
        "ownership", "n_patients", "ho_mortality", "ho_readmissions", "ho_return",
        "ho_transfers", "ho_voldisch"};
    return cols;
}

}  // namespace

void save_panel(const PanelDataset& panel, const std::string& path) {
    CsvWriter writer(path);
    writer.write_row(panel_columns());
    std::vector<std::string> f(panel_columns().size());
    for (const PanelCell& c : panel.cells) {
        f[0] = c.hospital_id;
        f[1] = c.ward_id;
        f[2] = std::to_string(c.year);
        f[3] = std::to_string(c.month);
        f[4] = std::to_string(c.month_index);
        f[5] = std::to_string(c.treated);
        f[6] = std::to_string(c.surgical);
        f[7] = std::string(ownership_label(c.ownership));
        f[8] = std::to_string(c.n_patients);
        for (Outcome o : kAllOutcomes) {
            const int k = static_cast<int>(o);
            f[9 + k] = c.ho_defined(o) ? format_double(c.ho[k]) : std::string();
        }
        writer.write_row(f);
    }
    writer.flush();
}

PanelDataset load_panel(const std::string& path) {
    CsvReader reader(path);
    for (const std::string& c : panel_columns()) reader.column(c);
    if (reader.header().size() != panel_columns().size()) {
        throw SchemaError("unexpected extra columns in " + path, 1);
    }
    std::array<std::size_t, 14> col{};
    for (std::size_t i = 0; i < panel_columns().size(); ++i) {
        col[i] = reader.column(panel_columns()[i]);
    }

    PanelDataset panel;
    bool have_first_year = false;
    std::vector<std::string> f;
    while (reader.next(f)) {
        const std::size_t line = reader.line_number();
        PanelCell c;
        c.hospital_id = f[col[0]];
        c.ward_id = f[col[1]];
        if (c.hospital_id.empty()) throw SchemaError("empty hospital_id", line, "hospital_id");
        if (c.ward_id.empty()) throw SchemaError("empty ward_id", line, "ward_id");
        c.year = static_cast<int>(parse_long(f[col[2]], line, "year"));
        c.month = static_cast<int>(parse_long(f[col[3]], line, "month"));
        if (c.month < 1 || c.month > 12) throw SchemaError("month out of range", line, "month");
        c.month_index = static_cast<int>(parse_long(f[col[4]], line, "month_index"));
        c.treated = parse_binary(f[col[5]], line, "treated");
        c.surgical = parse_binary(f[col[6]], line, "surgical");
        try {
            c.ownership = parse_ownership(f[col[7]]);
        } catch (const ConfigError& e) {
            throw SchemaError(e.what(), line, "ownership");
        }
        c.n_patients = static_cast<int>(parse_long(f[col[8]], line, "n_patients"));
        if (c.n_patients < 1) throw SchemaError("n_patients must be positive", line, "n_patients");

        const int offset = c.month_index - c.month;
        if (offset % 12 != 0) {
            throw SchemaError("month_index inconsistent with year/month", line, "month_index");
        }
        const int first = c.year - offset / 12;
        if (!have_first_year) {
            panel.first_year = first;
            have_first_year = true;
        } else if (panel.first_year != first) {
            throw SchemaError("month_index origin differs across rows", line, "month_index");
        }

        for (Outcome o : kAllOutcomes) {
            const int k = static_cast<int>(o);
            const std::string& cell = f[col[9 + k]];
            if (o == Outcome::return_or && c.surgical == 0) {
                if (!cell.empty()) {
                    throw SchemaError("ho_return defined only for surgical wards", line,
                                      "ho_return");
                }
                c.ho[k] = std::numeric_limits<double>::quiet_NaN();
                continue;
            }
            if (cell.empty()) {
                throw SchemaError("missing outcome mean", line, std::string(panel_columns()[9 + k]));
            }
            const double v = parse_double(cell, line, panel_columns()[9 + k]);
            if (!(v >= 0.0 && v <= 1.0)) {
                throw SchemaError("outcome mean outside [0,1]", line, panel_columns()[9 + k]);
            }
            c.ho[k] = v;
        }
        panel.cells.push_back(std::move(c));
    }
    if (panel.cells.empty()) throw SchemaError("no data rows in " + path);

    std::sort(panel.cells.begin(), panel.cells.end(),
              [](const PanelCell& a, const PanelCell& b) { return key_of(a) < key_of(b); });
    for (std::size_t i = 1; i < panel.cells.size(); ++i) {
        if (key_of(panel.cells[i - 1]) == key_of(panel.cells[i])) {
            throw ValidationError("duplicate panel cell: " + panel.cells[i].hospital_id + "/" +
                                  panel.cells[i].ward_id + " " +
                                  std::to_string(panel.cells[i].year) + "-" +
                                  std::to_string(panel.cells[i].month));
        }
    }

    // ward attributes must be constant across a ward's cells
    std::map<std::pair<std::string, std::string>, const PanelCell*> seen;
    for (const PanelCell& c : panel.cells) {
        auto [it, inserted] = seen.emplace(std::make_pair(c.hospital_id, c.ward_id), &c);
        if (!inserted) {
            const PanelCell& w = *it->second;
            if (w.treated != c.treated || w.surgical != c.surgical ||
                w.ownership != c.ownership) {
                throw ValidationError("ward attribute not constant across rows (hospital " +
                                      c.hospital_id + ", ward " + c.ward_id + ")");
            }
        }
    }
    return panel;
}

// ---------------------------------------------------------------------------
// Assumption checks on the collapsed panel
// ---------------------------------------------------------------------------

DidAssumptionReport validate_did_assumptions(const PanelDataset& panel) {
    DidAssumptionReport report;

    std::map<std::pair<std::string, std::string>, std::set<int>> treatments;
    std::map<std::pair<std::string, std::string>, std::set<int>> ward_years;
    for (const PanelCell& c : panel.cells) {
        treatments[{c.hospital_id, c.ward_id}].insert(c.treated);
        ward_years[{c.hospital_id, c.ward_id}].insert(c.year);
    }
    for (const auto& [key, flags] : treatments) {
        if (flags.size() > 1) report.switching_wards.push_back(key.first + "/" + key.second);
    }

    const std::vector<int> years = panel.years();
    std::map<int, std::array<int, 2>> group_counts;
    for (int y : years) group_counts[y] = {0, 0};
    for (const auto& [key, yrs] : ward_years) {
        const int treated = *treatments[key].begin();
        for (int y : yrs) ++group_counts[y][treated];
        if (yrs.size() < years.size()) {
            std::string missing;
            for (int y : years) {
                if (!yrs.count(y)) {
                    if (!missing.empty()) missing += ", ";
                    missing += std::to_string(y);
                }
            }
            report.attrition.push_back(key.first + "/" + key.second + " absent in " + missing);
        }
    }
    for (int y : years) {
        if (group_counts[y][1] == 0) report.years_without_treated.push_back(y);
        if (group_counts[y][0] == 0) report.years_without_control.push_back(y);
    }
    return report;
}

}  // namespace p4p
