#include "p4p/effects.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "p4p/csv.hpp"
#include "p4p/errors.hpp"

namespace p4p {

namespace {

std::vector<std::string> scheme_levels(SchemeKind kind) {
    switch (kind) {
        case SchemeKind::base: return {"all"};
        case SchemeKind::surgical: return {"medical", "surgical"};
        case SchemeKind::ownership: return {"public", "profit", "noprofit"};
    }
    return {"all"};
}

// value of one multiplicative factor of a design column at a prediction point
double factor_value(const std::string& factor, int year, int treated, const std::string& level,
                    double month_mean) {
    if (factor == "intercept") return 1.0;
    if (factor == "TREATED") return treated;
    if (factor == "MONTH") return month_mean;
    if (factor == "SURGICAL") return level == "surgical" ? 1.0 : 0.0;
    if (factor == "PROFIT") return level == "profit" ? 1.0 : 0.0;
    if (factor == "NOPROFIT") return level == "noprofit" ? 1.0 : 0.0;
    if (factor.rfind("YEAR_", 0) == 0)
        return std::stoi(factor.substr(5)) == year ? 1.0 : 0.0;
    throw Error("unrecognized design column factor: '" + factor + "'");
}

double column_value(const std::string& name, int year, int treated, const std::string& level,
                    double month_mean) {
    double v = 1.0;
    size_t start = 0;
    while (start <= name.size()) {
        const size_t colon = name.find(':', start);
        const std::string factor =
            colon == std::string::npos ? name.substr(start) : name.substr(start, colon - start);
        v *= factor_value(factor, year, treated, level, month_mean);
        if (colon == std::string::npos) break;
        start = colon + 1;
    }
    return v;
}

}  // namespace

MarginalEffectsTable marginal_effects(const MultivariateMixedFit& fit, const DidDesign& design) {
    if (fit.column_names != design.column_names)
        throw SchemeMismatchError("fit and design disagree on the model terms");

    MarginalEffectsTable table;
    table.outcomes = fit.outcomes;
    table.years = design.years;
    table.levels = scheme_levels(fit.scheme.kind);

    // MONTH averaged over each year's observed cells
    std::map<int, std::pair<double, double>> month_sum;  // year -> (sum, count)
    for (const DesignRowInfo& r : design.rows) {
        month_sum[r.year].first += static_cast<double>(r.month_index);
        month_sum[r.year].second += 1.0;
    }

    for (Outcome o : table.outcomes) {
        const auto k = static_cast<Eigen::Index>(
            std::find(fit.outcomes.begin(), fit.outcomes.end(), o) - fit.outcomes.begin());
        for (int year : table.years) {
            const auto& ms = month_sum.at(year);
            const double month_mean = ms.first / ms.second;
            for (const std::string& level : table.levels)
                for (int treated : {0, 1}) {
                    double lin = 0.0;
                    for (size_t c = 0; c < fit.column_names.size(); ++c)
                        lin += fit.b(static_cast<Eigen::Index>(c), k) *
                               column_value(fit.column_names[c], year, treated, level, month_mean);
                    table.cells.push_back({o, year, treated, level, 100.0 * lin});
                }
        }
    }
    return table;
}

double MarginalEffectsTable::predicted(Outcome o, int year, int treated,
                                       const std::string& level) const {
    for (const MarginalCell& c : cells)
        if (c.outcome == o && c.year == year && c.treated == treated && c.level == level)
            return c.predicted_pct;
    throw Error("no marginal prediction for outcome " + std::string(outcome_name(o)) + ", year " +
                std::to_string(year) + ", level '" + level + "'");
}

double MarginalEffectsTable::difference(Outcome o, int year, const std::string& level) const {
    return predicted(o, year, 1, level) - predicted(o, year, 0, level);
}

void MarginalEffectsTable::save_csv(const std::string& path) const {
    CsvWriter out(path);
    out.write_row({"outcome", "year", "group", "level", "predicted_pct"});
    for (const MarginalCell& c : cells)
        out.write_row({std::string(outcome_name(c.outcome)), std::to_string(c.year),
                       c.treated ? "treated" : "control", c.level, format_double(c.predicted_pct)});
}

DidSummary did_reduction(const MarginalEffectsTable& table, const std::string& level,
                         int first_comparison_year) {
    if (std::find(table.levels.begin(), table.levels.end(), level) == table.levels.end())
        throw ConfigError("marginal table has no level '" + level + "'");
    std::vector<int> years = table.years;
    std::sort(years.begin(), years.end());
    if (first_comparison_year < 0) {
        if (years.size() < 2) throw ConfigError("marginal table covers fewer than 2 years");
        first_comparison_year = years[1];
    }
    if (std::find(years.begin(), years.end(), first_comparison_year) == years.end())
        throw ConfigError("marginal table lacks year " + std::to_string(first_comparison_year));

    DidSummary s;
    s.outcomes = table.outcomes;
    s.level = level;
    for (int y : years)
        if (y >= first_comparison_year) s.years.push_back(y);
    if (s.years.size() < 2)
        throw ConfigError("no year after " + std::to_string(first_comparison_year) +
                          " to compare against");
    s.reduction_years.assign(s.years.begin() + 1, s.years.end());

    const auto n_out = static_cast<Eigen::Index>(s.outcomes.size());
    s.differences_pct = Matrix::Zero(n_out, static_cast<Eigen::Index>(s.years.size()));
    s.reductions_pct = Matrix::Zero(n_out, static_cast<Eigen::Index>(s.reduction_years.size()));
    for (Eigen::Index k = 0; k < n_out; ++k) {
        for (size_t j = 0; j < s.years.size(); ++j)
            s.differences_pct(k, static_cast<Eigen::Index>(j)) =
                table.difference(s.outcomes[static_cast<size_t>(k)], s.years[j], level);
        for (size_t j = 0; j + 1 < s.years.size(); ++j)
            s.reductions_pct(k, static_cast<Eigen::Index>(j)) =
                s.differences_pct(k, static_cast<Eigen::Index>(j)) -
                s.differences_pct(k, static_cast<Eigen::Index>(j + 1));
    }
    return s;
}

double DidSummary::difference(Outcome o, int year) const {
    const auto oit = std::find(outcomes.begin(), outcomes.end(), o);
    const auto yit = std::find(years.begin(), years.end(), year);
    if (oit == outcomes.end() || yit == years.end())
        throw Error("no difference recorded for outcome " + std::string(outcome_name(o)) +
                    " in year " + std::to_string(year));
    return differences_pct(oit - outcomes.begin(), yit - years.begin());
}

double DidSummary::reduction(Outcome o, int year) const {
    const auto oit = std::find(outcomes.begin(), outcomes.end(), o);
    const auto yit = std::find(reduction_years.begin(), reduction_years.end(), year);
    if (oit == outcomes.end() || yit == reduction_years.end())
        throw Error("no reduction recorded for outcome " + std::string(outcome_name(o)) +
                    " in year " + std::to_string(year));
    return reductions_pct(oit - outcomes.begin(), yit - reduction_years.begin());
}

std::vector<SavingsEntry> savings_count(const DidSummary& summary,
                                        const std::map<int, double>& treated_volume) {
    std::vector<SavingsEntry> out;
    for (size_t k = 0; k < summary.outcomes.size(); ++k)
        for (size_t j = 0; j < summary.reduction_years.size(); ++j) {
            const int year = summary.reduction_years[j];
            const auto vit = treated_volume.find(year);
            if (vit == treated_volume.end())
                throw ConfigError("no treated admission volume for year " + std::to_string(year));
            if (!(vit->second > 0.0))
                throw ConfigError("treated admission volume for year " + std::to_string(year) +
                                  " must be positive");
            const double reduction =
                summary.reductions_pct(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
            SavingsEntry e;
            e.outcome = summary.outcomes[k];
            e.year = year;
            e.count = std::llround(std::abs(reduction) / 100.0 * vit->second);
            e.direction = reduction >= 0.0 ? "saved" : "excess";
            out.push_back(std::move(e));
        }
    return out;
}

namespace {

void write_summary_rows(CsvWriter& out, const DidSummary& summary,
                        const std::vector<SavingsEntry>* savings) {
    for (size_t k = 0; k < summary.outcomes.size(); ++k)
        for (size_t j = 0; j < summary.years.size(); ++j) {
            const int year = summary.years[j];
            std::string reduction, count, direction;
            if (j > 0) {
                reduction = format_double(
                    summary.reductions_pct(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j - 1)));
                if (savings != nullptr)
                    for (const SavingsEntry& e : *savings)
                        if (e.outcome == summary.outcomes[k] && e.year == year) {
                            count = std::to_string(e.count);
                            direction = e.direction;
                        }
            }
            out.write_row({std::string(outcome_name(summary.outcomes[k])), summary.level,
                           std::to_string(year),
                           format_double(summary.differences_pct(static_cast<Eigen::Index>(k),
                                                                 static_cast<Eigen::Index>(j))),
                           reduction, count, direction});
        }
}

}  // namespace

void save_did_summary_csv(const DidSummary& summary, const std::vector<SavingsEntry>* savings,
                          const std::string& path) {
    CsvWriter out(path);
    out.write_row({"outcome", "level", "year", "difference_pct", "reduction_pct", "saved_count",
                   "direction"});
    write_summary_rows(out, summary, savings);
    out.flush();
}

void save_did_summary_csv(const std::vector<DidSummary>& summaries,
                          const std::vector<SavingsEntry>* first_summary_savings,
                          const std::string& path) {
    CsvWriter out(path);
    out.write_row({"outcome", "level", "year", "difference_pct", "reduction_pct", "saved_count",
                   "direction"});
    for (std::size_t i = 0; i < summaries.size(); ++i)
        write_summary_rows(out, summaries[i], i == 0 ? first_summary_savings : nullptr);
    out.flush();
}

}  // namespace p4p
