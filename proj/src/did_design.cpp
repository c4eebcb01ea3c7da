#include "p4p/did.hpp"

#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "p4p/errors.hpp"

namespace p4p {

namespace {

std::string year_column(int year) { return "YEAR_" + std::to_string(year); }

std::string level_prefix(SchemeKind kind, int level) {
    if (kind == SchemeKind::surgical) return "SURGICAL";
    return level == 0 ? "PROFIT" : "NOPROFIT";
}

// level indicator for a cell: surgical flag, or a non-reference ownership dummy
double level_value(SchemeKind kind, int level, const PanelCell& cell) {
    if (kind == SchemeKind::surgical) return cell.surgical ? 1.0 : 0.0;
    const Ownership target = level == 0 ? Ownership::private_profit : Ownership::private_nonprofit;
    return cell.ownership == target ? 1.0 : 0.0;
}

int level_count(SchemeKind kind) {
    switch (kind) {
        case SchemeKind::base: return 0;
        case SchemeKind::surgical: return 1;
        case SchemeKind::ownership: return 2;
    }
    return 0;
}

}  // namespace

std::string_view scheme_name(SchemeKind k) {
    switch (k) {
        case SchemeKind::base: return "base";
        case SchemeKind::surgical: return "surgical";
        case SchemeKind::ownership: return "ownership";
    }
    return "base";
}

SchemeKind parse_scheme(std::string_view name) {
    if (name == "base") return SchemeKind::base;
    if (name == "surgical") return SchemeKind::surgical;
    if (name == "ownership") return SchemeKind::ownership;
    throw ConfigError("unknown interaction scheme: '" + std::string(name) + "'");
}

std::vector<Outcome> InteractionScheme::outcomes() const {
    std::vector<Outcome> out;
    for (Outcome o : kAllOutcomes) {
        if (kind == SchemeKind::surgical && o == Outcome::return_or) continue;
        out.push_back(o);
    }
    return out;
}

DidDesign build_design(const PanelDataset& panel, const InteractionScheme& scheme,
                       const BuildOptions& options) {
    if (panel.cells.empty()) throw DesignError("panel has no cells");

    const DidAssumptionReport report = validate_did_assumptions(panel);
    if (report.fatal())
        throw DesignError("panel fails group-stability validation: " + report.to_string());

    DidDesign d;
    d.scheme = scheme;
    d.outcomes = scheme.outcomes();
    d.years = panel.years();
    if (std::find(d.years.begin(), d.years.end(), scheme.reference_year) == d.years.end())
        throw DesignError("reference year " + std::to_string(scheme.reference_year) +
                          " absent from the panel");

    std::vector<int> other_years;
    for (int y : d.years)
        if (y != scheme.reference_year) other_years.push_back(y);

    // hospital index for the random-intercept grouping
    d.hospitals = panel.hospitals();
    std::map<std::string, int> hospital_index;
    for (size_t i = 0; i < d.hospitals.size(); ++i)
        hospital_index.emplace(d.hospitals[i], static_cast<int>(i));

    const int levels = level_count(scheme.kind);
    d.column_names = {"intercept", "TREATED"};
    for (int y : other_years) d.column_names.push_back(year_column(y));
    for (int y : other_years) d.column_names.push_back("TREATED:" + year_column(y));
    for (int l = 0; l < levels; ++l) {
        const std::string pre = level_prefix(scheme.kind, l);
        d.column_names.push_back(pre);
        for (int y : other_years) d.column_names.push_back(pre + ":" + year_column(y));
        d.column_names.push_back(pre + ":TREATED");
        for (int y : other_years) d.column_names.push_back(pre + ":TREATED:" + year_column(y));
    }
    if (options.include_month) d.column_names.push_back("MONTH");

    const auto n = static_cast<Eigen::Index>(panel.cells.size());
    const auto p = static_cast<Eigen::Index>(d.column_names.size());
    const auto k = static_cast<Eigen::Index>(d.outcomes.size());
    d.x = Matrix::Zero(n, p);
    d.y = Matrix::Constant(n, k, std::numeric_limits<double>::quiet_NaN());
    d.rows.resize(panel.cells.size());

    for (Eigen::Index i = 0; i < n; ++i) {
        const PanelCell& cell = panel.cells[static_cast<size_t>(i)];
        Eigen::Index c = 0;
        d.x(i, c++) = 1.0;
        d.x(i, c++) = cell.treated ? 1.0 : 0.0;
        for (int y : other_years) d.x(i, c++) = y == cell.year ? 1.0 : 0.0;
        for (int y : other_years) d.x(i, c++) = (cell.treated && y == cell.year) ? 1.0 : 0.0;
        for (int l = 0; l < levels; ++l) {
            const double lv = level_value(scheme.kind, l, cell);
            d.x(i, c++) = lv;
            for (int y : other_years) d.x(i, c++) = y == cell.year ? lv : 0.0;
            d.x(i, c++) = cell.treated ? lv : 0.0;
            for (int y : other_years)
                d.x(i, c++) = (cell.treated && y == cell.year) ? lv : 0.0;
        }
        if (options.include_month) d.x(i, c++) = static_cast<double>(cell.month_index);

        for (Eigen::Index j = 0; j < k; ++j)
            d.y(i, j) = cell.ho[static_cast<size_t>(d.outcomes[static_cast<size_t>(j)])];

        DesignRowInfo& info = d.rows[static_cast<size_t>(i)];
        info.year = cell.year;
        info.month_index = cell.month_index;
        info.treated = cell.treated;
        info.surgical = cell.surgical;
        info.ownership = cell.ownership;
        info.n_patients = cell.n_patients;
        info.hospital = hospital_index.at(cell.hospital_id);
    }

    // columns must stay linearly independent on every outcome's observed rows
    for (Eigen::Index j = 0; j < k; ++j) {
        std::vector<Eigen::Index> obs;
        for (Eigen::Index i = 0; i < n; ++i)
            if (!std::isnan(d.y(i, j))) obs.push_back(i);
        if (obs.empty())
            throw DesignError("no cells observe outcome " +
                              std::string(outcome_name(d.outcomes[static_cast<size_t>(j)])));
        Matrix sub(static_cast<Eigen::Index>(obs.size()), p);
        for (size_t r = 0; r < obs.size(); ++r)
            sub.row(static_cast<Eigen::Index>(r)) = d.x.row(obs[r]);
        Eigen::ColPivHouseholderQR<Matrix> qr(sub);
        qr.setThreshold(1e-9);
        if (qr.rank() < p) {
            const auto piv = qr.colsPermutation().indices();
            std::ostringstream msg;
            msg << "design columns are collinear on rows observing "
                << outcome_name(d.outcomes[static_cast<size_t>(j)]) << ":";
            for (Eigen::Index c = qr.rank(); c < p; ++c)
                msg << ' ' << d.column_names[static_cast<size_t>(piv[c])];
            throw DesignError(msg.str());
        }
    }

    return d;
}

double MultivariateMixedFit::coefficient(const std::string& term, Outcome o) const {
    const auto cit = std::find(column_names.begin(), column_names.end(), term);
    if (cit == column_names.end()) throw Error("unknown coefficient term: '" + term + "'");
    const auto oit = std::find(outcomes.begin(), outcomes.end(), o);
    if (oit == outcomes.end())
        throw SchemeMismatchError("outcome " + std::string(outcome_name(o)) +
                                  " not modeled under scheme '" + std::string(scheme_name(scheme.kind)) + "'");
    return b(cit - column_names.begin(), oit - outcomes.begin());
}

std::vector<std::string> DidCoefficients::delta_terms() const {
    std::vector<std::string> out;
    for (const std::string& t : terms)
        if (t.rfind("TREATED:YEAR_", 0) == 0) out.push_back(t);
    return out;
}

std::vector<std::string> DidCoefficients::tau_terms() const {
    if (kind == SchemeKind::base)
        throw SchemeMismatchError("triple interactions are not present under the base scheme");
    std::vector<std::string> out;
    for (const std::string& t : terms)
        if (t.find(":TREATED:YEAR_") != std::string::npos) out.push_back(t);
    return out;
}

double DidCoefficients::estimate(const std::string& term, Outcome o) const {
    const auto tit = std::find(terms.begin(), terms.end(), term);
    if (tit == terms.end())
        throw SchemeMismatchError("term '" + term + "' not available under scheme '" +
                                  std::string(scheme_name(kind)) + "'");
    const auto oit = std::find(outcomes.begin(), outcomes.end(), o);
    if (oit == outcomes.end())
        throw SchemeMismatchError("outcome " + std::string(outcome_name(o)) +
                                  " not modeled under scheme '" + std::string(scheme_name(kind)) + "'");
    return estimates(tit - terms.begin(), oit - outcomes.begin());
}

DidCoefficients extract_did_coefficients(const MultivariateMixedFit& fit) {
    DidCoefficients out;
    out.kind = fit.scheme.kind;
    out.outcomes = fit.outcomes;
    for (const std::string& name : fit.column_names) {
        const bool delta = name.rfind("TREATED:YEAR_", 0) == 0;
        const bool tau = name.find(":TREATED:YEAR_") != std::string::npos;
        if (delta || tau) out.terms.push_back(name);
    }
    out.estimates = Matrix::Zero(static_cast<Eigen::Index>(out.terms.size()),
                                 static_cast<Eigen::Index>(out.outcomes.size()));
    for (size_t t = 0; t < out.terms.size(); ++t) {
        const auto row = std::find(fit.column_names.begin(), fit.column_names.end(), out.terms[t]) -
                         fit.column_names.begin();
        out.estimates.row(static_cast<Eigen::Index>(t)) = fit.b.row(row);
    }
    return out;
}

}  // namespace p4p
