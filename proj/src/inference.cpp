#include "p4p/inference.hpp"

#include <boost/math/distributions/fisher_f.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <optional>

#include "p4p/csv.hpp"
#include "p4p/errors.hpp"
#include "p4p/parallel.hpp"
#include "p4p/rng.hpp"

namespace p4p {

namespace {

double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::numbers::sqrt2); }

// type-7 interpolated quantile on a sorted sample
double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double h = q * (static_cast<double>(sorted.size()) - 1.0);
    const auto lo = static_cast<size_t>(std::floor(h));
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

}  // namespace

const BootstrapCoefficient& BootstrapResult::at(const std::string& term, Outcome o) const {
    for (const BootstrapCoefficient& c : coefficients)
        if (c.term == term && c.outcome == o) return c;
    throw Error("no bootstrap coefficient for term '" + term + "' and outcome " +
                std::string(outcome_name(o)));
}

BootstrapResult cluster_bootstrap(const DidDesign& design, const BootstrapOptions& options) {
    if (options.replicates < 100)
        throw ConfigError("bootstrap replicates must be at least 100, got " +
                          std::to_string(options.replicates));
    if (options.workers < 1) throw ConfigError("workers must be at least 1");

    BootstrapResult result;
    result.terms = design.column_names;
    result.outcomes = design.outcomes;
    result.replicates = options.replicates;
    result.seed = options.seed;
    result.full_fit = fit_multivariate_mixed(design, options.fit);

    const size_t n_hospitals = design.hospitals.size();
    const auto b_count = static_cast<size_t>(options.replicates);

    // index sets drawn up front so any worker count sees the same resamples
    std::vector<std::vector<double>> multiplicities(b_count,
                                                    std::vector<double>(n_hospitals, 0.0));
    for (size_t b = 0; b < b_count; ++b) {
        auto engine = make_engine(options.seed, b);
        for (size_t j = 0; j < n_hospitals; ++j)
            multiplicities[b][uniform_index(engine, n_hospitals)] += 1.0;
    }

    MvmmOptions rep_options = options.fit;
    rep_options.refine = false;
    rep_options.warm_start = &result.full_fit;

    std::vector<std::optional<Matrix>> replicate_b(b_count);
    parallel_for(b_count, static_cast<unsigned>(options.workers), [&](size_t b) {
        MvmmOptions local = rep_options;
        local.hospital_multiplicity = &multiplicities[b];
        try {
            MultivariateMixedFit fit = fit_multivariate_mixed(design, local);
            if (fit.converged) replicate_b[b] = std::move(fit.b);
        } catch (const Error&) {
            // degenerate resample (lost group structure, singular update): dropped
        }
    });

    int n_ok = 0;
    for (const auto& r : replicate_b) n_ok += r.has_value() ? 1 : 0;
    result.n_failed = options.replicates - n_ok;
    result.valid = result.n_failed <= options.replicates / 10;

    const Eigen::Index p = result.full_fit.b.rows();
    const Eigen::Index k = result.full_fit.b.cols();
    result.coefficients.reserve(static_cast<size_t>(p * k));
    std::vector<double> draws;
    for (Eigen::Index t = 0; t < p; ++t)
        for (Eigen::Index j = 0; j < k; ++j) {
            BootstrapCoefficient c;
            c.term = design.column_names[static_cast<size_t>(t)];
            c.outcome = design.outcomes[static_cast<size_t>(j)];
            c.estimate = result.full_fit.b(t, j);
            draws.clear();
            for (const auto& r : replicate_b)
                if (r.has_value()) draws.push_back((*r)(t, j));
            if (draws.size() >= 2) {
                const double mean =
                    std::accumulate(draws.begin(), draws.end(), 0.0) / static_cast<double>(draws.size());
                double ss = 0.0;
                for (double v : draws) ss += (v - mean) * (v - mean);
                c.se = std::sqrt(ss / (static_cast<double>(draws.size()) - 1.0));
                std::sort(draws.begin(), draws.end());
                c.ci_low = quantile_sorted(draws, 0.025);
                c.ci_high = quantile_sorted(draws, 0.975);
            } else {
                c.se = 0.0;
                c.ci_low = c.ci_high = c.estimate;
            }
            c.p = c.se > 0.0 ? normal_two_sided_p(c.estimate / c.se) : (c.estimate == 0.0 ? 1.0 : 0.0);
            result.coefficients.push_back(std::move(c));
        }
    return result;
}

JointTestResult wilks_parallel_trend_test(const PanelDataset& panel,
                                          const InteractionScheme& scheme, int placebo_year) {
    const DidDesign design = build_design(panel, scheme);
    if (placebo_year < 0) {
        if (design.years.size() < 2)
            throw StructureError("panel covers fewer than 2 years; no pre-period shift to test");
        placebo_year = design.years[1];
    }
    const std::string term = "TREATED:YEAR_" + std::to_string(placebo_year);
    const auto tit = std::find(design.column_names.begin(), design.column_names.end(), term);
    if (tit == design.column_names.end())
        throw DesignError("hypothesis term '" + term + "' absent from the design");
    const auto term_col = static_cast<Eigen::Index>(tit - design.column_names.begin());

    // complete cells only: the cross-product matrices need every outcome
    std::vector<Eigen::Index> complete;
    for (Eigen::Index i = 0; i < design.y.rows(); ++i)
        if (!design.y.row(i).hasNaN()) complete.push_back(i);

    const Eigen::Index p = design.x.cols();
    const auto k = static_cast<Eigen::Index>(design.outcomes.size());
    const auto n = static_cast<Eigen::Index>(complete.size());
    if (n <= p + k)
        throw StructureError("too few complete panel cells for the joint test (" +
                             std::to_string(complete.size()) + ")");

    Matrix x(n, p), y(n, k);
    for (Eigen::Index r = 0; r < n; ++r) {
        x.row(r) = design.x.row(complete[static_cast<size_t>(r)]);
        y.row(r) = design.y.row(complete[static_cast<size_t>(r)]);
    }

    // Lambda is exactly invariant to per-outcome rescaling; standardize the
    // columns so the cross-product determinants are well conditioned even
    // when outcomes live on wildly different scales
    for (Eigen::Index j = 0; j < k; ++j) {
        const double mean = y.col(j).mean();
        const double sd = std::sqrt((y.col(j).array() - mean).square().mean());
        if (!(sd > 0.0))
            throw DesignError("outcome " + std::string(outcome_name(design.outcomes[static_cast<size_t>(j)])) +
                              " is constant on the complete cells; remove it from the joint test");
        y.col(j) /= sd;
    }

    Matrix xtx = x.transpose() * x;
    Matrix xtx_chol = xtx;
    try {
        cholesky_decompose(xtx_chol);
    } catch (const SingularMatrixError&) {
        throw DesignError("design columns are collinear on the complete cells");
    }
    Matrix b(p, k);
    for (Eigen::Index j = 0; j < k; ++j)
        b.col(j) = cholesky_solve_factored(xtx_chol, x.transpose() * y.col(j));

    const Matrix resid = y - x * b;
    Matrix e = resid.transpose() * resid;

    // H for the single-row hypothesis: (R b)'(R (X'X)^-1 R')^-1 (R b)
    const Vector u = cholesky_solve_factored(xtx_chol, Vector::Unit(p, term_col));
    const double a = u[term_col];
    const Vector rb = b.row(term_col).transpose();
    const Matrix h = rb * rb.transpose() / a;

    Matrix e_chol = e;
    try {
        cholesky_decompose(e_chol);
    } catch (const SingularMatrixError& err) {
        throw DesignError(
            "residual cross-product matrix is rank deficient (pivot " +
            std::to_string(err.pivot_index()) + "); consider removing an outcome from the joint test");
    }
    Matrix eh = e + h;
    Matrix eh_chol = eh;
    cholesky_decompose(eh_chol);

    JointTestResult out;
    out.term = term;
    out.n_rows = static_cast<int>(n);
    out.lambda = std::exp(log_det_from_cholesky(e_chol) - log_det_from_cholesky(eh_chol));

    // Rao's F; exact for a one-row hypothesis
    const double nu_e = static_cast<double>(n - p);
    out.df1 = static_cast<double>(k);
    out.df2 = nu_e - static_cast<double>(k) + 1.0;
    if (out.df2 < 1.0)
        throw StructureError("error degrees of freedom too small for the joint test");
    out.stat = (out.df2 / out.df1) * (1.0 - out.lambda) / out.lambda;
    const boost::math::fisher_f dist(out.df1, out.df2);
    out.p = boost::math::cdf(boost::math::complement(dist, out.stat));
    return out;
}

std::string significance_stars(double p) {
    if (p < 0.01) return "***";
    if (p < 0.05) return "**";
    if (p < 0.1) return "*";
    return "";
}

namespace {

std::string format_fixed(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

CoefficientTable coefficient_table(const MultivariateMixedFit& fit, const BootstrapResult& boot) {
    if (boot.terms != fit.column_names || boot.outcomes != fit.outcomes)
        throw SchemeMismatchError("bootstrap result does not match the fit's terms and outcomes");

    CoefficientTable table;
    table.header.push_back("term");
    for (Outcome o : fit.outcomes) {
        table.header.emplace_back(outcome_name(o));
        table.header.emplace_back(std::string(outcome_name(o)) + "_se");
    }
    for (size_t t = 0; t < fit.column_names.size(); ++t) {
        std::vector<std::string> row;
        row.push_back(fit.column_names[t]);
        for (Outcome o : fit.outcomes) {
            const BootstrapCoefficient& c = boot.at(fit.column_names[t], o);
            row.push_back(format_fixed(c.estimate) + significance_stars(c.p));
            row.push_back("(" + format_fixed(c.se) + ")");
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

void CoefficientTable::save_csv(const std::string& path) const {
    CsvWriter out(path);
    out.write_row(header);
    for (const auto& row : rows) out.write_row(row);
}

}  // namespace p4p
