#include "p4p/sim.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "p4p/csv.hpp"
#include "p4p/errors.hpp"
#include "p4p/inference.hpp"
#include "p4p/parallel.hpp"
#include "p4p/rng.hpp"

namespace p4p {

namespace {

constexpr std::uint64_t kRecoveryStream = 0xA11CE;
constexpr std::uint64_t kBootstrapStream = 0xB007;

struct ReplicateResult {
    Matrix estimates;                      // terms x outcomes
    Matrix ci_low, ci_high;                // filled only when the bootstrap ran
    bool has_intervals = false;
};

std::string mode_name(RecoveryMode mode) {
    return mode == RecoveryMode::full_pipeline ? "full_pipeline" : "panel_only";
}

double lookup_or_zero(const GeneratorTruth& truth, Outcome o, int year) {
    const auto& shifts = truth.panel[static_cast<std::size_t>(o)].treated_year;
    const auto it = shifts.find(year);
    return it == shifts.end() ? 0.0 : it->second;
}

// One end-to-end replicate: synthesize, (optionally) risk-adjust and collapse,
// fit, and read off the treated-by-year coefficients.
ReplicateResult run_replicate(const GeneratorTruth& truth, const RecoveryOptions& options,
                              const std::vector<std::string>& terms,
                              const std::vector<Outcome>& outcomes) {
    PanelDataset panel;
    if (options.mode == RecoveryMode::panel_only) {
        panel = generate_panel(truth);
    } else {
        const AdmissionDataset ds = generate_synthetic(truth);
        StudyConfig config;
        config.pre_years = {truth.years.front()};
        config.post_years = std::vector<int>(truth.years.begin() + 1, truth.years.end());
        config.reference_year = truth.years.front();
        config.seed = truth.seed;
        config.tolerances = options.stage_one_tolerances;
        OutcomeProbabilities probs;
        for (Outcome o : kAllOutcomes) {
            LogisticMixedSpec spec;
            spec.outcome = o;
            spec.gradient_tol = options.stage_one_tolerances.glmm_gradient_tol;
            spec.max_outer_iterations = options.stage_one_tolerances.glmm_max_outer_iterations;
            const LogisticMixedFit fit = fit_logistic_mixed(ds, spec);
            if (!fit.converged)
                throw NumericalError("stage-one fit did not converge for " +
                                     std::string(outcome_name(o)));
            probs[static_cast<std::size_t>(o)] = predict_probabilities(fit, ds).probabilities;
        }
        panel = collapse_to_panel(ds, probs, config);
    }

    const DidDesign design = build_design(panel, options.scheme);
    const MultivariateMixedFit fit = fit_multivariate_mixed(design, options.fit);
    if (!fit.converged) throw NumericalError("panel fit did not converge");

    ReplicateResult result;
    const auto n_terms = static_cast<Eigen::Index>(terms.size());
    const auto n_outcomes = static_cast<Eigen::Index>(outcomes.size());
    result.estimates.resize(n_terms, n_outcomes);
    for (Eigen::Index ti = 0; ti < n_terms; ++ti)
        for (Eigen::Index oi = 0; oi < n_outcomes; ++oi)
            result.estimates(ti, oi) =
                fit.coefficient(terms[static_cast<std::size_t>(ti)],
                                outcomes[static_cast<std::size_t>(oi)]);

    if (options.run_bootstrap) {
        BootstrapOptions boot;
        boot.replicates = options.bootstrap_replicates;
        boot.seed = derive_seed(truth.seed, kBootstrapStream);
        boot.workers = 1;  // replicates parallelize at the outer level
        boot.fit = options.fit;
        const BootstrapResult br = cluster_bootstrap(design, boot);
        if (!br.valid) throw NumericalError("bootstrap had too many failed refits");
        result.ci_low.resize(n_terms, n_outcomes);
        result.ci_high.resize(n_terms, n_outcomes);
        for (Eigen::Index ti = 0; ti < n_terms; ++ti)
            for (Eigen::Index oi = 0; oi < n_outcomes; ++oi) {
                const BootstrapCoefficient& c =
                    br.at(terms[static_cast<std::size_t>(ti)],
                          outcomes[static_cast<std::size_t>(oi)]);
                result.ci_low(ti, oi) = c.ci_low;
                result.ci_high(ti, oi) = c.ci_high;
            }
        result.has_intervals = true;
    }
    return result;
}

}  // namespace

const RecoveryRow& RecoveryReport::at(const std::string& term, Outcome o) const {
    for (const RecoveryRow& row : rows)
        if (row.term == term && row.outcome == o) return row;
    throw Error("no recovery row for term " + term + ", outcome " +
                std::string(outcome_name(o)));
}

void RecoveryReport::save_csv(const std::string& path) const {
    CsvWriter w(path);
    w.write_row({"term", "outcome", "truth", "mean_estimate", "bias", "empirical_se", "mc_se",
                 "coverage", "replicates_used"});
    for (const RecoveryRow& row : rows) {
        w.write_row({row.term, std::string(outcome_name(row.outcome)), format_double(row.truth),
                     format_double(row.mean_estimate), format_double(row.bias),
                     format_double(row.empirical_se), format_double(row.mc_se),
                     std::isnan(row.coverage) ? std::string() : format_double(row.coverage),
                     std::to_string(row.replicates_used)});
    }
    w.flush();
}

void RecoveryReport::save_json(const std::string& path) const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const RecoveryRow& row : rows) {
        nlohmann::json r{{"term", row.term},
                         {"outcome", std::string(outcome_name(row.outcome))},
                         {"truth", row.truth},
                         {"mean_estimate", row.mean_estimate},
                         {"bias", row.bias},
                         {"empirical_se", row.empirical_se},
                         {"mc_se", row.mc_se},
                         {"replicates_used", row.replicates_used}};
        if (!std::isnan(row.coverage)) r["coverage"] = row.coverage;
        rows_json.push_back(std::move(r));
    }
    const nlohmann::json j{{"mode", mode_name(mode)},
                           {"seed", seed},
                           {"replicates", replicates},
                           {"failed_replicates", failed_replicates},
                           {"rows", rows_json}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write recovery report: " + path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing recovery report: " + path);
}

RecoveryReport recovery_study(const GeneratorTruth& truth, const RecoveryOptions& options) {
    truth.validate();
    if (options.replicates < 50)
        throw ConfigError("recovery study needs at least 50 replicates, got " +
                          std::to_string(options.replicates));
    if (options.workers < 1) throw ConfigError("workers must be at least 1");
    if (truth.years.size() < 2)
        throw ConfigError("recovery study needs at least 2 years to form a DID contrast");
    if (options.probe_draws < 1000)
        throw ConfigError("probe draws must be at least 1000");

    const std::vector<Outcome> outcomes = options.scheme.outcomes();
    std::vector<std::string> terms;
    std::vector<int> term_years;
    for (std::size_t i = 1; i < truth.years.size(); ++i) {
        terms.push_back("TREATED:YEAR_" + std::to_string(truth.years[i]));
        term_years.push_back(truth.years[i]);
    }

    // Targets: the injected coefficients themselves in panel mode; the
    // link-implied panel contrast (probe draws) for the patient pipeline.
    Matrix truths(static_cast<Eigen::Index>(terms.size()),
                  static_cast<Eigen::Index>(outcomes.size()));
    for (std::size_t ti = 0; ti < terms.size(); ++ti)
        for (std::size_t oi = 0; oi < outcomes.size(); ++oi) {
            const Outcome o = outcomes[oi];
            truths(static_cast<Eigen::Index>(ti), static_cast<Eigen::Index>(oi)) =
                options.mode == RecoveryMode::panel_only
                    ? lookup_or_zero(truth, o, term_years[ti])
                    : panel_truth_did(truth, o, term_years[ti], options.probe_draws);
        }

    std::vector<std::optional<ReplicateResult>> results(
        static_cast<std::size_t>(options.replicates));
    parallel_for(static_cast<std::size_t>(options.replicates), options.workers,
                 [&](std::size_t r) {
                     GeneratorTruth rep = truth;
                     rep.seed = derive_seed(truth.seed, kRecoveryStream + r);
                     try {
                         results[r] = run_replicate(rep, options, terms, outcomes);
                     } catch (const Error&) {
                         results[r].reset();  // counted below
                     }
                 });

    RecoveryReport report;
    report.replicates = options.replicates;
    report.mode = options.mode;
    report.seed = truth.seed;
    int used = 0;
    for (const auto& r : results)
        if (r) ++used;
    report.failed_replicates = options.replicates - used;
    if (used < 2) throw NumericalError("recovery study: fewer than 2 replicates converged");

    for (std::size_t ti = 0; ti < terms.size(); ++ti) {
        for (std::size_t oi = 0; oi < outcomes.size(); ++oi) {
            double sum = 0.0, sumsq = 0.0;
            int covered = 0, with_intervals = 0;
            for (const auto& r : results) {
                if (!r) continue;
                const double est = r->estimates(static_cast<Eigen::Index>(ti),
                                                static_cast<Eigen::Index>(oi));
                sum += est;
                sumsq += est * est;
                if (r->has_intervals) {
                    ++with_intervals;
                    const double lo = r->ci_low(static_cast<Eigen::Index>(ti),
                                                static_cast<Eigen::Index>(oi));
                    const double hi = r->ci_high(static_cast<Eigen::Index>(ti),
                                                 static_cast<Eigen::Index>(oi));
                    const double target = truths(static_cast<Eigen::Index>(ti),
                                                 static_cast<Eigen::Index>(oi));
                    if (lo <= target && target <= hi) ++covered;
                }
            }
            RecoveryRow row;
            row.term = terms[ti];
            row.outcome = outcomes[oi];
            row.truth = truths(static_cast<Eigen::Index>(ti), static_cast<Eigen::Index>(oi));
            row.mean_estimate = sum / used;
            row.bias = row.mean_estimate - row.truth;
            const double var = (sumsq - sum * sum / used) / (used - 1);
            row.empirical_se = std::sqrt(std::max(var, 0.0));
            row.mc_se = row.empirical_se / std::sqrt(static_cast<double>(used));
            row.coverage = with_intervals > 0
                               ? static_cast<double>(covered) / with_intervals
                               : std::numeric_limits<double>::quiet_NaN();
            row.replicates_used = used;
            report.rows.push_back(std::move(row));
        }
    }
    return report;
}

}  // namespace p4p
