#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "p4p/core.hpp"
#include "p4p/did.hpp"
#include "p4p/errors.hpp"
#include "p4p/sim.hpp"

using namespace p4p;

namespace {

// Hand-built noise-free panel: cell means depend only on (treated, year), so
// the two-group two-period DID has a closed-form answer.
PanelDataset exact_panel(double base, double treated_gap, double year_step, double delta) {
    PanelDataset panel;
    panel.first_year = 2010;
    for (int h = 1; h <= 4; ++h) {
        const int treated = h <= 2 ? 1 : 0;
        for (int year : {2010, 2011})
            for (int month = 1; month <= 3; ++month) {
                PanelCell cell;
                char hid[8];
                std::snprintf(hid, sizeof(hid), "H%02d", h);
                cell.hospital_id = hid;
                cell.ward_id = "W01";
                cell.year = year;
                cell.month = month;
                cell.month_index = 12 * (year - panel.first_year) + month;
                cell.treated = treated;
                cell.surgical = 1;
                cell.n_patients = 20;
                const int post = year == 2011 ? 1 : 0;
                const double v =
                    base + treated_gap * treated + year_step * post + delta * treated * post;
                for (int k = 0; k < kOutcomeCount; ++k)
                    cell.ho[static_cast<std::size_t>(k)] = v + 0.01 * k;
                panel.cells.push_back(cell);
            }
    }
    return panel;
}

GeneratorTruth panel_truth(std::uint64_t seed, int hospitals = 10) {
    GeneratorTruth truth;
    truth.hospitals = hospitals;
    truth.wards_per_hospital = 2;
    truth.patients_per_ward_month = 15;
    truth.treated_fraction = 0.4;
    truth.surgical_fraction = 1.0;
    truth.years = {2010, 2011, 2012};
    truth.seed = seed;
    for (int k = 0; k < kOutcomeCount; ++k) {
        truth.panel[k].sigma_alpha_sq = 2e-4;
        truth.panel[k].treated_year[2011] = -0.004;
        truth.panel[k].treated_year[2012] = -0.009;
    }
    return truth;
}

}  // namespace

TEST_CASE("the base design carries the expected columns in order") {
    PanelDataset panel = generate_panel(panel_truth(21));
    DidDesign d = build_design(panel, InteractionScheme{});

    std::vector<std::string> expected = {"intercept",         "TREATED",
                                         "YEAR_2011",         "YEAR_2012",
                                         "TREATED:YEAR_2011", "TREATED:YEAR_2012",
                                         "MONTH"};
    CHECK(d.column_names == expected);
    CHECK(d.outcomes.size() == static_cast<std::size_t>(kOutcomeCount));
    CHECK(d.x.rows() == static_cast<Eigen::Index>(panel.cells.size()));
    CHECK(d.x.cols() == static_cast<Eigen::Index>(expected.size()));
    CHECK(d.years == std::vector<int>{2010, 2011, 2012});

    SUBCASE("MONTH can be dropped for oracle comparisons") {
        BuildOptions opts;
        opts.include_month = false;
        DidDesign bare = build_design(panel, InteractionScheme{}, opts);
        CHECK(bare.column_names.back() == "TREATED:YEAR_2012");
    }
}

TEST_CASE("extended schemes add level blocks and the surgical scheme drops return_or") {
    PanelDataset panel = generate_panel(panel_truth(22));

    InteractionScheme surgical;
    surgical.kind = SchemeKind::surgical;
    {
        // a fully surgical panel makes SURGICAL collinear with the intercept;
        // flip half the wards to medical so the scheme is identified
        PanelDataset mixed = panel;
        for (PanelCell& cell : mixed.cells)
            if (cell.ward_id == "W02") {
                cell.surgical = 0;
                cell.ho[static_cast<std::size_t>(Outcome::return_or)] =
                    std::numeric_limits<double>::quiet_NaN();
            }
        DidDesign d = build_design(mixed, surgical);
        CHECK(std::find(d.column_names.begin(), d.column_names.end(), "SURGICAL") !=
              d.column_names.end());
        CHECK(std::find(d.column_names.begin(), d.column_names.end(), "SURGICAL:TREATED") !=
              d.column_names.end());
        CHECK(std::find(d.column_names.begin(), d.column_names.end(),
                        "SURGICAL:TREATED:YEAR_2012") != d.column_names.end());
        // return_or cannot enter: its rows exist only where SURGICAL = 1
        CHECK(d.outcomes.size() == 4);
        CHECK(std::find(d.outcomes.begin(), d.outcomes.end(), Outcome::return_or) ==
              d.outcomes.end());
    }

    InteractionScheme ownership;
    ownership.kind = SchemeKind::ownership;
    {
        GeneratorTruth truth = panel_truth(23, 30);  // enough wards per ownership level
        PanelDataset owned = generate_panel(truth);
        DidDesign d = build_design(owned, ownership);
        for (const std::string& lead : {"PROFIT", "NOPROFIT"}) {
            CHECK(std::find(d.column_names.begin(), d.column_names.end(), lead) !=
                  d.column_names.end());
            CHECK(std::find(d.column_names.begin(), d.column_names.end(), lead + ":TREATED") !=
                  d.column_names.end());
        }
        CHECK(d.outcomes.size() == 5);
    }
}

TEST_CASE("a noise-free two-period panel is fit exactly") {
    const double delta = -0.007;
    PanelDataset panel = exact_panel(0.10, 0.012, 0.02, delta);

    CHECK(four_means_did(panel, Outcome::mortality, 2010, 2011) ==
          doctest::Approx(delta).epsilon(1e-14));

    BuildOptions build;
    build.include_month = false;
    DidDesign d = build_design(panel, InteractionScheme{}, build);
    MvmmOptions opts;
    opts.fix_hospital_variance_zero = true;
    MultivariateMixedFit fit = fit_multivariate_mixed(d, opts);

    for (Outcome o : kAllOutcomes) {
        CHECK(std::abs(fit.coefficient("TREATED:YEAR_2011", o) - delta) < 1e-10);
        CHECK(std::abs(fit.coefficient("TREATED", o) - 0.012) < 1e-10);
        CHECK(std::abs(fit.coefficient("YEAR_2011", o) - 0.02) < 1e-10);
    }
    CHECK(fit.ridged);  // zero residuals force the diagonal ridge
}

TEST_CASE("with MONTH off and no hospital intercepts the fit reproduces four-means DID") {
    GeneratorTruth truth = panel_truth(24);
    PanelDataset panel = generate_panel(truth);

    BuildOptions build;
    build.include_month = false;
    DidDesign d = build_design(panel, InteractionScheme{}, build);
    MvmmOptions opts;
    opts.fix_hospital_variance_zero = true;
    MultivariateMixedFit fit = fit_multivariate_mixed(d, opts);
    CHECK(fit.converged);

    for (Outcome o : kAllOutcomes)
        for (int year : {2011, 2012}) {
            const double oracle = four_means_did(panel, o, 2010, year);
            const double est = fit.coefficient("TREATED:YEAR_" + std::to_string(year), o);
            CHECK(std::abs(est - oracle) < 1e-6);
        }

    SUBCASE("structural missingness does not move the other outcomes") {
        PanelDataset masked = panel;
        for (PanelCell& cell : masked.cells)
            if (cell.ward_id == "W02") {
                cell.surgical = 0;
                cell.ho[static_cast<std::size_t>(Outcome::return_or)] =
                    std::numeric_limits<double>::quiet_NaN();
            }
        DidDesign dm = build_design(masked, InteractionScheme{}, build);
        MultivariateMixedFit masked_fit = fit_multivariate_mixed(dm, opts);
        for (Outcome o : {Outcome::mortality, Outcome::readmissions, Outcome::transfers,
                          Outcome::voldisch})
            for (int year : {2011, 2012}) {
                const std::string term = "TREATED:YEAR_" + std::to_string(year);
                CHECK(std::abs(masked_fit.coefficient(term, o) - fit.coefficient(term, o)) <
                      1e-6);
            }
    }
}

TEST_CASE("a duplicated hospital and a multiplicity of two give the same fit") {
    GeneratorTruth truth = panel_truth(25);
    PanelDataset panel = generate_panel(truth);
    DidDesign d = build_design(panel, InteractionScheme{});

    const std::string target = d.hospitals[3];
    std::vector<double> mult(d.hospitals.size(), 1.0);
    mult[3] = 2.0;
    MvmmOptions weighted;
    weighted.hospital_multiplicity = &mult;
    MultivariateMixedFit wfit = fit_multivariate_mixed(d, weighted);

    PanelDataset doubled = panel;
    for (const PanelCell& cell : panel.cells)
        if (cell.hospital_id == target) {
            PanelCell copy = cell;
            copy.hospital_id = "ZZ_" + cell.hospital_id;  // sorts last, stays unique
            doubled.cells.push_back(copy);
        }
    std::sort(doubled.cells.begin(), doubled.cells.end(),
              [](const PanelCell& a, const PanelCell& b) {
                  return std::tie(a.hospital_id, a.ward_id, a.year, a.month) <
                         std::tie(b.hospital_id, b.ward_id, b.year, b.month);
              });
    DidDesign dd = build_design(doubled, InteractionScheme{});
    MultivariateMixedFit dfit = fit_multivariate_mixed(dd, MvmmOptions{});

    CHECK((wfit.b - dfit.b).cwiseAbs().maxCoeff() < 1e-8);
    CHECK((wfit.sigma - dfit.sigma).cwiseAbs().maxCoeff() < 1e-8);

    SUBCASE("a multiplicity of zero removes the hospital") {
        std::vector<double> drop(d.hospitals.size(), 1.0);
        drop[3] = 0.0;
        MvmmOptions dropped;
        dropped.hospital_multiplicity = &drop;
        MultivariateMixedFit dropped_fit = fit_multivariate_mixed(d, dropped);

        PanelDataset reduced = panel;
        reduced.cells.erase(std::remove_if(reduced.cells.begin(), reduced.cells.end(),
                                           [&](const PanelCell& c) {
                                               return c.hospital_id == target;
                                           }),
                            reduced.cells.end());
        DidDesign dr = build_design(reduced, InteractionScheme{});
        MultivariateMixedFit reduced_fit = fit_multivariate_mixed(dr, MvmmOptions{});
        CHECK((dropped_fit.b - reduced_fit.b).cwiseAbs().maxCoeff() < 1e-8);
    }
}

TEST_CASE("warm starts converge immediately at the previous optimum") {
    PanelDataset panel = generate_panel(panel_truth(26));
    DidDesign d = build_design(panel, InteractionScheme{});
    MultivariateMixedFit fit = fit_multivariate_mixed(d, MvmmOptions{});
    CHECK(fit.converged);

    MvmmOptions warm;
    warm.warm_start = &fit;
    MultivariateMixedFit refit = fit_multivariate_mixed(d, warm);
    CHECK(refit.converged);
    CHECK(refit.em_iterations <= 2);
    // EM stops on the likelihood change, so the warm refit may still polish
    // the coefficients slightly; it must not wander anywhere new
    CHECK((refit.b - fit.b).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("the quasi-Newton polish never worsens the likelihood") {
    PanelDataset panel = generate_panel(panel_truth(27));
    DidDesign d = build_design(panel, InteractionScheme{});

    MvmmOptions plain;
    MultivariateMixedFit em_fit = fit_multivariate_mixed(d, plain);

    MvmmOptions polish = plain;
    polish.refine = true;
    MultivariateMixedFit refined = fit_multivariate_mixed(d, polish);

    CHECK(refined.refined);
    CHECK(refined.loglik >= em_fit.loglik - 1e-9);
}

TEST_CASE("a diagonal-Sigma constraint zeroes every off-diagonal") {
    PanelDataset panel = generate_panel(panel_truth(28));
    DidDesign d = build_design(panel, InteractionScheme{});
    MvmmOptions opts;
    opts.sigma_diagonal = true;
    MultivariateMixedFit fit = fit_multivariate_mixed(d, opts);
    for (Eigen::Index i = 0; i < fit.sigma.rows(); ++i)
        for (Eigen::Index j = 0; j < fit.sigma.cols(); ++j)
            if (i != j) CHECK(fit.sigma(i, j) == 0.0);
    CHECK(fit.sigma.diagonal().minCoeff() > 0.0);
}

TEST_CASE("the patient-weighted sensitivity fit moves the estimates") {
    GeneratorTruth truth = panel_truth(29);
    PanelDataset panel = generate_panel(truth);
    // unequal cell sizes, otherwise the weights are a no-op
    for (std::size_t i = 0; i < panel.cells.size(); ++i)
        panel.cells[i].n_patients = 5 + static_cast<int>(i % 30);
    DidDesign d = build_design(panel, InteractionScheme{});

    MultivariateMixedFit plain = fit_multivariate_mixed(d, MvmmOptions{});
    MvmmOptions weighted;
    weighted.weight_by_n = true;
    MultivariateMixedFit wfit = fit_multivariate_mixed(d, weighted);
    CHECK((plain.b - wfit.b).cwiseAbs().maxCoeff() > 1e-12);
}

TEST_CASE("degenerate panels are rejected with structural errors") {
    SUBCASE("fewer than two hospitals") {
        GeneratorTruth truth = panel_truth(30, 2);
        truth.treated_fraction = 0.5;
        PanelDataset panel = generate_panel(truth);
        PanelDataset one = panel;
        const std::string keep = panel.cells[0].hospital_id;
        one.cells.erase(std::remove_if(one.cells.begin(), one.cells.end(),
                                       [&](const PanelCell& c) {
                                           return c.hospital_id != keep;
                                       }),
                        one.cells.end());
        // a one-hospital panel has only one group: the design build already
        // rejects it as fatally unbalanced
        CHECK_THROWS_AS(build_design(one, InteractionScheme{}), DesignError);
    }
    SUBCASE("reference year absent from the panel") {
        PanelDataset panel = generate_panel(panel_truth(31));
        InteractionScheme scheme;
        scheme.reference_year = 1999;
        CHECK_THROWS_AS(build_design(panel, scheme), DesignError);
    }
    SUBCASE("collinear columns are named") {
        PanelDataset panel = generate_panel(panel_truth(32));
        for (PanelCell& cell : panel.cells) cell.treated = 1;  // TREATED == intercept
        try {
            build_design(panel, InteractionScheme{});
            FAIL("expected DesignError");
        } catch (const DesignError& e) {
            // the panel now has no control group, which the stability check
            // catches first; either message must name the failure
            CHECK(std::string(e.what()).size() > 10);
        }
    }
    SUBCASE("an empty panel") {
        PanelDataset panel;
        CHECK_THROWS_AS(build_design(panel, InteractionScheme{}), DesignError);
    }
}

TEST_CASE("coefficient lookups reject unknown terms and mismatched outcomes") {
    PanelDataset panel = generate_panel(panel_truth(33));
    PanelDataset mixed = panel;
    for (PanelCell& cell : mixed.cells)
        if (cell.ward_id == "W02") {
            cell.surgical = 0;
            cell.ho[static_cast<std::size_t>(Outcome::return_or)] =
                std::numeric_limits<double>::quiet_NaN();
        }
    InteractionScheme surgical;
    surgical.kind = SchemeKind::surgical;
    DidDesign d = build_design(mixed, surgical);
    MultivariateMixedFit fit = fit_multivariate_mixed(d, MvmmOptions{});

    CHECK_THROWS_AS(fit.coefficient("TREATED:YEAR_1999", Outcome::mortality), Error);
    CHECK_THROWS_AS(fit.coefficient("TREATED", Outcome::return_or), SchemeMismatchError);

    DidCoefficients coefs = extract_did_coefficients(fit);
    CHECK(coefs.delta_terms() == std::vector<std::string>{"TREATED:YEAR_2011",
                                                          "TREATED:YEAR_2012"});
    CHECK(coefs.tau_terms() == std::vector<std::string>{"SURGICAL:TREATED:YEAR_2011",
                                                        "SURGICAL:TREATED:YEAR_2012"});
    CHECK(coefs.estimate("TREATED:YEAR_2011", Outcome::mortality) ==
          fit.coefficient("TREATED:YEAR_2011", Outcome::mortality));
    CHECK_THROWS_AS(coefs.estimate("TREATED:YEAR_2011", Outcome::return_or),
                    SchemeMismatchError);

    MultivariateMixedFit base_fit =
        fit_multivariate_mixed(build_design(panel, InteractionScheme{}), MvmmOptions{});
    DidCoefficients base_coefs = extract_did_coefficients(base_fit);
    CHECK_THROWS_AS(base_coefs.tau_terms(), SchemeMismatchError);
}

TEST_CASE("fit options are validated") {
    PanelDataset panel = generate_panel(panel_truth(34));
    DidDesign d = build_design(panel, InteractionScheme{});

    MvmmOptions bad_tol;
    bad_tol.em_rel_tol = 0.0;
    CHECK_THROWS_AS(fit_multivariate_mixed(d, bad_tol), ConfigError);

    MvmmOptions bad_mult;
    std::vector<double> wrong_size(d.hospitals.size() + 1, 1.0);
    bad_mult.hospital_multiplicity = &wrong_size;
    CHECK_THROWS_AS(fit_multivariate_mixed(d, bad_mult), ConfigError);
}
