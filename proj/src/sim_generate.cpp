#include "p4p/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <utility>

#include <nlohmann/json.hpp>

#include "p4p/errors.hpp"
#include "p4p/numerics.hpp"
#include "p4p/rng.hpp"

namespace p4p {

namespace {

using nlohmann::json;

// RNG stream ids; fixed so every draw is attributable and reruns are
// byte-identical for a given truth.
constexpr std::uint64_t kStreamStructure = 0;
constexpr std::uint64_t kStreamCovariates = 1;
constexpr std::uint64_t kStreamEffects = 2;
constexpr std::uint64_t kStreamOutcomes = 3;
constexpr std::uint64_t kStreamProbeBase = 9000;

double lookup(const std::map<int, double>& m, int year) {
    auto it = m.find(year);
    return it == m.end() ? 0.0 : it->second;
}

double level_shift(const LevelShifts& shifts, bool on, int treated, int year) {
    if (!on) return 0.0;
    return shifts.main + lookup(shifts.year, year) + shifts.treated * treated +
           lookup(shifts.treated_year, year) * treated;
}

// The DID portion of the linear predictor, shared by both generating modes
// (logit scale for patients, mean scale for panel cells).
double did_shift(const OutcomePanelTruth& p, int treated, int year, int month_index, int surgical,
                 Ownership ownership) {
    return p.treated * treated + lookup(p.year, year) + lookup(p.treated_year, year) * treated +
           p.month * month_index + level_shift(p.surgical, surgical == 1, treated, year) +
           level_shift(p.profit, ownership == Ownership::private_profit, treated, year) +
           level_shift(p.noprofit, ownership == Ownership::private_nonprofit, treated, year);
}

struct WardPlan {
    std::string id;
    int treated = 0;
    int surgical = 0;
};

struct HospitalPlan {
    std::string id;
    Ownership ownership = Ownership::public_owned;
    int technology = 0;
    int teaching = 0;
    int specialised = 0;
    std::vector<WardPlan> wards;
};

Ownership draw_ownership(std::mt19937_64& eng, const std::array<double, 3>& mix) {
    const double total = mix[0] + mix[1] + mix[2];
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(eng) * total;
    if (u < mix[0]) return Ownership::public_owned;
    if (u < mix[0] + mix[1]) return Ownership::private_profit;
    return Ownership::private_nonprofit;
}

int draw_bernoulli(std::mt19937_64& eng, double p) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(eng) < p ? 1 : 0;
}

bool flags_usable(const std::vector<HospitalPlan>& plans, const GeneratorTruth& truth) {
    int treated = 0, medical = 0, wards = 0;
    std::vector<int> surgical_hospitals;
    for (std::size_t h = 0; h < plans.size(); ++h) {
        for (const WardPlan& w : plans[h].wards) {
            ++wards;
            treated += w.treated;
            medical += 1 - w.surgical;
            if (w.surgical == 1) surgical_hospitals.push_back(static_cast<int>(h));
        }
    }
    if (truth.treated_fraction > 0.0 && truth.treated_fraction < 1.0) {
        if (treated == 0 || treated == wards) return false;
    }
    if (truth.surgical_fraction > 0.0 && truth.surgical_fraction < 1.0) {
        if (medical == 0) return false;
        std::sort(surgical_hospitals.begin(), surgical_hospitals.end());
        surgical_hospitals.erase(std::unique(surgical_hospitals.begin(), surgical_hospitals.end()),
                                 surgical_hospitals.end());
        const int need = std::min<int>(2, static_cast<int>(plans.size()));
        if (static_cast<int>(surgical_hospitals.size()) < need) return false;
    }
    return true;
}

// Hospital attributes are drawn once; ward flags are redrawn wholesale until
// both comparison groups are realized (only possible when a fraction is
// interior), so downstream design validation cannot fail by bad luck.
std::vector<HospitalPlan> build_structure(const GeneratorTruth& truth, std::mt19937_64& eng) {
    std::vector<HospitalPlan> plans(static_cast<std::size_t>(truth.hospitals));
    char buffer[16];
    for (int h = 0; h < truth.hospitals; ++h) {
        HospitalPlan& plan = plans[static_cast<std::size_t>(h)];
        std::snprintf(buffer, sizeof buffer, "H%04d", h + 1);
        plan.id = buffer;
        plan.ownership = draw_ownership(eng, truth.ownership_mix);
        plan.technology = draw_bernoulli(eng, 0.3);
        plan.teaching = draw_bernoulli(eng, 0.2);
        plan.specialised = draw_bernoulli(eng, 0.15);
        plan.wards.resize(static_cast<std::size_t>(truth.wards_per_hospital));
        for (int w = 0; w < truth.wards_per_hospital; ++w) {
            std::snprintf(buffer, sizeof buffer, "W%02d", w + 1);
            plan.wards[static_cast<std::size_t>(w)].id = buffer;
        }
    }
    for (int attempt = 0; attempt < 10000; ++attempt) {
        for (HospitalPlan& plan : plans) {
            for (WardPlan& ward : plan.wards) {
                ward.treated = draw_bernoulli(eng, truth.treated_fraction);
                ward.surgical = draw_bernoulli(eng, truth.surgical_fraction);
            }
        }
        if (flags_usable(plans, truth)) return plans;
    }
    throw ConfigError(
        "could not realize a ward structure with both treatment groups populated; "
        "check treated_fraction and the ward count");
}

struct Covariates {
    int gender = 0;
    double age = 0.0;
    int intcare = 0;
    double drg_weight = 0.0;
    int comorbidity = 0;
};

Covariates draw_covariates(std::mt19937_64& eng) {
    Covariates c;
    c.gender = draw_bernoulli(eng, 0.46);
    std::normal_distribution<double> age(60.0, 21.0);
    do {
        c.age = age(eng);
    } while (c.age < 2.0);  // truncated support
    c.intcare = std::poisson_distribution<int>(0.08)(eng);
    c.drg_weight = std::exp(std::normal_distribution<double>(0.0, 0.4)(eng));
    c.comorbidity = std::poisson_distribution<int>(0.25)(eng);
    return c;
}

double eta_dot(const std::vector<double>& eta, const Covariates& c) {
    return eta[0] * c.gender + eta[1] * c.age + eta[2] * c.intcare + eta[3] * c.drg_weight +
           eta[4] * c.comorbidity;
}

double draw_normal(std::mt19937_64& eng, double variance) {
    if (variance <= 0.0) return 0.0;
    return std::normal_distribution<double>(0.0, std::sqrt(variance))(eng);
}

// ---------------------------------------------------------------------------
// JSON (all fields optional; absent fields keep the constructor defaults)
// ---------------------------------------------------------------------------

double get_number(const json& j, const char* key, double fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_number()) throw ConfigError(std::string("generator truth: ") + key + " must be a number");
    return j.at(key).get<double>();
}

std::map<int, double> get_year_map(const json& j, const char* key) {
    std::map<int, double> out;
    if (!j.contains(key)) return out;
    const json& m = j.at(key);
    if (!m.is_object()) throw ConfigError(std::string("generator truth: ") + key + " must map years to numbers");
    for (const auto& [year_text, value] : m.items()) {
        int year = 0;
        try {
            std::size_t pos = 0;
            year = std::stoi(year_text, &pos);
            if (pos != year_text.size()) throw std::invalid_argument(year_text);
        } catch (const std::exception&) {
            throw ConfigError("generator truth: bad year key '" + year_text + "' under " + key);
        }
        if (!value.is_number()) throw ConfigError(std::string("generator truth: ") + key + " must map years to numbers");
        out[year] = value.get<double>();
    }
    return out;
}

LevelShifts parse_level_shifts(const json& j) {
    LevelShifts s;
    s.main = get_number(j, "main", 0.0);
    s.year = get_year_map(j, "year");
    s.treated = get_number(j, "treated", 0.0);
    s.treated_year = get_year_map(j, "treated_year");
    return s;
}

json level_shifts_json(const LevelShifts& s) {
    json year = json::object(), ty = json::object();
    for (const auto& [y, v] : s.year) year[std::to_string(y)] = v;
    for (const auto& [y, v] : s.treated_year) ty[std::to_string(y)] = v;
    return json{{"main", s.main}, {"year", year}, {"treated", s.treated}, {"treated_year", ty}};
}

}  // namespace

// ---------------------------------------------------------------------------
// GeneratorTruth
// ---------------------------------------------------------------------------

GeneratorTruth::GeneratorTruth() {
    // Baseline rates in the vicinity of the observed registry: mortality 5%,
    // readmissions 12%, OR returns 4%, transfers 5%, voluntary discharges 10%.
    const std::array<double, kOutcomeCount> base = {0.05, 0.12, 0.04, 0.05, 0.10};
    for (int k = 0; k < kOutcomeCount; ++k) {
        patient[static_cast<std::size_t>(k)].alpha = logit(base[static_cast<std::size_t>(k)]);
        panel[static_cast<std::size_t>(k)].intercept = base[static_cast<std::size_t>(k)];
    }
    sigma = Matrix::Identity(kOutcomeCount, kOutcomeCount) * 1e-4;
}

void GeneratorTruth::validate() const {
    if (hospitals < 1) throw ConfigError("synthetic structure needs at least 1 hospital");
    if (hospitals > 9999) throw ConfigError("synthetic structure supports at most 9999 hospitals");
    if (wards_per_hospital < 1 || wards_per_hospital > 99)
        throw ConfigError("wards per hospital must be in [1, 99]");
    if (patients_per_ward_month < 1)
        throw ConfigError("patients per ward-month must be at least 1");
    if (!(treated_fraction >= 0.0 && treated_fraction <= 1.0))
        throw ConfigError("treated_fraction must lie in [0, 1]");
    if (!(surgical_fraction >= 0.0 && surgical_fraction <= 1.0))
        throw ConfigError("surgical_fraction must lie in [0, 1]");
    double mix_total = 0.0;
    for (double share : ownership_mix) {
        if (!(share >= 0.0)) throw ConfigError("ownership mix shares must be non-negative");
        mix_total += share;
    }
    if (!(mix_total > 0.0)) throw ConfigError("ownership mix must have positive total mass");
    if (years.empty()) throw ConfigError("the synthetic study window needs at least one year");
    for (std::size_t i = 1; i < years.size(); ++i)
        if (years[i] <= years[i - 1]) throw ConfigError("years must be strictly increasing");
    for (int k = 0; k < kOutcomeCount; ++k) {
        const auto& pt = patient[static_cast<std::size_t>(k)];
        const auto& pn = panel[static_cast<std::size_t>(k)];
        const std::string name(outcome_name(kAllOutcomes[static_cast<std::size_t>(k)]));
        if (!std::isfinite(pt.alpha)) throw ConfigError("non-finite patient intercept for " + name);
        if (pt.eta.size() != 5)
            throw ConfigError("patient eta for " + name + " must have 5 entries "
                              "(gender, age, intcare, drg_weight, comorbidity)");
        for (double e : pt.eta)
            if (!std::isfinite(e)) throw ConfigError("non-finite patient coefficient for " + name);
        if (!(pt.sigma_mu_sq >= 0.0) || !(pt.sigma_nu_sq >= 0.0) || !(pn.sigma_alpha_sq >= 0.0))
            throw ConfigError("variance components must be non-negative for " + name);
    }
    if (sigma.rows() != kOutcomeCount || sigma.cols() != kOutcomeCount)
        throw ConfigError("panel residual covariance must be 5 x 5");
    if (!sigma.isApprox(sigma.transpose(), 1e-12))
        throw ConfigError("panel residual covariance must be symmetric");
    try {
        Matrix factor = sigma;
        cholesky_decompose(factor);
    } catch (const Error&) {
        throw ConfigError("panel residual covariance must be positive definite");
    }
}

GeneratorTruth parse_generator_truth_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("generator truth JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("generator truth JSON must be an object");
    GeneratorTruth truth;
    try {
        if (j.contains("seed")) truth.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("structure")) {
            const json& s = j.at("structure");
            truth.hospitals = static_cast<int>(get_number(s, "hospitals", truth.hospitals));
            truth.wards_per_hospital =
                static_cast<int>(get_number(s, "wards_per_hospital", truth.wards_per_hospital));
            truth.patients_per_ward_month = static_cast<int>(
                get_number(s, "patients_per_ward_month", truth.patients_per_ward_month));
            truth.treated_fraction = get_number(s, "treated_fraction", truth.treated_fraction);
            truth.surgical_fraction = get_number(s, "surgical_fraction", truth.surgical_fraction);
            if (s.contains("ownership_mix")) {
                const json& mix = s.at("ownership_mix");
                if (!mix.is_array() || mix.size() != 3)
                    throw ConfigError("ownership_mix must have 3 entries (public, profit, noprofit)");
                for (int i = 0; i < 3; ++i)
                    truth.ownership_mix[static_cast<std::size_t>(i)] = mix.at(static_cast<std::size_t>(i)).get<double>();
            }
            if (s.contains("years")) truth.years = s.at("years").get<std::vector<int>>();
        }
        for (int k = 0; k < kOutcomeCount; ++k) {
            const std::string name(outcome_name(kAllOutcomes[static_cast<std::size_t>(k)]));
            if (j.contains("patient") && j.at("patient").contains(name)) {
                const json& p = j.at("patient").at(name);
                auto& pt = truth.patient[static_cast<std::size_t>(k)];
                pt.alpha = get_number(p, "alpha", pt.alpha);
                if (p.contains("eta")) pt.eta = p.at("eta").get<std::vector<double>>();
                pt.sigma_mu_sq = get_number(p, "sigma_mu_sq", pt.sigma_mu_sq);
                pt.sigma_nu_sq = get_number(p, "sigma_nu_sq", pt.sigma_nu_sq);
            }
            if (j.contains("panel") && j.at("panel").contains(name)) {
                const json& p = j.at("panel").at(name);
                auto& pn = truth.panel[static_cast<std::size_t>(k)];
                pn.intercept = get_number(p, "intercept", pn.intercept);
                pn.treated = get_number(p, "treated", pn.treated);
                pn.year = get_year_map(p, "year");
                pn.treated_year = get_year_map(p, "treated_year");
                pn.month = get_number(p, "month", pn.month);
                pn.sigma_alpha_sq = get_number(p, "sigma_alpha_sq", pn.sigma_alpha_sq);
                if (p.contains("surgical")) pn.surgical = parse_level_shifts(p.at("surgical"));
                if (p.contains("profit")) pn.profit = parse_level_shifts(p.at("profit"));
                if (p.contains("noprofit")) pn.noprofit = parse_level_shifts(p.at("noprofit"));
            }
        }
        if (j.contains("sigma")) {
            const json& s = j.at("sigma");
            if (!s.is_array() || s.size() != kOutcomeCount)
                throw ConfigError("sigma must be a 5 x 5 array");
            for (int r = 0; r < kOutcomeCount; ++r) {
                const json& row = s.at(static_cast<std::size_t>(r));
                if (!row.is_array() || row.size() != kOutcomeCount)
                    throw ConfigError("sigma must be a 5 x 5 array");
                for (int c = 0; c < kOutcomeCount; ++c)
                    truth.sigma(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("generator truth JSON: ") + e.what());
    }
    truth.validate();
    return truth;
}

GeneratorTruth load_generator_truth(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open generator truth file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_generator_truth_json(buffer.str());
}

void save_generator_truth(const GeneratorTruth& truth, const std::string& path) {
    json patient = json::object(), panel = json::object();
    for (int k = 0; k < kOutcomeCount; ++k) {
        const std::string name(outcome_name(kAllOutcomes[static_cast<std::size_t>(k)]));
        const auto& pt = truth.patient[static_cast<std::size_t>(k)];
        const auto& pn = truth.panel[static_cast<std::size_t>(k)];
        patient[name] = json{{"alpha", pt.alpha},
                             {"eta", pt.eta},
                             {"sigma_mu_sq", pt.sigma_mu_sq},
                             {"sigma_nu_sq", pt.sigma_nu_sq}};
        json year = json::object(), ty = json::object();
        for (const auto& [y, v] : pn.year) year[std::to_string(y)] = v;
        for (const auto& [y, v] : pn.treated_year) ty[std::to_string(y)] = v;
        panel[name] = json{{"intercept", pn.intercept},
                           {"treated", pn.treated},
                           {"year", year},
                           {"treated_year", ty},
                           {"month", pn.month},
                           {"sigma_alpha_sq", pn.sigma_alpha_sq},
                           {"surgical", level_shifts_json(pn.surgical)},
                           {"profit", level_shifts_json(pn.profit)},
                           {"noprofit", level_shifts_json(pn.noprofit)}};
    }
    std::vector<std::vector<double>> sigma_rows;
    for (int r = 0; r < kOutcomeCount; ++r) {
        std::vector<double> row;
        for (int c = 0; c < kOutcomeCount; ++c) row.push_back(truth.sigma(r, c));
        sigma_rows.push_back(std::move(row));
    }
    const json j{{"seed", truth.seed},
                 {"structure",
                  json{{"hospitals", truth.hospitals},
                       {"wards_per_hospital", truth.wards_per_hospital},
                       {"patients_per_ward_month", truth.patients_per_ward_month},
                       {"treated_fraction", truth.treated_fraction},
                       {"surgical_fraction", truth.surgical_fraction},
                       {"ownership_mix", truth.ownership_mix},
                       {"years", truth.years}}},
                 {"patient", patient},
                 {"panel", panel},
                 {"sigma", sigma_rows}};
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write generator truth file: " + path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing generator truth file: " + path);
}

// ---------------------------------------------------------------------------
// Patient-level generation
// ---------------------------------------------------------------------------

AdmissionDataset generate_synthetic(const GeneratorTruth& truth) {
    truth.validate();
    auto eng_structure = make_engine(truth.seed, kStreamStructure);
    auto eng_covariates = make_engine(truth.seed, kStreamCovariates);
    auto eng_effects = make_engine(truth.seed, kStreamEffects);
    auto eng_outcomes = make_engine(truth.seed, kStreamOutcomes);

    const std::vector<HospitalPlan> plans = build_structure(truth, eng_structure);
    const int n_years = static_cast<int>(truth.years.size());
    const int first_year = truth.years.front();

    std::vector<AdmissionRecord> records;
    records.reserve(static_cast<std::size_t>(truth.hospitals) *
                    static_cast<std::size_t>(truth.wards_per_hospital) *
                    static_cast<std::size_t>(n_years) * 12u *
                    static_cast<std::size_t>(truth.patients_per_ward_month));

    std::vector<double> nu(static_cast<std::size_t>(n_years) * kOutcomeCount);
    std::vector<double> mu(static_cast<std::size_t>(truth.wards_per_hospital) *
                           static_cast<std::size_t>(n_years) * kOutcomeCount);

    for (const HospitalPlan& hospital : plans) {
        for (int t = 0; t < n_years; ++t)
            for (int k = 0; k < kOutcomeCount; ++k)
                nu[static_cast<std::size_t>(t * kOutcomeCount + k)] =
                    draw_normal(eng_effects, truth.patient[static_cast<std::size_t>(k)].sigma_nu_sq);
        for (int w = 0; w < truth.wards_per_hospital; ++w)
            for (int t = 0; t < n_years; ++t)
                for (int k = 0; k < kOutcomeCount; ++k)
                    mu[static_cast<std::size_t>((w * n_years + t) * kOutcomeCount + k)] =
                        draw_normal(eng_effects, truth.patient[static_cast<std::size_t>(k)].sigma_mu_sq);

        for (int w = 0; w < truth.wards_per_hospital; ++w) {
            const WardPlan& ward = hospital.wards[static_cast<std::size_t>(w)];
            for (int t = 0; t < n_years; ++t) {
                const int year = truth.years[static_cast<std::size_t>(t)];
                for (int month = 1; month <= 12; ++month) {
                    const int month_index = 12 * (year - first_year) + month;
                    for (int i = 0; i < truth.patients_per_ward_month; ++i) {
                        AdmissionRecord r;
                        r.hospital_id = hospital.id;
                        r.ward_id = ward.id;
                        r.year = year;
                        r.month = month;
                        const Covariates c = draw_covariates(eng_covariates);
                        r.gender = c.gender;
                        r.age = c.age;
                        r.intcare = c.intcare;
                        r.drg_weight = c.drg_weight;
                        r.comorbidity = c.comorbidity;
                        r.technology = hospital.technology;
                        r.teaching = hospital.teaching;
                        r.specialised = hospital.specialised;
                        r.surgical = ward.surgical;
                        r.ownership = hospital.ownership;
                        r.treated = ward.treated;
                        for (int k = 0; k < kOutcomeCount; ++k) {
                            const Outcome o = kAllOutcomes[static_cast<std::size_t>(k)];
                            if (!r.outcome_defined(o)) continue;
                            const auto& pt = truth.patient[static_cast<std::size_t>(k)];
                            const double lp =
                                pt.alpha + eta_dot(pt.eta, c) +
                                mu[static_cast<std::size_t>((w * n_years + t) * kOutcomeCount + k)] +
                                nu[static_cast<std::size_t>(t * kOutcomeCount + k)] +
                                did_shift(truth.panel[static_cast<std::size_t>(k)], ward.treated,
                                          year, month_index, ward.surgical, hospital.ownership);
                            r.outcomes[static_cast<std::size_t>(k)] =
                                draw_bernoulli(eng_outcomes, inv_logit(lp));
                        }
                        records.push_back(std::move(r));
                    }
                }
            }
        }
    }
    return AdmissionDataset(std::move(records));
}

// ---------------------------------------------------------------------------
// Panel-level generation
// ---------------------------------------------------------------------------

PanelDataset generate_panel(const GeneratorTruth& truth) {
    truth.validate();
    auto eng_structure = make_engine(truth.seed, kStreamStructure);
    auto eng_effects = make_engine(truth.seed, kStreamEffects);
    auto eng_residuals = make_engine(truth.seed, kStreamOutcomes);

    const std::vector<HospitalPlan> plans = build_structure(truth, eng_structure);
    Matrix chol = truth.sigma;
    cholesky_decompose(chol);
    chol = chol.triangularView<Eigen::Lower>();  // factor only; zero the upper copy
    const int first_year = truth.years.front();

    PanelDataset panel;
    panel.first_year = first_year;
    Vector z(kOutcomeCount), eps(kOutcomeCount);
    std::array<double, kOutcomeCount> alpha{};

    for (const HospitalPlan& hospital : plans) {
        for (int k = 0; k < kOutcomeCount; ++k)
            alpha[static_cast<std::size_t>(k)] = draw_normal(
                eng_effects, truth.panel[static_cast<std::size_t>(k)].sigma_alpha_sq);
        for (const WardPlan& ward : hospital.wards) {
            for (int year : truth.years) {
                for (int month = 1; month <= 12; ++month) {
                    for (int k = 0; k < kOutcomeCount; ++k)
                        z[k] = std::normal_distribution<double>(0.0, 1.0)(eng_residuals);
                    eps = chol * z;
                    PanelCell cell;
                    cell.hospital_id = hospital.id;
                    cell.ward_id = ward.id;
                    cell.year = year;
                    cell.month = month;
                    cell.month_index = 12 * (year - first_year) + month;
                    cell.treated = ward.treated;
                    cell.surgical = ward.surgical;
                    cell.ownership = hospital.ownership;
                    cell.n_patients = truth.patients_per_ward_month;
                    for (int k = 0; k < kOutcomeCount; ++k) {
                        const Outcome o = kAllOutcomes[static_cast<std::size_t>(k)];
                        if (!cell.ho_defined(o)) {
                            cell.ho[static_cast<std::size_t>(k)] =
                                std::numeric_limits<double>::quiet_NaN();
                            continue;
                        }
                        const auto& pn = truth.panel[static_cast<std::size_t>(k)];
                        cell.ho[static_cast<std::size_t>(k)] =
                            pn.intercept +
                            did_shift(pn, ward.treated, year, cell.month_index, ward.surgical,
                                      hospital.ownership) +
                            alpha[static_cast<std::size_t>(k)] + eps[k];
                    }
                    panel.cells.push_back(std::move(cell));
                }
            }
        }
    }
    return panel;
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

double four_means_did(const PanelDataset& panel, Outcome outcome, int pre_year, int post_year) {
    double sums[2][2] = {{0, 0}, {0, 0}};
    std::int64_t counts[2][2] = {{0, 0}, {0, 0}};
    const int k = static_cast<int>(outcome);
    for (const PanelCell& cell : panel.cells) {
        if (cell.year != pre_year && cell.year != post_year) continue;
        if (!cell.ho_defined(outcome)) continue;
        const double value = cell.ho[static_cast<std::size_t>(k)];
        if (std::isnan(value)) continue;
        const int post = cell.year == post_year ? 1 : 0;
        sums[cell.treated][post] += value;
        counts[cell.treated][post] += 1;
    }
    for (int g = 0; g < 2; ++g)
        for (int post = 0; post < 2; ++post)
            if (counts[g][post] == 0)
                throw StructureError(
                    std::string("four-means DID: no cells for the ") +
                    (g == 1 ? "treated" : "control") + " group in year " +
                    std::to_string(post == 1 ? post_year : pre_year) + " for outcome " +
                    std::string(outcome_name(outcome)));
    const auto mean = [&](int g, int post) { return sums[g][post] / static_cast<double>(counts[g][post]); };
    return (mean(1, 1) - mean(1, 0)) - (mean(0, 1) - mean(0, 0));
}

double panel_truth_did(const GeneratorTruth& truth, Outcome outcome, int year, int probe_draws) {
    truth.validate();
    const int ref = truth.years.front();
    if (year == ref || std::find(truth.years.begin(), truth.years.end(), year) == truth.years.end())
        throw ConfigError("probe year must be an observed non-reference year");
    if (probe_draws < 1) throw ConfigError("probe draws must be positive");

    const int k = static_cast<int>(outcome);
    const auto& pt = truth.patient[static_cast<std::size_t>(k)];
    const auto& pn = truth.panel[static_cast<std::size_t>(k)];
    auto eng = make_engine(derive_seed(truth.seed, kStreamProbeBase + static_cast<std::uint64_t>(k)),
                           static_cast<std::uint64_t>(year));

    // Common random numbers across the four group-year cells: per draw, one
    // shared (covariates, effects, ward profile, month), so the simulated DID
    // contrast has far smaller Monte-Carlo error than any single cell mean.
    double cell_sum[2][2] = {{0, 0}, {0, 0}};
    std::uniform_int_distribution<int> month_dist(1, 12);
    for (int i = 0; i < probe_draws; ++i) {
        const Covariates c = draw_covariates(eng);
        const double mu = draw_normal(eng, pt.sigma_mu_sq);
        const double nu = draw_normal(eng, pt.sigma_nu_sq);
        const int surgical =
            outcome == Outcome::return_or ? 1 : draw_bernoulli(eng, truth.surgical_fraction);
        const Ownership ownership = draw_ownership(eng, truth.ownership_mix);
        const int month = month_dist(eng);
        const double base = pt.alpha + eta_dot(pt.eta, c) + mu + nu;
        for (int g = 0; g < 2; ++g) {
            for (int post = 0; post < 2; ++post) {
                const int t = post == 1 ? year : ref;
                const int month_index = 12 * (t - ref) + month;
                cell_sum[g][post] +=
                    inv_logit(base + did_shift(pn, g, t, month_index, surgical, ownership));
            }
        }
    }
    const double n = static_cast<double>(probe_draws);
    return ((cell_sum[1][1] - cell_sum[1][0]) - (cell_sum[0][1] - cell_sum[0][0])) / n;
}

}  // namespace p4p
