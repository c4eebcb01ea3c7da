#include "p4p/core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <tuple>

#include <nlohmann/json.hpp>

#include "p4p/csv.hpp"

namespace p4p {

// ---------------------------------------------------------------------------
// Enum helpers
// ---------------------------------------------------------------------------

std::string_view outcome_name(Outcome o) {
    switch (o) {
        case Outcome::mortality: return "mortality";
        case Outcome::readmissions: return "readmissions";
        case Outcome::return_or: return "return_or";
        case Outcome::transfers: return "transfers";
        case Outcome::voldisch: return "voldisch";
    }
    throw Error("unknown outcome id");
}

std::string_view outcome_panel_column(Outcome o) {
    switch (o) {
        case Outcome::mortality: return "ho_mortality";
        case Outcome::readmissions: return "ho_readmissions";
        case Outcome::return_or: return "ho_return";
        case Outcome::transfers: return "ho_transfers";
        case Outcome::voldisch: return "ho_voldisch";
    }
    throw Error("unknown outcome id");
}

Outcome parse_outcome(std::string_view name) {
    for (Outcome o : kAllOutcomes) {
        if (outcome_name(o) == name) return o;
    }
    throw ConfigError("unknown outcome: '" + std::string(name) + "'");
}

std::string_view ownership_label(Ownership o) {
    switch (o) {
        case Ownership::public_owned: return "PUBLIC";
        case Ownership::private_profit: return "PROFIT";
        case Ownership::private_nonprofit: return "NOPROFIT";
    }
    throw Error("unknown ownership id");
}

Ownership parse_ownership(std::string_view label) {
    if (label == "PUBLIC") return Ownership::public_owned;
    if (label == "PROFIT") return Ownership::private_profit;
    if (label == "NOPROFIT") return Ownership::private_nonprofit;
    throw ConfigError("unknown ownership: '" + std::string(label) + "'");
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

namespace {

auto record_key(const AdmissionRecord& r) {
    return std::tie(r.hospital_id, r.ward_id, r.year, r.month, r.gender, r.age, r.intcare,
                    r.drg_weight, r.comorbidity, r.technology, r.teaching, r.specialised,
                    r.surgical, r.ownership, r.treated, r.outcomes);
}

}  // namespace

bool record_before(const AdmissionRecord& a, const AdmissionRecord& b) {
    return record_key(a) < record_key(b);
}

double covariate_value(const AdmissionRecord& r, std::string_view name) {
    if (name == "gender") return r.gender;
    if (name == "age") return r.age;
    if (name == "intcare") return r.intcare;
    if (name == "drg_weight") return r.drg_weight;
    if (name == "comorbidity") return r.comorbidity;
    if (name == "technology") return r.technology;
    if (name == "teaching") return r.teaching;
    if (name == "specialised") return r.specialised;
    throw DesignError("unknown covariate: '" + std::string(name) + "'");
}

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ValidationError(msg);
}

void check_record(const AdmissionRecord& r) {
    const std::string where = " (hospital " + r.hospital_id + ", ward " + r.ward_id + ", year " +
                              std::to_string(r.year) + ", month " + std::to_string(r.month) + ")";
    require(!r.hospital_id.empty() && !r.ward_id.empty(), "empty hospital or ward id" + where);
    require(r.month >= 1 && r.month <= 12, "month out of range" + where);
    require(r.gender == 0 || r.gender == 1, "gender must be binary" + where);
    require(std::isfinite(r.age) && r.age >= 0, "age must be non-negative" + where);
    require(r.intcare >= 0, "intcare must be non-negative" + where);
    require(std::isfinite(r.drg_weight) && r.drg_weight >= 0,
            "drg_weight must be non-negative" + where);
    require(r.comorbidity >= 0, "comorbidity must be non-negative" + where);
    for (int v : {r.technology, r.teaching, r.specialised, r.surgical, r.treated}) {
        require(v == 0 || v == 1, "ward attribute must be binary" + where);
    }
    for (Outcome o : kAllOutcomes) {
        if (o == Outcome::return_or && r.surgical == 0) continue;
        const int y = r.outcome(o);
        require(y == 0 || y == 1,
                "outcome " + std::string(outcome_name(o)) + " must be binary" + where);
    }
}

}  // namespace

AdmissionDataset::AdmissionDataset(std::vector<AdmissionRecord> records)
    : records_(std::move(records)) {
    require(!records_.empty(), "dataset is empty");

    std::map<std::pair<std::string, std::string>, std::size_t> ward_of;
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const AdmissionRecord& r = records_[i];
        check_record(r);
        auto key = std::make_pair(r.hospital_id, r.ward_id);
        auto [it, inserted] = ward_of.emplace(key, wards_.size());
        if (inserted) {
            WardGroup w;
            w.hospital_id = r.hospital_id;
            w.ward_id = r.ward_id;
            w.treated = r.treated;
            w.surgical = r.surgical;
            w.technology = r.technology;
            w.teaching = r.teaching;
            w.specialised = r.specialised;
            w.ownership = r.ownership;
            wards_.push_back(std::move(w));
        }
        WardGroup& w = wards_[it->second];
        const bool constant = w.treated == r.treated && w.surgical == r.surgical &&
                              w.technology == r.technology && w.teaching == r.teaching &&
                              w.specialised == r.specialised && w.ownership == r.ownership;
        require(constant, "ward attribute not constant across rows (hospital " + r.hospital_id +
                              ", ward " + r.ward_id + ")");
        w.rows.push_back(i);
    }

    // wards_ is already sorted: std::map iterates keys in order and we pushed
    // in first-seen order — re-order rows-stable by key to guarantee it.
    std::vector<WardGroup> sorted;
    sorted.reserve(wards_.size());
    for (const auto& [key, idx] : ward_of) sorted.push_back(std::move(wards_[idx]));
    wards_ = std::move(sorted);

    std::set<std::string> hospitals;
    for (WardGroup& w : wards_) {
        std::set<int> years;
        for (std::size_t row : w.rows) years.insert(records_[row].year);
        w.years.assign(years.begin(), years.end());
        hospitals.insert(w.hospital_id);
    }
    hospitals_.assign(hospitals.begin(), hospitals.end());
}

std::vector<int> AdmissionDataset::years() const {
    std::set<int> years;
    for (const WardGroup& w : wards_) years.insert(w.years.begin(), w.years.end());
    return {years.begin(), years.end()};
}

// ---------------------------------------------------------------------------
// StudyConfig
// ---------------------------------------------------------------------------

void StudyConfig::validate() const {
    if (pre_years.empty() || post_years.empty()) {
        throw ConfigError("pre_years and post_years must be non-empty");
    }
    for (int y : pre_years) {
        if (std::count(post_years.begin(), post_years.end(), y)) {
            throw ConfigError("year " + std::to_string(y) + " listed as both pre and post");
        }
    }
    if (!std::count(pre_years.begin(), pre_years.end(), reference_year)) {
        throw ConfigError("reference_year " + std::to_string(reference_year) +
                          " must be one of the pre_years");
    }
    if (outcomes.empty()) throw ConfigError("outcome set must be non-empty");
    if (bootstrap_replicates < 100) {
        throw ConfigError("bootstrap_replicates must be at least 100, got " +
                          std::to_string(bootstrap_replicates));
    }
}

std::vector<int> StudyConfig::years() const {
    std::set<int> all(pre_years.begin(), pre_years.end());
    all.insert(post_years.begin(), post_years.end());
    return {all.begin(), all.end()};
}

int StudyConfig::first_year() const { return years().front(); }

bool StudyConfig::in_window(int year) const {
    const auto all = years();
    return std::count(all.begin(), all.end(), year) != 0;
}

int StudyConfig::month_index(int year, int month) const {
    return 12 * (year - first_year()) + month;
}

namespace {

using nlohmann::json;

StudyConfig config_from_json(const json& j) {
    StudyConfig c;
    try {
        if (j.contains("pre_years")) c.pre_years = j.at("pre_years").get<std::vector<int>>();
        if (j.contains("post_years")) c.post_years = j.at("post_years").get<std::vector<int>>();
        if (j.contains("reference_year")) c.reference_year = j.at("reference_year").get<int>();
        if (j.contains("outcomes")) {
            c.outcomes.clear();
            for (const auto& name : j.at("outcomes")) {
                c.outcomes.push_back(parse_outcome(name.get<std::string>()));
            }
        }
        if (j.contains("bootstrap_replicates")) {
            c.bootstrap_replicates = j.at("bootstrap_replicates").get<int>();
        }
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("tolerances")) {
            const auto& t = j.at("tolerances");
            if (t.contains("glmm_gradient_tol")) {
                c.tolerances.glmm_gradient_tol = t.at("glmm_gradient_tol").get<double>();
            }
            if (t.contains("glmm_max_outer_iterations")) {
                c.tolerances.glmm_max_outer_iterations =
                    t.at("glmm_max_outer_iterations").get<int>();
            }
            if (t.contains("em_rel_tol")) c.tolerances.em_rel_tol = t.at("em_rel_tol").get<double>();
            if (t.contains("em_max_iterations")) {
                c.tolerances.em_max_iterations = t.at("em_max_iterations").get<int>();
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    }
    c.validate();
    return c;
}

json config_to_json(const StudyConfig& c) {
    json j;
    j["pre_years"] = c.pre_years;
    j["post_years"] = c.post_years;
    j["reference_year"] = c.reference_year;
    std::vector<std::string> names;
    for (Outcome o : c.outcomes) names.emplace_back(outcome_name(o));
    j["outcomes"] = names;
    j["bootstrap_replicates"] = c.bootstrap_replicates;
    j["seed"] = c.seed;
    j["tolerances"] = {{"glmm_gradient_tol", c.tolerances.glmm_gradient_tol},
                       {"glmm_max_outer_iterations", c.tolerances.glmm_max_outer_iterations},
                       {"em_rel_tol", c.tolerances.em_rel_tol},
                       {"em_max_iterations", c.tolerances.em_max_iterations}};
    return j;
}

}  // namespace

StudyConfig parse_study_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j);
}

StudyConfig load_study_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_study_config_json(text);
}

void save_study_config(const StudyConfig& config, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open file for writing: " + path);
    out << config_to_json(config).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string>& admission_columns() {
    static const std::vector<std::string> cols = {
        "hospital_id", "ward_id",   "year",       "month",      "gender",
        "age",         "intcare",   "drg_weight", "comorbidity", "technology",
        "teaching",    "specialised", "surgical", "ownership",  "treated",
        "mortality",   "readmissions", "return_or", "transfers", "voldisch"};
    return cols;
}

}  // namespace

AdmissionDataset load_admissions(const std::string& path, const StudyConfig& config) {
    config.validate();
    CsvReader reader(path);

    // exact column set, any order
    for (const std::string& c : admission_columns()) reader.column(c);
    if (reader.header().size() != admission_columns().size()) {
        throw SchemaError("unexpected extra columns in " + path, 1);
    }
    const std::size_t c_hospital = reader.column("hospital_id");
    const std::size_t c_ward = reader.column("ward_id");
    const std::size_t c_year = reader.column("year");
    const std::size_t c_month = reader.column("month");
    const std::size_t c_gender = reader.column("gender");
    const std::size_t c_age = reader.column("age");
    const std::size_t c_intcare = reader.column("intcare");
    const std::size_t c_drg = reader.column("drg_weight");
    const std::size_t c_comorb = reader.column("comorbidity");
    const std::size_t c_tech = reader.column("technology");
    const std::size_t c_teach = reader.column("teaching");
    const std::size_t c_spec = reader.column("specialised");
    const std::size_t c_surg = reader.column("surgical");
    const std::size_t c_own = reader.column("ownership");
    const std::size_t c_treat = reader.column("treated");
    std::array<std::size_t, kOutcomeCount> c_out{};
    for (Outcome o : kAllOutcomes) {
        c_out[static_cast<int>(o)] = reader.column(std::string(outcome_name(o)));
    }

    std::vector<AdmissionRecord> records;
    std::vector<std::string> f;
    while (reader.next(f)) {
        const std::size_t line = reader.line_number();
        AdmissionRecord r;
        r.hospital_id = f[c_hospital];
        r.ward_id = f[c_ward];
        if (r.hospital_id.empty()) throw SchemaError("empty hospital_id", line, "hospital_id");
        if (r.ward_id.empty()) throw SchemaError("empty ward_id", line, "ward_id");
        r.year = static_cast<int>(parse_long(f[c_year], line, "year"));
        if (!config.in_window(r.year)) {
            throw SchemaError("year " + std::to_string(r.year) + " outside the study window",
                              line, "year");
        }
        r.month = static_cast<int>(parse_long(f[c_month], line, "month"));
        if (r.month < 1 || r.month > 12) throw SchemaError("month out of range", line, "month");
        r.gender = parse_binary(f[c_gender], line, "gender");
        r.age = parse_double(f[c_age], line, "age");
        if (!(r.age >= 0)) throw SchemaError("age must be non-negative", line, "age");
        r.intcare = static_cast<int>(parse_long(f[c_intcare], line, "intcare"));
        if (r.intcare < 0) throw SchemaError("intcare must be non-negative", line, "intcare");
        r.drg_weight = parse_double(f[c_drg], line, "drg_weight");
        if (!(r.drg_weight >= 0)) {
            throw SchemaError("drg_weight must be non-negative", line, "drg_weight");
        }
        r.comorbidity = static_cast<int>(parse_long(f[c_comorb], line, "comorbidity"));
        if (r.comorbidity < 0) {
            throw SchemaError("comorbidity must be non-negative", line, "comorbidity");
        }
        r.technology = parse_binary(f[c_tech], line, "technology");
        r.teaching = parse_binary(f[c_teach], line, "teaching");
        r.specialised = parse_binary(f[c_spec], line, "specialised");
        r.surgical = parse_binary(f[c_surg], line, "surgical");
        try {
            r.ownership = parse_ownership(f[c_own]);
        } catch (const ConfigError& e) {
            throw SchemaError(e.what(), line, "ownership");
        }
        r.treated = parse_binary(f[c_treat], line, "treated");
        for (Outcome o : kAllOutcomes) {
            const std::string& cell = f[c_out[static_cast<int>(o)]];
            if (o == Outcome::return_or) {
                if (r.surgical == 0) {
                    if (!cell.empty()) {
                        throw SchemaError("return_or defined only for surgical wards", line,
                                          "return_or");
                    }
                    continue;
                }
                if (cell.empty()) {
                    throw SchemaError("return_or missing for a surgical ward", line, "return_or");
                }
            }
            r.outcomes[static_cast<int>(o)] =
                parse_binary(cell, line, std::string(outcome_name(o)));
        }
        records.push_back(std::move(r));
    }
    if (records.empty()) throw SchemaError("no data rows in " + path);
    return AdmissionDataset(std::move(records));
}

void save_admissions(const AdmissionDataset& ds, const std::string& path) {
    CsvWriter writer(path);
    writer.write_row(admission_columns());
    std::vector<std::string> f(admission_columns().size());
    for (const AdmissionRecord& r : ds.records()) {
        f[0] = r.hospital_id;
        f[1] = r.ward_id;
        f[2] = std::to_string(r.year);
        f[3] = std::to_string(r.month);
        f[4] = std::to_string(r.gender);
        f[5] = format_double(r.age);
        f[6] = std::to_string(r.intcare);
        f[7] = format_double(r.drg_weight);
        f[8] = std::to_string(r.comorbidity);
        f[9] = std::to_string(r.technology);
        f[10] = std::to_string(r.teaching);
        f[11] = std::to_string(r.specialised);
        f[12] = std::to_string(r.surgical);
        f[13] = std::string(ownership_label(r.ownership));
        f[14] = std::to_string(r.treated);
        f[15] = std::to_string(r.outcome(Outcome::mortality));
        f[16] = std::to_string(r.outcome(Outcome::readmissions));
        f[17] = r.surgical ? std::to_string(r.outcome(Outcome::return_or)) : std::string();
        f[18] = std::to_string(r.outcome(Outcome::transfers));
        f[19] = std::to_string(r.outcome(Outcome::voldisch));
        writer.write_row(f);
    }
    writer.flush();
}

}  // namespace p4p
