// p4peval: batch evaluation pipeline for pay-for-performance hospital studies.
//
// Commands
//   validate   check an admissions extract against the design assumptions
//   summarize  per-year descriptive table of covariates and outcomes
//   adjust     risk-adjust the five outcomes and collapse to the ward-month panel
//   did        fit the multivariate DID model, bootstrap, joint trend test
//   simulate   synthetic-data recovery study from a ground-truth JSON
//
// Every run writes <out>/manifest.json with SHA-256 digests of the inputs
// (hashed before any computation) and of each produced artifact; the manifest
// is emitted on failures too. Outputs are byte-identical for identical inputs
// and seeds. Exit codes: 0 ok, 1 I/O, 2 validation/design, 3 numerical.

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "p4p/core.hpp"
#include "p4p/did.hpp"
#include "p4p/effects.hpp"
#include "p4p/errors.hpp"
#include "p4p/inference.hpp"
#include "p4p/parallel.hpp"
#include "p4p/riskadjust.hpp"
#include "p4p/rng.hpp"
#include "p4p/sim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Hashing and the run manifest
// ---------------------------------------------------------------------------

struct HashResult {
    std::string hex;
    std::uint64_t bytes = 0;
};

HashResult sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw p4p::IoError("cannot open file for hashing: " + path);
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw p4p::Error("SHA-256 context initialization failed");
    }
    char buffer[1 << 16];
    HashResult result;
    while (in) {
        in.read(buffer, sizeof buffer);
        const std::streamsize got = in.gcount();
        if (got > 0) {
            EVP_DigestUpdate(ctx, buffer, static_cast<std::size_t>(got));
            result.bytes += static_cast<std::uint64_t>(got);
        }
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    for (unsigned int i = 0; i < len; ++i) {
        result.hex.push_back(hex[digest[i] >> 4]);
        result.hex.push_back(hex[digest[i] & 0xF]);
    }
    return result;
}

// Collects inputs (hashed at registration time, before any fitting starts),
// outputs (hashed as written) and the final status; written even on failure.
class RunManifest {
public:
    RunManifest(std::string command, fs::path out_dir)
        : command_(std::move(command)), out_dir_(std::move(out_dir)) {}

    void add_input(const std::string& path) {
        const HashResult h = sha256_file(path);
        inputs_.push_back(json{{"path", path}, {"sha256", h.hex}, {"bytes", h.bytes}});
    }
    void add_output(const std::string& name) {
        const HashResult h = sha256_file((out_dir_ / name).string());
        outputs_.push_back(json{{"name", name}, {"sha256", h.hex}, {"bytes", h.bytes}});
    }
    void set_parameter(const std::string& key, json value) { parameters_[key] = std::move(value); }
    fs::path out_path(const std::string& name) const { return out_dir_ / name; }

    void write(const std::string& status, int exit_code, const std::string& message) const {
        json doc{{"command", command_}, {"parameters", parameters_}, {"inputs", inputs_},
                 {"outputs", outputs_}, {"status", status}, {"exit_code", exit_code}};
        if (!message.empty()) doc["message"] = message;
        std::ofstream out(out_dir_ / "manifest.json", std::ios::binary);
        if (!out) throw p4p::IoError("cannot write manifest under " + out_dir_.string());
        out << doc.dump(2) << '\n';
    }

private:
    std::string command_;
    fs::path out_dir_;
    json parameters_ = json::object();
    std::vector<json> inputs_;
    std::vector<json> outputs_;
};

int exit_code_for(const p4p::Error& e) {
    if (dynamic_cast<const p4p::IoError*>(&e) != nullptr) return 1;
    if (dynamic_cast<const p4p::NumericalError*>(&e) != nullptr ||
        dynamic_cast<const p4p::SingularMatrixError*>(&e) != nullptr ||
        dynamic_cast<const p4p::LineSearchError*>(&e) != nullptr ||
        dynamic_cast<const p4p::SeparationError*>(&e) != nullptr)
        return 3;
    return 2;  // schema, validation, config, design, structure, scheme
}

// Shared per-command option set.
struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    int workers = 0;
    std::string out_dir = ".";
    CLI::Option* config_opt = nullptr;
    CLI::Option* seed_opt = nullptr;
    CLI::Option* workers_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    args.config_opt = cmd->add_option("--config", args.config_path, "Study configuration JSON");
    args.seed_opt = cmd->add_option("--seed", args.seed, "Seed override");
    args.workers_opt = cmd->add_option("--workers", args.workers, "Worker thread count");
    cmd->add_option("--out", args.out_dir, "Output directory (fixed file names)");
}

p4p::StudyConfig resolve_config(const CommonArgs& args, RunManifest& manifest) {
    p4p::StudyConfig config;
    if (args.config_opt->count() > 0) {
        manifest.add_input(args.config_path);
        config = p4p::load_study_config(args.config_path);
    }
    if (args.seed_opt->count() > 0) config.seed = args.seed;
    return config;
}

int resolve_workers(const CommonArgs& args) {
    if (args.workers_opt->count() == 0) return p4p::default_workers();
    if (args.workers < 1) throw p4p::ConfigError("workers must be at least 1");
    return args.workers;
}

// Runs the command body with the manifest emitted on every path.
int run_with_manifest(RunManifest& manifest, const std::function<int()>& body) {
    std::string status = "ok", message;
    int code = 0;
    try {
        code = body();
        if (code == 3) status = "non_converged";
    } catch (const p4p::Error& e) {
        code = exit_code_for(e);
        status = "error";
        message = e.what();
        std::cerr << "error: " << message << '\n';
    }
    try {
        manifest.write(status, code, message);
    } catch (const p4p::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return code;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_validate(const CommonArgs& args, const std::string& input, RunManifest& manifest) {
    return run_with_manifest(manifest, [&]() -> int {
        const p4p::StudyConfig config = resolve_config(args, manifest);
        manifest.add_input(input);
        const p4p::AdmissionDataset ds = p4p::load_admissions(input, config);
        const p4p::DidAssumptionReport report = p4p::validate_did_assumptions(ds);
        const std::string text = report.to_string();
        if (!text.empty()) std::cout << text << '\n';
        manifest.set_parameter("records", ds.size());
        manifest.set_parameter("fatal", report.fatal());
        if (report.fatal()) throw p4p::ValidationError(text);
        std::cout << "validation passed: " << ds.size() << " admissions, "
                  << ds.wards().size() << " wards, " << ds.hospitals().size() << " hospitals\n";
        return 0;
    });
}

int cmd_summarize(const CommonArgs& args, const std::string& input, RunManifest& manifest) {
    return run_with_manifest(manifest, [&]() -> int {
        const p4p::StudyConfig config = resolve_config(args, manifest);
        manifest.add_input(input);
        const p4p::AdmissionDataset ds = p4p::load_admissions(input, config);
        const p4p::SummaryTable table = p4p::summarize(ds);
        table.save_csv(manifest.out_path("summary.csv").string());
        manifest.add_output("summary.csv");
        return 0;
    });
}

int cmd_adjust(const CommonArgs& args, const std::string& input, RunManifest& manifest) {
    return run_with_manifest(manifest, [&]() -> int {
        const p4p::StudyConfig config = resolve_config(args, manifest);
        const int workers = resolve_workers(args);
        manifest.add_input(input);
        manifest.set_parameter("workers", workers);
        const p4p::AdmissionDataset ds = p4p::load_admissions(input, config);

        p4p::OutcomeProbabilities probs;
        std::array<bool, p4p::kOutcomeCount> converged{};
        p4p::parallel_for(p4p::kOutcomeCount, workers, [&](std::size_t k) {
            const p4p::Outcome o = p4p::kAllOutcomes[k];
            p4p::LogisticMixedSpec spec;
            spec.outcome = o;
            spec.gradient_tol = config.tolerances.glmm_gradient_tol;
            spec.max_outer_iterations = config.tolerances.glmm_max_outer_iterations;
            try {
                const p4p::LogisticMixedFit fit = p4p::fit_logistic_mixed(ds, spec);
                converged[k] = fit.converged;
                probs[k] = p4p::predict_probabilities(fit, ds).probabilities;
            } catch (const p4p::SeparationError& e) {
                throw p4p::SeparationError(std::string(p4p::outcome_name(o)) + ": " + e.what());
            }
        });

        const p4p::PanelDataset panel = p4p::collapse_to_panel(ds, probs, config);
        p4p::save_panel(panel, manifest.out_path("panel.csv").string());
        manifest.add_output("panel.csv");

        json flags = json::object();
        std::string stragglers;
        for (std::size_t k = 0; k < p4p::kOutcomeCount; ++k) {
            flags[std::string(p4p::outcome_name(p4p::kAllOutcomes[k]))] = converged[k];
            if (!converged[k])
                stragglers += (stragglers.empty() ? "" : ", ") +
                              std::string(p4p::outcome_name(p4p::kAllOutcomes[k]));
        }
        manifest.set_parameter("converged", flags);
        if (!stragglers.empty()) {
            std::cerr << "warning: risk model did not converge for: " << stragglers << '\n';
            return 3;
        }
        return 0;
    });
}

int cmd_did(const CommonArgs& args, const std::string& panel_path, const std::string& scheme_name,
            RunManifest& manifest) {
    return run_with_manifest(manifest, [&]() -> int {
        const p4p::StudyConfig config = resolve_config(args, manifest);
        const int workers = resolve_workers(args);
        manifest.add_input(panel_path);
        manifest.set_parameter("scheme", scheme_name);
        manifest.set_parameter("bootstrap_replicates", config.bootstrap_replicates);
        manifest.set_parameter("seed", config.seed);
        manifest.set_parameter("workers", workers);

        const p4p::PanelDataset panel = p4p::load_panel(panel_path);
        p4p::InteractionScheme scheme;
        scheme.kind = p4p::parse_scheme(scheme_name);

        p4p::MvmmOptions fit_options;
        fit_options.em_rel_tol = config.tolerances.em_rel_tol;
        fit_options.em_max_iterations = config.tolerances.em_max_iterations;
        fit_options.refine = true;

        p4p::BootstrapOptions boot_options;
        boot_options.replicates = config.bootstrap_replicates;
        boot_options.seed = config.seed;
        boot_options.workers = workers;
        boot_options.fit = fit_options;

        const p4p::DidDesign design = p4p::build_design(panel, scheme);
        const p4p::BootstrapResult boot = p4p::cluster_bootstrap(design, boot_options);
        const p4p::MultivariateMixedFit& fit = boot.full_fit;

        const p4p::CoefficientTable table = p4p::coefficient_table(fit, boot);
        table.save_csv(manifest.out_path("coefficients.csv").string());
        manifest.add_output("coefficients.csv");

        const p4p::JointTestResult joint = p4p::wilks_parallel_trend_test(panel);
        {
            const json jt{{"lambda", joint.lambda}, {"stat", joint.stat}, {"df1", joint.df1},
                          {"df2", joint.df2}, {"p", joint.p}};
            std::ofstream out(manifest.out_path("joint_test.json"), std::ios::binary);
            if (!out) throw p4p::IoError("cannot write joint_test.json");
            out << jt.dump(2) << '\n';
        }
        manifest.add_output("joint_test.json");

        const p4p::MarginalEffectsTable margins = p4p::marginal_effects(fit, design);
        margins.save_csv(manifest.out_path("margins.csv").string());
        manifest.add_output("margins.csv");

        std::vector<p4p::DidSummary> summaries;
        for (const std::string& level : margins.levels)
            summaries.push_back(p4p::did_reduction(margins, level));
        std::vector<p4p::SavingsEntry> savings;
        const bool base_scheme = scheme.kind == p4p::SchemeKind::base;
        if (base_scheme && !summaries.empty()) {
            std::map<int, double> treated_volume;
            for (const p4p::PanelCell& cell : panel.cells)
                if (cell.treated == 1) treated_volume[cell.year] += cell.n_patients;
            savings = p4p::savings_count(summaries.front(), treated_volume);
        }
        p4p::save_did_summary_csv(summaries, base_scheme ? &savings : nullptr,
                                  manifest.out_path("did_summary.csv").string());
        manifest.add_output("did_summary.csv");

        manifest.set_parameter("converged", fit.converged);
        manifest.set_parameter("bootstrap_failed_replicates", boot.n_failed);
        manifest.set_parameter("joint_test_p", joint.p);
        if (!fit.converged || !boot.valid) {
            std::cerr << "warning: " << (!fit.converged ? "panel fit did not converge"
                                                        : "too many bootstrap refits failed")
                      << '\n';
            return 3;
        }
        return 0;
    });
}

int cmd_simulate(const CommonArgs& args, const std::string& truth_path, int replicates,
                 const std::string& mode_name, bool no_bootstrap, int bootstrap_replicates,
                 RunManifest& manifest) {
    return run_with_manifest(manifest, [&]() -> int {
        const int workers = resolve_workers(args);
        manifest.add_input(truth_path);
        p4p::GeneratorTruth truth = p4p::load_generator_truth(truth_path);
        if (args.seed_opt->count() > 0) truth.seed = args.seed;

        p4p::RecoveryOptions options;
        options.replicates = replicates;
        options.workers = workers;
        options.run_bootstrap = !no_bootstrap;
        options.bootstrap_replicates = bootstrap_replicates;
        if (mode_name == "panel")
            options.mode = p4p::RecoveryMode::panel_only;
        else if (mode_name == "full")
            options.mode = p4p::RecoveryMode::full_pipeline;
        else
            throw p4p::ConfigError("unknown simulation mode: " + mode_name);

        manifest.set_parameter("replicates", replicates);
        manifest.set_parameter("mode", mode_name);
        manifest.set_parameter("bootstrap", options.run_bootstrap);
        manifest.set_parameter("seed", truth.seed);
        manifest.set_parameter("workers", workers);

        const p4p::RecoveryReport report = p4p::recovery_study(truth, options);
        report.save_csv(manifest.out_path("recovery.csv").string());
        manifest.add_output("recovery.csv");
        report.save_json(manifest.out_path("recovery.json").string());
        manifest.add_output("recovery.json");
        manifest.set_parameter("failed_replicates", report.failed_replicates);
        return 0;
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"policy evaluation pipeline: risk adjustment and multivariate DID"};
    app.require_subcommand(1);

    CommonArgs validate_args, summarize_args, adjust_args, did_args, simulate_args;
    std::string validate_input, summarize_input, adjust_input, did_panel, simulate_truth;
    std::string did_scheme = "base", simulate_mode = "full";
    int simulate_replicates = 200, simulate_bootstrap_replicates = 200;
    bool simulate_no_bootstrap = false;

    CLI::App* validate = app.add_subcommand("validate", "Check design assumptions");
    validate->add_option("--input", validate_input, "Admissions CSV")->required();
    add_common(validate, validate_args);

    CLI::App* summarize = app.add_subcommand("summarize", "Per-year descriptive table");
    summarize->add_option("--input", summarize_input, "Admissions CSV")->required();
    add_common(summarize, summarize_args);

    CLI::App* adjust = app.add_subcommand("adjust", "Risk-adjust and collapse to the panel");
    adjust->add_option("--input", adjust_input, "Admissions CSV")->required();
    add_common(adjust, adjust_args);

    CLI::App* did = app.add_subcommand("did", "Fit the DID model with bootstrap inference");
    did->add_option("--panel", did_panel, "Ward-month panel CSV")->required();
    did->add_option("--scheme", did_scheme, "Interaction scheme: base, surgical, ownership");
    add_common(did, did_args);

    CLI::App* simulate = app.add_subcommand("simulate", "Synthetic recovery study");
    simulate->add_option("--truth", simulate_truth, "Generator truth JSON")->required();
    simulate->add_option("--replicates", simulate_replicates, "Outer replicates (>= 50)");
    simulate->add_option("--mode", simulate_mode, "full (patient pipeline) or panel");
    simulate->add_flag("--no-bootstrap", simulate_no_bootstrap, "Skip interval coverage");
    simulate->add_option("--bootstrap-replicates", simulate_bootstrap_replicates,
                         "Bootstrap draws per replicate (>= 100)");
    add_common(simulate, simulate_args);

    CLI11_PARSE(app, argc, argv);

    const auto out_dir_of = [](const CommonArgs& a) { return fs::path(a.out_dir); };
    try {
        CLI::App* sub = app.get_subcommands().front();
        const CommonArgs& common =
            sub == validate ? validate_args
            : sub == summarize ? summarize_args
            : sub == adjust ? adjust_args
            : sub == did ? did_args
                         : simulate_args;
        fs::create_directories(out_dir_of(common));
        RunManifest manifest(sub->get_name(), out_dir_of(common));
        if (sub == validate) return cmd_validate(validate_args, validate_input, manifest);
        if (sub == summarize) return cmd_summarize(summarize_args, summarize_input, manifest);
        if (sub == adjust) return cmd_adjust(adjust_args, adjust_input, manifest);
        if (sub == did) return cmd_did(did_args, did_panel, did_scheme, manifest);
        return cmd_simulate(simulate_args, simulate_truth, simulate_replicates, simulate_mode,
                            simulate_no_bootstrap, simulate_bootstrap_replicates, manifest);
    } catch (const p4p::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
