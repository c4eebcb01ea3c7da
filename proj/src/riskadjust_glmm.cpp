#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "p4p/riskadjust.hpp"

namespace p4p {

int LogisticMixedFit::ward_year_index(const WardYearKey& k) const {
    auto it = ward_index_.find(k);
    return it == ward_index_.end() ? -1 : it->second;
}

int LogisticMixedFit::hospital_year_index(const HospitalYearKey& k) const {
    auto it = hospital_index_.find(k);
    return it == hospital_index_.end() ? -1 : it->second;
}

namespace {

// One hospital-year: its ward-year effects plus its own effect form an
// independent block of the random-effect Hessian (ward-years are nested).
struct Block {
    std::vector<int> ward_global;  // global ward-year ids, block-local order
    int hospital_global = -1;
    std::size_t row_begin = 0;
    std::size_t row_end = 0;
    int dim() const { return static_cast<int>(ward_global.size()) + 1; }
};

struct GlmmData {
    Matrix x;  // n × p, intercept first
    Vector y;
    std::vector<int> ward_local;  // per row: block-local ward index
    std::vector<Block> blocks;
    std::vector<WardYearKey> ward_years;
    std::vector<HospitalYearKey> hospital_years;
    int p = 0;
    int q_mu = 0;
    int q_nu = 0;
    std::size_t n() const { return static_cast<std::size_t>(y.size()); }
};

GlmmData index_dataset(const AdmissionDataset& ds, const LogisticMixedSpec& spec) {
    const auto& records = ds.records();
    std::vector<std::size_t> rows;
    rows.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].outcome_defined(spec.outcome)) rows.push_back(i);
    }
    if (rows.empty()) {
        throw StructureError("no records define outcome " +
                             std::string(outcome_name(spec.outcome)));
    }
    // Canonical order (hospital, year, ward, full record key): hospital-year
    // blocks become contiguous and every sum gains a fixed order, making the
    // fit exactly insensitive to input row permutation.
    std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        const AdmissionRecord& ra = records[a];
        const AdmissionRecord& rb = records[b];
        if (ra.hospital_id != rb.hospital_id) return ra.hospital_id < rb.hospital_id;
        if (ra.year != rb.year) return ra.year < rb.year;
        if (ra.ward_id != rb.ward_id) return ra.ward_id < rb.ward_id;
        return record_before(ra, rb);
    });

    GlmmData d;
    d.p = 1 + static_cast<int>(spec.covariates.size());
    const std::size_t n = rows.size();
    d.x.resize(n, d.p);
    d.y.resize(n);
    d.ward_local.resize(n);

    std::set<std::string> hospitals;
    for (std::size_t k = 0; k < n; ++k) {
        const AdmissionRecord& r = records[rows[k]];
        hospitals.insert(r.hospital_id);
        d.x(k, 0) = 1.0;
        for (std::size_t c = 0; c < spec.covariates.size(); ++c) {
            d.x(k, 1 + c) = covariate_value(r, spec.covariates[c]);
        }
        d.y[k] = r.outcome(spec.outcome);

        const bool new_block = d.blocks.empty() ||
                               d.hospital_years.back().hospital_id != r.hospital_id ||
                               d.hospital_years.back().year != r.year;
        if (new_block) {
            if (!d.blocks.empty()) d.blocks.back().row_end = k;
            Block b;
            b.row_begin = k;
            b.hospital_global = static_cast<int>(d.hospital_years.size());
            d.blocks.push_back(b);
            d.hospital_years.push_back({r.hospital_id, r.year});
        }
        Block& b = d.blocks.back();
        const bool new_ward = b.ward_global.empty() ||
                              d.ward_years.back().ward_id != r.ward_id ||
                              d.ward_years.back().hospital_id != r.hospital_id ||
                              d.ward_years.back().year != r.year;
        if (new_ward) {
            b.ward_global.push_back(static_cast<int>(d.ward_years.size()));
            d.ward_years.push_back({r.hospital_id, r.ward_id, r.year});
        }
        d.ward_local[k] = static_cast<int>(b.ward_global.size()) - 1;
    }
    d.blocks.back().row_end = n;
    d.q_mu = static_cast<int>(d.ward_years.size());
    d.q_nu = static_cast<int>(d.hospital_years.size());

    if (hospitals.size() < 2) {
        throw StructureError("outcome " + std::string(outcome_name(spec.outcome)) +
                             " observed in fewer than 2 hospitals");
    }
    if (d.q_mu < 2) {
        throw StructureError("fewer than 2 ward-years; random effects inestimable");
    }
    return d;
}

// Everything the outer objective and its analytic gradient need at the inner
// (penalized-IRLS) optimum for one variance-parameter point.
struct InnerSolution {
    Vector beta, mu, nu;
    Vector pi, w;                // per-row fitted probability and weight
    double data_ll = 0.0;
    double penalized_ll = 0.0;
    double logdet_huu = 0.0;
    std::vector<Matrix> chol;    // per block: factor of A_b = Z'WZ + P (block)
    std::vector<Matrix> t_cross; // per block: A_b⁻¹ (Z_b'WX)
    Matrix schur_factor;         // factor of S = X'WX − Σ U'A⁻¹U
};

class LaplaceGlmm {
public:
    explicit LaplaceGlmm(GlmmData data) : d_(std::move(data)) {
        beta_ = Vector::Zero(d_.p);
        const double ybar = std::clamp(d_.y.mean(), 1e-6, 1.0 - 1e-6);
        beta_[0] = logit(ybar);
        mu_ = Vector::Zero(d_.q_mu);
        nu_ = Vector::Zero(d_.q_nu);
    }

    double objective(const Vector& theta) {
        const InnerSolution& s = solve(theta);
        const double t1 = theta[0], t2 = theta[1];
        return -(s.penalized_ll - 0.5 * (d_.q_mu * t1 + d_.q_nu * t2) - 0.5 * s.logdet_huu);
    }

    Vector gradient(const Vector& theta) {
        const InnerSolution& s = solve(theta);
        const double pmu = std::exp(-theta[0]);
        const double pnu = std::exp(-theta[1]);

        // Pieces of dℓ/dθ: the direct penalty and log-determinant terms plus
        // the implicit dependence of logdet(Z'WZ+P) through the inner optimum.
        double trace_mu = 0.0, trace_nu = 0.0;
        Vector g_beta = Vector::Zero(d_.p);
        std::vector<Vector> g_u(d_.blocks.size());
        std::vector<Matrix> binv(d_.blocks.size());
        for (std::size_t b = 0; b < d_.blocks.size(); ++b) {
            const Block& blk = d_.blocks[b];
            const int m = blk.dim();
            Matrix inv = Matrix::Identity(m, m);
            for (int c = 0; c < m; ++c) {
                Vector col = cholesky_solve_factored(s.chol[b], inv.col(c));
                inv.col(c) = col;
            }
            binv[b] = inv;
            for (int wl = 0; wl < m - 1; ++wl) trace_mu += inv(wl, wl);
            trace_nu += inv(m - 1, m - 1);

            Vector gu = Vector::Zero(m);
            for (std::size_t i = blk.row_begin; i < blk.row_end; ++i) {
                const int wl = d_.ward_local[i];
                const double h = inv(wl, wl) + 2.0 * inv(wl, m - 1) + inv(m - 1, m - 1);
                const double c = -0.5 * s.w[i] * (1.0 - 2.0 * s.pi[i]) * h;
                g_beta += c * d_.x.row(i).transpose();
                gu[wl] += c;
                gu[m - 1] += c;
            }
            g_u[b] = gu;
        }

        // v = H_full⁻¹ g by block elimination (Schur complement on β)
        Vector acc = g_beta;
        std::vector<Vector> a_sol(d_.blocks.size());
        for (std::size_t b = 0; b < d_.blocks.size(); ++b) {
            a_sol[b] = cholesky_solve_factored(s.chol[b], g_u[b]);
            acc -= s.t_cross[b].transpose() * g_u[b];
        }
        const Vector v_beta = cholesky_solve_factored(s.schur_factor, acc);

        double term_mu = 0.0, term_nu = 0.0;
        for (std::size_t b = 0; b < d_.blocks.size(); ++b) {
            const Block& blk = d_.blocks[b];
            const int m = blk.dim();
            const Vector v_u = a_sol[b] - s.t_cross[b] * v_beta;
            for (int wl = 0; wl < m - 1; ++wl) term_mu += v_u[wl] * s.mu[blk.ward_global[wl]];
            term_nu += v_u[m - 1] * s.nu[blk.hospital_global];
        }

        const double dl1 = 0.5 * pmu * (s.mu.squaredNorm() + trace_mu) - 0.5 * d_.q_mu +
                           pmu * term_mu;
        const double dl2 = 0.5 * pnu * (s.nu.squaredNorm() + trace_nu) - 0.5 * d_.q_nu +
                           pnu * term_nu;
        Vector g(2);
        g << -dl1, -dl2;
        return g;
    }

    const InnerSolution& solve(const Vector& theta) {
        if (have_solution_ && cached_theta_.size() == theta.size() && cached_theta_ == theta) {
            return sol_;
        }
        inner_solve(theta);
        cached_theta_ = theta;
        have_solution_ = true;
        return sol_;
    }

    const GlmmData& data() const { return d_; }

private:
    // Linear predictor and penalized log-likelihood at (beta, mu, nu).
    double penalized_ll(const Vector& beta, const Vector& mu, const Vector& nu, double pmu,
                        double pnu, Vector& eta, double* data_ll) const {
        eta.noalias() = d_.x * beta;
        double ll = 0.0;
        for (const Block& blk : d_.blocks) {
            const double nu_b = nu[blk.hospital_global];
            for (std::size_t i = blk.row_begin; i < blk.row_end; ++i) {
                const double e = eta[i] + mu[blk.ward_global[d_.ward_local[i]]] + nu_b;
                eta[i] = e;
                const double log1pe =
                    e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
                ll += d_.y[i] * e - log1pe;
            }
        }
        if (data_ll) *data_ll = ll;
        return ll - 0.5 * (pmu * mu.squaredNorm() + pnu * nu.squaredNorm());
    }

    // Assembles the penalized-IRLS system at (beta, mu, nu): per-block factors,
    // cross terms, Schur complement, and scores. Returns the Newton step.
    void assemble(const Vector& beta, const Vector& mu, const Vector& nu, double pmu, double pnu,
                  const Vector& eta, InnerSolution& out, Vector* delta_beta,
                  std::vector<Vector>* delta_u) const {
        const std::size_t nblocks = d_.blocks.size();
        out.chol.resize(nblocks);
        out.t_cross.resize(nblocks);
        out.pi.resize(d_.y.size());
        out.w.resize(d_.y.size());

        Matrix schur = Matrix::Zero(d_.p, d_.p);
        Vector rhs_beta = Vector::Zero(d_.p);
        std::vector<Vector> s_sol(delta_u ? nblocks : 0);
        double logdet = 0.0;

        for (std::size_t b = 0; b < nblocks; ++b) {
            const Block& blk = d_.blocks[b];
            const int m = blk.dim();
            Matrix a = Matrix::Zero(m, m);
            Matrix u = Matrix::Zero(m, d_.p);
            Vector r = Vector::Zero(m);

            for (std::size_t i = blk.row_begin; i < blk.row_end; ++i) {
                const double p = inv_logit(eta[i]);
                const double w = std::max(p * (1.0 - p), 1e-12);
                out.pi[i] = p;
                out.w[i] = w;
                const double resid = d_.y[i] - p;
                const int wl = d_.ward_local[i];
                const auto xi = d_.x.row(i);

                schur.selfadjointView<Eigen::Lower>().rankUpdate(xi.transpose(), w);
                rhs_beta += resid * xi.transpose();

                a(wl, wl) += w;
                a(m - 1, wl) += w;
                a(m - 1, m - 1) += w;
                u.row(wl) += w * xi;
                u.row(m - 1) += w * xi;
                r[wl] += resid;
                r[m - 1] += resid;
            }
            for (int wl = 0; wl < m - 1; ++wl) {
                a(wl, wl) += pmu;
                r[wl] -= pmu * mu[blk.ward_global[wl]];
            }
            a(m - 1, m - 1) += pnu;
            r[m - 1] -= pnu * nu[blk.hospital_global];

            a = a.selfadjointView<Eigen::Lower>();
            cholesky_decompose(a);
            logdet += log_det_from_cholesky(a);

            Matrix t(m, d_.p);
            for (int c = 0; c < d_.p; ++c) t.col(c) = cholesky_solve_factored(a, u.col(c));
            const Vector s = cholesky_solve_factored(a, r);

            schur -= u.transpose() * t;
            rhs_beta -= t.transpose() * r;

            out.chol[b] = std::move(a);
            out.t_cross[b] = std::move(t);
            if (delta_u) s_sol[b] = s;
        }

        Matrix schur_full = schur.selfadjointView<Eigen::Lower>();
        cholesky_decompose(schur_full);
        out.schur_factor = std::move(schur_full);
        out.logdet_huu = logdet;

        if (delta_beta) {
            *delta_beta = cholesky_solve_factored(out.schur_factor, rhs_beta);
            delta_u->resize(nblocks);
            for (std::size_t b = 0; b < nblocks; ++b) {
                (*delta_u)[b] = s_sol[b] - out.t_cross[b] * (*delta_beta);
            }
        }
    }

    void inner_solve(const Vector& theta) {
        const double pmu = std::exp(-theta[0]);
        const double pnu = std::exp(-theta[1]);
        Vector beta = beta_, mu = mu_, nu = nu_;
        Vector eta(d_.y.size());
        double dll = 0.0;
        double pll = penalized_ll(beta, mu, nu, pmu, pnu, eta, &dll);

        InnerSolution work;
        for (int iter = 0; iter < 80; ++iter) {
            Vector delta_beta;
            std::vector<Vector> delta_u;
            assemble(beta, mu, nu, pmu, pnu, eta, work, &delta_beta, &delta_u);

            double step = 1.0;
            bool accepted = false;
            Vector beta_c, mu_c, nu_c, eta_c(d_.y.size());
            double pll_c = 0.0, dll_c = 0.0;
            for (int halving = 0; halving < 40; ++halving) {
                beta_c = beta + step * delta_beta;
                mu_c = mu;
                nu_c = nu;
                for (std::size_t b = 0; b < d_.blocks.size(); ++b) {
                    const Block& blk = d_.blocks[b];
                    const int m = blk.dim();
                    for (int wl = 0; wl < m - 1; ++wl) {
                        mu_c[blk.ward_global[wl]] += step * delta_u[b][wl];
                    }
                    nu_c[blk.hospital_global] += step * delta_u[b][m - 1];
                }
                pll_c = penalized_ll(beta_c, mu_c, nu_c, pmu, pnu, eta_c, &dll_c);
                if (std::isfinite(pll_c) && pll_c >= pll - 1e-12 * (std::abs(pll) + 1.0)) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if (!accepted) break;
            if (beta_c.cwiseAbs().maxCoeff() > 30.0) {
                throw SeparationError(
                    "complete separation in outcome fit (fixed effect exceeds 30 on the logit "
                    "scale)");
            }
            const double gain = pll_c - pll;
            beta.swap(beta_c);
            mu.swap(mu_c);
            nu.swap(nu_c);
            eta.swap(eta_c);
            pll = pll_c;
            dll = dll_c;
            if (gain <= 1e-11 * (std::abs(pll) + 1.0)) break;
        }

        // final assembly at the solution: the objective's determinant and the
        // gradient's factors must be evaluated exactly here
        assemble(beta, mu, nu, pmu, pnu, eta, work, nullptr, nullptr);
        work.beta = beta;
        work.mu = mu;
        work.nu = nu;
        work.data_ll = dll;
        work.penalized_ll = pll;
        sol_ = std::move(work);

        beta_ = beta;  // warm start for the next variance point
        mu_ = mu;
        nu_ = nu;
    }

    GlmmData d_;
    Vector beta_, mu_, nu_;  // warm-start state
    Vector cached_theta_;
    InnerSolution sol_;
    bool have_solution_ = false;
};

Vector standard_errors_from_schur(const Matrix& schur_factor, int p) {
    Vector se(p);
    for (int j = 0; j < p; ++j) {
        Vector e = Vector::Zero(p);
        e[j] = 1.0;
        se[j] = std::sqrt(cholesky_solve_factored(schur_factor, e)[j]);
    }
    return se;
}

}  // namespace

LogisticMixedFit fit_logistic_mixed(const AdmissionDataset& ds, const LogisticMixedSpec& spec) {
    if (spec.covariates.empty()) throw DesignError("covariate list must be non-empty");
    GlmmData data = index_dataset(ds, spec);

    // a constant response has no finite intercept MLE; reject it up front
    // rather than letting the deviance underflow mask it
    const double y_sum = data.y.sum();
    if (y_sum == 0.0 || y_sum == static_cast<double>(data.y.size()))
        throw SeparationError(std::string(outcome_name(spec.outcome)) +
                              ": outcome is constant over its defined records");

    LogisticMixedFit fit;
    fit.outcome = spec.outcome;
    fit.covariates = spec.covariates;
    fit.ward_years = data.ward_years;
    fit.hospital_years = data.hospital_years;
    for (int i = 0; i < data.q_mu; ++i) fit.ward_index_[data.ward_years[i]] = i;
    for (int i = 0; i < data.q_nu; ++i) fit.hospital_index_[data.hospital_years[i]] = i;

    if (spec.fix_variances_to_zero) {
        const Vector beta = irls_fit(data.x, data.y);
        fit.alpha = beta[0];
        fit.eta = beta.tail(data.p - 1);
        fit.sigma_mu_sq = 0.0;
        fit.sigma_nu_sq = 0.0;
        fit.mu_hat = Vector::Zero(data.q_mu);
        fit.nu_hat = Vector::Zero(data.q_nu);
        const Vector eta_lin = data.x * beta;
        fit.loglik = bernoulli_loglik(eta_lin, data.y, Vector::Ones(data.y.size()));
        Matrix info = Matrix::Zero(data.p, data.p);
        for (Eigen::Index i = 0; i < data.y.size(); ++i) {
            const double p = inv_logit(eta_lin[i]);
            info.selfadjointView<Eigen::Lower>().rankUpdate(data.x.row(i).transpose(),
                                                            p * (1.0 - p));
        }
        Matrix factor = info.selfadjointView<Eigen::Lower>();
        cholesky_decompose(factor);
        fit.beta_se = standard_errors_from_schur(factor, data.p);
        fit.converged = true;
        fit.outer_iterations = 0;
        return fit;
    }

    LaplaceGlmm problem(std::move(data));
    Vector theta0(2);
    theta0 << std::log(0.1), std::log(0.1);

    OptimOptions opts;
    // The objective is a data-set-scale log-likelihood whose inner solver has
    // a matching relative noise floor, so the stop rule must scale with it.
    opts.gradient_tol = spec.gradient_tol * std::max(1.0, std::abs(problem.objective(theta0)));
    opts.max_iterations = spec.max_outer_iterations;
    opts.gradient = [&problem](const Vector& t) { return problem.gradient(t); };
    // Extreme variance points can saturate the random effects and defeat the
    // block factorizations; report them as +inf so the line search backs off.
    const OptimResult result = quasi_newton_minimize(
        [&problem](const Vector& t) {
            try {
                return problem.objective(t);
            } catch (const SingularMatrixError&) {
                return std::numeric_limits<double>::infinity();
            }
        },
        theta0, opts);

    const InnerSolution& sol = problem.solve(result.argmin);
    const int p = problem.data().p;
    fit.alpha = sol.beta[0];
    fit.eta = sol.beta.tail(p - 1);
    fit.beta_se = standard_errors_from_schur(sol.schur_factor, p);
    fit.sigma_mu_sq = std::exp(result.argmin[0]);
    fit.sigma_nu_sq = std::exp(result.argmin[1]);
    fit.mu_hat = sol.mu;
    fit.nu_hat = sol.nu;
    fit.loglik = -result.objective;
    fit.converged = result.converged;
    fit.outer_iterations = result.iterations;
    return fit;
}

PredictionResult predict_probabilities(const LogisticMixedFit& fit, const AdmissionDataset& ds) {
    PredictionResult out;
    out.probabilities.assign(ds.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const AdmissionRecord& r = ds.records()[i];
        if (!r.outcome_defined(fit.outcome)) continue;
        double lin = fit.alpha;
        for (std::size_t c = 0; c < fit.covariates.size(); ++c) {
            lin += fit.eta[c] * covariate_value(r, fit.covariates[c]);
        }
        const int wy = fit.ward_year_index({r.hospital_id, r.ward_id, r.year});
        if (wy >= 0) {
            const int hy = fit.hospital_year_index({r.hospital_id, r.year});
            lin += fit.mu_hat[wy] + fit.nu_hat[hy];
        } else {
            ++out.population_level_records;  // population-level: mu = nu = 0
        }
        out.probabilities[i] = inv_logit(lin);
    }
    return out;
}

}  // namespace p4p
