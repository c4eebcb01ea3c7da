#include "p4p/did.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>

#include "p4p/errors.hpp"

namespace p4p {

namespace {

// ---------------------------------------------------------------------------
// Sufficient statistics
//
// Rows are grouped by (hospital, missingness pattern, weight). Everything the
// EM needs is a handful of small cross-product matrices per group, so refits
// under cluster resampling scale with the number of groups, not rows.
// ---------------------------------------------------------------------------

struct Pattern {
    std::vector<int> obs;  // observed response columns
    std::vector<int> mis;  // structurally missing response columns
};

struct StatGroup {
    int hospital = 0;
    int pattern = 0;
    double w = 1.0;  // per-row likelihood weight shared by the group's rows
    double n = 0.0;  // row count
    Vector sx;       // sum x                      (p)
    Matrix sxx;      // sum x x'                   (p x p)
    Matrix sxy;      // sum x y_obs'               (p x |O|)
    Vector sy;       // sum y_obs                  (|O|)
    Matrix syy;      // sum y_obs y_obs'           (|O| x |O|)
};

struct GroupedStats {
    std::vector<Pattern> patterns;
    std::vector<StatGroup> groups;
    std::vector<std::vector<int>> by_hospital;  // group indices per hospital
    Eigen::Index p = 0;
    Eigen::Index k = 0;
};

GroupedStats build_stats(const DidDesign& design, bool weight_by_n) {
    GroupedStats s;
    s.p = design.x.cols();
    s.k = design.y.cols();
    s.by_hospital.resize(design.hospitals.size());

    std::map<std::vector<bool>, int> pattern_of;
    std::map<std::tuple<int, int, double>, int> group_of;

    const Eigen::Index n = design.x.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<bool> mask(static_cast<size_t>(s.k));
        bool any = false;
        for (Eigen::Index j = 0; j < s.k; ++j) {
            mask[static_cast<size_t>(j)] = !std::isnan(design.y(i, j));
            any = any || mask[static_cast<size_t>(j)];
        }
        if (!any) continue;  // a cell with no observed outcome carries nothing

        auto [pit, pnew] = pattern_of.emplace(mask, static_cast<int>(s.patterns.size()));
        if (pnew) {
            Pattern pat;
            for (int j = 0; j < s.k; ++j)
                (mask[static_cast<size_t>(j)] ? pat.obs : pat.mis).push_back(j);
            s.patterns.push_back(std::move(pat));
        }
        const int pid = pit->second;
        const int hid = design.rows[static_cast<size_t>(i)].hospital;
        const double w =
            weight_by_n ? static_cast<double>(design.rows[static_cast<size_t>(i)].n_patients) : 1.0;

        auto [git, gnew] = group_of.emplace(std::make_tuple(hid, pid, w),
                                            static_cast<int>(s.groups.size()));
        if (gnew) {
            const auto no = static_cast<Eigen::Index>(s.patterns[static_cast<size_t>(pid)].obs.size());
            StatGroup g;
            g.hospital = hid;
            g.pattern = pid;
            g.w = w;
            g.sx = Vector::Zero(s.p);
            g.sxx = Matrix::Zero(s.p, s.p);
            g.sxy = Matrix::Zero(s.p, no);
            g.sy = Vector::Zero(no);
            g.syy = Matrix::Zero(no, no);
            s.groups.push_back(std::move(g));
            s.by_hospital[static_cast<size_t>(hid)].push_back(git->second);
        }
        StatGroup& g = s.groups[static_cast<size_t>(git->second)];
        const Pattern& pat = s.patterns[static_cast<size_t>(g.pattern)];
        const Vector x = design.x.row(i).transpose();
        Vector yo(static_cast<Eigen::Index>(pat.obs.size()));
        for (size_t a = 0; a < pat.obs.size(); ++a)
            yo[static_cast<Eigen::Index>(a)] = design.y(i, pat.obs[a]);
        g.n += 1.0;
        g.sx += x;
        g.sxx.selfadjointView<Eigen::Lower>().rankUpdate(x);
        g.sxy += x * yo.transpose();
        g.sy += yo;
        g.syy.selfadjointView<Eigen::Lower>().rankUpdate(yo);
    }
    for (StatGroup& g : s.groups) {
        g.sxx.triangularView<Eigen::StrictlyUpper>() = g.sxx.transpose();
        g.syy.triangularView<Eigen::StrictlyUpper>() = g.syy.transpose();
    }
    return s;
}

// ---------------------------------------------------------------------------
// Pattern-level working quantities at the current Sigma
// ---------------------------------------------------------------------------

struct PatternWork {
    Matrix so_inv;     // (Sigma_OO)^-1
    double logdet_so = 0.0;
    Matrix c;          // Sigma_MO (Sigma_OO)^-1
    Matrix wcond;      // Sigma_MM - Sigma_MO (Sigma_OO)^-1 Sigma_OM
    Matrix wemb;       // K x K embedding of (Sigma_OO)^-1 on observed coords
};

Matrix take(const Matrix& m, const std::vector<int>& rows, const std::vector<int>& cols) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < cols.size(); ++c)
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = m(rows[r], cols[c]);
    return out;
}

Matrix take_cols(const Matrix& m, const std::vector<int>& cols) {
    Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
    for (size_t c = 0; c < cols.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = m.col(cols[c]);
    return out;
}

std::vector<PatternWork> prepare_patterns(const std::vector<Pattern>& patterns, const Matrix& sigma,
                                          Eigen::Index k) {
    std::vector<PatternWork> works(patterns.size());
    for (size_t q = 0; q < patterns.size(); ++q) {
        const Pattern& pat = patterns[q];
        PatternWork& w = works[q];
        Matrix so = take(sigma, pat.obs, pat.obs);
        Matrix l = so;
        cholesky_decompose(l);
        w.logdet_so = log_det_from_cholesky(l);
        const auto no = static_cast<Eigen::Index>(pat.obs.size());
        w.so_inv = Matrix(no, no);
        for (Eigen::Index j = 0; j < no; ++j)
            w.so_inv.col(j) = cholesky_solve_factored(l, Vector::Unit(no, j));
        w.so_inv = 0.5 * (w.so_inv + w.so_inv.transpose());
        if (!pat.mis.empty()) {
            Matrix smo = take(sigma, pat.mis, pat.obs);
            w.c = smo * w.so_inv;
            w.wcond = take(sigma, pat.mis, pat.mis) - w.c * smo.transpose();
        } else {
            w.c = Matrix(0, no);
            w.wcond = Matrix(0, 0);
        }
        w.wemb = Matrix::Zero(k, k);
        for (size_t a = 0; a < pat.obs.size(); ++a)
            for (size_t b = 0; b < pat.obs.size(); ++b)
                w.wemb(pat.obs[a], pat.obs[b]) =
                    w.so_inv(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    }
    return works;
}

// ---------------------------------------------------------------------------
// E-step / observed log-likelihood
// ---------------------------------------------------------------------------

struct EStepResult {
    Matrix t1;   // sum_i w_i x_i E[y_i - alpha]'          (p x K)
    Matrix t2;   // sum_i w_i E[(y_i - alpha)(y_i - alpha)'] (K x K)
    Vector ea;   // sum_h E[alpha_h .* alpha_h]             (K)
    double loglik = 0.0;
};

struct GroupMoments {
    Matrix bo, bm;   // fixed effects split by pattern      (p x |O|), (p x |M|)
    Vector se;       // sum residual                        (|O|)
    Matrix sxe;      // sum x residual'                     (p x |O|)
    Matrix eee;      // sum residual residual'              (|O| x |O|)
};

GroupMoments group_moments(const StatGroup& g, const Pattern& pat, const Matrix& b) {
    GroupMoments m;
    m.bo = take_cols(b, pat.obs);
    m.bm = take_cols(b, pat.mis);
    m.se = g.sy - m.bo.transpose() * g.sx;
    m.sxe = g.sxy - g.sxx * m.bo;
    Matrix cross = g.sxy.transpose() * m.bo;
    m.eee = g.syy - cross - cross.transpose() + m.bo.transpose() * g.sxx * m.bo;
    m.eee = 0.5 * (m.eee + m.eee.transpose()).eval();
    return m;
}

EStepResult run_e_step(const GroupedStats& s, const std::vector<PatternWork>& works,
                       const Matrix& b, const Vector& d, bool fix_zero,
                       const std::vector<double>& mult, bool loglik_only) {
    constexpr double kLog2Pi = 1.8378770664093453;
    const Eigen::Index k = s.k;
    EStepResult r;
    r.t1 = Matrix::Zero(s.p, k);
    r.t2 = Matrix::Zero(k, k);
    r.ea = Vector::Zero(k);

    for (size_t h = 0; h < s.by_hospital.size(); ++h) {
        const double mh = mult[h];
        if (mh == 0.0 || s.by_hospital[h].empty()) continue;

        // posterior of the hospital intercept vector given all its cells
        Matrix lam = Matrix::Zero(k, k);
        Vector bvec = Vector::Zero(k);
        std::vector<GroupMoments> moments;
        moments.reserve(s.by_hospital[h].size());
        double ll = 0.0;
        for (int gi : s.by_hospital[h]) {
            const StatGroup& g = s.groups[static_cast<size_t>(gi)];
            const Pattern& pat = s.patterns[static_cast<size_t>(g.pattern)];
            const PatternWork& pw = works[static_cast<size_t>(g.pattern)];
            moments.push_back(group_moments(g, pat, b));
            const GroupMoments& gm = moments.back();

            const auto no = static_cast<double>(pat.obs.size());
            ll -= 0.5 * (g.n * (no * kLog2Pi + pw.logdet_so - no * std::log(g.w)) +
                         g.w * (pw.so_inv.array() * gm.eee.array()).sum());
            if (!fix_zero) {
                lam += g.n * g.w * pw.wemb;
                const Vector u = pw.so_inv * gm.se;
                for (size_t a = 0; a < pat.obs.size(); ++a)
                    bvec[pat.obs[a]] += g.w * u[static_cast<Eigen::Index>(a)];
            }
        }

        Vector m = Vector::Zero(k);
        Matrix v = Matrix::Zero(k, k);
        if (!fix_zero) {
            for (Eigen::Index j = 0; j < k; ++j) lam(j, j) += 1.0 / d[j];
            Matrix l = lam;
            cholesky_decompose(l);
            for (Eigen::Index j = 0; j < k; ++j)
                v.col(j) = cholesky_solve_factored(l, Vector::Unit(k, j));
            v = 0.5 * (v + v.transpose()).eval();
            m = v * bvec;
            ll += -0.5 * d.array().log().sum() - 0.5 * log_det_from_cholesky(l) +
                  0.5 * bvec.dot(m);
        }
        r.loglik += mh * ll;
        if (loglik_only) continue;

        r.ea += mh * (m.array().square().matrix() + v.diagonal());

        for (size_t gi_idx = 0; gi_idx < s.by_hospital[h].size(); ++gi_idx) {
            const StatGroup& g = s.groups[static_cast<size_t>(s.by_hospital[h][gi_idx])];
            const Pattern& pat = s.patterns[static_cast<size_t>(g.pattern)];
            const PatternWork& pw = works[static_cast<size_t>(g.pattern)];
            const GroupMoments& gm = moments[gi_idx];
            const double f = mh * g.w;

            Vector mo(static_cast<Eigen::Index>(pat.obs.size()));
            for (size_t a = 0; a < pat.obs.size(); ++a)
                mo[static_cast<Eigen::Index>(a)] = m[pat.obs[a]];
            const Matrix voo = take(v, pat.obs, pat.obs);

            // completed cross-products; alpha_mis cancels inside y_mis - alpha
            const Matrix t1_obs = g.sxy - g.sx * mo.transpose();
            const Matrix sxem = gm.sxe - g.sx * mo.transpose();
            for (size_t a = 0; a < pat.obs.size(); ++a)
                r.t1.col(pat.obs[a]) += f * t1_obs.col(static_cast<Eigen::Index>(a));

            const Matrix q_oo = g.syy - g.sy * mo.transpose() - mo * g.sy.transpose() +
                                g.n * mo * mo.transpose();
            Matrix blk_oo = q_oo + g.n * voo;
            for (size_t a = 0; a < pat.obs.size(); ++a)
                for (size_t c = 0; c < pat.obs.size(); ++c)
                    r.t2(pat.obs[a], pat.obs[c]) +=
                        f * blk_oo(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(c));

            if (!pat.mis.empty()) {
                const Matrix t1_mis = g.sxx * gm.bm + sxem * pw.c.transpose();
                for (size_t a = 0; a < pat.mis.size(); ++a)
                    r.t1.col(pat.mis[a]) += f * t1_mis.col(static_cast<Eigen::Index>(a));

                const Matrix a1 = g.sxy.transpose() - mo * g.sx.transpose();
                const Matrix a2 = g.syy - g.sxy.transpose() * gm.bo - g.sy * mo.transpose() -
                                  mo * gm.se.transpose() + g.n * mo * mo.transpose();
                const Matrix q_om = a1 * gm.bm + a2 * pw.c.transpose();
                const Matrix eem = gm.eee - gm.se * mo.transpose() - mo * gm.se.transpose() +
                                   g.n * mo * mo.transpose();
                const Matrix bsxem = gm.bm.transpose() * sxem;
                const Matrix q_mm = gm.bm.transpose() * g.sxx * gm.bm +
                                    bsxem * pw.c.transpose() + pw.c * bsxem.transpose() +
                                    pw.c * eem * pw.c.transpose();
                const Matrix cvoo = pw.c * voo;  // |M| x |O|
                const Matrix blk_om = q_om + g.n * (cvoo.transpose().eval());
                const Matrix blk_mm = q_mm + g.n * (cvoo * pw.c.transpose());
                for (size_t a = 0; a < pat.obs.size(); ++a)
                    for (size_t c = 0; c < pat.mis.size(); ++c) {
                        const double val = f * blk_om(static_cast<Eigen::Index>(a),
                                                      static_cast<Eigen::Index>(c));
                        r.t2(pat.obs[a], pat.mis[c]) += val;
                        r.t2(pat.mis[c], pat.obs[a]) += val;
                    }
                for (size_t a = 0; a < pat.mis.size(); ++a)
                    for (size_t c = 0; c < pat.mis.size(); ++c)
                        r.t2(pat.mis[a], pat.mis[c]) +=
                            f * blk_mm(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(c)) +
                            mh * g.n * pw.wcond(static_cast<Eigen::Index>(a),
                                                static_cast<Eigen::Index>(c));
            }
        }
    }
    r.t2 = 0.5 * (r.t2 + r.t2.transpose()).eval();
    return r;
}

double observed_loglik(const GroupedStats& s, const std::vector<PatternWork>& works,
                       const Matrix& b, const Vector& d, bool fix_zero,
                       const std::vector<double>& mult) {
    return run_e_step(s, works, b, d, fix_zero, mult, /*loglik_only=*/true).loglik;
}

// ---------------------------------------------------------------------------
// GLS fixed effects for a given (Sigma, d): exact via per-hospital Woodbury
// ---------------------------------------------------------------------------

struct GlsPre {
    std::vector<Matrix> sxx_pat;               // per pattern: sum mult*w*sxx   (p x p)
    std::vector<Matrix> sxy_pat;               // per pattern: sum mult*w*sxy   (p x |O|)
    std::vector<std::vector<Vector>> sx_hp;    // [hospital][pattern] sum w*sx  (p), empty if none
    std::vector<std::vector<Vector>> sy_hp;    // [hospital][pattern] sum w*sy  (|O|)
    std::vector<std::vector<double>> nw_hp;    // [hospital][pattern] sum n*w
    Matrix t0;                                 // sum mult*w*sxx                (p x p)
    double n_rows = 0.0;                       // sum mult*n
    double n_clusters = 0.0;                   // sum mult
};

GlsPre prepare_gls(const GroupedStats& s, const std::vector<double>& mult) {
    GlsPre pre;
    const size_t np = s.patterns.size();
    pre.sxx_pat.assign(np, Matrix::Zero(s.p, s.p));
    pre.sxy_pat.resize(np);
    for (size_t q = 0; q < np; ++q)
        pre.sxy_pat[q] = Matrix::Zero(s.p, static_cast<Eigen::Index>(s.patterns[q].obs.size()));
    pre.sx_hp.assign(s.by_hospital.size(), std::vector<Vector>(np));
    pre.sy_hp.assign(s.by_hospital.size(), std::vector<Vector>(np));
    pre.nw_hp.assign(s.by_hospital.size(), std::vector<double>(np, 0.0));
    pre.t0 = Matrix::Zero(s.p, s.p);

    for (const StatGroup& g : s.groups) {
        const double mh = mult[static_cast<size_t>(g.hospital)];
        if (mh == 0.0) continue;
        const auto q = static_cast<size_t>(g.pattern);
        pre.sxx_pat[q] += mh * g.w * g.sxx;
        pre.sxy_pat[q] += mh * g.w * g.sxy;
        auto& sxh = pre.sx_hp[static_cast<size_t>(g.hospital)][q];
        auto& syh = pre.sy_hp[static_cast<size_t>(g.hospital)][q];
        if (sxh.size() == 0) {
            sxh = Vector::Zero(s.p);
            syh = Vector::Zero(static_cast<Eigen::Index>(s.patterns[q].obs.size()));
        }
        sxh += g.w * g.sx;
        syh += g.w * g.sy;
        pre.nw_hp[static_cast<size_t>(g.hospital)][q] += g.n * g.w;
        pre.t0 += mh * g.w * g.sxx;
        pre.n_rows += mh * g.n;
    }
    for (double mh : mult) pre.n_clusters += mh;
    return pre;
}

Matrix gls_fixed_effects(const GroupedStats& s, const std::vector<PatternWork>& works,
                         const GlsPre& pre, const Vector& d, bool fix_zero,
                         const std::vector<double>& mult) {
    const Eigen::Index p = s.p;
    const Eigen::Index k = s.k;
    const Eigen::Index dim = p * k;
    Matrix a = Matrix::Zero(dim, dim);
    Matrix cm = Matrix::Zero(p, k);  // right-hand side shaped p x K

    for (size_t q = 0; q < s.patterns.size(); ++q) {
        const Pattern& pat = s.patterns[q];
        const PatternWork& pw = works[q];
        const Matrix& sxx = pre.sxx_pat[q];
        for (Eigen::Index j = 0; j < p; ++j)
            for (Eigen::Index j2 = 0; j2 < p; ++j2) {
                const double x = sxx(j, j2);
                if (x == 0.0) continue;
                for (size_t aa = 0; aa < pat.obs.size(); ++aa)
                    for (size_t bb = 0; bb < pat.obs.size(); ++bb)
                        a(j * k + pat.obs[aa], j2 * k + pat.obs[bb]) +=
                            x * pw.so_inv(static_cast<Eigen::Index>(aa),
                                          static_cast<Eigen::Index>(bb));
            }
        const Matrix rhs = pre.sxy_pat[q] * pw.so_inv;  // p x |O|
        for (size_t aa = 0; aa < pat.obs.size(); ++aa) cm.col(pat.obs[aa]) += rhs.col(static_cast<Eigen::Index>(aa));
    }

    if (!fix_zero) {
        for (size_t h = 0; h < s.by_hospital.size(); ++h) {
            const double mh = mult[h];
            if (mh == 0.0 || s.by_hospital[h].empty()) continue;
            Matrix lam = Matrix::Zero(k, k);
            Vector balpha = Vector::Zero(k);
            for (size_t q = 0; q < s.patterns.size(); ++q) {
                if (pre.sx_hp[h][q].size() == 0) continue;
                lam += pre.nw_hp[h][q] * works[q].wemb;
                const Vector u = works[q].so_inv * pre.sy_hp[h][q];
                for (size_t aa = 0; aa < s.patterns[q].obs.size(); ++aa)
                    balpha[s.patterns[q].obs[aa]] += u[static_cast<Eigen::Index>(aa)];
            }
            for (Eigen::Index j = 0; j < k; ++j) lam(j, j) += 1.0 / d[j];
            Matrix l = lam;
            cholesky_decompose(l);
            Matrix v(k, k);
            for (Eigen::Index j = 0; j < k; ++j)
                v.col(j) = cholesky_solve_factored(l, Vector::Unit(k, j));
            v = 0.5 * (v + v.transpose()).eval();
            const Vector u = v * balpha;

            for (size_t q = 0; q < s.patterns.size(); ++q) {
                if (pre.sx_hp[h][q].size() == 0) continue;
                const Vector wu = works[q].wemb * u;
                cm -= mh * pre.sx_hp[h][q] * wu.transpose();
                for (size_t q2 = 0; q2 < s.patterns.size(); ++q2) {
                    if (pre.sx_hp[h][q2].size() == 0) continue;
                    const Matrix gq = works[q].wemb * v * works[q2].wemb;  // K x K
                    const Vector& s1 = pre.sx_hp[h][q];
                    const Vector& s2 = pre.sx_hp[h][q2];
                    for (Eigen::Index j = 0; j < p; ++j) {
                        if (s1[j] == 0.0) continue;
                        for (Eigen::Index j2 = 0; j2 < p; ++j2) {
                            const double x = mh * s1[j] * s2[j2];
                            if (x == 0.0) continue;
                            for (Eigen::Index aa = 0; aa < k; ++aa)
                                for (Eigen::Index bb = 0; bb < k; ++bb)
                                    a(j * k + aa, j2 * k + bb) -= x * gq(aa, bb);
                        }
                    }
                }
            }
        }
    }

    Matrix l = a;
    cholesky_decompose(l);
    Vector cvec(dim);
    for (Eigen::Index j = 0; j < p; ++j)
        for (Eigen::Index aa = 0; aa < k; ++aa) cvec[j * k + aa] = cm(j, aa);
    const Vector bvec = cholesky_solve_factored(l, cvec);
    Matrix b(p, k);
    for (Eigen::Index j = 0; j < p; ++j)
        for (Eigen::Index aa = 0; aa < k; ++aa) b(j, aa) = bvec[j * k + aa];
    return b;
}

// ---------------------------------------------------------------------------
// Variance-parameter packing for the quasi-Newton polish
// ---------------------------------------------------------------------------

struct VarPack {
    bool fix_zero;
    bool diagonal;
    Eigen::Index k;

    Eigen::Index size() const {
        const Eigen::Index sig = diagonal ? k : k * (k + 1) / 2;
        return (fix_zero ? 0 : k) + sig;
    }

    Vector pack(const Vector& d, const Matrix& sigma) const {
        Vector theta(size());
        Eigen::Index at = 0;
        if (!fix_zero)
            for (Eigen::Index j = 0; j < k; ++j) theta[at++] = std::log(std::max(d[j], 1e-12));
        if (diagonal) {
            for (Eigen::Index j = 0; j < k; ++j)
                theta[at++] = std::log(std::max(sigma(j, j), 1e-12));
        } else {
            Matrix l = sigma;
            cholesky_decompose(l);
            for (Eigen::Index j = 0; j < k; ++j) {
                theta[at++] = std::log(std::max(l(j, j), 1e-12));
                for (Eigen::Index i = j + 1; i < k; ++i) theta[at++] = l(i, j);
            }
        }
        return theta;
    }

    void unpack(const Vector& theta, Vector& d, Matrix& sigma) const {
        Eigen::Index at = 0;
        d = Vector::Zero(k);
        if (!fix_zero)
            for (Eigen::Index j = 0; j < k; ++j)
                d[j] = std::max(std::exp(theta[at++]), 1e-12);
        if (diagonal) {
            sigma = Matrix::Zero(k, k);
            for (Eigen::Index j = 0; j < k; ++j)
                sigma(j, j) = std::max(std::exp(theta[at++]), 1e-12);
        } else {
            Matrix l = Matrix::Zero(k, k);
            for (Eigen::Index j = 0; j < k; ++j) {
                l(j, j) = std::max(std::exp(theta[at++]), 1e-12);
                for (Eigen::Index i = j + 1; i < k; ++i) l(i, j) = theta[at++];
            }
            sigma = l * l.transpose();
        }
    }
};

void check_group_structure(const DidDesign& design, const std::vector<double>& mult) {
    double hospitals_in = 0;
    for (double m : mult) hospitals_in += m > 0.0 ? 1.0 : 0.0;
    if (hospitals_in < 2)
        throw StructureError("panel covers fewer than 2 hospitals; cluster structure inestimable");
    std::set<int> treated_years, control_years;
    for (const DesignRowInfo& r : design.rows) {
        if (mult[static_cast<size_t>(r.hospital)] == 0.0) continue;
        (r.treated ? treated_years : control_years).insert(r.year);
    }
    if (treated_years.size() < 2)
        throw StructureError("treated group observed in fewer than 2 years");
    if (control_years.size() < 2)
        throw StructureError("control group observed in fewer than 2 years");
}

}  // namespace

MultivariateMixedFit fit_multivariate_mixed(const DidDesign& design, const MvmmOptions& options) {
    const Eigen::Index p = design.x.cols();
    const Eigen::Index k = design.y.cols();
    if (options.em_rel_tol <= 0) throw ConfigError("em_rel_tol must be positive");
    if (options.em_max_iterations < 1) throw ConfigError("em_max_iterations must be at least 1");

    std::vector<double> mult(design.hospitals.size(), 1.0);
    if (options.hospital_multiplicity != nullptr) {
        if (options.hospital_multiplicity->size() != design.hospitals.size())
            throw ConfigError("hospital_multiplicity length does not match the design");
        mult = *options.hospital_multiplicity;
        for (double m : mult)
            if (m < 0.0 || !std::isfinite(m))
                throw ConfigError("hospital_multiplicity entries must be finite and non-negative");
    }
    check_group_structure(design, mult);

    const GroupedStats stats = build_stats(design, options.weight_by_n);
    const GlsPre pre = prepare_gls(stats, mult);
    Matrix t0_chol = pre.t0;
    cholesky_decompose(t0_chol);

    MultivariateMixedFit fit;
    fit.scheme = design.scheme;
    fit.column_names = design.column_names;
    fit.outcomes = design.outcomes;

    // --- starting values: per-outcome OLS on observed rows, residual moments
    Matrix b = Matrix::Zero(p, k);
    Matrix sigma = Matrix::Zero(k, k);
    Vector d = Vector::Zero(k);
    if (options.warm_start != nullptr) {
        const MultivariateMixedFit& w = *options.warm_start;
        if (w.b.rows() != p || w.b.cols() != k)
            throw ConfigError("warm_start shape does not match the design");
        b = w.b;
        sigma = w.sigma;
        d = w.sigma_alpha_sq;
        if (options.fix_hospital_variance_zero) d.setZero();
        for (Eigen::Index j = 0; j < k; ++j) d[j] = std::max(d[j], 0.0);
    } else {
        for (Eigen::Index j = 0; j < k; ++j) {
            Matrix xx = Matrix::Zero(p, p);
            Vector xy = Vector::Zero(p);
            for (const StatGroup& g : stats.groups) {
                if (mult[static_cast<size_t>(g.hospital)] == 0.0) continue;
                const Pattern& pat = stats.patterns[static_cast<size_t>(g.pattern)];
                const auto it = std::find(pat.obs.begin(), pat.obs.end(), static_cast<int>(j));
                if (it == pat.obs.end()) continue;
                const auto pos = static_cast<Eigen::Index>(it - pat.obs.begin());
                const double f = mult[static_cast<size_t>(g.hospital)] * g.w;
                xx += f * g.sxx;
                xy += f * g.sxy.col(pos);
            }
            b.col(j) = cholesky_solve(xx, xy);
        }
        Matrix pair_n = Matrix::Zero(k, k);
        for (const StatGroup& g : stats.groups) {
            const double mh = mult[static_cast<size_t>(g.hospital)];
            if (mh == 0.0) continue;
            const Pattern& pat = stats.patterns[static_cast<size_t>(g.pattern)];
            const GroupMoments gm = group_moments(g, pat, b);
            for (size_t aa = 0; aa < pat.obs.size(); ++aa)
                for (size_t cc = 0; cc < pat.obs.size(); ++cc) {
                    sigma(pat.obs[aa], pat.obs[cc]) +=
                        mh * g.w * gm.eee(static_cast<Eigen::Index>(aa),
                                          static_cast<Eigen::Index>(cc));
                    pair_n(pat.obs[aa], pat.obs[cc]) += mh * g.n;
                }
        }
        for (Eigen::Index i = 0; i < k; ++i)
            for (Eigen::Index j2 = 0; j2 < k; ++j2)
                sigma(i, j2) = pair_n(i, j2) > 0 ? sigma(i, j2) / pair_n(i, j2) : 0.0;
        for (Eigen::Index j = 0; j < k; ++j) sigma(j, j) = std::max(sigma(j, j), 1e-8);
        {
            Matrix test = sigma;
            try {
                cholesky_decompose(test);
            } catch (const SingularMatrixError&) {
                sigma = sigma.diagonal().asDiagonal();  // drop ill-formed pairwise covariances
            }
        }
        if (!options.fix_hospital_variance_zero) {
            d = 0.25 * sigma.diagonal();
            sigma *= 0.75;
        }
        if (options.sigma_diagonal) sigma = Matrix(sigma.diagonal().asDiagonal());
    }

    // --- EM on the grouped sufficient statistics
    const bool fix_zero = options.fix_hospital_variance_zero;
    double ll_prev = -std::numeric_limits<double>::infinity();
    double ll = ll_prev;
    bool em_converged = false;
    int iterations = 0;
    for (; iterations < options.em_max_iterations; ++iterations) {
        const std::vector<PatternWork> works = prepare_patterns(stats.patterns, sigma, k);
        const EStepResult e = run_e_step(stats, works, b, d, fix_zero, mult, false);
        ll = e.loglik;
        if (!std::isfinite(ll))
            throw SingularMatrixError("observed log-likelihood is not finite", 0);
        if (std::abs(ll - ll_prev) <= options.em_rel_tol * (std::abs(ll) + 1.0)) {
            em_converged = true;
            break;
        }
        ll_prev = ll;

        Matrix b_new(p, k);
        for (Eigen::Index j = 0; j < k; ++j)
            b_new.col(j) = cholesky_solve_factored(t0_chol, e.t1.col(j));
        Matrix sigma_new = (e.t2 - b_new.transpose() * pre.t0 * b_new) / pre.n_rows;
        sigma_new = 0.5 * (sigma_new + sigma_new.transpose()).eval();
        if (options.sigma_diagonal) sigma_new = Matrix(sigma_new.diagonal().asDiagonal());
        {
            Matrix test = sigma_new;
            try {
                cholesky_decompose(test);
            } catch (const SingularMatrixError&) {
                sigma_new += 1e-8 * Matrix::Identity(k, k);
                fit.ridged = true;
                Matrix test2 = sigma_new;
                cholesky_decompose(test2);  // still singular -> propagate
            }
        }
        b = b_new;
        sigma = sigma_new;
        if (!fix_zero) d = e.ea / pre.n_clusters;
    }

    fit.b = b;
    fit.sigma = sigma;
    fit.sigma_alpha_sq = d;
    fit.loglik = ll;
    fit.converged = em_converged;
    fit.em_iterations = iterations;

    // --- optional quasi-Newton polish of the variance parameters, fixed
    //     effects profiled out by exact GLS at each candidate point
    if (options.refine) {
        const VarPack pack{fix_zero, options.sigma_diagonal, k};
        const Objective objective = [&](const Vector& theta) {
            Vector dd;
            Matrix ss;
            pack.unpack(theta, dd, ss);
            try {
                const std::vector<PatternWork> works = prepare_patterns(stats.patterns, ss, k);
                const Matrix bb = gls_fixed_effects(stats, works, pre, dd, fix_zero, mult);
                return -observed_loglik(stats, works, bb, dd, fix_zero, mult);
            } catch (const SingularMatrixError&) {
                return std::numeric_limits<double>::infinity();
            }
        };
        try {
            OptimOptions opt;
            opt.gradient_tol = 1e-6;
            opt.max_iterations = 100;
            const OptimResult res = quasi_newton_minimize(objective, pack.pack(d, sigma), opt);
            if (-res.objective >= ll) {
                pack.unpack(res.argmin, d, sigma);
                const std::vector<PatternWork> works = prepare_patterns(stats.patterns, sigma, k);
                b = gls_fixed_effects(stats, works, pre, d, fix_zero, mult);
                fit.b = b;
                fit.sigma = sigma;
                fit.sigma_alpha_sq = d;
                fit.loglik = observed_loglik(stats, works, b, d, fix_zero, mult);
                fit.refined = true;
                fit.converged = fit.converged || res.converged;
            }
        } catch (const LineSearchError&) {
            // polish abandoned; the EM solution stands
        }
    }

    return fit;
}

}  // namespace p4p
