#include "p4p/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace p4p {

// ---------------------------------------------------------------------------
// Cholesky
// ---------------------------------------------------------------------------

void cholesky_decompose(Matrix& a) {
    const int n = static_cast<int>(a.rows());
    const double max_diag = a.diagonal().maxCoeff();
    const double floor = 1e-12 * std::max(max_diag, 1.0);
    for (int j = 0; j < n; ++j) {
        double d = a(j, j);
        for (int k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
        if (d <= floor) {
            throw SingularMatrixError("matrix not positive definite", j);
        }
        const double l = std::sqrt(d);
        a(j, j) = l;
        for (int i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
            a(i, j) = s / l;
        }
    }
    // zero the strict upper triangle so the factor is self-describing
    for (int j = 1; j < n; ++j)
        for (int i = 0; i < j; ++i) a(i, j) = 0.0;
}

Vector cholesky_solve_factored(const Matrix& l, const Vector& b) {
    const int n = static_cast<int>(l.rows());
    Vector x = b;
    for (int i = 0; i < n; ++i) {
        double s = x[i];
        for (int k = 0; k < i; ++k) s -= l(i, k) * x[k];
        x[i] = s / l(i, i);
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = x[i];
        for (int k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
        x[i] = s / l(i, i);
    }
    return x;
}

Vector cholesky_solve(const Matrix& a, const Vector& b) {
    if (a.rows() != a.cols()) throw Error("cholesky_solve: matrix not square");
    if (a.rows() != b.size()) throw Error("cholesky_solve: dimension mismatch");
    const double scale = a.cwiseAbs().maxCoeff();
    const double asym = (a - a.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-10 * std::max(scale, 1.0)) {
        throw Error("cholesky_solve: matrix not symmetric");
    }
    Matrix l = a;
    cholesky_decompose(l);
    return cholesky_solve_factored(l, b);
}

double log_det_from_cholesky(const Matrix& l) {
    double s = 0.0;
    for (int i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
    return 2.0 * s;
}

// ---------------------------------------------------------------------------
// IRLS
// ---------------------------------------------------------------------------

double bernoulli_loglik(const Vector& eta, const Vector& y, const Vector& weights) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
        // y*eta - log(1+exp(eta)), computed stably
        const double e = eta[i];
        const double log1pe = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
        ll += weights[i] * (y[i] * e - log1pe);
    }
    return ll;
}

Vector irls_fit(const Matrix& x, const Vector& y, const Vector& offset,
                const Vector& prior_weights, const IrlsOptions& opts) {
    const Eigen::Index n = x.rows();
    const Eigen::Index p = x.cols();
    if (y.size() != n || offset.size() != n || prior_weights.size() != n) {
        throw Error("irls_fit: dimension mismatch");
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        if (y[i] != 0.0 && y[i] != 1.0) throw Error("irls_fit: response must be 0/1");
    }

    Vector beta = Vector::Zero(p);
    double deviance = std::numeric_limits<double>::infinity();
    Vector eta(n), mu(n), w(n), z(n);

    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        eta = x * beta + offset;
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            mu[i] = inv_logit(eta[i]);
            const double wi = std::max(mu[i] * (1.0 - mu[i]), 1e-10) * prior_weights[i];
            w[i] = wi;
            z[i] = (eta[i] - offset[i]) + (y[i] - mu[i]) * prior_weights[i] / wi;
        }
        ll = bernoulli_loglik(eta, y, prior_weights);
        const double new_deviance = -2.0 * ll;

        Matrix xtwx = Matrix::Zero(p, p);
        Vector xtwz = Vector::Zero(p);
        for (Eigen::Index i = 0; i < n; ++i) {
            xtwx.selfadjointView<Eigen::Lower>().rankUpdate(x.row(i).transpose(), w[i]);
            xtwz += (w[i] * z[i]) * x.row(i).transpose();
        }
        xtwx = xtwx.selfadjointView<Eigen::Lower>();
        try {
            beta = cholesky_solve(xtwx, xtwz);
        } catch (const SingularMatrixError& e) {
            throw SingularMatrixError("irls_fit: rank-deficient design", e.pivot_index());
        }

        if (beta.cwiseAbs().maxCoeff() > opts.coefficient_bound) {
            throw SeparationError("irls_fit: complete separation (coefficient exceeds " +
                                  std::to_string(opts.coefficient_bound) + " on the logit scale)");
        }
        if (std::isfinite(deviance) &&
            std::abs(deviance - new_deviance) < opts.deviance_tol * (std::abs(new_deviance) + 0.1)) {
            return beta;
        }
        deviance = new_deviance;
    }
    return beta;
}

// ---------------------------------------------------------------------------
// BFGS
// ---------------------------------------------------------------------------

Vector finite_difference_gradient(const Objective& f, const Vector& x) {
    const Eigen::Index n = x.size();
    Vector g(n);
    Vector xp = x;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double h = 1e-6 * (1.0 + std::abs(x[i]));
        xp[i] = x[i] + h;
        const double fp = f(xp);
        xp[i] = x[i] - h;
        const double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

OptimResult quasi_newton_minimize(const Objective& f, const Vector& x0, const OptimOptions& opts) {
    const Eigen::Index n = x0.size();
    auto grad = [&](const Vector& x) {
        return opts.gradient ? opts.gradient(x) : finite_difference_gradient(f, x);
    };

    Vector x = x0;
    double fx = f(x);
    if (!std::isfinite(fx)) throw LineSearchError("objective not finite at starting point");
    Vector g = grad(x);

    Matrix h_inv = Matrix::Identity(n, n);
    OptimResult best;
    best.argmin = x;
    best.objective = fx;
    best.gradient_norm = g.norm();

    const double c1 = 1e-4;
    int iter = 0;
    for (; iter < opts.max_iterations; ++iter) {
        const double gnorm = g.norm();
        if (fx <= best.objective) {
            best.argmin = x;
            best.objective = fx;
            best.gradient_norm = gnorm;
        }
        if (gnorm <= opts.gradient_tol) {
            best.iterations = iter;
            best.converged = true;
            return best;
        }

        Vector p = -(h_inv * g);
        double slope = g.dot(p);
        if (slope >= 0) {  // stale curvature; reset to steepest descent
            h_inv.setIdentity();
            p = -g;
            slope = -g.squaredNorm();
        }

        // backtracking Armijo search
        double step = 1.0;
        double f_new = 0.0;
        Vector x_new;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            x_new = x + step * p;
            f_new = f(x_new);
            if (!std::isfinite(f_new)) {
                if (ls >= 59) throw LineSearchError("objective not finite during line search");
                step *= 0.5;
                continue;
            }
            if (f_new <= fx + c1 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            // no decrease possible to machine resolution; stop at the best point
            break;
        }

        Vector g_new = grad(x_new);
        Vector s = x_new - x;
        Vector yv = g_new - g;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            // standard BFGS inverse update
            const double rho = 1.0 / sy;
            Matrix vt = Matrix::Identity(n, n) - rho * s * yv.transpose();
            h_inv = vt * h_inv * vt.transpose() + rho * s * s.transpose();
        }
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    const double gnorm = g.norm();
    if (fx <= best.objective) {
        best.argmin = x;
        best.objective = fx;
        best.gradient_norm = gnorm;
    }
    best.iterations = iter;
    best.converged = best.gradient_norm <= opts.gradient_tol;
    return best;
}

}  // namespace p4p
