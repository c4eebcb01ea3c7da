#pragma once

#include <Eigen/Dense>
#include <functional>
#include <optional>

#include "p4p/errors.hpp"

namespace p4p {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

// In-place lower Cholesky A = L L'. Throws SingularMatrixError when a pivot
// falls below 1e-12 times the largest diagonal entry.
void cholesky_decompose(Matrix& a);

// Solves L L' x = b given the factor from cholesky_decompose.
Vector cholesky_solve_factored(const Matrix& l, const Vector& b);

// Solves A x = b for symmetric positive-definite A.
// Requires symmetry within 1e-10 relative; guarantees ||Ax - b|| <= 1e-8 ||b||
// on well-conditioned systems.
Vector cholesky_solve(const Matrix& a, const Vector& b);

double log_det_from_cholesky(const Matrix& l);

// ---------------------------------------------------------------------------
// Logistic regression inner solver
// ---------------------------------------------------------------------------

struct IrlsOptions {
    double deviance_tol = 1e-8;  // relative deviance change
    int max_iterations = 100;
    double coefficient_bound = 30.0;  // |beta_j| beyond this flags separation
};

// Maximum-likelihood logistic regression via iteratively reweighted least
// squares. `offset` is added to the linear predictor, `prior_weights` scale
// each observation's likelihood contribution. Throws SeparationError on
// complete separation and SingularMatrixError on rank deficiency.
Vector irls_fit(const Matrix& x, const Vector& y, const Vector& offset,
                const Vector& prior_weights, const IrlsOptions& opts = {});

inline Vector irls_fit(const Matrix& x, const Vector& y) {
    return irls_fit(x, y, Vector::Zero(x.rows()), Vector::Ones(x.rows()));
}

// Bernoulli log-likelihood with logit link at linear predictor eta.
double bernoulli_loglik(const Vector& eta, const Vector& y, const Vector& weights);

inline double logit(double p) { return std::log(p / (1.0 - p)); }
inline double inv_logit(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Quasi-Newton minimization
// ---------------------------------------------------------------------------

struct OptimResult {
    Vector argmin;
    double objective = 0.0;
    double gradient_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct OptimOptions {
    double gradient_tol = 1e-6;
    int max_iterations = 500;
    // Analytic gradient callback; central finite differences when absent,
    // step 1e-6 * (1 + |x_i|) per coordinate.
    std::function<Vector(const Vector&)> gradient;
};

using Objective = std::function<double(const Vector&)>;

// BFGS with backtracking (Armijo) line search. Throws LineSearchError when the
// objective turns non-finite along the search path. After max_iterations the
// best iterate is returned with converged = false.
OptimResult quasi_newton_minimize(const Objective& f, const Vector& x0, const OptimOptions& opts = {});

// Central finite-difference gradient used as the default and in gradient checks.
Vector finite_difference_gradient(const Objective& f, const Vector& x);

}  // namespace p4p
