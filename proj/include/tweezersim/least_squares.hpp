#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>

#include <Eigen/Dense>
#include <unsupported/Eigen/LevenbergMarquardt>

#include "tweezersim/error.hpp"

namespace tweezersim {

struct LeastSquaresOptions {
    double tolerance = 1e-12;
    int max_evaluations = 4000;
};

struct LeastSquaresResult {
    Eigen::VectorXd parameters;
    // Diagonal of the parameter covariance, scaled by the reduced chi-square.
    Eigen::VectorXd variance;
    double residual_rms = 0;
    int evaluations = 0;
    bool converged = false;
};

namespace detail {

// Central-difference Jacobian.
template <class Residual>
Eigen::MatrixXd numeric_jacobian(Residual& residual, const Eigen::VectorXd& x, Eigen::Index n_values)
{
    Eigen::MatrixXd jac(n_values, x.size());
    Eigen::VectorXd plus(n_values), minus(n_values);
    Eigen::VectorXd probe = x;
    for (Eigen::Index j = 0; j < x.size(); ++j) {
        const double h = 1e-6 * std::max(std::abs(x[j]), 1e-8);
        probe[j] = x[j] + h;
        residual(probe, plus);
        probe[j] = x[j] - h;
        residual(probe, minus);
        probe[j] = x[j];
        jac.col(j) = (plus - minus) / (2 * h);
    }
    return jac;
}

template <class Residual>
struct LmFunctor : Eigen::DenseFunctor<double> {
    Residual* residual;
    LmFunctor(Residual& r, int n_params, int n_values) : DenseFunctor(n_params, n_values), residual(&r) {}
    int operator()(const InputType& x, ValueType& f) const
    {
        (*residual)(x, f);
        return 0;
    }
    int df(const InputType& x, JacobianType& jac) const
    {
        jac = numeric_jacobian(*residual, x, values());
        return 0;
    }
};

} // namespace detail

// Minimizes |residual(p)|^2 with Levenberg-Marquardt. `residual(p, r)` fills
// r (pre-sized to n_values). Parameters should be scaled to order unity.
template <class Residual>
LeastSquaresResult least_squares(Residual residual, Eigen::VectorXd initial, Eigen::Index n_values,
                                 const LeastSquaresOptions& options = {})
{
    const auto n_params = initial.size();
    if (n_values < n_params)
        throw InvalidArgument("least_squares: fewer residuals than parameters");

    detail::LmFunctor<Residual> functor(residual, static_cast<int>(n_params), static_cast<int>(n_values));
    Eigen::LevenbergMarquardt<detail::LmFunctor<Residual>> lm(functor);
    lm.setFtol(options.tolerance);
    lm.setXtol(options.tolerance);
    lm.setMaxfev(options.max_evaluations);

    LeastSquaresResult out;
    out.parameters = std::move(initial);
    const auto status = lm.minimize(out.parameters);
    out.evaluations = static_cast<int>(lm.nfev());
    out.converged = status != Eigen::LevenbergMarquardtSpace::ImproperInputParameters &&
                    status != Eigen::LevenbergMarquardtSpace::TooManyFunctionEvaluation &&
                    out.parameters.allFinite();

    Eigen::VectorXd r(n_values);
    residual(out.parameters, r);
    const double ssr = r.squaredNorm();
    out.residual_rms = std::sqrt(ssr / static_cast<double>(n_values));

    const Eigen::MatrixXd jac = detail::numeric_jacobian(residual, out.parameters, n_values);
    const Eigen::MatrixXd normal = jac.transpose() * jac;
    const auto dof = std::max<Eigen::Index>(n_values - n_params, 1);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(normal);
    if (cod.rank() == n_params)
        out.variance = cod.pseudoInverse().diagonal() * (ssr / static_cast<double>(dof));
    else
        out.variance = Eigen::VectorXd::Constant(n_params, std::numeric_limits<double>::infinity());
    return out;
}

} // namespace tweezersim
