#include "cemu/wishart.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "cemu/array.hpp"

namespace cemu {

Eigen::MatrixXd sample_wishart(const Eigen::MatrixXd& scale, double df, Rng& rng) {
    const auto d = scale.rows();
    if (scale.cols() != d) throw ContractViolation("sample_wishart: scale must be square");
    if (!(df >= static_cast<double>(d))) throw ContractViolation("sample_wishart: df must be at least d");
    Eigen::LLT<Eigen::MatrixXd> llt(scale);
    if (llt.info() != Eigen::Success) throw ContractViolation("sample_wishart: scale must be positive definite");
    std::normal_distribution<double> normal;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        std::chi_squared_distribution<double> chi(df - static_cast<double>(i));
        A(i, i) = std::sqrt(chi(rng));
        for (Eigen::Index j = 0; j < i; ++j) A(i, j) = normal(rng);
    }
    const Eigen::MatrixXd LA = llt.matrixL() * A;
    Eigen::MatrixXd W = LA * LA.transpose();
    return 0.5 * (W + W.transpose());
}

Eigen::MatrixXd sample_scaled_wishart(int d, double df, Rng& rng) {
    if (d < 1) throw ContractViolation("sample_scaled_wishart: d must be positive");
    Eigen::MatrixXd W = sample_wishart(Eigen::MatrixXd::Identity(d, d), df, rng);
    W /= W(0, 0);
    W(0, 0) = 1.0;
    return W;
}

double scaled_wishart_log_density(const Eigen::MatrixXd& sigma, double df) {
    const auto d = sigma.rows();
    if (sigma.cols() != d || d < 1) throw ContractViolation("scaled_wishart_log_density: sigma must be square");
    if (!(df >= static_cast<double>(d))) throw ContractViolation("scaled_wishart_log_density: df must be at least d");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) logdet += 2.0 * std::log(llt.matrixLLT()(i, i));
    const double dd = static_cast<double>(d);
    const double s = df * dd / 2.0;
    double log_mvgamma = dd * (dd - 1.0) / 4.0 * std::log(M_PI);
    for (Eigen::Index i = 0; i < d; ++i) log_mvgamma += std::lgamma(df / 2.0 - static_cast<double>(i) / 2.0);
    return std::lgamma(s) - s * std::log(2.0) - log_mvgamma + (df - dd - 1.0) / 2.0 * logdet -
           s * std::log(sigma.trace() / 2.0);
}

}  // namespace cemu
