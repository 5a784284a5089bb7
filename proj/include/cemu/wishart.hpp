#pragma once

// Wishart draws (Bartlett construction) and the density of a Wishart matrix
// rescaled so that its leading diagonal entry is one.

#include <Eigen/Dense>

#include "cemu/random.hpp"

namespace cemu {

/// W ~ Wishart(scale, df). Requires df >= d (real df allowed).
Eigen::MatrixXd sample_wishart(const Eigen::MatrixXd& scale, double df, Rng& rng);

/// W / W_11 with W ~ Wishart(I_d, df).
Eigen::MatrixXd sample_scaled_wishart(int d, double df, Rng& rng);

/// Log density of W / W_11 for W ~ Wishart(I_d, df), on the free entries of a
/// positive-definite Sigma with Sigma_11 = 1. Returns -inf outside that set.
double scaled_wishart_log_density(const Eigen::MatrixXd& sigma, double df);

}  // namespace cemu
