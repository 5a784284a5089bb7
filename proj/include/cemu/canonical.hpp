#pragma once

// Projection of (v, Sigma) onto the canonical manifold: utilities summing to
// zero, a doubly centred scale matrix, and trace equal to K.

#include <cstdint>
#include <stdexcept>

#include <Eigen/Dense>

#include "cemu/tape.hpp"

namespace cemu {

/// tr(M Sigma M) is (numerically) zero: choices are deterministic.
class DegenerateChoiceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kDegenerateTrace = 1e-12;

struct CanonicalInput {
    int K = 0;
    Eigen::VectorXd vstar;
    Eigen::MatrixXd sigstar;
};

/// Perturbation of a canonical input that stays on the manifold's tangent space.
struct TangentDirection {
    Eigen::VectorXd d_v;
    Eigen::MatrixXd D_S;
};

/// Centring matrix I - 11'/K.
Eigen::MatrixXd centering_matrix(int K);

/// Throws DegenerateChoiceError when tr(M Sigma M) <= 1e-12.
CanonicalInput canonicalize(const Eigen::VectorXd& v, const Eigen::MatrixXd& sigma);

/// Checks all four manifold constraints at tolerance `tol` (PSD to -tol).
bool on_manifold(const CanonicalInput& x, double tol = 1e-10);

TangentDirection sample_tangent_direction(int K, std::uint64_t seed);

/// Joint norm of (d_v, vech(D_S)).
double direction_norm(const TangentDirection& d);

/// x + step * d. No PSD check: the result may leave the manifold's cone.
CanonicalInput perturb(const CanonicalInput& x, const TangentDirection& d, double step);

/// Relabels alternatives: result.v_i = v_{perm[i]}, result.S_ij = S_{perm[i] perm[j]}.
CanonicalInput permute(const CanonicalInput& x, std::span<const int> perm);

/// Batched canonicalisation on a Tape. `v` holds n x K utilities, `sigma`
/// holds n x K x K matrices (flattened per row). Outputs keep those layouts.
struct CanonicalBatch {
    ad::Var vstar;
    ad::Var sigstar;
};
CanonicalBatch canonicalize(ad::Var v, ad::Var sigma, int K);

}  // namespace cemu
