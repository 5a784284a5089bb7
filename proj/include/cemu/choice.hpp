#pragma once

// Ground-truth choice machinery: error sampling, Monte Carlo choice
// frequencies, soft-relaxation target gradients, and the GHK simulator.

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cemu/canonical.hpp"
#include "cemu/random.hpp"
#include "cemu/tape.hpp"

namespace cemu {

class SingularCovarianceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class FamilyKind { gaussian, gumbel, student_t };

struct ErrorFamily {
    FamilyKind kind = FamilyKind::gaussian;
    double nu = 5.0;  ///< degrees of freedom, student_t only

    static ErrorFamily gaussian() { return {}; }
    static ErrorFamily gumbel() { return {FamilyKind::gumbel, 0.0}; }
    static ErrorFamily student_t(double nu) { return {FamilyKind::student_t, nu}; }
};

std::string to_string(FamilyKind kind);
ErrorFamily parse_family(const std::string& name, double nu = 5.0);

/// Draws one exchangeable error vector eps* (iid coordinates).
class ErrorSampler {
public:
    ErrorSampler(ErrorFamily family, std::uint64_t seed);
    void draw(std::span<double> out);

private:
    ErrorFamily family_;
    Rng rng_;
    std::normal_distribution<double> normal_;
    std::uniform_real_distribution<double> uniform_;
    std::student_t_distribution<double> student_;
};

struct ChoiceProblem {
    Eigen::VectorXd v;
    Eigen::MatrixXd sigma;
    [[nodiscard]] int K() const { return static_cast<int>(v.size()); }
};

/// Symmetric PSD square root via eigendecomposition, negative eigenvalues clamped to 0.
Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& sigma);

/// Pulls a gradient with respect to L = Sigma^{1/2} back to Sigma (symmetric result).
Eigen::MatrixXd matrix_sqrt_psd_vjp(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& grad_root);

struct SimulateOptions {
    /// When non-empty, each sampled eps* is relabelled as eps'_i = eps*_{perm[i]}.
    std::span<const int> draw_permutation{};
};

/// Multinomial choice counts from R draws of U = v + Sigma^{1/2} eps*; ties go to the lowest index.
std::vector<std::uint64_t> simulate_choices(const ChoiceProblem& problem, const ErrorFamily& family, std::uint64_t R,
                                            std::uint64_t seed, const SimulateOptions& options = {});

/// Targets from the temperature-softmax relaxation, with the draws held fixed.
struct SoftTargets {
    Eigen::VectorXd logp;               ///< log mean softmax(tau U)
    Eigen::MatrixXd J_v;                ///< J_v(j, a) = d logp_j / d v*_a
    std::vector<Eigen::MatrixXd> J_S;   ///< J_S[j](a, b) = d logp_j / d Sigma*_ab, symmetric
};

SoftTargets soft_relaxation_targets(const CanonicalInput& input, const ErrorFamily& family, std::uint64_t R, double tau,
                                    std::uint64_t seed);

/// Batched GHK log-probabilities on a Tape.
///   v       : n x K utilities
///   sigma   : n x (K*K) scale matrices
///   chosen  : n chosen alternatives (0-based)
///   uniforms: n * R * (K-1) values in (0,1), laid out [obs][draw][dim]
/// Returns the n log-probabilities as a vector node.
ad::Var ghk_logprob(ad::Var v, ad::Var sigma, std::span<const int> chosen, std::size_t R,
                    std::span<const double> uniforms);

/// Single-observation GHK (Gaussian family). `uniforms` has R x (K-1) entries.
double ghk_logprob(const ChoiceProblem& problem, int chosen, std::size_t R, std::span<const double> uniforms);

/// Fills R x (K-1) uniforms in (0,1) from a seed.
std::vector<double> ghk_uniforms(std::size_t count, std::uint64_t seed);

}  // namespace cemu
