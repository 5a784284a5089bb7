#pragma once

// Maximum-likelihood estimation of multinomial probit models with an emulator
// or GHK likelihood, two covariance parameterizations with Sigma_11 = 1 and a
// zero reference alternative, penalization, L-BFGS and standard errors.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cemu/choice.hpp"
#include "cemu/emulator.hpp"

namespace cemu {

class BarrierDomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

enum class SigmaParam { dense_cholesky, one_factor };
enum class BackendKind { emulator, ghk };
enum class Dgp { probit, emulator_rum };

std::string to_string(SigmaParam s);
std::string to_string(Dgp d);
SigmaParam parse_sigma_param(const std::string& s);
Dgp parse_dgp(const std::string& s);

struct Backend {
    BackendKind kind = BackendKind::ghk;
    std::shared_ptr<const EmulatorWeights> weights;
    std::size_t R = 50;

    static Backend emulator(std::shared_ptr<const EmulatorWeights> w) { return {BackendKind::emulator, std::move(w), 0}; }
    static Backend ghk(std::size_t R) { return {BackendKind::ghk, nullptr, R}; }
    [[nodiscard]] std::string label() const;  ///< "emulator" or "ghk(R)"
};

struct ModelSpec {
    int K = 3;
    int p = 2;
    SigmaParam sigma_param = SigmaParam::dense_cholesky;
    Backend backend;
    double lambda_reg = 0.1;
};

/// theta = [beta (p); log-scale parameters (K-2); remaining covariance parameters].
/// Dense: log L_jj for j = 2..K-1, then L_jk (j > k) row by row. Factor: log Psi_jj, then gamma_j, j = 2..K-1.
struct ThetaLayout {
    std::size_t beta = 0, log_scale = 0, other = 0;
    [[nodiscard]] std::size_t total() const { return beta + log_scale + other; }
};
ThetaLayout theta_layout(const ModelSpec& spec);
std::vector<std::string> theta_names(const ModelSpec& spec);

struct ChoiceDataset {
    int K = 0, p = 0;
    std::vector<int> y;               ///< 0-based; alternative K-1 is the reference
    std::vector<Eigen::MatrixXd> X;   ///< (K-1) x p per observation
    std::uint64_t seed = 0;           ///< source of the GHK uniforms
    [[nodiscard]] std::size_t n() const { return y.size(); }
};
void validate(const ChoiceDataset& data, const ModelSpec& spec);

/// Full K x K Sigma and its derivatives with respect to each covariance parameter.
struct CovarianceMap {
    Eigen::MatrixXd sigma;
    std::vector<Eigen::MatrixXd> d_sigma;
};
CovarianceMap covariance_from_theta(const Eigen::VectorXd& theta, const ModelSpec& spec);

/// Inverse of the covariance map for a (K-1) x (K-1) upper block with Sigma_11 = 1 (dense only).
Eigen::VectorXd dense_params_from_sigma(const Eigen::MatrixXd& upper);

ChoiceProblem theta_to_problem(const Eigen::VectorXd& theta, const ModelSpec& spec, const Eigen::MatrixXd& X);

/// r(theta) = barrier + log pseudo-prior, with analytic gradient and Hessian.
struct Penalty {
    double value = 0.0;
    Eigen::VectorXd grad;
    Eigen::MatrixXd hessian;
};
Penalty penalty(const Eigen::VectorXd& theta, const ModelSpec& spec, bool with_hessian = false);

struct LogLikEval {
    double value = 0.0;      ///< mean log-likelihood + lambda r / n
    double loglik = 0.0;     ///< mean log-likelihood alone
    Eigen::VectorXd grad;
    Eigen::MatrixXd scores;  ///< n x dim, per-observation gradients of log P (only when requested)
};

/// Objective for one (spec, dataset) pair. Holds the GHK uniforms so repeated
/// evaluations use common random numbers.
class Objective {
public:
    Objective(ModelSpec spec, const ChoiceDataset& data);

    /// Throws BarrierDomainError outside the barrier domain.
    LogLikEval evaluate(const Eigen::VectorXd& theta, bool with_scores = false) const;
    [[nodiscard]] const ModelSpec& spec() const { return spec_; }
    [[nodiscard]] const ChoiceDataset& data() const { return *data_; }

private:
    ModelSpec spec_;
    const ChoiceDataset* data_;
    std::vector<double> uniforms_;
};

double penalized_loglik(const Eigen::VectorXd& theta, const ModelSpec& spec, const ChoiceDataset& data,
                        Eigen::VectorXd* grad = nullptr);

// Optimizer --------------------------------------------------------------------

struct LbfgsOptions {
    int memory = 10;
    int max_iterations = 500;
    double grad_tol = 1e-6;
    double min_step = 1e-6;
    double decrease_tol = 1e-8;  ///< relative decrease of f accepted on a step
};

enum class FitStatus { converged, max_iterations, stalled, failed };
std::string to_string(FitStatus s);

struct FitResult {
    Eigen::VectorXd theta;
    double value = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;
    int evaluations = 0;
    FitStatus status = FitStatus::failed;
    std::string message;
};

/// f returns the value and fills the gradient; it may throw BarrierDomainError or
/// SingularCovarianceError to reject a point. Returns the best point seen.
using SmoothFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;
FitResult lbfgs_maximize(const SmoothFn& f, Eigen::VectorXd x0, const LbfgsOptions& opt = {});

/// Init defaults to beta = 0 and Sigma block = I.
FitResult fit_mle(const Objective& obj, std::optional<Eigen::VectorXd> init = std::nullopt,
                  const LbfgsOptions& opt = {});

struct StandardErrors {
    bool ok = false;
    Eigen::VectorXd se;
    Eigen::MatrixXd cov;
    double min_eigenvalue = 0.0;  ///< of the matrix that was inverted
    std::string message;
    Eigen::MatrixXd bread, meat;  ///< sandwich mode: A (minus mean Hessian) and B (mean score outer product)
};

/// Default: {sum_i psi_i psi_i' - lambda Hess r}^{-1}. Sandwich: A^{-1} B A^{-T} / n with A from
/// central differences of the objective gradient.
StandardErrors standard_errors(const Objective& obj, const Eigen::VectorXd& theta_hat, bool sandwich = false);

// Data-generating processes -----------------------------------------------------

/// beta = (0, 1, 0, ...); Dense Sigma block from the scaled Wishart(I, K+10); Factor from its normal priors.
Eigen::VectorXd draw_true_theta(const ModelSpec& spec, std::uint64_t seed);

/// The emulator DGP samples from `emulator`, or from the spec's emulator backend when null.
ChoiceDataset generate_dgp_dataset(const ModelSpec& spec, const Eigen::VectorXd& theta_true, std::size_t n, Dgp dgp,
                                   std::uint64_t seed, const EmulatorWeights* emulator = nullptr);

// Simulation study ------------------------------------------------------------------

struct StudyConfig {
    std::vector<std::size_t> ns{1000};
    std::vector<int> Ks{3};
    std::vector<SigmaParam> specs{SigmaParam::dense_cholesky};
    std::vector<Dgp> dgps{Dgp::probit};
    std::vector<Backend> methods;  ///< emulator entries without weights pick them from `emulators`
    std::map<int, std::shared_ptr<const EmulatorWeights>> emulators;
    std::size_t reps = 100;
    int p = 2;
    double lambda_reg = 0.1;
    bool sandwich = false;
    std::uint64_t seed = 1;
    unsigned jobs = 1;
    std::size_t bootstrap = 1000;
};

struct Replication {
    std::size_t rep = 0;
    bool failed = false;
    std::string message;
    Eigen::VectorXd theta_true, theta_hat, se;
    double time_s = 0.0;
    FitStatus status = FitStatus::failed;
};

struct ParameterSummary {
    std::string name;
    double mean_error = 0.0, mcse = 0.0, emp_sd = 0.0, mean_se = 0.0;
};

struct MetricsRow {
    std::size_t n = 0;
    Dgp dgp = Dgp::probit;
    std::string method;
    SigmaParam spec = SigmaParam::dense_cholesky;
    int K = 0;
    double rmse = 0, rmse_mcse = 0, rms_bias = 0, rms_bias_mcse = 0, se_ratio = 0, se_ratio_mcse = 0;
    double coverage = 0, coverage_mcse = 0, time_s = 0, time_mcse = 0;
    std::size_t failures = 0;
    std::vector<ParameterSummary> parameters;
};

/// Metrics over the successful replications of one configuration.
MetricsRow compute_metrics(const std::vector<Replication>& reps, const std::vector<std::string>& names,
                           std::size_t bootstrap, std::uint64_t seed);

struct StudyResult {
    std::vector<MetricsRow> rows;
    std::vector<std::vector<Replication>> replications;  ///< parallel to rows
};

/// Seed of one (n, K, spec, dgp) cell; replication r uses replication_seed(key, r) for its truth and dataset.
std::uint64_t study_cell_key(std::uint64_t seed, std::size_t n, int K, SigmaParam sp, Dgp dgp);
std::uint64_t replication_seed(std::uint64_t cell_key, std::size_t r);

using StudyProgress = std::function<void(const std::string& config, std::size_t done, std::size_t total)>;
StudyResult run_simulation_study(const StudyConfig& cfg, const StudyProgress& progress = {});

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace cemu
