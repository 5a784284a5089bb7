#pragma once

// Training data for the emulator, replay buffers, the Sobolev loss and the
// AdamW training loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "cemu/canonical.hpp"
#include "cemu/choice.hpp"
#include "cemu/emulator.hpp"

namespace cemu {

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainingExample {
    CanonicalInput input;
    Eigen::VectorXd freq;
    Eigen::VectorXd logp_target;
    Eigen::MatrixXd J_v;
    std::vector<Eigen::MatrixXd> J_S;
};

struct GenOptions {
    std::uint64_t R = 100000;
    double tau = 3.0;
    std::optional<double> omega;  ///< fixes the mixing weight instead of drawing it
};

TrainingExample gen_training_example(int K, const ErrorFamily& family, std::uint64_t seed, const GenOptions& opt = {});

/// Example i uses derive_seed(master, first_index + i).
std::vector<TrainingExample> gen_training_examples(int K, const ErrorFamily& family, std::size_t count,
                                                   std::uint64_t master, const GenOptions& opt, unsigned jobs,
                                                   std::size_t first_index = 0);

// Shard files ---------------------------------------------------------------

inline constexpr std::size_t kShardHeaderBytes = 44;
inline constexpr std::uint32_t kShardVersion = 1;

struct ShardHeader {
    std::uint32_t K = 0;
    std::uint64_t count = 0;
    ErrorFamily family;
    std::uint32_t R = 0;
    double tau = 0.0;
};

struct Shard {
    ShardHeader header;
    std::vector<TrainingExample> examples;
};

std::size_t shard_record_doubles(std::size_t K);
void write_shard(const std::filesystem::path& path, const ShardHeader& header,
                 const std::vector<TrainingExample>& examples);
Shard read_shard(const std::filesystem::path& path);

// Replay buffers --------------------------------------------------------------

struct ReplayBuffers {
    std::vector<TrainingExample> examples;
    std::vector<TangentDirection> directions;

    /// Uniform with replacement, independently from each buffer.
    void sample(std::size_t n, Rng& rng, std::vector<const TrainingExample*>& ex,
                std::vector<const TangentDirection*>& dirs) const;
};

/// Direction buffer matching the example buffer in size.
std::vector<TangentDirection> make_directions(int K, std::size_t count, std::uint64_t master);

// Loss ----------------------------------------------------------------------------

struct TrainConfig {
    std::size_t steps = 20000;
    std::size_t batch_size = 10000;
    double lr_base = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 3e-6;
    std::size_t warmup_steps = 5000;
    double grad_clip = 0.01;
    double lambda_grad = 1e-8;
    double tau = 3.0;
    double fd_step = 1e-5;
    std::size_t eval_every = 200;
};

struct SobolevParts {
    ad::Var loss, ce, grad;
};

/// Loss from emulator outputs: `logp` and `dd` (emulator directional derivatives) are B x K nodes,
/// `freq` and `target_dd` are B x K constants.
SobolevParts sobolev_from_outputs(ad::Var logp, ad::Var dd, const Array& freq, const Array& target_dd,
                                  double lambda_grad);

/// <J_v row j, d_v> + <J_S[j], D_S> for each alternative.
Eigen::VectorXd target_directional_derivative(const TrainingExample& ex, const TangentDirection& d);

SobolevParts sobolev_loss(const BoundWeights& w, const std::vector<const TrainingExample*>& batch,
                          const std::vector<const TangentDirection*>& dirs, const TrainConfig& cfg,
                          double dropout = 0.0, std::uint64_t dropout_seed = 0);

double lr_schedule(std::size_t t, const TrainConfig& cfg);
double dropout_rate(std::size_t t, double initial);

// Training loop --------------------------------------------------------------------

struct LossRecord {
    std::size_t step = 0;
    double train_loss = 0.0;
    std::optional<double> eval_loss;
};

struct EvalSet {
    std::vector<TrainingExample> examples;
    std::vector<TangentDirection> directions;
};

struct TrainResult {
    EmulatorWeights weights;
    std::vector<LossRecord> trace;
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Buffers and eval sets are keyed by K; with several keys each step averages the per-K losses.
TrainResult train(const TrainConfig& cfg, EmulatorWeights init, const std::map<int, ReplayBuffers>& buffers,
                  const std::map<int, EvalSet>& eval, std::uint64_t seed, const ProgressFn& progress = {});

/// Loss on a full eval set, dropout off, averaged over K.
double evaluate_loss(const EmulatorWeights& w, const std::map<int, EvalSet>& eval, const TrainConfig& cfg);

/// Mean over examples of -sum_j freq_j log P_j and of the entropy floor -sum_j freq_j log freq_j.
struct CrossEntropy {
    double ce = 0.0, entropy = 0.0;
};
CrossEntropy cross_entropy(const EmulatorWeights& w, const std::vector<TrainingExample>& examples);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& trace);

}  // namespace cemu
