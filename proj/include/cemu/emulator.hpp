#pragma once

// Permutation-equivariant emulator of choice log-probabilities.
//
// Per alternative j the encoder pools pairwise features d_jk over k != j
// (diagonal DeepSet), pooled features o_kl over pairs not involving j
// (off-diagonal DeepSet), and combines both with pass-through summaries s_j.
// Equivariant layers then mix alternatives and a bias-free head gives logits.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cemu/array.hpp"
#include "cemu/canonical.hpp"
#include "cemu/tape.hpp"

namespace cemu {

/// An MLP block: `hidden_layers` layers of width `hidden`, then an output layer of width `out`.
struct StackSpec {
    int out = 8;
    int hidden_layers = 0;
    int hidden = 0;
    bool operator==(const StackSpec&) const = default;
};

struct EmulatorConfig {
    StackSpec diag_phi{8, 0, 0};
    StackSpec diag_rho{8, 0, 0};
    StackSpec off_phi{8, 0, 0};
    StackSpec off_rho{8, 0, 0};
    StackSpec zeta{8, 2, 12};
    std::vector<int> equivariant{4};  ///< widths of the equivariant layers
    bool multi_k = false;             ///< append K to the pass-through features
    double dropout_initial = 0.1;

    static EmulatorConfig preset(int K);  ///< K in {3, 5, 10}
    bool operator==(const EmulatorConfig&) const = default;
};

inline constexpr int kPairFeatures = 9;
inline constexpr int kOffFeatures = 6;
inline constexpr int kPassFeatures = 9;  ///< without the optional K feature

struct FeatureSpec {
    std::vector<std::string> d_jk, o_kl, s_j;
};
FeatureSpec feature_spec(const EmulatorConfig& cfg);

struct ParameterCounts {
    std::size_t diag = 0, off = 0, zeta = 0, equivariant = 0, total = 0;
};
ParameterCounts parameter_counts(const EmulatorConfig& cfg);

struct TensorSpec {
    std::string name;
    Shape shape;
};
/// Every learned array in storage order.
std::vector<TensorSpec> weight_layout(const EmulatorConfig& cfg);

struct EmulatorWeights {
    EmulatorConfig config;
    std::vector<std::string> names;
    std::vector<Array> arrays;

    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] const Array& get(const std::string& name) const;
    bool operator==(const EmulatorWeights&) const = default;
};

/// Affine weights ~ N(0, 1/fan_in), biases zero.
EmulatorWeights init_weights(const EmulatorConfig& cfg, std::uint64_t seed);

/// Checks names and shapes against the config layout.
void validate(const EmulatorWeights& w);

/// Weights placed on a tape, either as leaves with gradients or as constants.
struct BoundWeights {
    const EmulatorWeights* weights = nullptr;
    std::vector<ad::Var> vars;
};
BoundWeights bind(ad::Tape& tape, const EmulatorWeights& w, bool requires_grad);

struct ForwardOptions {
    double dropout = 0.0;
    std::uint64_t seed = 0;
    /// Observations i and i + mask_period share dropout masks (0: no sharing).
    std::size_t mask_period = 0;
};

/// Intermediate per-alternative encodings, exposed for inspection.
struct ForwardTrace {
    ad::Var h_diag, h_off, z;
};

/// Batched forward pass. `vstar` is n x K, `sigstar` is n x K*K. Returns n x K log-probabilities.
ad::Var forward(const BoundWeights& w, ad::Var vstar, ad::Var sigstar, int K, const ForwardOptions& opt = {},
                ForwardTrace* trace = nullptr);

/// Single-input convenience wrapper (value only).
Eigen::VectorXd forward(const EmulatorWeights& w, const CanonicalInput& x, double dropout = 0.0, std::uint64_t seed = 0);

/// Value-only batch over inputs sharing one K. Result is n x K.
Eigen::MatrixXd forward_batch(const EmulatorWeights& w, const std::vector<CanonicalInput>& xs);

/// Central difference of the log-probabilities along `dir`, dropout disabled.
Eigen::VectorXd directional_derivative(const EmulatorWeights& w, const CanonicalInput& x, const TangentDirection& dir,
                                       double step);

/// Packs canonical inputs into (n x K, n x K*K) arrays.
std::pair<Array, Array> pack_inputs(const std::vector<CanonicalInput>& xs);

void save_weights(const EmulatorWeights& w, const std::filesystem::path& path);
EmulatorWeights load_weights(const std::filesystem::path& path);
std::string weights_to_json(const EmulatorWeights& w);
EmulatorWeights weights_from_json(const std::string& text);

}  // namespace cemu
