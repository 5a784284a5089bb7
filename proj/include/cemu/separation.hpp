#pragma once

// Per-alternative invariants of a canonical input and the procedure that
// recovers the input, up to relabelling the other alternatives, from them.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

#include "cemu/canonical.hpp"

namespace cemu {

class NonGenericInputError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr double kGenericityTol = 1e-9;
inline constexpr double kRecoveryTol = 1e-7;
inline constexpr int kMaxGenericityK = 8;

/// T_j: (v_k, S_kk, S_jk) for k != j, sorted lexicographically.
/// O_j: S_kl for k < l with k, l != j, sorted ascending.
struct InvariantBundle {
    int K = 0, j = 0;
    std::vector<std::array<double, 3>> triples;
    std::vector<double> offdiag;
    bool operator==(const InvariantBundle&) const = default;
};

InvariantBundle invariant_gj(const CanonicalInput& x, int j);

enum class Genericity { generic, violates_a, violates_b };
const char* to_string(Genericity g);

/// Throws CapabilityError for K > 8 (the subset-sum check is exhaustive).
Genericity check_genericity(const CanonicalInput& x, int j, double tol = kGenericityTol);

/// Number of (K-2)-subsets of O_j matching row k's sum constraint, per triple of T_j.
std::vector<std::size_t> subset_matches(const InvariantBundle& b, double tol);

CanonicalInput recover(const InvariantBundle& b, double tol = kRecoveryTol);

/// True iff a permutation fixing j maps x1 onto x2 within tol (max-abs).
bool orbit_equal(const CanonicalInput& x1, const CanonicalInput& x2, int j, double tol = 1e-6);

struct SeparationReport {
    int K = 0;
    std::optional<int> j;  ///< empty when instance i is tested at j = i mod K
    std::size_t instances = 0, generic = 0, violates_a = 0, violates_b = 0, recovered = 0;
};

/// Random canonical inputs (Wishart scale, normal utilities), tested at a fixed j or cycling through all of them.
SeparationReport separation_round_trip(int K, std::size_t instances, std::uint64_t seed, double tol = kGenericityTol,
                                       std::optional<int> j = std::nullopt);

/// The canonical input drawn for instance i of separation_round_trip.
CanonicalInput random_canonical_input(int K, std::uint64_t seed);

}  // namespace cemu
