#include "cemu/separation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cemu/array.hpp"
#include "cemu/random.hpp"
#include "cemu/wishart.hpp"

namespace cemu {

namespace {

void check_j(const CanonicalInput& x, int j) {
    if (x.K < 2 || x.vstar.size() != x.K || x.sigstar.rows() != x.K || x.sigstar.cols() != x.K) {
        throw ContractViolation("malformed canonical input");
    }
    if (j < 0 || j >= x.K) throw ContractViolation("alternative index out of range");
}

// Calls fn(indices) for every r-subset of {0..m-1}, stopping early when fn returns false.
template <class F>
void for_each_subset(std::size_t m, std::size_t r, F&& fn) {
    if (r > m) return;
    std::vector<std::size_t> idx(r);
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
        if (!fn(idx)) return;
        std::size_t i = r;
        while (i > 0 && idx[i - 1] == m - r + i - 1) --i;
        if (i == 0) return;
        ++idx[i - 1];
        for (std::size_t k = i; k < r; ++k) idx[k] = idx[k - 1] + 1;
    }
}

std::vector<std::vector<std::size_t>> matching_subsets(const InvariantBundle& b, std::size_t t, double tol,
                                                       std::size_t limit) {
    const double target = -b.triples[t][1] - b.triples[t][2];
    std::vector<std::vector<std::size_t>> out;
    for_each_subset(b.offdiag.size(), static_cast<std::size_t>(b.K - 2), [&](const std::vector<std::size_t>& s) {
        double sum = 0.0;
        for (std::size_t i : s) sum += b.offdiag[i];
        if (std::abs(sum - target) < tol) out.push_back(s);
        return out.size() < limit;
    });
    return out;
}

double triple_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    return std::max({std::abs(a[0] - b[0]), std::abs(a[1] - b[1]), std::abs(a[2] - b[2])});
}

std::vector<int> others(int K, int j) {
    std::vector<int> o;
    for (int k = 0; k < K; ++k)
        if (k != j) o.push_back(k);
    return o;
}

bool same_under(const CanonicalInput& x1, const CanonicalInput& x2, const std::vector<int>& map, double tol) {
    // map[k] is the alternative of x2 that alternative k of x1 lands on.
    const int K = x1.K;
    for (int a = 0; a < K; ++a) {
        if (std::abs(x1.vstar[a] - x2.vstar[map[static_cast<std::size_t>(a)]]) > tol) return false;
        for (int b = 0; b < K; ++b) {
            if (std::abs(x1.sigstar(a, b) - x2.sigstar(map[static_cast<std::size_t>(a)], map[static_cast<std::size_t>(b)])) > tol) {
                return false;
            }
        }
    }
    return true;
}

}  // namespace

const char* to_string(Genericity g) {
    switch (g) {
        case Genericity::generic: return "generic";
        case Genericity::violates_a: return "violates_a";
        case Genericity::violates_b: return "violates_b";
    }
    return "?";
}

InvariantBundle invariant_gj(const CanonicalInput& x, int j) {
    check_j(x, j);
    InvariantBundle b;
    b.K = x.K;
    b.j = j;
    const auto o = others(x.K, j);
    for (int k : o) b.triples.push_back({x.vstar[k], x.sigstar(k, k), x.sigstar(j, k)});
    for (std::size_t a = 0; a < o.size(); ++a)
        for (std::size_t c = a + 1; c < o.size(); ++c) b.offdiag.push_back(x.sigstar(o[a], o[c]));
    std::sort(b.triples.begin(), b.triples.end());
    std::sort(b.offdiag.begin(), b.offdiag.end());
    return b;
}

std::vector<std::size_t> subset_matches(const InvariantBundle& b, double tol) {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < b.triples.size(); ++t) out.push_back(matching_subsets(b, t, tol, 2).size());
    return out;
}

Genericity check_genericity(const CanonicalInput& x, int j, double tol) {
    check_j(x, j);
    if (x.K > kMaxGenericityK) {
        throw CapabilityError("genericity check enumerates subsets exhaustively and supports K <= " +
                              std::to_string(kMaxGenericityK));
    }
    const InvariantBundle b = invariant_gj(x, j);
    for (std::size_t a = 0; a + 1 < b.triples.size(); ++a)
        for (std::size_t c = a + 1; c < b.triples.size(); ++c)
            if (triple_distance(b.triples[a], b.triples[c]) <= tol) return Genericity::violates_a;
    for (std::size_t a = 0; a + 1 < b.offdiag.size(); ++a)
        if (std::abs(b.offdiag[a + 1] - b.offdiag[a]) <= tol) return Genericity::violates_a;
    for (std::size_t m : subset_matches(b, tol))
        if (m != 1) return Genericity::violates_b;
    return Genericity::generic;
}

CanonicalInput recover(const InvariantBundle& b, double tol) {
    const int K = b.K, j = b.j;
    if (K < 2 || j < 0 || j >= K || b.triples.size() != static_cast<std::size_t>(K - 1) ||
        b.offdiag.size() != static_cast<std::size_t>((K - 1) * (K - 2) / 2)) {
        throw ContractViolation("recover: malformed invariant bundle");
    }
    for (std::size_t a = 0; a + 1 < b.triples.size(); ++a) {
        if (triple_distance(b.triples[a], b.triples[a + 1]) <= tol) {
            throw NonGenericInputError("recover: two alternatives share the same triple");
        }
    }
    const auto pos = others(K, j);
    std::vector<std::vector<std::size_t>> R;
    for (std::size_t t = 0; t < b.triples.size(); ++t) {
        auto m = matching_subsets(b, t, tol, 2);
        if (m.size() != 1) {
            throw NonGenericInputError("recover: " + std::to_string(m.size()) + " subsets match the row-sum constraint");
        }
        R.push_back(std::move(m.front()));
    }
    CanonicalInput x;
    x.K = K;
    x.vstar = Eigen::VectorXd::Zero(K);
    x.sigstar = Eigen::MatrixXd::Zero(K, K);
    double vsum = 0.0, dsum = 0.0;
    for (std::size_t t = 0; t < pos.size(); ++t) {
        const int k = pos[t];
        x.vstar[k] = b.triples[t][0];
        x.sigstar(k, k) = b.triples[t][1];
        x.sigstar(j, k) = x.sigstar(k, j) = b.triples[t][2];
        vsum += b.triples[t][0];
        dsum += b.triples[t][1];
    }
    for (std::size_t t = 0; t < pos.size(); ++t) {
        for (std::size_t u = t + 1; u < pos.size(); ++u) {
            std::vector<std::size_t> common;
            std::set_intersection(R[t].begin(), R[t].end(), R[u].begin(), R[u].end(), std::back_inserter(common));
            if (common.size() != 1) {
                throw NonGenericInputError("recover: subsets intersect in " + std::to_string(common.size()) + " entries");
            }
            x.sigstar(pos[t], pos[u]) = x.sigstar(pos[u], pos[t]) = b.offdiag[common.front()];
        }
    }
    x.vstar[j] = -vsum;
    x.sigstar(j, j) = K - dsum;
    const double err = std::max(x.sigstar.rowwise().sum().cwiseAbs().maxCoeff(), std::abs(x.sigstar.trace() - K));
    if (err > 10 * tol) throw NonGenericInputError("recover: reconstruction violates the row-sum constraint");
    return x;
}

bool orbit_equal(const CanonicalInput& x1, const CanonicalInput& x2, int j, double tol) {
    check_j(x1, j);
    check_j(x2, j);
    if (x1.K != x2.K) return false;
    const int K = x1.K;
    const auto pos = others(K, j);
    auto sorted_labels = [&](const CanonicalInput& x) {
        std::vector<int> o = pos;
        std::stable_sort(o.begin(), o.end(), [&](int a, int c) {
            const std::array<double, 3> ta{x.vstar[a], x.sigstar(a, a), x.sigstar(j, a)};
            const std::array<double, 3> tc{x.vstar[c], x.sigstar(c, c), x.sigstar(j, c)};
            return ta < tc;
        });
        return o;
    };
    const auto s1 = sorted_labels(x1), s2 = sorted_labels(x2);
    std::vector<int> map(static_cast<std::size_t>(K));
    map[static_cast<std::size_t>(j)] = j;
    for (std::size_t t = 0; t < s1.size(); ++t) map[static_cast<std::size_t>(s1[t])] = s2[t];
    if (same_under(x1, x2, map, tol)) return true;

    // Near-ties in the triples make the sort ambiguous; fall back to every relabelling.
    bool ties = false;
    for (std::size_t t = 0; t + 1 < s1.size(); ++t) {
        const std::array<double, 3> a{x1.vstar[s1[t]], x1.sigstar(s1[t], s1[t]), x1.sigstar(j, s1[t])};
        const std::array<double, 3> c{x1.vstar[s1[t + 1]], x1.sigstar(s1[t + 1], s1[t + 1]), x1.sigstar(j, s1[t + 1])};
        if (triple_distance(a, c) <= tol) ties = true;
    }
    if (!ties) return false;
    std::vector<int> target = pos;
    do {
        for (std::size_t t = 0; t < pos.size(); ++t) map[static_cast<std::size_t>(pos[t])] = target[t];
        if (same_under(x1, x2, map, tol)) return true;
    } while (std::next_permutation(target.begin(), target.end()));
    return false;
}

CanonicalInput random_canonical_input(int K, std::uint64_t seed) {
    Rng rng(seed);
    const Eigen::MatrixXd sigma = sample_wishart(Eigen::MatrixXd::Identity(K, K), K + 2.0, rng);
    std::normal_distribution<double> z(0.0, 2.0);
    Eigen::VectorXd v(K);
    for (auto& e : v) e = z(rng);
    return canonicalize(v, sigma);
}

SeparationReport separation_round_trip(int K, std::size_t instances, std::uint64_t seed, double tol,
                                       std::optional<int> fixed_j) {
    if (K < 2) throw ContractViolation("separation round trip needs K >= 2");
    if (fixed_j && (*fixed_j < 0 || *fixed_j >= K)) throw ContractViolation("alternative index out of range");
    if (K > kMaxGenericityK) {
        throw CapabilityError("genericity check enumerates subsets exhaustively and supports K <= " +
                              std::to_string(kMaxGenericityK));
    }
    SeparationReport rep;
    rep.K = K;
    rep.j = fixed_j;
    rep.instances = instances;
    for (std::size_t i = 0; i < instances; ++i) {
        const CanonicalInput x = random_canonical_input(K, derive_seed(seed, i));
        const int j = fixed_j ? *fixed_j : static_cast<int>(i % static_cast<std::size_t>(K));
        const Genericity g = check_genericity(x, j, tol);
        if (g == Genericity::violates_a) ++rep.violates_a;
        if (g == Genericity::violates_b) ++rep.violates_b;
        if (g != Genericity::generic) continue;
        ++rep.generic;
        try {
            if (orbit_equal(recover(invariant_gj(x, j)), x, j)) ++rep.recovered;
        } catch (const NonGenericInputError&) {
        }
    }
    return rep;
}

}  // namespace cemu
