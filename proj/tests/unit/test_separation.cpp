#include <doctest.h>

#include <numeric>

#include "cemu/emulator.hpp"
#include "cemu/random.hpp"
#include "cemu/separation.hpp"

using namespace cemu;

namespace {

CanonicalInput swap_pair(const CanonicalInput& x, int a, int b) {
    std::vector<int> perm(static_cast<std::size_t>(x.K));
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[static_cast<std::size_t>(a)], perm[static_cast<std::size_t>(b)]);
    return permute(x, perm);
}

}  // namespace

TEST_CASE("invariant bundle sizes and invariance") {
    const auto x3 = random_canonical_input(3, 1);
    const auto b3 = invariant_gj(x3, 0);
    CHECK(b3.triples.size() == 2);
    CHECK(b3.offdiag.size() == 1);
    const auto x5 = random_canonical_input(5, 2);
    const auto b5 = invariant_gj(x5, 2);
    CHECK(b5.triples.size() == 4);
    CHECK(b5.offdiag.size() == 6);
    CHECK(invariant_gj(permute(x5, std::vector<int>{3, 0, 2, 4, 1}), 2) == b5);
    CHECK(!(invariant_gj(swap_pair(x5, 2, 4), 2) == b5));
    CHECK_THROWS_AS(invariant_gj(x5, 5), ContractViolation);
}

TEST_CASE("genericity of random and constructed inputs") {
    int generic = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        if (check_genericity(random_canonical_input(4, derive_seed(7, s)), static_cast<int>(s % 4)) == Genericity::generic) {
            ++generic;
        }
    }
    CHECK(generic >= 99);

    // Averaging x with its 1<->2 swap gives two identical triples with respect to j = 0.
    const auto x = random_canonical_input(4, 3);
    const auto y = swap_pair(x, 1, 2);
    CanonicalInput tie{4, 0.5 * (x.vstar + y.vstar), 0.5 * (x.sigstar + y.sigstar)};
    CHECK(check_genericity(tie, 0) == Genericity::violates_a);
    CHECK_THROWS_AS(recover(invariant_gj(tie, 0)), NonGenericInputError);

    for (int K = 2; K <= 7; ++K) {
        for (std::uint64_t s = 0; s < 5; ++s) {
            const auto m = subset_matches(invariant_gj(random_canonical_input(K, s), 0), kGenericityTol);
            for (std::size_t c : m) CHECK(c >= 1);
        }
    }
    CHECK_THROWS_AS(check_genericity(random_canonical_input(9, 1), 0), CapabilityError);
}

TEST_CASE("recovery round trip") {
    for (int K : {3, 4, 5}) {
        const auto rep = separation_round_trip(K, 100, 11);
        CAPTURE(K);
        CHECK(rep.generic >= 95);
        CHECK(rep.recovered == rep.generic);
    }
    // K = 3 with j = 0: the recovered input is x itself or x with alternatives 1 and 2 swapped.
    const auto x = random_canonical_input(3, 5);
    const auto r = recover(invariant_gj(x, 0));
    const auto sw = swap_pair(x, 1, 2);
    const double dx = std::max((r.vstar - x.vstar).cwiseAbs().maxCoeff(), (r.sigstar - x.sigstar).cwiseAbs().maxCoeff());
    const double ds = std::max((r.vstar - sw.vstar).cwiseAbs().maxCoeff(), (r.sigstar - sw.sigstar).cwiseAbs().maxCoeff());
    CHECK(std::min(dx, ds) < 1e-12);
    CHECK(on_manifold(r, 1e-9));
}

TEST_CASE("orbit comparison") {
    const auto x = random_canonical_input(5, 9);
    CHECK(orbit_equal(x, permute(x, std::vector<int>{0, 3, 1, 4, 2}), 0));
    CanonicalInput bumped = x;
    bumped.sigstar(1, 2) += 1e-3;
    bumped.sigstar(2, 1) += 1e-3;
    CHECK(!orbit_equal(x, bumped, 0));
    CHECK(!orbit_equal(x, swap_pair(x, 0, 3), 0));
    // A tied input still matches its relabellings through the exhaustive fallback.
    const auto y = swap_pair(x, 1, 2);
    CanonicalInput tie{5, 0.5 * (x.vstar + y.vstar), 0.5 * (x.sigstar + y.sigstar)};
    CHECK(orbit_equal(tie, permute(tie, std::vector<int>{0, 4, 2, 1, 3}), 0));
}

TEST_CASE("same orbit gives the same per-alternative encodings") {
    const auto w = init_weights(EmulatorConfig::preset(5), 13);
    const auto x = random_canonical_input(5, 21);
    const int j = 2;
    const auto y = permute(x, std::vector<int>{4, 3, 2, 0, 1});
    auto encode = [&](const CanonicalInput& in) {
        ad::Tape t;
        auto bw = bind(t, w, false);
        auto [v, s] = pack_inputs({in});
        ForwardTrace tr;
        forward(bw, t.constant(v), t.constant(s), 5, {}, &tr);
        const std::size_t width = tr.h_diag.shape()[1], wo = tr.h_off.shape()[1];
        std::vector<double> out;
        for (std::size_t c = 0; c < width; ++c) out.push_back(tr.h_diag.value()(j, c));
        for (std::size_t c = 0; c < wo; ++c) out.push_back(tr.h_off.value()(j, c));
        return out;
    };
    const auto a = encode(x), b = encode(y);
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    CHECK(worst < 1e-10);
}
