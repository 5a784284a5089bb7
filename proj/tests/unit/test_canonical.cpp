#include <doctest.h>

#include <cmath>
#include <random>

#include "cemu/canonical.hpp"

using namespace cemu;

namespace {

Eigen::MatrixXd random_psd(int K, std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Eigen::MatrixXd A(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) A(i, j) = n(rng);
    return A * A.transpose() / K;
}

Eigen::VectorXd random_vec(int K, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 2.0);
    Eigen::VectorXd v(K);
    for (int i = 0; i < K; ++i) v[i] = n(rng);
    return v;
}

// Reference projection written out with explicit loops.
CanonicalInput reference_canonicalize(const Eigen::VectorXd& v, const Eigen::MatrixXd& S) {
    const int K = static_cast<int>(v.size());
    Eigen::MatrixXd M(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) M(i, j) = (i == j ? 1.0 : 0.0) - 1.0 / K;
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j)
            for (int a = 0; a < K; ++a)
                for (int b = 0; b < K; ++b) C(i, j) += M(i, a) * S(a, b) * M(b, j);
    double tr = 0;
    for (int i = 0; i < K; ++i) tr += C(i, i);
    CanonicalInput out{K, std::sqrt(K / tr) * (M * v), (K / tr) * C};
    return out;
}

}  // namespace

TEST_CASE("canonicalize worked example") {
    Eigen::VectorXd v(3);
    v << 1, 2, 3;
    const auto x = canonicalize(v, Eigen::MatrixXd::Identity(3, 3));
    CHECK(x.vstar[0] == doctest::Approx(-std::sqrt(1.5)).epsilon(1e-14));
    CHECK(std::abs(x.vstar[1]) < 1e-14);
    CHECK(x.vstar[2] == doctest::Approx(std::sqrt(1.5)).epsilon(1e-14));
    CHECK((x.sigstar - 1.5 * centering_matrix(3)).cwiseAbs().maxCoeff() < 1e-14);
    const auto ref = reference_canonicalize(v, Eigen::MatrixXd::Identity(3, 3));
    CHECK((ref.sigstar - x.sigstar).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("canonicalize matches the reference, is idempotent and lands on the manifold") {
    std::mt19937_64 rng(5);
    for (int K : {2, 3, 5, 8}) {
        for (int rep = 0; rep < 20; ++rep) {
            const Eigen::VectorXd v = random_vec(K, rng);
            const Eigen::MatrixXd S = random_psd(K, rng);
            const auto x = canonicalize(v, S);
            const auto r = reference_canonicalize(v, S);
            CHECK((x.vstar - r.vstar).cwiseAbs().maxCoeff() < 1e-12);
            CHECK((x.sigstar - r.sigstar).cwiseAbs().maxCoeff() < 1e-12);
            CHECK(on_manifold(x));
            const auto y = canonicalize(x.vstar, x.sigstar);
            CHECK((y.vstar - x.vstar).cwiseAbs().maxCoeff() < 1e-12);
            CHECK((y.sigstar - x.sigstar).cwiseAbs().maxCoeff() < 1e-12);
        }
    }
}

TEST_CASE("degenerate scale is rejected") {
    Eigen::VectorXd v(3);
    v << 1, 0, -1;
    CHECK_THROWS_AS(canonicalize(v, Eigen::MatrixXd::Ones(3, 3)), DegenerateChoiceError);
    CHECK_THROWS_AS(canonicalize(v, Eigen::MatrixXd::Zero(3, 3)), DegenerateChoiceError);
}

TEST_CASE("location, scale and permutation commute with the projection") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> cdist(-10, 10), adist(0.1, 10);
    for (int rep = 0; rep < 50; ++rep) {
        const int K = 3 + rep % 4;
        const Eigen::VectorXd v = random_vec(K, rng);
        const Eigen::MatrixXd S = random_psd(K, rng);
        const auto x = canonicalize(v, S);
        const double c = cdist(rng), a = adist(rng);
        const auto xl = canonicalize((v.array() + c).matrix(), S);
        const auto xs = canonicalize(a * v, a * a * S);
        CHECK((xl.vstar - x.vstar).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((xs.vstar - x.vstar).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((xs.sigstar - x.sigstar).cwiseAbs().maxCoeff() < 1e-10);

        std::vector<int> perm(K);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Eigen::VectorXd pv(K);
        Eigen::MatrixXd pS(K, K);
        for (int i = 0; i < K; ++i) {
            pv[i] = v[perm[i]];
            for (int j = 0; j < K; ++j) pS(i, j) = S(perm[i], perm[j]);
        }
        const auto xp = canonicalize(pv, pS);
        const auto px = permute(x, perm);
        CHECK((xp.vstar - px.vstar).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((xp.sigstar - px.sigstar).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("tangent directions satisfy the constraints") {
    for (int K : {2, 3, 5, 10}) {
        for (std::uint64_t s = 0; s < 20; ++s) {
            const auto d = sample_tangent_direction(K, s);
            CHECK(std::abs(d.d_v.sum()) < 1e-12);
            CHECK((d.D_S * Eigen::VectorXd::Ones(K)).cwiseAbs().maxCoeff() < 1e-12);
            CHECK(std::abs(d.D_S.trace()) < 1e-12);
            CHECK(std::abs(direction_norm(d) - 1.0) < 1e-12);
        }
    }
    const auto a = sample_tangent_direction(3, 1), b = sample_tangent_direction(3, 2);
    CHECK((a.d_v - b.d_v).norm() + (a.D_S - b.D_S).norm() > 0);
}

TEST_CASE("utility part of tangent directions has covariance proportional to M") {
    const int K = 4;
    Eigen::MatrixXd C = Eigen::MatrixXd::Zero(K, K);
    const int N = 10000;
    for (int s = 0; s < N; ++s) {
        const auto d = sample_tangent_direction(K, static_cast<std::uint64_t>(s));
        C += d.d_v * d.d_v.transpose();
    }
    C /= N;
    const double diag = C.diagonal().mean();
    const Eigen::MatrixXd target = diag * (K / (K - 1.0)) * centering_matrix(K);
    CHECK((C - target).cwiseAbs().maxCoeff() < 0.1 * diag);
    double off = 0;
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j)
            if (i != j) off += C(i, j);
    off /= K * (K - 1);
    CHECK(off / diag == doctest::Approx(-1.0 / (K - 1)).epsilon(0.1));
}

TEST_CASE("batched tape canonicalisation agrees with the value version") {
    std::mt19937_64 rng(21);
    const int K = 4, n = 3;
    Array v({n, K}), s({n, K * K});
    std::vector<CanonicalInput> ref;
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd vv = random_vec(K, rng);
        const Eigen::MatrixXd SS = random_psd(K, rng);
        for (int a = 0; a < K; ++a) {
            v(i, a) = vv[a];
            for (int b = 0; b < K; ++b) s(i, a * K + b) = SS(a, b);
        }
        ref.push_back(canonicalize(vv, SS));
    }
    ad::Tape t;
    auto out = canonicalize(t.constant(v), t.constant(s), K);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < K; ++a) {
            CHECK(std::abs(out.vstar.value()(i, a) - ref[i].vstar[a]) < 1e-12);
            for (int b = 0; b < K; ++b) CHECK(std::abs(out.sigstar.value()(i, a * K + b) - ref[i].sigstar(a, b)) < 1e-12);
        }
}
