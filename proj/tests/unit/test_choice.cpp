#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "cemu/choice.hpp"

using namespace cemu;

namespace {

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

Eigen::MatrixXd random_psd(int K, std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Eigen::MatrixXd A(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) A(i, j) = n(rng);
    return A * A.transpose() / K + 0.2 * Eigen::MatrixXd::Identity(K, K);
}

CanonicalInput random_canonical(int K, std::mt19937_64& rng) {
    std::normal_distribution<double> n;
    Eigen::VectorXd v(K);
    for (int i = 0; i < K; ++i) v[i] = n(rng);
    return canonicalize(v, random_psd(K, rng));
}

}  // namespace

TEST_CASE("matrix square root") {
    CHECK((matrix_sqrt_psd(Eigen::MatrixXd::Identity(3, 3)) - Eigen::MatrixXd::Identity(3, 3)).norm() < 1e-14);
    Eigen::MatrixXd d = Eigen::Vector3d(4, 1, 0).asDiagonal();
    const Eigen::MatrixXd r = matrix_sqrt_psd(d);
    CHECK((r - Eigen::MatrixXd(Eigen::Vector3d(2, 1, 0).asDiagonal())).cwiseAbs().maxCoeff() < 1e-14);
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        const Eigen::MatrixXd S = random_psd(4, rng);
        const Eigen::MatrixXd L = matrix_sqrt_psd(S);
        CHECK((L * L - S).cwiseAbs().maxCoeff() < 1e-8 * (1 + S.cwiseAbs().maxCoeff()));
        CHECK((L - L.transpose()).cwiseAbs().maxCoeff() == 0.0);
    }
    Eigen::MatrixXd asym = Eigen::MatrixXd::Identity(2, 2);
    asym(0, 1) = 0.1;
    CHECK_THROWS_AS(matrix_sqrt_psd(asym), ContractViolation);
}

TEST_CASE("square root pullback matches finite differences") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n;
    for (int rep = 0; rep < 10; ++rep) {
        const Eigen::MatrixXd S = random_psd(3, rng);
        Eigen::MatrixXd G(3, 3), E(3, 3);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) G(i, j) = n(rng);
        for (int i = 0; i < 3; ++i)
            for (int j = i; j < 3; ++j) E(i, j) = E(j, i) = n(rng);
        const double h = 1e-6;
        const double fd = ((matrix_sqrt_psd(S + h * E) - matrix_sqrt_psd(S - h * E)).cwiseProduct(G)).sum() / (2 * h);
        const double an = matrix_sqrt_psd_vjp(S, G).cwiseProduct(E).sum();
        CHECK(std::abs(an - fd) < 1e-6 * (1 + std::abs(fd)));
    }
}

TEST_CASE("simulated frequencies") {
    SUBCASE("symmetric case") {
        const std::uint64_t R = 1000000;
        ChoiceProblem p{Eigen::VectorXd::Zero(3), Eigen::MatrixXd::Identity(3, 3)};
        const auto c = simulate_choices(p, ErrorFamily::gaussian(), R, 7);
        CHECK(std::accumulate(c.begin(), c.end(), std::uint64_t{0}) == R);
        const double tol = 3 * std::sqrt((1.0 / 3) * (2.0 / 3) / R);
        for (auto k : c) CHECK(std::abs(k / double(R) - 1.0 / 3) < tol);
    }
    SUBCASE("binary against the normal cdf") {
        ChoiceProblem p{Eigen::Vector2d(1, 0), Eigen::MatrixXd::Identity(2, 2)};
        const auto c = simulate_choices(p, ErrorFamily::gaussian(), 1000000, 8);
        CHECK(std::abs(c[0] / 1e6 - Phi(1 / std::sqrt(2.0))) < 0.002);
    }
    SUBCASE("no noise") {
        ChoiceProblem p{Eigen::Vector2d(1, 0), Eigen::MatrixXd::Zero(2, 2)};
        const auto c = simulate_choices(p, ErrorFamily::gaussian(), 100, 1);
        CHECK(c[0] == 100);
    }
}

TEST_CASE("simulation invariances under common seeds") {
    std::mt19937_64 rng(4);
    for (auto fam : {ErrorFamily::gaussian(), ErrorFamily::gumbel(), ErrorFamily::student_t(5)}) {
        const int K = 4;
        ChoiceProblem p{Eigen::Vector4d(0.3, -0.2, 0.5, 0.0), random_psd(K, rng)};
        const auto base = simulate_choices(p, fam, 20000, 99);
        ChoiceProblem loc{(p.v.array() + 3.0).matrix(), p.sigma};
        CHECK(simulate_choices(loc, fam, 20000, 99) == base);
        // Powers of two keep the scaled arithmetic exact.
        ChoiceProblem sc{4.0 * p.v, 16.0 * p.sigma};
        CHECK(simulate_choices(sc, fam, 20000, 99) == base);

        const std::vector<int> perm{2, 0, 3, 1};
        ChoiceProblem pp{Eigen::VectorXd(K), Eigen::MatrixXd(K, K)};
        for (int i = 0; i < K; ++i) {
            pp.v[i] = p.v[perm[i]];
            for (int j = 0; j < K; ++j) pp.sigma(i, j) = p.sigma(perm[i], perm[j]);
        }
        SimulateOptions opt;
        opt.draw_permutation = perm;
        const auto permuted = simulate_choices(pp, fam, 20000, 99, opt);
        // The permuted problem's square root is the permuted root only up to rounding, so allow a
        // handful of near-tie flips.
        for (int i = 0; i < K; ++i) CHECK(std::abs(double(permuted[i]) - double(base[perm[i]])) <= 3.0);
    }
}

TEST_CASE("gumbel errors are centred") {
    ErrorSampler s(ErrorFamily::gumbel(), 3);
    std::vector<double> e(4);
    double m = 0;
    const int N = 200000;
    for (int i = 0; i < N; ++i) {
        s.draw(e);
        for (double x : e) m += x;
    }
    CHECK(std::abs(m / (4.0 * N)) < 0.01);
}

TEST_CASE("soft relaxation targets") {
    SUBCASE("symmetric input") {
        const int K = 3;
        CanonicalInput x{K, Eigen::VectorXd::Zero(K), K / (K - 1.0) * centering_matrix(K)};
        const std::uint64_t R = 100000;
        const auto t = soft_relaxation_targets(x, ErrorFamily::gaussian(), R, 3.0, 5);
        for (int j = 0; j < K; ++j) CHECK(std::abs(t.logp[j] + std::log(3.0)) < 3.0 / std::sqrt(double(R)));
    }
    SUBCASE("J_v rows sum to zero and match fixed-draw finite differences") {
        std::mt19937_64 rng(6);
        for (int rep = 0; rep < 5; ++rep) {
            const auto x = random_canonical(3, rng);
            const std::uint64_t R = 20000;
            const auto t = soft_relaxation_targets(x, ErrorFamily::gaussian(), R, 3.0, 77);
            for (int j = 0; j < 3; ++j) CHECK(std::abs(t.J_v.row(j).sum()) < 1e-8);
            const double h = 1e-5;
            for (int a = 0; a < 3; ++a) {
                CanonicalInput xp = x, xm = x;
                xp.vstar[a] += h;
                xm.vstar[a] -= h;
                const auto tp = soft_relaxation_targets(xp, ErrorFamily::gaussian(), R, 3.0, 77);
                const auto tm = soft_relaxation_targets(xm, ErrorFamily::gaussian(), R, 3.0, 77);
                for (int j = 0; j < 3; ++j) {
                    const double fd = (tp.logp[j] - tm.logp[j]) / (2 * h);
                    CHECK(std::abs(t.J_v(j, a) - fd) < 1e-4 * (1 + std::abs(fd)));
                }
            }
        }
    }
    SUBCASE("J_S matches fixed-draw finite differences along symmetric perturbations") {
        std::mt19937_64 rng(7);
        std::normal_distribution<double> n;
        for (int rep = 0; rep < 5; ++rep) {
            const auto x = random_canonical(3, rng);
            Eigen::MatrixXd E(3, 3);
            for (int i = 0; i < 3; ++i)
                for (int j = i; j < 3; ++j) E(i, j) = E(j, i) = n(rng);
            // Keep the perturbation on the centred subspace so the null direction stays null.
            const Eigen::MatrixXd M = centering_matrix(3);
            E = M * E * M;
            const std::uint64_t R = 20000;
            const auto t = soft_relaxation_targets(x, ErrorFamily::gaussian(), R, 3.0, 78);
            const double h = 1e-5;
            CanonicalInput xp = x, xm = x;
            xp.sigstar += h * E;
            xm.sigstar -= h * E;
            const auto tp = soft_relaxation_targets(xp, ErrorFamily::gaussian(), R, 3.0, 78);
            const auto tm = soft_relaxation_targets(xm, ErrorFamily::gaussian(), R, 3.0, 78);
            for (int j = 0; j < 3; ++j) {
                const double fd = (tp.logp[j] - tm.logp[j]) / (2 * h);
                const double an = t.J_S[j].cwiseProduct(E).sum();
                CHECK(std::abs(an - fd) < 1e-4 * (1 + std::abs(fd)));
                CHECK((t.J_S[j] - t.J_S[j].transpose()).cwiseAbs().maxCoeff() < 1e-12);
            }
        }
    }
    CanonicalInput x{2, Eigen::Vector2d(0.5, -0.5), Eigen::MatrixXd::Identity(2, 2)};
    CHECK_THROWS_AS(soft_relaxation_targets(x, ErrorFamily::gaussian(), 10, 0.0, 1), ContractViolation);
}

TEST_CASE("GHK") {
    SUBCASE("binary case is exact") {
        ChoiceProblem p{Eigen::Vector2d(1, 0), Eigen::MatrixXd::Identity(2, 2)};
        const auto u = ghk_uniforms(10, 1);
        CHECK(std::abs(std::exp(ghk_logprob(p, 0, 10, u)) - Phi(1 / std::sqrt(2.0))) < 1e-12);
        CHECK(std::abs(std::exp(ghk_logprob(p, 1, 10, u)) - Phi(-1 / std::sqrt(2.0))) < 1e-12);
    }
    SUBCASE("exchangeable K=3") {
        Eigen::MatrixXd S = 0.5 * Eigen::MatrixXd::Identity(3, 3) + 0.5 * Eigen::MatrixXd::Ones(3, 3);
        ChoiceProblem p{Eigen::VectorXd::Zero(3), S};
        const auto u = ghk_uniforms(1000 * 2, 2);
        for (int c = 0; c < 3; ++c) CHECK(std::abs(std::exp(ghk_logprob(p, c, 1000, u)) - 1.0 / 3) < 0.01);
    }
    SUBCASE("random K=3 against simulated frequencies") {
        std::mt19937_64 rng(8);
        std::normal_distribution<double> n;
        ChoiceProblem p{Eigen::Vector3d(n(rng), n(rng), n(rng)), random_psd(3, rng)};
        const auto counts = simulate_choices(p, ErrorFamily::gaussian(), 1000000, 9);
        const auto u = ghk_uniforms(100000 * 2, 10);
        for (int c = 0; c < 3; ++c) CHECK(std::abs(std::exp(ghk_logprob(p, c, 100000, u)) - counts[c] / 1e6) < 3e-3);
    }
    SUBCASE("deterministic and differentiable with fixed uniforms") {
        const int K = 4, n = 3;
        const std::size_t R = 50;
        std::mt19937_64 rng(12);
        std::normal_distribution<double> nd;
        Array v({n, K}), s({n, K * K});
        for (int i = 0; i < n; ++i) {
            const Eigen::MatrixXd S = random_psd(K, rng);
            for (int a = 0; a < K; ++a) {
                v(i, a) = nd(rng);
                for (int b = 0; b < K; ++b) s(i, a * K + b) = S(a, b);
            }
        }
        const std::vector<int> chosen{0, 3, 2};
        const auto u = ghk_uniforms(n * R * (K - 1), 13);
        auto total = [&](const Array& vv, const Array& ss) {
            ad::Tape t;
            return sum(ghk_logprob(t.constant(vv), t.constant(ss), chosen, R, u)).item();
        };
        CHECK(total(v, s) == total(v, s));
        ad::Tape t;
        auto vv = t.variable(v);
        auto ss = t.variable(s);
        t.backward(sum(ghk_logprob(vv, ss, chosen, R, u)));
        const Array gv = t.grad(vv), gs = t.grad(ss);
        const double h = 1e-6;
        for (std::size_t i = 0; i < v.size(); ++i) {
            Array vp = v, vm = v;
            vp[i] += h;
            vm[i] -= h;
            const double fd = (total(vp, s) - total(vm, s)) / (2 * h);
            CHECK(std::abs(gv[i] - fd) / (1 + std::abs(gv[i])) < 1e-5);
        }
        for (int i = 0; i < n; ++i)
            for (int a = 0; a < K; ++a)
                for (int b = a; b < K; ++b) {
                    // Symmetric perturbation of entry (a, b).
                    Array sp = s, sm = s;
                    sp(i, a * K + b) += h;
                    sm(i, a * K + b) -= h;
                    if (a != b) {
                        sp(i, b * K + a) += h;
                        sm(i, b * K + a) -= h;
                    }
                    const double fd = (total(v, sp) - total(v, sm)) / (2 * h);
                    const double an = gs(i, a * K + b) + (a != b ? gs(i, b * K + a) : 0.0);
                    CHECK(std::abs(an - fd) / (1 + std::abs(an)) < 1e-5);
                }
    }
    SUBCASE("singular differenced covariance") {
        // Indefinite input: the differenced matrix has a negative eigenvalue that jitter cannot fix.
        ChoiceProblem p{Eigen::Vector3d(0, 0, 0), Eigen::MatrixXd(Eigen::Vector3d(1, -1, 1).asDiagonal())};
        const auto u = ghk_uniforms(20, 1);
        CHECK_THROWS_AS(ghk_logprob(p, 0, 10, u), SingularCovarianceError);
    }
}
