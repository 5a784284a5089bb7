#include <doctest.h>

#include <cmath>

#include "cemu/array.hpp"
#include "cemu/wishart.hpp"

using namespace cemu;

namespace {

// Midpoint rule over the free entries (s22, s12) with s22 = e^u and s12 = r sqrt(s22).
template <class F>
double integrate_d2(double df, F&& weight) {
    const int nu = 3000, nr = 400;
    const double ulo = -25.0, uhi = 12.0;
    const double du = (uhi - ulo) / nu, dr = 2.0 / nr;
    double acc = 0.0;
    for (int a = 0; a < nu; ++a) {
        const double s22 = std::exp(ulo + (a + 0.5) * du);
        for (int b = 0; b < nr; ++b) {
            const double r = -1.0 + (b + 0.5) * dr;
            Eigen::Matrix2d S;
            S << 1.0, r * std::sqrt(s22), r * std::sqrt(s22), s22;
            const double f = std::exp(scaled_wishart_log_density(S, df));
            acc += f * weight(S) * s22 * std::sqrt(s22) * du * dr;
        }
    }
    return acc;
}

}  // namespace

TEST_CASE("scaled Wishart draws are anchored and positive definite") {
    Rng rng(11);
    for (int d : {1, 2, 4}) {
        for (int i = 0; i < 2000; ++i) {
            const Eigen::MatrixXd S = sample_scaled_wishart(d, d + 11.0, rng);
            REQUIRE(S(0, 0) == 1.0);
            REQUIRE((S - S.transpose()).cwiseAbs().maxCoeff() == 0.0);
            Eigen::LLT<Eigen::MatrixXd> llt(S);
            REQUIRE(llt.info() == Eigen::Success);
        }
    }
}

TEST_CASE("Wishart mean is df times the scale") {
    Rng rng(3);
    Eigen::MatrixXd V(2, 2);
    V << 0.5, 0.1, 0.1, 0.3;
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(2, 2);
    const int n = 20000;
    for (int i = 0; i < n; ++i) mean += sample_wishart(V, 5.0, rng);
    mean /= n;
    CHECK((mean - 5.0 * V).cwiseAbs().maxCoeff() < 0.05);
    CHECK_THROWS_AS(sample_wishart(V, 1.0, rng), ContractViolation);
}

TEST_CASE("scaled Wishart density") {
    Eigen::MatrixXd one(1, 1);
    one << 1.0;
    CHECK(std::abs(scaled_wishart_log_density(one, 4.0)) < 1e-12);

    Eigen::Matrix2d indefinite;
    indefinite << 1.0, 2.0, 2.0, 1.0;
    CHECK(std::isinf(scaled_wishart_log_density(indefinite, 13.0)));

    for (double df : {6.0, 13.0}) {
        CAPTURE(df);
        const double mass = integrate_d2(df, [](const Eigen::Matrix2d&) { return 1.0; });
        CHECK(std::abs(mass - 1.0) < 0.01);
        // E[s22] from the density against the sampler.
        const double m22 = integrate_d2(df, [](const Eigen::Matrix2d& S) { return S(1, 1); }) / mass;
        Rng rng(static_cast<std::uint64_t>(df));
        double mc = 0.0;
        const int n = 40000;
        for (int i = 0; i < n; ++i) mc += sample_scaled_wishart(2, df, rng)(1, 1);
        mc /= n;
        CHECK(std::abs(m22 - mc) < 0.05 * m22);
    }
}
