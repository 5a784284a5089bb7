#include "cemu/choice.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace cemu {

namespace {

constexpr double kEulerGamma = 0.57721566490153286061;
constexpr double kGapRegularizer = 1e-12;
constexpr double kGhkClamp = 1e-12;
constexpr double kGhkJitter = 1e-10;

void check_symmetric(const Eigen::MatrixXd& s, const char* who) {
    if (s.rows() != s.cols()) throw ContractViolation(std::string(who) + ": matrix must be square");
    const double scale = 1.0 + (s.size() ? s.cwiseAbs().maxCoeff() : 0.0);
    if (s.size() && (s - s.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
        throw ContractViolation(std::string(who) + ": matrix is not symmetric");
    }
}

}  // namespace

std::string to_string(FamilyKind kind) {
    switch (kind) {
        case FamilyKind::gaussian: return "gaussian";
        case FamilyKind::gumbel: return "gumbel";
        case FamilyKind::student_t: return "student_t";
    }
    return "unknown";
}

ErrorFamily parse_family(const std::string& name, double nu) {
    if (name == "gaussian" || name == "probit") return ErrorFamily::gaussian();
    if (name == "gumbel") return ErrorFamily::gumbel();
    if (name == "student_t" || name == "t") {
        if (!(nu > 0)) throw ContractViolation("student_t requires nu > 0");
        return ErrorFamily::student_t(nu);
    }
    throw ContractViolation("unknown error family '" + name + "'");
}

ErrorSampler::ErrorSampler(ErrorFamily family, std::uint64_t seed)
    : family_(family), rng_(seed), uniform_(0.0, 1.0), student_(family.kind == FamilyKind::student_t ? family.nu : 1.0) {}

void ErrorSampler::draw(std::span<double> out) {
    switch (family_.kind) {
        case FamilyKind::gaussian:
            for (double& e : out) e = normal_(rng_);
            break;
        case FamilyKind::gumbel:
            for (double& e : out) {
                double u = 0.0;
                while (u <= 0.0) u = uniform_(rng_);
                e = -std::log(-std::log(u)) - kEulerGamma;
            }
            break;
        case FamilyKind::student_t:
            for (double& e : out) e = student_(rng_);
            break;
    }
}

Eigen::MatrixXd matrix_sqrt_psd(const Eigen::MatrixXd& sigma) {
    check_symmetric(sigma, "matrix_sqrt_psd");
    const Eigen::MatrixXd sym = 0.5 * (sigma + sigma.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    const double scale = 1.0 + (sym.size() ? sym.cwiseAbs().maxCoeff() : 0.0);
    if (sym.size() && es.eigenvalues().minCoeff() < -1e-8 * scale) {
        throw ContractViolation("matrix_sqrt_psd: matrix is not positive semidefinite");
    }
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd L = es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (L + L.transpose());
}

Eigen::MatrixXd matrix_sqrt_psd_vjp(const Eigen::MatrixXd& sigma, const Eigen::MatrixXd& grad_root) {
    const Eigen::MatrixXd sym = 0.5 * (sigma + sigma.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    const Eigen::MatrixXd& Q = es.eigenvectors();
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd G = 0.5 * (grad_root + grad_root.transpose());
    Eigen::MatrixXd inner = Q.transpose() * G * Q;
    for (Eigen::Index a = 0; a < inner.rows(); ++a)
        for (Eigen::Index b = 0; b < inner.cols(); ++b) inner(a, b) /= root[a] + root[b] + kGapRegularizer;
    Eigen::MatrixXd out = Q * inner * Q.transpose();
    return 0.5 * (out + out.transpose());
}

std::vector<std::uint64_t> simulate_choices(const ChoiceProblem& problem, const ErrorFamily& family, std::uint64_t R,
                                            std::uint64_t seed, const SimulateOptions& options) {
    if (R < 1) throw ContractViolation("simulate_choices: R must be at least 1");
    const int K = problem.K();
    if (!options.draw_permutation.empty() && static_cast<int>(options.draw_permutation.size()) != K) {
        throw ContractViolation("simulate_choices: permutation length must equal K");
    }
    const Eigen::MatrixXd L = matrix_sqrt_psd(problem.sigma);
    ErrorSampler sampler(family, seed);
    std::vector<double> raw(K), eps(K), u(K);
    std::vector<std::uint64_t> counts(K, 0);
    const auto& perm = options.draw_permutation;
    for (std::uint64_t r = 0; r < R; ++r) {
        sampler.draw(raw);
        if (perm.empty()) {
            eps = raw;
        } else {
            for (int i = 0; i < K; ++i) eps[i] = raw[perm[i]];
        }
        int best = 0;
        double best_u = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < K; ++i) {
            double s = problem.v[i];
            for (int j = 0; j < K; ++j) s += L(i, j) * eps[j];
            if (s > best_u) {
                best_u = s;
                best = i;
            }
        }
        ++counts[best];
    }
    return counts;
}

SoftTargets soft_relaxation_targets(const CanonicalInput& input, const ErrorFamily& family, std::uint64_t R, double tau,
                                    std::uint64_t seed) {
    if (!(tau > 0.0)) throw ContractViolation("soft_relaxation_targets: tau must be positive");
    if (R < 1) throw ContractViolation("soft_relaxation_targets: R must be at least 1");
    const int K = input.K;
    const Eigen::MatrixXd L = matrix_sqrt_psd(input.sigstar);
    ErrorSampler sampler(family, seed);

    // Pathwise accumulators: P_j, dP_j/dv_a and dP_j/dL_ab, each a sum over draws.
    std::vector<double> P(K, 0.0), dv(K * K, 0.0), dL(K * K * K, 0.0);
    std::vector<double> eps(K), s(K), w(K * K);
    for (std::uint64_t r = 0; r < R; ++r) {
        sampler.draw(eps);
        double m = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < K; ++a) {
            double u = input.vstar[a];
            for (int b = 0; b < K; ++b) u += L(a, b) * eps[b];
            s[a] = tau * u;
            m = std::max(m, s[a]);
        }
        double z = 0.0;
        for (int a = 0; a < K; ++a) {
            s[a] = std::exp(s[a] - m);
            z += s[a];
        }
        for (int a = 0; a < K; ++a) s[a] /= z;
        for (int j = 0; j < K; ++j) {
            P[j] += s[j];
            for (int a = 0; a < K; ++a) {
                const double g = tau * s[j] * ((a == j ? 1.0 : 0.0) - s[a]);
                w[j * K + a] = g;
                dv[j * K + a] += g;
            }
        }
        for (int j = 0; j < K; ++j)
            for (int a = 0; a < K; ++a) {
                const double g = w[j * K + a];
                double* row = &dL[(j * K + a) * K];
                for (int b = 0; b < K; ++b) row[b] += g * eps[b];
            }
    }

    SoftTargets out;
    out.logp.resize(K);
    out.J_v = Eigen::MatrixXd::Zero(K, K);
    out.J_S.assign(K, Eigen::MatrixXd::Zero(K, K));
    const double invR = 1.0 / static_cast<double>(R);
    for (int j = 0; j < K; ++j) {
        const double pj = P[j] * invR;
        out.logp[j] = std::log(pj);
        if (!(pj > 0.0)) continue;
        Eigen::MatrixXd gL(K, K);
        for (int a = 0; a < K; ++a) {
            out.J_v(j, a) = dv[j * K + a] * invR / pj;
            for (int b = 0; b < K; ++b) gL(a, b) = dL[(j * K + a) * K + b] * invR / pj;
        }
        out.J_S[j] = matrix_sqrt_psd_vjp(input.sigstar, gL);
    }
    return out;
}

std::vector<double> ghk_uniforms(std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> u(count);
    for (double& x : u) {
        do {
            x = unif(rng);
        } while (x <= 0.0);
    }
    return u;
}

ad::Var ghk_logprob(ad::Var v, ad::Var sigma, std::span<const int> chosen, std::size_t R,
                    std::span<const double> uniforms) {
    using ad::Var;
    const std::size_t n = chosen.size();
    if (n == 0) throw ContractViolation("ghk_logprob: no observations");
    if (v.size() % n != 0) throw ContractViolation("ghk_logprob: v size is not a multiple of n");
    const std::size_t K = v.size() / n;
    if (K < 2) throw ContractViolation("ghk_logprob: need at least two alternatives");
    if (sigma.size() != n * K * K) throw ContractViolation("ghk_logprob: sigma size mismatch");
    if (R < 1) throw ContractViolation("ghk_logprob: R must be at least 1");
    const std::size_t m = K - 1;
    if (uniforms.size() != n * R * m) throw ContractViolation("ghk_logprob: uniforms must hold n * R * (K-1) values");
    for (int c : chosen)
        if (c < 0 || static_cast<std::size_t>(c) >= K) throw ContractViolation("ghk_logprob: chosen index out of range");

    // Alternatives other than the chosen one, in ascending order.
    auto other = [&](std::size_t i, std::size_t a) -> std::size_t {
        const std::size_t c = static_cast<std::size_t>(chosen[i]);
        return a < c ? a : a + 1;
    };

    // Differenced covariance Omega = D Sigma D' and utilities w = v_c - v_k.
    const Array& sv = sigma.value();
    std::vector<double> omega_val(n * m * m);
    std::vector<std::vector<Var>> omega(m, std::vector<Var>(m));
    std::vector<std::uint32_t> i1(n), i2(n), i3(n), i4(n);
    Var sflat = reshape(sigma, {n * K * K});
    Var vflat = reshape(v, {n * K});
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t b = 0; b <= a; ++b) {
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t c = static_cast<std::size_t>(chosen[i]);
                const std::size_t ka = other(i, a), kb = other(i, b), base = i * K * K;
                i1[i] = static_cast<std::uint32_t>(base + ka * K + kb);
                i2[i] = static_cast<std::uint32_t>(base + ka * K + c);
                i3[i] = static_cast<std::uint32_t>(base + c * K + kb);
                i4[i] = static_cast<std::uint32_t>(base + c * K + c);
                omega_val[(i * m + a) * m + b] = sv[i1[i]] - sv[i2[i]] - sv[i3[i]] + sv[i4[i]];
            }
            omega[a][b] = gather(sflat, i1) - gather(sflat, i2) - gather(sflat, i3) + gather(sflat, i4);
        }
    }

    // Decide per-observation jitter from a value-only factorisation.
    Array jitter({n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (double jit : {0.0, kGhkJitter}) {
            Eigen::MatrixXd om(m, m);
            for (std::size_t a = 0; a < m; ++a)
                for (std::size_t b = 0; b <= a; ++b) om(a, b) = om(b, a) = omega_val[(i * m + a) * m + b];
            om.diagonal().array() += jit;
            Eigen::LLT<Eigen::MatrixXd> llt(om);
            if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().diagonal().minCoeff() > 0.0) {
                jitter[i] = jit;
                break;
            }
            if (jit > 0.0) {
                throw SingularCovarianceError("ghk_logprob: differenced covariance is not positive definite (obs " +
                                              std::to_string(i) + ")");
            }
        }
    }
    ad::Tape& tape = v.tape();
    Var jit = tape.constant(jitter);

    // Vectorised Cholesky across observations.
    std::vector<std::vector<Var>> C(m, std::vector<Var>(m));
    for (std::size_t a = 0; a < m; ++a) {
        Var d = omega[a][a] + jit;
        for (std::size_t b = 0; b < a; ++b) d = d - square(C[a][b]);
        C[a][a] = sqrt(maximum(d, 1e-300));
        for (std::size_t r = a + 1; r < m; ++r) {
            Var e = omega[r][a];
            for (std::size_t b = 0; b < a; ++b) e = e - C[r][b] * C[a][b];
            C[r][a] = e / C[a][a];
        }
    }

    std::vector<std::uint32_t> choose_idx(n), other_idx(n);
    std::vector<Var> w(m);
    for (std::size_t a = 0; a < m; ++a) {
        for (std::size_t i = 0; i < n; ++i) {
            choose_idx[i] = static_cast<std::uint32_t>(i * K + static_cast<std::size_t>(chosen[i]));
            other_idx[i] = static_cast<std::uint32_t>(i * K + other(i, a));
        }
        w[a] = gather(vflat, choose_idx) - gather(vflat, other_idx);
    }

    // Expand per-observation quantities over the R draws.
    std::vector<std::uint32_t> rep(n * R);
    for (std::size_t i = 0; i < n * R; ++i) rep[i] = static_cast<std::uint32_t>(i / R);
    auto expand = [&](Var x) { return gather_rows(x, rep); };

    std::vector<Var> z;
    Var prod;
    for (std::size_t a = 0; a < m; ++a) {
        Var num = expand(w[a]);
        for (std::size_t b = 0; b < a; ++b) num = num - expand(C[a][b]) * z[b];
        Var t = num / expand(C[a][a]);
        Var p = clamp(normal_cdf(t), kGhkClamp, 1.0 - kGhkClamp);
        prod = a == 0 ? p : prod * p;
        if (a + 1 < m) {
            Array u({n * R});
            for (std::size_t k = 0; k < n * R; ++k) u[k] = uniforms[k * m + a];
            z.push_back(normal_quantile(clamp(mul_const(p, u), kGhkClamp, 1.0 - kGhkClamp)));
        }
    }
    return log(segment_mean(prod, rep, n));
}

double ghk_logprob(const ChoiceProblem& problem, int chosen, std::size_t R, std::span<const double> uniforms) {
    const int K = problem.K();
    ad::Tape tape;
    ad::Var v = tape.constant(Array({1, static_cast<std::size_t>(K)}, std::vector<double>(problem.v.data(), problem.v.data() + K)));
    Array s({1, static_cast<std::size_t>(K * K)});
    for (int a = 0; a < K; ++a)
        for (int b = 0; b < K; ++b) s[a * K + b] = problem.sigma(a, b);
    ad::Var sig = tape.constant(std::move(s));
    const int c[1] = {chosen};
    return ghk_logprob(v, sig, c, R, uniforms).value()[0];
}

}  // namespace cemu
