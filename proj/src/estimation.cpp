#include "cemu/estimation.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <numeric>

#include "cemu/canonical.hpp"
#include "cemu/parallel.hpp"
#include "cemu/random.hpp"
#include "cemu/wishart.hpp"

namespace cemu {

namespace {

constexpr double kBarrierShift = 8.0;
constexpr double kLogPsiPriorSd = 0.1;
constexpr double kGammaPriorSd = 0.2;

double wishart_df(int K) { return K + 10.0; }

void check_theta(const Eigen::VectorXd& theta, const ModelSpec& spec) {
    if (static_cast<std::size_t>(theta.size()) != theta_layout(spec).total()) {
        throw ContractViolation("theta has " + std::to_string(theta.size()) + " entries, the model needs " +
                                std::to_string(theta_layout(spec).total()));
    }
}

// Gradient of the log scaled-Wishart density with respect to the covariance parameters.
Eigen::VectorXd dense_prior_grad(const Eigen::VectorXd& theta, const ModelSpec& spec) {
    const CovarianceMap cm = covariance_from_theta(theta, spec);
    const int d = spec.K - 1;
    const Eigen::MatrixXd S = cm.sigma.topLeftCorner(d, d);
    const double df = wishart_df(spec.K);
    const double s = df * d / 2.0;
    const Eigen::MatrixXd G = (df - d - 1.0) / 2.0 * S.inverse() -
                              (s / S.trace()) * Eigen::MatrixXd::Identity(d, d);
    Eigen::VectorXd g(cm.d_sigma.size());
    for (std::size_t c = 0; c < cm.d_sigma.size(); ++c) {
        g[static_cast<Eigen::Index>(c)] = G.cwiseProduct(cm.d_sigma[c].topLeftCorner(d, d)).sum();
    }
    return g;
}

double normal_logpdf(double x, double sd) {
    return -0.5 * std::log(2.0 * M_PI * sd * sd) - x * x / (2.0 * sd * sd);
}

}  // namespace

std::string to_string(SigmaParam s) { return s == SigmaParam::dense_cholesky ? "dense" : "factor"; }
std::string to_string(Dgp d) { return d == Dgp::probit ? "probit" : "emulator"; }

SigmaParam parse_sigma_param(const std::string& s) {
    if (s == "dense" || s == "dense_cholesky") return SigmaParam::dense_cholesky;
    if (s == "factor" || s == "one_factor") return SigmaParam::one_factor;
    throw ContractViolation("unknown covariance specification '" + s + "'");
}

Dgp parse_dgp(const std::string& s) {
    if (s == "probit") return Dgp::probit;
    if (s == "emulator" || s == "emulator_rum") return Dgp::emulator_rum;
    throw ContractViolation("unknown data-generating process '" + s + "'");
}

std::string Backend::label() const {
    return kind == BackendKind::emulator ? "emulator" : "ghk(" + std::to_string(R) + ")";
}

std::string to_string(FitStatus s) {
    switch (s) {
        case FitStatus::converged: return "converged";
        case FitStatus::max_iterations: return "max_iterations";
        case FitStatus::stalled: return "stalled";
        case FitStatus::failed: return "failed";
    }
    return "?";
}

ThetaLayout theta_layout(const ModelSpec& spec) {
    if (spec.K < 2) throw ContractViolation("model needs K >= 2");
    if (spec.p < 1) throw ContractViolation("model needs at least one covariate");
    const std::size_t k = static_cast<std::size_t>(spec.K);
    ThetaLayout l;
    l.beta = static_cast<std::size_t>(spec.p);
    l.log_scale = k - 2;
    l.other = spec.sigma_param == SigmaParam::dense_cholesky ? (k - 1) * (k - 2) / 2 : k - 2;
    return l;
}

std::vector<std::string> theta_names(const ModelSpec& spec) {
    const ThetaLayout l = theta_layout(spec);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < l.beta; ++i) out.push_back("beta" + std::to_string(i + 1));
    const bool dense = spec.sigma_param == SigmaParam::dense_cholesky;
    for (int j = 2; j < spec.K; ++j) out.push_back(dense ? "logL_" + std::to_string(j) + "_" + std::to_string(j) : "logPsi_" + std::to_string(j));
    if (dense) {
        for (int j = 2; j < spec.K; ++j)
            for (int k = 1; k < j; ++k) out.push_back("L_" + std::to_string(j) + "_" + std::to_string(k));
    } else {
        for (int j = 2; j < spec.K; ++j) out.push_back("gamma_" + std::to_string(j));
    }
    return out;
}

void validate(const ChoiceDataset& data, const ModelSpec& spec) {
    if (data.K != spec.K || data.p != spec.p) throw ContractViolation("dataset K/p do not match the model");
    if (data.X.size() != data.y.size()) throw ContractViolation("dataset has mismatched y and X");
    for (std::size_t i = 0; i < data.n(); ++i) {
        if (data.y[i] < 0 || data.y[i] >= data.K) throw ContractViolation("choice out of range at observation " + std::to_string(i));
        if (data.X[i].rows() != data.K - 1 || data.X[i].cols() != data.p || !data.X[i].allFinite()) {
            throw ContractViolation("bad covariates at observation " + std::to_string(i));
        }
    }
}

CovarianceMap covariance_from_theta(const Eigen::VectorXd& theta, const ModelSpec& spec) {
    check_theta(theta, spec);
    const ThetaLayout l = theta_layout(spec);
    const int K = spec.K, d = K - 1;
    const auto at = [&](std::size_t i) { return theta[static_cast<Eigen::Index>(i)]; };
    Eigen::MatrixXd up;
    std::vector<Eigen::MatrixXd> dup;
    if (spec.sigma_param == SigmaParam::dense_cholesky) {
        Eigen::MatrixXd L = Eigen::MatrixXd::Identity(d, d);
        std::size_t idx = l.beta;
        for (int j = 1; j < d; ++j) L(j, j) = std::exp(at(idx++));
        for (int j = 1; j < d; ++j)
            for (int k = 0; k < j; ++k) L(j, k) = at(idx++);
        up = L * L.transpose();
        up = 0.5 * (up + up.transpose()).eval();
        up(0, 0) = 1.0;
        auto dS = [&](int a, int b, double c) {
            Eigen::MatrixXd E = Eigen::MatrixXd::Zero(d, d);
            E.row(a) = c * L.col(b).transpose();
            return Eigen::MatrixXd(E + E.transpose());
        };
        for (int j = 1; j < d; ++j) dup.push_back(dS(j, j, L(j, j)));
        for (int j = 1; j < d; ++j)
            for (int k = 0; k < j; ++k) dup.push_back(dS(j, k, 1.0));
    } else {
        Eigen::VectorXd psi = Eigen::VectorXd::Zero(d), gamma = Eigen::VectorXd::Ones(d);
        for (int j = 1; j < d; ++j) {
            psi[j] = std::exp(at(l.beta + static_cast<std::size_t>(j - 1)));
            gamma[j] = at(l.beta + l.log_scale + static_cast<std::size_t>(j - 1));
        }
        up = Eigen::MatrixXd(psi.asDiagonal()) + gamma * gamma.transpose();
        for (int j = 1; j < d; ++j) {
            Eigen::MatrixXd E = Eigen::MatrixXd::Zero(d, d);
            E(j, j) = psi[j];
            dup.push_back(E);
        }
        for (int j = 1; j < d; ++j) {
            Eigen::MatrixXd E = Eigen::MatrixXd::Zero(d, d);
            E.row(j) = gamma.transpose();
            dup.push_back(E + E.transpose());
        }
    }
    CovarianceMap out;
    out.sigma = Eigen::MatrixXd::Zero(K, K);
    out.sigma.topLeftCorner(d, d) = up;
    for (auto& m : dup) {
        Eigen::MatrixXd full = Eigen::MatrixXd::Zero(K, K);
        full.topLeftCorner(d, d) = m;
        out.d_sigma.push_back(std::move(full));
    }
    return out;
}

Eigen::VectorXd dense_params_from_sigma(const Eigen::MatrixXd& upper) {
    const auto d = upper.rows();
    if (upper.cols() != d || d < 1) throw ContractViolation("dense_params_from_sigma: square block required");
    Eigen::LLT<Eigen::MatrixXd> llt(upper);
    if (llt.info() != Eigen::Success) throw ContractViolation("dense_params_from_sigma: block is not positive definite");
    const Eigen::MatrixXd L = llt.matrixL();
    std::vector<double> out;
    for (Eigen::Index j = 1; j < d; ++j) out.push_back(std::log(L(j, j) / L(0, 0)));
    for (Eigen::Index j = 1; j < d; ++j)
        for (Eigen::Index k = 0; k < j; ++k) out.push_back(L(j, k) / L(0, 0));
    return Eigen::Map<Eigen::VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
}

ChoiceProblem theta_to_problem(const Eigen::VectorXd& theta, const ModelSpec& spec, const Eigen::MatrixXd& X) {
    check_theta(theta, spec);
    if (X.rows() != spec.K - 1 || X.cols() != spec.p) throw ContractViolation("theta_to_problem: X must be (K-1) x p");
    ChoiceProblem prob;
    prob.v = Eigen::VectorXd::Zero(spec.K);
    prob.v.head(spec.K - 1) = X * theta.head(spec.p);
    prob.sigma = covariance_from_theta(theta, spec).sigma;
    return prob;
}

Penalty penalty(const Eigen::VectorXd& theta, const ModelSpec& spec, bool with_hessian) {
    check_theta(theta, spec);
    const ThetaLayout l = theta_layout(spec);
    const auto q = static_cast<Eigen::Index>(l.total());
    Penalty pen;
    pen.grad = Eigen::VectorXd::Zero(q);
    if (with_hessian) pen.hessian = Eigen::MatrixXd::Zero(q, q);
    for (std::size_t i = 0; i < l.log_scale; ++i) {
        const auto k = static_cast<Eigen::Index>(l.beta + i);
        const double eta = theta[k];
        if (!(eta > -kBarrierShift)) {
            throw BarrierDomainError("log-scale parameter " + std::to_string(eta) + " outside the barrier domain");
        }
        pen.value += std::log(eta + kBarrierShift);
        pen.grad[k] += 1.0 / (eta + kBarrierShift);
        if (with_hessian) pen.hessian(k, k) -= 1.0 / ((eta + kBarrierShift) * (eta + kBarrierShift));
    }
    const auto cov0 = static_cast<Eigen::Index>(l.beta);
    if (spec.sigma_param == SigmaParam::dense_cholesky) {
        const int d = spec.K - 1;
        const Eigen::MatrixXd S = covariance_from_theta(theta, spec).sigma.topLeftCorner(d, d);
        pen.value += scaled_wishart_log_density(S, wishart_df(spec.K));
        const Eigen::Index nc = q - cov0;
        if (nc > 0) {
            pen.grad.tail(nc) += dense_prior_grad(theta, spec);
            if (with_hessian) {
                constexpr double h = 1e-5;
                Eigen::MatrixXd H(nc, nc);
                for (Eigen::Index c = 0; c < nc; ++c) {
                    Eigen::VectorXd tp = theta, tm = theta;
                    tp[cov0 + c] += h;
                    tm[cov0 + c] -= h;
                    H.col(c) = (dense_prior_grad(tp, spec) - dense_prior_grad(tm, spec)) / (2 * h);
                }
                pen.hessian.bottomRightCorner(nc, nc) += 0.5 * (H + H.transpose());
            }
        }
    } else {
        for (std::size_t i = 0; i < l.log_scale; ++i) {
            const auto k = static_cast<Eigen::Index>(l.beta + i);
            pen.value += normal_logpdf(theta[k], kLogPsiPriorSd);
            pen.grad[k] -= theta[k] / (kLogPsiPriorSd * kLogPsiPriorSd);
            if (with_hessian) pen.hessian(k, k) -= 1.0 / (kLogPsiPriorSd * kLogPsiPriorSd);
        }
        for (std::size_t i = 0; i < l.other; ++i) {
            const auto k = static_cast<Eigen::Index>(l.beta + l.log_scale + i);
            pen.value += normal_logpdf(theta[k], kGammaPriorSd);
            pen.grad[k] -= theta[k] / (kGammaPriorSd * kGammaPriorSd);
            if (with_hessian) pen.hessian(k, k) -= 1.0 / (kGammaPriorSd * kGammaPriorSd);
        }
    }
    return pen;
}

Objective::Objective(ModelSpec spec, const ChoiceDataset& data) : spec_(std::move(spec)), data_(&data) {
    validate(data, spec_);
    if (data.n() == 0) throw ContractViolation("objective needs at least one observation");
    if (spec_.backend.kind == BackendKind::emulator) {
        if (!spec_.backend.weights) throw ContractViolation("emulator backend without weights");
    } else {
        if (spec_.backend.R < 1) throw ContractViolation("GHK backend needs R >= 1");
        const std::size_t m = static_cast<std::size_t>(spec_.K - 1);
        uniforms_ = ghk_uniforms(data.n() * spec_.backend.R * m, derive_seed(data.seed, 0x47484bu, spec_.backend.R));
    }
}

LogLikEval Objective::evaluate(const Eigen::VectorXd& theta, bool with_scores) const {
    const ModelSpec& spec = spec_;
    const ChoiceDataset& data = *data_;
    const Penalty pen = penalty(theta, spec);
    const CovarianceMap cm = covariance_from_theta(theta, spec);
    const int K = spec.K;
    const std::size_t n = data.n(), k = static_cast<std::size_t>(K);
    const Eigen::VectorXd beta = theta.head(spec.p);

    Array V({n, k}), S({n, k * k});
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::VectorXd vi = data.X[i] * beta;
        for (std::size_t j = 0; j + 1 < k; ++j) V(i, j) = vi[static_cast<Eigen::Index>(j)];
        for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b)
                S(i, a * k + b) = cm.sigma(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    }
    ad::Tape tape;
    ad::Var Vv = tape.variable(std::move(V));
    ad::Var Sv = tape.variable(std::move(S));
    ad::Var lp;
    if (spec.backend.kind == BackendKind::emulator) {
        const CanonicalBatch cb = canonicalize(Vv, Sv, K);
        const BoundWeights bw = bind(tape, *spec.backend.weights, false);
        ad::Var out = forward(bw, cb.vstar, cb.sigstar, K);
        std::vector<std::uint32_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<std::uint32_t>(i * k + static_cast<std::size_t>(data.y[i]));
        lp = gather(reshape(out, {n * k}), idx);
    } else {
        lp = ghk_logprob(Vv, Sv, data.y, spec.backend.R, uniforms_);
    }
    ad::Var total = sum(lp);
    tape.backward(total);
    const Array gV = tape.grad(Vv), gS = tape.grad(Sv);

    const ThetaLayout l = theta_layout(spec);
    const auto q = static_cast<Eigen::Index>(l.total());
    Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), q);
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        for (std::size_t j = 0; j + 1 < k; ++j) scores.row(ii).head(spec.p) += gV(i, j) * data.X[i].row(static_cast<Eigen::Index>(j));
        for (std::size_t c = 0; c < cm.d_sigma.size(); ++c) {
            const double* dS = cm.d_sigma[c].data();  // symmetric, so storage order does not matter
            double acc = 0.0;
            for (std::size_t e = 0; e < k * k; ++e) acc += gS(i, e) * dS[e];
            scores(ii, static_cast<Eigen::Index>(l.beta + c)) = acc;
        }
    }
    LogLikEval ev;
    const double nn = static_cast<double>(n);
    ev.loglik = total.item() / nn;
    ev.value = ev.loglik + spec.lambda_reg * pen.value / nn;
    ev.grad = scores.colwise().mean().transpose() + spec.lambda_reg * pen.grad / nn;
    if (with_scores) ev.scores = std::move(scores);
    return ev;
}

double penalized_loglik(const Eigen::VectorXd& theta, const ModelSpec& spec, const ChoiceDataset& data,
                        Eigen::VectorXd* grad) {
    const Objective obj(spec, data);
    LogLikEval ev = obj.evaluate(theta);
    if (grad) *grad = std::move(ev.grad);
    return ev.value;
}

FitResult lbfgs_maximize(const SmoothFn& f, Eigen::VectorXd x0, const LbfgsOptions& opt) {
    FitResult res;
    auto eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g, double& val) {
        ++res.evaluations;
        try {
            val = f(x, g);
        } catch (const BarrierDomainError&) {
            return false;
        } catch (const SingularCovarianceError&) {
            return false;
        }
        return std::isfinite(val) && g.allFinite();
    };
    Eigen::VectorXd x = std::move(x0), g;
    double fx = 0.0;
    if (!eval(x, g, fx)) {
        res.theta = x;
        res.status = FitStatus::failed;
        res.message = "objective undefined at the initial point";
        return res;
    }
    res.theta = x;
    res.value = fx;
    res.grad_norm = g.norm();
    std::deque<Eigen::VectorXd> S, Y;
    int flat_steps = 0;
    for (int iter = 0; iter < opt.max_iterations; ++iter) {
        res.iterations = iter;
        if (g.norm() < opt.grad_tol) {
            res.status = FitStatus::converged;
            return res;
        }
        bool accepted = false;
        for (int attempt = 0; attempt < 2 && !accepted; ++attempt) {
            // Two-loop recursion on the minimisation problem -f.
            Eigen::VectorXd qv = -g;
            std::vector<double> alpha(S.size());
            for (int i = static_cast<int>(S.size()) - 1; i >= 0; --i) {
                alpha[static_cast<std::size_t>(i)] = S[static_cast<std::size_t>(i)].dot(qv) / Y[static_cast<std::size_t>(i)].dot(S[static_cast<std::size_t>(i)]);
                qv -= alpha[static_cast<std::size_t>(i)] * Y[static_cast<std::size_t>(i)];
            }
            if (!S.empty()) qv *= S.back().dot(Y.back()) / Y.back().squaredNorm();
            for (std::size_t i = 0; i < S.size(); ++i) {
                const double b = Y[i].dot(qv) / Y[i].dot(S[i]);
                qv += (alpha[i] - b) * S[i];
            }
            Eigen::VectorXd dir = -qv;  // ascent direction for f
            double slope = g.dot(dir);
            if (!(slope > 0.0)) {
                S.clear();
                Y.clear();
                dir = g;
                slope = g.squaredNorm();
            }
            double t = S.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
            Eigen::VectorXd xn, gn;
            double fn = 0.0;
            bool have_small = false;
            Eigen::VectorXd xs, gs;
            double fs = 0.0;
            while (t >= opt.min_step) {
                xn = x + t * dir;
                if (eval(xn, gn, fn)) {
                    if (fn >= fx + 1e-4 * t * slope) {
                        accepted = true;
                        break;
                    }
                    if (!have_small && fn >= fx - opt.decrease_tol * (1.0 + std::abs(fx))) {
                        have_small = true;
                        xs = xn;
                        gs = gn;
                        fs = fn;
                    }
                }
                t *= 0.5;
            }
            if (!accepted && have_small) {
                xn = xs;
                gn = gs;
                fn = fs;
                accepted = true;
            }
            if (!accepted) {
                if (S.empty()) break;
                S.clear();
                Y.clear();
                continue;
            }
            const Eigen::VectorXd s = xn - x, y = g - gn;  // gradient difference of -f
            if (s.dot(y) > 1e-12 * s.norm() * y.norm()) {
                S.push_back(s);
                Y.push_back(y);
                if (static_cast<int>(S.size()) > opt.memory) {
                    S.pop_front();
                    Y.pop_front();
                }
            }
            flat_steps = fn > fx ? 0 : flat_steps + 1;
            x = xn;
            g = gn;
            fx = fn;
            if (fx > res.value || (fx == res.value && g.norm() < res.grad_norm)) {
                res.theta = x;
                res.value = fx;
                res.grad_norm = g.norm();
            }
        }
        if (!accepted) {
            res.iterations = iter;
            res.status = iter == 0 ? FitStatus::failed : FitStatus::stalled;
            res.message = iter == 0 ? "no acceptable step from the initial point" : "line search made no progress";
            return res;
        }
        if (flat_steps >= 5) {
            res.iterations = iter + 1;
            res.status = res.grad_norm < opt.grad_tol ? FitStatus::converged : FitStatus::stalled;
            res.message = "objective stopped improving";
            return res;
        }
    }
    res.iterations = opt.max_iterations;
    res.status = res.grad_norm < opt.grad_tol ? FitStatus::converged : FitStatus::max_iterations;
    return res;
}

FitResult fit_mle(const Objective& obj, std::optional<Eigen::VectorXd> init, const LbfgsOptions& opt) {
    const auto q = static_cast<Eigen::Index>(theta_layout(obj.spec()).total());
    Eigen::VectorXd x0 = init ? *init : Eigen::VectorXd::Zero(q);
    if (x0.size() != q) throw ContractViolation("fit_mle: initial theta has the wrong length");
    return lbfgs_maximize(
        [&](const Eigen::VectorXd& th, Eigen::VectorXd& g) {
            LogLikEval ev = obj.evaluate(th);
            g = std::move(ev.grad);
            return ev.value;
        },
        std::move(x0), opt);
}

namespace {

StandardErrors invert_information(const Eigen::MatrixXd& info) {
    StandardErrors out;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (info + info.transpose()));
    out.min_eigenvalue = es.eigenvalues().minCoeff();
    const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (!(out.min_eigenvalue > 1e-12 * scale)) {
        out.message = "information matrix not invertible (smallest eigenvalue " + std::to_string(out.min_eigenvalue) + ")";
        return out;
    }
    out.cov = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
    out.ok = true;
    return out;
}

}  // namespace

StandardErrors standard_errors(const Objective& obj, const Eigen::VectorXd& theta_hat, bool sandwich) {
    const ModelSpec& spec = obj.spec();
    const LogLikEval ev = obj.evaluate(theta_hat, true);
    const Eigen::MatrixXd B = ev.scores.transpose() * ev.scores;  // n J_hat
    const double n = static_cast<double>(obj.data().n());
    StandardErrors out;
    if (!sandwich) {
        const Penalty pen = penalty(theta_hat, spec, true);
        out = invert_information(B - spec.lambda_reg * pen.hessian);
    } else {
        const auto q = theta_hat.size();
        Eigen::MatrixXd H(q, q);
        for (Eigen::Index c = 0; c < q; ++c) {
            const double h = 1e-4 * (1.0 + std::abs(theta_hat[c]));
            Eigen::VectorXd tp = theta_hat, tm = theta_hat;
            tp[c] += h;
            tm[c] -= h;
            H.col(c) = (obj.evaluate(tp).grad - obj.evaluate(tm).grad) / (2 * h);
        }
        const Eigen::MatrixXd A = -0.5 * (H + H.transpose());
        StandardErrors ainv = invert_information(A);
        out.min_eigenvalue = ainv.min_eigenvalue;
        if (!ainv.ok) {
            out.message = "sandwich: " + ainv.message;
            return out;
        }
        out.cov = ainv.cov * (B / n) * ainv.cov.transpose() / n;
        out.bread = A;
        out.meat = B / n;
        out.ok = true;
    }
    if (out.ok) out.se = out.cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    return out;
}

Eigen::VectorXd draw_true_theta(const ModelSpec& spec, std::uint64_t seed) {
    const ThetaLayout l = theta_layout(spec);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(l.total()));
    theta[std::min<Eigen::Index>(1, spec.p - 1)] = 1.0;
    Rng rng(seed);
    const auto c0 = static_cast<Eigen::Index>(l.beta);
    if (spec.sigma_param == SigmaParam::dense_cholesky) {
        if (spec.K > 2) {
            const Eigen::MatrixXd S = sample_scaled_wishart(spec.K - 1, wishart_df(spec.K), rng);
            theta.tail(theta.size() - c0) = dense_params_from_sigma(S);
        }
    } else {
        std::normal_distribution<double> z;
        for (std::size_t i = 0; i < l.log_scale; ++i) theta[c0 + static_cast<Eigen::Index>(i)] = kLogPsiPriorSd * z(rng);
        for (std::size_t i = 0; i < l.other; ++i)
            theta[c0 + static_cast<Eigen::Index>(l.log_scale + i)] = kGammaPriorSd * z(rng);
    }
    return theta;
}

ChoiceDataset generate_dgp_dataset(const ModelSpec& spec, const Eigen::VectorXd& theta_true, std::size_t n, Dgp dgp,
                                   std::uint64_t seed, const EmulatorWeights* emulator) {
    check_theta(theta_true, spec);
    if (dgp == Dgp::emulator_rum && !emulator) {
        if (spec.backend.kind != BackendKind::emulator || !spec.backend.weights) {
            throw ContractViolation("emulator DGP needs emulator weights");
        }
        emulator = spec.backend.weights.get();
    }
    const int K = spec.K, d = K - 1;
    ChoiceDataset data;
    data.K = K;
    data.p = spec.p;
    data.seed = derive_seed(seed, 3);
    data.X.resize(n);
    data.y.resize(n);
    Rng rx(derive_seed(seed, 1)), ry(derive_seed(seed, 2));
    std::normal_distribution<double> z;
    for (auto& X : data.X) {
        X.resize(d, spec.p);
        for (Eigen::Index j = 0; j < d; ++j)
            for (Eigen::Index c = 0; c < spec.p; ++c) X(j, c) = z(rx);
    }
    const Eigen::MatrixXd sigma = covariance_from_theta(theta_true, spec).sigma;
    const Eigen::VectorXd beta = theta_true.head(spec.p);
    if (dgp == Dgp::probit) {
        const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(sigma.topLeftCorner(d, d)).matrixL();
        Eigen::VectorXd e(d);
        for (std::size_t i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < d; ++j) e[j] = z(ry);
            const Eigen::VectorXd u = data.X[i] * beta + L * e;
            int best = K - 1;
            double bu = 0.0;
            for (int j = d - 1; j >= 0; --j) {
                if (u[j] >= bu) {
                    bu = u[j];
                    best = j;
                }
            }
            data.y[i] = best;
        }
    } else {
        constexpr std::size_t kChunk = 4096;
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        for (std::size_t start = 0; start < n; start += kChunk) {
            const std::size_t end = std::min(n, start + kChunk);
            std::vector<CanonicalInput> xs;
            for (std::size_t i = start; i < end; ++i) {
                Eigen::VectorXd v = Eigen::VectorXd::Zero(K);
                v.head(d) = data.X[i] * beta;
                xs.push_back(canonicalize(v, sigma));
            }
            const Eigen::MatrixXd lp = forward_batch(*emulator, xs);
            for (std::size_t i = start; i < end; ++i) {
                const double u = unif(ry);
                double acc = 0.0;
                int choice = K - 1;
                for (int j = 0; j < K; ++j) {
                    acc += std::exp(lp(static_cast<Eigen::Index>(i - start), j));
                    if (u < acc) {
                        choice = j;
                        break;
                    }
                }
                data.y[i] = choice;
            }
        }
    }
    return data;
}

MetricsRow compute_metrics(const std::vector<Replication>& reps, const std::vector<std::string>& names,
                           std::size_t bootstrap, std::uint64_t seed) {
    MetricsRow row;
    std::vector<const Replication*> ok;
    for (const auto& r : reps) {
        if (r.failed) ++row.failures;
        else ok.push_back(&r);
    }
    const std::size_t q = names.size();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (ok.size() < 2) {
        row.rmse = row.rms_bias = row.se_ratio = row.coverage = row.time_s = nan;
        row.rmse_mcse = row.rms_bias_mcse = row.se_ratio_mcse = row.coverage_mcse = row.time_mcse = nan;
        return row;
    }
    struct Stats {
        double rmse, rms_bias, se_ratio;
    };
    auto stats = [&](const std::vector<std::size_t>& idx) {
        Stats s{0, 0, 0};
        const double m = static_cast<double>(idx.size());
        for (std::size_t k = 0; k < q; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            double se2 = 0, me = 0, mse = 0;
            for (std::size_t i : idx) {
                const double e = ok[i]->theta_hat[kk] - ok[i]->theta_true[kk];
                se2 += e * e;
                me += e;
                mse += ok[i]->se[kk];
            }
            se2 /= m;
            me /= m;
            mse /= m;
            // Truths are redrawn per replication, so the spread is taken over errors, not estimates.
            double var = 0;
            for (std::size_t i : idx) var += std::pow(ok[i]->theta_hat[kk] - ok[i]->theta_true[kk] - me, 2);
            const double sd = std::sqrt(var / (m - 1));
            s.rmse += std::sqrt(se2);
            s.rms_bias += me * me;
            s.se_ratio += sd > 0 ? mse / sd : nan;
        }
        s.rmse /= static_cast<double>(q);
        s.rms_bias = std::sqrt(s.rms_bias / static_cast<double>(q));
        s.se_ratio /= static_cast<double>(q);
        return s;
    };
    std::vector<std::size_t> all(ok.size());
    std::iota(all.begin(), all.end(), 0);
    const Stats full = stats(all);
    row.rmse = full.rmse;
    row.rms_bias = full.rms_bias;
    row.se_ratio = full.se_ratio;

    auto sd_of = [](const std::vector<double>& x) {
        const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
        double v = 0;
        for (double a : x) v += (a - m) * (a - m);
        return std::sqrt(v / static_cast<double>(x.size() - 1));
    };
    std::vector<double> cover(ok.size()), times(ok.size());
    for (std::size_t i = 0; i < ok.size(); ++i) {
        double c = 0;
        for (std::size_t k = 0; k < q; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            c += std::abs(ok[i]->theta_hat[kk] - ok[i]->theta_true[kk]) <= 1.96 * ok[i]->se[kk] ? 1.0 : 0.0;
        }
        cover[i] = c / static_cast<double>(q);
        times[i] = ok[i]->time_s;
    }
    const double m = static_cast<double>(ok.size());
    row.coverage = std::accumulate(cover.begin(), cover.end(), 0.0) / m;
    row.coverage_mcse = sd_of(cover) / std::sqrt(m);
    row.time_s = std::accumulate(times.begin(), times.end(), 0.0) / m;
    row.time_mcse = sd_of(times) / std::sqrt(m);

    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, ok.size() - 1);
    std::vector<double> b_rmse, b_bias, b_ratio;
    std::vector<std::size_t> idx(ok.size());
    for (std::size_t b = 0; b < bootstrap; ++b) {
        for (auto& i : idx) i = pick(rng);
        const Stats s = stats(idx);
        b_rmse.push_back(s.rmse);
        b_bias.push_back(s.rms_bias);
        if (std::isfinite(s.se_ratio)) b_ratio.push_back(s.se_ratio);
    }
    if (bootstrap > 1) {
        row.rmse_mcse = sd_of(b_rmse);
        row.rms_bias_mcse = sd_of(b_bias);
        row.se_ratio_mcse = b_ratio.size() > 1 ? sd_of(b_ratio) : nan;
    }

    for (std::size_t k = 0; k < q; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        std::vector<double> e(ok.size());
        double mse = 0;
        for (std::size_t i = 0; i < ok.size(); ++i) {
            e[i] = ok[i]->theta_hat[kk] - ok[i]->theta_true[kk];
            mse += ok[i]->se[kk];
        }
        ParameterSummary ps;
        ps.name = names[k];
        ps.mean_error = std::accumulate(e.begin(), e.end(), 0.0) / m;
        ps.emp_sd = sd_of(e);
        ps.mcse = ps.emp_sd / std::sqrt(m);
        ps.mean_se = mse / m;
        row.parameters.push_back(ps);
    }
    return row;
}

std::uint64_t study_cell_key(std::uint64_t seed, std::size_t n, int K, SigmaParam sp, Dgp dgp) {
    return derive_seed(seed, static_cast<std::uint64_t>(n),
                       static_cast<std::uint64_t>(K) * 16 + static_cast<std::uint64_t>(sp) * 4 +
                           static_cast<std::uint64_t>(dgp));
}

std::uint64_t replication_seed(std::uint64_t cell_key, std::size_t r) { return derive_seed(cell_key, r); }

StudyResult run_simulation_study(const StudyConfig& cfg, const StudyProgress& progress) {
    if (cfg.methods.empty()) throw ContractViolation("study has no estimation methods");
    if (cfg.reps == 0) throw ContractViolation("study needs at least one replication");
    StudyResult out;
    for (std::size_t n : cfg.ns)
        for (int K : cfg.Ks)
            for (SigmaParam sp : cfg.specs)
                for (Dgp dgp : cfg.dgps) {
                    const std::uint64_t key = study_cell_key(cfg.seed, n, K, sp, dgp);
                    auto emulator_for = [&]() -> std::shared_ptr<const EmulatorWeights> {
                        auto it = cfg.emulators.find(K);
                        if (it == cfg.emulators.end()) {
                            throw ContractViolation("no emulator weights for K=" + std::to_string(K));
                        }
                        return it->second;
                    };
                    std::vector<ModelSpec> specs;
                    for (const Backend& b : cfg.methods) {
                        ModelSpec ms{K, cfg.p, sp, b, cfg.lambda_reg};
                        if (b.kind == BackendKind::emulator && !b.weights) ms.backend.weights = emulator_for();
                        specs.push_back(ms);
                    }
                    std::shared_ptr<const EmulatorWeights> dgp_emulator;
                    if (dgp == Dgp::emulator_rum) dgp_emulator = emulator_for();

                    std::vector<std::vector<Replication>> reps(specs.size(), std::vector<Replication>(cfg.reps));
                    std::atomic<std::size_t> done{0};
                    const std::string label = "n=" + std::to_string(n) + " K=" + std::to_string(K) + " " +
                                              to_string(sp) + " " + to_string(dgp);
                    parallel_for(cfg.reps, cfg.jobs, [&](std::size_t r) {
                        const std::uint64_t rs = replication_seed(key, r);
                        const Eigen::VectorXd truth = draw_true_theta(specs[0], derive_seed(rs, 1));
                        const ChoiceDataset data =
                            generate_dgp_dataset(specs[0], truth, n, dgp, derive_seed(rs, 2), dgp_emulator.get());
                        for (std::size_t m = 0; m < specs.size(); ++m) {
                            Replication& rep = reps[m][r];
                            rep.rep = r;
                            rep.theta_true = truth;
                            const auto t0 = std::chrono::steady_clock::now();
                            try {
                                const Objective obj(specs[m], data);
                                const FitResult fit = fit_mle(obj);
                                rep.status = fit.status;
                                rep.theta_hat = fit.theta;
                                if (fit.status == FitStatus::failed) {
                                    rep.failed = true;
                                    rep.message = fit.message;
                                } else {
                                    const StandardErrors se = standard_errors(obj, fit.theta, cfg.sandwich);
                                    if (!se.ok) {
                                        rep.failed = true;
                                        rep.message = se.message;
                                    } else {
                                        rep.se = se.se;
                                    }
                                }
                            } catch (const std::exception& e) {
                                rep.failed = true;
                                rep.message = e.what();
                            }
                            rep.time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                        }
                        if (progress) progress(label, ++done, cfg.reps);
                    });
                    const auto names = theta_names(specs[0]);
                    for (std::size_t m = 0; m < specs.size(); ++m) {
                        MetricsRow row = compute_metrics(reps[m], names, cfg.bootstrap, derive_seed(key, 0xb007, m));
                        row.n = n;
                        row.dgp = dgp;
                        row.method = specs[m].backend.label();
                        row.spec = sp;
                        row.K = K;
                        out.rows.push_back(std::move(row));
                        out.replications.push_back(std::move(reps[m]));
                    }
                }
    return out;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "n,dgp,method,spec,K,rmse,rmse_mcse,rms_bias,rms_bias_mcse,se_ratio,se_ratio_mcse,coverage,coverage_mcse,"
           "time_s,time_mcse,failures\n";
    char buf[512];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%s,%s,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%zu\n", r.n,
                      to_string(r.dgp).c_str(), r.method.c_str(), to_string(r.spec).c_str(), r.K, r.rmse, r.rmse_mcse,
                      r.rms_bias, r.rms_bias_mcse, r.se_ratio, r.se_ratio_mcse, r.coverage, r.coverage_mcse, r.time_s,
                      r.time_mcse, r.failures);
        out << buf;
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace cemu
