#include "cemu/canonical.hpp"

#include <cmath>
#include <vector>

#include "cemu/random.hpp"

namespace cemu {

Eigen::MatrixXd centering_matrix(int K) {
    return Eigen::MatrixXd::Identity(K, K) - Eigen::MatrixXd::Constant(K, K, 1.0 / K);
}

CanonicalInput canonicalize(const Eigen::VectorXd& v, const Eigen::MatrixXd& sigma) {
    const int K = static_cast<int>(v.size());
    if (sigma.rows() != K || sigma.cols() != K) throw ContractViolation("canonicalize: Sigma must be K x K");
    const Eigen::MatrixXd M = centering_matrix(K);
    const Eigen::MatrixXd sym = 0.5 * (sigma + sigma.transpose());
    const Eigen::MatrixXd centred = M * sym * M;
    const double tr = centred.trace();
    if (!(tr > kDegenerateTrace)) {
        throw DegenerateChoiceError("canonicalize: tr(M Sigma M) = " + std::to_string(tr) + " (deterministic choice)");
    }
    const double scale = K / tr;
    CanonicalInput out;
    out.K = K;
    out.vstar = std::sqrt(scale) * (M * v);
    out.sigstar = scale * centred;
    out.sigstar = 0.5 * (out.sigstar + out.sigstar.transpose()).eval();
    return out;
}

bool on_manifold(const CanonicalInput& x, double tol) {
    const int K = x.K;
    if (x.vstar.size() != K || x.sigstar.rows() != K || x.sigstar.cols() != K) return false;
    if (std::abs(x.vstar.sum()) > tol) return false;
    if ((x.sigstar * Eigen::VectorXd::Ones(K)).cwiseAbs().maxCoeff() > tol) return false;
    if (std::abs(x.sigstar.trace() - K) > tol) return false;
    if ((x.sigstar - x.sigstar.transpose()).cwiseAbs().maxCoeff() > tol) return false;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(x.sigstar, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff() >= -tol * K;
}

TangentDirection sample_tangent_direction(int K, std::uint64_t seed) {
    if (K < 2) throw ContractViolation("sample_tangent_direction: K must be at least 2");
    Rng rng(seed);
    std::normal_distribution<double> normal;
    TangentDirection d;
    d.d_v.resize(K);
    for (int i = 0; i < K; ++i) d.d_v[i] = normal(rng);
    d.d_v.array() -= d.d_v.mean();

    Eigen::MatrixXd raw(K, K);
    for (int i = 0; i < K; ++i)
        for (int j = i; j < K; ++j) raw(i, j) = raw(j, i) = normal(rng);
    const Eigen::MatrixXd M = centering_matrix(K);
    const Eigen::MatrixXd centred = M * raw * M;
    d.D_S = centred - (centred.trace() / (K - 1)) * M;
    d.D_S = 0.5 * (d.D_S + d.D_S.transpose()).eval();

    const double norm = direction_norm(d);
    d.d_v /= norm;
    d.D_S /= norm;
    return d;
}

double direction_norm(const TangentDirection& d) {
    double s = d.d_v.squaredNorm();
    const auto K = d.D_S.rows();
    for (Eigen::Index i = 0; i < K; ++i)
        for (Eigen::Index j = i; j < K; ++j) s += d.D_S(i, j) * d.D_S(i, j);
    return std::sqrt(s);
}

CanonicalInput perturb(const CanonicalInput& x, const TangentDirection& d, double step) {
    CanonicalInput out = x;
    out.vstar += step * d.d_v;
    out.sigstar += step * d.D_S;
    return out;
}

CanonicalInput permute(const CanonicalInput& x, std::span<const int> perm) {
    const int K = x.K;
    if (static_cast<int>(perm.size()) != K) throw ContractViolation("permute: permutation length must equal K");
    CanonicalInput out = x;
    for (int i = 0; i < K; ++i) {
        out.vstar[i] = x.vstar[perm[i]];
        for (int j = 0; j < K; ++j) out.sigstar(i, j) = x.sigstar(perm[i], perm[j]);
    }
    return out;
}

CanonicalBatch canonicalize(ad::Var v, ad::Var sigma, int K) {
    using ad::Var;
    const std::size_t k = static_cast<std::size_t>(K);
    if (v.size() % k != 0) throw ContractViolation("canonicalize batch: v size not a multiple of K");
    const std::size_t n = v.size() / k;
    if (sigma.size() != n * k * k) throw ContractViolation("canonicalize batch: sigma size mismatch");

    std::vector<std::uint32_t> row_of_v(n * k), rep_k(n * k);
    for (std::size_t i = 0; i < n * k; ++i) row_of_v[i] = rep_k[i] = static_cast<std::uint32_t>(i / k);

    const std::size_t kk = k * k;
    std::vector<std::uint32_t> transpose(n * kk), row_seg(n * kk), col_seg(n * kk), obs_seg(n * kk), diag(n * k),
        diag_seg(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < k; ++a) {
            diag[i * k + a] = static_cast<std::uint32_t>(i * kk + a * k + a);
            diag_seg[i * k + a] = static_cast<std::uint32_t>(i);
            for (std::size_t b = 0; b < k; ++b) {
                const std::size_t f = i * kk + a * k + b;
                transpose[f] = static_cast<std::uint32_t>(i * kk + b * k + a);
                row_seg[f] = static_cast<std::uint32_t>(i * k + a);
                col_seg[f] = static_cast<std::uint32_t>(i * k + b);
                obs_seg[f] = static_cast<std::uint32_t>(i);
            }
        }
    }

    Var vflat = reshape(v, {n * k});
    Var sflat = reshape(sigma, {n * kk});
    Var vbar = segment_mean(vflat, row_of_v, n);
    Var vc = vflat - gather_rows(vbar, rep_k);

    Var sym = (sflat + gather(sflat, transpose)) * 0.5;
    Var row_mean = segment_mean(sym, row_seg, n * k);
    Var col_mean = segment_mean(sym, col_seg, n * k);
    Var grand = segment_mean(sym, obs_seg, n);
    Var centred = sym - gather_rows(row_mean, row_seg) - gather_rows(col_mean, col_seg) + gather_rows(grand, obs_seg);

    Var trace = segment_sum(gather(centred, diag), diag_seg, n);
    for (double t : trace.value().values()) {
        if (!(t > kDegenerateTrace)) throw DegenerateChoiceError("canonicalize: tr(M Sigma M) = " + std::to_string(t));
    }
    Var scale = static_cast<double>(K) / trace;  // broadcast via constant numerator
    Var root = sqrt(scale);

    CanonicalBatch out;
    out.vstar = reshape(vc * gather_rows(root, rep_k), {n, k});
    out.sigstar = reshape(centred * gather_rows(scale, obs_seg), {n, kk});
    return out;
}

}  // namespace cemu
