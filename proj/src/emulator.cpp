#include "cemu/emulator.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "cemu/random.hpp"

namespace cemu {

using ad::Var;
using nlohmann::json;

namespace {

constexpr double kFeatureFloor = 1e-8;
constexpr int kFormatVersion = 1;

void stack_layout(std::vector<TensorSpec>& out, const std::string& prefix, int in, const StackSpec& s) {
    int width = in;
    for (int l = 0; l <= s.hidden_layers; ++l) {
        const int next = l < s.hidden_layers ? s.hidden : s.out;
        const std::string base = prefix + "." + std::to_string(l);
        out.push_back({base + ".W", {static_cast<std::size_t>(width), static_cast<std::size_t>(next)}});
        out.push_back({base + ".b", {static_cast<std::size_t>(next)}});
        width = next;
    }
}

int zeta_inputs(const EmulatorConfig& c) { return c.diag_rho.out + c.off_rho.out + kPassFeatures + (c.multi_k ? 1 : 0); }

std::size_t count_prefix(const std::vector<TensorSpec>& layout, const std::string& prefix) {
    std::size_t n = 0;
    for (const auto& t : layout)
        if (t.name.rfind(prefix, 0) == 0) n += shape_size(t.shape);
    return n;
}

// Walks the bound weight list in layout order.
struct Cursor {
    const std::vector<Var>& vars;
    std::size_t pos = 0;
    Var next() { return vars.at(pos++); }
};

Var dropout(Var x, std::size_t rows_per_obs, const ForwardOptions& opt, std::uint64_t site) {
    if (opt.dropout <= 0.0) return x;
    const std::size_t width = x.value().rank() == 2 ? x.shape()[1] : 1;
    const std::size_t rows = x.size() / width;
    const std::size_t n = rows / rows_per_obs;
    const std::size_t period = opt.mask_period ? opt.mask_period : n;
    const std::size_t block = std::min(period, n) * rows_per_obs * width;
    Rng rng(derive_seed(opt.seed, site));
    std::bernoulli_distribution keep(1.0 - opt.dropout);
    const double scale = 1.0 / (1.0 - opt.dropout);
    std::vector<double> pattern(block);
    for (double& m : pattern) m = keep(rng) ? scale : 0.0;
    Array mask(x.shape());
    const std::size_t stride = period * rows_per_obs * width;
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = pattern[(i % stride) % block];
    return mul_const(x, mask);
}

Var apply_stack(Cursor& cur, Var x, const StackSpec& s, std::size_t rows_per_obs, const ForwardOptions& opt,
                std::uint64_t& site) {
    for (int l = 0; l <= s.hidden_layers; ++l) {
        Var W = cur.next();
        Var b = cur.next();
        x = swish(add_row(matmul(x, W), b));
        x = dropout(x, rows_per_obs, opt, site++);
    }
    return x;
}

std::uint32_t u32(std::size_t v) { return static_cast<std::uint32_t>(v); }

json stack_json(const StackSpec& s) { return {{"out", s.out}, {"hidden_layers", s.hidden_layers}, {"hidden", s.hidden}}; }

StackSpec stack_from_json(const json& j) {
    return {j.at("out").get<int>(), j.at("hidden_layers").get<int>(), j.at("hidden").get<int>()};
}

}  // namespace

EmulatorConfig EmulatorConfig::preset(int K) {
    EmulatorConfig c;
    switch (K) {
        case 3:
            return c;
        case 5:
            c.diag_phi = {24, 1, 24};
            c.diag_rho = {24, 0, 0};
            c.off_phi = {24, 1, 24};
            c.off_rho = {24, 0, 0};
            c.zeta = {24, 2, 48};
            c.equivariant = {12};
            return c;
        case 10:
            c.diag_phi = {32, 1, 32};
            c.diag_rho = {32, 0, 0};
            c.off_phi = {32, 1, 32};
            c.off_rho = {32, 0, 0};
            c.zeta = {32, 2, 64};
            c.equivariant = {16};
            return c;
        default:
            throw ContractViolation("no preset architecture for K=" + std::to_string(K));
    }
}

FeatureSpec feature_spec(const EmulatorConfig& cfg) {
    FeatureSpec f;
    f.d_jk = {"v_j", "v_k", "S_jj", "S_kk", "S_jk", "sigma_j", "sigma_k", "rho_jk", "z_jk"};
    f.o_kl = {"S_kl", "rho_kl", "(v_k-v_l)^2", "z_kl^2", "S_kk+S_ll", "v_k+v_l"};
    f.s_j = {"v_j", "sigma_j", "mean_k S_jk", "min_k S_jk", "max_k S_jk", "S_jj", "mean_k rho_jk", "mean_k z_jk",
             "min_k z_jk"};
    if (cfg.multi_k) f.s_j.push_back("K");
    return f;
}

std::vector<TensorSpec> weight_layout(const EmulatorConfig& c) {
    std::vector<TensorSpec> out;
    stack_layout(out, "diag_phi", kPairFeatures, c.diag_phi);
    stack_layout(out, "diag_rho", c.diag_phi.out, c.diag_rho);
    stack_layout(out, "off_phi", kOffFeatures, c.off_phi);
    stack_layout(out, "off_rho", c.off_phi.out, c.off_rho);
    stack_layout(out, "zeta", zeta_inputs(c), c.zeta);
    std::size_t width = static_cast<std::size_t>(c.zeta.out);
    for (std::size_t l = 0; l < c.equivariant.size(); ++l) {
        const auto h = static_cast<std::size_t>(c.equivariant[l]);
        const std::string base = "equi." + std::to_string(l);
        out.push_back({base + ".A", {width, h}});
        out.push_back({base + ".B", {width, h}});
        out.push_back({base + ".c_self", {h}});
        out.push_back({base + ".c_pool", {h}});
        width = h;
    }
    out.push_back({"head.a", {width}});
    return out;
}

ParameterCounts parameter_counts(const EmulatorConfig& cfg) {
    const auto layout = weight_layout(cfg);
    ParameterCounts p;
    p.diag = count_prefix(layout, "diag_");
    p.off = count_prefix(layout, "off_");
    p.zeta = count_prefix(layout, "zeta");
    p.equivariant = count_prefix(layout, "equi.") + count_prefix(layout, "head.");
    p.total = p.diag + p.off + p.zeta + p.equivariant;
    return p;
}

std::size_t EmulatorWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.size();
    return n;
}

const Array& EmulatorWeights::get(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return arrays[i];
    throw ContractViolation("no weight array named '" + name + "'");
}

EmulatorWeights init_weights(const EmulatorConfig& cfg, std::uint64_t seed) {
    EmulatorWeights w;
    w.config = cfg;
    Rng rng(seed);
    std::normal_distribution<double> normal;
    for (const auto& t : weight_layout(cfg)) {
        Array a(t.shape, 0.0);
        const bool bias = t.shape.size() == 1 && t.name != "head.a";
        if (!bias) {
            const double sd = 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
            for (double& x : a.values()) x = sd * normal(rng);
        }
        w.names.push_back(t.name);
        w.arrays.push_back(std::move(a));
    }
    return w;
}

void validate(const EmulatorWeights& w) {
    const auto layout = weight_layout(w.config);
    if (layout.size() != w.arrays.size() || w.names.size() != w.arrays.size()) {
        throw ContractViolation("emulator weights: expected " + std::to_string(layout.size()) + " arrays, got " +
                                std::to_string(w.arrays.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (layout[i].name != w.names[i] || layout[i].shape != w.arrays[i].shape()) {
            throw ContractViolation("emulator weights: array " + std::to_string(i) + " is " + w.names[i] +
                                    shape_string(w.arrays[i].shape()) + ", expected " + layout[i].name +
                                    shape_string(layout[i].shape));
        }
        if (!w.arrays[i].all_finite()) throw ContractViolation("emulator weights: non-finite values in " + w.names[i]);
    }
}

BoundWeights bind(ad::Tape& tape, const EmulatorWeights& w, bool requires_grad) {
    validate(w);
    BoundWeights b;
    b.weights = &w;
    b.vars.reserve(w.arrays.size());
    for (const auto& a : w.arrays) b.vars.push_back(requires_grad ? tape.variable(a) : tape.constant(a));
    return b;
}

Var forward(const BoundWeights& bw, Var vstar, Var sigstar, int K, const ForwardOptions& opt, ForwardTrace* trace) {
    const EmulatorConfig& cfg = bw.weights->config;
    if (K < 2) throw ContractViolation("emulator forward: K must be at least 2");
    const std::size_t k = static_cast<std::size_t>(K);
    if (vstar.size() % k != 0) throw ContractViolation("emulator forward: vstar size is not a multiple of K");
    const std::size_t n = vstar.size() / k;
    if (sigstar.size() != n * k * k) throw ContractViolation("emulator forward: sigstar size mismatch");
    if (!(opt.dropout >= 0.0 && opt.dropout < 1.0)) throw ContractViolation("emulator forward: dropout outside [0,1)");
    ad::Tape& tape = vstar.tape();
    Var v = reshape(vstar, {n * k});
    Var S = reshape(sigstar, {n * k * k});

    // Per-alternative quantities.
    std::vector<std::uint32_t> diag_idx(n * k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) diag_idx[i * k + j] = u32(i * k * k + j * k + j);
    Var Sdiag = gather(S, diag_idx);
    Var sigma = sqrt(maximum(Sdiag, 0.0));

    // Ordered pairs (j, k), k != j, grouped by (i, j).
    const std::size_t per = k - 1;
    const std::size_t P = n * k * per;
    std::vector<std::uint32_t> pj(P), pk(P), psjk(P), pseg(P);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t t = 0; t < per; ++t) {
                const std::size_t kk = t < j ? t : t + 1;
                const std::size_t r = (i * k + j) * per + t;
                pj[r] = u32(i * k + j);
                pk[r] = u32(i * k + kk);
                psjk[r] = u32(i * k * k + j * k + kk);
                pseg[r] = u32(i * k + j);
            }
    Var vj = gather(v, pj), vk = gather(v, pk);
    Var Sjj = gather(Sdiag, pj), Skk = gather(Sdiag, pk), Sjk = gather(S, psjk);
    Var sj = gather(sigma, pj), sk = gather(sigma, pk);
    Var rho = Sjk / maximum(sj * sk, kFeatureFloor);
    Var sd = maximum(sqrt(maximum(Sjj + Skk - 2.0 * Sjk, 0.0)), kFeatureFloor);
    Var z = (vj - vk) / sd;
    std::vector<Var> dcols{vj, vk, Sjj, Skk, Sjk, sj, sk, rho, z};
    Var d = concat_cols(dcols);

    Cursor cur{bw.vars};
    std::uint64_t site = 0;
    Var phi_d = apply_stack(cur, d, cfg.diag_phi, k * per, opt, site);
    Var h_diag = apply_stack(cur, segment_sum(phi_d, pseg, n * k), cfg.diag_rho, k, opt, site);

    // Unordered pairs (a, b), a < b: pooled once per observation, then the pairs touching j removed.
    const std::size_t Q = k * (k - 1) / 2;
    std::vector<std::uint32_t> rep_k(n * k);
    for (std::size_t r = 0; r < n * k; ++r) rep_k[r] = u32(r / k);
    Var off_in;
    if (k > 2) {
        std::vector<std::uint32_t> qa(n * Q), qb(n * Q), qab(n * Q), qobs(n * Q), dup(2 * n * Q), dup_seg(2 * n * Q);
        for (std::size_t i = 0; i < n; ++i) {
            std::size_t q = 0;
            for (std::size_t a = 0; a < k; ++a)
                for (std::size_t b = a + 1; b < k; ++b, ++q) {
                    const std::size_t r = i * Q + q;
                    qa[r] = u32(i * k + a);
                    qb[r] = u32(i * k + b);
                    qab[r] = u32(i * k * k + a * k + b);
                    qobs[r] = u32(i);
                    dup[2 * r] = dup[2 * r + 1] = u32(r);
                    dup_seg[2 * r] = u32(i * k + a);
                    dup_seg[2 * r + 1] = u32(i * k + b);
                }
        }
        Var va = gather(v, qa), vb = gather(v, qb);
        Var Saa = gather(Sdiag, qa), Sbb = gather(Sdiag, qb), Sab = gather(S, qab);
        Var rab = Sab / maximum(gather(sigma, qa) * gather(sigma, qb), kFeatureFloor);
        Var diff2 = square(va - vb);
        Var var_ab = maximum(Saa + Sbb - 2.0 * Sab, 0.0);
        Var z2 = diff2 / square(maximum(sqrt(var_ab), kFeatureFloor));
        std::vector<Var> ocols{Sab, rab, diff2, z2, Saa + Sbb, va + vb};
        Var phi_o = apply_stack(cur, concat_cols(ocols), cfg.off_phi, Q, opt, site);
        Var total = segment_sum(phi_o, qobs, n);
        Var touching = segment_sum(gather_rows(phi_o, dup), dup_seg, n * k);
        off_in = gather_rows(total, rep_k) - touching;
    } else {
        // No pairs avoid j when K = 2: the pooled sum is empty.
        for (int l = 0; l <= cfg.off_phi.hidden_layers; ++l) {
            cur.next();
            cur.next();
            ++site;
        }
        off_in = tape.constant(Array({n * k, static_cast<std::size_t>(cfg.off_phi.out)}, 0.0));
    }
    Var h_off = apply_stack(cur, off_in, cfg.off_rho, k, opt, site);

    // Pass-through summaries.
    std::vector<Var> scols{v,
                           sigma,
                           segment_mean(Sjk, pseg, n * k),
                           segment_min(Sjk, pseg, n * k),
                           segment_max(Sjk, pseg, n * k),
                           Sdiag,
                           segment_mean(rho, pseg, n * k),
                           segment_mean(z, pseg, n * k),
                           segment_min(z, pseg, n * k)};
    if (cfg.multi_k) scols.push_back(tape.constant(Array({n * k}, static_cast<double>(K))));
    std::vector<Var> zcols{h_diag, h_off, concat_cols(scols)};
    Var Z = apply_stack(cur, concat_cols(zcols), cfg.zeta, k, opt, site);
    if (trace) *trace = {h_diag, h_off, Z};

    for (std::size_t l = 0; l < cfg.equivariant.size(); ++l) {
        Var A = cur.next(), B = cur.next(), c_self = cur.next(), c_pool = cur.next();
        Var pooled = matmul(segment_mean(Z, rep_k, n), B);
        Z = swish(add_row(add_row(matmul(Z, A) + gather_rows(pooled, rep_k), c_self), c_pool));
    }
    Var a = cur.next();
    Var logits = matmul(Z, reshape(a, {a.size(), 1}));
    return log_softmax_rows(reshape(logits, {n, k}));
}

std::pair<Array, Array> pack_inputs(const std::vector<CanonicalInput>& xs) {
    if (xs.empty()) throw ContractViolation("pack_inputs: no inputs");
    const std::size_t K = static_cast<std::size_t>(xs[0].K);
    Array v({xs.size(), K}), s({xs.size(), K * K});
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (static_cast<std::size_t>(xs[i].K) != K) throw ContractViolation("pack_inputs: mixed K in one batch");
        for (std::size_t a = 0; a < K; ++a) {
            v(i, a) = xs[i].vstar[static_cast<Eigen::Index>(a)];
            for (std::size_t b = 0; b < K; ++b)
                s(i, a * K + b) = xs[i].sigstar(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
    }
    return {std::move(v), std::move(s)};
}

Eigen::MatrixXd forward_batch(const EmulatorWeights& w, const std::vector<CanonicalInput>& xs) {
    auto [v, s] = pack_inputs(xs);
    ad::Tape tape;
    auto bw = bind(tape, w, false);
    Var out = forward(bw, tape.constant(std::move(v)), tape.constant(std::move(s)), xs[0].K);
    const Array& o = out.value();
    Eigen::MatrixXd m(static_cast<Eigen::Index>(o.rows()), static_cast<Eigen::Index>(o.cols()));
    for (std::size_t i = 0; i < o.rows(); ++i)
        for (std::size_t j = 0; j < o.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = o(i, j);
    return m;
}

Eigen::VectorXd forward(const EmulatorWeights& w, const CanonicalInput& x, double dropout, std::uint64_t seed) {
    auto [v, s] = pack_inputs({x});
    ad::Tape tape;
    auto bw = bind(tape, w, false);
    ForwardOptions opt;
    opt.dropout = dropout;
    opt.seed = seed;
    Var out = forward(bw, tape.constant(std::move(v)), tape.constant(std::move(s)), x.K, opt);
    return Eigen::Map<const Eigen::VectorXd>(out.value().data(), x.K);
}

Eigen::VectorXd directional_derivative(const EmulatorWeights& w, const CanonicalInput& x, const TangentDirection& dir,
                                       double step) {
    if (!(step > 0.0)) throw ContractViolation("directional_derivative: step must be positive");
    const Eigen::MatrixXd out = forward_batch(w, {perturb(x, dir, step), perturb(x, dir, -step)});
    return (out.row(0) - out.row(1)).transpose() / (2.0 * step);
}

std::string weights_to_json(const EmulatorWeights& w) {
    validate(w);
    const auto& c = w.config;
    const FeatureSpec f = feature_spec(c);
    json doc;
    doc["format_version"] = kFormatVersion;
    doc["config"] = {{"diag_phi", stack_json(c.diag_phi)}, {"diag_rho", stack_json(c.diag_rho)},
                     {"off_phi", stack_json(c.off_phi)},   {"off_rho", stack_json(c.off_rho)},
                     {"zeta", stack_json(c.zeta)},         {"equivariant", c.equivariant},
                     {"multi_k", c.multi_k},               {"dropout_initial", c.dropout_initial}};
    doc["feature_spec"] = {{"d_jk", f.d_jk}, {"o_kl", f.o_kl}, {"s_j", f.s_j}};
    json arrays = json::array();
    for (std::size_t i = 0; i < w.arrays.size(); ++i) {
        arrays.push_back({{"name", w.names[i]}, {"shape", w.arrays[i].shape()}, {"values", w.arrays[i].storage()}});
    }
    doc["arrays"] = std::move(arrays);
    return doc.dump(1);
}

EmulatorWeights weights_from_json(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("weight file is not valid JSON: ") + e.what());
    }
    try {
        if (doc.at("format_version").get<int>() != kFormatVersion) {
            throw ContractViolation("unsupported weight file format_version " + doc.at("format_version").dump());
        }
        const json& c = doc.at("config");
        EmulatorWeights w;
        w.config.diag_phi = stack_from_json(c.at("diag_phi"));
        w.config.diag_rho = stack_from_json(c.at("diag_rho"));
        w.config.off_phi = stack_from_json(c.at("off_phi"));
        w.config.off_rho = stack_from_json(c.at("off_rho"));
        w.config.zeta = stack_from_json(c.at("zeta"));
        w.config.equivariant = c.at("equivariant").get<std::vector<int>>();
        w.config.multi_k = c.at("multi_k").get<bool>();
        w.config.dropout_initial = c.at("dropout_initial").get<double>();
        const FeatureSpec expect = feature_spec(w.config);
        const json& fs = doc.at("feature_spec");
        if (fs.at("d_jk").get<std::vector<std::string>>() != expect.d_jk ||
            fs.at("o_kl").get<std::vector<std::string>>() != expect.o_kl ||
            fs.at("s_j").get<std::vector<std::string>>() != expect.s_j) {
            throw ContractViolation("weight file feature_spec does not match this build");
        }
        for (const json& a : doc.at("arrays")) {
            w.names.push_back(a.at("name").get<std::string>());
            w.arrays.emplace_back(a.at("shape").get<Shape>(), a.at("values").get<std::vector<double>>());
        }
        validate(w);
        return w;
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("malformed weight file: ") + e.what());
    }
}

void save_weights(const EmulatorWeights& w, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << weights_to_json(w) << '\n';
    if (!out) throw IoError("failed writing " + path.string());
}

EmulatorWeights load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return weights_from_json(ss.str());
}

}  // namespace cemu
