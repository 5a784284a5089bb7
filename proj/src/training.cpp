#include "cemu/training.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "cemu/parallel.hpp"
#include "cemu/random.hpp"
#include "cemu/wishart.hpp"

namespace cemu {

using ad::Var;

namespace {

constexpr char kMagic[4] = {'C', 'E', 'M', 'U'};
constexpr int kMaxRedraws = 100;

void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& b, double v) { put_u64(b, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_le(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
double get_f64(const unsigned char* p) { return std::bit_cast<double>(get_le(p, 8)); }

std::uint32_t family_code(FamilyKind k) { return static_cast<std::uint32_t>(k); }

FamilyKind family_from_code(std::uint32_t c) {
    if (c > 2) throw IoError("shard: unknown error family code " + std::to_string(c));
    return static_cast<FamilyKind>(c);
}

}  // namespace

TrainingExample gen_training_example(int K, const ErrorFamily& family, std::uint64_t seed, const GenOptions& opt) {
    if (K < 2) throw ContractViolation("gen_training_example: K must be at least 2");
    if (opt.R < 1) throw ContractViolation("gen_training_example: R must be at least 1");
    const Eigen::MatrixXd scale = Eigen::MatrixXd::Identity(K, K) / (K + 2.0);
    for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
        const std::uint64_t s = derive_seed(seed, static_cast<std::uint64_t>(attempt));
        Rng rng(s);
        const Eigen::MatrixXd sigma = sample_wishart(scale, K + 2.0, rng);
        std::normal_distribution<double> normal(0.0, 2.0);
        Eigen::VectorXd v(K);
        for (int i = 0; i < K; ++i) v[i] = normal(rng);
        const Eigen::MatrixXd sigma2 = sample_wishart(scale, K + 2.0, rng);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const double omega = opt.omega ? *opt.omega : unif(rng);
        const Eigen::MatrixXd mix = omega * sigma + (1.0 - omega) * sigma2;
        const Eigen::VectorXd vprime = matrix_sqrt_psd(mix) * v;
        CanonicalInput x;
        try {
            x = canonicalize(vprime, sigma);
        } catch (const DegenerateChoiceError&) {
            continue;
        }
        TrainingExample ex;
        ex.input = x;
        const auto counts = simulate_choices({x.vstar, x.sigstar}, family, opt.R, derive_seed(s, 1001));
        ex.freq.resize(K);
        for (int j = 0; j < K; ++j) ex.freq[j] = static_cast<double>(counts[j]) / static_cast<double>(opt.R);
        SoftTargets t = soft_relaxation_targets(x, family, opt.R, opt.tau, derive_seed(s, 1002));
        ex.logp_target = std::move(t.logp);
        ex.J_v = std::move(t.J_v);
        ex.J_S = std::move(t.J_S);
        return ex;
    }
    throw GenerationError("gen_training_example: " + std::to_string(kMaxRedraws) + " consecutive degenerate draws");
}

std::vector<TrainingExample> gen_training_examples(int K, const ErrorFamily& family, std::size_t count,
                                                   std::uint64_t master, const GenOptions& opt, unsigned jobs,
                                                   std::size_t first_index) {
    std::vector<TrainingExample> out(count);
    parallel_for(count, jobs, [&](std::size_t i) {
        out[i] = gen_training_example(K, family, derive_seed(master, first_index + i), opt);
    });
    return out;
}

std::size_t shard_record_doubles(std::size_t K) { return K + K * K + K + K + K * K + K * K * K; }

void write_shard(const std::filesystem::path& path, const ShardHeader& header,
                 const std::vector<TrainingExample>& examples) {
    const std::size_t K = header.K;
    if (header.count != examples.size()) throw ContractViolation("write_shard: header count does not match examples");
    std::string buf;
    buf.reserve(kShardHeaderBytes + examples.size() * shard_record_doubles(K) * 8);
    buf.append(kMagic, 4);
    put_u32(buf, kShardVersion);
    put_u32(buf, header.K);
    put_u64(buf, header.count);
    put_u32(buf, family_code(header.family.kind));
    put_u32(buf, header.R);
    put_f64(buf, header.tau);
    put_f64(buf, header.family.nu);
    for (const auto& ex : examples) {
        if (static_cast<std::size_t>(ex.input.K) != K) throw ContractViolation("write_shard: example K differs from header");
        const auto k = static_cast<Eigen::Index>(K);
        for (Eigen::Index a = 0; a < k; ++a) put_f64(buf, ex.input.vstar[a]);
        for (Eigen::Index a = 0; a < k; ++a)
            for (Eigen::Index b = 0; b < k; ++b) put_f64(buf, ex.input.sigstar(a, b));
        for (Eigen::Index a = 0; a < k; ++a) put_f64(buf, ex.freq[a]);
        for (Eigen::Index a = 0; a < k; ++a) put_f64(buf, ex.logp_target[a]);
        for (Eigen::Index a = 0; a < k; ++a)
            for (Eigen::Index b = 0; b < k; ++b) put_f64(buf, ex.J_v(a, b));
        for (Eigen::Index j = 0; j < k; ++j)
            for (Eigen::Index a = 0; a < k; ++a)
                for (Eigen::Index b = 0; b < k; ++b) put_f64(buf, ex.J_S[static_cast<std::size_t>(j)](a, b));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

Shard read_shard(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < kShardHeaderBytes || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw IoError(path.string() + " is not a training shard");
    }
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (get_le(p + 4, 4) != kShardVersion) throw IoError(path.string() + ": unsupported shard version");
    Shard s;
    s.header.K = static_cast<std::uint32_t>(get_le(p + 8, 4));
    s.header.count = get_le(p + 12, 8);
    s.header.family.kind = family_from_code(static_cast<std::uint32_t>(get_le(p + 20, 4)));
    s.header.R = static_cast<std::uint32_t>(get_le(p + 24, 4));
    s.header.tau = get_f64(p + 28);
    s.header.family.nu = get_f64(p + 36);
    const std::size_t K = s.header.K;
    if (K < 2) throw IoError(path.string() + ": K below 2 in header");
    const std::size_t rec = shard_record_doubles(K) * 8;
    if (buf.size() != kShardHeaderBytes + s.header.count * rec) {
        throw IoError(path.string() + ": size does not match header (truncated or corrupt)");
    }
    const auto k = static_cast<Eigen::Index>(K);
    s.examples.resize(s.header.count);
    const unsigned char* q = p + kShardHeaderBytes;
    auto next = [&q] {
        const double v = get_f64(q);
        q += 8;
        return v;
    };
    for (auto& ex : s.examples) {
        ex.input.K = static_cast<int>(K);
        ex.input.vstar.resize(k);
        ex.input.sigstar.resize(k, k);
        ex.freq.resize(k);
        ex.logp_target.resize(k);
        ex.J_v.resize(k, k);
        ex.J_S.assign(K, Eigen::MatrixXd(k, k));
        for (Eigen::Index a = 0; a < k; ++a) ex.input.vstar[a] = next();
        for (Eigen::Index a = 0; a < k; ++a)
            for (Eigen::Index b = 0; b < k; ++b) ex.input.sigstar(a, b) = next();
        for (Eigen::Index a = 0; a < k; ++a) ex.freq[a] = next();
        for (Eigen::Index a = 0; a < k; ++a) ex.logp_target[a] = next();
        for (Eigen::Index a = 0; a < k; ++a)
            for (Eigen::Index b = 0; b < k; ++b) ex.J_v(a, b) = next();
        for (auto& m : ex.J_S)
            for (Eigen::Index a = 0; a < k; ++a)
                for (Eigen::Index b = 0; b < k; ++b) m(a, b) = next();
    }
    return s;
}

void ReplayBuffers::sample(std::size_t n, Rng& rng, std::vector<const TrainingExample*>& ex,
                           std::vector<const TangentDirection*>& dirs) const {
    if (examples.empty() || directions.empty()) throw ContractViolation("replay buffers are empty");
    std::uniform_int_distribution<std::size_t> pick_ex(0, examples.size() - 1), pick_dir(0, directions.size() - 1);
    ex.resize(n);
    dirs.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        ex[i] = &examples[pick_ex(rng)];
        dirs[i] = &directions[pick_dir(rng)];
    }
}

std::vector<TangentDirection> make_directions(int K, std::size_t count, std::uint64_t master) {
    std::vector<TangentDirection> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(sample_tangent_direction(K, derive_seed(master, i)));
    return out;
}

Eigen::VectorXd target_directional_derivative(const TrainingExample& ex, const TangentDirection& d) {
    const int K = ex.input.K;
    Eigen::VectorXd out(K);
    for (int j = 0; j < K; ++j) out[j] = ex.J_v.row(j).dot(d.d_v) + ex.J_S[static_cast<std::size_t>(j)].cwiseProduct(d.D_S).sum();
    return out;
}

SobolevParts sobolev_from_outputs(Var logp, Var dd, const Array& freq, const Array& target_dd, double lambda_grad) {
    if (logp.shape() != freq.shape() || dd.shape() != freq.shape() || target_dd.shape() != freq.shape()) {
        throw ContractViolation("sobolev loss: shape mismatch between outputs and targets");
    }
    const std::size_t B = freq.rows();
    // Zero frequencies contribute nothing to either term, so only the positive entries are gathered.
    std::vector<std::uint32_t> nz;
    std::vector<double> w;
    for (std::size_t i = 0; i < freq.size(); ++i) {
        if (freq[i] > 0.0) {
            nz.push_back(static_cast<std::uint32_t>(i));
            w.push_back(freq[i]);
        }
    }
    ad::Tape& tape = logp.tape();
    const Array wa({w.size()}, w);
    std::vector<double> tsel(nz.size());
    for (std::size_t i = 0; i < nz.size(); ++i) tsel[i] = target_dd[nz[i]];
    Var lp = gather(reshape(logp, {freq.size()}), nz);
    Var ddv = gather(reshape(dd, {freq.size()}), nz);
    Var ce = -sum(mul_const(lp, wa)) / static_cast<double>(B);
    Var gr = sum(mul_const(square(ddv - tape.constant(Array({tsel.size()}, tsel))), wa)) / static_cast<double>(B);
    return {ce + lambda_grad * gr, ce, gr};
}

SobolevParts sobolev_loss(const BoundWeights& w, const std::vector<const TrainingExample*>& batch,
                          const std::vector<const TangentDirection*>& dirs, const TrainConfig& cfg, double dropout,
                          std::uint64_t dropout_seed) {
    if (batch.empty() || batch.size() != dirs.size()) throw ContractViolation("sobolev_loss: need one direction per example");
    const std::size_t B = batch.size();
    const int K = batch[0]->input.K;
    std::vector<CanonicalInput> xs;
    xs.reserve(3 * B);
    for (const auto* ex : batch) xs.push_back(ex->input);
    for (std::size_t i = 0; i < B; ++i) xs.push_back(perturb(batch[i]->input, *dirs[i], cfg.fd_step));
    for (std::size_t i = 0; i < B; ++i) xs.push_back(perturb(batch[i]->input, *dirs[i], -cfg.fd_step));
    auto [v, s] = pack_inputs(xs);
    ad::Tape& tape = w.vars.at(0).tape();
    ForwardOptions opt{dropout, dropout_seed, B};
    Var out = forward(w, tape.constant(std::move(v)), tape.constant(std::move(s)), K, opt);

    std::vector<std::uint32_t> r0(B), r1(B), r2(B);
    for (std::size_t i = 0; i < B; ++i) {
        r0[i] = static_cast<std::uint32_t>(i);
        r1[i] = static_cast<std::uint32_t>(B + i);
        r2[i] = static_cast<std::uint32_t>(2 * B + i);
    }
    Var logp = gather_rows(out, r0);
    Var dd = (gather_rows(out, r1) - gather_rows(out, r2)) / (2.0 * cfg.fd_step);

    const std::size_t k = static_cast<std::size_t>(K);
    Array freq({B, k}), tdd({B, k});
    for (std::size_t i = 0; i < B; ++i) {
        const Eigen::VectorXd t = target_directional_derivative(*batch[i], *dirs[i]);
        for (std::size_t j = 0; j < k; ++j) {
            freq(i, j) = batch[i]->freq[static_cast<Eigen::Index>(j)];
            tdd(i, j) = t[static_cast<Eigen::Index>(j)];
        }
    }
    return sobolev_from_outputs(logp, dd, freq, tdd, cfg.lambda_grad);
}

double lr_schedule(std::size_t t, const TrainConfig& cfg) {
    if (t < 1) throw ContractViolation("lr_schedule: steps are numbered from 1");
    if (cfg.warmup_steps == 0) return cfg.lr_base;
    const double tt = static_cast<double>(t), w = static_cast<double>(cfg.warmup_steps);
    return t <= cfg.warmup_steps ? cfg.lr_base * tt / w : cfg.lr_base * std::sqrt(w / tt);
}

double dropout_rate(std::size_t t, double initial) {
    return std::min(initial, 1.0 / (10.0 * static_cast<double>(std::max<std::size_t>(t, 1))));
}

double evaluate_loss(const EmulatorWeights& w, const std::map<int, EvalSet>& eval, const TrainConfig& cfg) {
    if (eval.empty()) return std::numeric_limits<double>::quiet_NaN();
    constexpr std::size_t kChunk = 2000;
    double total = 0.0;
    for (const auto& [K, set] : eval) {
        const std::size_t n = set.examples.size();
        if (n == 0 || set.directions.empty()) throw ContractViolation("evaluate_loss: empty eval set");
        double acc = 0.0;
        for (std::size_t start = 0; start < n; start += kChunk) {
            const std::size_t end = std::min(n, start + kChunk);
            std::vector<const TrainingExample*> ex;
            std::vector<const TangentDirection*> dirs;
            for (std::size_t i = start; i < end; ++i) {
                ex.push_back(&set.examples[i]);
                dirs.push_back(&set.directions[i % set.directions.size()]);
            }
            ad::Tape tape;
            auto bw = bind(tape, w, false);
            acc += sobolev_loss(bw, ex, dirs, cfg).loss.item() * static_cast<double>(end - start);
        }
        total += acc / static_cast<double>(n);
    }
    return total / static_cast<double>(eval.size());
}

CrossEntropy cross_entropy(const EmulatorWeights& w, const std::vector<TrainingExample>& examples) {
    CrossEntropy out;
    if (examples.empty()) return out;
    std::map<int, std::vector<const TrainingExample*>> byK;
    for (const auto& ex : examples) byK[ex.input.K].push_back(&ex);
    for (const auto& [K, group] : byK) {
        std::vector<CanonicalInput> xs;
        for (const auto* ex : group) xs.push_back(ex->input);
        const Eigen::MatrixXd lp = forward_batch(w, xs);
        for (std::size_t i = 0; i < group.size(); ++i) {
            const auto& f = group[i]->freq;
            for (int j = 0; j < K; ++j) {
                if (f[j] <= 0.0) continue;
                out.ce -= f[j] * lp(static_cast<Eigen::Index>(i), j);
                out.entropy -= f[j] * std::log(f[j]);
            }
        }
    }
    out.ce /= static_cast<double>(examples.size());
    out.entropy /= static_cast<double>(examples.size());
    return out;
}

TrainResult train(const TrainConfig& cfg, EmulatorWeights init, const std::map<int, ReplayBuffers>& buffers,
                  const std::map<int, EvalSet>& eval, std::uint64_t seed, const ProgressFn& progress) {
    if (buffers.empty()) throw ContractViolation("train: no replay buffers");
    if (buffers.size() > 1 && !init.config.multi_k) {
        throw ContractViolation("train: several K values need a multi-K configuration");
    }
    if (cfg.batch_size == 0) throw ContractViolation("train: batch size must be positive");
    validate(init);
    TrainResult res;
    res.weights = std::move(init);
    auto& params = res.weights.arrays;
    std::vector<std::vector<double>> m(params.size()), v(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        m[p].assign(params[p].size(), 0.0);
        v[p].assign(params[p].size(), 0.0);
    }
    std::vector<const TrainingExample*> ex;
    std::vector<const TangentDirection*> dirs;

    for (std::size_t t = 1; t <= cfg.steps; ++t) {
        ad::Tape tape;
        auto bw = bind(tape, res.weights, true);
        const double p_drop = dropout_rate(t, res.weights.config.dropout_initial);
        Var loss;
        std::string ids;
        for (const auto& [K, buf] : buffers) {
            Rng rng(derive_seed(seed, t, static_cast<std::uint64_t>(K)));
            buf.sample(cfg.batch_size, rng, ex, dirs);
            Var l = sobolev_loss(bw, ex, dirs, cfg, p_drop, derive_seed(seed ^ 0x5bd1e995u, t, static_cast<std::uint64_t>(K))).loss;
            loss = loss.valid() ? loss + l : l;
            if (!std::isfinite(l.item())) {
                for (std::size_t i = 0; i < std::min<std::size_t>(ex.size(), 20); ++i)
                    ids += (ids.empty() ? "" : ",") + std::to_string(ex[i] - buf.examples.data());
                throw TrainingError("non-finite loss at step " + std::to_string(t) + " (K=" + std::to_string(K) +
                                    ", first example ids " + ids + ")");
            }
        }
        if (buffers.size() > 1) loss = loss / static_cast<double>(buffers.size());
        tape.backward(loss);

        std::vector<Array> grads;
        grads.reserve(params.size());
        double norm2 = 0.0;
        for (const auto& var : bw.vars) {
            grads.push_back(tape.grad(var));
            for (double g : grads.back().values()) norm2 += g * g;
        }
        const double norm = std::sqrt(norm2);
        const double clip = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
        const double lr = lr_schedule(t, cfg);
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (std::size_t p = 0; p < params.size(); ++p) {
            double* w = params[p].data();
            const double* g = grads[p].data();
            for (std::size_t i = 0; i < params[p].size(); ++i) {
                const double gi = g[i] * clip;
                m[p][i] = cfg.beta1 * m[p][i] + (1.0 - cfg.beta1) * gi;
                v[p][i] = cfg.beta2 * v[p][i] + (1.0 - cfg.beta2) * gi * gi;
                w[i] *= 1.0 - lr * cfg.weight_decay;
                w[i] -= lr * (m[p][i] / bc1) / (std::sqrt(v[p][i] / bc2) + cfg.adam_eps);
            }
        }

        LossRecord rec;
        rec.step = t;
        rec.train_loss = loss.item();
        if (cfg.eval_every > 0 && t % cfg.eval_every == 0 && !eval.empty()) {
            rec.eval_loss = evaluate_loss(res.weights, eval, cfg);
        }
        res.trace.push_back(rec);
        if (progress) progress(rec);
    }
    return res;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& trace) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << "step,train_loss,eval_loss\n";
    char line[96];
    for (const auto& r : trace) {
        if (r.eval_loss) {
            std::snprintf(line, sizeof line, "%zu,%.10g,%.10g\n", r.step, r.train_loss, *r.eval_loss);
        } else {
            std::snprintf(line, sizeof line, "%zu,%.10g,\n", r.step, r.train_loss);
        }
        out << line;
    }
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace cemu
