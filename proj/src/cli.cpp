#include "cemu/cli.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include "cemu/dataset_io.hpp"
#include "cemu/emulator.hpp"
#include "cemu/estimation.hpp"
#include "cemu/manifest.hpp"
#include "cemu/parallel.hpp"
#include "cemu/separation.hpp"
#include "cemu/training.hpp"

#ifndef CEMU_VERSION
#define CEMU_VERSION "0.0.0"
#endif

namespace cemu {

namespace {

namespace fs = std::filesystem;
namespace ptree = boost::property_tree;

class CliError : public std::runtime_error {
public:
    CliError(int code, const std::string& msg) : std::runtime_error(msg), code(code) {}
    int code;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

std::string fmt(double x) {
    char b[32];
    std::snprintf(b, sizeof b, "%.17g", x);
    return b;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    // Commas inside parentheses belong to the item, e.g. "ghk(50)".
    int depth = 0;
    for (char c : s) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (c == ',' && depth == 0) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
    for (const auto& e : out)
        if (e.empty()) throw CliError(kExitMismatch, "empty entry in list '" + s + "'");
    return out;
}

fs::path manifest_path(const std::string& explicit_path, const std::string& primary) {
    if (!explicit_path.empty()) return explicit_path;
    return primary + ".manifest.json";
}

fs::path sibling(const std::string& path, const std::string& suffix) {
    fs::path p(path);
    return p.replace_extension(suffix);
}

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw CliError(kExitMissing, what + " is required");
    if (!fs::is_regular_file(path)) throw CliError(kExitMissing, what + " not found: " + path);
}

void probe_writable(const std::string& path) {
    const bool existed = fs::exists(path);
    {
        std::ofstream probe(path, std::ios::binary | std::ios::app);
        if (!probe) throw IoError("cannot open " + path + " for writing");
    }
    if (!existed) fs::remove(path);
}

// Manifest bookkeeping shared by the subcommands.
class Run {
public:
    Run(std::string command, std::uint64_t seed) {
        m_.command = std::move(command);
        m_.seed = seed;
        m_.version = CEMU_VERSION;
        m_.started = utc_timestamp();
        m_.config = ojson::object();
    }
    void arg(const std::string& flag, const std::string& value) {
        options_.push_back(flag);
        options_.push_back(value);
        m_.config[flag.substr(2)] = value;
    }
    void flag(const std::string& f) {
        options_.push_back(f);
        m_.config[f.substr(2)] = true;
    }
    void positional(const std::string& value) { positional_.push_back(value); }
    ojson& config() { return m_.config; }
    ojson& extra() { return m_.extra; }
    void input(const std::string& role, const std::string& path, const std::string& flag = {}) {
        m_.inputs.push_back(file_record(role, path, flag));
    }
    FileRecord& output(const std::string& role, const std::string& path, const std::string& flag = {}) {
        m_.outputs.push_back(file_record(role, path, flag));
        return m_.outputs.back();
    }
    void write(const fs::path& path) {
        m_.argv = {m_.command};
        m_.argv.insert(m_.argv.end(), positional_.begin(), positional_.end());
        m_.argv.insert(m_.argv.end(), options_.begin(), options_.end());
        m_.finished = utc_timestamp();
        write_manifest(path, m_);
    }

private:
    RunManifest m_;
    std::vector<std::string> positional_, options_;
};

// INI configuration ---------------------------------------------------------------

struct Ini {
    ptree::ptree tree;
    std::string text;
    fs::path path;
};

Ini load_ini(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    Ini ini;
    ini.text = ss.str();
    ini.path = fs::absolute(path).lexically_normal();
    std::istringstream is(ini.text);
    try {
        ptree::read_ini(is, ini.tree);
    } catch (const ptree::ini_parser_error& e) {
        throw CliError(kExitMismatch, "config " + path + ": " + e.message() + " at line " + std::to_string(e.line()));
    }
    return ini;
}

/// "*" admits any key in a section.
void check_keys(const Ini& ini, const std::map<std::string, std::set<std::string>>& allowed) {
    for (const auto& [section, body] : ini.tree) {
        if (body.empty() && !body.data().empty()) {
            throw CliError(kExitMismatch, ini.path.string() + ": key '" + section + "' outside a section");
        }
        const auto it = allowed.find(section);
        if (it == allowed.end()) throw CliError(kExitMismatch, ini.path.string() + ": unknown section [" + section + "]");
        for (const auto& kv : body) {
            if (!it->second.count(kv.first) && !it->second.count("*")) {
                throw CliError(kExitMismatch,
                               ini.path.string() + ": unknown key '" + kv.first + "' in [" + section + "]");
            }
        }
    }
}

template <class T>
T parse_value(const std::string& raw, const std::string& where) {
    const std::string s = trim(raw);
    if constexpr (std::is_same_v<T, bool>) {
        if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
        if (s == "false" || s == "0" || s == "no" || s == "off") return false;
        throw CliError(kExitMismatch, where + ": expected a boolean, got '" + s + "'");
    } else if constexpr (std::is_same_v<T, std::string>) {
        return s;
    } else {
        T v{};
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size()) {
            throw CliError(kExitMismatch, where + ": cannot parse '" + s + "'");
        }
        return v;
    }
}

std::optional<std::string> ini_raw(const std::optional<Ini>& ini, const std::string& key) {
    if (!ini) return std::nullopt;
    const auto v = ini->tree.get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return *v;
}

template <class T>
T ini_get(const std::optional<Ini>& ini, const std::string& key, T def) {
    const auto raw = ini_raw(ini, key);
    return raw ? parse_value<T>(*raw, ini->path.string() + " [" + key + "]") : def;
}

ojson ini_echo(const Ini& ini) {
    ojson j = ojson::object();
    for (const auto& [section, body] : ini.tree) {
        ojson s = ojson::object();
        for (const auto& kv : body) s[kv.first] = kv.second.data();
        j[section] = s;
    }
    return j;
}

// JSON helpers for numeric vectors with possible NaN ---------------------------------

ojson vec_json(const Eigen::VectorXd& v) {
    ojson a = ojson::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (std::isfinite(v[i])) {
            a.push_back(v[i]);
        } else {
            a.push_back(nullptr);
        }
    }
    return a;
}

Eigen::VectorXd vec_from_json(const ojson& a) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) {
        v[static_cast<Eigen::Index>(i)] = a[i].is_null() ? std::nan("") : a[i].get<double>();
    }
    return v;
}

ojson num_json(double x) { return std::isfinite(x) ? ojson(x) : ojson(nullptr); }
double num_from_json(const ojson& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

// gen-data ----------------------------------------------------------------------------

struct GenDataOpts {
    int K = 0;
    std::string family = "gaussian";
    double nu = 5.0;
    std::size_t count = 0;
    std::uint64_t R = 100000;
    double tau = 3.0;
    std::uint64_t seed = 1;
    std::size_t first_index = 0;
    std::string out, manifest;
    unsigned jobs = 1;
};

int cmd_gen_data(const GenDataOpts& o, std::ostream& out, std::ostream&) {
    if (o.K < 2) throw CliError(kExitMismatch, "--K must be at least 2");
    if (o.R == 0 || o.R > 0xffffffffULL) throw CliError(kExitMismatch, "--R must lie in [1, 2^32)");
    const ErrorFamily family = parse_family(o.family, o.nu);
    Run run("gen-data", o.seed);
    run.arg("--K", std::to_string(o.K));
    run.arg("--family", o.family);
    if (family.kind == FamilyKind::student_t) run.arg("--nu", fmt(o.nu));
    run.arg("--count", std::to_string(o.count));
    run.arg("--R", std::to_string(o.R));
    run.arg("--tau", fmt(o.tau));
    run.arg("--seed", std::to_string(o.seed));
    run.arg("--first-index", std::to_string(o.first_index));
    run.arg("--out", absolute(o.out));
    run.config()["jobs"] = o.jobs;
    probe_writable(o.out);

    const auto t0 = Clock::now();
    GenOptions gen;
    gen.R = o.R;
    gen.tau = o.tau;
    const auto examples = gen_training_examples(o.K, family, o.count, o.seed, gen, o.jobs, o.first_index);
    ShardHeader header;
    header.K = static_cast<std::uint32_t>(o.K);
    header.count = o.count;
    header.family = family;
    header.R = static_cast<std::uint32_t>(o.R);
    header.tau = o.tau;
    write_shard(o.out, header, examples);

    run.output("shard", o.out, "--out");
    run.extra()["bytes"] = fs::file_size(o.out);
    run.extra()["seconds"] = seconds_since(t0);
    run.write(manifest_path(o.manifest, o.out));
    out << "wrote " << o.count << " examples (K=" << o.K << ", " << o.family << ") to " << o.out << '\n';
    return kExitOk;
}

// train -------------------------------------------------------------------------------

struct TrainOpts {
    std::vector<std::string> shards, eval_shards;
    std::string config, out, loss_csv, init, manifest;
    std::uint64_t seed = 1;
    bool quiet = false;
};

const std::set<std::string> kTrainKeys = {"steps",       "batch_size",   "lr_base",   "beta1",      "beta2",
                                          "adam_eps",    "weight_decay", "warmup_steps", "grad_clip", "lambda_grad",
                                          "tau",         "fd_step",      "eval_every", "eval_count"};
const std::set<std::string> kModelKeys = {"preset", "multi_k", "Ks", "dropout_initial"};

std::string k_list(const std::set<int>& ks) {
    std::string s;
    for (int k : ks) s += (s.empty() ? "" : ",") + std::to_string(k);
    return s;
}

int cmd_train(const TrainOpts& o, std::ostream& out, std::ostream& err) {
    Run run("train", o.seed);
    std::optional<Ini> ini;
    if (!o.config.empty()) {
        ini = load_ini(o.config);
        check_keys(*ini, {{"train", kTrainKeys}, {"model", kModelKeys}});
    }
    TrainConfig cfg;
    cfg.steps = ini_get(ini, "train.steps", cfg.steps);
    cfg.batch_size = ini_get(ini, "train.batch_size", cfg.batch_size);
    cfg.lr_base = ini_get(ini, "train.lr_base", cfg.lr_base);
    cfg.beta1 = ini_get(ini, "train.beta1", cfg.beta1);
    cfg.beta2 = ini_get(ini, "train.beta2", cfg.beta2);
    cfg.adam_eps = ini_get(ini, "train.adam_eps", cfg.adam_eps);
    cfg.weight_decay = ini_get(ini, "train.weight_decay", cfg.weight_decay);
    cfg.warmup_steps = ini_get(ini, "train.warmup_steps", cfg.warmup_steps);
    cfg.grad_clip = ini_get(ini, "train.grad_clip", cfg.grad_clip);
    cfg.lambda_grad = ini_get(ini, "train.lambda_grad", cfg.lambda_grad);
    cfg.tau = ini_get(ini, "train.tau", cfg.tau);
    cfg.fd_step = ini_get(ini, "train.fd_step", cfg.fd_step);
    cfg.eval_every = ini_get(ini, "train.eval_every", cfg.eval_every);
    const auto eval_count = ini_get<std::size_t>(ini, "train.eval_count", 0);

    std::map<int, std::vector<TrainingExample>> by_k;
    for (const auto& p : o.shards) {
        Shard s = read_shard(p);
        auto& dst = by_k[static_cast<int>(s.header.K)];
        std::move(s.examples.begin(), s.examples.end(), std::back_inserter(dst));
        run.input("shard", p);
        run.positional(absolute(p));
    }
    std::set<int> ks;
    for (const auto& [k, v] : by_k) ks.insert(k);

    const bool has_model = ini && ini->tree.get_child_optional("model");
    if (!o.init.empty() && has_model) {
        throw CliError(kExitMismatch, "--init takes its architecture from the weights file; drop the [model] section");
    }
    EmulatorWeights init;
    if (!o.init.empty()) {
        require_file(o.init, "initial weights");
        init = load_weights(o.init);
        run.input("init_weights", o.init, "--init");
    } else {
        const int kmax = *ks.rbegin();
        const int preset = ini_get(ini, "model.preset", kmax <= 3 ? 3 : (kmax <= 5 ? 5 : 10));
        EmulatorConfig ec = EmulatorConfig::preset(preset);
        ec.multi_k = ini_get(ini, "model.multi_k", false);
        ec.dropout_initial = ini_get(ini, "model.dropout_initial", ec.dropout_initial);
        init = init_weights(ec, derive_seed(o.seed, 0x1a17));
    }
    const bool multi_k = init.config.multi_k;
    if (ks.size() > 1 && !multi_k) {
        throw CliError(kExitMismatch, "shards mix K values {" + k_list(ks) + "} but the model is not multi-K");
    }
    if (const auto raw = ini_raw(ini, "model.Ks")) {
        std::set<int> want;
        for (const auto& e : split_list(*raw)) want.insert(parse_value<int>(e, "[model] Ks"));
        if (want != ks) {
            throw CliError(kExitMismatch, "shards cover K {" + k_list(ks) + "} but [model] Ks is {" + k_list(want) + "}");
        }
    }

    std::map<int, EvalSet> eval;
    for (const auto& p : o.eval_shards) {
        Shard s = read_shard(p);
        const int K = static_cast<int>(s.header.K);
        if (!ks.count(K)) throw CliError(kExitMismatch, "eval shard " + p + " has K=" + std::to_string(K) + " not in training shards");
        auto& dst = eval[K].examples;
        std::move(s.examples.begin(), s.examples.end(), std::back_inserter(dst));
        run.input("eval_shard", p);
    }
    if (o.eval_shards.empty() && eval_count > 0) {
        for (auto& [K, ex] : by_k) {
            if (eval_count >= ex.size()) {
                throw CliError(kExitMismatch, "eval_count " + std::to_string(eval_count) + " leaves no training examples at K=" +
                                                  std::to_string(K));
            }
            auto& dst = eval[K].examples;
            dst.assign(std::make_move_iterator(ex.end() - static_cast<std::ptrdiff_t>(eval_count)),
                       std::make_move_iterator(ex.end()));
            ex.resize(ex.size() - eval_count);
        }
    }
    for (auto& [K, set] : eval) set.directions = make_directions(K, set.examples.size(), derive_seed(o.seed, 0xe7a1, K));
    std::map<int, ReplayBuffers> buffers;
    for (auto& [K, ex] : by_k) {
        if (ex.empty()) throw CliError(kExitMismatch, "no training examples at K=" + std::to_string(K));
        auto& buf = buffers[K];
        buf.directions = make_directions(K, ex.size(), derive_seed(o.seed, 0xd1c7, K));
        buf.examples = std::move(ex);
    }

    const std::string loss_csv = o.loss_csv.empty() ? sibling(o.out, ".loss.csv").string() : o.loss_csv;
    for (const auto& p : o.eval_shards) run.arg("--eval-shard", absolute(p));
    if (!o.config.empty()) run.arg("--config", absolute(o.config));
    if (!o.init.empty()) run.arg("--init", absolute(o.init));
    run.arg("--out", absolute(o.out));
    run.arg("--loss-csv", absolute(loss_csv));
    run.arg("--seed", std::to_string(o.seed));
    if (!o.eval_shards.empty()) run.config()["eval-shard"] = o.eval_shards;
    if (ini) run.config()["config_file"] = {{"path", ini->path.string()}, {"text", ini->text}, {"parsed", ini_echo(*ini)}};
    run.config()["train"] = {{"steps", cfg.steps},
                             {"batch_size", cfg.batch_size},
                             {"lr_base", cfg.lr_base},
                             {"beta1", cfg.beta1},
                             {"beta2", cfg.beta2},
                             {"adam_eps", cfg.adam_eps},
                             {"weight_decay", cfg.weight_decay},
                             {"warmup_steps", cfg.warmup_steps},
                             {"grad_clip", cfg.grad_clip},
                             {"lambda_grad", cfg.lambda_grad},
                             {"tau", cfg.tau},
                             {"fd_step", cfg.fd_step},
                             {"eval_every", cfg.eval_every},
                             {"eval_count", eval_count}};
    run.config()["model"] = {{"multi_k", multi_k}, {"Ks", std::vector<int>(ks.begin(), ks.end())},
                             {"parameters", init.parameter_count()}};
    probe_writable(o.out);
    probe_writable(loss_csv);

    const auto t0 = Clock::now();
    const auto progress = [&](const LossRecord& r) {
        if (o.quiet) return;
        if (r.eval_loss || r.step % std::max<std::size_t>(cfg.eval_every, 1) == 0) {
            err << "step " << r.step << "  train " << r.train_loss;
            if (r.eval_loss) err << "  eval " << *r.eval_loss;
            err << "  (" << static_cast<long>(seconds_since(t0)) << " s)\n";
        }
    };
    const TrainResult res = train(cfg, std::move(init), buffers, eval, o.seed, progress);
    save_weights(res.weights, o.out);
    write_loss_csv(loss_csv, res.trace);

    run.output("weights", o.out, "--out");
    run.output("loss_csv", loss_csv, "--loss-csv");
    ojson& ex = run.extra();
    ex["seconds"] = seconds_since(t0);
    if (!res.trace.empty()) ex["final_train_loss"] = num_json(res.trace.back().train_loss);
    for (auto it = res.trace.rbegin(); it != res.trace.rend(); ++it) {
        if (it->eval_loss) {
            ex["final_eval_loss"] = num_json(*it->eval_loss);
            break;
        }
    }
    for (const auto& [K, buf] : buffers) ex["train_examples"][std::to_string(K)] = buf.examples.size();
    for (const auto& [K, set] : eval) {
        const CrossEntropy ce = cross_entropy(res.weights, set.examples);
        ex["eval"][std::to_string(K)] = {{"examples", set.examples.size()},
                                         {"cross_entropy", ce.ce},
                                         {"entropy_floor", ce.entropy},
                                         {"gap", ce.ce - ce.entropy}};
        out << "K=" << K << " eval cross-entropy " << ce.ce << " (floor " << ce.entropy << ", gap " << ce.ce - ce.entropy
            << ")\n";
    }
    run.write(manifest_path(o.manifest, o.out));
    out << "wrote weights to " << o.out << " and " << res.trace.size() << " loss rows to " << loss_csv << '\n';
    return kExitOk;
}

// estimate ------------------------------------------------------------------------------

struct EstimateOpts {
    std::string data, spec = "dense", backend = "ghk", weights, out, manifest;
    std::size_t R = 50;
    int K = 0;
    std::uint64_t seed = 0;
    double lambda = 0.1;
    bool sandwich = false;
    int max_iter = 500;
};

std::shared_ptr<const EmulatorWeights> load_required_weights(const std::string& path, const std::string& what) {
    require_file(path, what);
    return std::make_shared<const EmulatorWeights>(load_weights(path));
}

int cmd_estimate(const EstimateOpts& o, std::ostream& out, std::ostream&) {
    Run run("estimate", o.seed);
    const SigmaParam sp = parse_sigma_param(o.spec);
    if (o.backend != "ghk" && o.backend != "emulator") {
        throw CliError(kExitMismatch, "--backend must be ghk or emulator, got '" + o.backend + "'");
    }
    ChoiceDataset data = read_dataset_csv(o.data);
    if (o.K != 0 && o.K != data.K) {
        throw CliError(kExitMismatch, "--K " + std::to_string(o.K) + " does not match the dataset (K=" +
                                          std::to_string(data.K) + ")");
    }
    data.seed = o.seed;
    run.input("dataset", o.data, "--data");
    ModelSpec spec;
    spec.K = data.K;
    spec.p = data.p;
    spec.sigma_param = sp;
    spec.lambda_reg = o.lambda;
    if (o.backend == "emulator") {
        spec.backend = Backend::emulator(load_required_weights(o.weights, "--weights for the emulator backend"));
        run.input("weights", o.weights, "--weights");
    } else {
        if (o.R == 0) throw CliError(kExitMismatch, "--R must be positive");
        spec.backend = Backend::ghk(o.R);
    }
    validate(data, spec);

    run.arg("--data", absolute(o.data));
    run.arg("--spec", to_string(sp));
    run.arg("--backend", o.backend);
    if (o.backend == "emulator") {
        run.arg("--weights", absolute(o.weights));
    } else {
        run.arg("--R", std::to_string(o.R));
    }
    if (o.K != 0) run.arg("--K", std::to_string(o.K));
    run.arg("--seed", std::to_string(o.seed));
    run.arg("--lambda", fmt(o.lambda));
    run.arg("--max-iter", std::to_string(o.max_iter));
    if (o.sandwich) run.flag("--sandwich");
    run.arg("--out", absolute(o.out));
    const std::string csv_path = o.out + ".csv", txt_path = o.out + ".txt";
    probe_writable(csv_path);
    probe_writable(txt_path);

    const auto t0 = Clock::now();
    const Objective obj(spec, data);
    LbfgsOptions lopt;
    lopt.max_iterations = o.max_iter;
    const FitResult fit = fit_mle(obj, std::nullopt, lopt);
    StandardErrors se;
    if (fit.status != FitStatus::failed) {
        se = standard_errors(obj, fit.theta, o.sandwich);
    } else {
        se.message = "not computed: fit failed";
    }
    double loglik = std::nan("");
    if (fit.status != FitStatus::failed) loglik = obj.evaluate(fit.theta).loglik;
    const auto names = theta_names(spec);

    {
        std::ofstream csv(csv_path, std::ios::binary);
        if (!csv) throw IoError("cannot open " + csv_path);
        csv << "parameter,estimate,se\n";
        for (std::size_t i = 0; i < names.size(); ++i) {
            const double est = i < static_cast<std::size_t>(fit.theta.size()) ? fit.theta[static_cast<Eigen::Index>(i)] : std::nan("");
            const double s = se.ok ? se.se[static_cast<Eigen::Index>(i)] : std::nan("");
            csv << names[i] << ',' << fmt(est) << ',' << fmt(s) << '\n';
        }
        if (!csv) throw IoError("failed writing " + csv_path);
    }
    {
        std::ofstream txt(txt_path, std::ios::binary);
        if (!txt) throw IoError("cannot open " + txt_path);
        char line[256];
        txt << "dataset   " << absolute(o.data) << "  (n=" << data.n() << ", K=" << data.K << ", p=" << data.p << ")\n";
        txt << "model     " << to_string(sp) << " covariance, " << spec.backend.label() << " likelihood, lambda "
            << o.lambda << "\n";
        txt << "fit       " << to_string(fit.status) << " after " << fit.iterations << " iterations (" << fit.evaluations
            << " evaluations), gradient norm " << fit.grad_norm << "\n";
        if (!fit.message.empty()) txt << "          " << fit.message << "\n";
        std::snprintf(line, sizeof line, "loglik    total %.10g, mean %.10g, penalized objective %.10g\n",
                      loglik * static_cast<double>(data.n()), loglik, fit.value);
        txt << line;
        txt << "se        " << (o.sandwich ? "sandwich" : "outer product plus penalty curvature");
        if (se.ok) {
            txt << ", min eigenvalue " << se.min_eigenvalue << "\n";
        } else {
            txt << ": " << se.message << "\n";
        }
        txt << "\n";
        std::snprintf(line, sizeof line, "%-12s %14s %12s\n", "parameter", "estimate", "se");
        txt << line;
        for (std::size_t i = 0; i < names.size(); ++i) {
            const double s = se.ok ? se.se[static_cast<Eigen::Index>(i)] : std::nan("");
            const double est = i < static_cast<std::size_t>(fit.theta.size()) ? fit.theta[static_cast<Eigen::Index>(i)] : std::nan("");
            std::snprintf(line, sizeof line, "%-12s %14.6f %12.6f\n", names[i].c_str(), est, s);
            txt << line;
        }
        if (!txt) throw IoError("failed writing " + txt_path);
    }

    run.output("estimates_csv", csv_path, "--out");
    run.output("report_txt", txt_path);
    run.extra() = {{"status", to_string(fit.status)},
                   {"iterations", fit.iterations},
                   {"loglik_mean", num_json(loglik)},
                   {"se_ok", se.ok},
                   {"seconds", seconds_since(t0)}};
    run.write(manifest_path(o.manifest, o.out));
    std::ifstream txt(txt_path);
    out << txt.rdbuf();
    return kExitOk;
}

// gen-dataset ------------------------------------------------------------------------

struct GenDatasetOpts {
    int K = 3, p = 2;
    std::string spec = "dense", dgp = "probit", weights, out, truth, manifest;
    std::size_t n = 0;
    std::uint64_t seed = 1;
};

int cmd_gen_dataset(const GenDatasetOpts& o, std::ostream& out, std::ostream&) {
    Run run("gen-dataset", o.seed);
    if (o.K < 2 || o.p < 1) throw CliError(kExitMismatch, "need K >= 2 and p >= 1");
    ModelSpec spec;
    spec.K = o.K;
    spec.p = o.p;
    spec.sigma_param = parse_sigma_param(o.spec);
    const Dgp dgp = parse_dgp(o.dgp);
    std::shared_ptr<const EmulatorWeights> w;
    if (dgp == Dgp::emulator_rum) {
        w = load_required_weights(o.weights, "--weights for the emulator DGP");
        run.input("weights", o.weights, "--weights");
    }
    const std::string truth_path = o.truth.empty() ? sibling(o.out, ".truth.csv").string() : o.truth;
    run.arg("--K", std::to_string(o.K));
    run.arg("--p", std::to_string(o.p));
    run.arg("--spec", to_string(spec.sigma_param));
    run.arg("--dgp", to_string(dgp));
    if (w) run.arg("--weights", absolute(o.weights));
    run.arg("--n", std::to_string(o.n));
    run.arg("--seed", std::to_string(o.seed));
    run.arg("--out", absolute(o.out));
    run.arg("--truth", absolute(truth_path));

    const Eigen::VectorXd theta = draw_true_theta(spec, derive_seed(o.seed, 1));
    const ChoiceDataset data = generate_dgp_dataset(spec, theta, o.n, dgp, derive_seed(o.seed, 2), w.get());
    write_dataset_csv(o.out, data);
    {
        std::ofstream t(truth_path, std::ios::binary);
        if (!t) throw IoError("cannot open " + truth_path);
        const auto names = theta_names(spec);
        t << "parameter,value\n";
        for (std::size_t i = 0; i < names.size(); ++i) t << names[i] << ',' << fmt(theta[static_cast<Eigen::Index>(i)]) << '\n';
        if (!t) throw IoError("failed writing " + truth_path);
    }
    run.output("dataset", o.out, "--out");
    run.output("truth_csv", truth_path, "--truth");
    run.write(manifest_path(o.manifest, o.out));
    out << "wrote " << o.n << " observations (K=" << o.K << ", p=" << o.p << ", " << to_string(dgp) << ") to " << o.out
        << '\n';
    return kExitOk;
}

// simulate ------------------------------------------------------------------------------

struct SimulateOpts {
    std::string config, out, replications, manifest;
    bool resume = false;
    unsigned jobs = 1;
    bool quiet = false;
};

Backend parse_method(const std::string& s) {
    if (s == "emulator") return Backend::emulator(nullptr);
    if (s == "ghk") return Backend::ghk(50);
    static const std::regex re(R"(ghk\s*[\(:]?\s*(\d+)\s*\)?)");
    std::smatch m;
    if (std::regex_match(s, m, re)) {
        const auto R = parse_value<std::size_t>(m[1].str(), "method " + s);
        if (R == 0) throw CliError(kExitMismatch, "GHK needs R > 0");
        return Backend::ghk(R);
    }
    throw CliError(kExitMismatch, "unknown method '" + s + "' (expected emulator or ghk(R))");
}

ojson replication_json(const Replication& r, std::uint64_t seed) {
    return {{"rep", r.rep},         {"seed", seed},
            {"failed", r.failed},   {"status", to_string(r.status)},
            {"message", r.message}, {"theta_true", vec_json(r.theta_true)},
            {"theta_hat", vec_json(r.theta_hat)}, {"se", vec_json(r.se)},
            {"time_s", r.time_s}};
}

FitStatus parse_status(const std::string& s) {
    for (FitStatus f : {FitStatus::converged, FitStatus::max_iterations, FitStatus::stalled, FitStatus::failed})
        if (to_string(f) == s) return f;
    throw IoError("unknown fit status '" + s + "' in manifest");
}

Replication replication_from_json(const ojson& j) {
    Replication r;
    r.rep = j.at("rep").get<std::size_t>();
    r.failed = j.at("failed").get<bool>();
    r.status = parse_status(j.at("status").get<std::string>());
    r.message = j.at("message").get<std::string>();
    r.theta_true = vec_from_json(j.at("theta_true"));
    r.theta_hat = vec_from_json(j.at("theta_hat"));
    r.se = vec_from_json(j.at("se"));
    r.time_s = j.at("time_s").get<double>();
    return r;
}

ojson row_json(const MetricsRow& r) {
    ojson params = ojson::array();
    for (const auto& p : r.parameters) {
        params.push_back({{"name", p.name},
                          {"mean_error", num_json(p.mean_error)},
                          {"mcse", num_json(p.mcse)},
                          {"emp_sd", num_json(p.emp_sd)},
                          {"mean_se", num_json(p.mean_se)}});
    }
    return {{"n", r.n},
            {"dgp", to_string(r.dgp)},
            {"method", r.method},
            {"spec", to_string(r.spec)},
            {"K", r.K},
            {"rmse", num_json(r.rmse)},
            {"rmse_mcse", num_json(r.rmse_mcse)},
            {"rms_bias", num_json(r.rms_bias)},
            {"rms_bias_mcse", num_json(r.rms_bias_mcse)},
            {"se_ratio", num_json(r.se_ratio)},
            {"se_ratio_mcse", num_json(r.se_ratio_mcse)},
            {"coverage", num_json(r.coverage)},
            {"coverage_mcse", num_json(r.coverage_mcse)},
            {"time_s", num_json(r.time_s)},
            {"time_mcse", num_json(r.time_mcse)},
            {"failures", r.failures},
            {"parameters", params}};
}

MetricsRow row_from_json(const ojson& j) {
    MetricsRow r;
    r.n = j.at("n").get<std::size_t>();
    r.dgp = parse_dgp(j.at("dgp").get<std::string>());
    r.method = j.at("method").get<std::string>();
    r.spec = parse_sigma_param(j.at("spec").get<std::string>());
    r.K = j.at("K").get<int>();
    r.rmse = num_from_json(j.at("rmse"));
    r.rmse_mcse = num_from_json(j.at("rmse_mcse"));
    r.rms_bias = num_from_json(j.at("rms_bias"));
    r.rms_bias_mcse = num_from_json(j.at("rms_bias_mcse"));
    r.se_ratio = num_from_json(j.at("se_ratio"));
    r.se_ratio_mcse = num_from_json(j.at("se_ratio_mcse"));
    r.coverage = num_from_json(j.at("coverage"));
    r.coverage_mcse = num_from_json(j.at("coverage_mcse"));
    r.time_s = num_from_json(j.at("time_s"));
    r.time_mcse = num_from_json(j.at("time_mcse"));
    r.failures = j.at("failures").get<std::size_t>();
    for (const auto& p : j.at("parameters")) {
        r.parameters.push_back({p.at("name").get<std::string>(), num_from_json(p.at("mean_error")),
                                num_from_json(p.at("mcse")), num_from_json(p.at("emp_sd")),
                                num_from_json(p.at("mean_se"))});
    }
    return r;
}

std::string cell_label(std::size_t n, int K, SigmaParam sp, Dgp dgp) {
    return "n=" + std::to_string(n) + " K=" + std::to_string(K) + " " + to_string(sp) + " " + to_string(dgp);
}

void write_replications_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                            const std::vector<std::vector<Replication>>& reps, const std::vector<std::uint64_t>& keys) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "n,K,spec,dgp,method,rep,rep_seed,status,failed,parameter,truth,estimate,se,time_s\n";
    for (std::size_t c = 0; c < rows.size(); ++c) {
        const MetricsRow& row = rows[c];
        for (const Replication& r : reps[c]) {
            for (std::size_t i = 0; i < row.parameters.size(); ++i) {
                const auto at = [&](const Eigen::VectorXd& v) {
                    return static_cast<Eigen::Index>(i) < v.size() ? v[static_cast<Eigen::Index>(i)] : std::nan("");
                };
                out << row.n << ',' << row.K << ',' << to_string(row.spec) << ',' << to_string(row.dgp) << ','
                    << row.method << ',' << r.rep << ',' << replication_seed(keys[c], r.rep) << ','
                    << to_string(r.status) << ',' << (r.failed ? 1 : 0) << ',' << row.parameters[i].name << ','
                    << fmt(at(r.theta_true)) << ',' << fmt(at(r.theta_hat)) << ',' << fmt(at(r.se)) << ','
                    << fmt(r.time_s) << '\n';
            }
        }
    }
    if (!out) throw IoError("failed writing " + path);
}

int cmd_simulate(const SimulateOpts& o, std::ostream& out, std::ostream& err) {
    const Ini ini = load_ini(o.config);
    check_keys(ini, {{"grid", {"n", "K", "spec", "dgp", "method"}},
                     {"study", {"reps", "p", "lambda", "sandwich", "seed", "bootstrap"}},
                     {"weights", {"*"}},
                     {"paths", {"metrics", "replications"}}});
    const std::optional<Ini> opt_ini = ini;
    const fs::path base = ini.path.parent_path();
    const auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).lexically_normal().string(); };

    StudyConfig cfg;
    const auto list = [&](const std::string& key, const std::string& def) {
        return split_list(ini_raw(opt_ini, key).value_or(def));
    };
    cfg.ns.clear();
    for (const auto& s : list("grid.n", "1000")) cfg.ns.push_back(parse_value<std::size_t>(s, "[grid] n"));
    cfg.Ks.clear();
    for (const auto& s : list("grid.K", "3")) cfg.Ks.push_back(parse_value<int>(s, "[grid] K"));
    cfg.specs.clear();
    for (const auto& s : list("grid.spec", "dense")) cfg.specs.push_back(parse_sigma_param(s));
    cfg.dgps.clear();
    for (const auto& s : list("grid.dgp", "probit")) cfg.dgps.push_back(parse_dgp(s));
    for (const auto& s : list("grid.method", "ghk(50)")) cfg.methods.push_back(parse_method(s));
    cfg.reps = ini_get(opt_ini, "study.reps", cfg.reps);
    cfg.p = ini_get(opt_ini, "study.p", cfg.p);
    cfg.lambda_reg = ini_get(opt_ini, "study.lambda", cfg.lambda_reg);
    cfg.sandwich = ini_get(opt_ini, "study.sandwich", cfg.sandwich);
    cfg.seed = ini_get(opt_ini, "study.seed", cfg.seed);
    cfg.bootstrap = ini_get(opt_ini, "study.bootstrap", cfg.bootstrap);
    cfg.jobs = o.jobs;
    if (cfg.reps == 0) throw CliError(kExitMismatch, "[study] reps must be positive");

    Run run("simulate", cfg.seed);
    run.positional(ini.path.string());
    run.input("config", ini.path.string());

    bool need_emulator = std::find(cfg.dgps.begin(), cfg.dgps.end(), Dgp::emulator_rum) != cfg.dgps.end();
    for (const auto& m : cfg.methods) need_emulator = need_emulator || m.kind == BackendKind::emulator;
    ojson weights_echo = ojson::object();
    if (need_emulator) {
        for (int K : cfg.Ks) {
            const auto raw = ini_raw(opt_ini, "weights.K" + std::to_string(K));
            if (!raw) throw CliError(kExitMissing, "emulator weights for K=" + std::to_string(K) + " not configured ([weights] K" + std::to_string(K) + ")");
            const std::string path = resolve(trim(*raw));
            cfg.emulators[K] = load_required_weights(path, "emulator weights for K=" + std::to_string(K));
            run.input("weights_K" + std::to_string(K), path);
            weights_echo["K" + std::to_string(K)] = sha256_file(path);
        }
    }

    const std::string metrics = !o.out.empty() ? o.out : resolve(ini_raw(opt_ini, "paths.metrics").value_or("metrics.csv"));
    const std::string reps_path = !o.replications.empty()
                                      ? o.replications
                                      : (ini_raw(opt_ini, "paths.replications")
                                             ? resolve(*ini_raw(opt_ini, "paths.replications"))
                                             : sibling(metrics, ".reps.csv").string());
    run.arg("--out", absolute(metrics));
    run.arg("--replications", absolute(reps_path));
    run.config()["jobs"] = o.jobs;
    run.config()["config_file"] = {{"path", ini.path.string()}, {"text", ini.text}};
    // Everything that determines the numbers; resume refuses to mix runs that differ here.
    ojson study = ini_echo(ini);
    study.erase("paths");
    study["weights"] = weights_echo;
    run.config()["study"] = study;
    probe_writable(metrics);
    probe_writable(reps_path);
    const fs::path mpath = manifest_path(o.manifest, metrics);

    std::map<std::string, ojson> done;
    if (o.resume && fs::exists(mpath)) {
        const RunManifest prev = read_manifest(mpath);
        if (prev.command != "simulate" || prev.config.value("study", ojson()) != study) {
            throw CliError(kExitMismatch, "--resume: " + mpath.string() + " was written for a different study configuration");
        }
        for (const auto& c : prev.extra.value("cells", ojson::array()))
            if (c.value("complete", false)) done[c.at("label").get<std::string>()] = c;
        out << "resuming: " << done.size() << " completed cells found in " << mpath.string() << '\n';
    }

    std::vector<MetricsRow> rows;
    std::vector<std::vector<Replication>> reps;
    std::vector<std::uint64_t> keys;
    ojson cells = ojson::array();
    std::size_t computed = 0, skipped = 0;
    const auto t0 = Clock::now();
    for (std::size_t n : cfg.ns)
        for (int K : cfg.Ks)
            for (SigmaParam sp : cfg.specs)
                for (Dgp dgp : cfg.dgps) {
                    const std::string label = cell_label(n, K, sp, dgp);
                    const std::uint64_t key = study_cell_key(cfg.seed, n, K, sp, dgp);
                    ojson cell;
                    if (const auto it = done.find(label); it != done.end()) {
                        cell = it->second;
                        ++skipped;
                    } else {
                        StudyConfig one = cfg;
                        one.ns = {n};
                        one.Ks = {K};
                        one.specs = {sp};
                        one.dgps = {dgp};
                        const auto t_cell = Clock::now();
                        const StudyResult res = run_simulation_study(one, [&](const std::string& l, std::size_t d, std::size_t t) {
                            if (!o.quiet && (d == t || d % 10 == 0)) err << l << ": " << d << "/" << t << " replications\n";
                        });
                        cell = {{"label", label}, {"n", n}, {"K", K}, {"spec", to_string(sp)}, {"dgp", to_string(dgp)},
                                {"key", key}, {"complete", true}, {"seconds", seconds_since(t_cell)}};
                        std::vector<std::uint64_t> seeds;
                        for (std::size_t r = 0; r < cfg.reps; ++r) seeds.push_back(replication_seed(key, r));
                        cell["rep_seeds"] = seeds;
                        cell["methods"] = ojson::array();
                        for (std::size_t m = 0; m < res.rows.size(); ++m) {
                            ojson reps_json = ojson::array();
                            for (const auto& r : res.replications[m]) reps_json.push_back(replication_json(r, replication_seed(key, r.rep)));
                            cell["methods"].push_back({{"row", row_json(res.rows[m])}, {"replications", reps_json}});
                        }
                        ++computed;
                    }
                    for (const auto& m : cell.at("methods")) {
                        rows.push_back(row_from_json(m.at("row")));
                        std::vector<Replication> rr;
                        for (const auto& r : m.at("replications")) rr.push_back(replication_from_json(r));
                        reps.push_back(std::move(rr));
                        keys.push_back(key);
                    }
                    cells.push_back(cell);
                    // Checkpoint so an interrupted study can be resumed.
                    run.extra()["cells"] = cells;
                    run.extra()["complete"] = false;
                    write_metrics_csv(metrics, rows);
                    run.write(mpath);
                }

    write_metrics_csv(metrics, rows);
    write_replications_csv(reps_path, rows, reps, keys);
    run.output("metrics_csv", metrics, "--out").stable_sha256 = sha256_csv_without(metrics, {"time_s", "time_mcse"});
    run.output("replications_csv", reps_path, "--replications").stable_sha256 =
        sha256_csv_without(reps_path, {"time_s"});
    run.extra()["complete"] = true;
    run.extra()["cells_computed"] = computed;
    run.extra()["cells_resumed"] = skipped;
    run.extra()["seconds"] = seconds_since(t0);
    run.write(mpath);

    std::size_t failures = 0;
    for (const auto& r : rows) failures += r.failures;
    out << "wrote " << rows.size() << " metric rows to " << metrics << " (" << failures << " failed replications)\n";
    return kExitOk;
}

// recover-check -----------------------------------------------------------------------

struct RecoverOpts {
    int K = 0, j = -1;
    std::size_t instances = 100;
    std::uint64_t seed = 1;
    double tol = kGenericityTol;
    std::string out, manifest;
};

int cmd_recover_check(const RecoverOpts& o, std::ostream& out, std::ostream&) {
    if (o.K > kMaxGenericityK) {
        throw CapabilityError("recover-check supports K <= " + std::to_string(kMaxGenericityK) + " (got K=" +
                              std::to_string(o.K) + ")");
    }
    if (o.K < 2) throw CliError(kExitMismatch, "--K must be at least 2");
    if (o.j >= o.K) throw CliError(kExitMismatch, "--j must be below K");
    const std::optional<int> j = o.j >= 0 ? std::optional<int>(o.j) : std::nullopt;
    const auto t0 = Clock::now();
    const SeparationReport rep = separation_round_trip(o.K, o.instances, o.seed, o.tol, j);
    const double rate = rep.generic ? static_cast<double>(rep.recovered) / static_cast<double>(rep.generic) : std::nan("");
    const std::string jtext = j ? std::to_string(*j) : "cycled";
    out << "K=" << rep.K << " j=" << jtext << " instances=" << rep.instances << " generic=" << rep.generic
        << " violates_a=" << rep.violates_a << " violates_b=" << rep.violates_b << " recovered=" << rep.recovered
        << " success_rate=" << rate << '\n';
    if (o.out.empty() && o.manifest.empty()) return kExitOk;

    Run run("recover-check", o.seed);
    run.arg("--K", std::to_string(o.K));
    if (j) run.arg("--j", std::to_string(*j));
    run.arg("--instances", std::to_string(o.instances));
    run.arg("--seed", std::to_string(o.seed));
    run.arg("--tol", fmt(o.tol));
    if (!o.out.empty()) {
        run.arg("--out", absolute(o.out));
        std::ofstream csv(o.out, std::ios::binary);
        if (!csv) throw IoError("cannot open " + o.out + " for writing");
        csv << "K,j,instances,generic,violates_a,violates_b,recovered,success_rate\n"
            << rep.K << ',' << jtext << ',' << rep.instances << ',' << rep.generic << ',' << rep.violates_a << ','
            << rep.violates_b << ',' << rep.recovered << ',' << fmt(rate) << '\n';
        if (!csv) throw IoError("failed writing " + o.out);
        csv.close();
        run.output("report_csv", o.out, "--out");
    }
    run.extra()["seconds"] = seconds_since(t0);
    run.write(manifest_path(o.manifest, o.out));
    return kExitOk;
}

// eval-emulator ------------------------------------------------------------------------

struct EvalOpts {
    std::string weights, shard, out, manifest;
    std::size_t limit = 0;
};

int cmd_eval_emulator(const EvalOpts& o, std::ostream& out, std::ostream&) {
    const auto w = load_required_weights(o.weights, "--weights");
    const Shard shard = read_shard(o.shard);
    const std::size_t count = o.limit ? std::min(o.limit, shard.examples.size()) : shard.examples.size();
    Run run("eval-emulator", 0);
    run.input("weights", o.weights, "--weights");
    run.input("shard", o.shard, "--shard");
    run.arg("--weights", absolute(o.weights));
    run.arg("--shard", absolute(o.shard));
    if (o.limit) run.arg("--limit", std::to_string(o.limit));
    run.arg("--out", absolute(o.out));
    probe_writable(o.out);

    std::ofstream csv(o.out, std::ios::binary);
    if (!csv) throw IoError("cannot open " + o.out + " for writing");
    csv << "example,K,alternative,predicted,simulated\n";
    const std::size_t K = shard.header.K;
    double abs_sum = 0.0, abs_max = 0.0, ce = 0.0, ent = 0.0;
    constexpr std::size_t kChunk = 1000;
    for (std::size_t a = 0; a < count; a += kChunk) {
        const std::size_t b = std::min(count, a + kChunk);
        std::vector<CanonicalInput> xs;
        for (std::size_t i = a; i < b; ++i) xs.push_back(shard.examples[i].input);
        const Eigen::MatrixXd logp = forward_batch(*w, xs);
        for (std::size_t i = a; i < b; ++i) {
            const auto& f = shard.examples[i].freq;
            for (std::size_t k = 0; k < K; ++k) {
                const double lp = logp(static_cast<Eigen::Index>(i - a), static_cast<Eigen::Index>(k));
                const double pred = std::exp(lp), sim = f[static_cast<Eigen::Index>(k)];
                csv << i << ',' << K << ',' << k + 1 << ',' << fmt(pred) << ',' << fmt(sim) << '\n';
                abs_sum += std::abs(pred - sim);
                abs_max = std::max(abs_max, std::abs(pred - sim));
                if (sim > 0) {
                    ce -= sim * lp;
                    ent -= sim * std::log(sim);
                }
            }
        }
    }
    if (!csv) throw IoError("failed writing " + o.out);
    csv.close();
    const double cells = static_cast<double>(std::max<std::size_t>(count * K, 1));
    const double examples = static_cast<double>(std::max<std::size_t>(count, 1));
    run.output("calibration_csv", o.out, "--out");
    run.extra() = {{"examples", count},
                   {"K", K},
                   {"mean_abs_error", abs_sum / cells},
                   {"max_abs_error", abs_max},
                   {"cross_entropy", ce / examples},
                   {"entropy_floor", ent / examples}};
    run.write(manifest_path(o.manifest, o.out));
    out << "examples=" << count << " K=" << K << " mean_abs_error=" << abs_sum / cells << " max_abs_error=" << abs_max
        << " cross_entropy=" << ce / examples << " entropy_floor=" << ent / examples << '\n';
    return kExitOk;
}

// verify-manifest ------------------------------------------------------------------------

struct VerifyOpts {
    std::string manifest;
    bool rerun = false, keep = false;
};

int cmd_verify(const VerifyOpts& o, std::ostream& out, std::ostream& err) {
    const RunManifest m = read_manifest(o.manifest);
    int rc = kExitOk;
    const auto check = [&](const FileRecord& f, const char* kind) {
        if (!fs::is_regular_file(f.path)) {
            out << "MISSING   " << kind << ' ' << f.role << ' ' << f.path << '\n';
            rc = std::max(rc, kExitMissing);
            return false;
        }
        if (sha256_file(f.path) != f.sha256) {
            out << "CHANGED   " << kind << ' ' << f.role << ' ' << f.path << '\n';
            if (rc == kExitOk) rc = kExitMismatch;
            return false;
        }
        out << "ok        " << kind << ' ' << f.role << ' ' << f.path << '\n';
        return true;
    };
    bool inputs_ok = true;
    for (const auto& f : m.inputs) inputs_ok = check(f, "input ") && inputs_ok;
    for (const auto& f : m.outputs) check(f, "output");
    if (!o.rerun) return rc;
    if (!inputs_ok) {
        out << "rerun skipped: inputs differ from the manifest\n";
        return rc;
    }

    // Re-execute with every output redirected into a scratch directory, then compare digests.
    std::random_device rd;
    const fs::path dir = fs::temp_directory_path() / ("cemu-verify-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(dir);
    std::vector<std::string> argv = m.argv;
    std::set<std::string> flags;
    for (const auto& f : m.outputs)
        if (!f.flag.empty()) flags.insert(f.flag);
    for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
        if (flags.count(argv[i])) {
            argv[i + 1] = (dir / fs::path(argv[i + 1]).filename()).string();
            ++i;
        }
    }
    const fs::path new_manifest = dir / "rerun.manifest.json";
    argv.push_back("--manifest");
    argv.push_back(new_manifest.string());
    out << "rerun: cemu";
    for (const auto& a : argv) out << ' ' << a;
    out << '\n';
    std::ostringstream sub_out;
    const int sub = run_cli(argv, sub_out, err);
    if (sub != kExitOk) {
        out << "rerun failed with exit code " << sub << '\n';
        if (!o.keep) fs::remove_all(dir);
        return sub;
    }
    const RunManifest again = read_manifest(new_manifest);
    int rerun_rc = kExitOk;
    for (const auto& f : m.outputs) {
        const auto it = std::find_if(again.outputs.begin(), again.outputs.end(),
                                     [&](const FileRecord& g) { return g.role == f.role; });
        const bool same = it != again.outputs.end() &&
                          (f.stable_sha256.empty() ? it->sha256 == f.sha256 : it->stable_sha256 == f.stable_sha256);
        out << (same ? "reproduced " : "DIFFERS    ") << f.role << '\n';
        if (!same) rerun_rc = kExitMismatch;
    }
    if (!o.keep) {
        fs::remove_all(dir);
    } else {
        out << "rerun outputs kept in " << dir.string() << '\n';
    }
    return std::max(rc, rerun_rc);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Choice-probability emulator: data generation, training, estimation and studies", "cemu"};
    app.require_subcommand(1);
    app.set_version_flag("--version", CEMU_VERSION);
    const unsigned jobs_default = default_jobs();

    GenDataOpts gd;
    gd.jobs = jobs_default;
    auto* c_gd = app.add_subcommand("gen-data", "Simulate a shard of training examples");
    c_gd->add_option("--K", gd.K, "Number of alternatives")->required();
    c_gd->add_option("--family", gd.family, "gaussian, gumbel or student_t")->capture_default_str();
    c_gd->add_option("--nu", gd.nu, "Student-t degrees of freedom")->capture_default_str();
    c_gd->add_option("--count", gd.count, "Number of examples")->required();
    c_gd->add_option("--R", gd.R, "Simulation draws per example")->capture_default_str();
    c_gd->add_option("--tau", gd.tau, "Soft-relaxation temperature")->capture_default_str();
    c_gd->add_option("--seed", gd.seed, "Master seed")->capture_default_str();
    c_gd->add_option("--first-index", gd.first_index, "Index of the first example, for splitting a run")->capture_default_str();
    c_gd->add_option("--out", gd.out, "Shard path")->required();
    c_gd->add_option("--manifest", gd.manifest, "Manifest path (default <out>.manifest.json)");
    c_gd->add_option("--jobs", gd.jobs, "Worker threads (default CEMU_JOBS)")->capture_default_str();

    TrainOpts tr;
    auto* c_tr = app.add_subcommand("train", "Train emulator weights on one or more shards");
    c_tr->add_option("shards", tr.shards, "Training shards")->required();
    c_tr->add_option("--eval-shard", tr.eval_shards, "Held-out shards (repeatable)");
    c_tr->add_option("--config", tr.config, "INI file with [train] and [model] sections");
    c_tr->add_option("--out", tr.out, "Weights path")->required();
    c_tr->add_option("--loss-csv", tr.loss_csv, "Loss trace (default <out stem>.loss.csv)");
    c_tr->add_option("--init", tr.init, "Start from these weights");
    c_tr->add_option("--seed", tr.seed, "Seed for initialization, sampling and dropout")->capture_default_str();
    c_tr->add_option("--manifest", tr.manifest, "Manifest path (default <out>.manifest.json)");
    c_tr->add_flag("--quiet", tr.quiet, "No progress lines");

    EstimateOpts es;
    auto* c_es = app.add_subcommand("estimate", "Maximum-likelihood fit of a multinomial probit model");
    c_es->add_option("--data", es.data, "Dataset CSV")->required();
    c_es->add_option("--spec", es.spec, "dense or factor")->capture_default_str();
    c_es->add_option("--backend", es.backend, "ghk or emulator")->capture_default_str();
    c_es->add_option("--weights", es.weights, "Emulator weights");
    c_es->add_option("--R", es.R, "GHK draws per observation")->capture_default_str();
    c_es->add_option("--K", es.K, "Expected number of alternatives (checked against the data)");
    c_es->add_option("--seed", es.seed, "Seed of the GHK uniforms")->capture_default_str();
    c_es->add_option("--lambda", es.lambda, "Penalty weight")->capture_default_str();
    c_es->add_option("--max-iter", es.max_iter, "L-BFGS iteration limit")->capture_default_str();
    c_es->add_flag("--sandwich", es.sandwich, "Sandwich standard errors");
    c_es->add_option("--out", es.out, "Output prefix for <out>.csv and <out>.txt")->required();
    c_es->add_option("--manifest", es.manifest, "Manifest path (default <out>.manifest.json)");

    GenDatasetOpts gs;
    auto* c_gs = app.add_subcommand("gen-dataset", "Draw a choice dataset from a probit or emulator model");
    c_gs->add_option("--K", gs.K, "Number of alternatives")->capture_default_str();
    c_gs->add_option("--p", gs.p, "Covariates per alternative")->capture_default_str();
    c_gs->add_option("--spec", gs.spec, "dense or factor")->capture_default_str();
    c_gs->add_option("--dgp", gs.dgp, "probit or emulator")->capture_default_str();
    c_gs->add_option("--weights", gs.weights, "Emulator weights for the emulator DGP");
    c_gs->add_option("--n", gs.n, "Observations")->required();
    c_gs->add_option("--seed", gs.seed, "Seed")->capture_default_str();
    c_gs->add_option("--out", gs.out, "Dataset CSV")->required();
    c_gs->add_option("--truth", gs.truth, "True parameters CSV (default <out stem>.truth.csv)");
    c_gs->add_option("--manifest", gs.manifest, "Manifest path (default <out>.manifest.json)");

    SimulateOpts si;
    si.jobs = jobs_default;
    auto* c_si = app.add_subcommand("simulate", "Run a Monte Carlo estimation study");
    c_si->add_option("config", si.config, "Study INI file")->required();
    c_si->add_option("--out", si.out, "Metrics CSV (overrides [paths] metrics)");
    c_si->add_option("--replications", si.replications, "Per-replication CSV");
    c_si->add_flag("--resume", si.resume, "Reuse completed cells recorded in the manifest");
    c_si->add_option("--jobs", si.jobs, "Worker threads (default CEMU_JOBS)")->capture_default_str();
    c_si->add_option("--manifest", si.manifest, "Manifest path (default <metrics>.manifest.json)");
    c_si->add_flag("--quiet", si.quiet, "No progress lines");

    RecoverOpts rc;
    auto* c_rc = app.add_subcommand("recover-check", "Round-trip canonical inputs through their invariants");
    c_rc->add_option("--K", rc.K, "Number of alternatives")->required();
    c_rc->add_option("--j", rc.j, "Alternative to test (default: cycle through all)");
    c_rc->add_option("--instances", rc.instances, "Random instances")->capture_default_str();
    c_rc->add_option("--seed", rc.seed, "Seed")->capture_default_str();
    c_rc->add_option("--tol", rc.tol, "Genericity tolerance")->capture_default_str();
    c_rc->add_option("--out", rc.out, "Report CSV");
    c_rc->add_option("--manifest", rc.manifest, "Manifest path (default <out>.manifest.json)");

    EvalOpts ev;
    auto* c_ev = app.add_subcommand("eval-emulator", "Predicted vs simulated frequencies over a shard");
    c_ev->add_option("--weights", ev.weights, "Emulator weights")->required();
    c_ev->add_option("--shard", ev.shard, "Shard")->required();
    c_ev->add_option("--out", ev.out, "Calibration CSV")->required();
    c_ev->add_option("--limit", ev.limit, "Use only the first N examples");
    c_ev->add_option("--manifest", ev.manifest, "Manifest path (default <out>.manifest.json)");

    VerifyOpts vm;
    auto* c_vm = app.add_subcommand("verify-manifest", "Check recorded digests and optionally rerun the command");
    c_vm->add_option("manifest", vm.manifest, "Manifest JSON")->required();
    c_vm->add_flag("--rerun", vm.rerun, "Rerun into a scratch directory and compare output digests");
    c_vm->add_flag("--keep", vm.keep, "Keep the scratch directory");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitMismatch;
    }

    try {
        if (*c_gd) return cmd_gen_data(gd, out, err);
        if (*c_tr) return cmd_train(tr, out, err);
        if (*c_es) return cmd_estimate(es, out, err);
        if (*c_gs) return cmd_gen_dataset(gs, out, err);
        if (*c_si) return cmd_simulate(si, out, err);
        if (*c_rc) return cmd_recover_check(rc, out, err);
        if (*c_ev) return cmd_eval_emulator(ev, out, err);
        if (*c_vm) return cmd_verify(vm, out, err);
    } catch (const CliError& e) {
        err << "cemu: " << e.what() << '\n';
        return e.code;
    } catch (const IoError& e) {
        err << "cemu: I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const fs::filesystem_error& e) {
        err << "cemu: I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const CapabilityError& e) {
        err << "cemu: unsupported: " << e.what() << '\n';
        return kExitCapability;
    } catch (const ContractViolation& e) {
        err << "cemu: invalid input: " << e.what() << '\n';
        return kExitMismatch;
    } catch (const DomainError& e) {
        err << "cemu: invalid input: " << e.what() << '\n';
        return kExitMismatch;
    } catch (const std::exception& e) {
        err << "cemu: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitFailure;
}

}  // namespace cemu
