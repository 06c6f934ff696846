// gape_lab: command-line front end for the theory checks, NIAH data,
// training, evaluation and analysis.
//
// Exit codes: 0 success, 1 a check failed, 2 usage error, 3 runtime error.

#include "gapelab/analysis.hpp"
#include "gapelab/model.hpp"
#include "gapelab/niah.hpp"
#include "gapelab/theory.hpp"
#include "gapelab/train.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace gapelab;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

class UsageError : public Error {
public:
    using Error::Error;
};

std::string to_key(std::string s) {
    for (auto& c : s)
        if (c == '-') c = '_';
    return s;
}

std::string to_flag(std::string s) {
    for (auto& c : s)
        if (c == '_') c = '-';
    return "--" + s;
}

/// Settings of one invocation, each tagged with where its value came from.
class Settings {
public:
    void declare(const std::string& key, const std::string& value, const std::string& help) {
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = {value, "default"};
        help_[key] = help;
    }
    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value, const std::string& source) {
        if (!has(key)) throw UsageError("unknown setting '" + key + "'");
        values_[key] = {value, source};
    }
    const std::string& get(const std::string& key) const { return values_.at(key).first; }
    const std::string& source(const std::string& key) const { return values_.at(key).second; }
    const std::vector<std::string>& keys() const { return order_; }
    const std::string& help(const std::string& key) const { return help_.at(key); }

    std::size_t size_of(const std::string& key) const {
        const auto& v = get(key);
        std::size_t used = 0;
        unsigned long long x = 0;
        try {
            x = std::stoull(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (v.empty() || used != v.size() || v[0] == '-')
            throw UsageError(to_flag(key) + " expects a natural number, got '" + v + "'");
        return static_cast<std::size_t>(x);
    }
    double real_of(const std::string& key) const {
        const auto& v = get(key);
        std::size_t used = 0;
        double x = 0;
        try {
            x = std::stod(v, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (v.empty() || used != v.size()) throw UsageError(to_flag(key) + " expects a number, got '" + v + "'");
        return x;
    }
    bool bool_of(const std::string& key) const {
        const auto& v = get(key);
        if (v == "on" || v == "1" || v == "true") return true;
        if (v == "off" || v == "0" || v == "false") return false;
        throw UsageError(to_flag(key) + " expects on|off, got '" + v + "'");
    }

    void write(std::ostream& os) const {
        for (const auto& k : order_) os << k << '=' << get(k) << "  # " << source(k) << '\n';
    }

private:
    std::vector<std::string> order_;
    std::map<std::string, std::pair<std::string, std::string>> values_;
    std::map<std::string, std::string> help_;
};

std::map<std::string, std::string> read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw UsageError("cannot read config file '" + path + "'");
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(f, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
        out[to_key(trim(line.substr(0, eq)))] = trim(line.substr(eq + 1));
    }
    return out;
}

/// Binds every setting to a --flag on the subcommand.
struct FlagBinding {
    std::map<std::string, std::string> raw;
    std::map<std::string, CLI::Option*> opts;

    void bind(CLI::App* app, const Settings& s, const std::vector<std::string>& keys) {
        for (const auto& k : keys) {
            raw[k];
            opts[k] = app->add_option(to_flag(k), raw[k], s.help(k) + " (default: " + s.get(k) + ")");
        }
    }
};

struct Globals {
    std::string seed, out_dir = "out", config, threads;
    CLI::Option *seed_opt = nullptr, *out_opt = nullptr, *config_opt = nullptr, *threads_opt = nullptr;
};

void add_global_settings(Settings& s) {
    s.declare("seed", "0", "random seed (falls back to $GAPE_SEED)");
    s.declare("out_dir", "out", "output directory");
    s.declare("threads", "1", "worker threads for independent samples");
}

/// Applies defaults < GAPE_SEED < config file < flags.
void resolve(Settings& s, const Globals& g, const FlagBinding& fb) {
    if (const char* env = std::getenv("GAPE_SEED"); env && *env) s.set("seed", env, "env:GAPE_SEED");
    if (g.config_opt && g.config_opt->count()) {
        for (const auto& [k, v] : read_config_file(g.config)) {
            if (!s.has(k)) throw UsageError("config file '" + g.config + "': unknown key '" + k + "'");
            s.set(k, v, "file:" + g.config);
        }
    }
    if (g.seed_opt->count()) s.set("seed", g.seed, "flag");
    if (g.out_opt->count()) s.set("out_dir", g.out_dir, "flag");
    if (g.threads_opt->count()) s.set("threads", g.threads, "flag");
    for (const auto& [k, opt] : fb.opts)
        if (opt->count()) s.set(k, fb.raw.at(k), "flag");
}

std::string timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::ostringstream os;
    os << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

/// Output directory plus the two bookkeeping files every run leaves behind:
/// resolved_config.txt (deterministic) and run.log (wall-clock entries).
class RunDir {
public:
    RunDir(const Settings& s, const std::string& command) : dir_(s.get("out_dir")) {
        fs::create_directories(dir_);
        std::ofstream cfg(path("resolved_config.txt"));
        cfg << "command=" << command << '\n';
        s.write(cfg);
        log_.open(path("run.log"), std::ios::app);
        log("start " + command);
        t0_ = std::chrono::steady_clock::now();
    }
    ~RunDir() {
        std::ostringstream os;
        os << "end elapsed_s=" << std::fixed << std::setprecision(2)
           << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
        log(os.str());
    }
    std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }
    /// Appends a section with the values actually used, "auto" entries resolved.
    void resolved(const std::string& section, const std::string& text) const {
        std::ofstream(path("resolved_config.txt"), std::ios::app) << '[' << section << "]\n" << text;
    }
    void log(const std::string& msg) { log_ << timestamp() << ' ' << msg << '\n' << std::flush; }

private:
    std::string dir_;
    std::ofstream log_;
    std::chrono::steady_clock::time_point t0_;
};

std::ofstream open_out(const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write '" + path + "'");
    return f;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        unsigned long long x = 0;
        try {
            x = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (item.empty() || used != item.size() || x == 0)
            throw UsageError(to_flag(key) + " expects a comma-separated list of positive integers");
        out.push_back(static_cast<std::size_t>(x));
    }
    if (out.empty()) throw UsageError(to_flag(key) + " is empty");
    return out;
}

// ------------------------------------------------------------------ verify

int run_verify(const Settings& s) {
    RunDir run(s, "verify");
    const std::string suite = s.get("suite");
    const auto names = theory::suite_names();
    if (suite != "all" && std::find(names.begin(), names.end(), suite) == names.end())
        throw UsageError("unknown suite '" + suite + "'");
    const auto reports = theory::run_suite(suite, s.size_of("trials"), s.size_of("seed"));
    auto f = open_out(run.path("verify.csv"));
    theory::write_reports_csv(f, reports);
    bool ok = true;
    for (const auto& r : reports) {
        std::cout << (r.passed() ? "PASS " : "FAIL ") << std::left << std::setw(32) << r.name << " trials=" << r.trials
                  << " violations=" << r.violations << '\n';
        ok = ok && r.passed();
    }
    run.log(std::string("verify ") + (ok ? "passed" : "failed"));
    return ok ? 0 : kExitCheckFailed;
}

// -------------------------------------------------------------------- niah

int run_niah_gen(const Settings& s) {
    RunDir run(s, "niah gen");
    const std::size_t L = s.size_of("len");
    const auto regime = niah::parse_regime(s.get("regime"));
    const std::size_t count = s.size_of("count");
    std::optional<std::size_t> n;
    if (s.get("needles") != "auto") n = s.size_of("needles");
    niah::DatasetHeader h;
    h.length = L;
    h.needles = n.value_or(niah::default_needle_count(L));
    h.regime = regime;
    h.seed = s.size_of("seed");
    h.count = count;
    std::vector<niah::NiahSample> samples;
    for (std::size_t i = 0; i < count; ++i) samples.push_back(niah::generate_indexed(L, regime, h.seed, i, n));
    const std::string out = s.get("out") == "auto" ? run.path("niah.txt") : s.get("out");
    auto f = open_out(out);
    niah::write_dataset(f, h, samples);
    std::cout << "wrote " << count << " samples (L=" << L << ", n=" << h.needles << ") to " << out << '\n';
    return 0;
}

// ------------------------------------------------------------------- train

const std::vector<std::string> kModelKeys = {"pe", "gape", "n_layer", "n_head", "d_model", "theta",
                                             "rope_fraction", "T_train", "gates_on_rotated"};

void declare_train(Settings& s) {
    s.declare("pe", "nope", "positional encoding: nope|rope|prope|alibi");
    s.declare("gape", "off", "GAPE mask: on|off");
    s.declare("n_layer", "2", "transformer layers");
    s.declare("n_head", "2", "attention heads");
    s.declare("d_model", "64", "embedding width");
    s.declare("theta", "10000", "rotary base");
    s.declare("rope_fraction", "0.75", "rotated share of channels for prope");
    s.declare("T_train", "auto", "GAPE length scale T (auto: L_train)");
    s.declare("gates_on_rotated", "off", "gates read rotated q/k");
    const train::TrainConfig d;
    for (const auto& k : train::TrainConfig::keys())
        if (k != "seed") s.declare(k, d.get(k), "training: " + k);
    s.declare("log_every", "0", "print a progress line every N validations (0: every one)");
}

ModelConfig model_from(const Settings& s, std::size_t L_train) {
    ModelConfig mc;
    mc.n_layer = s.size_of("n_layer");
    mc.n_head = s.size_of("n_head");
    mc.d_model = s.size_of("d_model");
    mc.gape_enabled = s.bool_of("gape");
    mc.gates_on_rotated = s.bool_of("gates_on_rotated");
    mc.T_train = s.get("T_train") == "auto" ? L_train : s.size_of("T_train");
    const Scheme scheme = parse_scheme(s.get("pe"));
    const double theta = s.real_of("theta");
    switch (scheme) {
    case Scheme::NoPE: mc.kind = EncodingKind::nope(); break;
    case Scheme::RoPE: mc.kind = EncodingKind::rope(theta); break;
    case Scheme::PRoPE: mc.kind = EncodingKind::prope(s.real_of("rope_fraction"), theta); break;
    case Scheme::ALiBi: mc.kind = EncodingKind::alibi(mc.n_head); break;
    }
    mc.validate();
    return mc;
}

int run_train(const Settings& s) {
    RunDir run(s, "train");
    train::TrainConfig tc;
    for (const auto& k : train::TrainConfig::keys()) tc.set(k, s.get(k));
    tc.validate();
    const ModelConfig mc = model_from(s, tc.L_train);
    run.resolved("model", mc.to_text());
    run.resolved("train", tc.to_text());
    train::TrainHooks hooks;
    hooks.threads = s.size_of("threads");
    const auto t0 = std::chrono::steady_clock::now();
    hooks.on_validation = [&](const train::MetricsRow& r) {
        const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream os;
        os << "step " << r.step << " loss " << std::fixed << std::setprecision(4) << r.loss << " val_acc "
           << std::setprecision(3) << r.val_acc << " elapsed_s " << std::setprecision(1) << el;
        run.log(os.str());
        std::cout << os.str() << '\n' << std::flush;
    };
    const auto res = train::train(mc, tc, hooks);
    checkpoint_save(res.params, mc, run.path("model.ckpt"));
    auto f = open_out(run.path("metrics.csv"));
    train::write_metrics_csv(f, tc, mc, res.metrics);
    std::cout << "steps " << res.steps_run << (res.early_stopped ? " (early stop)" : "") << " final val_acc "
              << res.final_val_acc << "\ncheckpoint " << run.path("model.ckpt") << '\n';
    return 0;
}

// -------------------------------------------------------------------- eval

int run_eval(const Settings& s) {
    RunDir run(s, "eval");
    if (s.get("ckpt").empty()) throw UsageError("--ckpt is required");
    const auto ck = checkpoint_load(s.get("ckpt"));
    const std::size_t L_train = s.get("L_train") == "auto" ? ck.config.T_train : s.size_of("L_train");
    const auto results = train::evaluate_extrapolation(
        ck.params, ck.config, L_train, niah::parse_regime(s.get("regime")), parse_list("multipliers", s.get("multipliers")),
        s.size_of("n_eval"), s.size_of("seed"), s.size_of("threads"), s.bool_of("entropy"));
    auto f = open_out(run.path("eval.csv"));
    train::write_eval_csv(f, results);
    for (const auto& r : results)
        std::cout << "L=" << r.length << " (" << r.multiplier << "x) accuracy " << std::fixed << std::setprecision(4)
                  << r.accuracy << " (" << r.correct << "/" << r.n_eval << ")\n";
    return 0;
}

// ----------------------------------------------------------------- analyze

int run_analyze(const Settings& s, const std::string& what) {
    RunDir run(s, "analyze " + what);
    if (s.get("ckpt").empty()) throw UsageError("--ckpt is required");
    const auto ck = checkpoint_load(s.get("ckpt"));
    const std::size_t L = s.get("len") == "auto" ? ck.config.T_train : s.size_of("len");
    const auto regime = niah::parse_regime(s.get("regime"));
    std::vector<niah::NiahSample> samples;
    const std::uint64_t seed = derive_seed(s.size_of("seed"), 0x616e61ULL);
    for (std::size_t i = 0; i < s.size_of("samples"); ++i) samples.push_back(niah::generate_indexed(L, regime, seed, i));
    const std::size_t threads = s.size_of("threads");

    if (what == "entropy") {
        const auto p = analysis::entropy_profile(ck.params, ck.config, samples, threads);
        auto f = open_out(run.path("entropy.csv"));
        analysis::write_entropy_csv(f, p);
        for (std::size_t l = 0; l < ck.config.n_layer; ++l)
            std::cout << "layer " << l << " mean entropy " << p.layer_mean(l) << '\n';
        if (!s.get("baseline_ckpt").empty()) {
            const auto base = checkpoint_load(s.get("baseline_ckpt"));
            const auto pb = analysis::entropy_profile(base.params, base.config, samples, threads);
            const auto d = analysis::entropy_delta(p, pb);
            auto fd = open_out(run.path("delta_entropy.csv"));
            analysis::write_delta_csv(fd, d);
            for (const auto& h : d)
                std::cout << "layer " << h.layer << " head " << h.head << " delta_H " << h.delta_H << '\n';
        }
    } else if (what == "gates") {
        const auto g = analysis::gate_stats(ck.params, ck.config, samples, threads);
        auto f = open_out(run.path("gates.csv"));
        analysis::write_gates_csv(f, g);
        const auto p = analysis::entropy_profile(ck.params, ck.config, samples, threads);
        std::cout << "gate/entropy correlation over heads " << analysis::gate_entropy_correlation(g, p) << '\n';
        analysis::write_gates_csv(std::cout, g);
    } else if (what == "channels") {
        const auto c = analysis::channel_norms(ck.params, ck.config, samples);
        auto f = open_out(run.path("channels.csv"));
        analysis::write_channels_csv(f, c);
        std::cout << "wrote " << c.size() << " channel rows\n";
    } else {
        throw UsageError("analyze expects entropy|gates|channels");
    }
    return 0;
}

// ------------------------------------------------------------------ report

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

int run_report(const Settings& s) {
    const fs::path root = s.get("inputs") == "auto" ? fs::path(s.get("out_dir")) : fs::path(s.get("inputs"));
    if (!fs::is_directory(root)) throw UsageError("report: '" + root.string() + "' is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && (e.path().filename() == "eval.csv" || e.path().filename() == "verify.csv"))
            files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::ostringstream table;
    table << "run,kind,item,value\n";
    for (const auto& p : files) {
        std::ifstream f(p);
        std::string line;
        std::getline(f, line);
        const std::string run_name = fs::relative(p.parent_path(), root).string();
        const bool is_eval = p.filename() == "eval.csv";
        while (std::getline(f, line)) {
            const auto c = split_csv_line(line);
            if (is_eval && c.size() >= 5) table << run_name << ",accuracy,L=" << c[0] << ',' << c[4] << '\n';
            if (!is_eval && c.size() >= 3) table << run_name << ",violations," << c[0] << ',' << c[2] << '\n';
        }
    }
    RunDir run(s, "report");
    auto f = open_out(run.path("summary.csv"));
    f << table.str();
    std::cout << table.str();
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"GAPE lab: position-gated attention experiments"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    g.seed_opt = app.add_option("--seed", g.seed, "random seed (default 0, or $GAPE_SEED)");
    g.out_opt = app.add_option("--out-dir", g.out_dir, "output directory (default out)");
    g.config_opt = app.add_option("--config", g.config, "key=value file; flags override it");
    g.threads_opt = app.add_option("--threads", g.threads, "worker threads for independent samples (default 1)");

    // verify
    Settings verify_s;
    add_global_settings(verify_s);
    verify_s.declare("suite", "all", "all|" + [] {
        std::string s;
        for (const auto& n : theory::suite_names()) s += (s.empty() ? "" : "|") + n;
        return s;
    }());
    verify_s.declare("trials", "500", "random trials per check");
    auto* verify = app.add_subcommand("verify", "run the theory property suites");
    FlagBinding verify_f;
    verify_f.bind(verify, verify_s, {"suite", "trials"});

    // niah gen
    Settings gen_s;
    add_global_settings(gen_s);
    gen_s.declare("len", "256", "sequence length");
    gen_s.declare("regime", "first", "first|last|middle");
    gen_s.declare("count", "10", "number of samples");
    gen_s.declare("needles", "auto", "needle count (auto: floor(len/64))");
    gen_s.declare("out", "auto", "dataset path (auto: <out-dir>/niah.txt)");
    auto* niah_cmd = app.add_subcommand("niah", "needle-in-a-haystack data");
    niah_cmd->require_subcommand(1);
    auto* gen = niah_cmd->add_subcommand("gen", "generate a dataset file");
    FlagBinding gen_f;
    gen_f.bind(gen, gen_s, {"len", "regime", "count", "needles", "out"});

    // train
    Settings train_s;
    add_global_settings(train_s);
    declare_train(train_s);
    auto* train_cmd = app.add_subcommand("train", "train a model on NIAH");
    FlagBinding train_f;
    {
        std::vector<std::string> keys;
        for (const auto& k : train_s.keys())
            if (k != "seed" && k != "out_dir" && k != "threads") keys.push_back(k);
        train_f.bind(train_cmd, train_s, keys);
    }

    // eval
    Settings eval_s;
    add_global_settings(eval_s);
    eval_s.declare("ckpt", "", "checkpoint path");
    eval_s.declare("multipliers", "1,2,4", "length multipliers of L_train");
    eval_s.declare("n_eval", "500", "samples per length");
    eval_s.declare("regime", "first", "first|last|middle");
    eval_s.declare("L_train", "auto", "training length (auto: checkpoint T_train)");
    eval_s.declare("entropy", "off", "record attention entropy at the query position");
    auto* eval = app.add_subcommand("eval", "length-extrapolation accuracy");
    FlagBinding eval_f;
    eval_f.bind(eval, eval_s, {"ckpt", "multipliers", "n_eval", "regime", "L_train", "entropy"});

    // analyze
    Settings an_s;
    add_global_settings(an_s);
    an_s.declare("ckpt", "", "checkpoint path");
    an_s.declare("baseline_ckpt", "", "second checkpoint for entropy deltas");
    an_s.declare("len", "auto", "sample length (auto: checkpoint T_train)");
    an_s.declare("regime", "first", "first|last|middle");
    an_s.declare("samples", "16", "reference batch size");
    auto* analyze = app.add_subcommand("analyze", "entropy, gate and channel statistics");
    std::string what;
    analyze->add_option("what", what, "entropy|gates|channels")->required()->check(
        CLI::IsMember({"entropy", "gates", "channels"}));
    FlagBinding an_f;
    an_f.bind(analyze, an_s, {"ckpt", "baseline_ckpt", "len", "regime", "samples"});

    // report
    Settings rep_s;
    add_global_settings(rep_s);
    rep_s.declare("inputs", "auto", "directory scanned for eval.csv/verify.csv (auto: out-dir)");
    auto* report = app.add_subcommand("report", "aggregate CSV outputs into summary.csv");
    FlagBinding rep_f;
    rep_f.bind(report, rep_s, {"inputs"});

    if (argc <= 1) {
        std::cerr << app.help();
        return kExitUsage;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return kExitUsage;
    }

    try {
        auto go = [&](Settings& s, const FlagBinding& fb, auto&& fn) {
            resolve(s, g, fb);
            return fn(s);
        };
        if (verify->parsed()) return go(verify_s, verify_f, run_verify);
        if (gen->parsed()) return go(gen_s, gen_f, run_niah_gen);
        if (train_cmd->parsed()) return go(train_s, train_f, run_train);
        if (eval->parsed()) return go(eval_s, eval_f, run_eval);
        if (analyze->parsed()) return go(an_s, an_f, [&](const Settings& s) { return run_analyze(s, what); });
        if (report->parsed()) return go(rep_s, rep_f, run_report);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n' << app.help();
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}
