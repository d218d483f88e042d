// Experiment front-end: train / sweep-batch / verify / describe / plot.
//
// Config resolution order: preset defaults -> --config file -> QATTN_SET_*
// environment variables -> --set flags. The resolved config is echoed into
// the output directory as config.txt. CSVs are the source of truth for every
// plot; `plot` regenerates SVGs from them without retraining.

#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qattn/checkpoint.hpp"
#include "qattn/gradcheck.hpp"
#include "qattn/netcheck.hpp"
#include "qattn/plot.hpp"
#include "qattn/trainer.hpp"

extern char** environ;

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace qattn;

namespace {

// ---------------------------------------------------------------------------
// config keys

constexpr const char* kEnvPrefix = "QATTN_SET_";

struct KeySpec {
    const char* name;
    char type;  // i = int64, d = double, b = bool, s = string
};

const std::vector<KeySpec>& known_keys() {
    static const std::vector<KeySpec> keys = {
        {"buffer_size", 'i'},    {"gamma", 'd'},
        {"target_update_freq", 'i'}, {"batch_size", 'i'},
        {"lr", 'd'},             {"adam_eps", 'd'},
        {"eps_start", 'd'},      {"eps_end", 'd'},
        {"exploration_steps", 'i'}, {"learning_starts", 'i'},
        {"train_freq", 'i'},     {"total_steps", 'i'},
        {"eval_every", 'i'},     {"eval_episodes", 'i'},
        {"dropout_rate", 'd'},   {"checkpoint_every", 'i'},
        {"smooth_window", 'i'},  {"solve_stop", 'd'},
        {"reward_clip", 'b'},    {"d_model", 'i'},
        {"n_heads", 'i'},        {"n_layers", 'i'},
        {"linformer_k", 'i'},    {"mlp_hidden", 'i'},
        {"tie_projections", 'b'}, {"positional_combine", 's'},
    };
    return keys;
}

std::string key_list() {
    std::string s;
    for (const KeySpec& k : known_keys()) {
        if (!s.empty()) s += ", ";
        s += k.name;
    }
    return s;
}

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "' expects true/false, got '" + v + "'");
}

void apply_override(train::TrainerConfig& cfg, nets::QNetConfig& net, const std::string& key,
                    const std::string& v) {
    if (key == "buffer_size") cfg.buffer_size = parse_i64(key, v);
    else if (key == "gamma") cfg.gamma = parse_f64(key, v);
    else if (key == "target_update_freq") cfg.target_update_freq = parse_i64(key, v);
    else if (key == "batch_size") cfg.batch_size = parse_i64(key, v);
    else if (key == "lr") cfg.lr = parse_f64(key, v);
    else if (key == "adam_eps") cfg.adam_eps = parse_f64(key, v);
    else if (key == "eps_start") cfg.eps_start = parse_f64(key, v);
    else if (key == "eps_end") cfg.eps_end = parse_f64(key, v);
    else if (key == "exploration_steps") cfg.exploration_steps = parse_i64(key, v);
    else if (key == "learning_starts") cfg.learning_starts = parse_i64(key, v);
    else if (key == "train_freq") cfg.train_freq = parse_i64(key, v);
    else if (key == "total_steps") cfg.total_steps = parse_i64(key, v);
    else if (key == "eval_every") cfg.eval_every = parse_i64(key, v);
    else if (key == "eval_episodes") cfg.eval_episodes = parse_i64(key, v);
    else if (key == "dropout_rate") cfg.dropout_rate = parse_f64(key, v);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_i64(key, v);
    else if (key == "smooth_window") cfg.smooth_window = parse_i64(key, v);
    else if (key == "solve_stop") cfg.solve_stop = parse_f64(key, v);
    else if (key == "reward_clip") cfg.reward_clip = parse_bool(key, v);
    else if (key == "d_model") net.attn.d_model = parse_i64(key, v);
    else if (key == "n_heads") net.attn.n_heads = parse_i64(key, v);
    else if (key == "n_layers") net.attn.n_layers = parse_i64(key, v);
    else if (key == "linformer_k") net.attn.linformer_k = parse_i64(key, v);
    else if (key == "mlp_hidden") net.attn.mlp_hidden = parse_i64(key, v);
    else if (key == "tie_projections") net.attn.tie_projections = parse_bool(key, v);
    else if (key == "positional_combine")
        net.positional_combine = nets::positional_combine_from_string(v);
    else
        throw ConfigError("unknown config key '" + key + "' (known: " + key_list() + ")");
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string config_value(const train::TrainerConfig& cfg, const nets::QNetConfig& net,
                         const std::string& key) {
    auto i = [](int64_t v) { return std::to_string(v); };
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };
    if (key == "buffer_size") return i(cfg.buffer_size);
    if (key == "gamma") return fmt_double(cfg.gamma);
    if (key == "target_update_freq") return i(cfg.target_update_freq);
    if (key == "batch_size") return i(cfg.batch_size);
    if (key == "lr") return fmt_double(cfg.lr);
    if (key == "adam_eps") return fmt_double(cfg.adam_eps);
    if (key == "eps_start") return fmt_double(cfg.eps_start);
    if (key == "eps_end") return fmt_double(cfg.eps_end);
    if (key == "exploration_steps") return i(cfg.exploration_steps);
    if (key == "learning_starts") return i(cfg.learning_starts);
    if (key == "train_freq") return i(cfg.train_freq);
    if (key == "total_steps") return i(cfg.total_steps);
    if (key == "eval_every") return i(cfg.eval_every);
    if (key == "eval_episodes") return i(cfg.eval_episodes);
    if (key == "dropout_rate") return fmt_double(cfg.dropout_rate);
    if (key == "checkpoint_every") return i(cfg.checkpoint_every);
    if (key == "smooth_window") return i(cfg.smooth_window);
    if (key == "solve_stop") return fmt_double(cfg.solve_stop);
    if (key == "reward_clip") return b(cfg.reward_clip);
    if (key == "d_model") return i(net.attn.d_model);
    if (key == "n_heads") return i(net.attn.n_heads);
    if (key == "n_layers") return i(net.attn.n_layers);
    if (key == "linformer_k") return i(net.attn.linformer_k);
    if (key == "mlp_hidden") return i(net.attn.mlp_hidden);
    if (key == "tie_projections") return b(net.attn.tie_projections);
    if (key == "positional_combine") return nets::to_string(net.positional_combine);
    throw ConfigError("config_value: unhandled key '" + key + "'");
}

// ---------------------------------------------------------------------------
// experiment spec

struct ExperimentSpec {
    std::string env = "catch";
    std::string model = "attentive";
    std::string preset = "desk";
    std::string seeds_arg = "1,2,3";
    std::string out_dir;
    std::string config_file;
    std::vector<std::string> sets;
    bool json = false;
    int jobs = 1;

    // resolved
    std::vector<uint64_t> seeds;
    train::TrainerConfig cfg;
    nets::QNetConfig net_cfg;
    train::ModelKind kind = train::ModelKind::kAttentive;
};

void apply_set_string(train::TrainerConfig& cfg, nets::QNetConfig& net, const std::string& kv,
                      const std::string& origin) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError(origin + " override '" + kv + "' is not of the form key=value");
    apply_override(cfg, net, kv.substr(0, eq), kv.substr(eq + 1));
}

void apply_config_file(train::TrainerConfig& cfg, nets::QNetConfig& net, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string trimmed;
        for (char c : line)
            if (!std::isspace(static_cast<unsigned char>(c))) trimmed += c;
        if (trimmed.empty()) continue;
        try {
            apply_set_string(cfg, net, trimmed, "config file");
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

void apply_env_overrides(train::TrainerConfig& cfg, nets::QNetConfig& net) {
    const std::string prefix = kEnvPrefix;
    for (char** e = environ; *e != nullptr; ++e) {
        const std::string entry(*e);
        if (entry.rfind(prefix, 0) != 0) continue;
        const size_t eq = entry.find('=');
        if (eq == std::string::npos) continue;
        std::string key = entry.substr(prefix.size(), eq - prefix.size());
        for (char& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        apply_override(cfg, net, key, entry.substr(eq + 1));
    }
}

std::vector<uint64_t> parse_seeds(const std::string& s) {
    std::vector<uint64_t> seeds;
    std::string cur;
    std::stringstream ss(s);
    while (std::getline(ss, cur, ',')) {
        if (cur.empty()) continue;
        try {
            size_t pos = 0;
            seeds.push_back(std::stoull(cur, &pos));
            if (pos != cur.size()) throw std::invalid_argument(cur);
        } catch (const std::exception&) {
            throw ConfigError("--seeds expects comma-separated integers, got '" + s + "'");
        }
    }
    if (seeds.empty()) throw ConfigError("--seeds: no seeds given");
    return seeds;
}

void resolve(ExperimentSpec& spec) {
    spec.kind = train::model_kind_from_string(spec.model);
    spec.seeds = parse_seeds(spec.seeds_arg);
    spec.cfg = train::preset_by_name(spec.preset);
    spec.net_cfg = {};
    if (!spec.config_file.empty()) apply_config_file(spec.cfg, spec.net_cfg, spec.config_file);
    apply_env_overrides(spec.cfg, spec.net_cfg);
    for (const std::string& kv : spec.sets) apply_set_string(spec.cfg, spec.net_cfg, kv, "--set");
    if (spec.jobs < 1) throw ConfigError("--jobs must be >= 1");
}

void write_config_echo(const fs::path& path, const ExperimentSpec& spec,
                       const train::TrainerConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
    out << "# resolved configuration (preset -> config file -> " << kEnvPrefix
        << "* -> --set)\n";
    out << "env=" << spec.env << "\n";
    out << "model=" << spec.model << "\n";
    out << "preset=" << spec.preset << "\n";
    out << "seeds=" << spec.seeds_arg << "\n";
    for (const KeySpec& k : known_keys())
        out << k.name << "=" << config_value(cfg, spec.net_cfg, k.name) << "\n";
}

// ---------------------------------------------------------------------------
// artifacts

json counters_json(const train::Counters& c) {
    json j;
    j["env_steps"] = c.env_steps;
    j["episodes"] = c.episodes;
    j["updates"] = c.updates;
    j["target_syncs"] = c.target_syncs;
    j["eval_blocks"] = c.eval_blocks;
    j["eval_episodes"] = c.eval_episodes;
    j["eval_env_steps"] = c.eval_env_steps;
    j["updates_during_eval"] = c.updates_during_eval;
    j["pushes_during_eval"] = c.pushes_during_eval;
    j["first_update_step"] = c.first_update_step;
    return j;
}

json curve_json(const std::vector<train::CurvePoint>& curve) {
    json arr = json::array();
    for (const train::CurvePoint& p : curve)
        arr.push_back({{"step", p.step}, {"mean", p.mean}, {"min", p.min}, {"max", p.max}});
    return arr;
}

double final_eval_smoothed(const train::MetricsLog& log) {
    double v = 0.0;
    for (const train::MetricsRow& r : log.rows)
        if (r.phase == "eval") v = r.smoothed;
    return v;
}

struct SeedRun {
    uint64_t seed = 0;
    train::MetricsLog log;
    std::string error;  // empty on success
    double seconds = 0.0;
};

std::string seed_csv_name(uint64_t seed) { return "seed_" + std::to_string(seed) + ".csv"; }

/// Train every seed (optionally with a small thread pool), write one CSV +
/// timing sidecar per completed seed, then the aggregate summary + plot.
/// Returns false if any seed failed; completed artifacts are kept either way.
bool run_experiment(const ExperimentSpec& spec, train::TrainerConfig cfg, const fs::path& out) {
    train::resolve_batch_size(cfg, spec.kind);
    cfg.validate();
    fs::create_directories(out);

    {
        ExperimentSpec echo = spec;
        write_config_echo(out / "config.txt", echo, cfg);
    }

    std::vector<SeedRun> runs(spec.seeds.size());
    for (size_t i = 0; i < runs.size(); ++i) runs[i].seed = spec.seeds[i];

    std::atomic<size_t> cursor{0};
    auto worker = [&] {
        for (size_t i = cursor.fetch_add(1); i < runs.size(); i = cursor.fetch_add(1)) {
            SeedRun& r = runs[i];
            const auto t0 = std::chrono::steady_clock::now();
            try {
                const fs::path ckpt = out / ("seed_" + std::to_string(r.seed) + "_ckpt");
                fs::create_directories(ckpt);
                r.log = train::run(cfg, spec.env, spec.kind, r.seed, ckpt.string(),
                                   spec.net_cfg);
            } catch (const std::exception& e) {
                r.error = e.what();
            }
            r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
        }
    };
    const size_t n_threads = std::min(static_cast<size_t>(spec.jobs), runs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    std::vector<train::MetricsLog> ok_logs;
    json per_seed = json::array();
    bool all_ok = true;
    for (const SeedRun& r : runs) {
        json j;
        j["seed"] = r.seed;
        j["seconds"] = r.seconds;
        if (!r.error.empty()) {
            all_ok = false;
            j["error"] = r.error;
            std::fprintf(stderr, "seed %" PRIu64 " failed: %s\n", r.seed, r.error.c_str());
            per_seed.push_back(j);
            continue;
        }
        std::map<std::string, std::string> meta{
            {"env", spec.env},
            {"model", spec.model},
            {"preset", spec.preset},
            {"seed", std::to_string(r.seed)},
            {"batch_size", std::to_string(cfg.batch_size)},
        };
        train::write_metrics_csv((out / seed_csv_name(r.seed)).string(), r.log, meta);
        train::write_timings((out / ("seed_" + std::to_string(r.seed) + "_timings.csv")).string(),
                             r.log);
        j["rows"] = static_cast<int64_t>(r.log.rows.size());
        j["final_eval_smoothed"] = final_eval_smoothed(r.log);
        j["stopped_early"] = r.log.stopped_early;
        j["counters"] = counters_json(r.log.counters);
        per_seed.push_back(j);
        ok_logs.push_back(r.log);
        std::printf("seed %" PRIu64 ": %zu rows, final eval (smoothed) %.3f, %.1fs\n", r.seed,
                    r.log.rows.size(), final_eval_smoothed(r.log), r.seconds);
    }

    json summary;
    summary["env"] = spec.env;
    summary["model"] = spec.model;
    summary["preset"] = spec.preset;
    summary["batch_size"] = cfg.batch_size;
    summary["seeds"] = spec.seeds;
    summary["per_seed"] = per_seed;
    if (!ok_logs.empty()) {
        train::RunSummary agg = train::aggregate_seeds(ok_logs);
        summary["train_curve"] = curve_json(agg.train);
        summary["eval_curve"] = curve_json(agg.eval);

        const std::string label =
            spec.model + ", mean of " + std::to_string(ok_logs.size()) + " seed(s)";
        plot::Panel ptrain{"train (smoothed return)", "steps", "return", {{label, agg.train}}};
        plot::Panel peval{"eval (smoothed return)", "steps", "return", {{label, agg.eval}}};
        std::vector<plot::Panel> panels;
        if (!agg.train.empty()) panels.push_back(ptrain);
        if (!agg.eval.empty()) panels.push_back(peval);
        if (!panels.empty())
            plot::write_svg((out / "learning_curves.svg").string(),
                            spec.env + " / " + spec.model + " (" + spec.preset + ")", panels);
    }
    std::ofstream sf(out / "summary.json", std::ios::binary);
    sf << summary.dump(2) << "\n";
    return all_ok;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(ExperimentSpec& spec) {
    resolve(spec);
    if (spec.out_dir.empty()) throw ConfigError("--out is required for train");
    const bool ok = run_experiment(spec, spec.cfg, spec.out_dir);
    if (spec.json) {
        json j;
        j["out"] = spec.out_dir;
        j["ok"] = ok;
        std::printf("%s\n", j.dump(2).c_str());
    }
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// sweep-batch

std::vector<train::CurvePoint> curve_from_dir(const fs::path& dir, const std::string& phase) {
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("seed_", 0) == 0 && name.size() > 4 &&
            name.substr(name.size() - 4) == ".csv" &&
            name.find("_timings") == std::string::npos)
            files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw InputError("no seed CSVs found in '" + dir.string() + "'");
    std::vector<train::Series> curves;
    for (const std::string& f : files) {
        train::Series s = train::phase_series(train::parse_metrics_csv(f), phase);
        if (!s.empty()) curves.push_back(std::move(s));
    }
    if (curves.empty()) return {};
    return train::aggregate_series(curves);
}

void write_sweep_overlay(const fs::path& out, const std::string& model,
                         const std::vector<int64_t>& batches) {
    plot::Panel ptrain{"train (smoothed return)", "steps", "return", {}};
    plot::Panel peval{"eval (smoothed return)", "steps", "return", {}};
    for (int64_t b : batches) {
        const fs::path dir = out / (model + "_b" + std::to_string(b));
        const std::string label = "batch " + std::to_string(b);
        auto tr = curve_from_dir(dir, "train");
        auto ev = curve_from_dir(dir, "eval");
        if (!tr.empty()) ptrain.series.push_back({label, tr});
        if (!ev.empty()) peval.series.push_back({label, ev});
    }
    std::vector<plot::Panel> panels;
    if (!ptrain.series.empty()) panels.push_back(ptrain);
    if (!peval.series.empty()) panels.push_back(peval);
    if (panels.empty()) throw InputError("sweep overlay: no curves for model " + model);
    plot::write_svg((out / ("sweep_" + model + ".svg")).string(), "batch-size sweep / " + model,
                    panels);
}

int cmd_sweep_batch(ExperimentSpec& spec, const std::vector<int64_t>& batches) {
    resolve(spec);
    if (spec.out_dir.empty()) throw ConfigError("--out is required for sweep-batch");
    const fs::path out = spec.out_dir;
    fs::create_directories(out);
    write_config_echo(out / "config.txt", spec, spec.cfg);

    bool all_ok = true;
    for (const std::string model : {"attentive", "baseline"}) {
        for (int64_t b : batches) {
            ExperimentSpec sub = spec;
            sub.model = model;
            sub.kind = train::model_kind_from_string(model);
            train::TrainerConfig cfg = spec.cfg;
            cfg.batch_size = b;
            const fs::path dir = out / (model + "_b" + std::to_string(b));
            std::printf("== %s batch %" PRId64 " -> %s\n", model.c_str(), b,
                        dir.string().c_str());
            if (!run_experiment(sub, cfg, dir)) all_ok = false;
        }
        write_sweep_overlay(out, model, batches);
    }
    return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// verify

struct PropertyResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2e", v);
    return buf;
}

Tensor<double> identity(int64_t n) {
    Tensor<double> m = Tensor<double>::zeros({n, n});
    for (int64_t i = 0; i < n; ++i) m.data()[i * n + i] = 1.0;
    return m;
}

/// Central-difference check of the backbone gradient with an explicit
/// analytic/numeric comparison loop. `corrupt` nudges one analytic kernel
/// gradient after backward — the negative control proving a wrong gradient
/// is reported as a named failure.
PropertyResult check_conv_gradient(bool corrupt) {
    PropertyResult res{"gradient.conv_backbone"};
    RngState rng(41);
    nets::ConvBackbone<double> bb("backbone.", 4, rng);
    Tensor<double> obs = Tensor<double>::uniform({1, 4, 84, 84}, rng, 0.0, 1.0);
    nets::clear_relu_kinks(bb, obs, 2e-3);

    auto scalar = [&] { return sum(bb.forward(Var<double>(obs))); };
    zero_grads(bb.parameters());
    Var<double> y = scalar();
    backward(y);
    if (corrupt)
        for (int64_t i = 0; i < bb.k1.grad.numel(); ++i) bb.k1.grad.data()[i] += 0.01;

    const double h = 1e-4;
    RngState coords(42);
    double max_rel = 0.0;
    for (Parameter<double>* p : bb.parameters()) {
        for (int probe = 0; probe < 3; ++probe) {
            const int64_t i = static_cast<int64_t>(coords.uniform_int(p->value.numel()));
            const double saved = p->value.data()[i];
            p->value.data()[i] = saved + h;
            const double up = scalar().value()[0];
            p->value.data()[i] = saved - h;
            const double dn = scalar().value()[0];
            p->value.data()[i] = saved;
            const double numeric = (up - dn) / (2 * h);
            const double analytic = p->grad.data()[i];
            const double denom =
                std::max({std::fabs(numeric), std::fabs(analytic), 1e-8});
            max_rel = std::max(max_rel, std::fabs(numeric - analytic) / denom);
        }
    }
    res.pass = max_rel < 1e-4;
    res.detail = "max rel err " + sci(max_rel);
    return res;
}

PropertyResult check_head_gradients() {
    PropertyResult res{"gradient.q_heads"};
    double worst = 0.0;
    RngState rng(43);

    nets::QNetConfig cfg;
    cfg.n_actions = 4;
    cfg.attn.dropout_rate = 0.0;
    Tensor<double> obs = Tensor<double>::uniform({1, 4, 84, 84}, rng, 0.0, 1.0);

    {
        RngState init(44);
        nets::AttentiveQNet<double> net(cfg, init);
        RngState redraw(45);
        for (auto& layer : net.layers) {
            layer.key_proj.value =
                Tensor<double>::uniform(layer.key_proj.value.shape(), redraw, -0.3, 0.3);
            layer.val_proj.value =
                Tensor<double>::uniform(layer.val_proj.value.shape(), redraw, -0.3, 0.3);
        }
        nets::clear_relu_kinks(net, obs, 2e-3);
        RngState fwd(46), coords(47);
        std::function<Var<double>()> f = [&] {
            return gather_actions(net.forward(Var<double>(obs), fwd, false), {1});
        };
        worst = std::max(worst, finite_difference_check(f, net.parameters(), 1e-4, 2, &coords));
    }
    {
        RngState init(48);
        nets::BaselineQNet<double> net(cfg, init);
        nets::clear_relu_kinks(net, obs, 2e-3);
        RngState fwd(49), coords(50);
        std::function<Var<double>()> f = [&] {
            return gather_actions(net.forward(Var<double>(obs), fwd, false), {1});
        };
        worst = std::max(worst, finite_difference_check(f, net.parameters(), 1e-4, 2, &coords));
    }
    res.pass = worst < 1e-4;
    res.detail = "max rel err " + sci(worst);
    return res;
}

PropertyResult check_linformer_equivalence() {
    PropertyResult res{"attention.linformer_equivalence"};
    attention::AttentionConfig cfg;
    cfg.dropout_rate = 0.0;
    cfg.linformer_k = cfg.seq_len;  // no compression

    double max_diff = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        RngState init(100 + static_cast<uint64_t>(trial));
        attention::EncoderLayerParams<double> layer(cfg, "enc.", init);
        layer.key_proj.value = identity(cfg.seq_len);
        layer.val_proj.value = identity(cfg.seq_len);

        Tensor<double> x =
            Tensor<double>::uniform({cfg.seq_len, cfg.d_model}, init, -1.0, 1.0);
        RngState r1(1);
        Tensor<double> got =
            attention::multi_head_attention(Var<double>(x), layer, cfg, r1, false).value();

        // full-attention reference: no sequence compression anywhere
        Var<double> x3 = reshape(Var<double>(x), {1, cfg.seq_len, cfg.d_model});
        Var<double> q = linear(x3, leaf(layer.wq), leaf(layer.bq));
        Var<double> k = linear(x3, leaf(layer.wk), leaf(layer.bk));
        Var<double> v = linear(x3, leaf(layer.wv), leaf(layer.bv));
        Var<double> heads = attention::scaled_dot_product_attention(
            split_heads(q, cfg.n_heads), split_heads(k, cfg.n_heads),
            split_heads(v, cfg.n_heads));
        Tensor<double> want =
            linear(merge_heads(heads, cfg.n_heads), leaf(layer.wo), leaf(layer.bo)).value();

        for (int64_t i = 0; i < got.numel(); ++i)
            max_diff = std::max(max_diff, std::fabs(got[i] - want.data()[i]));
    }
    res.pass = max_diff < 1e-5;
    res.detail = "max abs diff " + sci(max_diff) + " over 20 trials";
    return res;
}

PropertyResult check_shape_pipeline() {
    PropertyResult res{"shapes.pipeline"};
    nets::QNetConfig cfg;
    cfg.n_actions = 6;
    RngState init(51), fwd(52);
    nets::AttentiveQNet<float> net(cfg, init);
    Tensor<float> obs = Tensor<float>::uniform({2, 4, 84, 84}, init, 0.0f, 1.0f);
    Var<float> q = net.forward(Var<float>(obs), fwd, false);  // stages assert internally
    res.pass = q.shape() == Shape{2, 6};
    res.detail = "4x84x84 -> 64x7x7 -> 49x64 -> 50x128 -> 128 -> 6";
    if (!res.pass) res.detail = "final shape " + shape_str(q.shape()) + ", expected [2 x 6]";
    return res;
}

int64_t closed_form_attentive(int64_t actions) {
    const int64_t conv = (32 * 4 * 8 * 8 + 32) + (64 * 32 * 4 * 4 + 64) + (64 * 64 * 3 * 3 + 64);
    const int64_t d = 128, seq = 50, k = 32, hidden = 512;
    const int64_t embed = d * 64 + d + seq * d + d;  // token proj + pos + value token
    const int64_t layer = 2 * d + 3 * (d * d + d) + 2 * seq * k + (d * d + d) + 2 * d +
                          (hidden * d + hidden) + (d * hidden + d);
    return conv + embed + 2 * layer + 2 * d + actions * d + actions;
}

int64_t closed_form_baseline(int64_t actions) {
    const int64_t conv = (32 * 4 * 8 * 8 + 32) + (64 * 32 * 4 * 4 + 64) + (64 * 64 * 3 * 3 + 64);
    return conv + (512 * 3136 + 512) + (actions * 512 + actions);
}

PropertyResult check_parameter_audit() {
    PropertyResult res{"params.audit"};
    for (int64_t a = 1; a <= 18; ++a) {
        nets::QNetConfig cfg;
        cfg.n_actions = a;
        RngState r1(60), r2(61);
        nets::AttentiveQNet<float> attn(cfg, r1);
        nets::BaselineQNet<float> base(cfg, r2);
        const int64_t na = nets::parameter_count(attn);
        const int64_t nb = nets::parameter_count(base);
        if (na != closed_form_attentive(a) || nb != closed_form_baseline(a) || na >= nb) {
            res.pass = false;
            res.detail = "n_actions " + std::to_string(a) + ": attentive " + std::to_string(na) +
                         " baseline " + std::to_string(nb);
            return res;
        }
    }
    res.pass = true;
    res.detail = "attentive " + std::to_string(closed_form_attentive(6)) + " < baseline " +
                 std::to_string(closed_form_baseline(6)) + " params (n_actions 6; holds 1..18)";
    return res;
}

PropertyResult check_permutation_invariance() {
    PropertyResult res{"invariance.permutation"};
    nets::QNetConfig cfg;
    cfg.n_actions = 6;
    cfg.attn.dropout_rate = 0.0;
    RngState init(70);
    nets::AttentiveQNet<float> net(cfg, init);
    std::fill(net.pos.value.data(), net.pos.value.data() + net.pos.value.numel(), 0.0f);

    RngState rng(71);
    double max_drift = 0.0;
    for (int input = 0; input < 3; ++input) {
        Tensor<float> feat = Tensor<float>::uniform({1, 64, 7, 7}, rng, -1.0f, 1.0f);
        RngState fwd(0);
        Tensor<float> q0 = net.forward_features(Var<float>(feat), fwd, false).value();
        for (int p = 0; p < 5; ++p) {
            std::vector<int64_t> perm(49);
            for (int64_t i = 0; i < 49; ++i) perm[static_cast<size_t>(i)] = i;
            for (int64_t i = 48; i > 0; --i)
                std::swap(perm[static_cast<size_t>(i)],
                          perm[static_cast<size_t>(rng.uniform_int(i + 1))]);
            Tensor<float> shuffled({1, 64, 7, 7});
            for (int64_t ch = 0; ch < 64; ++ch)
                for (int64_t pos = 0; pos < 49; ++pos)
                    shuffled.data()[ch * 49 + pos] =
                        feat.data()[ch * 49 + perm[static_cast<size_t>(pos)]];
            RngState fwd2(0);
            Tensor<float> q1 = net.forward_features(Var<float>(shuffled), fwd2, false).value();
            for (int64_t i = 0; i < q0.numel(); ++i)
                max_drift = std::max(max_drift,
                                     static_cast<double>(std::fabs(q0[i] - q1[i])));
        }
    }
    res.pass = max_drift < 1e-5;
    res.detail = "max Q drift " + sci(max_drift) + " (positions zeroed, dropout off)";
    return res;
}

PropertyResult check_epsilon_schedule() {
    PropertyResult res{"schedule.epsilon"};
    train::EpsilonSchedule s;
    const bool endpoints = train::epsilon_at(s, 0) == 1.0 &&
                           train::epsilon_at(s, 5'000'000) == 0.01 &&
                           train::epsilon_at(s, 9'000'000) == 0.01;
    const double mid = train::epsilon_at(s, 2'500'000);
    res.pass = endpoints && std::fabs(mid - 0.505) < 1e-12;
    res.detail = "endpoints exact, midpoint " + fmt_double(mid);
    return res;
}

int cmd_verify(bool corrupt, bool as_json) {
    std::vector<PropertyResult> results;
    results.push_back(check_conv_gradient(corrupt));
    results.push_back(check_head_gradients());
    results.push_back(check_linformer_equivalence());
    results.push_back(check_shape_pipeline());
    results.push_back(check_parameter_audit());
    results.push_back(check_permutation_invariance());
    results.push_back(check_epsilon_schedule());

    bool all = true;
    if (as_json) {
        json arr = json::array();
        for (const PropertyResult& r : results) {
            arr.push_back({{"property", r.name}, {"pass", r.pass}, {"detail", r.detail}});
            all = all && r.pass;
        }
        std::printf("%s\n", arr.dump(2).c_str());
    } else {
        for (const PropertyResult& r : results) {
            std::printf("%-34s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                        r.detail.c_str());
            all = all && r.pass;
        }
        std::printf("%-34s %s\n", "overall", all ? "PASS" : "FAIL");
    }
    return all ? 0 : 1;
}

// ---------------------------------------------------------------------------
// describe

json shape_json(const Shape& s) {
    json arr = json::array();
    for (int64_t d : s) arr.push_back(d);
    return arr;
}

template <typename Net>
json parameters_json(Net& net) {
    json arr = json::array();
    for (Parameter<float>* p : net.parameters())
        arr.push_back({{"name", p->name},
                       {"shape", shape_json(p->value.shape())},
                       {"numel", p->value.numel()}});
    return arr;
}

int cmd_describe(const std::string& model, int64_t actions, bool as_json) {
    const train::ModelKind kind = train::model_kind_from_string(model);
    nets::QNetConfig cfg;
    cfg.n_actions = actions;
    RngState init(1);

    std::string pipeline;
    json j;
    j["model"] = model;
    j["n_actions"] = actions;
    if (kind == train::ModelKind::kAttentive) {
        nets::AttentiveQNet<float> net(cfg, init);
        const int64_t d = cfg.attn.d_model, e = cfg.encoder_dim();
        pipeline = "4×84×84 → 64×7×7 → 49×64 → 50×" + std::to_string(d) + " → " +
                   std::to_string(e) + " → " + std::to_string(actions);
        j["stages"] = json::array({shape_json({4, 84, 84}), shape_json({64, 7, 7}),
                                   shape_json({49, 64}), shape_json({50, d}), shape_json({e}),
                                   shape_json({actions})});
        j["pipeline"] = pipeline;
        j["parameters"] = parameters_json(net);
        j["total_parameters"] = nets::parameter_count(net);
        if (as_json) {
            std::printf("%s\n", j.dump(2).c_str());
        } else {
            std::printf("model: %s  actions: %" PRId64 "\npipeline: %s\n\n%s", model.c_str(),
                        actions, pipeline.c_str(), nets::describe_parameters(net).c_str());
        }
        return 0;
    }
    nets::BaselineQNet<float> net(cfg, init);
    pipeline = "4×84×84 → 64×7×7 → 3136 → 512 → " + std::to_string(actions);
    j["stages"] = json::array({shape_json({4, 84, 84}), shape_json({64, 7, 7}),
                               shape_json({3136}), shape_json({512}), shape_json({actions})});
    j["pipeline"] = pipeline;
    j["parameters"] = parameters_json(net);
    j["total_parameters"] = nets::parameter_count(net);
    if (as_json) {
        std::printf("%s\n", j.dump(2).c_str());
    } else {
        std::printf("model: %s  actions: %" PRId64 "\npipeline: %s\n\n%s", model.c_str(),
                    actions, pipeline.c_str(), nets::describe_parameters(net).c_str());
    }
    return 0;
}

// ---------------------------------------------------------------------------
// plot (regenerate from CSVs)

bool dir_has_seed_csvs(const fs::path& dir) {
    if (!fs::is_directory(dir)) return false;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("seed_", 0) == 0 && name.size() > 4 &&
            name.substr(name.size() - 4) == ".csv" &&
            name.find("_timings") == std::string::npos)
            return true;
    }
    return false;
}

void replot_run_dir(const fs::path& dir) {
    std::map<std::string, std::string> meta;
    // any seed CSV provides the labels
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("seed_", 0) == 0 && name.substr(name.size() - 4) == ".csv" &&
            name.find("_timings") == std::string::npos) {
            train::parse_metrics_csv(entry.path().string(), &meta);
            break;
        }
    }
    auto tr = curve_from_dir(dir, "train");
    auto ev = curve_from_dir(dir, "eval");
    std::vector<plot::Panel> panels;
    const std::string label = meta.count("model") ? meta["model"] : "model";
    if (!tr.empty())
        panels.push_back({"train (smoothed return)", "steps", "return", {{label, tr}}});
    if (!ev.empty())
        panels.push_back({"eval (smoothed return)", "steps", "return", {{label, ev}}});
    if (panels.empty()) throw InputError("no curves found in '" + dir.string() + "'");
    const std::string env = meta.count("env") ? meta["env"] : "?";
    const std::string preset = meta.count("preset") ? meta["preset"] : "?";
    plot::write_svg((dir / "learning_curves.svg").string(), env + " / " + label + " (" + preset +
                                                                ")",
                    panels);
    std::printf("wrote %s\n", (dir / "learning_curves.svg").string().c_str());
}

int cmd_plot(const std::string& out_dir) {
    const fs::path out = out_dir;
    if (!fs::is_directory(out)) throw InputError("plot: '" + out_dir + "' is not a directory");
    if (dir_has_seed_csvs(out)) {
        replot_run_dir(out);
        return 0;
    }
    // sweep layout: <model>_b<batch> subdirectories
    bool found_sweep = false;
    for (const std::string model : {"attentive", "baseline"}) {
        std::vector<int64_t> batches;
        for (const auto& entry : fs::directory_iterator(out)) {
            if (!entry.is_directory()) continue;
            const std::string name = entry.path().filename().string();
            const std::string prefix = model + "_b";
            if (name.rfind(prefix, 0) == 0 && dir_has_seed_csvs(entry.path()))
                batches.push_back(parse_i64("batch", name.substr(prefix.size())));
        }
        if (batches.empty()) continue;
        std::sort(batches.begin(), batches.end());
        for (int64_t b : batches) replot_run_dir(out / (model + "_b" + std::to_string(b)));
        write_sweep_overlay(out, model, batches);
        std::printf("wrote %s\n", (out / ("sweep_" + model + ".svg")).string().c_str());
        found_sweep = true;
    }
    if (!found_sweep)
        throw InputError("plot: no seed CSVs or sweep run directories under '" + out_dir + "'");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Q-network experiments: train, sweep, verify, describe, plot"};
    app.require_subcommand(1);

    ExperimentSpec spec;
    std::string describe_model = "attentive";
    int64_t describe_actions = 6;
    bool verify_json = false, describe_json = false, corrupt = false;
    std::string plot_dir;

    auto add_spec_flags = [&](CLI::App* cmd, bool with_model) {
        cmd->add_option("--env", spec.env, "environment name (catch, avoid)");
        if (with_model)
            cmd->add_option("--model", spec.model, "model kind (attentive, baseline)");
        cmd->add_option("--preset", spec.preset, "config preset (desk, paper)");
        cmd->add_option("--seeds", spec.seeds_arg, "comma-separated seed list");
        cmd->add_option("--out", spec.out_dir, "output directory");
        cmd->add_option("--config", spec.config_file, "flat key=value config file");
        cmd->add_option("--set", spec.sets, "config override key=value (repeatable)");
        cmd->add_option("--jobs", spec.jobs, "parallel seed workers");
    };

    CLI::App* train_cmd = app.add_subcommand("train", "train one model over a seed list");
    add_spec_flags(train_cmd, true);
    train_cmd->add_flag("--json", spec.json, "print a machine-readable result");

    CLI::App* sweep_cmd =
        app.add_subcommand("sweep-batch", "train both models across batch sizes 32-256");
    add_spec_flags(sweep_cmd, false);

    CLI::App* verify_cmd = app.add_subcommand("verify", "run the property suite");
    verify_cmd->add_flag("--json", verify_json, "print a machine-readable report");
    verify_cmd->add_flag("--corrupt-conv-grad", corrupt)->group("");  // test hook

    CLI::App* describe_cmd = app.add_subcommand("describe", "print network shapes and counts");
    describe_cmd->add_option("--model", describe_model, "model kind (attentive, baseline)");
    describe_cmd->add_option("--actions", describe_actions, "number of actions");
    describe_cmd->add_flag("--json", describe_json, "print machine-readable description");

    CLI::App* plot_cmd = app.add_subcommand("plot", "regenerate plots from CSVs");
    plot_cmd->add_option("--out", plot_dir, "run or sweep directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(spec);
        if (sweep_cmd->parsed()) return cmd_sweep_batch(spec, {32, 64, 128, 256});
        if (verify_cmd->parsed()) return cmd_verify(corrupt, verify_json);
        if (describe_cmd->parsed())
            return cmd_describe(describe_model, describe_actions, describe_json);
        if (plot_cmd->parsed()) return cmd_plot(plot_dir);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
