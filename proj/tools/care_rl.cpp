// care-rl: dataset generation, training, evaluation, ablation and gradient checks.
#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <nlohmann/json.hpp>
#include <sstream>

#include "care/evalx.hpp"
#include "care/gradcheck.hpp"
#include "care/policy.hpp"
#include "care/taskgen.hpp"
#include "care/trainer.hpp"

namespace {

using namespace care;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string dashed(std::string_view key) {
    std::string s(key);
    for (char& c : s) {
        if (c == '_') c = '-';
    }
    return s;
}

// Config file + per-key overrides shared by every subcommand that trains or evaluates.
struct ConfigFlags {
    std::string config_path;
    std::map<std::string, std::string> values;
    std::string seed;
    std::string variant;
    std::string steps;

    void attach(CLI::App* app) {
        app->add_option("--config", config_path, "key = value configuration file");
        app->add_option("--seed", seed, "root seed (falls back to CARE_RL_SEED)");
        for (auto key : config_keys()) {
            if (key == "seed" || key == "variant") continue;
            std::string k(key);
            std::string names = "--" + dashed(k);
            if (dashed(k) != k) names += ",--" + k;
            app->add_option(names, values[k], "override " + k);
        }
        app->add_option("--steps", steps, "alias of --total-steps");
    }

    void attach_variant(CLI::App* app) { app->add_option("--variant", variant, "training variant"); }

    Config resolve() const {
        Config cfg = config_path.empty() ? Config{} : load_config_file(config_path);
        if (seed.empty()) {
            if (const char* env = std::getenv("CARE_RL_SEED"); env != nullptr && *env != '\0') {
                set_config_value(cfg, "seed", env);
            }
        } else {
            set_config_value(cfg, "seed", seed);
        }
        for (const auto& [k, v] : values) {
            if (!v.empty()) set_config_value(cfg, k, v);
        }
        if (!steps.empty()) set_config_value(cfg, "total_steps", steps);
        if (!variant.empty()) cfg.variant = parse_variant(variant);
        return validate_config(cfg);
    }
};

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        auto dash = item.find('-');
        try {
            if (dash != std::string::npos && dash > 0) {
                auto lo = std::stoull(item.substr(0, dash));
                auto hi = std::stoull(item.substr(dash + 1));
                if (hi < lo) throw ConfigError("empty seed range " + item);
                for (auto s = lo; s <= hi; ++s) seeds.push_back(s);
            } else {
                seeds.push_back(std::stoull(item));
            }
        } catch (const std::logic_error&) {
            throw ConfigError("bad seed list entry '" + item + "'");
        }
    }
    if (seeds.empty()) throw ConfigError("--seeds is empty");
    return seeds;
}

std::vector<Variant> parse_variants(const std::string& text) {
    std::vector<Variant> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(parse_variant(item));
    }
    if (out.empty()) throw ConfigError("--variants is empty");
    return out;
}

int cmd_gen_data(const ConfigFlags& flags, const std::string& out) {
    if (out.empty()) throw UsageError("gen-data requires --out");
    Config cfg = flags.resolve();
    auto data = build_splits(cfg.split, cfg.seed);
    auto manifest = write_dataset(data, out);
    std::cout << "wrote " << data.split(Level::TRAIN).size() << '/' << data.split(Level::L1).size() << '/'
              << data.split(Level::L2).size() << '/' << data.split(Level::L3).size()
              << " episodes (train/L1/L2/L3) and " << manifest.string() << '\n';
    return kExitOk;
}

struct TrainFlags {
    std::string data;
    std::string out;
    bool audit = false;
    bool rollouts = false;
    bool wall_clock = false;
    std::uint64_t fault_nan_step = 0;
};

int cmd_train(const ConfigFlags& flags, const TrainFlags& tf) {
    if (tf.data.empty() || tf.out.empty()) throw UsageError("train requires --data and --out");
    Config cfg = flags.resolve();
    Dataset data = read_dataset(tf.data);
    ensure_dir(tf.out);
    RunOptions opts;
    opts.out_dir = tf.out;
    opts.write_audit = tf.audit;
    opts.write_rollouts = tf.rollouts;
    opts.log_wall_clock = tf.wall_clock;
    opts.fault_nan_step = tf.fault_nan_step;
    for (const auto& w : config_warnings(cfg)) std::cerr << "warning: " << w << '\n';
    opts.on_log = [](const std::string& line) {
        auto j = nlohmann::json::parse(line);
        if (j.value("kind", "") == "eval") {
            std::cout << "step " << j["step"].get<std::uint64_t>() << "  L1 " << j["l1_accuracy"].get<double>()
                      << "  L2 " << j["l2_accuracy"].get<double>() << "  L3 " << j["l3_accuracy"].get<double>()
                      << "  consistency " << j["consistency_rate"].get<double>() << '\n';
        }
    };
    auto res = run_training(cfg, data, opts);
    std::cout << "final " << to_string(cfg.variant) << "  L1 " << res.final_eval.l1 << "  L2 " << res.final_eval.l2
              << "  L3 " << res.final_eval.l3 << "  consistency " << res.final_eval.consistency << '\n';
    return kExitOk;
}

int cmd_eval(const ConfigFlags& flags, const std::string& data_dir, const std::string& ckpt_path,
             const std::string& out) {
    if (data_dir.empty() || ckpt_path.empty()) throw UsageError("eval requires --data and --checkpoint");
    Config cfg = flags.resolve();
    Dataset data = read_dataset(data_dir);
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (ckpt.dims.vocab != data.vocab.size()) throw ConfigError("checkpoint vocabulary does not match the dataset");
    cfg.embed_dim = ckpt.dims.embed;
    cfg.hidden_dim = ckpt.dims.hidden;
    ModelSpec model = ModelSpec::from_config(cfg, data.vocab);
    auto m = evaluate_validation(model, ckpt.theta, data, cfg, ckpt.step);
    nlohmann::json j{{"checkpoint", ckpt_path},
                     {"step", ckpt.step},
                     {"variant", to_string(ckpt.variant)},
                     {"l1_accuracy", m.l1},
                     {"l2_accuracy", m.l2},
                     {"l3_accuracy", m.l3},
                     {"overall_accuracy", m.overall},
                     {"consistency_rate", m.consistency},
                     {"accuracy_decoding", "greedy"},
                     {"consistency_decoding", "sampled"},
                     {"temperature", cfg.temperature},
                     {"strict_consistency", cfg.strict_consistency},
                     {"seed", cfg.seed}};
    std::cout << j.dump(2) << '\n';
    if (!out.empty()) write_text(out, j.dump() + "\n");
    return kExitOk;
}

int cmd_ablate(const ConfigFlags& flags, const std::string& data_dir, const std::string& out,
               const std::string& variants, const std::string& seeds) {
    Config cfg = flags.resolve();
    auto vs = parse_variants(variants);
    auto ss = parse_seeds(seeds);
    // without --data every seed trains on splits generated from that seed
    std::map<std::uint64_t, Dataset> generated;
    std::optional<Dataset> shared;
    if (!data_dir.empty()) shared = read_dataset(data_dir);
    auto data_for = [&](std::uint64_t seed) -> const Dataset& {
        if (shared) return *shared;
        auto it = generated.find(seed);
        if (it == generated.end()) it = generated.emplace(seed, build_splits(cfg.split, seed)).first;
        return it->second;
    };
    std::vector<std::string> merged;
    auto table = compare_variants(cfg, data_for, vs, ss, [&](Variant v, std::uint64_t seed, const EvalMetrics& m) {
        std::cerr << to_string(v) << " seed " << seed << ": L1 " << m.l1 << " L2 " << m.l2 << " L3 " << m.l3
                  << " consistency " << m.consistency << '\n';
        nlohmann::json j{{"kind", "ablation"},      {"variant", to_string(v)}, {"seed", seed},
                         {"l1_accuracy", m.l1},      {"l2_accuracy", m.l2},     {"l3_accuracy", m.l3},
                         {"consistency_rate", m.consistency}};
        merged.push_back(j.dump());
    });
    std::cout << table.to_text();
    if (!out.empty()) {
        ensure_dir(out);
        write_text(std::filesystem::path(out) / "table.txt", table.to_text());
        write_text(std::filesystem::path(out) / "table.csv", table.to_csv());
        auto header = nlohmann::json::parse(metrics_header_line(cfg, data_for(ss.front())));
        if (!shared) header["dataset_seed"] = "per_seed";
        std::string lines = header.dump() + "\n";
        for (const auto& l : merged) lines += l + "\n";
        write_text(std::filesystem::path(out) / "metrics.jsonl", lines);
    }
    return kExitOk;
}

int cmd_gradcheck(const GradCheckOptions& opts) {
    auto report = run_gradcheck(opts);
    std::cout << report.to_text();
    return report.ok() ? kExitOk : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"care-rl: group-relative policy optimisation lab on a synthetic planning task"};
    app.require_subcommand(1);

    ConfigFlags gen_flags, train_flags, eval_flags, ablate_flags;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-data", "generate train/L1/L2/L3 splits and a manifest");
    gen_flags.attach(gen);
    gen->add_option("--out", gen_out, "output directory");

    TrainFlags tf;
    auto* train = app.add_subcommand("train", "train one variant and write metrics + checkpoints");
    train_flags.attach(train);
    train_flags.attach_variant(train);
    train->add_option("--data", tf.data, "dataset directory");
    train->add_option("--out", tf.out, "run directory");
    train->add_flag("--audit", tf.audit, "write reward_audit.jsonl");
    train->add_flag("--rollouts", tf.rollouts, "write rollouts.jsonl");
    train->add_flag("--wall-clock", tf.wall_clock, "add wall-clock seconds to metrics rows");
    train->add_option("--fault-nan-step", tf.fault_nan_step, "poison update N with a NaN step size")->group("");

    std::string eval_data, eval_ckpt, eval_out;
    auto* eval = app.add_subcommand("eval", "accuracy per level and consistency rate of a checkpoint");
    eval_flags.attach(eval);
    eval->add_option("--data", eval_data, "dataset directory");
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint file");
    eval->add_option("--out", eval_out, "write the report as JSON");

    std::string ab_data, ab_out, ab_variants = "grpo,kl_ema,kl_ema_ha,sepkl_ema_ha,nokl,densecons,refgen,care";
    std::string ab_seeds = "1,2,3,4,5";
    auto* ablate = app.add_subcommand("ablate", "train every variant per seed and tabulate");
    ablate_flags.attach(ablate);
    ablate->add_option("--data", ab_data, "dataset directory (default: splits generated from each seed)");
    ablate->add_option("--out", ab_out, "directory for table.txt, table.csv, metrics.jsonl");
    ablate->add_option("--variants", ab_variants, "comma-separated variant list");
    ablate->add_option("--seeds", ab_seeds, "comma-separated seeds or ranges like 1-5");

    GradCheckOptions gc;
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the analytic gradients");
    gradcheck->add_option("--seed", gc.seed, "seed");
    gradcheck->add_option("--cases", gc.cases, "number of random instances");
    gradcheck->add_option("--coords", gc.coordinates, "coordinates per instance");
    gradcheck->add_option("--tolerance", gc.tolerance, "max relative error");
    gradcheck->add_option("--inject", gc.inject, "offset added to the analytic gradient");
    gradcheck->add_option("--step", gc.step, "finite-difference half-width");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*gen) return cmd_gen_data(gen_flags, gen_out);
        if (*train) return cmd_train(train_flags, tf);
        if (*eval) return cmd_eval(eval_flags, eval_data, eval_ckpt, eval_out);
        if (*ablate) return cmd_ablate(ablate_flags, ab_data, ab_out, ab_variants, ab_seeds);
        if (*gradcheck) return cmd_gradcheck(gc);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return kExitUsage;
}
