#include "care/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>

#include "care/care_reward.hpp"
#include "care/rollout.hpp"

namespace care {

namespace {

using nlohmann::json;

bool has_kl(Variant v) {
    return v == Variant::GRPO || v == Variant::KL_EMA || v == Variant::KL_EMA_HA || v == Variant::SEPKL_EMA_HA;
}

// Everything one episode contributes to a step; filled in parallel.
struct EpisodeWork {
    std::vector<Trajectory> group;
    GroupScores scores;
    std::vector<double> bonus;
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<ConsistencyRecord> records;
    GroupRewardSummary summary;
    SurrogateResult result;
    double consistent = 0.0;
};

Checkpoint to_checkpoint(const TrainState& s) {
    Checkpoint c;
    c.dims = s.theta.dims();
    c.step = s.step;
    c.variant = s.variant;
    c.theta = s.theta;
    c.phi = s.phi;
    return c;
}

}  // namespace

TrainState init_train_state(const Config& cfg, const ModelSpec& model) {
    TrainState s;
    s.theta = init_params(cfg.seed, model.dims, cfg.init_scale);
    s.phi = s.theta;
    s.initial = s.theta;
    s.adam.m = PolicyParams(model.dims);
    s.adam.v = PolicyParams(model.dims);
    s.variant = cfg.variant;
    s.seed = cfg.seed;
    return s;
}

void adam_step(TrainState& state, const PolicyParams& grad, const Config& cfg) {
    if (grad.size() != state.theta.size()) throw std::invalid_argument("gradient shape mismatch");
    state.adam.t += 1;
    const double t = static_cast<double>(state.adam.t);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
    auto th = state.theta.flat();
    auto m = state.adam.m.flat();
    auto v = state.adam.v.flat();
    auto g = grad.flat();
    for (std::size_t i = 0; i < th.size(); ++i) {
        m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * g[i];
        v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * g[i] * g[i];
        th[i] += cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
}

KLSpec kl_spec_for(const Config& cfg, const TrainState& state, const std::vector<bool>& high_acc) {
    KLSpec kl;
    switch (cfg.variant) {
        case Variant::GRPO:
            kl.mode = KLMode::Full;
            kl.reference = &state.initial;
            break;
        case Variant::KL_EMA:
            kl.mode = KLMode::Full;
            kl.reference = &state.phi;
            break;
        case Variant::KL_EMA_HA:
            kl.mode = KLMode::HighAccOnly;
            kl.reference = &state.phi;
            kl.mask = high_acc;
            break;
        case Variant::SEPKL_EMA_HA:
            kl.mode = KLMode::Separate;
            kl.reference = &state.phi;
            kl.mask = high_acc;
            break;
        default:
            return kl;
    }
    kl.beta = cfg.kl_beta;
    kl.beta_reason = cfg.beta_reason();
    kl.beta_answer = cfg.beta_answer();
    // a zero coefficient must not even touch the reference (keeps degenerate runs bitwise equal)
    const bool zero = kl.mode == KLMode::Separate ? (kl.beta_reason == 0.0 && kl.beta_answer == 0.0) : kl.beta == 0.0;
    if (zero) return KLSpec{};
    return kl;
}

std::vector<Episode> sample_batch(const std::vector<Episode>& train, const Config& cfg, std::uint64_t step) {
    if (train.empty()) throw std::invalid_argument("empty training split");
    Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(Stream::Batch), step);
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    std::vector<Episode> out;
    out.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) out.push_back(train[pick(rng)]);
    return out;
}

StepMetrics train_step(TrainState& state, std::span<const Episode> batch, const ModelSpec& model, const Config& cfg,
                       const StepSinks* sinks) {
    if (batch.empty()) throw std::invalid_argument("train_step on an empty batch");
    if (cfg.variant == Variant::SFT) throw std::invalid_argument("train_step does not run SFT; use sft_step");

    const PolicyParams& theta_old = state.theta;
    const std::uint64_t t = state.step;
    std::vector<EpisodeWork> work(batch.size());

    parallel_for(batch.size(), cfg.workers, [&](std::size_t b) {
        const Episode& ep = batch[b];
        EpisodeWork& w = work[b];
        const std::uint64_t stream = mix_seed(t, b);
        w.group = rollout_group(model, theta_old, ep, cfg.group_size, state.seed, stream, cfg.temperature);
        w.scores = score_group(w.group, ep, model.vocab);
        const std::size_t n = w.group.size();
        w.bonus.assign(n, 0.0);

        auto selection = select_high_accuracy(w.scores.r_acc, cfg.gamma_acc);
        w.summary.acc_baseline = selection.baseline;
        switch (cfg.variant) {
            case Variant::CARE: {
                auto cal = calibrate_consistency(model, state.phi, ep, w.group, selection.mask, cfg.gamma_p,
                                                 cfg.eps_p, cfg.consistency_baseline);
                w.summary.cons_baseline = cal.baseline;
                w.records = std::move(cal.records);
                w.rewards = total_rewards_care(w.scores.r_acc, w.scores.r_fmt, w.records, cfg.lambda_cons, &w.bonus);
                break;
            }
            case Variant::DENSECONS:
                for (std::size_t g = 0; g < n; ++g) {
                    if (w.scores.r_acc[g] > 0.0) {
                        const double p = reference_likelihood(model, state.phi, ep, w.group[g]);
                        w.bonus[g] = dense_cons_reward(w.scores.r_acc[g], p, cfg.lambda_cons);
                    }
                }
                break;
            case Variant::REFGEN:
                for (std::size_t g = 0; g < n; ++g) {
                    Rng rng = make_rng(state.seed, static_cast<std::uint64_t>(Stream::RefGen), stream, g);
                    w.bonus[g] = refgen_reward(model, state.phi, ep, w.group[g], rng, cfg.lambda_cons, cfg.temperature);
                }
                break;
            default:
                break;
        }
        if (w.rewards.empty()) {
            w.rewards.resize(n);
            for (std::size_t g = 0; g < n; ++g) w.rewards[g] = w.scores.r_acc[g] + w.scores.r_fmt[g] + w.bonus[g];
        }
        w.advantages = normalize_advantages(w.rewards);
        double mu = 0.0;
        for (double r : w.rewards) mu += r;
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (double r : w.rewards) var += (r - mu) * (r - mu);
        w.summary.reward_mean = mu;
        w.summary.reward_std = std::sqrt(var / static_cast<double>(n));

        KLSpec kl = has_kl(cfg.variant) ? kl_spec_for(cfg, state, selection.mask) : KLSpec{};
        w.result = surrogate_grad(model, theta_old, ep, w.group, w.advantages, cfg.clip_eps, kl);
        for (const auto& tr : w.group) w.consistent += consistency_oracle(tr, ep, model.vocab) ? 1.0 : 0.0;
    });

    // serialized reduction in batch order
    StepMetrics m;
    PolicyParams grad(model.dims);
    auto gflat = grad.flat();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double trajectories = 0.0;
    double tokens = 0.0;
    double bonus_count = 0.0;
    for (std::size_t b = 0; b < work.size(); ++b) {
        const EpisodeWork& w = work[b];
        auto src = w.result.gradient.flat();
        for (std::size_t i = 0; i < gflat.size(); ++i) gflat[i] += inv_b * src[i];
        for (std::size_t g = 0; g < w.group.size(); ++g) {
            m.mean_reward += w.rewards[g];
            m.mean_r_acc += w.scores.r_acc[g];
            m.mean_r_fmt += w.scores.r_fmt[g];
            if (w.bonus[g] > 0.0) bonus_count += 1.0;
            tokens += static_cast<double>(w.group[g].size());
        }
        trajectories += static_cast<double>(w.group.size());
        m.consistency_rate += w.consistent;
        m.kl += inv_b * w.result.kl;
        m.objective += inv_b * w.result.objective;
        m.clip_fraction += inv_b * w.result.clip_fraction;

        if (sinks && sinks->audit) {
            std::vector<RewardBreakdown> rows(w.group.size());
            for (std::size_t g = 0; g < rows.size(); ++g) {
                rows[g] = {w.scores.r_acc[g], w.scores.r_fmt[g], w.bonus[g], w.rewards[g], w.advantages[g]};
            }
            sinks->audit(reward_audit_line(t + 1, batch[b], rows, w.records, w.summary));
        }
        if (sinks && sinks->rollout) {
            for (std::size_t g = 0; g < w.group.size(); ++g) {
                sinks->rollout(rollout_dump_line(batch[b], w.group[g], w.scores.r_acc[g], w.scores.r_fmt[g],
                                                 model.vocab));
            }
        }
    }
    m.mean_reward /= trajectories;
    m.mean_r_acc /= trajectories;
    m.mean_r_fmt /= trajectories;
    m.bonus_rate = bonus_count / trajectories;
    m.consistency_rate /= trajectories;
    m.mean_length = tokens / trajectories;

    if (!grad.all_finite()) throw NumericError("non-finite gradient at step " + std::to_string(t + 1));
    TrainState next_adam_probe = state;
    adam_step(next_adam_probe, grad, cfg);
    if (!next_adam_probe.theta.all_finite()) throw NumericError("non-finite parameters at step " + std::to_string(t + 1));
    state.theta = std::move(next_adam_probe.theta);
    state.adam = std::move(next_adam_probe.adam);

    state.step = t + 1;
    m.step = state.step;
    if (state.step % static_cast<std::uint64_t>(cfg.ema_interval) == 0) {
        ema_update(state.phi, state.theta, cfg.ema_alpha);
        m.ema_updated = true;
    }
    return m;
}

LikelihoodResult sft_loss_grad(const PolicyParams& theta, std::span<const Episode> batch, const ModelSpec& model) {
    if (batch.empty()) throw std::invalid_argument("sft on an empty batch");
    LikelihoodResult out;
    out.gradient = PolicyParams(theta.dims(), theta.layout().order());
    auto gflat = out.gradient.flat();
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const auto& ep : batch) {
        auto trace = oracle_trace(ep, model.vocab);
        auto r = sequence_loglik_grad(model, theta, ep, trace.tokens);
        out.loglik -= inv_b * r.loglik;
        auto src = r.gradient.flat();
        for (std::size_t i = 0; i < gflat.size(); ++i) gflat[i] -= inv_b * src[i];
    }
    return out;
}

double sft_step(TrainState& state, std::span<const Episode> batch, const ModelSpec& model, const Config& cfg) {
    auto r = sft_loss_grad(state.theta, batch, model);
    // ascent on log-likelihood = descent on NLL
    for (double& g : r.gradient.flat()) g = -g;
    if (!r.gradient.all_finite()) throw NumericError("non-finite SFT gradient");
    TrainState probe = state;
    adam_step(probe, r.gradient, cfg);
    if (!probe.theta.all_finite()) throw NumericError("non-finite parameters after SFT step");
    state.theta = std::move(probe.theta);
    state.adam = std::move(probe.adam);
    state.step += 1;
    if (state.step % static_cast<std::uint64_t>(cfg.ema_interval) == 0) ema_update(state.phi, state.theta, cfg.ema_alpha);
    return r.loglik;
}

std::vector<std::string> config_warnings(const Config& cfg) {
    std::vector<std::string> w;
    if (cfg.variant == Variant::CARE && (cfg.kl_beta != 0.0 || cfg.kl_beta_reason > 0.0 || cfg.kl_beta_answer > 0.0)) {
        w.push_back("CARE trains without a KL penalty; kl_beta is ignored");
    }
    if ((cfg.variant == Variant::NOKL || cfg.variant == Variant::DENSECONS || cfg.variant == Variant::REFGEN) &&
        cfg.kl_beta != 0.0 && cfg.kl_beta != Config{}.kl_beta) {
        w.push_back(std::string(to_string(cfg.variant)) + " has no KL term; kl_beta is ignored");
    }
    if (cfg.variant != Variant::SEPKL_EMA_HA && (cfg.kl_beta_reason >= 0.0 || cfg.kl_beta_answer >= 0.0)) {
        w.push_back("kl_beta_reason/kl_beta_answer only apply to SEPKL_EMA_HA");
    }
    return w;
}

std::string metrics_header_line(const Config& cfg, const Dataset& data) {
    json c = json::object();
    for (auto key : config_keys()) c[std::string(key)] = get_config_value(cfg, key);
    json j{{"kind", "config"},
           {"variant", to_string(cfg.variant)},
           {"config", c},
           {"dataset_seed", data.seed},
           {"train_episodes", data.split(Level::TRAIN).size()},
           {"accuracy_decoding", "greedy"},
           {"consistency_decoding", "sampled"}};
    return j.dump();
}

std::string step_metrics_line(const StepMetrics& m) {
    json j{{"kind", "step"},
           {"step", m.step},
           {"mean_reward", m.mean_reward},
           {"mean_r_acc", m.mean_r_acc},
           {"mean_r_fmt", m.mean_r_fmt},
           {"bonus_rate", m.bonus_rate},
           {"consistency_rate", m.consistency_rate},
           {"kl", m.kl},
           {"objective", m.objective},
           {"clip_fraction", m.clip_fraction},
           {"mean_length", m.mean_length},
           {"ema_updated", m.ema_updated}};
    return j.dump();
}

std::string eval_metrics_line(std::uint64_t step, const EvalMetrics& e) {
    json j{{"kind", "eval"},
           {"step", step},
           {"l1_accuracy", e.l1},
           {"l2_accuracy", e.l2},
           {"l3_accuracy", e.l3},
           {"overall_accuracy", e.overall},
           {"consistency_rate", e.consistency}};
    return j.dump();
}

RunResult run_training(const Config& cfg_in, const Dataset& data, const RunOptions& opts) {
    const Config cfg = validate_config(cfg_in);
    const ModelSpec model = ModelSpec::from_config(cfg, data.vocab);
    RunResult res;
    res.warnings = config_warnings(cfg);
    res.state = init_train_state(cfg, model);
    TrainState& state = res.state;
    const auto& train = data.split(Level::TRAIN);
    if (train.empty()) throw ConfigError("dataset has no training episodes");

    std::ofstream metrics;
    std::ofstream audit;
    std::ofstream rollouts;
    if (opts.out_dir) {
        std::error_code ec;
        std::filesystem::create_directories(*opts.out_dir, ec);
        if (ec) throw IoError("cannot create " + opts.out_dir->string() + ": " + ec.message());
        metrics.open(*opts.out_dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
        if (!metrics) throw IoError("cannot write metrics.jsonl in " + opts.out_dir->string());
        if (opts.write_audit) audit.open(*opts.out_dir / "reward_audit.jsonl", std::ios::binary | std::ios::trunc);
        if (opts.write_rollouts) rollouts.open(*opts.out_dir / "rollouts.jsonl", std::ios::binary | std::ios::trunc);
        std::ofstream(*opts.out_dir / "config.txt", std::ios::binary | std::ios::trunc) << to_config_text(cfg);
    }
    const auto start = std::chrono::steady_clock::now();
    auto emit = [&](std::string line) {
        if (opts.log_wall_clock && line.front() == '{' && line.find("\"kind\":\"config\"") == std::string::npos) {
            auto j = json::parse(line);
            j["wall_clock"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            line = j.dump();
        }
        if (metrics.is_open()) {
            metrics << line << '\n';
            metrics.flush();
        }
        if (opts.on_log) opts.on_log(line);
        res.log.push_back(std::move(line));
    };

    StepSinks sinks;
    if (audit.is_open()) sinks.audit = [&](const std::string& l) { audit << l << '\n'; };
    if (rollouts.is_open()) sinks.rollout = [&](const std::string& l) { rollouts << l << '\n'; };

    auto checkpoint = [&](const std::string& name) {
        if (opts.out_dir) save_checkpoint(to_checkpoint(state), *opts.out_dir / name);
    };

    emit(metrics_header_line(cfg, data));
    const std::uint64_t eval_stream = 0;
    bool evaluated_last = false;
    for (int step = 0; step < cfg.total_steps; ++step) {
        auto batch = sample_batch(train, cfg, state.step);
        Config step_cfg = cfg;
        if (opts.fault_nan_step == state.step + 1) step_cfg.learning_rate = std::numeric_limits<double>::quiet_NaN();
        try {
            if (cfg.variant == Variant::SFT) {
                StepMetrics m;
                const double nll = sft_step(state, batch, model, step_cfg);
                m.step = state.step;
                m.mean_reward = -nll;
                emit(step_metrics_line(m));
            } else {
                emit(step_metrics_line(train_step(state, batch, model, step_cfg, &sinks)));
            }
        } catch (const NumericError&) {
            checkpoint("last_good.ckpt");
            throw;
        }
        evaluated_last = false;
        if (cfg.eval_interval > 0 && state.step % static_cast<std::uint64_t>(cfg.eval_interval) == 0) {
            res.final_eval = evaluate_validation(model, state.theta, data, cfg, eval_stream + state.step);
            emit(eval_metrics_line(state.step, res.final_eval));
            evaluated_last = true;
        }
        if (cfg.checkpoint_interval > 0 && state.step % static_cast<std::uint64_t>(cfg.checkpoint_interval) == 0) {
            checkpoint("step_" + std::to_string(state.step) + ".ckpt");
        }
    }
    if (!evaluated_last) {
        res.final_eval = evaluate_validation(model, state.theta, data, cfg, eval_stream + state.step);
    }
    checkpoint("final.ckpt");
    return res;
}

}  // namespace care
