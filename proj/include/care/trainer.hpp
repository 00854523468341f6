#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "care/core.hpp"
#include "care/evalx.hpp"
#include "care/policy.hpp"
#include "care/taskgen.hpp"

namespace care {

struct AdamState {
    PolicyParams m;
    PolicyParams v;
    std::uint64_t t = 0;
};

struct TrainState {
    PolicyParams theta;
    PolicyParams phi;      // EMA reference
    PolicyParams initial;  // frozen copy of theta at step 0
    AdamState adam;
    std::uint64_t step = 0;
    Variant variant = Variant::GRPO;
    std::uint64_t seed = 0;
};

/// theta from init_params(cfg.seed), phi = initial = theta.
TrainState init_train_state(const Config& cfg, const ModelSpec& model);

/// Adam ascent on `grad`.
void adam_step(TrainState& state, const PolicyParams& grad, const Config& cfg);

/// KL configuration of a variant for one group (`high_acc` from Phase 2).
KLSpec kl_spec_for(const Config& cfg, const TrainState& state, const std::vector<bool>& high_acc);

struct StepMetrics {
    std::uint64_t step = 0;
    double mean_reward = 0.0;
    double mean_r_acc = 0.0;
    double mean_r_fmt = 0.0;
    double bonus_rate = 0.0;        // trajectories with a positive consistency bonus
    double consistency_rate = 0.0;  // oracle-judged consistency of the rollouts
    double kl = 0.0;                // mean per-token KL over penalised tokens
    double objective = 0.0;
    double clip_fraction = 0.0;
    double mean_length = 0.0;
    bool ema_updated = false;
};

/// Optional sinks for per-step debugging output.
struct StepSinks {
    std::function<void(const std::string&)> audit;    // reward audit JSON lines
    std::function<void(const std::string&)> rollout;  // rollout dump JSON lines
};

/// One optimisation step on `batch`: rollouts from theta_old = theta, variant
/// rewards, group-normalised advantages, one Adam update, then the EMA refresh
/// when the new step count is a multiple of ema_interval.
StepMetrics train_step(TrainState& state, std::span<const Episode> batch, const ModelSpec& model,
                       const Config& cfg, const StepSinks* sinks = nullptr);

/// One Adam step maximising the teacher-forced log-likelihood of the oracle
/// traces. Returns the mean negative log-likelihood before the update.
double sft_step(TrainState& state, std::span<const Episode> batch, const ModelSpec& model, const Config& cfg);

/// Mean NLL of the oracle traces of `batch` and its gradient (d NLL / d theta).
LikelihoodResult sft_loss_grad(const PolicyParams& theta, std::span<const Episode> batch, const ModelSpec& model);

/// Episodes for step t: batch_size indices drawn from make_rng(seed, Stream::Batch, t).
std::vector<Episode> sample_batch(const std::vector<Episode>& train, const Config& cfg, std::uint64_t step);

struct RunOptions {
    std::optional<std::filesystem::path> out_dir;  // metrics.jsonl, checkpoints, audit files
    bool write_audit = false;
    bool write_rollouts = false;
    bool log_wall_clock = false;  // adds a wall_clock field (breaks byte-identical logs)
    std::function<void(const std::string&)> on_log;  // every metrics line as written
    std::uint64_t fault_nan_step = 0;  // >0: that update uses a NaN step size (failure-path testing)
};

struct RunResult {
    TrainState state;
    std::vector<std::string> log;  // metrics JSON lines, header first
    EvalMetrics final_eval;
    std::vector<std::string> warnings;
};

/// Warnings for configurations whose settings are ignored (e.g. kl_beta under CARE).
std::vector<std::string> config_warnings(const Config& cfg);

/// Runs cfg.total_steps steps; evaluates every eval_interval steps; writes
/// checkpoints at checkpoint_interval (and at the end) when out_dir is set.
/// On a non-finite update throws NumericError after saving last_good.ckpt.
RunResult run_training(const Config& cfg, const Dataset& data, const RunOptions& opts = {});

std::string metrics_header_line(const Config& cfg, const Dataset& data);
std::string step_metrics_line(const StepMetrics& m);
std::string eval_metrics_line(std::uint64_t step, const EvalMetrics& e);

}  // namespace care
