#pragma once

#include <span>
#include <string>
#include <vector>

#include "care/core.hpp"
#include "care/policy.hpp"

namespace care {

struct ConsistencyRecord {
    std::size_t index = 0;
    bool selected_high_acc = false;
    double p = 0.0;
    double p_clipped = 0.0;
    bool is_consistent = false;
};

struct GroupRewardSummary {
    double acc_baseline = 0.0;   // r_hat_acc
    double cons_baseline = 0.0;  // mu_hat_p (0 when nothing was selected)
    double reward_mean = 0.0;
    double reward_std = 0.0;
};

struct HighAccuracySelection {
    double baseline = 0.0;
    std::vector<bool> mask;
};

/// r_hat = max(mean(r_acc), gamma_acc); mask[g] = r_acc[g] >= r_hat.
HighAccuracySelection select_high_accuracy(std::span<const double> r_acc, double gamma_acc);

struct Calibration {
    std::vector<ConsistencyRecord> records;  // one per selected trajectory
    double baseline = 0.0;
};

/// Likelihood clipping and the relative consistency test, given reference
/// likelihoods. With ConsistencyBaseline::Selected only selected entries of
/// `likelihood` are read; with Group the mean runs over every entry whose
/// `has_likelihood` flag is set.
Calibration calibrate_from_likelihoods(std::span<const double> likelihood, const std::vector<bool>& mask,
                                       double gamma_p, double eps_p,
                                       ConsistencyBaseline mode = ConsistencyBaseline::Selected,
                                       const std::vector<bool>& has_likelihood = {});

/// Reference likelihood p_g of a well-formed trajectory's answer letter given
/// the prompt and its own reasoning (through <answer>).
double reference_likelihood(const ModelSpec& model, const PolicyParams& phi, const Episode& ep,
                            const Trajectory& traj);

/// Computes p_g under phi for the selected trajectories (and for every
/// parseable one in Group mode), then calibrates.
Calibration calibrate_consistency(const ModelSpec& model, const PolicyParams& phi, const Episode& ep,
                                  std::span<const Trajectory> group, const std::vector<bool>& mask, double gamma_p,
                                  double eps_p, ConsistencyBaseline mode = ConsistencyBaseline::Selected);

/// R_g = r_acc + r_fmt + lambda * r_acc * [consistent]. `bonus` receives the
/// last term per trajectory when non-null.
std::vector<double> total_rewards_care(std::span<const double> r_acc, std::span<const double> r_fmt,
                                       std::span<const ConsistencyRecord> records, double lambda_cons,
                                       std::vector<double>* bonus = nullptr);

/// (R - mean) / population std; all zeros when std < 1e-6.
std::vector<double> normalize_advantages(std::span<const double> rewards);

inline constexpr double kDegenerateStd = 1e-6;

double dense_cons_reward(double r_acc, double p, double lambda_cons);

/// Regenerates the answer block from phi after the trajectory's reasoning and
/// scores it: lambda * accuracy(extract(reasoning ++ a'), y*). Malformed
/// reasoning or regeneration scores 0.
double refgen_reward(const ModelSpec& model, const PolicyParams& phi, const Episode& ep, const Trajectory& traj,
                     Rng& rng, double lambda_cons, double temperature = 1.0);

/// Phases 2-4 on precomputed reference likelihoods, for audits and oracles.
struct CareGroupResult {
    HighAccuracySelection selection;
    Calibration calibration;
    std::vector<double> bonus;
    std::vector<double> rewards;
    std::vector<double> advantages;
    GroupRewardSummary summary;
};

CareGroupResult care_group_from_likelihoods(std::span<const double> r_acc, std::span<const double> r_fmt,
                                            std::span<const double> likelihood, const Config& cfg,
                                            const std::vector<bool>& has_likelihood = {});

/// One audit line: summary plus per-trajectory breakdown and records.
std::string reward_audit_line(std::uint64_t step, const Episode& ep, std::span<const RewardBreakdown> breakdown,
                              std::span<const ConsistencyRecord> records, const GroupRewardSummary& summary);

}  // namespace care
