#include "care/care_reward.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "care/rollout.hpp"

namespace care {

namespace {

double mean_of(std::span<const double> xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

}  // namespace

HighAccuracySelection select_high_accuracy(std::span<const double> r_acc, double gamma_acc) {
    if (r_acc.empty()) throw std::invalid_argument("select_high_accuracy on an empty group");
    HighAccuracySelection sel;
    sel.baseline = std::max(mean_of(r_acc), gamma_acc);
    sel.mask.reserve(r_acc.size());
    for (double r : r_acc) sel.mask.push_back(r >= sel.baseline);
    return sel;
}

Calibration calibrate_from_likelihoods(std::span<const double> likelihood, const std::vector<bool>& mask,
                                       double gamma_p, double eps_p, ConsistencyBaseline mode,
                                       const std::vector<bool>& has_likelihood) {
    if (likelihood.size() != mask.size()) throw std::invalid_argument("likelihood and mask differ in length");
    Calibration cal;
    const bool any = std::find(mask.begin(), mask.end(), true) != mask.end();
    if (!any) return cal;

    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t g = 0; g < mask.size(); ++g) {
        const bool counted = mode == ConsistencyBaseline::Selected
                                 ? mask[g]
                                 : (has_likelihood.empty() ? true : (has_likelihood[g] || mask[g]));
        if (!counted) continue;
        sum += std::min(likelihood[g], gamma_p);
        ++n;
    }
    cal.baseline = sum / static_cast<double>(n) - eps_p;
    for (std::size_t g = 0; g < mask.size(); ++g) {
        if (!mask[g]) continue;
        ConsistencyRecord rec;
        rec.index = g;
        rec.selected_high_acc = true;
        rec.p = likelihood[g];
        rec.p_clipped = std::min(likelihood[g], gamma_p);
        rec.is_consistent = rec.p_clipped >= cal.baseline;
        cal.records.push_back(rec);
    }
    return cal;
}

double reference_likelihood(const ModelSpec& model, const PolicyParams& phi, const Episode& ep,
                            const Trajectory& traj) {
    if (!parse_answer(traj.tokens, model.vocab)) {
        throw std::invalid_argument("reference likelihood needs a well-formed trajectory");
    }
    // ... <answer> letter </answer>: score the letter given everything before it
    std::span<const Token> all(traj.tokens);
    auto prefix = all.first(all.size() - 2);
    auto answer = all.subspan(all.size() - 2, 1);
    return answer_likelihood(model, phi, ep, prefix, answer);
}

Calibration calibrate_consistency(const ModelSpec& model, const PolicyParams& phi, const Episode& ep,
                                  std::span<const Trajectory> group, const std::vector<bool>& mask, double gamma_p,
                                  double eps_p, ConsistencyBaseline mode) {
    if (group.size() != mask.size()) throw std::invalid_argument("group and mask differ in length");
    std::vector<double> p(group.size(), 0.0);
    std::vector<bool> has(group.size(), false);
    for (std::size_t g = 0; g < group.size(); ++g) {
        const bool wanted = mask[g] || (mode == ConsistencyBaseline::Group && group[g].parsed.has_value());
        if (!wanted) continue;
        p[g] = reference_likelihood(model, phi, ep, group[g]);
        has[g] = true;
    }
    return calibrate_from_likelihoods(p, mask, gamma_p, eps_p, mode, has);
}

std::vector<double> total_rewards_care(std::span<const double> r_acc, std::span<const double> r_fmt,
                                       std::span<const ConsistencyRecord> records, double lambda_cons,
                                       std::vector<double>* bonus) {
    if (r_acc.size() != r_fmt.size()) throw std::invalid_argument("reward lists differ in length");
    std::vector<double> consistent(r_acc.size(), 0.0);
    for (const auto& rec : records) {
        if (rec.index >= r_acc.size()) throw std::out_of_range("consistency record index");
        consistent[rec.index] = rec.is_consistent ? 1.0 : 0.0;
    }
    std::vector<double> out(r_acc.size());
    if (bonus) bonus->assign(r_acc.size(), 0.0);
    for (std::size_t g = 0; g < r_acc.size(); ++g) {
        const double b = lambda_cons * r_acc[g] * consistent[g];
        out[g] = r_acc[g] + r_fmt[g] + b;
        if (bonus) (*bonus)[g] = b;
    }
    return out;
}

std::vector<double> normalize_advantages(std::span<const double> rewards) {
    if (rewards.size() < 2) throw std::invalid_argument("advantage normalisation needs at least 2 rewards");
    const double mu = mean_of(rewards);
    double var = 0.0;
    for (double r : rewards) var += (r - mu) * (r - mu);
    const double sd = std::sqrt(var / static_cast<double>(rewards.size()));
    std::vector<double> out(rewards.size(), 0.0);
    if (sd < kDegenerateStd) return out;
    for (std::size_t g = 0; g < rewards.size(); ++g) out[g] = (rewards[g] - mu) / sd;
    return out;
}

double dense_cons_reward(double r_acc, double p, double lambda_cons) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("likelihood out of [0,1]");
    return lambda_cons * r_acc * p;
}

double refgen_reward(const ModelSpec& model, const PolicyParams& phi, const Episode& ep, const Trajectory& traj,
                     Rng& rng, double lambda_cons, double temperature) {
    auto reasoning = traj.reasoning();
    if (reasoning.empty() || reasoning.front() != Vocabulary::kThinkOpen ||
        reasoning.back() != Vocabulary::kThinkClose) {
        return 0.0;
    }
    auto regenerated = sample_continuation(model, phi, ep, reasoning, rng, temperature);
    std::vector<Token> full(reasoning.begin(), reasoning.end());
    full.insert(full.end(), regenerated.begin(), regenerated.end());
    return lambda_cons * accuracy_score(parse_answer(full, model.vocab), ep.answer);
}

CareGroupResult care_group_from_likelihoods(std::span<const double> r_acc, std::span<const double> r_fmt,
                                            std::span<const double> likelihood, const Config& cfg,
                                            const std::vector<bool>& has_likelihood) {
    CareGroupResult res;
    res.selection = select_high_accuracy(r_acc, cfg.gamma_acc);
    res.calibration = calibrate_from_likelihoods(likelihood, res.selection.mask, cfg.gamma_p, cfg.eps_p,
                                                 cfg.consistency_baseline, has_likelihood);
    res.rewards = total_rewards_care(r_acc, r_fmt, res.calibration.records, cfg.lambda_cons, &res.bonus);
    res.advantages = normalize_advantages(res.rewards);
    res.summary.acc_baseline = res.selection.baseline;
    res.summary.cons_baseline = res.calibration.baseline;
    res.summary.reward_mean = mean_of(res.rewards);
    double var = 0.0;
    for (double r : res.rewards) var += (r - res.summary.reward_mean) * (r - res.summary.reward_mean);
    res.summary.reward_std = std::sqrt(var / static_cast<double>(res.rewards.size()));
    return res;
}

std::string reward_audit_line(std::uint64_t step, const Episode& ep, std::span<const RewardBreakdown> breakdown,
                              std::span<const ConsistencyRecord> records, const GroupRewardSummary& summary) {
    using nlohmann::json;
    json rows = json::array();
    for (const auto& b : breakdown) {
        rows.push_back({{"r_acc", b.r_acc},
                        {"r_fmt", b.r_fmt},
                        {"consistency_bonus", b.consistency_bonus},
                        {"total", b.total},
                        {"advantage", b.advantage}});
    }
    json recs = json::array();
    for (const auto& r : records) {
        recs.push_back({{"index", r.index},
                        {"selected_high_acc", r.selected_high_acc},
                        {"p", r.p},
                        {"p_clipped", r.p_clipped},
                        {"is_consistent", r.is_consistent}});
    }
    json j{{"step", step},
           {"episode_id", ep.id},
           {"acc_baseline", summary.acc_baseline},
           {"cons_baseline", summary.cons_baseline},
           {"reward_mean", summary.reward_mean},
           {"reward_std", summary.reward_std},
           {"rewards", rows},
           {"records", recs}};
    return j.dump();
}

}  // namespace care
