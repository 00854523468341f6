#pragma once

#include <optional>
#include <vector>

#include "care/core.hpp"
#include "care/policy.hpp"

namespace care {

/// G independent samples from theta_old; rollout g draws from
/// make_rng(root, Stream::Rollout, stream, g).
std::vector<Trajectory> rollout_group(const ModelSpec& model, const PolicyParams& theta_old, const Episode& ep,
                                      int group_size, std::uint64_t root, std::uint64_t stream,
                                      double temperature);

/// Letter index when the stream holds exactly one think block followed by
/// exactly one single-letter answer block; empty otherwise.
std::optional<int> extract_answer(const Trajectory& traj, const Vocabulary& vocab);

double accuracy_score(std::optional<int> extracted, int ground_truth);
double format_score(const Trajectory& traj, const Vocabulary& vocab);

struct GroupScores {
    std::vector<double> r_acc;
    std::vector<double> r_fmt;
};

GroupScores score_group(std::span<const Trajectory> group, const Episode& ep, const Vocabulary& vocab);

/// One JSON object per rollout: episode_id, tokens, rendered text, scores.
std::string rollout_dump_line(const Episode& ep, const Trajectory& traj, double r_acc, double r_fmt,
                              const Vocabulary& vocab);

}  // namespace care
