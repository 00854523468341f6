#include "care/rollout.hpp"

#include <nlohmann/json.hpp>

namespace care {

std::vector<Trajectory> rollout_group(const ModelSpec& model, const PolicyParams& theta_old, const Episode& ep,
                                      int group_size, std::uint64_t root, std::uint64_t stream,
                                      double temperature) {
    if (group_size < 2) throw std::invalid_argument("group_size < 2");
    std::vector<Trajectory> out;
    out.reserve(static_cast<std::size_t>(group_size));
    for (int g = 0; g < group_size; ++g) {
        Rng rng = make_rng(root, static_cast<std::uint64_t>(Stream::Rollout), stream, static_cast<std::uint64_t>(g));
        out.push_back(sample_trajectory(model, theta_old, ep, rng, temperature));
    }
    return out;
}

std::optional<int> extract_answer(const Trajectory& traj, const Vocabulary& vocab) {
    return parse_answer(traj.tokens, vocab);
}

double accuracy_score(std::optional<int> extracted, int ground_truth) {
    return extracted && *extracted == ground_truth ? 1.0 : 0.0;
}

double format_score(const Trajectory& traj, const Vocabulary& vocab) {
    return parse_answer(traj.tokens, vocab) ? 1.0 : 0.0;
}

GroupScores score_group(std::span<const Trajectory> group, const Episode& ep, const Vocabulary& vocab) {
    GroupScores s;
    for (const auto& t : group) {
        auto letter = extract_answer(t, vocab);
        s.r_acc.push_back(accuracy_score(letter, ep.answer));
        s.r_fmt.push_back(letter ? 1.0 : 0.0);
    }
    return s;
}

std::string rollout_dump_line(const Episode& ep, const Trajectory& traj, double r_acc, double r_fmt,
                              const Vocabulary& vocab) {
    nlohmann::json j{{"episode_id", ep.id},
                     {"tokens", traj.tokens},
                     {"text", vocab.render(traj.tokens)},
                     {"r_acc", r_acc},
                     {"r_fmt", r_fmt}};
    return j.dump();
}

}  // namespace care
