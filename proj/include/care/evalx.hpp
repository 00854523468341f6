#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "care/core.hpp"
#include "care/policy.hpp"

namespace care {

struct Dataset;

/// Deterministic stand-in for an LLM judge: the response must be well formed
/// and the last content token of its think block must be the surface action
/// of the chosen letter. Strict mode also rejects reasoning that claims a
/// progress action not present in the observation.
bool consistency_oracle(const Trajectory& traj, const Episode& ep, const Vocabulary& vocab, bool strict = false);

struct LevelAccuracy {
    std::array<double, 4> accuracy{};  // indexed by Level; NaN-free, 0 for empty levels
    std::array<int, 4> count{};
    double overall = 0.0;
    int total = 0;

    double at(Level level) const { return accuracy[static_cast<std::size_t>(level)]; }
};

/// Greedy decoding; accuracy per level tag and overall.
LevelAccuracy evaluate_split(const ModelSpec& model, const PolicyParams& params, std::span<const Episode> episodes,
                             int workers = 1);

/// Fraction of sampled responses (one per episode, rng stream
/// make_rng(root, Stream::Eval, stream, index)) judged consistent.
double consistency_rate(const ModelSpec& model, const PolicyParams& params, std::span<const Episode> episodes,
                        std::uint64_t root, std::uint64_t stream, double temperature, bool strict = false,
                        int workers = 1);

struct EvalMetrics {
    double l1 = 0.0;
    double l2 = 0.0;
    double l3 = 0.0;
    double overall = 0.0;
    double consistency = 0.0;
};

/// Accuracy on L1/L2/L3 plus consistency rate over all validation episodes.
EvalMetrics evaluate_validation(const ModelSpec& model, const PolicyParams& params, const Dataset& data,
                                const Config& cfg, std::uint64_t stream);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population
};

MeanStd mean_std(std::span<const double> xs);

struct ComparisonRow {
    Variant variant = Variant::GRPO;
    std::vector<EvalMetrics> per_seed;
    MeanStd l1, l2, l3, consistency;
};

struct ComparisonTable {
    std::vector<std::uint64_t> seeds;
    int steps = 0;
    std::vector<ComparisonRow> rows;

    const ComparisonRow& row(Variant v) const;
    std::string to_text() const;
    std::string to_csv() const;
};

using ComparisonProgress = std::function<void(Variant, std::uint64_t, const EvalMetrics&)>;
using DatasetForSeed = std::function<const Dataset&(std::uint64_t)>;

/// Trains every variant once per seed from `base` and tabulates final
/// validation metrics. `progress` (optional) is called after each run.
ComparisonTable compare_variants(const Config& base, const Dataset& data, std::span<const Variant> variants,
                                 std::span<const std::uint64_t> seeds, const ComparisonProgress& progress = {});

/// Same, with the dataset chosen per seed (e.g. one generated from each seed).
ComparisonTable compare_variants(const Config& base, const DatasetForSeed& data_for, std::span<const Variant> variants,
                                 std::span<const std::uint64_t> seeds, const ComparisonProgress& progress = {});

/// Runs fn(i) for i in [0, n) on up to `workers` threads (0: hardware
/// concurrency). Each index must write only its own output slot.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

}  // namespace care
