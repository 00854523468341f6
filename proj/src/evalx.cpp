#include "care/evalx.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <thread>

#include "care/rollout.hpp"
#include "care/trainer.hpp"

namespace care {

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    std::size_t w = workers > 0 ? static_cast<std::size_t>(workers) : std::max(1u, std::thread::hardware_concurrency());
    w = std::min(w, n);
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> threads;
    std::vector<std::exception_ptr> errors(w);
    for (std::size_t k = 0; k < w; ++k) {
        threads.emplace_back([&, k] {
            try {
                for (std::size_t i = k; i < n; i += w) fn(i);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        });
    }
    threads.clear();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

bool consistency_oracle(const Trajectory& traj, const Episode& ep, const Vocabulary& vocab, bool strict) {
    auto letter = parse_answer(traj.tokens, vocab);
    if (!letter) return false;
    // well formed: tokens = <think> body </think> <answer> L </answer>
    const std::size_t close = traj.tokens.size() - 4;
    Token conclusion = -1;
    for (std::size_t i = close; i-- > 1;) {
        if (!vocab.is_special(traj.tokens[i])) {
            conclusion = traj.tokens[i];
            break;
        }
    }
    if (conclusion < 0 || !vocab.is_surface(conclusion)) return false;
    if (conclusion != ep.candidates[static_cast<std::size_t>(*letter)]) return false;
    if (strict) {
        // claimed progress: every surface token before the conclusion
        std::size_t last = close - 1;
        while (traj.tokens[last] != conclusion) --last;
        for (std::size_t i = 1; i < last; ++i) {
            Token t = traj.tokens[i];
            if (!vocab.is_surface(t)) continue;
            if (std::find(ep.observation.begin(), ep.observation.end(), t) == ep.observation.end()) return false;
        }
    }
    return true;
}

LevelAccuracy evaluate_split(const ModelSpec& model, const PolicyParams& params, std::span<const Episode> episodes,
                             int workers) {
    std::vector<double> correct(episodes.size(), 0.0);
    parallel_for(episodes.size(), workers, [&](std::size_t i) {
        Rng unused(0);
        auto traj = sample_trajectory(model, params, episodes[i], unused, 0.0);
        correct[i] = accuracy_score(parse_answer(traj.tokens, model.vocab), episodes[i].answer);
    });
    LevelAccuracy out;
    std::array<double, 4> sums{};
    double total = 0.0;
    for (std::size_t i = 0; i < episodes.size(); ++i) {
        auto l = static_cast<std::size_t>(episodes[i].level);
        sums[l] += correct[i];
        ++out.count[l];
        total += correct[i];
    }
    for (std::size_t l = 0; l < 4; ++l) out.accuracy[l] = out.count[l] ? sums[l] / out.count[l] : 0.0;
    out.total = static_cast<int>(episodes.size());
    out.overall = episodes.empty() ? 0.0 : total / static_cast<double>(episodes.size());
    return out;
}

double consistency_rate(const ModelSpec& model, const PolicyParams& params, std::span<const Episode> episodes,
                        std::uint64_t root, std::uint64_t stream, double temperature, bool strict, int workers) {
    if (episodes.empty()) return 0.0;
    std::vector<double> ok(episodes.size(), 0.0);
    parallel_for(episodes.size(), workers, [&](std::size_t i) {
        Rng rng = make_rng(root, static_cast<std::uint64_t>(Stream::Eval), stream, i);
        auto traj = sample_trajectory(model, params, episodes[i], rng, temperature);
        ok[i] = consistency_oracle(traj, episodes[i], model.vocab, strict) ? 1.0 : 0.0;
    });
    double s = 0.0;
    for (double v : ok) s += v;
    return s / static_cast<double>(episodes.size());
}

EvalMetrics evaluate_validation(const ModelSpec& model, const PolicyParams& params, const Dataset& data,
                                const Config& cfg, std::uint64_t stream) {
    std::vector<Episode> val;
    for (Level l : {Level::L1, Level::L2, Level::L3}) {
        const auto& s = data.split(l);
        val.insert(val.end(), s.begin(), s.end());
    }
    auto acc = evaluate_split(model, params, val, cfg.workers);
    EvalMetrics m;
    m.l1 = acc.at(Level::L1);
    m.l2 = acc.at(Level::L2);
    m.l3 = acc.at(Level::L3);
    m.overall = acc.overall;
    m.consistency = consistency_rate(model, params, val, cfg.seed, stream, cfg.temperature, cfg.strict_consistency,
                                     cfg.workers);
    return m;
}

MeanStd mean_std(std::span<const double> xs) {
    MeanStd r;
    if (xs.empty()) return r;
    for (double x : xs) r.mean += x;
    r.mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(var / static_cast<double>(xs.size()));
    return r;
}

const ComparisonRow& ComparisonTable::row(Variant v) const {
    for (const auto& r : rows) {
        if (r.variant == v) return r;
    }
    throw std::out_of_range("variant not in comparison table");
}

std::string ComparisonTable::to_text() const {
    std::ostringstream out;
    auto cell = [](const MeanStd& m) {
        std::ostringstream c;
        c << std::fixed << std::setprecision(1) << 100.0 * m.mean << " +- " << std::setprecision(1) << 100.0 * m.std;
        return c.str();
    };
    out << std::left << std::setw(14) << "variant" << std::setw(16) << "L1" << std::setw(16) << "L2" << std::setw(16)
        << "L3" << "consistency\n";
    for (const auto& r : rows) {
        out << std::left << std::setw(14) << to_string(r.variant) << std::setw(16) << cell(r.l1) << std::setw(16)
            << cell(r.l2) << std::setw(16) << cell(r.l3) << cell(r.consistency) << '\n';
    }
    out << "(" << seeds.size() << " seeds, " << steps << " steps; accuracy greedy, consistency sampled)\n";
    return out.str();
}

std::string ComparisonTable::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(17);
    out << "variant,l1_mean,l1_std,l2_mean,l2_std,l3_mean,l3_std,consistency_mean,consistency_std,seeds,steps\n";
    for (const auto& r : rows) {
        out << to_string(r.variant) << ',' << r.l1.mean << ',' << r.l1.std << ',' << r.l2.mean << ',' << r.l2.std
            << ',' << r.l3.mean << ',' << r.l3.std << ',' << r.consistency.mean << ',' << r.consistency.std << ','
            << seeds.size() << ',' << steps << '\n';
    }
    return out.str();
}

ComparisonTable compare_variants(const Config& base, const Dataset& data, std::span<const Variant> variants,
                                 std::span<const std::uint64_t> seeds, const ComparisonProgress& progress) {
    return compare_variants(base, [&](std::uint64_t) -> const Dataset& { return data; }, variants, seeds, progress);
}

ComparisonTable compare_variants(const Config& base, const DatasetForSeed& data_for, std::span<const Variant> variants,
                                 std::span<const std::uint64_t> seeds, const ComparisonProgress& progress) {
    if (seeds.empty()) throw std::invalid_argument("compare_variants needs at least one seed");
    ComparisonTable table;
    table.seeds.assign(seeds.begin(), seeds.end());
    table.steps = base.total_steps;
    for (Variant v : variants) {
        ComparisonRow row;
        row.variant = v;
        for (auto seed : seeds) {
            Config cfg = base;
            cfg.variant = v;
            cfg.seed = seed;
            auto run = run_training(cfg, data_for(seed));
            row.per_seed.push_back(run.final_eval);
            if (progress) progress(v, seed, run.final_eval);
        }
        auto collect = [&](auto field) {
            std::vector<double> xs;
            for (const auto& m : row.per_seed) xs.push_back(m.*field);
            return mean_std(xs);
        };
        row.l1 = collect(&EvalMetrics::l1);
        row.l2 = collect(&EvalMetrics::l2);
        row.l3 = collect(&EvalMetrics::l3);
        row.consistency = collect(&EvalMetrics::consistency);
        table.rows.push_back(std::move(row));
    }
    return table;
}

}  // namespace care
