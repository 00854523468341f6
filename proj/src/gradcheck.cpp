#include "care/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>

#include "care/care_reward.hpp"
#include "care/rollout.hpp"
#include "care/taskgen.hpp"
#include "care/trainer.hpp"

namespace care {

namespace {

constexpr const char* kKinds[] = {"clip_inactive", "clip_active", "kl_full", "kl_high_acc", "kl_separate", "sft"};
constexpr int kNumKinds = 6;
constexpr double kKinkMargin = 1e-3;

SplitSpec tiny_spec() {
    SplitSpec s;
    s.train_count = 16;
    s.l1_count = 4;
    s.l2_count = 4;
    s.l3_count = 4;
    return s;
}

std::vector<std::size_t> pick_coordinates(const PolicyParams& p, int count, Rng& rng) {
    std::vector<std::size_t> all(p.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(std::min(all.size(), static_cast<std::size_t>(std::max(count, 0))));
    const std::size_t base = p.layout().offset(Block::Scalars);
    for (std::size_t k = 0; k < static_cast<std::size_t>(kNumScalars); ++k) {
        if (std::find(all.begin(), all.end(), base + k) == all.end()) all.push_back(base + k);
    }
    std::sort(all.begin(), all.end());
    return all;
}

}  // namespace

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

std::string GradCheckReport::to_text() const {
    std::ostringstream out;
    for (const auto& c : cases) {
        out << "case " << std::setw(2) << c.index << "  " << std::left << std::setw(14) << c.kind << std::right
            << (c.constrained ? " constrained  " : " free         ") << "coords " << std::setw(3) << c.coordinates
            << "  max_rel_err " << std::scientific << std::setprecision(3) << c.max_rel_err << std::defaultfloat
            << "  " << (c.pass ? "ok" : "FAIL") << '\n';
    }
    out << passed << '/' << cases.size() << " cases pass, max rel err " << std::scientific << std::setprecision(3)
        << max_rel_err << (ok() ? " < " : " >= ") << tolerance << '\n';
    return out.str();
}

GradCheckReport run_gradcheck(const GradCheckOptions& opts) {
    GradCheckReport report;
    report.tolerance = opts.tolerance;
    const Dataset data = build_splits(tiny_spec(), opts.seed);
    const auto& episodes = data.split(Level::TRAIN);

    for (int i = 0; i < opts.cases; ++i) {
        Rng rng = make_rng(opts.seed, 0x6772ad, static_cast<std::uint64_t>(i));
        GradCheckCase c;
        c.index = i;
        c.kind = kKinds[i % kNumKinds];
        c.constrained = i % 4 != 3;

        ModelSpec model;
        model.vocab = data.vocab;
        model.dims = Dims{data.vocab.size(), 4, 5};
        model.match_prior = 4.0 * uniform01(rng);
        model.think_prior = 3.0 * uniform01(rng);
        model.close_prior = 3.0 * uniform01(rng);
        for (auto& g : model.gains) g = 0.5 + 4.0 * uniform01(rng);
        model.constrained = c.constrained;
        model.max_reason_len = 8;
        model.max_answer_len = 1;

        const Episode& ep = episodes[static_cast<std::size_t>(i) % episodes.size()];
        PolicyParams theta = init_params(mix_seed(opts.seed, 1, static_cast<std::uint64_t>(i)), model.dims, 0.6);

        std::function<double(const PolicyParams&)> objective;
        PolicyParams analytic;

        if (c.kind == "sft") {
            std::vector<Episode> batch{ep, episodes[(static_cast<std::size_t>(i) + 1) % episodes.size()]};
            objective = [&model, batch](const PolicyParams& p) { return sft_loss_grad(p, batch, model).loglik; };
            analytic = sft_loss_grad(theta, batch, model).gradient;
        } else {
            // theta_old differs from theta so that ratios move away from 1. Instances
            // with a ratio near a clip edge are redrawn: the objective has a kink there.
            const double spread = c.kind == "clip_active" ? 0.4 : 0.05;
            const double clip_eps = c.kind == "clip_active" ? 0.05 : (c.kind == "clip_inactive" ? 10.0 : 0.2);
            const int g_size = 4;
            std::vector<Trajectory> group;
            for (int attempt = 0;; ++attempt) {
                PolicyParams theta_old = theta;
                for (double& v : theta_old.flat()) v += spread * (2.0 * uniform01(rng) - 1.0);
                group = rollout_group(model, theta_old, ep, g_size, opts.seed,
                                      mix_seed(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(attempt)), 1.0);
                double margin = 1.0;
                int outside = 0;
                for (const auto& tr : group) {
                    auto lp = logprob_of(model, theta, ep, tr.tokens);
                    for (std::size_t k = 0; k < lp.size(); ++k) {
                        const double r = std::exp(lp[k] - tr.logprobs[k]);
                        margin = std::min({margin, std::abs(r - (1.0 - clip_eps)), std::abs(r - (1.0 + clip_eps))});
                        if (std::abs(r - 1.0) > clip_eps) ++outside;
                    }
                }
                const bool wanted = c.kind != "clip_active" || outside > 0;
                if ((margin > kKinkMargin && wanted) || attempt >= 50) break;
            }
            std::vector<double> adv(group.size());
            std::normal_distribution<double> normal(0.0, 1.0);
            for (double& a : adv) a = normal(rng);

            auto reference = std::make_shared<PolicyParams>(theta);
            for (double& v : reference->flat()) v += 0.3 * (2.0 * uniform01(rng) - 1.0);
            KLSpec kl;
            if (c.kind == "kl_full" || c.kind == "kl_high_acc" || c.kind == "kl_separate") {
                kl.reference = reference.get();
                kl.beta = 0.05 + 0.5 * uniform01(rng);
                if (c.kind == "kl_full") {
                    kl.mode = KLMode::Full;
                } else {
                    kl.mode = c.kind == "kl_high_acc" ? KLMode::HighAccOnly : KLMode::Separate;
                    kl.mask.resize(group.size());
                    for (std::size_t g = 0; g < group.size(); ++g) kl.mask[g] = g % 2 == 0 || uniform01(rng) < 0.5;
                    kl.beta_reason = 0.05 + 0.5 * uniform01(rng);
                    kl.beta_answer = 0.05 + 0.5 * uniform01(rng);
                }
            }
            objective = [&model, &ep, group, adv, clip_eps, kl, reference](const PolicyParams& p) {
                return surrogate_grad(model, p, ep, group, adv, clip_eps, kl).objective;
            };
            analytic = surrogate_grad(model, theta, ep, group, adv, clip_eps, kl).gradient;
        }

        // round-off in (f(x+h) - f(x-h)) grows with |f|; components below that noise floor are not judged
        const double floor = 1e-6 * std::max(1.0, std::abs(objective(theta)));
        auto coords = pick_coordinates(theta, opts.coordinates, rng);
        c.coordinates = static_cast<int>(coords.size());
        PolicyParams probe = theta;
        for (std::size_t k : coords) {
            const double orig = probe.flat()[k];
            probe.flat()[k] = orig + opts.step;
            const double up = objective(probe);
            probe.flat()[k] = orig - opts.step;
            const double down = objective(probe);
            probe.flat()[k] = orig;
            const double numeric = (up - down) / (2.0 * opts.step);
            const double a = analytic.flat()[k] + opts.inject;
            c.max_rel_err = std::max(c.max_rel_err, relative_error(a, numeric, floor));
            c.max_abs_grad = std::max(c.max_abs_grad, std::abs(a));
        }
        c.pass = c.max_rel_err < opts.tolerance;
        if (c.pass) ++report.passed;
        report.max_rel_err = std::max(report.max_rel_err, c.max_rel_err);
        report.cases.push_back(c);
    }
    return report;
}

}  // namespace care
