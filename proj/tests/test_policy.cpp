#include <doctest.h>

#include <cmath>
#include <numeric>

#include "care/policy.hpp"
#include "care/rollout.hpp"
#include "support.hpp"

using namespace care;

namespace {

double prob_of(const TokenDistribution& dist, Token t) { return std::exp(dist.log_probs[static_cast<std::size_t>(t)]); }

double sum_exp(const std::vector<double>& lp) {
    double s = 0.0;
    for (double v : lp) s += std::exp(v);
    return s;
}

// Sampled group whose stored log-probs are shifted so that every ratio is `ratio`.
std::vector<Trajectory> group_with_ratio(const ModelSpec& m, const PolicyParams& theta, const Episode& ep, int g,
                                         double ratio) {
    auto group = rollout_group(m, theta, ep, std::max(g, 2), 17, 1, 1.0);
    group.resize(static_cast<std::size_t>(g));
    for (auto& tr : group) {
        auto lp = logprob_of(m, theta, ep, tr.tokens);
        for (std::size_t i = 0; i < lp.size(); ++i) tr.logprobs[i] = lp[i] - std::log(ratio);
    }
    return group;
}

}  // namespace

TEST_SUITE("policy") {

TEST_CASE("init_params: deterministic, bounded, expected flat length") {
    const Dims dims{61, 32, 64};
    auto a = init_params(3, dims);
    auto b = init_params(3, dims);
    CHECK(a == b);
    CHECK(init_params(4, dims) != a);
    const std::size_t expected = 61 * 32 + 64 * 3 * 32 + 64 + 61 * 64 + 61 + 32 * 64 + 5;
    CHECK(a.size() == expected);
    for (double v : a.flat()) CHECK(std::abs(v) <= 0.05);
}

TEST_CASE("fresh parameters answer near uniformly") {
    Config c;
    const Dataset d = build_splits(SplitSpec{}, 5);
    const ModelSpec m = ModelSpec::from_config(c, d.vocab);
    const auto theta = init_params(5, m.dims);
    std::array<double, 4> mean{};
    const auto& eps = d.split(Level::L1);
    for (int i = 0; i < 100; ++i) {
        const Episode& ep = eps[static_cast<std::size_t>(i)];
        Rng rng = make_rng(1, static_cast<std::uint64_t>(i));
        Trajectory t = sample_trajectory(m, theta, ep, rng, 1.0);
        std::vector<Token> prefix(t.tokens.begin(), t.tokens.begin() + static_cast<long>(t.reasoning_len));
        prefix.push_back(Vocabulary::kAnswerOpen);
        auto dist = forward_logits(m, theta, ep, prefix);
        for (int j = 0; j < 4; ++j) mean[static_cast<std::size_t>(j)] += std::exp(dist.log_probs[static_cast<std::size_t>(d.vocab.letter(j))]) / 100.0;
    }
    for (double p : mean) {
        CHECK(p >= 0.15);
        CHECK(p <= 0.35);
    }
}

TEST_CASE("softmax normalisation holds on every prefix") {
    for (bool constrained : {true, false}) {
        Config c = test::small_config();
        c.constrained_decoding = constrained;
        const ModelSpec m = test::small_model(c);
        const auto theta = init_params(8, m.dims, 0.5);
        for (const auto& ep : test::small_data().split(Level::TRAIN)) {
            Rng rng = make_rng(2);
            Trajectory t = sample_trajectory(m, theta, ep, rng, 1.0);
            for (std::size_t k = 0; k < t.tokens.size(); ++k) {
                auto dist = forward_logits(m, theta, ep, std::span<const Token>(t.tokens.data(), k));
                CHECK(std::abs(sum_exp(dist.log_probs) - 1.0) < 1e-9);
            }
        }
    }
}

TEST_CASE("storage order does not change logits") {
    const ModelSpec m = test::small_model();
    const auto theta = init_params(9, m.dims, 0.4);
    const BlockOrder reversed = {Block::Scalars, Block::Query, Block::OutputBias, Block::Output, Block::HiddenBias,
                                 Block::Hidden, Block::Embedding};
    const auto other = theta.relayout(reversed);
    CHECK(other.flat()[0] == theta.block(Block::Scalars)[0]);
    const Episode& ep = test::small_data().split(Level::L1)[0];
    Rng rng = make_rng(1);
    Trajectory t = sample_trajectory(m, theta, ep, rng, 1.0);
    for (std::size_t k = 0; k < t.tokens.size(); ++k) {
        std::span<const Token> prefix(t.tokens.data(), k);
        CHECK(forward_logits(m, theta, ep, prefix).logits == forward_logits(m, other, ep, prefix).logits);
    }
    CHECK(logprob_of(m, theta, ep, t.tokens) == logprob_of(m, other, ep, t.tokens));
    CHECK(other.relayout(kCanonicalOrder) == theta);
}

TEST_CASE("doubling a token's output weights raises its probability") {
    Config c = test::small_config();
    c.constrained_decoding = false;
    const ModelSpec m = test::small_model(c);
    auto theta = init_params(10, m.dims, 0.5);
    const Episode& ep = test::small_data().split(Level::TRAIN)[3];
    const std::vector<Token> prefix{Vocabulary::kThinkOpen};
    const auto base = forward_logits(m, theta, ep, prefix);
    // the token whose output-layer contribution is largest: doubling it adds a positive amount
    Token best = 0;
    double best_contrib = -1e300;
    for (Token t = 0; t < m.vocab.size(); ++t) {
        PolicyParams zeroed = theta;
        std::fill(zeroed.output_row(t).begin(), zeroed.output_row(t).end(), 0.0);
        zeroed.block(Block::OutputBias)[static_cast<std::size_t>(t)] = 0.0;
        const double contrib = base.logits[static_cast<std::size_t>(t)] -
                               forward_logits(m, zeroed, ep, prefix).logits[static_cast<std::size_t>(t)];
        if (contrib > best_contrib) {
            best_contrib = contrib;
            best = t;
        }
    }
    REQUIRE(best_contrib > 0.0);
    for (double& v : theta.output_row(best)) v *= 2.0;
    theta.block(Block::OutputBias)[static_cast<std::size_t>(best)] *= 2.0;
    auto after = forward_logits(m, theta, ep, prefix);
    CHECK(prob_of(after, best) > prob_of(base, best));
}

TEST_CASE("sampling: determinism, recorded log-probs, greedy limit") {
    const ModelSpec m = test::small_model();
    const auto theta = init_params(12, m.dims, 0.5);
    for (const auto& ep : test::small_data().split(Level::L1)) {
        Rng r1 = make_rng(4), r2 = make_rng(4);
        Trajectory a = sample_trajectory(m, theta, ep, r1, 1.0);
        Trajectory b = sample_trajectory(m, theta, ep, r2, 1.0);
        CHECK(a == b);
        REQUIRE(a.logprobs.size() == a.tokens.size());
        auto re = logprob_of(m, theta, ep, a.tokens);
        for (std::size_t i = 0; i < re.size(); ++i) {
            CHECK(std::abs(re[i] - a.logprobs[i]) <= 1e-9);
            CHECK(a.logprobs[i] <= 0.0);
        }
        CHECK(a.tokens.size() <= static_cast<std::size_t>(m.max_length()));
        CHECK(format_score(a, m.vocab) == 1.0);

        Rng g1 = make_rng(5), g2 = make_rng(6);
        Trajectory greedy = sample_trajectory(m, theta, ep, g1, 0.0);
        Trajectory cold = sample_trajectory(m, theta, ep, g2, 1e-4);
        CHECK(greedy.tokens == cold.tokens);
    }
}

TEST_CASE("grammar: forced tokens carry log-prob 0, letters only inside the answer") {
    const ModelSpec m = test::small_model();
    const auto theta = init_params(13, m.dims, 0.5);
    const Episode& ep = test::small_data().split(Level::L2)[0];
    Trajectory t = oracle_trace(ep, m.vocab);
    auto lp = logprob_of(m, theta, ep, t.tokens);
    CHECK(lp.front() == 0.0);                  // <think>
    CHECK(lp[t.reasoning_len] == 0.0);         // <answer>
    CHECK(lp.back() == 0.0);                   // </answer>
    std::vector<Token> bad{Vocabulary::kThinkOpen, m.vocab.letter(0)};
    CHECK_THROWS_AS(logprob_of(m, theta, ep, bad), std::invalid_argument);
    std::vector<Token> oob{Vocabulary::kThinkOpen, m.vocab.size()};
    CHECK_THROWS_AS(logprob_of(m, theta, ep, oob), std::out_of_range);
}

TEST_CASE("one-token trajectory equals the log-softmax at that token") {
    Config c = test::small_config();
    c.constrained_decoding = false;
    const ModelSpec m = test::small_model(c);
    const auto theta = init_params(14, m.dims, 0.5);
    const Episode& ep = test::small_data().split(Level::TRAIN)[0];
    auto dist = forward_logits(m, theta, ep, {});
    for (Token t : {Token{0}, Token{9}, Token{20}}) {
        std::vector<Token> one{t};
        CHECK(logprob_of(m, theta, ep, one)[0] == doctest::Approx(dist.log_probs[static_cast<std::size_t>(t)]).epsilon(1e-14));
    }
}

TEST_CASE("answer likelihood is the mean per-token probability") {
    const ModelSpec m = test::small_model();
    const auto theta = init_params(15, m.dims, 0.5);
    const Episode& ep = test::small_data().split(Level::TRAIN)[2];
    std::vector<Token> prefix{Vocabulary::kThinkOpen, ep.candidates[1], Vocabulary::kThinkClose, Vocabulary::kAnswerOpen};
    auto dist = forward_logits(m, theta, ep, prefix);
    const double p_letter = std::exp(dist.log_probs[static_cast<std::size_t>(m.vocab.letter(1))]);
    std::vector<Token> one{m.vocab.letter(1)};
    CHECK(answer_likelihood(m, theta, ep, prefix, one) == doctest::Approx(p_letter).epsilon(1e-14));
    // the closing tag is forced (probability 1), so the two-token mean is (p + 1) / 2
    std::vector<Token> two{m.vocab.letter(1), Vocabulary::kAnswerClose};
    CHECK(answer_likelihood(m, theta, ep, prefix, two) == doctest::Approx((p_letter + 1.0) / 2.0).epsilon(1e-14));
    CHECK_THROWS(answer_likelihood(m, theta, ep, prefix, std::vector<Token>{}));

    Config free_cfg = test::small_config();
    free_cfg.constrained_decoding = false;
    const ModelSpec free_model = test::small_model(free_cfg);
    Rng rng = make_rng(77);
    for (int i = 0; i < 40; ++i) {
        const auto th = init_params(100 + static_cast<std::uint64_t>(i), m.dims, 0.7);
        const ModelSpec& mm = i % 2 ? m : free_model;
        const Episode& e = test::small_data().split(Level::TRAIN)[static_cast<std::size_t>(i)];
        Trajectory t = sample_trajectory(mm, th, e, rng, 1.0);
        const std::size_t cut = t.tokens.size() / 2;
        std::span<const Token> pre(t.tokens.data(), cut);
        std::span<const Token> ans(t.tokens.data() + cut, t.tokens.size() - cut);
        if (ans.empty()) continue;
        CHECK(std::abs(answer_likelihood(mm, th, e, pre, ans) - answer_likelihood_streaming(mm, th, e, pre, ans)) <= 1e-12);
    }
}

TEST_CASE("clipped surrogate per-token terms") {
    const ModelSpec m = test::small_model();
    const auto theta = init_params(16, m.dims, 0.5);
    const Episode& ep = test::small_data().split(Level::TRAIN)[1];
    auto run = [&](double ratio, double adv) {
        auto group = group_with_ratio(m, theta, ep, 1, ratio);
        std::vector<double> a{adv};
        return surrogate_grad(m, theta, ep, group, a, 0.2, KLSpec{}).objective;
    };
    CHECK(run(1.2, 1.0) == doctest::Approx(1.2).epsilon(1e-12));
    CHECK(run(1.5, 1.0) == doctest::Approx(1.2).epsilon(1e-12));
    CHECK(run(0.5, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(run(0.5, -1.0) == doctest::Approx(-0.8).epsilon(1e-12));
    CHECK(run(1.5, -1.0) == doctest::Approx(-1.5).epsilon(1e-12));
    auto group = group_with_ratio(m, theta, ep, 2, 1.0);
    std::vector<double> wrong{1.0};
    CHECK_THROWS(surrogate_grad(m, theta, ep, group, wrong, 0.2, KLSpec{}));
}

TEST_CASE("on-policy identity") {
    const ModelSpec m = test::small_model();
    const auto theta = init_params(17, m.dims, 0.5);
    for (const auto& ep : test::small_data().split(Level::TRAIN)) {
        auto group = rollout_group(m, theta, ep, 5, 3, 9, 1.0);
        for (const auto& tr : group) {
            auto lp = logprob_of(m, theta, ep, tr.tokens);
            for (std::size_t i = 0; i < lp.size(); ++i) CHECK(std::exp(lp[i] - tr.logprobs[i]) == 1.0);
        }
        std::vector<double> adv{0.3, -1.1, 2.0, 0.0, -0.4};
        auto res = surrogate_grad(m, theta, ep, group, adv, 0.2, KLSpec{});
        CHECK(res.clip_fraction == 0.0);
        CHECK(std::abs(res.objective - 0.16) <= 1e-12);
    }
}

TEST_CASE("surrogate gradient matches central differences on a two-trajectory instance") {
    const ModelSpec m = test::small_model();
    const auto theta = init_params(18, m.dims, 0.3);
    const Episode& ep = test::small_data().split(Level::TRAIN)[4];
    PolicyParams old = theta;
    Rng rng = make_rng(3);
    for (double& v : old.flat()) v += 0.01 * (2.0 * uniform01(rng) - 1.0);
    auto group = rollout_group(m, old, ep, 2, 5, 5, 1.0);
    std::vector<double> adv{1.0, -1.0};
    auto analytic = surrogate_grad(m, theta, ep, group, adv, 0.2, KLSpec{}).gradient;
    PolicyParams probe = theta;
    double worst = 0.0;
    for (std::size_t k = 0; k < probe.size(); k += 7) {
        const double orig = probe.flat()[k];
        probe.flat()[k] = orig + 1e-5;
        const double up = surrogate_grad(m, probe, ep, group, adv, 0.2, KLSpec{}).objective;
        probe.flat()[k] = orig - 1e-5;
        const double down = surrogate_grad(m, probe, ep, group, adv, 0.2, KLSpec{}).objective;
        probe.flat()[k] = orig;
        const double num = (up - down) / 2e-5;
        const double a = analytic.flat()[k];
        worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-6}));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("KL penalty is non-negative") {
    for (double r = 1e-3; r < 50.0; r *= 1.37) CHECK(r - std::log(r) - 1.0 >= 0.0);
    const ModelSpec m = test::small_model();
    const auto theta = init_params(19, m.dims, 0.5);
    for (int i = 0; i < 20; ++i) {
        const Episode& ep = test::small_data().split(Level::TRAIN)[static_cast<std::size_t>(i)];
        const auto ref = init_params(200 + static_cast<std::uint64_t>(i), m.dims, 0.5);
        auto group = rollout_group(m, theta, ep, 4, 1, static_cast<std::uint64_t>(i), 1.0);
        std::vector<double> adv{1.0, 0.0, -1.0, 0.5};
        for (KLMode mode : {KLMode::Full, KLMode::HighAccOnly, KLMode::Separate}) {
            KLSpec kl;
            kl.mode = mode;
            kl.beta = 0.1;
            kl.beta_reason = 0.2;
            kl.beta_answer = 0.05;
            kl.reference = &ref;
            if (mode != KLMode::Full) kl.mask = {true, false, true, true};
            auto res = surrogate_grad(m, theta, ep, group, adv, 0.2, kl);
            CHECK(res.kl >= 0.0);
            CHECK(res.kl_penalty >= 0.0);
            CHECK(res.objective == doctest::Approx(res.surrogate - res.kl_penalty));
        }
        KLSpec none_ref;
        none_ref.mode = KLMode::Full;
        CHECK_THROWS(surrogate_grad(m, theta, ep, group, adv, 0.2, none_ref));
    }
}

TEST_CASE("EMA update") {
    const Dims dims{5, 2, 3};
    PolicyParams phi(dims), theta(dims);
    theta.fill(1.0);
    ema_update(phi, theta, 0.995);
    for (double v : phi.flat()) CHECK(v == doctest::Approx(0.005).epsilon(1e-12));

    PolicyParams same = init_params(1, dims);
    PolicyParams copy = same;
    ema_update(copy, same, 0.995);
    CHECK(copy == same);

    PolicyParams start(dims);
    start.fill(-2.0);
    PolicyParams target(dims);
    target.fill(3.0);
    PolicyParams p = start;
    for (int i = 0; i < 200; ++i) ema_update(p, target, 0.995);
    const double expected = std::pow(0.995, 200) * 5.0;
    for (double v : p.flat()) CHECK(std::abs(std::abs(v - 3.0) - expected) <= 1e-12);

    PolicyParams other(Dims{5, 2, 4});
    CHECK_THROWS(ema_update(p, other, 0.5));
}

TEST_CASE("checkpoint bytes round-trip exactly") {
    Checkpoint c;
    c.dims = Dims{61, 4, 6};
    c.step = 123;
    c.variant = Variant::SEPKL_EMA_HA;
    c.theta = init_params(1, c.dims, 0.3);
    c.phi = init_params(2, c.dims, 0.3);
    const std::string bytes = encode_checkpoint(c);
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(back.step == 123);
    CHECK(back.variant == Variant::SEPKL_EMA_HA);
    CHECK(back.dims == c.dims);
    CHECK(back.theta == c.theta);
    CHECK(back.phi == c.phi);
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(encode_checkpoint(Checkpoint{c.dims, c.step, c.variant, c.theta.relayout({Block::Scalars, Block::Query,
                                       Block::OutputBias, Block::Output, Block::HiddenBias, Block::Hidden,
                                       Block::Embedding}), c.phi}) == bytes);
    CHECK_THROWS(decode_checkpoint(bytes.substr(0, bytes.size() - 1)));
    std::string bad = bytes;
    bad[0] = 'X';
    CHECK_THROWS(decode_checkpoint(bad));
    auto dir = test::scratch_dir("ckpt");
    save_checkpoint(c, dir / "a.ckpt");
    CHECK(test::slurp(dir / "a.ckpt") == bytes);
    CHECK(load_checkpoint(dir / "a.ckpt").theta == c.theta);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_CASE("answer parsing and think conclusion") {
    const Vocabulary& v = test::small_data().vocab;
    const Token x = v.surface(0, 1), y = v.surface(0, 2);
    std::vector<Token> ok{0, x, y, 1, 2, v.letter(2), 3};
    CHECK(parse_answer(ok, v) == 2);
    CHECK(think_conclusion(ok, v) == y);
    std::vector<Token> empty_think{0, 1, 2, v.letter(0), 3};
    CHECK(parse_answer(empty_think, v) == 0);
    CHECK(think_conclusion(empty_think, v) == -1);
    std::vector<Token> no_close{0, x, 1, 2, v.letter(2)};
    CHECK_FALSE(parse_answer(no_close, v).has_value());
}

}  // TEST_SUITE
