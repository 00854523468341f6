#include <doctest.h>

#include <set>

#include "care/core.hpp"
#include "support.hpp"

using namespace care;

namespace {

std::string config_error(Config c) {
    try {
        validate_config(c);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_SUITE("core") {

TEST_CASE("defaults validate and carry the reward constants") {
    Config c;
    CHECK(validate_config(c) == c);
    CHECK(c.group_size == 8);
    CHECK(c.clip_eps == 0.2);
    CHECK(c.kl_beta == 0.04);
    CHECK(c.lambda_cons == 0.5);
    CHECK(c.gamma_acc == 0.1);
    CHECK(c.gamma_p == 0.95);
    CHECK(c.eps_p == 0.01);
    CHECK(c.ema_alpha == 0.995);
    CHECK(c.ema_interval == 10);
}

TEST_CASE("range violations name the field") {
    Config c;
    c.ema_alpha = 1.0;
    CHECK(config_error(c) == "ema_alpha out of (0,1)");
    c = Config{};
    c.group_size = 1;
    CHECK(config_error(c) == "group_size < 2");
    c = Config{};
    c.gamma_p = 0.0;
    CHECK(config_error(c) == "gamma_p out of (0,1]");
    c = Config{};
    c.gamma_acc = 1.5;
    CHECK(config_error(c) == "gamma_acc out of [0,1]");
    c = Config{};
    c.eps_p = -0.1;
    CHECK(config_error(c) == "eps_p < 0");
    c = Config{};
    c.split.cue_leak = 2.0;
    CHECK(config_error(c) == "cue_leak outside [0, 1]");
}

TEST_CASE("config text round-trips bit-exactly for random configs") {
    Rng rng = make_rng(99);
    for (int i = 0; i < 200; ++i) {
        Config c;
        c.clip_eps = 0.01 + 0.9 * uniform01(rng);
        c.kl_beta = uniform01(rng) / 3.0;
        c.lambda_cons = uniform01(rng) * 7.0;
        c.gamma_p = 0.1 + 0.9 * uniform01(rng);
        c.eps_p = uniform01(rng) * 1e-3;
        c.ema_alpha = 0.5 + 0.49 * uniform01(rng);
        c.learning_rate = std::ldexp(uniform01(rng), -9);
        c.group_size = 2 + static_cast<int>(uniform01(rng) * 10);
        c.variant = all_variants()[static_cast<std::size_t>(i) % all_variants().size()];
        c.consistency_baseline = i % 2 ? ConsistencyBaseline::Group : ConsistencyBaseline::Selected;
        c.constrained_decoding = i % 3 != 0;
        c.seed = rng();
        c.split.cue_leak = uniform01(rng);
        CHECK(parse_config_text(to_config_text(c)) == c);
    }
}

TEST_CASE("config file parsing") {
    auto c = parse_config_text("# comment\n\nkl_beta = 0.1\nvariant = sepkl-ema-ha\n");
    CHECK(c.kl_beta == 0.1);
    CHECK(c.variant == Variant::SEPKL_EMA_HA);
    CHECK(c.group_size == 8);
    CHECK_THROWS_AS(parse_config_text("no_such_key = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("group_size = eight\n"), ConfigError);
}

TEST_CASE("every key reads back what was set") {
    Config c;
    for (auto key : config_keys()) {
        const std::string v = get_config_value(c, key);
        Config d;
        set_config_value(d, key, v);
        CHECK(get_config_value(d, key) == v);
    }
}

TEST_CASE("separate KL coefficients inherit kl_beta") {
    Config c;
    CHECK(c.beta_reason() == c.kl_beta);
    CHECK(c.beta_answer() == c.kl_beta);
    c.kl_beta_reason = 0.3;
    CHECK(c.beta_reason() == 0.3);
    CHECK(c.beta_answer() == c.kl_beta);
}

TEST_CASE("variant and level names") {
    for (Variant v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
    CHECK(parse_variant("kl-ema") == Variant::KL_EMA);
    CHECK(parse_variant("care") == Variant::CARE);
    CHECK_THROWS(parse_variant("ppo"));
    CHECK(parse_level("l3") == Level::L3);
}

TEST_CASE("vocabulary indexing is a bijection over [0, V)") {
    const Vocabulary v = Vocabulary::for_spec(SplitSpec{});
    std::set<std::string> names;
    for (Token t = 0; t < v.size(); ++t) names.insert(v.name(t));
    CHECK(static_cast<int>(names.size()) == v.size());
    CHECK(v.name(Vocabulary::kThinkOpen) == "<think>");
    CHECK(v.name(Vocabulary::kAnswerClose) == "</answer>");
    std::set<Token> seen;
    for (int i = 0; i < Vocabulary::kNumLetters; ++i) seen.insert(v.letter(i));
    for (int i = 0; i < v.num_noise(); ++i) seen.insert(v.noise(i));
    for (int i = 0; i < v.num_goals(); ++i) seen.insert(v.goal(i));
    for (int s = 0; s < v.num_styles(); ++s) {
        for (int k = 0; k < v.block_size(); ++k) {
            seen.insert(v.surface(s, k));
            CHECK(v.style_of(v.surface(s, k)) == s);
        }
    }
    CHECK(static_cast<int>(seen.size()) + Vocabulary::kNumSpecials == v.size());
    for (int i = 0; i < Vocabulary::kNumLetters; ++i) CHECK(v.letter_index(v.letter(i)) == i);
}

TEST_CASE("seeded streams are deterministic and separated") {
    CHECK(mix_seed(1, 2, 3) == mix_seed(1, 2, 3));
    CHECK(mix_seed(1, 2, 3) != mix_seed(1, 3, 2));
    CHECK(mix_seed(1, 2) != mix_seed(2, 2));
    Rng a = make_rng(5, 1), b = make_rng(5, 1), c = make_rng(5, 2);
    CHECK(a() == b());
    CHECK(make_rng(5, 1)() != c());
    Rng r = make_rng(3);
    for (int i = 0; i < 1000; ++i) {
        double u = uniform01(r);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("reasoning split") {
    std::vector<Token> t{0, 20, 1, 2, 7, 3};
    CHECK(reasoning_split(t) == 3);
    std::vector<Token> none{0, 20, 21};
    CHECK(reasoning_split(none) == 3);
}

}  // TEST_SUITE
