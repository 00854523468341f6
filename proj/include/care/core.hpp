#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace care {

using Token = std::int32_t;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Variant {
    GRPO,
    KL_EMA,
    KL_EMA_HA,
    SEPKL_EMA_HA,
    NOKL,
    DENSECONS,
    REFGEN,
    CARE,
    SFT,
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);  // case-insensitive, accepts "sepkl-ema-ha" style too
std::span<const Variant> all_variants();

enum class Level { TRAIN, L1, L2, L3 };

std::string_view to_string(Level level);
Level parse_level(std::string_view name);

/// Where the group-relative consistency baseline takes its mean.
enum class ConsistencyBaseline { Selected, Group };

/// Sizes and pools of the synthetic benchmark.
struct SplitSpec {
    int train_count = 500;
    int l1_count = 200;
    int l2_count = 100;
    int l3_count = 150;
    int train_families = 6;
    int heldout_families = 4;
    int train_styles = 2;
    int heldout_styles = 2;
    int min_family_length = 4;
    int max_family_length = 7;
    int block_size = 8;
    int noise_tokens = 8;
    int max_cues = 3;
    // probability that a cue in a training-environment episode is the noise
    // token whose index equals the answer letter; held-out environments never leak
    double cue_leak = 0.5;

    bool operator==(const SplitSpec&) const = default;
};

/// Every tunable of the lab. Flat so that it maps 1:1 onto the key=value file
/// and onto CLI flags.
struct Config {
    // group-relative optimisation
    int group_size = 8;
    double clip_eps = 0.2;
    double kl_beta = 0.04;
    double kl_beta_reason = -1.0;  // negative: inherit kl_beta
    double kl_beta_answer = -1.0;  // negative: inherit kl_beta

    // consistency-aware reward
    double lambda_cons = 0.5;
    double gamma_acc = 0.1;
    double gamma_p = 0.95;
    double eps_p = 0.01;
    ConsistencyBaseline consistency_baseline = ConsistencyBaseline::Selected;

    // reference model
    double ema_alpha = 0.995;
    int ema_interval = 10;

    // schedule
    int total_steps = 400;
    int batch_size = 4;
    int eval_interval = 50;
    int checkpoint_interval = 0;  // 0: final checkpoint only
    Variant variant = Variant::GRPO;

    // optimiser
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    // decoding
    double temperature = 1.0;
    int max_reason_len = 24;
    int max_answer_len = 1;
    bool constrained_decoding = true;

    // model
    int embed_dim = 32;
    int hidden_dim = 64;
    double init_scale = 0.05;
    double match_prior = 4.0;
    double think_prior = 3.0;
    double close_prior = 5.0;

    // evaluation
    bool strict_consistency = false;

    std::uint64_t seed = 1;
    int workers = 0;  // 0: hardware concurrency

    SplitSpec split;

    bool operator==(const Config&) const = default;

    double beta_reason() const { return kl_beta_reason < 0.0 ? kl_beta : kl_beta_reason; }
    double beta_answer() const { return kl_beta_answer < 0.0 ? kl_beta : kl_beta_answer; }
};

/// Returns cfg unchanged when every range invariant holds, otherwise throws
/// ConfigError naming the offending field.
Config validate_config(const Config& cfg);

/// All configuration keys in file order.
std::span<const std::string_view> config_keys();

/// Assigns one key from its textual value. Throws ConfigError on unknown keys
/// or unparsable values.
void set_config_value(Config& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const Config& cfg, std::string_view key);

/// Flat `key = value` text, one key per line, shortest round-trip doubles.
std::string to_config_text(const Config& cfg);
/// Parses text written by to_config_text (comments with '#', blank lines ok);
/// unspecified keys keep their defaults.
Config parse_config_text(std::string_view text);

Config load_config_file(const std::string& path);
void save_config_file(const Config& cfg, const std::string& path);

// ---------------------------------------------------------------------------
// Vocabulary

/// Dense token layout:
///   specials | letters A-D | noise block | goal tokens | style blocks
class Vocabulary {
public:
    static constexpr Token kThinkOpen = 0;
    static constexpr Token kThinkClose = 1;
    static constexpr Token kAnswerOpen = 2;
    static constexpr Token kAnswerClose = 3;
    static constexpr Token kEnd = 4;
    static constexpr Token kObsOpen = 5;
    static constexpr Token kQuestion = 6;
    static constexpr int kNumSpecials = 7;
    static constexpr int kNumLetters = 4;

    Vocabulary() = default;
    Vocabulary(int num_noise, int num_goals, int num_styles, int block_size);

    static Vocabulary for_spec(const SplitSpec& spec);

    int size() const { return size_; }
    int num_noise() const { return num_noise_; }
    int num_goals() const { return num_goals_; }
    int num_styles() const { return num_styles_; }
    int block_size() const { return block_size_; }

    Token letter(int index) const;
    Token noise(int index) const;
    Token goal(int family) const;
    Token surface(int style, int slot) const;

    bool contains(Token t) const { return t >= 0 && t < size_; }
    bool is_special(Token t) const { return t >= 0 && t < kNumSpecials; }
    bool is_letter(Token t) const { return t >= letter_base() && t < letter_base() + kNumLetters; }
    bool is_surface(Token t) const { return t >= surface_base() && t < size_; }
    /// Tokens that may appear inside a think block: everything but specials and letters.
    bool is_content(Token t) const { return t >= noise_base() && t < size_; }
    /// Letter index 0..3 of a letter token, or -1.
    int letter_index(Token t) const { return is_letter(t) ? t - letter_base() : -1; }
    /// Style owning a surface token, or -1.
    int style_of(Token t) const { return is_surface(t) ? (t - surface_base()) / block_size_ : -1; }

    std::string name(Token t) const;
    std::string render(std::span<const Token> tokens) const;

    bool operator==(const Vocabulary&) const = default;

private:
    Token letter_base() const { return kNumSpecials; }
    Token noise_base() const { return kNumSpecials + kNumLetters; }
    Token goal_base() const { return noise_base() + num_noise_; }
    Token surface_base() const { return goal_base() + num_goals_; }

    int num_noise_ = 0;
    int num_goals_ = 0;
    int num_styles_ = 0;
    int block_size_ = 0;
    int size_ = kNumSpecials + kNumLetters;
};

// ---------------------------------------------------------------------------
// Episodes and trajectories

inline constexpr int kNumCandidates = 4;

struct Episode {
    std::string id;
    Level level = Level::TRAIN;
    int family = 0;
    int style = 0;
    int progress = 0;
    /// Goal token, completed steps in surface form, then distractor cues.
    std::vector<Token> observation;
    /// Surface action of candidate A, B, C, D.
    std::array<Token, kNumCandidates> candidates{};
    int answer = 0;  // letter index of the ground truth
    Token answer_action = 0;

    bool operator==(const Episode&) const = default;
};

/// Candidate order is the letter order; throws std::invalid_argument on broken invariants.
void check_episode(const Episode& ep, const Vocabulary& vocab);

/// Full prompt as the policy sees it: OBS observation... QUESTION A c_A B c_B ...
std::vector<Token> prompt_tokens(const Episode& ep, const Vocabulary& vocab);

/// One sampled response o = reasoning ++ answer.
struct Trajectory {
    std::vector<Token> tokens;
    /// log pi_old(token_i | prefix) recorded at sampling time.
    std::vector<double> logprobs;
    /// Number of leading tokens that belong to the reasoning part
    /// (through the first THINK_CLOSE, or everything when there is none).
    std::size_t reasoning_len = 0;
    /// Extracted letter index, empty on parse failure.
    std::optional<int> parsed;

    std::span<const Token> reasoning() const { return {tokens.data(), reasoning_len}; }
    std::span<const Token> answer() const {
        return {tokens.data() + reasoning_len, tokens.size() - reasoning_len};
    }
    std::size_t size() const { return tokens.size(); }

    bool operator==(const Trajectory&) const = default;
};

/// Position just past the first THINK_CLOSE (or tokens.size()).
std::size_t reasoning_split(std::span<const Token> tokens);

struct RewardBreakdown {
    double r_acc = 0.0;
    double r_fmt = 0.0;
    double consistency_bonus = 0.0;
    double total = 0.0;
    double advantage = 0.0;
};

// ---------------------------------------------------------------------------
// Randomness

/// Deterministic stream derivation: every stochastic operation receives an
/// engine seeded from (root, a, b, c) through splitmix64 mixing.
using Rng = std::mt19937_64;

std::uint64_t mix_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);
Rng make_rng(std::uint64_t root, std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0);

/// Uniform double in [0,1) from 53 random bits.
double uniform01(Rng& rng);

/// Stream tags for mix_seed so that independent purposes never collide.
enum class Stream : std::uint64_t {
    Batch = 1,
    Rollout = 2,
    RefGen = 3,
    Eval = 4,
    TaskGen = 5,
    Init = 6,
};

}  // namespace care
