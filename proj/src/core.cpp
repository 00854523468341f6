#include "care/core.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

namespace care {

namespace {

constexpr std::array<std::string_view, 9> kVariantNames = {
    "GRPO", "KL_EMA", "KL_EMA_HA", "SEPKL_EMA_HA", "NOKL", "DENSECONS", "REFGEN", "CARE", "SFT"};

constexpr std::array<Variant, 9> kVariants = {
    Variant::GRPO,      Variant::KL_EMA, Variant::KL_EMA_HA, Variant::SEPKL_EMA_HA, Variant::NOKL,
    Variant::DENSECONS, Variant::REFGEN, Variant::CARE,      Variant::SFT};

std::string normalize_name(std::string_view name) {
    std::string out;
    out.reserve(name.size());
    for (char c : name) {
        if (c == '-') c = '_';
        out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return out;
}

std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string format_double(double v) {
    std::array<char, 64> buf{};
    auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
    T value{};
    auto s = trim(text);
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || ptr != s.data() + s.size()) {
        throw ConfigError("cannot parse value '" + s + "' for " + std::string(key));
    }
    return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
    auto s = normalize_name(trim(text));
    if (s == "1" || s == "TRUE" || s == "YES" || s == "ON") return true;
    if (s == "0" || s == "FALSE" || s == "NO" || s == "OFF") return false;
    throw ConfigError("cannot parse boolean '" + std::string(text) + "' for " + std::string(key));
}

struct Field {
    std::string_view key;
    std::function<std::string(const Config&)> get;
    std::function<void(Config&, std::string_view)> set;
};

#define CARE_INT_FIELD(name, member)                                                            \
    Field {                                                                                     \
        name, [](const Config& c) { return std::to_string(c.member); },                        \
            [](Config& c, std::string_view v) { c.member = parse_number<int>(name, v); }        \
    }
#define CARE_DOUBLE_FIELD(name, member)                                                         \
    Field {                                                                                     \
        name, [](const Config& c) { return format_double(c.member); },                        \
            [](Config& c, std::string_view v) { c.member = parse_number<double>(name, v); }     \
    }
#define CARE_BOOL_FIELD(name, member)                                                           \
    Field {                                                                                     \
        name, [](const Config& c) { return std::string(c.member ? "true" : "false"); },       \
            [](Config& c, std::string_view v) { c.member = parse_bool(name, v); }               \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        CARE_INT_FIELD("group_size", group_size),
        CARE_DOUBLE_FIELD("clip_eps", clip_eps),
        CARE_DOUBLE_FIELD("kl_beta", kl_beta),
        CARE_DOUBLE_FIELD("kl_beta_reason", kl_beta_reason),
        CARE_DOUBLE_FIELD("kl_beta_answer", kl_beta_answer),
        CARE_DOUBLE_FIELD("lambda_cons", lambda_cons),
        CARE_DOUBLE_FIELD("gamma_acc", gamma_acc),
        CARE_DOUBLE_FIELD("gamma_p", gamma_p),
        CARE_DOUBLE_FIELD("eps_p", eps_p),
        Field{"consistency_baseline",
              [](const Config& c) {
                  return std::string(c.consistency_baseline == ConsistencyBaseline::Selected ? "selected"
                                                                                             : "group");
              },
              [](Config& c, std::string_view v) {
                  auto s = normalize_name(trim(v));
                  if (s == "SELECTED") {
                      c.consistency_baseline = ConsistencyBaseline::Selected;
                  } else if (s == "GROUP") {
                      c.consistency_baseline = ConsistencyBaseline::Group;
                  } else {
                      throw ConfigError("consistency_baseline must be 'selected' or 'group'");
                  }
              }},
        CARE_DOUBLE_FIELD("ema_alpha", ema_alpha),
        CARE_INT_FIELD("ema_interval", ema_interval),
        CARE_INT_FIELD("total_steps", total_steps),
        CARE_INT_FIELD("batch_size", batch_size),
        CARE_INT_FIELD("eval_interval", eval_interval),
        CARE_INT_FIELD("checkpoint_interval", checkpoint_interval),
        Field{"variant", [](const Config& c) { return std::string(to_string(c.variant)); },
              [](Config& c, std::string_view v) {
                  try {
                      c.variant = parse_variant(trim(v));
                  } catch (const std::invalid_argument& e) {
                      throw ConfigError(e.what());
                  }
              }},
        CARE_DOUBLE_FIELD("learning_rate", learning_rate),
        CARE_DOUBLE_FIELD("adam_beta1", adam_beta1),
        CARE_DOUBLE_FIELD("adam_beta2", adam_beta2),
        CARE_DOUBLE_FIELD("adam_eps", adam_eps),
        CARE_DOUBLE_FIELD("temperature", temperature),
        CARE_INT_FIELD("max_reason_len", max_reason_len),
        CARE_INT_FIELD("max_answer_len", max_answer_len),
        CARE_BOOL_FIELD("constrained_decoding", constrained_decoding),
        CARE_INT_FIELD("embed_dim", embed_dim),
        CARE_INT_FIELD("hidden_dim", hidden_dim),
        CARE_DOUBLE_FIELD("init_scale", init_scale),
        CARE_DOUBLE_FIELD("match_prior", match_prior),
        CARE_DOUBLE_FIELD("think_prior", think_prior),
        CARE_DOUBLE_FIELD("close_prior", close_prior),
        CARE_BOOL_FIELD("strict_consistency", strict_consistency),
        Field{"seed", [](const Config& c) { return std::to_string(c.seed); },
              [](Config& c, std::string_view v) { c.seed = parse_number<std::uint64_t>("seed", v); }},
        CARE_INT_FIELD("workers", workers),
        CARE_INT_FIELD("train_count", split.train_count),
        CARE_INT_FIELD("l1_count", split.l1_count),
        CARE_INT_FIELD("l2_count", split.l2_count),
        CARE_INT_FIELD("l3_count", split.l3_count),
        CARE_INT_FIELD("train_families", split.train_families),
        CARE_INT_FIELD("heldout_families", split.heldout_families),
        CARE_INT_FIELD("train_styles", split.train_styles),
        CARE_INT_FIELD("heldout_styles", split.heldout_styles),
        CARE_INT_FIELD("min_family_length", split.min_family_length),
        CARE_INT_FIELD("max_family_length", split.max_family_length),
        CARE_INT_FIELD("block_size", split.block_size),
        CARE_INT_FIELD("noise_tokens", split.noise_tokens),
        CARE_INT_FIELD("max_cues", split.max_cues),
        CARE_DOUBLE_FIELD("cue_leak", split.cue_leak),
    };
    return table;
}

#undef CARE_INT_FIELD
#undef CARE_DOUBLE_FIELD
#undef CARE_BOOL_FIELD

const Field& find_field(std::string_view key) {
    std::string k(key);
    std::replace(k.begin(), k.end(), '-', '_');
    for (const auto& f : fields()) {
        if (f.key == k) return f;
    }
    throw ConfigError("unknown configuration key '" + std::string(key) + "'");
}

void require(bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
}

}  // namespace

std::string_view to_string(Variant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

Variant parse_variant(std::string_view name) {
    auto n = normalize_name(name);
    for (std::size_t i = 0; i < kVariantNames.size(); ++i) {
        if (kVariantNames[i] == n) return kVariants[i];
    }
    throw ConfigError("unknown variant '" + std::string(name) + "'");
}

std::span<const Variant> all_variants() { return kVariants; }

std::string_view to_string(Level level) {
    switch (level) {
        case Level::TRAIN: return "TRAIN";
        case Level::L1: return "L1";
        case Level::L2: return "L2";
        case Level::L3: return "L3";
    }
    return "?";
}

Level parse_level(std::string_view name) {
    auto n = normalize_name(name);
    if (n == "TRAIN") return Level::TRAIN;
    if (n == "L1") return Level::L1;
    if (n == "L2") return Level::L2;
    if (n == "L3") return Level::L3;
    throw ConfigError("unknown level '" + std::string(name) + "'");
}

Config validate_config(const Config& cfg) {
    require(cfg.group_size >= 2, "group_size < 2");
    require(cfg.clip_eps > 0.0 && cfg.clip_eps < 1.0, "clip_eps out of (0,1)");
    require(cfg.kl_beta >= 0.0, "kl_beta < 0");
    require(cfg.lambda_cons >= 0.0, "lambda_cons < 0");
    require(cfg.gamma_acc >= 0.0 && cfg.gamma_acc <= 1.0, "gamma_acc out of [0,1]");
    require(cfg.gamma_p > 0.0 && cfg.gamma_p <= 1.0, "gamma_p out of (0,1]");
    require(cfg.eps_p >= 0.0, "eps_p < 0");
    require(cfg.ema_alpha > 0.0 && cfg.ema_alpha < 1.0, "ema_alpha out of (0,1)");
    require(cfg.ema_interval >= 1, "ema_interval < 1");
    require(cfg.total_steps >= 1, "total_steps < 1");
    require(cfg.batch_size >= 1, "batch_size < 1");
    require(cfg.eval_interval >= 1, "eval_interval < 1");
    require(cfg.checkpoint_interval >= 0, "checkpoint_interval < 0");
    require(cfg.learning_rate > 0.0, "learning_rate <= 0");
    require(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0, "adam_beta1 out of [0,1)");
    require(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0, "adam_beta2 out of [0,1)");
    require(cfg.adam_eps > 0.0, "adam_eps <= 0");
    require(cfg.temperature >= 0.0, "temperature < 0");
    require(cfg.max_reason_len >= 1, "max_reason_len < 1");
    require(cfg.max_answer_len >= 1, "max_answer_len < 1");
    require(cfg.embed_dim >= 1, "embed_dim < 1");
    require(cfg.hidden_dim >= 1, "hidden_dim < 1");
    require(cfg.init_scale >= 0.0, "init_scale < 0");
    require(cfg.workers >= 0, "workers < 0");
    const auto& s = cfg.split;
    require(s.train_count >= 1 && s.l1_count >= 0 && s.l2_count >= 0 && s.l3_count >= 0,
            "split counts must be non-negative (train_count >= 1)");
    require(s.train_families >= 1, "train_families < 1");
    require(s.heldout_families >= 1, "heldout_families < 1");
    require(s.train_styles >= 1, "train_styles < 1");
    require(s.heldout_styles >= 1, "heldout_styles < 1");
    require(s.min_family_length >= kNumCandidates, "min_family_length < 4");
    require(s.max_family_length >= s.min_family_length, "max_family_length < min_family_length");
    require(s.block_size >= s.max_family_length, "block_size < max_family_length");
    require(s.noise_tokens >= 0, "noise_tokens < 0");
    require(s.max_cues >= 0, "max_cues < 0");
    require(s.max_cues == 0 || s.noise_tokens > 0, "max_cues > 0 needs noise_tokens > 0");
    require(s.cue_leak >= 0.0 && s.cue_leak <= 1.0, "cue_leak outside [0, 1]");
    require(s.cue_leak == 0.0 || s.noise_tokens >= kNumCandidates, "cue_leak > 0 needs noise_tokens >= 4");
    return cfg;
}

std::span<const std::string_view> config_keys() {
    static const std::vector<std::string_view> keys = [] {
        std::vector<std::string_view> out;
        for (const auto& f : fields()) out.push_back(f.key);
        return out;
    }();
    return keys;
}

void set_config_value(Config& cfg, std::string_view key, std::string_view value) {
    find_field(key).set(cfg, value);
}

std::string get_config_value(const Config& cfg, std::string_view key) { return find_field(key).get(cfg); }

std::string to_config_text(const Config& cfg) {
    std::string out;
    for (const auto& f : fields()) {
        out += f.key;
        out += " = ";
        out += f.get(cfg);
        out += '\n';
    }
    return out;
}

Config parse_config_text(std::string_view text) {
    Config cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        auto t = trim(line);
        if (t.empty()) continue;
        auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        }
        set_config_value(cfg, trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    }
    return cfg;
}

Config load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

void save_config_file(const Config& cfg, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write config file " + path);
    out << to_config_text(cfg);
    if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(int num_noise, int num_goals, int num_styles, int block_size)
    : num_noise_(num_noise), num_goals_(num_goals), num_styles_(num_styles), block_size_(block_size) {
    if (num_noise < 0 || num_goals < 0 || num_styles < 0 || block_size < 0) {
        throw std::invalid_argument("vocabulary block sizes must be non-negative");
    }
    size_ = kNumSpecials + kNumLetters + num_noise + num_goals + num_styles * block_size;
}

Vocabulary Vocabulary::for_spec(const SplitSpec& spec) {
    return Vocabulary(spec.noise_tokens, spec.train_families + spec.heldout_families,
                      spec.train_styles + spec.heldout_styles, spec.block_size);
}

Token Vocabulary::letter(int index) const {
    if (index < 0 || index >= kNumLetters) throw std::out_of_range("letter index");
    return letter_base() + index;
}

Token Vocabulary::noise(int index) const {
    if (index < 0 || index >= num_noise_) throw std::out_of_range("noise index");
    return noise_base() + index;
}

Token Vocabulary::goal(int family) const {
    if (family < 0 || family >= num_goals_) throw std::out_of_range("goal index");
    return goal_base() + family;
}

Token Vocabulary::surface(int style, int slot) const {
    if (style < 0 || style >= num_styles_ || slot < 0 || slot >= block_size_) {
        throw std::out_of_range("surface token index");
    }
    return surface_base() + style * block_size_ + slot;
}

std::string Vocabulary::name(Token t) const {
    static constexpr std::array<std::string_view, kNumSpecials> specials = {
        "<think>", "</think>", "<answer>", "</answer>", "<end>", "<obs>", "<question>"};
    if (!contains(t)) return "<unk:" + std::to_string(t) + ">";
    if (is_special(t)) return std::string(specials[static_cast<std::size_t>(t)]);
    if (is_letter(t)) return std::string(1, static_cast<char>('A' + letter_index(t)));
    if (t < goal_base()) return "noise" + std::to_string(t - noise_base());
    if (t < surface_base()) return "goal" + std::to_string(t - goal_base());
    int rel = t - surface_base();
    return "s" + std::to_string(rel / block_size_) + "a" + std::to_string(rel % block_size_);
}

std::string Vocabulary::render(std::span<const Token> tokens) const {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += name(tokens[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------

void check_episode(const Episode& ep, const Vocabulary& vocab) {
    if (ep.answer < 0 || ep.answer >= kNumCandidates) throw std::invalid_argument("answer letter out of range");
    for (std::size_t i = 0; i < ep.candidates.size(); ++i) {
        if (!vocab.is_surface(ep.candidates[i])) throw std::invalid_argument("candidate is not a surface token");
        for (std::size_t j = 0; j < i; ++j) {
            if (ep.candidates[i] == ep.candidates[j]) throw std::invalid_argument("duplicate candidate actions");
        }
    }
    if (ep.candidates[static_cast<std::size_t>(ep.answer)] != ep.answer_action) {
        throw std::invalid_argument("ground-truth letter does not point at the ground-truth action");
    }
    for (Token t : ep.observation) {
        if (!vocab.contains(t)) throw std::invalid_argument("observation token out of range");
    }
}

std::vector<Token> prompt_tokens(const Episode& ep, const Vocabulary& vocab) {
    std::vector<Token> out;
    out.reserve(ep.observation.size() + 2 + 2 * kNumCandidates);
    out.push_back(Vocabulary::kObsOpen);
    out.insert(out.end(), ep.observation.begin(), ep.observation.end());
    out.push_back(Vocabulary::kQuestion);
    for (int i = 0; i < kNumCandidates; ++i) {
        out.push_back(vocab.letter(i));
        out.push_back(ep.candidates[static_cast<std::size_t>(i)]);
    }
    return out;
}

std::size_t reasoning_split(std::span<const Token> tokens) {
    auto it = std::find(tokens.begin(), tokens.end(), Vocabulary::kThinkClose);
    if (it == tokens.end()) return tokens.size();
    return static_cast<std::size_t>(it - tokens.begin()) + 1;
}

// ---------------------------------------------------------------------------

std::uint64_t mix_seed(std::uint64_t root, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    auto splitmix = [](std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    };
    std::uint64_t h = splitmix(root);
    h = splitmix(h ^ a);
    h = splitmix(h ^ b);
    h = splitmix(h ^ c);
    return h;
}

Rng make_rng(std::uint64_t root, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return Rng(mix_seed(root, a, b, c));
}

double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace care
