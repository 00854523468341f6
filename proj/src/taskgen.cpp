#include "care/taskgen.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

namespace care {

using nlohmann::json;

namespace {

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

constexpr std::array<Level, 4> kLevels = {Level::TRAIN, Level::L1, Level::L2, Level::L3};

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + p.string());
}

json spec_to_json(const SplitSpec& s) {
    return json{{"train_count", s.train_count},
                {"l1_count", s.l1_count},
                {"l2_count", s.l2_count},
                {"l3_count", s.l3_count},
                {"train_families", s.train_families},
                {"heldout_families", s.heldout_families},
                {"train_styles", s.train_styles},
                {"heldout_styles", s.heldout_styles},
                {"min_family_length", s.min_family_length},
                {"max_family_length", s.max_family_length},
                {"block_size", s.block_size},
                {"noise_tokens", s.noise_tokens},
                {"max_cues", s.max_cues},
                {"cue_leak", s.cue_leak}};
}

SplitSpec spec_from_json(const json& j) {
    SplitSpec s;
    s.train_count = j.at("train_count");
    s.l1_count = j.at("l1_count");
    s.l2_count = j.at("l2_count");
    s.l3_count = j.at("l3_count");
    s.train_families = j.at("train_families");
    s.heldout_families = j.at("heldout_families");
    s.train_styles = j.at("train_styles");
    s.heldout_styles = j.at("heldout_styles");
    s.min_family_length = j.at("min_family_length");
    s.max_family_length = j.at("max_family_length");
    s.block_size = j.at("block_size");
    s.noise_tokens = j.at("noise_tokens");
    s.max_cues = j.at("max_cues");
    s.cue_leak = j.at("cue_leak");
    return s;
}

int split_count(const SplitSpec& s, Level level) {
    switch (level) {
        case Level::TRAIN: return s.train_count;
        case Level::L1: return s.l1_count;
        case Level::L2: return s.l2_count;
        case Level::L3: return s.l3_count;
    }
    return 0;
}

}  // namespace

std::vector<TaskFamily> generate_task_families(std::uint64_t seed, int count, std::pair<int, int> length_range,
                                               int step_pool) {
    auto [lo, hi] = length_range;
    if (count < 1) throw std::invalid_argument("family count must be >= 1");
    if (lo > hi || lo < 1) throw std::invalid_argument("family length range is empty");
    if (hi > step_pool) throw std::invalid_argument("family length exceeds the abstract step pool");

    Rng rng = make_rng(seed, static_cast<std::uint64_t>(Stream::TaskGen), 100);
    std::vector<int> pool(static_cast<std::size_t>(step_pool));
    std::iota(pool.begin(), pool.end(), 0);

    std::vector<TaskFamily> out;
    std::set<std::vector<int>> seen;
    int attempts = 0;
    while (static_cast<int>(out.size()) < count) {
        if (++attempts > 1000 * count) throw std::invalid_argument("cannot draw enough distinct task families");
        int len = uniform_int(rng, lo, hi);
        std::shuffle(pool.begin(), pool.end(), rng);
        std::vector<int> steps(pool.begin(), pool.begin() + len);
        if (!seen.insert(steps).second) continue;
        out.push_back(TaskFamily{static_cast<int>(out.size()), std::move(steps)});
    }
    return out;
}

std::vector<StyleMap> generate_styles(std::uint64_t seed, int count, int block_size, int max_family_length,
                                      const Vocabulary& vocab) {
    if (count < 1) throw std::invalid_argument("style count must be >= 1");
    if (block_size < max_family_length) throw std::invalid_argument("block_size smaller than family length");
    if (block_size != vocab.block_size()) throw std::invalid_argument("block_size does not match the vocabulary");
    if (count > vocab.num_styles()) throw std::invalid_argument("surface vocabulary exhausted");

    Rng rng = make_rng(seed, static_cast<std::uint64_t>(Stream::TaskGen), 101);
    std::vector<StyleMap> out;
    for (int s = 0; s < count; ++s) {
        std::vector<Token> slots(static_cast<std::size_t>(block_size));
        for (int i = 0; i < block_size; ++i) slots[static_cast<std::size_t>(i)] = vocab.surface(s, i);
        std::shuffle(slots.begin(), slots.end(), rng);
        out.push_back(StyleMap{s, std::move(slots)});
    }
    return out;
}

Episode render_episode(const TaskFamily& family, const StyleMap& style, int progress, Rng& rng,
                       const Vocabulary& vocab, const RenderOptions& opts) {
    const int n = static_cast<int>(family.steps.size());
    if (n < kNumCandidates) throw std::invalid_argument("family too short for 4 candidates");
    if (progress < 0 || progress >= n - 1) throw std::invalid_argument("progress out of range");

    Episode ep;
    ep.family = family.id;
    ep.style = style.id;
    ep.progress = progress;
    ep.observation.push_back(vocab.goal(family.id));
    for (int i = 0; i < progress; ++i) ep.observation.push_back(style(family.steps[static_cast<std::size_t>(i)]));

    std::vector<int> others;
    for (int i = 0; i < n; ++i) {
        if (i != progress) others.push_back(i);
    }
    std::shuffle(others.begin(), others.end(), rng);
    std::array<Token, kNumCandidates> cands{};
    cands[0] = style(family.steps[static_cast<std::size_t>(progress)]);
    for (int k = 1; k < kNumCandidates; ++k) {
        cands[static_cast<std::size_t>(k)] = style(family.steps[static_cast<std::size_t>(others[static_cast<std::size_t>(k - 1)])]);
    }
    ep.answer_action = cands[0];
    std::shuffle(cands.begin(), cands.end(), rng);
    ep.candidates = cands;
    ep.answer = static_cast<int>(std::find(cands.begin(), cands.end(), ep.answer_action) - cands.begin());

    if (opts.max_cues > 0 && opts.noise_tokens > 0) {
        const int cues = uniform_int(rng, 0, opts.max_cues);
        for (int c = 0; c < cues; ++c) {
            const bool leak = opts.cue_leak > 0.0 && uniform01(rng) < opts.cue_leak;
            ep.observation.push_back(vocab.noise(leak ? ep.answer : uniform_int(rng, 0, opts.noise_tokens - 1)));
        }
    }
    return ep;
}

Dataset build_splits(const SplitSpec& spec, std::uint64_t seed) {
    Config probe;
    probe.split = spec;
    validate_config(probe);

    Dataset data;
    data.spec = spec;
    data.seed = seed;
    data.vocab = Vocabulary::for_spec(spec);
    data.families = generate_task_families(seed, spec.train_families + spec.heldout_families,
                                           {spec.min_family_length, spec.max_family_length}, spec.block_size);
    data.styles = generate_styles(seed, spec.train_styles + spec.heldout_styles, spec.block_size,
                                  spec.max_family_length, data.vocab);

    for (Level level : kLevels) {
        const bool novel_family = level == Level::L3;
        const bool novel_style = level == Level::L2 || level == Level::L3;
        const int fam_lo = novel_family ? spec.train_families : 0;
        const int fam_hi = novel_family ? spec.train_families + spec.heldout_families : spec.train_families;
        const int sty_lo = novel_style ? spec.train_styles : 0;
        const int sty_hi = novel_style ? spec.train_styles + spec.heldout_styles : spec.train_styles;
        // cues leak only in environments seen during training
        const RenderOptions opts{spec.max_cues, spec.noise_tokens, novel_style ? 0.0 : spec.cue_leak};

        Rng rng = make_rng(seed, static_cast<std::uint64_t>(Stream::TaskGen), static_cast<std::uint64_t>(level));
        auto& episodes = data.split(level);
        const int count = split_count(spec, level);
        episodes.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            const auto& fam = data.families[static_cast<std::size_t>(uniform_int(rng, fam_lo, fam_hi - 1))];
            const auto& sty = data.styles[static_cast<std::size_t>(uniform_int(rng, sty_lo, sty_hi - 1))];
            int m = uniform_int(rng, 0, static_cast<int>(fam.steps.size()) - 2);
            Episode ep = render_episode(fam, sty, m, rng, data.vocab, opts);
            ep.level = level;
            std::ostringstream id;
            id << to_string(level) << '-' << std::setw(5) << std::setfill('0') << i;
            ep.id = id.str();
            episodes.push_back(std::move(ep));
        }
    }
    return data;
}

Trajectory oracle_trace(const Episode& ep, const Vocabulary& vocab) {
    Trajectory t;
    t.tokens.push_back(Vocabulary::kThinkOpen);
    // observation = goal, progress steps, cues
    for (int i = 0; i < ep.progress; ++i) t.tokens.push_back(ep.observation.at(static_cast<std::size_t>(1 + i)));
    t.tokens.push_back(ep.answer_action);
    t.tokens.push_back(Vocabulary::kThinkClose);
    t.reasoning_len = t.tokens.size();
    t.tokens.push_back(Vocabulary::kAnswerOpen);
    t.tokens.push_back(vocab.letter(ep.answer));
    t.tokens.push_back(Vocabulary::kAnswerClose);
    t.logprobs.assign(t.tokens.size(), 0.0);
    t.parsed = ep.answer;
    return t;
}

// ---------------------------------------------------------------------------

std::string episode_to_json(const Episode& ep, const Vocabulary& vocab) {
    json cands = json::array();
    for (int i = 0; i < kNumCandidates; ++i) {
        cands.push_back({{"letter", std::string(1, static_cast<char>('A' + i))},
                         {"token", ep.candidates[static_cast<std::size_t>(i)]}});
    }
    json j{{"episode_id", ep.id},
           {"level", std::string(to_string(ep.level))},
           {"task_family_id", ep.family},
           {"style_id", ep.style},
           {"progress", ep.progress},
           {"observation", ep.observation},
           {"question", Vocabulary::kQuestion},
           {"candidates", cands},
           {"ground_truth", std::string(1, static_cast<char>('A' + ep.answer))},
           {"ground_truth_action", ep.answer_action}};
    (void)vocab;
    return j.dump();
}

Episode episode_from_json(const std::string& line, const Vocabulary& vocab) {
    json j = json::parse(line);
    Episode ep;
    ep.id = j.at("episode_id").get<std::string>();
    ep.level = parse_level(j.at("level").get<std::string>());
    ep.family = j.at("task_family_id");
    ep.style = j.at("style_id");
    ep.progress = j.at("progress");
    ep.observation = j.at("observation").get<std::vector<Token>>();
    const auto& cands = j.at("candidates");
    if (cands.size() != kNumCandidates) throw std::invalid_argument("episode must have 4 candidates");
    for (std::size_t i = 0; i < kNumCandidates; ++i) ep.candidates[i] = cands[i].at("token");
    auto gt = j.at("ground_truth").get<std::string>();
    if (gt.size() != 1) throw std::invalid_argument("bad ground_truth letter");
    ep.answer = gt[0] - 'A';
    ep.answer_action = j.at("ground_truth_action");
    check_episode(ep, vocab);
    return ep;
}

std::string split_file_name(Level level) {
    switch (level) {
        case Level::TRAIN: return "train.jsonl";
        case Level::L1: return "l1.jsonl";
        case Level::L2: return "l2.jsonl";
        case Level::L3: return "l3.jsonl";
    }
    return "unknown.jsonl";
}

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

std::filesystem::path write_dataset(const Dataset& data, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    json files = json::object();
    for (Level level : kLevels) {
        std::string bytes;
        for (const auto& ep : data.split(level)) {
            bytes += episode_to_json(ep, data.vocab);
            bytes += '\n';
        }
        auto name = split_file_name(level);
        write_file(dir / name, bytes);
        files[std::string(to_string(level))] = {
            {"file", name}, {"episodes", data.split(level).size()}, {"sha256", sha256_hex(bytes)}};
    }

    json families = json::array();
    for (const auto& f : data.families) families.push_back(f.steps);
    json styles = json::array();
    for (const auto& s : data.styles) styles.push_back(s.surface);

    json manifest{{"format", "care-rl-dataset"},
                  {"version", 1},
                  {"seed", data.seed},
                  {"spec", spec_to_json(data.spec)},
                  {"vocab",
                   {{"size", data.vocab.size()},
                    {"noise", data.vocab.num_noise()},
                    {"goals", data.vocab.num_goals()},
                    {"styles", data.vocab.num_styles()},
                    {"block_size", data.vocab.block_size()}}},
                  {"families", families},
                  {"styles", styles},
                  {"splits", files}};
    auto path = dir / "manifest.json";
    write_file(path, manifest.dump(2) + "\n");
    return path;
}

Dataset read_dataset(const std::filesystem::path& dir) {
    json manifest;
    try {
        manifest = json::parse(read_file(dir / "manifest.json"));
    } catch (const json::exception& e) {
        throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    Dataset data;
    try {
        data.seed = manifest.at("seed").get<std::uint64_t>();
        data.spec = spec_from_json(manifest.at("spec"));
        data.vocab = Vocabulary::for_spec(data.spec);
        if (manifest.at("vocab").at("size").get<int>() != data.vocab.size()) {
            throw IoError("manifest vocabulary size does not match its spec");
        }
        int id = 0;
        for (const auto& f : manifest.at("families")) data.families.push_back({id++, f.get<std::vector<int>>()});
        id = 0;
        for (const auto& s : manifest.at("styles")) data.styles.push_back({id++, s.get<std::vector<Token>>()});
        for (Level level : kLevels) {
            const auto& entry = manifest.at("splits").at(std::string(to_string(level)));
            auto bytes = read_file(dir / entry.at("file").get<std::string>());
            if (sha256_hex(bytes) != entry.at("sha256").get<std::string>()) {
                throw IoError("checksum mismatch for " + entry.at("file").get<std::string>());
            }
            std::istringstream in(bytes);
            std::string line;
            while (std::getline(in, line)) {
                if (!line.empty()) data.split(level).push_back(episode_from_json(line, data.vocab));
            }
        }
    } catch (const json::exception& e) {
        throw IoError("malformed dataset in " + dir.string() + ": " + e.what());
    }
    return data;
}

}  // namespace care
