#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "care/core.hpp"

namespace care {

/// An ordered chain of abstract step ids drawn from [0, block_size).
struct TaskFamily {
    int id = 0;
    std::vector<int> steps;

    bool operator==(const TaskFamily&) const = default;
};

/// Injective map abstract step -> surface token inside the style's own block.
struct StyleMap {
    int id = 0;
    std::vector<Token> surface;

    Token operator()(int step) const { return surface.at(static_cast<std::size_t>(step)); }
    bool operator==(const StyleMap&) const = default;
};

std::vector<TaskFamily> generate_task_families(std::uint64_t seed, int count, std::pair<int, int> length_range,
                                               int step_pool);

/// Styles 0..count-1 own vocabulary blocks 0..count-1. Throws when the
/// vocabulary has fewer style blocks than requested or when block_size cannot
/// hold the longest family.
std::vector<StyleMap> generate_styles(std::uint64_t seed, int count, int block_size, int max_family_length,
                                      const Vocabulary& vocab);

struct RenderOptions {
    int max_cues = 3;
    int noise_tokens = 8;
    double cue_leak = 0.0;  // per-cue chance of naming the answer letter
};

/// Observation = goal token, the first `progress` steps, then 0..max_cues
/// distractor cues. Ground truth is step progress+1; negatives come from the
/// same family. A leaking cue is noise token `answer letter`.
Episode render_episode(const TaskFamily& family, const StyleMap& style, int progress, Rng& rng,
                       const Vocabulary& vocab, const RenderOptions& opts = {});

struct Dataset {
    SplitSpec spec;
    std::uint64_t seed = 0;
    Vocabulary vocab;
    std::vector<TaskFamily> families;  // train pool first, then held-out
    std::vector<StyleMap> styles;      // train pool first, then held-out
    std::array<std::vector<Episode>, 4> splits;

    const std::vector<Episode>& split(Level level) const { return splits[static_cast<std::size_t>(level)]; }
    std::vector<Episode>& split(Level level) { return splits[static_cast<std::size_t>(level)]; }
    bool is_train_family(int family) const { return family < spec.train_families; }
    bool is_train_style(int style) const { return style < spec.train_styles; }
};

Dataset build_splits(const SplitSpec& spec, std::uint64_t seed);

/// Canonical consistent response: think(progress steps, next action), answer(letter).
Trajectory oracle_trace(const Episode& ep, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Files: <dir>/{train,l1,l2,l3}.jsonl + <dir>/manifest.json

std::string episode_to_json(const Episode& ep, const Vocabulary& vocab);
Episode episode_from_json(const std::string& line, const Vocabulary& vocab);

std::string split_file_name(Level level);

/// Writes all four splits and the manifest; returns the manifest path.
std::filesystem::path write_dataset(const Dataset& data, const std::filesystem::path& dir);
/// Reads a directory written by write_dataset; verifies checksums.
Dataset read_dataset(const std::filesystem::path& dir);

std::string sha256_hex(std::string_view bytes);

}  // namespace care
