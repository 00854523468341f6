#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "care/policy.hpp"
#include "care/taskgen.hpp"

namespace care::test {

// Small benchmark shared by the unit suites; cheap to build and to train on.
inline SplitSpec small_spec() {
    SplitSpec s;
    s.train_count = 40;
    s.l1_count = 12;
    s.l2_count = 8;
    s.l3_count = 8;
    return s;
}

inline const Dataset& small_data() {
    static const Dataset d = build_splits(small_spec(), 11);
    return d;
}

inline Config small_config() {
    Config c;
    c.split = small_spec();
    c.embed_dim = 6;
    c.hidden_dim = 8;
    c.total_steps = 6;
    c.eval_interval = 3;
    c.batch_size = 2;
    c.group_size = 4;
    c.workers = 1;
    return c;
}

inline ModelSpec small_model(const Config& c = small_config()) { return ModelSpec::from_config(c, small_data().vocab); }

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("care_rl_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace care::test
