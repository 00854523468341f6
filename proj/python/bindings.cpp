#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "care/care_reward.hpp"
#include "care/evalx.hpp"
#include "care/gradcheck.hpp"
#include "care/rollout.hpp"
#include "care/taskgen.hpp"
#include "care/trainer.hpp"

namespace py = pybind11;
using namespace care;

namespace {

py::array_t<double> to_numpy(std::span<const double> xs) {
    py::array_t<double> out(static_cast<py::ssize_t>(xs.size()));
    std::copy(xs.begin(), xs.end(), out.mutable_data());
    return out;
}

void from_numpy(PolicyParams& p, const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    if (static_cast<std::size_t>(a.size()) != p.size()) throw std::invalid_argument("parameter vector has the wrong length");
    std::copy(a.data(), a.data() + a.size(), p.flat().begin());
}

py::dict metrics_dict(const EvalMetrics& e) {
    py::dict d;
    d["l1"] = e.l1;
    d["l2"] = e.l2;
    d["l3"] = e.l3;
    d["overall"] = e.overall;
    d["consistency"] = e.consistency;
    return d;
}

}  // namespace

PYBIND11_MODULE(_care_rl, m) {
    m.doc() = "Group-relative policy optimisation with consistency-aware rewards on a synthetic planning task";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<IoError>(m, "IoError", PyExc_OSError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::enum_<Level>(m, "Level")
        .value("TRAIN", Level::TRAIN)
        .value("L1", Level::L1)
        .value("L2", Level::L2)
        .value("L3", Level::L3);

    m.def("variants", [] {
        std::vector<std::string> names;
        for (Variant v : all_variants()) names.emplace_back(to_string(v));
        return names;
    });

    py::class_<Config>(m, "Config")
        .def(py::init<>())
        .def("__getitem__", [](const Config& c, const std::string& k) { return get_config_value(c, k); })
        .def("__setitem__", [](Config& c, const std::string& k, py::object v) {
            std::string text = py::isinstance<py::bool_>(v) ? (v.cast<bool>() ? "true" : "false")
                                                            : py::str(v).cast<std::string>();
            set_config_value(c, k, text);
        })
        .def("keys", [](const Config&) { return std::vector<std::string>(config_keys().begin(), config_keys().end()); })
        .def("validate", [](const Config& c) { validate_config(c); })
        .def("to_text", [](const Config& c) { return to_config_text(c); })
        .def_static("from_text", [](const std::string& t) { return parse_config_text(t); })
        .def("__eq__", [](const Config& a, const Config& b) { return a == b; })
        .def("__repr__", [](const Config& c) { return "<Config variant=" + get_config_value(c, "variant") + ">"; });

    py::class_<Vocabulary>(m, "Vocabulary")
        .def_property_readonly("size", &Vocabulary::size)
        .def("letter", &Vocabulary::letter)
        .def("name", &Vocabulary::name)
        .def("render", [](const Vocabulary& v, const std::vector<Token>& t) { return v.render(t); })
        .def_property_readonly_static("THINK_OPEN", [](py::object) { return Vocabulary::kThinkOpen; })
        .def_property_readonly_static("THINK_CLOSE", [](py::object) { return Vocabulary::kThinkClose; })
        .def_property_readonly_static("ANSWER_OPEN", [](py::object) { return Vocabulary::kAnswerOpen; })
        .def_property_readonly_static("ANSWER_CLOSE", [](py::object) { return Vocabulary::kAnswerClose; });

    py::class_<Episode>(m, "Episode")
        .def_readonly("id", &Episode::id)
        .def_readonly("level", &Episode::level)
        .def_readonly("family", &Episode::family)
        .def_readonly("style", &Episode::style)
        .def_readonly("progress", &Episode::progress)
        .def_readonly("observation", &Episode::observation)
        .def_readonly("candidates", &Episode::candidates)
        .def_readonly("answer", &Episode::answer)
        .def_readonly("answer_action", &Episode::answer_action);

    py::class_<Trajectory>(m, "Trajectory")
        .def(py::init([](std::vector<Token> tokens) {
                 Trajectory t;
                 t.tokens = std::move(tokens);
                 t.logprobs.assign(t.tokens.size(), 0.0);
                 t.reasoning_len = reasoning_split(t.tokens);
                 return t;
             }),
             py::arg("tokens"))
        .def_readonly("tokens", &Trajectory::tokens)
        .def_readonly("logprobs", &Trajectory::logprobs)
        .def_readonly("reasoning_len", &Trajectory::reasoning_len)
        .def_readonly("parsed", &Trajectory::parsed);

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("seed", &Dataset::seed)
        .def_readonly("vocab", &Dataset::vocab)
        .def("split", py::overload_cast<Level>(&Dataset::split, py::const_))
        .def("write", [](const Dataset& d, const std::filesystem::path& dir) { return write_dataset(d, dir); });

    m.def("build_splits", [](std::uint64_t seed) { return build_splits(SplitSpec{}, seed); }, py::arg("seed"));
    m.def("read_dataset", &read_dataset, py::arg("dir"));
    m.def("oracle_trace", &oracle_trace, py::arg("episode"), py::arg("vocab"));

    py::class_<ModelSpec>(m, "ModelSpec")
        .def(py::init(&ModelSpec::from_config), py::arg("config"), py::arg("vocab"))
        .def_readonly("vocab", &ModelSpec::vocab)
        .def_readonly("max_reason_len", &ModelSpec::max_reason_len)
        .def_property_readonly("num_params", [](const ModelSpec& s) { return ParamLayout(s.dims).total(); });

    py::class_<PolicyParams>(m, "PolicyParams")
        .def("__len__", &PolicyParams::size)
        .def("numpy", [](const PolicyParams& p) { return to_numpy(p.flat()); })
        .def("assign", &from_numpy)
        .def("all_finite", &PolicyParams::all_finite);

    m.def("init_params", [](const ModelSpec& s, std::uint64_t seed, double scale) { return init_params(seed, s.dims, scale); },
          py::arg("model"), py::arg("seed"), py::arg("scale") = 0.05);

    m.def("next_token_log_probs",
          [](const ModelSpec& s, const PolicyParams& p, const Episode& ep, const std::vector<Token>& prefix) {
              return to_numpy(forward_logits(s, p, ep, prefix).log_probs);
          },
          py::arg("model"), py::arg("params"), py::arg("episode"), py::arg("prefix"));
    m.def("sample_trajectory",
          [](const ModelSpec& s, const PolicyParams& p, const Episode& ep, std::uint64_t seed, double temperature) {
              Rng rng = make_rng(seed);
              return sample_trajectory(s, p, ep, rng, temperature);
          },
          py::arg("model"), py::arg("params"), py::arg("episode"), py::arg("seed"), py::arg("temperature") = 1.0);
    m.def("logprob_of",
          [](const ModelSpec& s, const PolicyParams& p, const Episode& ep, const std::vector<Token>& tokens) {
              return logprob_of(s, p, ep, tokens);
          },
          py::arg("model"), py::arg("params"), py::arg("episode"), py::arg("tokens"));
    m.def("reference_likelihood", &reference_likelihood, py::arg("model"), py::arg("params"), py::arg("episode"),
          py::arg("trajectory"));
    m.def("think_conclusion", [](const std::vector<Token>& t, const Vocabulary& v) { return think_conclusion(t, v); });
    m.def("format_score", &format_score, py::arg("trajectory"), py::arg("vocab"));
    m.def("consistency_oracle", &consistency_oracle, py::arg("trajectory"), py::arg("episode"), py::arg("vocab"),
          py::arg("strict") = false);

    m.def("normalize_advantages", [](const std::vector<double>& r) { return normalize_advantages(r); });
    m.def("care_group",
          [](const std::vector<double>& r_acc, const std::vector<double>& r_fmt, const std::vector<double>& p,
             const Config& cfg) {
              auto res = care_group_from_likelihoods(r_acc, r_fmt, p, cfg);
              py::dict d;
              d["acc_baseline"] = res.selection.baseline;
              d["mask"] = res.selection.mask;
              d["cons_baseline"] = res.calibration.baseline;
              std::vector<bool> consistent(r_acc.size(), false);
              for (const auto& rec : res.calibration.records) consistent[rec.index] = rec.is_consistent;
              d["consistent"] = consistent;
              d["bonus"] = res.bonus;
              d["rewards"] = res.rewards;
              d["advantages"] = res.advantages;
              return d;
          },
          py::arg("r_acc"), py::arg("r_fmt"), py::arg("likelihood"), py::arg("config"));

    m.def("evaluate",
          [](const ModelSpec& s, const PolicyParams& p, const Dataset& d, const Config& cfg) {
              return metrics_dict(evaluate_validation(s, p, d, cfg, 0));
          },
          py::arg("model"), py::arg("params"), py::arg("dataset"), py::arg("config"));

    py::class_<RunResult>(m, "RunResult")
        .def_readonly("log", &RunResult::log)
        .def_readonly("warnings", &RunResult::warnings)
        .def_property_readonly("final_eval", [](const RunResult& r) { return metrics_dict(r.final_eval); })
        .def_property_readonly("theta", [](const RunResult& r) { return r.state.theta; })
        .def_property_readonly("phi", [](const RunResult& r) { return r.state.phi; })
        .def_property_readonly("step", [](const RunResult& r) { return r.state.step; });

    m.def("train",
          [](const Config& cfg, const Dataset& d, std::optional<std::filesystem::path> out) {
              RunOptions opts;
              opts.out_dir = std::move(out);
              py::gil_scoped_release release;
              return run_training(cfg, d, opts);
          },
          py::arg("config"), py::arg("dataset"), py::arg("out_dir") = py::none());

    m.def("load_checkpoint", [](const std::filesystem::path& path) {
        Checkpoint c = load_checkpoint(path);
        return py::make_tuple(c.step, std::string(to_string(c.variant)), c.theta, c.phi);
    });

    m.def("gradcheck",
          [](std::uint64_t seed, int cases) {
              GradCheckOptions o;
              o.seed = seed;
              o.cases = cases;
              auto r = run_gradcheck(o);
              return py::make_tuple(r.passed, static_cast<int>(r.cases.size()), r.max_rel_err);
          },
          py::arg("seed") = 1, py::arg("cases") = 50);
}
