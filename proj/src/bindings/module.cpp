#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "pyrsearch/cost_model.hpp"
#include "pyrsearch/search_drivers.hpp"

namespace py = pybind11;
using namespace pyrsearch;

namespace {

// The python surface trades in canonical JSON strings for genomes, spaces
// and task configs; heavyweight state stays on the C++ side.

struct GraphHandle {
  FeatureGraph graph;
  int node_count() const { return static_cast<int>(graph.nodes.size()); }
  int edge_count() const {
    int edges = 0;
    for (const GraphNode& node : graph.nodes) edges += static_cast<int>(node.preds.size());
    return edges;
  }
  int stack_count() const { return graph.stack_count; }
  std::string dot() const { return export_dot(graph); }
  std::string to_json() const { return graph_to_json(graph); }
  py::dict cost() const {
    CostReport report = estimate(graph);
    py::dict out;
    out["total_flops"] = report.total_flops;
    out["total_params"] = report.total_params;
    return out;
  }
};

GraphHandle compile_py(const std::string& genome_json, int stack_n, int image_side,
                       int input_width) {
  Genome genome = from_json(genome_json);
  const int width = input_width > 0 ? input_width : genome.space.feature_dim;
  auto inputs = PyramidInputSpec::uniform(image_side, genome.space.input_levels, width);
  return GraphHandle{stack(genome, stack_n, inputs)};
}

py::list validate_py(const std::string& genome_json) {
  ValidationReport report = validate(parse_genome(genome_json));
  py::list out;
  for (const Violation& v : report.violations) {
    py::dict item;
    item["cell"] = v.cell_index;
    item["rule"] = v.rule;
    item["message"] = v.message;
    out.append(item);
  }
  return out;
}

py::dict reward_py(const std::string& genome_json, const std::string& task_json, int stack_n,
                   std::uint64_t seed) {
  RewardRecord record = evaluate_reward(from_json(genome_json), task_from_json(task_json),
                                        stack_n, seed);
  py::dict out;
  out["genome_hash"] = record.genome_hash;
  out["reward"] = record.reward;
  out["steps"] = record.steps;
  out["seed"] = record.seed;
  return out;
}

py::tuple driver_result(DriverResult&& result) {
  return py::make_tuple(to_json(result.best), result.log.summary_json());
}

py::tuple random_search_py(const std::string& space_json, std::uint64_t planted_seed, int budget,
                           std::uint64_t seed, int workers, bool exhaustive) {
  SpaceConfig space = space_from_json(space_json);
  PlantedEvaluator eval(sample_random(space, planted_seed));
  return driver_result(run_random_search(space, eval, budget, seed, workers,
                                         exhaustive ? RandomSamplerMode::Permutation
                                                    : RandomSamplerMode::Independent));
}

py::tuple evolution_py(const std::string& space_json, std::uint64_t planted_seed, int population,
                       int cycles, int tournament, std::uint64_t seed, int workers) {
  SpaceConfig space = space_from_json(space_json);
  PlantedEvaluator eval(sample_random(space, planted_seed));
  return driver_result(run_evolution(space, eval, population, cycles, tournament, seed, workers));
}

py::tuple ppo_py(const std::string& space_json, std::uint64_t planted_seed, int iterations,
                 int batch, std::uint64_t seed, int workers, double lr, double entropy,
                 bool anneal) {
  SpaceConfig space = space_from_json(space_json);
  PlantedEvaluator eval(sample_random(space, planted_seed));
  PpoConfig ppo;
  ppo.learning_rate = lr;
  ppo.entropy_bonus = entropy;
  ppo.entropy_anneal = anneal;
  return driver_result(run_rnn_ppo(space, eval, iterations, batch, seed, workers, ppo));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "feature pyramid architecture search core";
  m.attr("__version__") = PYRSEARCH_VERSION;

  py::register_exception<Error>(m, "ToolkitError");

  // Genome grammar.
  m.def("preset", [](const std::string& name) { return to_json(preset(name)); },
        py::arg("name"), "Named genome preset as canonical JSON.");
  m.def("space_preset", [](const std::string& name) { return space_to_json(space_preset(name)); },
        py::arg("name"), "Named space preset as canonical JSON.");
  m.def("validate", &validate_py, py::arg("genome_json"),
        "List of violations; empty means the genome is valid.");
  m.def("sample_random",
        [](const std::string& space_json, std::uint64_t seed) {
          return to_json(sample_random(space_from_json(space_json), seed));
        },
        py::arg("space_json"), py::arg("seed"));
  m.def("mutate",
        [](const std::string& genome_json, std::uint64_t seed) {
          return to_json(mutate(from_json(genome_json), seed));
        },
        py::arg("genome_json"), py::arg("seed"));
  m.def("enumeration_count",
        [](const std::string& space_json) { return enumeration_count(space_from_json(space_json)); },
        py::arg("space_json"));
  m.def("enumerate_genomes",
        [](const std::string& space_json, std::uint64_t cap) {
          std::vector<std::string> out;
          for (const Genome& g : enumerate_all(space_from_json(space_json), cap))
            out.push_back(to_json(g));
          return out;
        },
        py::arg("space_json"), py::arg("cap") = 1000000);
  m.def("genome_hash",
        [](const std::string& genome_json) { return genome_hash(from_json(genome_json)); },
        py::arg("genome_json"));
  m.def("degenerate_coarse_genome",
        [](const std::string& space_json) {
          return to_json(degenerate_coarse_genome(space_from_json(space_json)));
        },
        py::arg("space_json"));

  // Compiler and cost model.
  py::class_<GraphHandle>(m, "FeatureGraph")
      .def_property_readonly("node_count", &GraphHandle::node_count)
      .def_property_readonly("edge_count", &GraphHandle::edge_count)
      .def_property_readonly("stack_count", &GraphHandle::stack_count)
      .def("dot", &GraphHandle::dot)
      .def("to_json", &GraphHandle::to_json)
      .def("cost", &GraphHandle::cost);
  m.def("compile", &compile_py, py::arg("genome_json"), py::arg("stack") = 1,
        py::arg("image_side") = 256, py::arg("input_width") = 0,
        "Lower a genome to a shape-inferred fusion graph.");

  // Engine checks.
  m.def("grad_check", &grad_check, py::arg("op"), py::arg("seed") = 11,
        "Max relative error of analytic vs central-difference gradients.");
  m.def("grad_check_ops", &grad_check_ops);

  // Proxy task.
  m.def("task_preset", [](const std::string& name) { return task_to_json(task_preset(name)); },
        py::arg("name"));
  m.def("evaluate_reward", &reward_py, py::arg("genome_json"), py::arg("task_json"),
        py::arg("stack") = 1, py::arg("seed") = 0);

  // Search drivers over the planted analytic reward.
  m.def("run_random_search", &random_search_py, py::arg("space_json"), py::arg("planted_seed"),
        py::arg("budget"), py::arg("seed"), py::arg("workers") = 1,
        py::arg("exhaustive") = false);
  m.def("run_evolution", &evolution_py, py::arg("space_json"), py::arg("planted_seed"),
        py::arg("population"), py::arg("cycles"), py::arg("tournament"), py::arg("seed"),
        py::arg("workers") = 1);
  m.def("run_rnn_ppo", &ppo_py, py::arg("space_json"), py::arg("planted_seed"),
        py::arg("iterations"), py::arg("batch"), py::arg("seed"), py::arg("workers") = 1,
        py::arg("lr") = 0.01, py::arg("entropy") = 0.02, py::arg("anneal") = true);
}
