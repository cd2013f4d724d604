// Command-line front end: validate / compile / cost / search / train / eval,
// plus preset dumps and manifest-driven reruns. Human-readable output goes to
// stdout; machine artifacts only where --out points. Exit codes: 0 success,
// 1 domain failure, 2 usage or I/O failure.

#include <CLI11.hpp>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "pyrsearch/cost_model.hpp"
#include "pyrsearch/search_drivers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pyrsearch;

namespace {

constexpr const char* kVersion = PYRSEARCH_VERSION;

[[noreturn]] void usage_error(const std::string& msg) {
  throw Error("usage-error", msg);
}

bool is_usage_error(const std::string& id) {
  static const std::set<std::string> usage = {
      "usage-error",     "parse-error",        "schema-violation", "io-error",
      "unknown-preset",  "invalid-task-config", "invalid-config",  "invalid-space",
      "unknown-parameter"};
  return usage.count(id) > 0;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const std::string& path, const std::string& text) {
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw Error("io-error", "cannot write " + path);
  out << text;
}

Genome load_genome(const std::string& path) { return from_json(read_file(path)); }

TaskConfig resolve_task(const json& cfg) {
  TaskConfig task;
  const std::string file = cfg.value("task_config", "");
  if (!file.empty())
    task = task_from_json(read_file(file));
  else
    task = task_preset(cfg.value("task_preset", "default"));
  if (cfg.contains("steps_override") && cfg.at("steps_override").get<int>() >= 0)
    task.steps = cfg.at("steps_override").get<int>();
  task.seed = cfg.value("data_seed", task.seed);
  return task;
}

// ---------------------------------------------------------------------------
// Run manifests: every command writes one; rerun replays it elsewhere.

class Manifest {
 public:
  Manifest(std::string command, json config) : command_(std::move(command)), config_(std::move(config)) {
    start_ = std::chrono::steady_clock::now();
  }
  void record_output(const std::string& name, const std::string& path) { outputs_[name] = path; }
  void write(const std::string& dir) {
    const double wall_ms = std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - start_)
                               .count();
    json doc{{"version", 1},
             {"command", command_},
             {"config", config_},
             {"tool_version", kVersion},
             {"outputs", outputs_},
             {"wall_ms", wall_ms}};
    write_file((fs::path(dir) / "manifest.json").string(), doc.dump(2) + "\n");
  }

 private:
  std::string command_;
  json config_;
  json outputs_ = json::object();
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------

int cmd_preset(const json& cfg) {
  const std::string genome_name = cfg.value("genome", "");
  const std::string space_name = cfg.value("space", "");
  const std::string out = cfg.at("out").get<std::string>();
  if (genome_name.empty() == space_name.empty())
    usage_error("pass exactly one of --genome or --space");
  if (!genome_name.empty()) {
    write_file(out, to_json(preset(genome_name)) + "\n");
    std::cout << "wrote genome preset '" << genome_name << "' to " << out << "\n";
  } else {
    write_file(out, space_to_json(space_preset(space_name)) + "\n");
    std::cout << "wrote space preset '" << space_name << "' to " << out << "\n";
  }
  return 0;
}

int cmd_validate(const json& cfg) {
  const std::string path = cfg.at("genome_file").get<std::string>();
  // Parse without the validity gate so every violation is reported as data.
  Genome genome = parse_genome(read_file(path));
  ValidationReport report = validate(genome);
  json out{{"ok", report.ok()}, {"violations", json::array()}};
  for (const Violation& v : report.violations) {
    out["violations"].push_back(
        json{{"cell", v.cell_index}, {"rule", v.rule}, {"message", v.message}});
    std::cout << "violation [cell " << v.cell_index << "] " << v.rule << ": " << v.message << "\n";
  }
  if (report.ok()) std::cout << "ok\n";
  const std::string report_path = cfg.value("report", "");
  if (!report_path.empty()) write_file(report_path, out.dump(2) + "\n");
  return report.ok() ? 0 : 1;
}

PyramidInputSpec input_spec_from(const json& cfg, const Genome& genome) {
  const int side = cfg.value("image_side", 256);
  const int width = cfg.value("input_width", 0);
  return PyramidInputSpec::uniform(side, genome.space.input_levels,
                                   width > 0 ? width : genome.space.feature_dim);
}

FeatureGraph compile_from(const json& cfg, Genome& genome) {
  genome = load_genome(cfg.at("genome_file").get<std::string>());
  if (cfg.value("dim", 0) > 0) genome.space.feature_dim = cfg.at("dim").get<int>();
  return stack(genome, cfg.value("stack", 1), input_spec_from(cfg, genome));
}

int cmd_compile(const json& cfg, Manifest& manifest) {
  Genome genome;
  FeatureGraph graph = compile_from(cfg, genome);
  std::size_t edges = 0;
  for (const GraphNode& node : graph.nodes) edges += node.preds.size();
  std::cout << "nodes " << graph.nodes.size() << ", edges " << edges << ", stages "
            << graph.stack_count << ", outputs " << graph.outputs.size() << "\n";
  const std::string dot = cfg.value("dot", "");
  if (!dot.empty()) {
    write_file(dot, export_dot(graph));
    manifest.record_output("dot", dot);
  }
  const std::string out_json = cfg.value("json", "");
  if (!out_json.empty()) {
    write_file(out_json, graph_to_json(graph) + "\n");
    manifest.record_output("graph", out_json);
  }
  return 0;
}

int cmd_cost(const json& cfg, Manifest& manifest) {
  Genome genome;
  FeatureGraph graph = compile_from(cfg, genome);
  CostReport report = estimate(graph);
  std::cout << render_cost_table(report, graph);

  if (cfg.value("verify", false)) {
    ExecState st;
    st.mode = Mode::Eval;
    Rng rng(1);
    std::map<LevelId, Tensor4> feed;
    for (const auto& [level, width] : input_spec_from(cfg, genome).level_widths)
      feed[level] = Tensor4::random_normal(rng, 1, width, graph.image_side >> level,
                                           graph.image_side >> level, 1.0);
    (void)forward(graph, feed, st, 1);
    const bool match = st.counter.units * 2 == report.total_flops;
    std::cout << "verify: instrumented MACs " << st.counter.units << " x2 "
              << (match ? "==" : "!=") << " analytic flops " << report.total_flops << "\n";
    if (!match) throw Error("cost-mismatch", "instrumented count disagrees with the model");
  }

  const std::string compare_path = cfg.value("compare", "");
  if (!compare_path.empty()) {
    json sub = cfg;
    sub["genome_file"] = compare_path;
    Genome other;
    FeatureGraph other_graph = compile_from(sub, other);
    CostReport other_report = estimate(other_graph);
    CostDelta delta = compare(report, other_report);
    std::cout << "vs " << compare_path << ": flops delta " << delta.flops_delta << " (ratio "
              << delta.flops_ratio << "), params delta " << delta.params_delta << " (ratio "
              << delta.params_ratio << ")\n";
  }

  const std::string out = cfg.value("out", "");
  if (!out.empty()) {
    write_file(out, cost_to_json(report) + "\n");
    manifest.record_output("cost", out);
  }
  return 0;
}

int cmd_search(const json& cfg, Manifest& manifest) {
  const std::string driver = cfg.at("driver").get<std::string>();
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  const int workers = cfg.value("workers", 1);
  const std::string out_dir = cfg.at("out").get<std::string>();
  SpaceConfig space = space_from_json(read_file(cfg.at("space_file").get<std::string>()));

  std::unique_ptr<Evaluator> evaluator;
  const std::string task = cfg.value("task", "planted");
  if (task == "planted") {
    evaluator = std::make_unique<PlantedEvaluator>(
        sample_random(space, cfg.value("planted_seed", std::uint64_t{424242})));
  } else if (task == "proxy") {
    TaskConfig tc = resolve_task(cfg);
    tc.feature_dim = space.feature_dim;
    evaluator = std::make_unique<ProxyEvaluator>(tc, cfg.value("stack", 3));
  } else {
    usage_error("unknown task '" + task + "'");
  }

  DriverResult result;
  if (driver == "random") {
    const auto mode = cfg.value("exhaustive", false) ? RandomSamplerMode::Permutation
                                                     : RandomSamplerMode::Independent;
    result = run_random_search(space, *evaluator, cfg.value("budget", 64), seed, workers, mode);
  } else if (driver == "evolution") {
    result = run_evolution(space, *evaluator, cfg.value("population", 16),
                           cfg.value("cycles", 50), cfg.value("tournament", 4), seed, workers);
  } else if (driver == "ppo") {
    PpoConfig ppo;
    ppo.learning_rate = cfg.value("ppo_lr", 0.01);
    ppo.entropy_bonus = cfg.value("ppo_entropy", 0.02);
    ppo.entropy_anneal = cfg.value("ppo_entropy_anneal", true);
    ppo.clip_epsilon = cfg.value("ppo_clip", 0.2);
    ppo.epochs_per_batch = cfg.value("ppo_epochs", 3);
    result = run_rnn_ppo(space, *evaluator, cfg.value("iterations", 100),
                         cfg.value("batch", 16), seed, workers, ppo);
  } else {
    usage_error("unknown driver '" + driver + "'");
  }

  write_file((fs::path(out_dir) / "best_genome.json").string(), to_json(result.best) + "\n");
  write_file((fs::path(out_dir) / "log.jsonl").string(), result.log.to_jsonl());
  write_file((fs::path(out_dir) / "summary.json").string(), result.log.summary_json() + "\n");
  manifest.record_output("best_genome", (fs::path(out_dir) / "best_genome.json").string());
  manifest.record_output("log", (fs::path(out_dir) / "log.jsonl").string());
  manifest.record_output("summary", (fs::path(out_dir) / "summary.json").string());
  std::cout << "evaluations " << result.log.total() << " (unique " << result.log.unique_count()
            << "), best reward " << result.log.best_reward << "\n";
  return 0;
}

int cmd_train(const json& cfg, Manifest& manifest) {
  const std::string out_dir = cfg.at("out").get<std::string>();
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  Genome genome = load_genome(cfg.at("genome_file").get<std::string>());
  TaskConfig task = resolve_task(cfg);
  const int stack_n = cfg.value("stack", 1);
  const bool deep = cfg.value("deep_supervision", false);

  Dataset data = generate_dataset(task);
  ProxyModel model = build_model(genome, task, stack_n, deep, seed);
  train_model(model, data);

  auto preds = predict(model, data.val);
  std::vector<std::map<LevelId, Tensor4>> targets;
  for (const SyntheticScene& scene : data.val) targets.push_back(scene.targets);
  const double ap = evaluate_ap(preds, targets);

  const std::string ckpt = (fs::path(out_dir) / "ckpt").string();
  fs::create_directories(out_dir);
  save_checkpoint(model.state, ckpt);
  write_file((fs::path(out_dir) / "genome.json").string(), to_json(genome) + "\n");
  write_file((fs::path(out_dir) / "task.json").string(), task_to_json(task) + "\n");
  json model_cfg{{"stack", stack_n}, {"deep_supervision", deep}, {"seed", seed}};
  write_file((fs::path(out_dir) / "model.json").string(), model_cfg.dump(2) + "\n");
  json metrics{{"val_ap", ap}, {"steps", task.steps}};
  write_file((fs::path(out_dir) / "metrics.json").string(), metrics.dump() + "\n");
  manifest.record_output("checkpoint", ckpt + ".bin");
  manifest.record_output("metrics", (fs::path(out_dir) / "metrics.json").string());
  std::cout << "trained " << task.steps << " steps, val AP " << ap << "\n";
  return 0;
}

int cmd_eval(const json& cfg, Manifest& manifest) {
  const std::string model_dir = cfg.at("model").get<std::string>();
  Genome genome = from_json(read_file((fs::path(model_dir) / "genome.json").string()));
  TaskConfig task = task_from_json(read_file((fs::path(model_dir) / "task.json").string()));
  json model_cfg = json::parse(read_file((fs::path(model_dir) / "model.json").string()));
  ProxyModel model = build_model(genome, task, model_cfg.at("stack").get<int>(),
                                 model_cfg.at("deep_supervision").get<bool>(),
                                 model_cfg.at("seed").get<std::uint64_t>());
  load_checkpoint(model.state, (fs::path(model_dir) / "ckpt").string());

  Dataset data = generate_dataset(task);
  const int requested = cfg.value("early_exit", -1);
  std::vector<int> stages;
  if (requested > 0) {
    stages.push_back(requested);
  } else if (model.deep_supervision) {
    for (int s = 1; s <= model.stack_n; ++s) stages.push_back(s);
  } else {
    stages.push_back(model.stack_n);
  }

  json table = json::array();
  std::cout << "stage        ap           macs\n";
  for (int s : stages) {
    EarlyExitResult result = evaluate_early_exit(model, s, data.val);
    table.push_back(json{{"stage", s}, {"ap", result.ap}, {"macs", result.macs}});
    std::cout << s << "    " << result.ap << "    " << result.macs << "\n";
  }
  const std::string out = cfg.value("out", "");
  if (!out.empty()) {
    write_file(out, json{{"stages", table}}.dump() + "\n");
    manifest.record_output("metrics", out);
  }
  return 0;
}

int dispatch(const std::string& command, const json& cfg, const std::string& manifest_dir);

int cmd_rerun(const json& cfg) {
  const std::string manifest_path = cfg.at("manifest").get<std::string>();
  const std::string out_dir = cfg.at("out").get<std::string>();
  json manifest = json::parse(read_file(manifest_path), nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("command") || !manifest.contains("config"))
    throw Error("schema-violation", "not a run manifest: " + manifest_path);
  json config = manifest.at("config");
  // Redirect all outputs into the new directory.
  const std::string command = manifest.at("command").get<std::string>();
  if (config.contains("out") && (command == "search" || command == "train"))
    config["out"] = out_dir;
  else if (config.contains("out") && !config.at("out").get<std::string>().empty())
    config["out"] = (fs::path(out_dir) / fs::path(config.at("out").get<std::string>()).filename()).string();
  for (const char* key : {"dot", "json", "report"})
    if (config.contains(key) && !config.at(key).get<std::string>().empty())
      config[key] = (fs::path(out_dir) / fs::path(config.at(key).get<std::string>()).filename()).string();
  return dispatch(command, config, out_dir);
}

int dispatch(const std::string& command, const json& cfg, const std::string& manifest_dir) {
  Manifest manifest(command, cfg);
  int code = 0;
  if (command == "preset")
    code = cmd_preset(cfg);
  else if (command == "validate")
    code = cmd_validate(cfg);
  else if (command == "compile")
    code = cmd_compile(cfg, manifest);
  else if (command == "cost")
    code = cmd_cost(cfg, manifest);
  else if (command == "search")
    code = cmd_search(cfg, manifest);
  else if (command == "train")
    code = cmd_train(cfg, manifest);
  else if (command == "eval")
    code = cmd_eval(cfg, manifest);
  else
    usage_error("unknown command " + command);
  if (!manifest_dir.empty()) manifest.write(manifest_dir);
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"feature pyramid architecture search toolkit"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  json cfg;
  std::string manifest_dir;

  auto* preset_cmd = app.add_subcommand("preset", "write a named genome or space preset");
  std::string preset_genome, preset_space, preset_out;
  preset_cmd->add_option("--genome", preset_genome, "genome preset name");
  preset_cmd->add_option("--space", preset_space, "space preset name");
  preset_cmd->add_option("--out", preset_out, "output file")->required();

  auto* validate_cmd = app.add_subcommand("validate", "check a genome file");
  std::string v_genome, v_report;
  validate_cmd->add_option("genome", v_genome, "genome JSON file")->required();
  validate_cmd->add_option("--report", v_report, "write the report as JSON");

  auto add_compile_flags = [](CLI::App* cmd, auto& opts) {
    cmd->add_option("genome", opts.genome, "genome JSON file")->required();
    cmd->add_option("--stack", opts.stack, "number of stacked pyramids")->default_val(1);
    cmd->add_option("--image-side", opts.image_side, "input image side")->default_val(256);
    cmd->add_option("--dim", opts.dim, "override feature dimension")->default_val(0);
    cmd->add_option("--input-width", opts.input_width, "backbone channel width")->default_val(0);
  };
  struct CompileOpts {
    std::string genome, dot, json_out, compare, out;
    int stack = 1, image_side = 256, dim = 0, input_width = 0;
    bool verify = false;
  } c_opts, k_opts;
  auto* compile_cmd = app.add_subcommand("compile", "lower a genome to a fusion graph");
  add_compile_flags(compile_cmd, c_opts);
  compile_cmd->add_option("--dot", c_opts.dot, "write Graphviz text");
  compile_cmd->add_option("--json", c_opts.json_out, "write the graph as JSON");
  compile_cmd->add_option("--manifest-dir", manifest_dir, "where to write manifest.json");

  auto* cost_cmd = app.add_subcommand("cost", "analytic FLOPs and parameter counts");
  add_compile_flags(cost_cmd, k_opts);
  cost_cmd->add_option("--compare", k_opts.compare, "second genome to diff against");
  cost_cmd->add_flag("--verify", k_opts.verify, "cross-check against the instrumented counter");
  cost_cmd->add_option("--out", k_opts.out, "write the cost report as JSON");
  cost_cmd->add_option("--manifest-dir", manifest_dir, "where to write manifest.json");

  auto* search_cmd = app.add_subcommand("search", "run an architecture search driver");
  struct SearchOpts {
    std::string driver, space_file, task = "planted", task_config, task_preset = "default", out;
    std::uint64_t seed = 0, planted_seed = 424242, data_seed = 0;
    int workers = 1, budget = 64, population = 16, cycles = 50, tournament = 4;
    int iterations = 100, batch = 16, stack = 3, steps_override = -1;
    bool exhaustive = false;
    double ppo_lr = 0.01, ppo_entropy = 0.02, ppo_clip = 0.2;
    int ppo_epochs = 3;
    bool ppo_no_anneal = false;
  } s;
  search_cmd->add_option("--driver", s.driver, "random | evolution | ppo")->required();
  search_cmd->add_option("--space", s.space_file, "space JSON file")->required();
  search_cmd->add_option("--task", s.task, "planted | proxy");
  search_cmd->add_option("--task-config", s.task_config, "task config JSON file");
  search_cmd->add_option("--task-preset", s.task_preset, "named task preset");
  search_cmd->add_option("--seed", s.seed, "run seed")->required();
  search_cmd->add_option("--workers", s.workers, "evaluation pool size");
  search_cmd->add_option("--budget", s.budget, "random-search samples");
  search_cmd->add_flag("--exhaustive", s.exhaustive, "permutation sampler over the whole space");
  search_cmd->add_option("--population", s.population, "evolution population");
  search_cmd->add_option("--cycles", s.cycles, "evolution cycles");
  search_cmd->add_option("--tournament", s.tournament, "evolution tournament size");
  search_cmd->add_option("--iterations", s.iterations, "ppo iterations");
  search_cmd->add_option("--batch", s.batch, "ppo genomes per iteration");
  search_cmd->add_option("--stack", s.stack, "stacked pyramids for the proxy task");
  search_cmd->add_option("--steps", s.steps_override, "override proxy training steps");
  search_cmd->add_option("--planted-seed", s.planted_seed, "seed of the hidden target");
  search_cmd->add_option("--data-seed", s.data_seed, "proxy dataset seed");
  search_cmd->add_option("--ppo-lr", s.ppo_lr, "controller learning rate");
  search_cmd->add_option("--ppo-entropy", s.ppo_entropy, "entropy bonus weight");
  search_cmd->add_option("--ppo-clip", s.ppo_clip, "clip epsilon");
  search_cmd->add_option("--ppo-epochs", s.ppo_epochs, "epochs per batch");
  search_cmd->add_flag("--ppo-no-anneal", s.ppo_no_anneal, "keep the entropy bonus constant");
  search_cmd->add_option("--out", s.out, "output directory")->required();

  auto* train_cmd = app.add_subcommand("train", "train a genome on the synthetic task");
  struct TrainOpts {
    std::string genome, task_config, task_preset = "default", out;
    std::uint64_t seed = 0, data_seed = 0;
    int stack = 1, steps_override = -1;
    bool deep = false;
  } t;
  train_cmd->add_option("genome", t.genome, "genome JSON file")->required();
  train_cmd->add_option("--stack", t.stack, "stacked pyramids");
  train_cmd->add_flag("--deep-supervision", t.deep, "heads and losses after every stage");
  train_cmd->add_option("--task-config", t.task_config, "task config JSON file");
  train_cmd->add_option("--task-preset", t.task_preset, "named task preset");
  train_cmd->add_option("--steps", t.steps_override, "override training steps");
  train_cmd->add_option("--seed", t.seed, "run seed")->required();
  train_cmd->add_option("--data-seed", t.data_seed, "dataset seed");
  train_cmd->add_option("--out", t.out, "output directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained model");
  struct EvalOpts {
    std::string model, out;
    int early_exit = -1;
  } e;
  eval_cmd->add_option("--model", e.model, "trained model directory")->required();
  eval_cmd->add_option("--early-exit", e.early_exit, "exit after this stage only");
  eval_cmd->add_option("--out", e.out, "write metrics JSON");
  eval_cmd->add_option("--manifest-dir", manifest_dir, "where to write manifest.json");

  auto* rerun_cmd = app.add_subcommand("rerun", "replay a run from its manifest");
  struct RerunOpts {
    std::string manifest, out;
  } r;
  rerun_cmd->add_option("manifest", r.manifest, "manifest.json of a previous run")->required();
  rerun_cmd->add_option("--out", r.out, "directory for the replayed outputs")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (preset_cmd->parsed()) {
      cfg = {{"genome", preset_genome}, {"space", preset_space}, {"out", preset_out}};
      return dispatch("preset", cfg, "");
    }
    if (validate_cmd->parsed()) {
      cfg = {{"genome_file", v_genome}, {"report", v_report}};
      return dispatch("validate", cfg, "");
    }
    if (compile_cmd->parsed()) {
      cfg = {{"genome_file", c_opts.genome}, {"stack", c_opts.stack},
             {"image_side", c_opts.image_side}, {"dim", c_opts.dim},
             {"input_width", c_opts.input_width}, {"dot", c_opts.dot},
             {"json", c_opts.json_out}};
      return dispatch("compile", cfg, manifest_dir);
    }
    if (cost_cmd->parsed()) {
      cfg = {{"genome_file", k_opts.genome}, {"stack", k_opts.stack},
             {"image_side", k_opts.image_side}, {"dim", k_opts.dim},
             {"input_width", k_opts.input_width}, {"compare", k_opts.compare},
             {"verify", k_opts.verify}, {"out", k_opts.out}};
      return dispatch("cost", cfg, manifest_dir);
    }
    if (search_cmd->parsed()) {
      cfg = {{"driver", s.driver},       {"space_file", s.space_file},
             {"task", s.task},           {"task_config", s.task_config},
             {"task_preset", s.task_preset}, {"seed", s.seed},
             {"workers", s.workers},     {"budget", s.budget},
             {"exhaustive", s.exhaustive}, {"population", s.population},
             {"cycles", s.cycles},       {"tournament", s.tournament},
             {"iterations", s.iterations}, {"batch", s.batch},
             {"stack", s.stack},         {"steps_override", s.steps_override},
             {"planted_seed", s.planted_seed}, {"data_seed", s.data_seed},
             {"ppo_lr", s.ppo_lr},       {"ppo_entropy", s.ppo_entropy},
             {"ppo_clip", s.ppo_clip},   {"ppo_epochs", s.ppo_epochs},
             {"ppo_entropy_anneal", !s.ppo_no_anneal}, {"out", s.out}};
      return dispatch("search", cfg, s.out);
    }
    if (train_cmd->parsed()) {
      cfg = {{"genome_file", t.genome}, {"stack", t.stack},
             {"deep_supervision", t.deep}, {"task_config", t.task_config},
             {"task_preset", t.task_preset}, {"steps_override", t.steps_override},
             {"seed", t.seed},          {"data_seed", t.data_seed},
             {"out", t.out}};
      return dispatch("train", cfg, t.out);
    }
    if (eval_cmd->parsed()) {
      cfg = {{"model", e.model}, {"early_exit", e.early_exit}, {"out", e.out}};
      return dispatch("eval", cfg, manifest_dir);
    }
    if (rerun_cmd->parsed()) {
      cfg = {{"manifest", r.manifest}, {"out", r.out}};
      return cmd_rerun(cfg);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_usage_error(e.id()) ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
