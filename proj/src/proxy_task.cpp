#include "pyrsearch/proxy_task.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>

namespace pyrsearch {

using nlohmann::json;

void TaskConfig::check() const {
  auto fail = [](const std::string& msg) { throw Error("invalid-task-config", msg); };
  if (levels.empty()) fail("no levels");
  for (std::size_t i = 1; i < levels.size(); ++i)
    if (levels[i] <= levels[i - 1]) fail("levels must be sorted and unique");
  const LevelId max_level = levels.back();
  if (image_side < 1 || image_side % (1 << max_level) != 0)
    fail("image_side not divisible by 2^max_level");
  if (band_edges.size() != levels.size() + 1) fail("need one size band per level");
  for (std::size_t i = 1; i < band_edges.size(); ++i)
    if (band_edges[i] <= band_edges[i - 1]) fail("band edges must be strictly increasing");
  if (band_edges.front() < 1 || band_edges.back() > image_side) fail("bands exceed the image");
  if (min_objects < 0 || max_objects < min_objects) fail("bad object count range");
  if (train_scenes < 1 || val_scenes < 1) fail("need train and val scenes");
  if (steps < 0 || batch_size < 1) fail("bad training budget");
  if (!(focal_alpha > 0.0 && focal_alpha < 1.0)) fail("focal_alpha must be in (0,1)");
  if (focal_gamma < 0.0) fail("focal_gamma must be >= 0");
  if (backbone_base_width < 1 || feature_dim < 1) fail("bad widths");
  if (backbone_top_level >= 0 && backbone_top_level < levels.front())
    fail("backbone top above the finest level");
}

TaskConfig task_preset(const std::string& name) {
  TaskConfig cfg;
  if (name == "default") return cfg;
  if (name == "tiny") {
    cfg.image_side = 32;
    cfg.levels = {2, 3};
    cfg.band_edges = {3, 6, 12};
    cfg.train_scenes = 24;
    cfg.val_scenes = 12;
    cfg.steps = 120;
    cfg.backbone_base_width = 4;
    cfg.feature_dim = 8;
    return cfg;
  }
  if (name == "fivelevel") {
    cfg.image_side = 128;
    cfg.levels = {3, 4, 5, 6, 7};
    cfg.band_edges = {4, 8, 16, 32, 64, 112};
    cfg.train_scenes = 48;
    cfg.val_scenes = 16;
    cfg.steps = 600;
    cfg.lr = 0.08;
    cfg.backbone_base_width = 4;
    cfg.backbone_top_level = 5;  // levels 6 and 7 are pooled from 5
    cfg.feature_dim = 8;
    cfg.max_objects = 4;
    return cfg;
  }
  throw Error("unknown-preset", "no task preset named '" + name + "'");
}

std::string task_to_json(const TaskConfig& cfg) {
  return json{{"image_side", cfg.image_side},
              {"levels", cfg.levels},
              {"min_objects", cfg.min_objects},
              {"max_objects", cfg.max_objects},
              {"band_edges", cfg.band_edges},
              {"train_scenes", cfg.train_scenes},
              {"val_scenes", cfg.val_scenes},
              {"seed", cfg.seed},
              {"steps", cfg.steps},
              {"batch_size", cfg.batch_size},
              {"lr", cfg.lr},
              {"lr_decay_factor", cfg.lr_decay_factor},
              {"lr_decay_at", cfg.lr_decay_at},
              {"momentum", cfg.momentum},
              {"weight_decay", cfg.weight_decay},
              {"focal_alpha", cfg.focal_alpha},
              {"focal_gamma", cfg.focal_gamma},
              {"backbone_base_width", cfg.backbone_base_width},
              {"backbone_top_level", cfg.backbone_top_level},
              {"noise_sigma", cfg.noise_sigma},
              {"contrast_min", cfg.contrast_min},
              {"contrast_max", cfg.contrast_max},
              {"feature_dim", cfg.feature_dim}}
      .dump();
}

TaskConfig task_from_json(const std::string& text) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw Error("parse-error", "malformed task config JSON");
  TaskConfig cfg;
  try {
    cfg.image_side = doc.at("image_side").get<int>();
    cfg.levels = doc.at("levels").get<std::vector<int>>();
    cfg.min_objects = doc.at("min_objects").get<int>();
    cfg.max_objects = doc.at("max_objects").get<int>();
    cfg.band_edges = doc.at("band_edges").get<std::vector<int>>();
    cfg.train_scenes = doc.at("train_scenes").get<int>();
    cfg.val_scenes = doc.at("val_scenes").get<int>();
    cfg.seed = doc.at("seed").get<std::uint64_t>();
    cfg.steps = doc.at("steps").get<int>();
    cfg.batch_size = doc.at("batch_size").get<int>();
    cfg.lr = doc.at("lr").get<double>();
    cfg.lr_decay_factor = doc.at("lr_decay_factor").get<double>();
    cfg.lr_decay_at = doc.at("lr_decay_at").get<double>();
    cfg.momentum = doc.at("momentum").get<double>();
    cfg.weight_decay = doc.at("weight_decay").get<double>();
    cfg.focal_alpha = doc.at("focal_alpha").get<double>();
    cfg.focal_gamma = doc.at("focal_gamma").get<double>();
    cfg.backbone_base_width = doc.at("backbone_base_width").get<int>();
    cfg.backbone_top_level = doc.at("backbone_top_level").get<int>();
    cfg.noise_sigma = doc.at("noise_sigma").get<double>();
    cfg.contrast_min = doc.at("contrast_min").get<double>();
    cfg.contrast_max = doc.at("contrast_max").get<double>();
    cfg.feature_dim = doc.at("feature_dim").get<int>();
  } catch (const json::exception& e) {
    throw Error("schema-violation", std::string("task config: ") + e.what());
  }
  cfg.check();
  return cfg;
}

namespace {

SyntheticScene make_scene(const TaskConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  SyntheticScene scene;
  const int side = cfg.image_side;
  scene.image = Tensor4(1, 1, side, side);
  for (double& v : scene.image.data) v = rng.normal(0.0, cfg.noise_sigma);
  for (LevelId level : cfg.levels)
    scene.targets[level] = Tensor4::zeros(1, 1, side >> level, side >> level);

  const int count = cfg.min_objects + rng.uniform_int(cfg.max_objects - cfg.min_objects + 1);
  for (int k = 0; k < count; ++k) {
    // Level first, then a size inside its band: keeps positives balanced
    // across levels instead of skewed to the wide coarse bands.
    const std::size_t band = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cfg.levels.size())));
    const LevelId level = cfg.levels[band];
    const int lo = cfg.band_edges[band], hi = cfg.band_edges[band + 1];
    const int obj_side = lo + rng.uniform_int(hi - lo);
    const int x = rng.uniform_int(side - obj_side + 1);
    const int y = rng.uniform_int(side - obj_side + 1);
    const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
    for (int yy = y; yy < y + obj_side; ++yy)
      for (int xx = x; xx < x + obj_side; ++xx) scene.image.at(0, 0, yy, xx) += contrast;

    const int cy = (y + obj_side / 2) >> level;
    const int cx = (x + obj_side / 2) >> level;
    scene.targets[level].at(0, 0, cy, cx) = 1.0;
    scene.objects.push_back({x, y, obj_side, level});
  }
  return scene;
}

}  // namespace

Dataset generate_dataset(const TaskConfig& cfg) {
  cfg.check();
  Dataset data;
  for (int i = 0; i < cfg.train_scenes; ++i)
    data.train.push_back(make_scene(cfg, derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(i)})));
  for (int i = 0; i < cfg.val_scenes; ++i)
    data.val.push_back(make_scene(cfg, derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(i)})));
  return data;
}

double average_precision(const std::vector<double>& scores,
                         const std::vector<double>& positives) {
  if (scores.size() != positives.size())
    throw Error("shape-mismatch", "scores and targets differ in length");
  std::size_t npos = 0;
  for (double p : positives) npos += p > 0.5;
  if (npos == 0) return 0.0;

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  double prev_recall = 0.0, prev_precision = -1.0;
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < order.size()) {
    std::size_t j = i;  // tie group shares one threshold
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (positives[order[j]] > 0.5)
        ++tp;
      else
        ++fp;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(npos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (prev_precision < 0.0) prev_precision = precision;
    ap += (recall - prev_recall) * 0.5 * (precision + prev_precision);
    prev_recall = recall;
    prev_precision = precision;
    i = j;
  }
  return ap;
}

double evaluate_ap(const std::vector<std::map<LevelId, Tensor4>>& preds,
                   const std::vector<std::map<LevelId, Tensor4>>& targets) {
  if (preds.size() != targets.size())
    throw Error("shape-mismatch", "prediction/target scene counts differ");
  std::vector<double> scores, positives;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (const auto& [level, pred] : preds[s]) {
      const Tensor4& target = targets[s].at(level);
      if (!pred.same_shape(target)) throw Error("shape-mismatch", "heatmap shapes differ");
      scores.insert(scores.end(), pred.data.begin(), pred.data.end());
      positives.insert(positives.end(), target.data.begin(), target.data.end());
    }
  }
  return average_precision(scores, positives);
}

namespace {

int backbone_width(const TaskConfig& cfg, LevelId level) {
  const int cap = 4 * cfg.backbone_base_width;
  int w = cfg.backbone_base_width;
  for (LevelId l = 2; l <= level; ++l) w = std::min(2 * w, cap);
  return w;
}

LevelId backbone_top(const TaskConfig& cfg) {
  return cfg.backbone_top_level < 0 ? cfg.levels.back() : cfg.backbone_top_level;
}

}  // namespace

PyramidInputSpec input_spec_for(const TaskConfig& cfg) {
  PyramidInputSpec spec;
  spec.image_side = cfg.image_side;
  spec.backbone_top_level = backbone_top(cfg);
  for (LevelId level : cfg.levels)
    spec.level_widths.emplace_back(level,
                                   backbone_width(cfg, std::min(level, spec.backbone_top_level)));
  return spec;
}

namespace {

// conv3x3 -> relu -> pool2 per level; levels past the backbone top are
// synthesized by max pooling the top feature (the stride 2/4 pooling rule).
std::map<LevelId, int> backbone_forward(Tape& tape, ExecState& st, const TaskConfig& cfg,
                                        int image, Rng& init_rng) {
  const LevelId top = backbone_top(cfg);
  std::map<LevelId, int> features;
  int cur = image;
  int cur_width = 1;
  int top_feat = -1;
  for (LevelId level = 1; level <= top; ++level) {
    const int w = backbone_width(cfg, level);
    const std::string name = "backbone.l" + std::to_string(level) + ".w";
    st.params.get_or_create(name, w, cur_width, 3, 3, [&](Tensor4& t) {
      init_conv(t, init_rng, 9 * cur_width);
    });
    cur = tape.conv3x3(cur, st.param_var(name));
    cur = tape.relu(cur);
    cur = tape.maxpool_down(cur, 2);
    cur_width = w;
    if (std::find(cfg.levels.begin(), cfg.levels.end(), level) != cfg.levels.end())
      features[level] = cur;
    if (level == top) top_feat = cur;
  }
  for (LevelId level : cfg.levels)
    if (level > top) features[level] = tape.maxpool_down(top_feat, 1 << (level - top));
  return features;
}

int head_forward(Tape& tape, ExecState& st, int stage, LevelId level, int x, int feature_dim,
                 Rng& init_rng) {
  const std::string base =
      "head.s" + std::to_string(stage) + ".l" + std::to_string(level);
  st.params.get_or_create(base + ".w", 1, feature_dim, 1, 1,
                          [&](Tensor4& t) { init_conv(t, init_rng, feature_dim); });
  st.params.get_or_create(base + ".b", 1, 1, 1, 1, [](Tensor4& t) {
    t.data[0] = -2.944;  // prior logit for sparse positives
  });
  return tape.bias_add(tape.conv1x1(x, st.param_var(base + ".w")), st.param_var(base + ".b"));
}

Tensor4 batch_images(const std::vector<SyntheticScene>& scenes, const std::vector<int>& idx) {
  const Tensor4& first = scenes[static_cast<std::size_t>(idx[0])].image;
  Tensor4 out(static_cast<int>(idx.size()), 1, first.h, first.w);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Tensor4& img = scenes[static_cast<std::size_t>(idx[k])].image;
    std::copy(img.data.begin(), img.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(k * img.numel()));
  }
  return out;
}

Tensor4 batch_targets(const std::vector<SyntheticScene>& scenes, const std::vector<int>& idx,
                      LevelId level) {
  const Tensor4& first = scenes[static_cast<std::size_t>(idx[0])].targets.at(level);
  Tensor4 out(static_cast<int>(idx.size()), 1, first.h, first.w);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const Tensor4& t = scenes[static_cast<std::size_t>(idx[k])].targets.at(level);
    std::copy(t.data.begin(), t.data.end(),
              out.data.begin() + static_cast<std::ptrdiff_t>(k * t.numel()));
  }
  return out;
}

// One full forward to the losses or predictions for a batch of scenes.
struct BatchRun {
  int loss = -1;                                   // scalar var (when training)
  std::vector<int> stage_losses;                   // scalar var per stage
  std::vector<std::map<LevelId, int>> head_vars;   // per supervised stage
};

BatchRun model_forward(ProxyModel& model, const std::vector<SyntheticScene>& scenes,
                       const std::vector<int>& idx, bool with_loss, int exit_stage) {
  Tape& tape = model.state.fresh_tape();
  Rng init_rng(model.param_seed);
  const int image = tape.leaf(batch_images(scenes, idx));
  auto features = backbone_forward(tape, model.state, model.cfg, image, init_rng);
  const int last_stage = exit_stage < 0 ? model.stack_n : exit_stage;
  auto stages = graph_forward_all(tape, model.state, model.graph, features, init_rng, last_stage);

  std::vector<int> supervised;
  if (model.deep_supervision) {
    for (int s = 1; s <= last_stage; ++s) supervised.push_back(s);
  } else {
    supervised.push_back(last_stage);
  }

  BatchRun run;
  for (int s : supervised) {
    std::map<LevelId, int> heads;
    std::vector<int> level_losses;
    for (const auto& [level, var] : stages[static_cast<std::size_t>(s - 1)]) {
      const int logits =
          head_forward(tape, model.state, s, level, var, model.cfg.feature_dim, init_rng);
      heads[level] = logits;
      if (with_loss)
        level_losses.push_back(tape.focal_loss(logits, batch_targets(scenes, idx, level),
                                               model.cfg.focal_alpha, model.cfg.focal_gamma));
    }
    run.head_vars.push_back(std::move(heads));
    if (with_loss)
      run.stage_losses.push_back(
          tape.scale(tape.accumulate(level_losses), 1.0 / static_cast<double>(level_losses.size())));
  }
  if (with_loss)
    run.loss = tape.scale(tape.accumulate(run.stage_losses),
                          1.0 / static_cast<double>(run.stage_losses.size()));
  return run;
}

}  // namespace

ProxyModel build_model(const Genome& genome, const TaskConfig& cfg, int stack_n,
                       bool deep_supervision, std::uint64_t seed) {
  cfg.check();
  ProxyModel model;
  model.cfg = cfg;
  model.genome = genome;
  model.genome.space.feature_dim = cfg.feature_dim;
  model.stack_n = stack_n;
  model.deep_supervision = deep_supervision;
  model.input_spec = input_spec_for(cfg);
  model.graph = stack(model.genome, stack_n, model.input_spec);
  model.param_seed = derive_seed(seed, {0x9a11});

  // One throwaway forward pins parameter creation order (and therefore the
  // init draws and checkpoint layout) regardless of how the model is used.
  std::vector<SyntheticScene> probe(1);
  probe[0].image = Tensor4::zeros(1, 1, cfg.image_side, cfg.image_side);
  for (LevelId level : cfg.levels)
    probe[0].targets[level] = Tensor4::zeros(1, 1, cfg.image_side >> level, cfg.image_side >> level);
  model.state.mode = Mode::Eval;
  (void)model_forward(model, probe, {0}, false, -1);
  model.state.tape.reset();
  model.state.counter.units = 0;
  return model;
}

void train_model(ProxyModel& model, const Dataset& data) {
  const TaskConfig& cfg = model.cfg;
  if (data.train.empty()) throw Error("invalid-task-config", "empty training set");
  Rng order_rng(derive_seed(model.param_seed, {0xba7c4}));
  std::vector<int> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order);
  std::size_t cursor = 0;

  const int decay_step = static_cast<int>(cfg.lr_decay_at * cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx;
    for (int k = 0; k < cfg.batch_size; ++k) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    const double lr = step >= decay_step ? cfg.lr * cfg.lr_decay_factor : cfg.lr;
    model.state.mode = Mode::Train;
    model.state.params.zero_grads();
    BatchRun run = model_forward(model, data.train, idx, true, -1);
    std::vector<double> stage_values;
    for (int var : run.stage_losses)
      stage_values.push_back(model.state.tape->value(var).data[0]);
    model.stage_loss_history.push_back(std::move(stage_values));
    model.state.tape->backward(run.loss);
    collect_param_grads(model.state);
    sgd_step(model.state, lr, cfg.momentum, cfg.weight_decay);
    model.state.tape.reset();
  }
}

std::vector<std::map<LevelId, Tensor4>> predict(ProxyModel& model,
                                                const std::vector<SyntheticScene>& scenes,
                                                int exit_stage) {
  model.state.mode = Mode::Eval;
  std::vector<std::map<LevelId, Tensor4>> out(scenes.size());
  const int bs = model.cfg.batch_size;
  for (std::size_t begin = 0; begin < scenes.size(); begin += static_cast<std::size_t>(bs)) {
    std::vector<int> idx;
    for (std::size_t i = begin; i < std::min(begin + static_cast<std::size_t>(bs), scenes.size()); ++i)
      idx.push_back(static_cast<int>(i));
    BatchRun run = model_forward(model, scenes, idx, false, exit_stage);
    const auto& heads = run.head_vars.back();  // exit-stage head
    for (const auto& [level, var] : heads) {
      const Tensor4& batch = model.state.tape->value(var);
      for (std::size_t k = 0; k < idx.size(); ++k) {
        Tensor4 single(1, 1, batch.h, batch.w);
        std::copy(batch.data.begin() + static_cast<std::ptrdiff_t>(k * single.numel()),
                  batch.data.begin() + static_cast<std::ptrdiff_t>((k + 1) * single.numel()),
                  single.data.begin());
        out[static_cast<std::size_t>(idx[static_cast<std::size_t>(k)])][level] = std::move(single);
      }
    }
    model.state.tape.reset();
  }
  return out;
}

RewardRecord evaluate_reward(const Genome& genome, const TaskConfig& cfg, int stack_n,
                             std::uint64_t seed) {
  Dataset data = generate_dataset(cfg);
  ProxyModel model = build_model(genome, cfg, stack_n, false, seed);
  train_model(model, data);
  auto preds = predict(model, data.val);
  std::vector<std::map<LevelId, Tensor4>> targets;
  for (const SyntheticScene& scene : data.val) targets.push_back(scene.targets);
  RewardRecord record;
  record.genome_hash = genome_hash(genome);
  record.reward = evaluate_ap(preds, targets);
  record.steps = cfg.steps;
  record.seed = seed;
  return record;
}

ProxyModel train_deeply_supervised(const Genome& genome, const TaskConfig& cfg, int stack_n,
                                   std::uint64_t seed) {
  Dataset data = generate_dataset(cfg);
  ProxyModel model = build_model(genome, cfg, stack_n, true, seed);
  train_model(model, data);
  return model;
}

EarlyExitResult evaluate_early_exit(ProxyModel& model, int stage,
                                    const std::vector<SyntheticScene>& val) {
  if (stage < 1 || stage > model.stack_n)
    throw Error("stage-out-of-range",
                "stage " + std::to_string(stage) + " of " + std::to_string(model.stack_n));
  if (!model.deep_supervision && stage != model.stack_n)
    throw Error("stage-out-of-range", "model has no head before the final stage");
  model.state.counter.units = 0;
  auto preds = predict(model, val, stage);
  EarlyExitResult result;
  result.macs = model.state.counter.units;
  std::vector<std::map<LevelId, Tensor4>> targets;
  for (const SyntheticScene& scene : val) targets.push_back(scene.targets);
  result.ap = evaluate_ap(preds, targets);
  return result;
}

Genome degenerate_coarse_genome(const SpaceConfig& space) {
  space.check();
  const int n = space.num_inputs();
  if (n < 2) throw Error("degenerate-space", "need two inputs");
  Genome genome;
  genome.space = space;
  genome.output_order = space.output_levels;

  const auto allowed = space.allowed_intermediate_levels();
  const LevelId coarse_level = allowed.empty() ? space.output_levels.back() : allowed.back();
  const int coarse_idx = n - 1;   // input_levels are sorted, last is coarsest
  const int second_idx = n - 2;

  for (int i = 0; i < space.num_cells(); ++i) {
    CellSpec cell;
    if (i == 0) {
      cell.input_a = coarse_idx;
      cell.input_b = second_idx;
    } else {
      cell.input_a = n + i - 1;  // previous product
      cell.input_b = coarse_idx;
    }
    cell.op = space.ops.front();
    cell.out_level = i < space.num_intermediate_cells
                         ? coarse_level
                         : genome.output_order[static_cast<std::size_t>(i - space.num_intermediate_cells)];
    genome.cells.push_back(cell);
  }
  return genome;
}

}  // namespace pyrsearch
