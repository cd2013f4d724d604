#pragma once

#include <map>
#include <string>
#include <vector>

#include "pyrsearch/executor.hpp"

namespace pyrsearch {

/// Synthetic multiscale detection task: squares of band-assigned sizes on a
/// noise background, one presence heatmap per pyramid level.
struct TaskConfig {
  int image_side = 64;
  std::vector<LevelId> levels = {2, 3, 4};
  int min_objects = 1;
  int max_objects = 3;
  std::vector<int> band_edges = {3, 6, 12, 24};  // one [lo,hi) band per level
  int train_scenes = 48;
  int val_scenes = 16;
  std::uint64_t seed = 0;
  int steps = 200;
  int batch_size = 4;
  double lr = 0.04;
  double lr_decay_factor = 0.1;
  double lr_decay_at = 0.8;  // fraction of the step budget
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double focal_alpha = 0.25;
  double focal_gamma = 1.5;
  int backbone_base_width = 8;
  LevelId backbone_top_level = -1;  // -1: backbone reaches the coarsest level
  double noise_sigma = 0.25;
  double contrast_min = 0.6;
  double contrast_max = 1.0;
  int feature_dim = 16;

  void check() const;
};

/// Named task presets: "default" (64px, levels 2..4), "fivelevel" (128px,
/// levels 3..7, backbone to level 5 with pooled 6/7), "tiny" (32px, levels
/// 2..3, quick tests).
TaskConfig task_preset(const std::string& name);

std::string task_to_json(const TaskConfig& cfg);
TaskConfig task_from_json(const std::string& text);

struct ObjectSpec {
  int x = 0, y = 0, side = 0;  // top-left corner and size in pixels
  LevelId level = 0;
};

struct SyntheticScene {
  Tensor4 image;                        // [1,1,S,S]
  std::map<LevelId, Tensor4> targets;   // [1,1,S>>L,S>>L] presence maps
  std::vector<ObjectSpec> objects;
};

struct Dataset {
  std::vector<SyntheticScene> train;
  std::vector<SyntheticScene> val;
};

Dataset generate_dataset(const TaskConfig& cfg);

/// Area under the pooled precision-recall curve, trapezoidal over score
/// thresholds (tie groups collapse to one threshold, so any strictly
/// monotone score transform leaves AP unchanged). No positives -> 0.
double average_precision(const std::vector<double>& scores, const std::vector<double>& positives);

double evaluate_ap(const std::vector<std::map<LevelId, Tensor4>>& preds,
                   const std::vector<std::map<LevelId, Tensor4>>& targets);

struct RewardRecord {
  std::string genome_hash;
  double reward = 0.0;
  int steps = 0;
  std::uint64_t seed = 0;
};

/// Backbone widths and input geometry implied by a task config.
PyramidInputSpec input_spec_for(const TaskConfig& cfg);

/// A compiled genome with backbone, pyramid and per-stage prediction heads.
struct ProxyModel {
  TaskConfig cfg;
  Genome genome;
  int stack_n = 1;
  bool deep_supervision = false;
  PyramidInputSpec input_spec;
  FeatureGraph graph;
  ExecState state;
  std::uint64_t param_seed = 0;
  std::vector<std::vector<double>> stage_loss_history;  // per step, per stage
};

ProxyModel build_model(const Genome& genome, const TaskConfig& cfg, int stack_n,
                       bool deep_supervision, std::uint64_t seed);

/// cfg.steps of momentum SGD with the single-decay schedule. Loss is the
/// mean over supervised stages of the per-level mean focal loss.
void train_model(ProxyModel& model, const Dataset& data);

/// Validation logits per scene per level at the given exit stage.
std::vector<std::map<LevelId, Tensor4>> predict(ProxyModel& model,
                                                const std::vector<SyntheticScene>& scenes,
                                                int exit_stage = -1);

/// Trains on the config's synthetic data and scores held-out AP as reward.
RewardRecord evaluate_reward(const Genome& genome, const TaskConfig& cfg, int stack_n,
                             std::uint64_t seed);

/// Same training budget, but heads and losses attached after every stage.
ProxyModel train_deeply_supervised(const Genome& genome, const TaskConfig& cfg, int stack_n,
                                   std::uint64_t seed);

struct EarlyExitResult {
  double ap = 0.0;
  std::uint64_t macs = 0;  // forward units over the whole validation set
};

/// Runs stages 1..k plus the stage-k head. Requires per-stage heads unless
/// k is the final stage. Throws Error("stage-out-of-range") otherwise.
EarlyExitResult evaluate_early_exit(ProxyModel& model, int stage,
                                    const std::vector<SyntheticScene>& val);

/// Adversarial reference genome: every feature is routed through the
/// coarsest resolution before being upsampled to the outputs.
Genome degenerate_coarse_genome(const SpaceConfig& space);

}  // namespace pyrsearch
