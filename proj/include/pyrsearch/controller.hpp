#pragma once

#include <map>
#include <string>
#include <vector>

#include "pyrsearch/search_space.hpp"

namespace pyrsearch {

struct PpoConfig {
  int hidden = 48;
  int embed = 24;
  double clip_epsilon = 0.2;
  int epochs_per_batch = 3;
  int minibatch = 0;  // 0 = whole batch
  double entropy_bonus = 0.01;
  bool entropy_anneal = false;  // scale the bonus linearly to zero over the run
  double learning_rate = 0.02;
  double baseline_decay = 0.95;
};

enum class DecisionType { IndexA, IndexB, Level, Op };

/// Step typing and vocabulary sizes implied by a space: every cell emits
/// four decisions (index-a, index-b, level, op); output-cell level decisions
/// are masked to the still-unassigned output levels, which makes the
/// output_order permutation part of the policy.
struct DecisionLayout {
  SpaceConfig space;
  int index_vocab = 0;
  std::vector<LevelId> level_vocab;
  std::vector<BinaryOpKind> op_vocab;

  explicit DecisionLayout(SpaceConfig space);
  int total_steps() const { return 4 * space.num_cells(); }
  int cell_of(int step) const { return step / 4; }
  DecisionType type_of(int step) const;
  int vocab_size(DecisionType type) const;
  /// Legal token ids at `step` given the tokens sampled so far.
  std::vector<int> legal_tokens(int step, const std::vector<int>& prefix) const;
  Genome decode(const std::vector<int>& tokens) const;
};

struct SampleTrace {
  std::vector<int> tokens;
  std::vector<double> logprobs;  // under the sampling-time policy
  Genome genome;
};

/// One-layer tanh RNN with per-decision-type embeddings and softmax heads,
/// learned positional embeddings, and hard masking to the legal token set.
/// Trained with the PPO clipped surrogate plus an entropy bonus, Adam.
class Controller {
 public:
  Controller(const SpaceConfig& space, PpoConfig cfg, std::uint64_t seed);

  const DecisionLayout& layout() const { return layout_; }
  const PpoConfig& config() const { return cfg_; }

  SampleTrace sample(Rng& rng);

  /// Per-step probability vectors (full vocab, zeros at illegal tokens) for
  /// a teacher-forced pass over the trace's tokens.
  std::vector<std::vector<double>> trace_probs(const SampleTrace& trace);

  /// One PPO update (epochs x minibatches) over a batch of traces with
  /// given advantages. entropy_scale multiplies the configured bonus (the
  /// driver anneals it when entropy_anneal is set). Returns the mean loss
  /// per epoch.
  std::vector<double> ppo_update(const std::vector<SampleTrace>& batch,
                                 const std::vector<double>& advantages, Rng& rng,
                                 double entropy_scale = 1.0);

  double baseline() const { return baseline_; }
  bool baseline_ready() const { return baseline_init_; }
  void update_baseline(double batch_mean);

 private:
  struct Mat {
    int rows = 0, cols = 0;
    std::vector<double> v, g, m, vm;  // value, grad, adam moments
    void init(int r, int c) {
      rows = r;
      cols = c;
      v.assign(static_cast<std::size_t>(r) * c, 0.0);
      g = m = vm = v;
    }
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
    double& gat(int r, int c) { return g[static_cast<std::size_t>(r) * cols + c]; }
  };

  struct StepCache {
    std::vector<double> x, h, p;  // input, hidden, masked probs over vocab
    std::vector<int> legal;
    double logp = 0.0;
  };

  std::vector<StepCache> run_trace(const std::vector<int>& tokens);
  void zero_grads();
  void adam_step();
  Mat& head(DecisionType type);
  Mat& head_bias(DecisionType type);
  Mat& embedding(DecisionType type);

  DecisionLayout layout_;
  PpoConfig cfg_;
  Mat emb_index_, emb_level_, emb_op_, emb_start_, pos_;
  Mat wx_, wh_, bh_;
  Mat head_a_, head_b_, head_level_, head_op_;
  Mat bias_a_, bias_b_, bias_level_, bias_op_;
  std::vector<Mat*> all_params_;
  double baseline_ = 0.0;
  bool baseline_init_ = false;
  int adam_t_ = 0;
};

}  // namespace pyrsearch
