#pragma once

#include <map>
#include <memory>
#include <string>

#include "pyrsearch/graph_compiler.hpp"
#include "pyrsearch/ops.hpp"

namespace pyrsearch {

struct Param {
  std::string name;
  Tensor4 value;
  Tensor4 grad;
  Tensor4 velocity;
};

/// Named trainable parameters in creation order. Creation order is
/// deterministic, which fixes checkpoint layout and SGD iteration order.
class ParamStore {
 public:
  Param& get_or_create(const std::string& name, int n, int c, int h, int w,
                       const std::function<void(Tensor4&)>& init);
  Param* find(const std::string& name);
  std::vector<Param>& all() { return params_; }
  const std::vector<Param>& all() const { return params_; }
  void zero_grads();
  std::uint64_t scalar_count() const;

 private:
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
};

enum class Mode { Train, Eval };

/// Everything one model instance owns: parameters, batch-norm running
/// statistics, the instrumented op counter, and the tape of the most recent
/// forward pass (gradients live on it until collected).
struct ExecState {
  ParamStore params;
  std::map<std::string, BnStats> bn;
  OpCounter counter;
  Mode mode = Mode::Train;
  std::unique_ptr<Tape> tape;
  std::map<std::string, int> live_param_vars;  // param name -> leaf var on tape

  Tape& fresh_tape() {
    tape = std::make_unique<Tape>(&counter);
    live_param_vars.clear();
    return *tape;
  }

  /// Pushes the named parameter as a tape leaf (once per tape).
  int param_var(const std::string& name);
};

/// He-style fan-in init for conv weights; scale 1 / shift 0 for batch norm.
void init_conv(Tensor4& w, Rng& rng, int fan_in);

BnStats& bn_stats(ExecState& st, const std::string& name, int channels);

/// Pushes one conv block (ReLU -> conv -> BN for merge blocks, conv -> BN
/// for 1x1 projections) onto the tape. Parameters are created on first use
/// under `name` with the given init rng.
int conv_block_forward(Tape& tape, ExecState& st, const std::string& name, int x,
                       ConvBlockKind kind, ConvMode mode, int in_channels, int out_channels,
                       Rng& init_rng);

/// Runs a compiled graph against per-level input variables already on the
/// tape. Returns the OutputSum variable per level of stage `max_stage`
/// (-1 = final stage). Creates graph parameters on first use.
std::map<LevelId, int> graph_forward(Tape& tape, ExecState& st, const FeatureGraph& graph,
                                     const std::map<LevelId, int>& inputs, Rng& init_rng,
                                     int max_stage = -1);

/// As graph_forward, but returns the output variables of every executed
/// stage (index 0 = stage 1); used for deep supervision.
std::vector<std::map<LevelId, int>> graph_forward_all(Tape& tape, ExecState& st,
                                                      const FeatureGraph& graph,
                                                      const std::map<LevelId, int>& inputs,
                                                      Rng& init_rng, int max_stage = -1);

/// Convenience wrapper: fresh tape, leaf inputs, full forward, returns
/// output tensors by level. Mode comes from st.mode.
std::map<LevelId, Tensor4> forward(const FeatureGraph& graph,
                                   const std::map<LevelId, Tensor4>& inputs, ExecState& st,
                                   std::uint64_t param_seed);

/// Copies tape gradients into Param::grad for every parameter leaf recorded
/// by the last forward. Throws Error("no-forward-pass") without one.
void collect_param_grads(ExecState& st);

/// Classical momentum update over all parameters:
///   v <- momentum*v + g + weight_decay*w;  w <- w - lr*v
void sgd_step(ExecState& st, double lr, double momentum = 0.9, double weight_decay = 1e-4);

/// Central-difference gradient check for one op; returns the max relative
/// error over all inputs/parameters. Known names: conv3x3, conv1x1,
/// depthwise3x3, bias_add, batchnorm_train, batchnorm_eval, relu, sum,
/// accumulate, nearest_upsample, maxpool_down, global_pool_attention,
/// focal_loss, conv_block_full, conv_block_dwsep.
double grad_check(const std::string& opname, std::uint64_t seed);

/// Names every op grad_check accepts; the emitted-op gradient suite.
std::vector<std::string> grad_check_ops();

/// Flat binary blob + JSON manifest (name, shape, offset), version 1.
/// Batch-norm running stats ride along as non-trainable entries.
void save_checkpoint(const ExecState& st, const std::string& path_prefix);
void load_checkpoint(ExecState& st, const std::string& path_prefix);

}  // namespace pyrsearch
