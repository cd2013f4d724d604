#include "pyrsearch/executor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

namespace pyrsearch {

using nlohmann::json;

Param& ParamStore::get_or_create(const std::string& name, int n, int c, int h, int w,
                                 const std::function<void(Tensor4&)>& init) {
  auto it = index_.find(name);
  if (it != index_.end()) return params_[it->second];
  Param param;
  param.name = name;
  param.value = Tensor4::zeros(n, c, h, w);
  param.grad = Tensor4::zeros(n, c, h, w);
  param.velocity = Tensor4::zeros(n, c, h, w);
  init(param.value);
  params_.push_back(std::move(param));
  index_[name] = params_.size() - 1;
  return params_.back();
}

Param* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

void ParamStore::zero_grads() {
  for (Param& p : params_)
    std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
}

std::uint64_t ParamStore::scalar_count() const {
  std::uint64_t total = 0;
  for (const Param& p : params_) total += p.value.numel();
  return total;
}

int ExecState::param_var(const std::string& name) {
  auto it = live_param_vars.find(name);
  if (it != live_param_vars.end()) return it->second;
  Param* param = params.find(name);
  if (!param) throw Error("unknown-parameter", name);
  const int id = tape->leaf(param->value, /*needs_grad=*/true);
  live_param_vars[name] = id;
  return id;
}

void init_conv(Tensor4& w, Rng& rng, int fan_in) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : w.data) v = rng.normal(0.0, stddev);
}

BnStats& bn_stats(ExecState& st, const std::string& name, int channels) {
  BnStats& stats = st.bn[name];
  if (stats.mean.empty()) {
    stats.mean.assign(static_cast<std::size_t>(channels), 0.0);
    stats.var.assign(static_cast<std::size_t>(channels), 1.0);
  }
  return stats;
}

int conv_block_forward(Tape& tape, ExecState& st, const std::string& name, int x,
                       ConvBlockKind kind, ConvMode mode, int in_channels, int out_channels,
                       Rng& init_rng) {
  const bool train = st.mode == Mode::Train;
  int cur = x;
  if (kind == ConvBlockKind::Projection1x1) {
    st.params.get_or_create(name + ".w", out_channels, in_channels, 1, 1,
                            [&](Tensor4& w) { init_conv(w, init_rng, in_channels); });
    cur = tape.conv1x1(cur, st.param_var(name + ".w"));
  } else if (mode == ConvMode::Full) {
    st.params.get_or_create(name + ".w", out_channels, in_channels, 3, 3,
                            [&](Tensor4& w) { init_conv(w, init_rng, 9 * in_channels); });
    cur = tape.relu(cur);
    cur = tape.conv3x3(cur, st.param_var(name + ".w"));
  } else {
    st.params.get_or_create(name + ".dw", in_channels, 1, 3, 3,
                            [&](Tensor4& w) { init_conv(w, init_rng, 9); });
    st.params.get_or_create(name + ".pw", out_channels, in_channels, 1, 1,
                            [&](Tensor4& w) { init_conv(w, init_rng, in_channels); });
    cur = tape.relu(cur);
    cur = tape.depthwise3x3(cur, st.param_var(name + ".dw"));
    cur = tape.conv1x1(cur, st.param_var(name + ".pw"));
  }
  st.params.get_or_create(name + ".gamma", 1, out_channels, 1, 1, [](Tensor4& w) {
    std::fill(w.data.begin(), w.data.end(), 1.0);
  });
  st.params.get_or_create(name + ".beta", 1, out_channels, 1, 1, [](Tensor4&) {});
  return tape.batchnorm(cur, st.param_var(name + ".gamma"), st.param_var(name + ".beta"),
                        bn_stats(st, name + ".bn", out_channels), train);
}

std::map<LevelId, int> graph_forward(Tape& tape, ExecState& st, const FeatureGraph& graph,
                                     const std::map<LevelId, int>& inputs, Rng& init_rng,
                                     int max_stage) {
  return graph_forward_all(tape, st, graph, inputs, init_rng, max_stage).back();
}

std::vector<std::map<LevelId, int>> graph_forward_all(Tape& tape, ExecState& st,
                                                      const FeatureGraph& graph,
                                                      const std::map<LevelId, int>& inputs,
                                                      Rng& init_rng, int max_stage) {
  const int last_stage = max_stage < 0 ? graph.stack_count : max_stage;
  if (last_stage < 1 || last_stage > graph.stack_count)
    throw Error("stage-out-of-range", "requested stage " + std::to_string(last_stage) +
                                          " of " + std::to_string(graph.stack_count));
  std::vector<int> var_of(graph.nodes.size(), -1);
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const GraphNode& node = graph.nodes[i];
    if (node.stage > last_stage) continue;
    const std::string name = "node" + std::to_string(i);
    switch (node.kind) {
      case NodeKind::Input: {
        auto it = inputs.find(node.level);
        if (it == inputs.end())
          throw Error("shape-mismatch", "missing input for level " + std::to_string(node.level));
        var_of[i] = it->second;
        const Tensor4& v = tape.value(var_of[i]);
        if (v.c != node.channels || v.h != node.height || v.w != node.width)
          throw Error("shape-mismatch", "input tensor does not match level " +
                                            std::to_string(node.level) + " shape");
        break;
      }
      case NodeKind::Resample: {
        const int src = var_of[static_cast<std::size_t>(node.preds[0])];
        var_of[i] = node.resample_mode == ResampleMode::NearestUpsample
                        ? tape.nearest_upsample(src, node.resample_factor)
                        : tape.maxpool_down(src, node.resample_factor);
        break;
      }
      case NodeKind::Merge: {
        const int a = var_of[static_cast<std::size_t>(node.preds[0])];
        const int b = var_of[static_cast<std::size_t>(node.preds[1])];
        var_of[i] = node.merge_op == BinaryOpKind::Sum ? tape.add(a, b)
                                                       : tape.global_pool_attention(a, b);
        break;
      }
      case NodeKind::ConvBlock:
        var_of[i] = conv_block_forward(tape, st, name,
                                       var_of[static_cast<std::size_t>(node.preds[0])],
                                       node.conv_kind, node.conv_mode, node.in_channels,
                                       node.channels, init_rng);
        break;
      case NodeKind::OutputSum: {
        std::vector<int> parts;
        for (int p : node.preds) parts.push_back(var_of[static_cast<std::size_t>(p)]);
        var_of[i] = tape.accumulate(parts);
        break;
      }
    }
  }
  std::vector<std::map<LevelId, int>> out;
  for (int s = 1; s <= last_stage; ++s) {
    std::map<LevelId, int> stage_vars;
    for (const auto& [level, id] : graph.stage_outputs[static_cast<std::size_t>(s - 1)])
      stage_vars[level] = var_of[static_cast<std::size_t>(id)];
    out.push_back(std::move(stage_vars));
  }
  return out;
}

std::map<LevelId, Tensor4> forward(const FeatureGraph& graph,
                                   const std::map<LevelId, Tensor4>& inputs, ExecState& st,
                                   std::uint64_t param_seed) {
  Tape& tape = st.fresh_tape();
  std::map<LevelId, int> input_vars;
  for (const auto& [level, tensor] : inputs) input_vars[level] = tape.leaf(tensor);
  Rng init_rng(param_seed);
  auto out_vars = graph_forward(tape, st, graph, input_vars, init_rng);
  std::map<LevelId, Tensor4> out;
  for (const auto& [level, id] : out_vars) out[level] = tape.value(id);
  return out;
}

void collect_param_grads(ExecState& st) {
  if (!st.tape) throw Error("no-forward-pass", "no tape to collect gradients from");
  for (const auto& [name, var] : st.live_param_vars) {
    Param* param = st.params.find(name);
    try {
      const Tensor4& g = st.tape->grad(var);
      for (std::size_t i = 0; i < g.numel(); ++i) param->grad.data[i] += g.data[i];
    } catch (const Error&) {
      // No gradient flowed to this parameter on this pass; leave it zero.
    }
  }
}

void sgd_step(ExecState& st, double lr, double momentum, double weight_decay) {
  for (Param& p : st.params.all()) {
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad.data[i] + weight_decay * p.value.data[i];
      p.velocity.data[i] = momentum * p.velocity.data[i] + g;
      p.value.data[i] -= lr * p.velocity.data[i];
    }
  }
}

namespace {

Tensor4 jittered_normal(Rng& rng, int n, int c, int h, int w, double keep_away = 0.0) {
  Tensor4 t(n, c, h, w);
  for (std::size_t i = 0; i < t.numel(); ++i) {
    double v = rng.normal();
    if (keep_away > 0.0 && std::abs(v) < keep_away) v = v < 0 ? v - keep_away : v + keep_away;
    // Distinct offsets kill max ties.
    t.data[i] = v + 1e-4 * static_cast<double>(i % 97);
  }
  return t;
}

struct CheckScenario {
  std::vector<Tensor4> inputs;
  std::function<double(const std::vector<Tensor4>&, std::vector<Tensor4>*)> run;
  // run() returns the scalar loss; when the second arg is non-null it is
  // filled with analytic gradients per input.
};

double max_rel_error(const CheckScenario& scenario) {
  std::vector<Tensor4> analytic;
  scenario.run(scenario.inputs, &analytic);
  const double eps = 1e-5;
  double worst = 0.0;
  std::vector<Tensor4> probe = scenario.inputs;
  for (std::size_t t = 0; t < probe.size(); ++t) {
    for (std::size_t i = 0; i < probe[t].numel(); ++i) {
      const double keep = probe[t].data[i];
      probe[t].data[i] = keep + eps;
      const double up = scenario.run(probe, nullptr);
      probe[t].data[i] = keep - eps;
      const double down = scenario.run(probe, nullptr);
      probe[t].data[i] = keep;
      const double numeric = (up - down) / (2.0 * eps);
      const double exact = analytic[t].data[i];
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-2});
      worst = std::max(worst, std::abs(exact - numeric) / denom);
    }
  }
  return worst;
}

// Builds the loss var for a given op over leaf ids, so both the analytic and
// the numeric paths share one code path.
CheckScenario make_scenario(const std::string& opname, std::uint64_t seed) {
  Rng rng(seed);
  CheckScenario s;
  auto weights = std::make_shared<Tensor4>();

  auto finish = [weights](Tape& tape, int out) {
    return tape.weighted_sum(out, *weights);
  };
  auto set_weights = [weights](Rng& r, int n, int c, int h, int w) {
    *weights = jittered_normal(r, n, c, h, w);
  };

  if (opname == "conv3x3" || opname == "conv_block_full") {
    s.inputs = {jittered_normal(rng, 2, 3, 4, 4, 0.05), jittered_normal(rng, 4, 3, 3, 3)};
    if (opname == "conv_block_full") {
      s.inputs.push_back(jittered_normal(rng, 1, 4, 1, 1));  // gamma
      s.inputs.push_back(jittered_normal(rng, 1, 4, 1, 1));  // beta
    }
    set_weights(rng, 2, 4, 4, 4);
    const bool block = opname == "conv_block_full";
    s.run = [finish, block](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      std::vector<int> ids;
      for (const Tensor4& t : in) ids.push_back(tape.leaf(t, true));
      int cur = ids[0];
      if (block) cur = tape.relu(cur);
      cur = tape.conv3x3(cur, ids[1]);
      if (block) {
        BnStats stats;
        stats.mean.assign(4, 0.0);
        stats.var.assign(4, 1.0);
        cur = tape.batchnorm(cur, ids[2], ids[3], stats, true);
      }
      const int loss = finish(tape, cur);
      if (grads) {
        tape.backward(loss);
        for (int id : ids) grads->push_back(tape.grad(id));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "conv1x1") {
    s.inputs = {jittered_normal(rng, 2, 3, 4, 4), jittered_normal(rng, 5, 3, 1, 1)};
    set_weights(rng, 2, 5, 4, 4);
    s.run = [finish](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      const int x = tape.leaf(in[0], true), w = tape.leaf(in[1], true);
      const int loss = finish(tape, tape.conv1x1(x, w));
      if (grads) {
        tape.backward(loss);
        grads->push_back(tape.grad(x));
        grads->push_back(tape.grad(w));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "depthwise3x3" || opname == "conv_block_dwsep") {
    s.inputs = {jittered_normal(rng, 2, 3, 5, 5, 0.05), jittered_normal(rng, 3, 1, 3, 3)};
    const bool block = opname == "conv_block_dwsep";
    if (block) {
      s.inputs.push_back(jittered_normal(rng, 4, 3, 1, 1));  // pointwise
      s.inputs.push_back(jittered_normal(rng, 1, 4, 1, 1));  // gamma
      s.inputs.push_back(jittered_normal(rng, 1, 4, 1, 1));  // beta
      set_weights(rng, 2, 4, 5, 5);
    } else {
      set_weights(rng, 2, 3, 5, 5);
    }
    s.run = [finish, block](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      std::vector<int> ids;
      for (const Tensor4& t : in) ids.push_back(tape.leaf(t, true));
      int cur = ids[0];
      if (block) cur = tape.relu(cur);
      cur = tape.depthwise3x3(cur, ids[1]);
      if (block) {
        cur = tape.conv1x1(cur, ids[2]);
        BnStats stats;
        stats.mean.assign(4, 0.0);
        stats.var.assign(4, 1.0);
        cur = tape.batchnorm(cur, ids[3], ids[4], stats, true);
      }
      const int loss = finish(tape, cur);
      if (grads) {
        tape.backward(loss);
        for (int id : ids) grads->push_back(tape.grad(id));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "bias_add") {
    s.inputs = {jittered_normal(rng, 2, 3, 4, 4), jittered_normal(rng, 1, 3, 1, 1)};
    set_weights(rng, 2, 3, 4, 4);
    s.run = [finish](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      const int x = tape.leaf(in[0], true), b = tape.leaf(in[1], true);
      const int loss = finish(tape, tape.bias_add(x, b));
      if (grads) {
        tape.backward(loss);
        grads->push_back(tape.grad(x));
        grads->push_back(tape.grad(b));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "batchnorm_train" || opname == "batchnorm_eval") {
    const bool train = opname == "batchnorm_train";
    s.inputs = {jittered_normal(rng, 4, 3, 4, 4), jittered_normal(rng, 1, 3, 1, 1),
                jittered_normal(rng, 1, 3, 1, 1)};
    set_weights(rng, 4, 3, 4, 4);
    s.run = [finish, train](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      const int x = tape.leaf(in[0], true), g = tape.leaf(in[1], true), b = tape.leaf(in[2], true);
      BnStats stats;
      stats.mean.assign(3, 0.1);
      stats.var.assign(3, 1.3);
      const int loss = finish(tape, tape.batchnorm(x, g, b, stats, train));
      if (grads) {
        tape.backward(loss);
        grads->push_back(tape.grad(x));
        grads->push_back(tape.grad(g));
        grads->push_back(tape.grad(b));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "relu") {
    s.inputs = {jittered_normal(rng, 2, 3, 4, 4, 0.05)};
    set_weights(rng, 2, 3, 4, 4);
    s.run = [finish](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      const int x = tape.leaf(in[0], true);
      const int loss = finish(tape, tape.relu(x));
      if (grads) {
        tape.backward(loss);
        grads->push_back(tape.grad(x));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "sum" || opname == "accumulate") {
    const int k = opname == "sum" ? 2 : 3;
    for (int i = 0; i < k; ++i) s.inputs.push_back(jittered_normal(rng, 2, 2, 3, 3));
    set_weights(rng, 2, 2, 3, 3);
    s.run = [finish](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      std::vector<int> ids;
      for (const Tensor4& t : in) ids.push_back(tape.leaf(t, true));
      const int loss = finish(tape, tape.accumulate(ids));
      if (grads) {
        tape.backward(loss);
        for (int id : ids) grads->push_back(tape.grad(id));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "nearest_upsample" || opname == "maxpool_down") {
    const bool up = opname == "nearest_upsample";
    s.inputs = {jittered_normal(rng, 2, 2, 4, 4)};
    if (up)
      set_weights(rng, 2, 2, 8, 8);
    else
      set_weights(rng, 2, 2, 2, 2);
    s.run = [finish, up](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      const int x = tape.leaf(in[0], true);
      const int loss = finish(tape, up ? tape.nearest_upsample(x, 2) : tape.maxpool_down(x, 2));
      if (grads) {
        tape.backward(loss);
        grads->push_back(tape.grad(x));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "global_pool_attention") {
    s.inputs = {jittered_normal(rng, 2, 3, 4, 4), jittered_normal(rng, 2, 3, 4, 4)};
    set_weights(rng, 2, 3, 4, 4);
    s.run = [finish](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      const int a = tape.leaf(in[0], true), b = tape.leaf(in[1], true);
      const int loss = finish(tape, tape.global_pool_attention(a, b));
      if (grads) {
        tape.backward(loss);
        grads->push_back(tape.grad(a));
        grads->push_back(tape.grad(b));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  if (opname == "focal_loss") {
    Tensor4 logits(2, 1, 4, 4);
    Tensor4 targets(2, 1, 4, 4);
    for (std::size_t i = 0; i < logits.numel(); ++i) {
      logits.data[i] = rng.uniform(-3.0, 3.0);
      targets.data[i] = rng.uniform01() < 0.4 ? 1.0 : 0.0;
    }
    s.inputs = {logits};
    auto targets_ptr = std::make_shared<Tensor4>(std::move(targets));
    s.run = [targets_ptr](const std::vector<Tensor4>& in, std::vector<Tensor4>* grads) {
      Tape tape;
      const int z = tape.leaf(in[0], true);
      const int loss = tape.focal_loss(z, *targets_ptr, 0.25, 1.5);
      if (grads) {
        tape.backward(loss);
        grads->push_back(tape.grad(z));
      }
      return tape.value(loss).data[0];
    };
    return s;
  }
  throw Error("unknown-op", "no gradient check scenario for '" + opname + "'");
}

}  // namespace

double grad_check(const std::string& opname, std::uint64_t seed) {
  return max_rel_error(make_scenario(opname, seed));
}

std::vector<std::string> grad_check_ops() {
  return {"conv3x3",       "conv1x1",     "depthwise3x3",
          "bias_add",      "batchnorm_train", "batchnorm_eval",
          "relu",          "sum",         "accumulate",
          "nearest_upsample", "maxpool_down", "global_pool_attention",
          "focal_loss",    "conv_block_full", "conv_block_dwsep"};
}

namespace {

void write_doubles(std::ofstream& out, const std::vector<double>& data) {
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
}

}  // namespace

void save_checkpoint(const ExecState& st, const std::string& path_prefix) {
  std::ofstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw Error("io-error", "cannot write " + path_prefix + ".bin");
  json entries = json::array();
  std::uint64_t offset = 0;
  auto record = [&](const std::string& name, const std::string& kind,
                    const std::vector<int>& shape, const std::vector<double>& data) {
    entries.push_back(json{{"name", name},
                           {"kind", kind},
                           {"shape", shape},
                           {"offset", offset},
                           {"count", data.size()}});
    write_doubles(bin, data);
    offset += data.size() * sizeof(double);
  };
  for (const Param& p : st.params.all())
    record(p.name, "param", {p.value.n, p.value.c, p.value.h, p.value.w}, p.value.data);
  for (const auto& [name, stats] : st.bn) {
    record(name, "bn_mean", {1, static_cast<int>(stats.mean.size()), 1, 1}, stats.mean);
    record(name, "bn_var", {1, static_cast<int>(stats.var.size()), 1, 1}, stats.var);
  }
  json manifest{{"version", 1}, {"encoding", "f64-le"}, {"entries", entries}};
  std::ofstream meta(path_prefix + ".json");
  if (!meta) throw Error("io-error", "cannot write " + path_prefix + ".json");
  meta << manifest.dump(2) << "\n";
}

void load_checkpoint(ExecState& st, const std::string& path_prefix) {
  std::ifstream meta(path_prefix + ".json");
  if (!meta) throw Error("io-error", "cannot read " + path_prefix + ".json");
  json manifest = json::parse(meta, nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("version") ||
      manifest.at("version").get<int>() != 1)
    throw Error("checkpoint-mismatch", "unsupported checkpoint manifest");
  std::ifstream bin(path_prefix + ".bin", std::ios::binary);
  if (!bin) throw Error("io-error", "cannot read " + path_prefix + ".bin");

  for (const auto& entry : manifest.at("entries")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t count = entry.at("count").get<std::size_t>();
    std::vector<double> data(count);
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(data.data()),
             static_cast<std::streamsize>(count * sizeof(double)));
    if (!bin) throw Error("checkpoint-mismatch", "blob truncated at " + name);
    if (kind == "param") {
      Param* param = st.params.find(name);
      if (!param || param->value.numel() != count)
        throw Error("checkpoint-mismatch", "parameter " + name + " does not match the model");
      param->value.data = std::move(data);
    } else if (kind == "bn_mean") {
      st.bn[name].mean = std::move(data);
    } else if (kind == "bn_var") {
      st.bn[name].var = std::move(data);
    } else {
      throw Error("checkpoint-mismatch", "unknown entry kind " + kind);
    }
  }
}

}  // namespace pyrsearch
