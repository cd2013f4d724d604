#include "pyrsearch/controller.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pyrsearch {

DecisionLayout::DecisionLayout(SpaceConfig s) : space(std::move(s)) {
  space.check();
  index_vocab = space.num_inputs() + space.num_cells() - 1;
  std::vector<LevelId> levels = space.allowed_intermediate_levels();
  for (LevelId level : space.output_levels) levels.push_back(level);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  level_vocab = std::move(levels);
  op_vocab = space.ops;
}

DecisionType DecisionLayout::type_of(int step) const {
  switch (step % 4) {
    case 0: return DecisionType::IndexA;
    case 1: return DecisionType::IndexB;
    case 2: return DecisionType::Level;
    default: return DecisionType::Op;
  }
}

int DecisionLayout::vocab_size(DecisionType type) const {
  switch (type) {
    case DecisionType::IndexA:
    case DecisionType::IndexB: return index_vocab;
    case DecisionType::Level: return static_cast<int>(level_vocab.size());
    case DecisionType::Op: return static_cast<int>(op_vocab.size());
  }
  return 0;
}

std::vector<int> DecisionLayout::legal_tokens(int step, const std::vector<int>& prefix) const {
  const int cell = cell_of(step);
  const int pool = space.num_inputs() + cell;
  std::vector<int> legal;
  switch (type_of(step)) {
    case DecisionType::IndexA:
      for (int v = 0; v < pool; ++v) legal.push_back(v);
      break;
    case DecisionType::IndexB: {
      const int a = prefix[static_cast<std::size_t>(4 * cell)];
      for (int v = 0; v < pool; ++v)
        if (v != a) legal.push_back(v);
      break;
    }
    case DecisionType::Level: {
      if (cell < space.num_intermediate_cells) {
        for (LevelId level : space.allowed_intermediate_levels()) {
          const auto it = std::find(level_vocab.begin(), level_vocab.end(), level);
          legal.push_back(static_cast<int>(it - level_vocab.begin()));
        }
      } else {
        std::vector<LevelId> used;
        for (int j = space.num_intermediate_cells; j < cell; ++j)
          used.push_back(level_vocab[static_cast<std::size_t>(prefix[static_cast<std::size_t>(4 * j + 2)])]);
        for (LevelId level : space.output_levels) {
          if (std::find(used.begin(), used.end(), level) != used.end()) continue;
          const auto it = std::find(level_vocab.begin(), level_vocab.end(), level);
          legal.push_back(static_cast<int>(it - level_vocab.begin()));
        }
      }
      break;
    }
    case DecisionType::Op:
      for (int v = 0; v < static_cast<int>(op_vocab.size()); ++v) legal.push_back(v);
      break;
  }
  return legal;
}

Genome DecisionLayout::decode(const std::vector<int>& tokens) const {
  if (static_cast<int>(tokens.size()) != total_steps())
    throw Error("shape-mismatch", "token count does not match the decision layout");
  Genome genome;
  genome.space = space;
  for (int cell = 0; cell < space.num_cells(); ++cell) {
    CellSpec spec;
    spec.input_a = tokens[static_cast<std::size_t>(4 * cell)];
    spec.input_b = tokens[static_cast<std::size_t>(4 * cell + 1)];
    spec.out_level = level_vocab[static_cast<std::size_t>(tokens[static_cast<std::size_t>(4 * cell + 2)])];
    spec.op = op_vocab[static_cast<std::size_t>(tokens[static_cast<std::size_t>(4 * cell + 3)])];
    genome.cells.push_back(spec);
    if (cell >= space.num_intermediate_cells) genome.output_order.push_back(spec.out_level);
  }
  return genome;
}

namespace {

void softmax_over(const std::vector<double>& logits, const std::vector<int>& legal,
                  std::vector<double>& probs) {
  double best = -1e300;
  for (int j : legal) best = std::max(best, logits[static_cast<std::size_t>(j)]);
  double z = 0.0;
  for (int j : legal) z += std::exp(logits[static_cast<std::size_t>(j)] - best);
  for (int j : legal)
    probs[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)] - best) / z;
}

}  // namespace

Controller::Controller(const SpaceConfig& space, PpoConfig cfg, std::uint64_t seed)
    : layout_(space), cfg_(std::move(cfg)) {
  const int H = cfg_.hidden, E = cfg_.embed, T = layout_.total_steps();
  emb_index_.init(layout_.index_vocab, E);
  emb_level_.init(static_cast<int>(layout_.level_vocab.size()), E);
  emb_op_.init(static_cast<int>(layout_.op_vocab.size()), E);
  emb_start_.init(1, E);
  pos_.init(T, E);
  wx_.init(H, E);
  wh_.init(H, H);
  bh_.init(1, H);
  head_a_.init(layout_.index_vocab, H);
  head_b_.init(layout_.index_vocab, H);
  head_level_.init(static_cast<int>(layout_.level_vocab.size()), H);
  head_op_.init(static_cast<int>(layout_.op_vocab.size()), H);
  bias_a_.init(1, layout_.index_vocab);
  bias_b_.init(1, layout_.index_vocab);
  bias_level_.init(1, static_cast<int>(layout_.level_vocab.size()));
  bias_op_.init(1, static_cast<int>(layout_.op_vocab.size()));
  all_params_ = {&emb_index_, &emb_level_, &emb_op_, &emb_start_, &pos_,  &wx_,
                 &wh_,        &bh_,        &head_a_, &head_b_,    &head_level_, &head_op_,
                 &bias_a_,    &bias_b_,    &bias_level_, &bias_op_};
  Rng rng(seed);
  for (Mat* m : all_params_)
    for (double& v : m->v) v = rng.uniform(-0.08, 0.08);
  std::fill(bias_a_.v.begin(), bias_a_.v.end(), 0.0);
  std::fill(bias_b_.v.begin(), bias_b_.v.end(), 0.0);
  std::fill(bias_level_.v.begin(), bias_level_.v.end(), 0.0);
  std::fill(bias_op_.v.begin(), bias_op_.v.end(), 0.0);
}

Controller::Mat& Controller::head(DecisionType type) {
  switch (type) {
    case DecisionType::IndexA: return head_a_;
    case DecisionType::IndexB: return head_b_;
    case DecisionType::Level: return head_level_;
    default: return head_op_;
  }
}

Controller::Mat& Controller::head_bias(DecisionType type) {
  switch (type) {
    case DecisionType::IndexA: return bias_a_;
    case DecisionType::IndexB: return bias_b_;
    case DecisionType::Level: return bias_level_;
    default: return bias_op_;
  }
}

Controller::Mat& Controller::embedding(DecisionType type) {
  switch (type) {
    case DecisionType::IndexA:
    case DecisionType::IndexB: return emb_index_;
    case DecisionType::Level: return emb_level_;
    default: return emb_op_;
  }
}

std::vector<Controller::StepCache> Controller::run_trace(const std::vector<int>& tokens) {
  const int T = layout_.total_steps(), H = cfg_.hidden, E = cfg_.embed;
  std::vector<StepCache> steps(static_cast<std::size_t>(T));
  std::vector<double> h_prev(static_cast<std::size_t>(H), 0.0);
  std::vector<double> x(static_cast<std::size_t>(E));
  for (int e = 0; e < E; ++e) x[static_cast<std::size_t>(e)] = emb_start_.at(0, e) + pos_.at(0, e);

  std::vector<int> prefix;
  for (int t = 0; t < T; ++t) {
    StepCache& step = steps[static_cast<std::size_t>(t)];
    step.x = x;
    step.h.assign(static_cast<std::size_t>(H), 0.0);
    for (int i = 0; i < H; ++i) {
      double u = bh_.at(0, i);
      for (int e = 0; e < E; ++e) u += wx_.at(i, e) * x[static_cast<std::size_t>(e)];
      for (int j = 0; j < H; ++j) u += wh_.at(i, j) * h_prev[static_cast<std::size_t>(j)];
      step.h[static_cast<std::size_t>(i)] = std::tanh(u);
    }
    const DecisionType type = layout_.type_of(t);
    const Mat& W = head(type);
    const Mat& B = head_bias(type);
    const int vocab = layout_.vocab_size(type);
    std::vector<double> logits(static_cast<std::size_t>(vocab), 0.0);
    step.legal = layout_.legal_tokens(t, prefix);
    for (int j : step.legal) {
      double z = B.at(0, j);
      for (int i = 0; i < H; ++i) z += W.at(j, i) * step.h[static_cast<std::size_t>(i)];
      logits[static_cast<std::size_t>(j)] = z;
    }
    step.p.assign(static_cast<std::size_t>(vocab), 0.0);
    softmax_over(logits, step.legal, step.p);
    const int token = tokens[static_cast<std::size_t>(t)];
    step.logp = std::log(std::max(step.p[static_cast<std::size_t>(token)], 1e-300));
    prefix.push_back(token);

    if (t + 1 < T) {
      const Mat& emb = embedding(type);
      for (int e = 0; e < E; ++e)
        x[static_cast<std::size_t>(e)] = emb.at(token, e) + pos_.at(t + 1, e);
    }
    h_prev = step.h;
  }
  return steps;
}

SampleTrace Controller::sample(Rng& rng) {
  const int T = layout_.total_steps(), H = cfg_.hidden, E = cfg_.embed;
  SampleTrace trace;
  std::vector<double> h_prev(static_cast<std::size_t>(H), 0.0);
  std::vector<double> h(static_cast<std::size_t>(H));
  std::vector<double> x(static_cast<std::size_t>(E));
  for (int e = 0; e < E; ++e) x[static_cast<std::size_t>(e)] = emb_start_.at(0, e) + pos_.at(0, e);

  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < H; ++i) {
      double u = bh_.at(0, i);
      for (int e = 0; e < E; ++e) u += wx_.at(i, e) * x[static_cast<std::size_t>(e)];
      for (int j = 0; j < H; ++j) u += wh_.at(i, j) * h_prev[static_cast<std::size_t>(j)];
      h[static_cast<std::size_t>(i)] = std::tanh(u);
    }
    const DecisionType type = layout_.type_of(t);
    const Mat& W = head(type);
    const Mat& B = head_bias(type);
    const int vocab = layout_.vocab_size(type);
    std::vector<double> logits(static_cast<std::size_t>(vocab), 0.0);
    const std::vector<int> legal = layout_.legal_tokens(t, trace.tokens);
    for (int j : legal) {
      double z = B.at(0, j);
      for (int i = 0; i < H; ++i) z += W.at(j, i) * h[static_cast<std::size_t>(i)];
      logits[static_cast<std::size_t>(j)] = z;
    }
    std::vector<double> probs(static_cast<std::size_t>(vocab), 0.0);
    softmax_over(logits, legal, probs);

    const double draw = rng.uniform01();
    double acc = 0.0;
    int token = legal.back();
    for (int j : legal) {
      acc += probs[static_cast<std::size_t>(j)];
      if (draw < acc) {
        token = j;
        break;
      }
    }
    trace.tokens.push_back(token);
    trace.logprobs.push_back(std::log(std::max(probs[static_cast<std::size_t>(token)], 1e-300)));

    if (t + 1 < T) {
      const Mat& emb = embedding(type);
      for (int e = 0; e < E; ++e)
        x[static_cast<std::size_t>(e)] = emb.at(token, e) + pos_.at(t + 1, e);
    }
    h_prev = h;
  }
  trace.genome = layout_.decode(trace.tokens);
  return trace;
}

std::vector<std::vector<double>> Controller::trace_probs(const SampleTrace& trace) {
  auto steps = run_trace(trace.tokens);
  std::vector<std::vector<double>> out;
  for (const StepCache& step : steps) out.push_back(step.p);
  return out;
}

void Controller::zero_grads() {
  for (Mat* m : all_params_) std::fill(m->g.begin(), m->g.end(), 0.0);
}

void Controller::adam_step() {
  ++adam_t_;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, adam_t_);
  const double c2 = 1.0 - std::pow(b2, adam_t_);
  for (Mat* mat : all_params_) {
    for (std::size_t i = 0; i < mat->v.size(); ++i) {
      mat->m[i] = b1 * mat->m[i] + (1.0 - b1) * mat->g[i];
      mat->vm[i] = b2 * mat->vm[i] + (1.0 - b2) * mat->g[i] * mat->g[i];
      mat->v[i] -= cfg_.learning_rate * (mat->m[i] / c1) / (std::sqrt(mat->vm[i] / c2) + eps);
    }
  }
}

std::vector<double> Controller::ppo_update(const std::vector<SampleTrace>& batch,
                                           const std::vector<double>& advantages, Rng& rng,
                                           double entropy_scale) {
  const double entropy_w = cfg_.entropy_bonus * entropy_scale;
  if (batch.size() != advantages.size())
    throw Error("shape-mismatch", "batch and advantages differ in length");
  const int T = layout_.total_steps(), H = cfg_.hidden, E = cfg_.embed;
  std::vector<double> epoch_losses;

  std::vector<std::size_t> order(batch.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t mb_size = cfg_.minibatch > 0
                                  ? std::min<std::size_t>(static_cast<std::size_t>(cfg_.minibatch), batch.size())
                                  : batch.size();

  for (int epoch = 0; epoch < cfg_.epochs_per_batch; ++epoch) {
    if (cfg_.minibatch > 0) rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += mb_size) {
      const std::size_t end = std::min(begin + mb_size, order.size());
      zero_grads();
      const double inv_steps = 1.0 / static_cast<double>((end - begin) * static_cast<std::size_t>(T));
      double mb_loss = 0.0;

      for (std::size_t oi = begin; oi < end; ++oi) {
        const SampleTrace& trace = batch[order[oi]];
        const double advantage = advantages[order[oi]];
        auto steps = run_trace(trace.tokens);

        // Per-step dLoss/dlogits, then backprop through time once.
        std::vector<std::vector<double>> dlogits(static_cast<std::size_t>(T));
        for (int t = 0; t < T; ++t) {
          const StepCache& step = steps[static_cast<std::size_t>(t)];
          const int token = trace.tokens[static_cast<std::size_t>(t)];
          const double ratio = std::exp(step.logp - trace.logprobs[static_cast<std::size_t>(t)]);
          const double clipped = std::clamp(ratio, 1.0 - cfg_.clip_epsilon, 1.0 + cfg_.clip_epsilon);
          const double surr_unclipped = ratio * advantage;
          const double surr_clipped = clipped * advantage;
          const bool pass = surr_unclipped <= surr_clipped + 1e-12;
          const double surrogate = std::min(surr_unclipped, surr_clipped);

          double entropy = 0.0;
          for (int j : step.legal) {
            const double p = step.p[static_cast<std::size_t>(j)];
            if (p > 0.0) entropy -= p * std::log(p);
          }
          mb_loss += inv_steps * (-surrogate - entropy_w * entropy);

          auto& dz = dlogits[static_cast<std::size_t>(t)];
          dz.assign(step.p.size(), 0.0);
          for (int j : step.legal) {
            const double p = step.p[static_cast<std::size_t>(j)];
            const double indicator = j == token ? 1.0 : 0.0;
            double g = 0.0;
            if (pass) g -= advantage * ratio * (indicator - p);
            g += entropy_w * p * (std::log(std::max(p, 1e-300)) + entropy);
            dz[static_cast<std::size_t>(j)] = inv_steps * g;
          }
        }

        std::vector<double> dh_carry(static_cast<std::size_t>(H), 0.0);
        for (int t = T - 1; t >= 0; --t) {
          const StepCache& step = steps[static_cast<std::size_t>(t)];
          const DecisionType type = layout_.type_of(t);
          Mat& W = head(type);
          Mat& B = head_bias(type);
          std::vector<double> dh(dh_carry);
          for (int j : step.legal) {
            const double d = dlogits[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
            if (d == 0.0) continue;
            B.gat(0, j) += d;
            for (int i = 0; i < H; ++i) {
              W.gat(j, i) += d * step.h[static_cast<std::size_t>(i)];
              dh[static_cast<std::size_t>(i)] += d * W.at(j, i);
            }
          }
          // Through tanh.
          std::vector<double> du(static_cast<std::size_t>(H));
          for (int i = 0; i < H; ++i) {
            const double hv = step.h[static_cast<std::size_t>(i)];
            du[static_cast<std::size_t>(i)] = dh[static_cast<std::size_t>(i)] * (1.0 - hv * hv);
          }
          const std::vector<double>* h_prev = t > 0 ? &steps[static_cast<std::size_t>(t - 1)].h : nullptr;
          std::vector<double> dx(static_cast<std::size_t>(E), 0.0);
          for (int i = 0; i < H; ++i) {
            const double d = du[static_cast<std::size_t>(i)];
            if (d == 0.0) continue;
            bh_.gat(0, i) += d;
            for (int e = 0; e < E; ++e) {
              wx_.gat(i, e) += d * step.x[static_cast<std::size_t>(e)];
              dx[static_cast<std::size_t>(e)] += d * wx_.at(i, e);
            }
            if (h_prev)
              for (int j = 0; j < H; ++j) wh_.gat(i, j) += d * (*h_prev)[static_cast<std::size_t>(j)];
          }
          // Carry into h_{t-1}.
          std::fill(dh_carry.begin(), dh_carry.end(), 0.0);
          if (h_prev)
            for (int i = 0; i < H; ++i) {
              const double d = du[static_cast<std::size_t>(i)];
              if (d == 0.0) continue;
              for (int j = 0; j < H; ++j)
                dh_carry[static_cast<std::size_t>(j)] += d * wh_.at(i, j);
            }
          // Input embedding of this step.
          if (t == 0) {
            for (int e = 0; e < E; ++e) emb_start_.gat(0, e) += dx[static_cast<std::size_t>(e)];
          } else {
            Mat& emb = embedding(layout_.type_of(t - 1));
            const int prev_token = trace.tokens[static_cast<std::size_t>(t - 1)];
            for (int e = 0; e < E; ++e) emb.gat(prev_token, e) += dx[static_cast<std::size_t>(e)];
          }
          for (int e = 0; e < E; ++e) pos_.gat(t, e) += dx[static_cast<std::size_t>(e)];
        }
      }
      adam_step();
      epoch_loss += mb_loss * static_cast<double>(end - begin);
      seen += end - begin;
    }
    epoch_losses.push_back(epoch_loss / static_cast<double>(seen));
  }
  return epoch_losses;
}

void Controller::update_baseline(double batch_mean) {
  if (!baseline_init_) {
    baseline_ = batch_mean;
    baseline_init_ = true;
    return;
  }
  baseline_ = cfg_.baseline_decay * baseline_ + (1.0 - cfg_.baseline_decay) * batch_mean;
}

}  // namespace pyrsearch
