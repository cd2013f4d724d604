#pragma once

#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pyrsearch/controller.hpp"
#include "pyrsearch/proxy_task.hpp"

namespace pyrsearch {

/// Scores one genome. Implementations must be deterministic in
/// (genome, seed) and safe to call from several threads at once.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual RewardRecord evaluate(const Genome& genome, std::uint64_t seed) const = 0;
};

/// Trains the genome on the synthetic detection task; reward = held-out AP.
class ProxyEvaluator : public Evaluator {
 public:
  ProxyEvaluator(TaskConfig cfg, int stack_n) : cfg_(std::move(cfg)), stack_n_(stack_n) {}
  RewardRecord evaluate(const Genome& genome, std::uint64_t seed) const override {
    return evaluate_reward(genome, cfg_, stack_n_, seed);
  }

 private:
  TaskConfig cfg_;
  int stack_n_;
};

/// Analytic reward: the fraction of decisions matching a hidden target
/// wiring, in [0,1] with a unique optimum at the target. Decouples
/// controller acceptance tests from proxy-task noise.
class PlantedEvaluator : public Evaluator {
 public:
  explicit PlantedEvaluator(Genome target);
  RewardRecord evaluate(const Genome& genome, std::uint64_t seed) const override;
  const Genome& target() const { return target_; }

 private:
  Genome target_;
  int total_decisions_;
};

/// genome hash -> reward, insert-if-absent, shared across workers.
class RewardCache {
 public:
  std::optional<RewardRecord> lookup(const std::string& hash) const;
  void insert(const std::string& hash, const RewardRecord& record);
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, RewardRecord> map_;
};

struct EvalRecord {
  int iteration = 0;
  int candidate_id = 0;
  std::string genome_hash;
  double reward = 0.0;
  bool cache_hit = false;
  double wall_ms = 0.0;
  std::uint64_t unique_so_far = 0;
  std::uint64_t total_so_far = 0;
};

/// Per-evaluation records plus uniqueness counters and the controller loss
/// trace. summary() is byte-deterministic (no wall times); the JSON-lines
/// dump keeps them.
struct SearchLog {
  std::vector<EvalRecord> records;
  std::vector<double> controller_loss;
  Genome best_genome;
  std::string best_hash;
  double best_reward = -1.0;
  int best_candidate_id = -1;

  void add(int iteration, int candidate_id, const Genome& genome, const std::string& hash,
           double reward, bool cache_hit, double wall_ms);
  std::uint64_t total() const { return records.size(); }
  std::uint64_t unique_count() const { return seen_.size(); }
  /// unique/total ratio inside each quarter of the record stream.
  std::vector<double> uniqueness_quarters() const;
  /// Mean reward per iteration, in iteration order.
  std::vector<double> iteration_mean_rewards() const;
  std::string summary_json() const;
  std::string to_jsonl() const;

 private:
  std::set<std::string> seen_;
};

struct PoolCandidate {
  int id = 0;
  Genome genome;
};

struct PoolOutcome {
  int id = 0;
  bool failed = false;
  bool cache_hit = false;
  RewardRecord record;
  double wall_ms = 0.0;
};

/// Evaluates candidates on worker_count threads. Duplicate genomes within a
/// batch and cache hits are scored once; results are re-associated by
/// candidate id, so the outcome set is independent of scheduling. A worker
/// exception marks that candidate failed instead of dropping it.
std::vector<PoolOutcome> evaluation_pool(const std::vector<PoolCandidate>& candidates,
                                         const Evaluator& evaluator, RewardCache& cache,
                                         int worker_count, std::uint64_t eval_seed);

enum class RandomSamplerMode { Independent, Permutation };

struct DriverResult {
  Genome best;
  SearchLog log;
};

DriverResult run_random_search(const SpaceConfig& space, const Evaluator& evaluator, int budget,
                               std::uint64_t seed, int workers,
                               RandomSamplerMode mode = RandomSamplerMode::Independent);

DriverResult run_evolution(const SpaceConfig& space, const Evaluator& evaluator, int population,
                           int cycles, int tournament_k, std::uint64_t seed, int workers);

DriverResult run_rnn_ppo(const SpaceConfig& space, const Evaluator& evaluator, int iterations,
                         int batch_per_iter, std::uint64_t seed, int workers,
                         const PpoConfig& ppo = PpoConfig{});

}  // namespace pyrsearch
