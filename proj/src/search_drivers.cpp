#include "pyrsearch/search_drivers.hpp"

#include <atomic>
#include <chrono>
#include <json.hpp>
#include <thread>

namespace pyrsearch {

using nlohmann::json;

PlantedEvaluator::PlantedEvaluator(Genome target) : target_(std::move(target)) {
  if (!validate(target_).ok()) throw Error("invalid-genome", "planted target must be valid");
  const SpaceConfig& space = target_.space;
  total_decisions_ = 0;
  for (int i = 0; i < space.num_cells(); ++i)
    total_decisions_ += i < space.num_intermediate_cells ? 4 : 3;
  total_decisions_ += space.num_output_cells();  // output_order positions
}

RewardRecord PlantedEvaluator::evaluate(const Genome& genome, std::uint64_t seed) const {
  if (genome.space.num_cells() != target_.space.num_cells())
    throw Error("shape-mismatch", "genome does not fit the planted space");
  int matches = 0;
  for (std::size_t i = 0; i < genome.cells.size(); ++i) {
    matches += genome.cells[i].input_a == target_.cells[i].input_a;
    matches += genome.cells[i].input_b == target_.cells[i].input_b;
    matches += genome.cells[i].op == target_.cells[i].op;
    if (static_cast<int>(i) < genome.space.num_intermediate_cells)
      matches += genome.cells[i].out_level == target_.cells[i].out_level;
  }
  for (std::size_t j = 0; j < genome.output_order.size(); ++j)
    matches += genome.output_order[j] == target_.output_order[j];
  RewardRecord record;
  record.genome_hash = genome_hash(genome);
  record.reward = static_cast<double>(matches) / static_cast<double>(total_decisions_);
  record.steps = 0;
  record.seed = seed;
  return record;
}

std::optional<RewardRecord> RewardCache::lookup(const std::string& hash) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = map_.find(hash);
  if (it == map_.end()) return std::nullopt;
  return it->second;
}

void RewardCache::insert(const std::string& hash, const RewardRecord& record) {
  std::lock_guard<std::mutex> lock(mu_);
  map_.emplace(hash, record);  // keep the first entry
}

std::size_t RewardCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return map_.size();
}

void SearchLog::add(int iteration, int candidate_id, const Genome& genome,
                    const std::string& hash, double reward, bool cache_hit, double wall_ms) {
  seen_.insert(hash);
  EvalRecord record;
  record.iteration = iteration;
  record.candidate_id = candidate_id;
  record.genome_hash = hash;
  record.reward = reward;
  record.cache_hit = cache_hit;
  record.wall_ms = wall_ms;
  record.unique_so_far = seen_.size();
  record.total_so_far = records.size() + 1;
  records.push_back(std::move(record));
  if (reward > best_reward) {
    best_reward = reward;
    best_hash = hash;
    best_genome = genome;
    best_candidate_id = candidate_id;
  }
}

std::vector<double> SearchLog::uniqueness_quarters() const {
  std::vector<double> quarters;
  const std::size_t n = records.size();
  if (n == 0) return quarters;
  for (int q = 0; q < 4; ++q) {
    const std::size_t lo = n * static_cast<std::size_t>(q) / 4;
    const std::size_t hi = n * static_cast<std::size_t>(q + 1) / 4;
    if (hi == lo) {
      quarters.push_back(0.0);
      continue;
    }
    const std::uint64_t unique_before = lo == 0 ? 0 : records[lo - 1].unique_so_far;
    const std::uint64_t unique_after = records[hi - 1].unique_so_far;
    quarters.push_back(static_cast<double>(unique_after - unique_before) /
                       static_cast<double>(hi - lo));
  }
  return quarters;
}

std::vector<double> SearchLog::iteration_mean_rewards() const {
  std::map<int, std::pair<double, int>> sums;
  for (const EvalRecord& r : records) {
    sums[r.iteration].first += r.reward;
    sums[r.iteration].second += 1;
  }
  std::vector<double> means;
  for (const auto& [iter, sum] : sums) {
    (void)iter;
    means.push_back(sum.first / sum.second);
  }
  return means;
}

std::string SearchLog::summary_json() const {
  const auto means = iteration_mean_rewards();
  const std::size_t n = means.size();
  auto mean_range = [&](std::size_t lo, std::size_t hi) {
    if (hi <= lo) return 0.0;
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += means[i];
    return acc / static_cast<double>(hi - lo);
  };
  const std::size_t decile = std::max<std::size_t>(1, n / 10);
  json doc{{"best_reward", best_reward},
           {"best_hash", best_hash},
           {"best_candidate_id", best_candidate_id},
           {"total_evaluations", total()},
           {"unique_genomes", unique_count()},
           {"uniqueness_quarters", uniqueness_quarters()},
           {"iteration_mean_rewards", means},
           {"first_decile_mean_reward", n ? mean_range(0, decile) : 0.0},
           {"final_decile_mean_reward", n ? mean_range(n - decile, n) : 0.0},
           {"controller_loss", controller_loss}};
  return doc.dump();
}

std::string SearchLog::to_jsonl() const {
  std::string out;
  for (const EvalRecord& r : records) {
    out += json{{"iteration", r.iteration},
                {"candidate_id", r.candidate_id},
                {"genome_hash", r.genome_hash},
                {"reward", r.reward},
                {"cache_hit", r.cache_hit},
                {"wall_ms", r.wall_ms},
                {"unique_so_far", r.unique_so_far},
                {"total_so_far", r.total_so_far}}
               .dump();
    out += "\n";
  }
  return out;
}

std::vector<PoolOutcome> evaluation_pool(const std::vector<PoolCandidate>& candidates,
                                         const Evaluator& evaluator, RewardCache& cache,
                                         int worker_count, std::uint64_t eval_seed) {
  if (worker_count < 1) throw Error("invalid-config", "worker_count must be >= 1");
  std::vector<PoolOutcome> outcomes(candidates.size());

  // Dedupe within the batch and against the cache so a genome trains once.
  std::map<std::string, std::vector<std::size_t>> by_hash;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    outcomes[i].id = candidates[i].id;
    by_hash[genome_hash(candidates[i].genome)].push_back(i);
  }

  struct Job {
    std::string hash;
    const Genome* genome;
  };
  std::vector<Job> jobs;
  for (const auto& [hash, slots] : by_hash) {
    const auto cached = cache.lookup(hash);
    if (cached) {
      for (std::size_t slot : slots) {
        outcomes[slot].record = *cached;
        outcomes[slot].cache_hit = true;
      }
      continue;
    }
    jobs.push_back({hash, &candidates[slots.front()].genome});
  }

  struct JobResult {
    bool failed = false;
    RewardRecord record;
    double wall_ms = 0.0;
  };
  std::vector<JobResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        results[j].record = evaluator.evaluate(*jobs[j].genome, eval_seed);
      } catch (...) {
        results[j].failed = true;
      }
      results[j].wall_ms = std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - t0)
                               .count();
    }
  };
  const int threads = std::min<int>(worker_count, static_cast<int>(jobs.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  for (std::size_t j = 0; j < jobs.size(); ++j) {
    if (!results[j].failed) cache.insert(jobs[j].hash, results[j].record);
    for (std::size_t slot : by_hash.at(jobs[j].hash)) {
      outcomes[slot].failed = results[j].failed;
      outcomes[slot].record = results[j].record;
      outcomes[slot].wall_ms = results[j].wall_ms;
      outcomes[slot].record.genome_hash = jobs[j].hash;
    }
  }
  return outcomes;
}

namespace {

struct ScoredMember {
  Genome genome;
  std::string hash;
  double reward = 0.0;
};

// Evaluates a batch, logging every outcome; failed candidates are reported
// to the caller for resampling (never silently dropped).
std::vector<PoolOutcome> score_batch(const std::vector<PoolCandidate>& batch,
                                     const Evaluator& evaluator, RewardCache& cache, int workers,
                                     std::uint64_t eval_seed, int iteration, SearchLog& log) {
  auto outcomes = evaluation_pool(batch, evaluator, cache, workers, eval_seed);
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    if (outcomes[i].failed) continue;
    log.add(iteration, outcomes[i].id, batch[i].genome, outcomes[i].record.genome_hash,
            outcomes[i].record.reward, outcomes[i].cache_hit, outcomes[i].wall_ms);
  }
  return outcomes;
}

}  // namespace

DriverResult run_random_search(const SpaceConfig& space, const Evaluator& evaluator, int budget,
                               std::uint64_t seed, int workers, RandomSamplerMode mode) {
  if (budget < 1) throw Error("invalid-config", "budget must be >= 1");
  space.check();
  DriverResult result;
  RewardCache cache;

  std::vector<Genome> pending;
  if (mode == RandomSamplerMode::Permutation) {
    pending = enumerate_all(space);
    Rng rng(derive_seed(seed, {0x9e1}));
    rng.shuffle(pending);
    if (static_cast<int>(pending.size()) > budget)
      pending.resize(static_cast<std::size_t>(budget));
  }

  int next_id = 0;
  std::uint64_t draw = 0;
  int scored = 0;
  const int target = mode == RandomSamplerMode::Permutation
                         ? static_cast<int>(pending.size())
                         : budget;
  while (scored < target) {
    std::vector<PoolCandidate> batch;
    const int want = std::min(target - scored, std::max(workers * 4, 8));
    for (int k = 0; k < want; ++k) {
      Genome genome;
      if (mode == RandomSamplerMode::Permutation) {
        genome = pending[static_cast<std::size_t>(scored + k)];
      } else {
        genome = sample_random(space, derive_seed(seed, {0xabc, draw++}));
      }
      batch.push_back({next_id++, std::move(genome)});
    }
    auto outcomes = score_batch(batch, evaluator, cache, workers, seed, scored, result.log);
    for (const auto& o : outcomes) scored += !o.failed;
    if (mode == RandomSamplerMode::Permutation)
      for (const auto& o : outcomes)
        if (o.failed)
          throw Error("evaluation-failed", "exhaustive sampler cannot resample a failed genome");
  }
  result.best = result.log.best_genome;
  return result;
}

DriverResult run_evolution(const SpaceConfig& space, const Evaluator& evaluator, int population,
                           int cycles, int tournament_k, std::uint64_t seed, int workers) {
  if (population < 2) throw Error("invalid-config", "population must be >= 2");
  if (tournament_k < 1 || tournament_k > population)
    throw Error("invalid-config", "tournament size must be in [1, population]");
  space.check();
  DriverResult result;
  RewardCache cache;
  Rng rng(derive_seed(seed, {0xe0}));

  // Seed population.
  std::vector<PoolCandidate> init;
  for (int i = 0; i < population; ++i)
    init.push_back({i, sample_random(space, derive_seed(seed, {0x11, static_cast<std::uint64_t>(i)}))});
  auto outcomes = score_batch(init, evaluator, cache, workers, seed, 0, result.log);
  std::vector<ScoredMember> pop;
  for (std::size_t i = 0; i < init.size(); ++i) {
    std::uint64_t retry = 0;
    while (outcomes[i].failed) {
      PoolCandidate redo{init[i].id,
                         sample_random(space, derive_seed(seed, {0x12, i, retry++}))};
      auto redo_out = score_batch({redo}, evaluator, cache, workers, seed, 0, result.log);
      outcomes[i] = redo_out[0];
      init[i] = redo;
    }
    pop.push_back({init[i].genome, outcomes[i].record.genome_hash, outcomes[i].record.reward});
  }

  int next_id = population;
  for (int cycle = 0; cycle < cycles; ++cycle) {
    // Tournament: sample k distinct members, best one breeds.
    std::vector<int> order(pop.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    int parent = order[0];
    for (int k = 1; k < tournament_k; ++k)
      if (pop[static_cast<std::size_t>(order[k])].reward >
          pop[static_cast<std::size_t>(parent)].reward)
        parent = order[k];

    std::uint64_t retry = 0;
    while (true) {
      Genome child = mutate(pop[static_cast<std::size_t>(parent)].genome,
                            derive_seed(seed, {0x31, static_cast<std::uint64_t>(cycle), retry}));
      PoolCandidate cand{next_id, std::move(child)};
      auto out = score_batch({cand}, evaluator, cache, workers, seed, 1 + cycle, result.log);
      if (!out[0].failed) {
        ++next_id;
        pop.push_back({cand.genome, out[0].record.genome_hash, out[0].record.reward});
        pop.erase(pop.begin());  // retire the oldest
        break;
      }
      ++retry;
    }
  }
  result.best = result.log.best_genome;
  return result;
}

DriverResult run_rnn_ppo(const SpaceConfig& space, const Evaluator& evaluator, int iterations,
                         int batch_per_iter, std::uint64_t seed, int workers,
                         const PpoConfig& ppo) {
  if (iterations < 1 || batch_per_iter < 1)
    throw Error("invalid-config", "iterations and batch size must be >= 1");
  space.check();
  DriverResult result;
  RewardCache cache;
  Controller controller(space, ppo, derive_seed(seed, {0xc0}));
  Rng sample_rng(derive_seed(seed, {0xc1}));
  Rng update_rng(derive_seed(seed, {0xc2}));

  int next_id = 0;
  for (int iter = 0; iter < iterations; ++iter) {
    std::vector<SampleTrace> traces;
    std::vector<double> rewards;
    while (static_cast<int>(traces.size()) < batch_per_iter) {
      const int want = batch_per_iter - static_cast<int>(traces.size());
      std::vector<SampleTrace> drawn;
      std::vector<PoolCandidate> batch;
      for (int k = 0; k < want; ++k) {
        drawn.push_back(controller.sample(sample_rng));
        batch.push_back({next_id++, drawn.back().genome});
      }
      auto outcomes = score_batch(batch, evaluator, cache, workers, seed, iter, result.log);
      for (std::size_t i = 0; i < outcomes.size(); ++i) {
        if (outcomes[i].failed) continue;  // resampled on the next loop turn
        traces.push_back(std::move(drawn[i]));
        rewards.push_back(outcomes[i].record.reward);
      }
    }

    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= static_cast<double>(rewards.size());
    if (!controller.baseline_ready()) controller.update_baseline(mean);
    std::vector<double> advantages;
    for (double r : rewards) advantages.push_back(r - controller.baseline());
    controller.update_baseline(mean);

    const double entropy_scale =
        ppo.entropy_anneal && iterations > 1
            ? 1.0 - static_cast<double>(iter) / static_cast<double>(iterations - 1)
            : 1.0;
    const auto losses = controller.ppo_update(traces, advantages, update_rng, entropy_scale);
    for (double loss : losses) result.log.controller_loss.push_back(loss);
  }
  result.best = result.log.best_genome;
  return result;
}

}  // namespace pyrsearch
