#include <doctest.h>

#include <atomic>

#include "pyrsearch/search_drivers.hpp"

using namespace pyrsearch;

namespace {

SpaceConfig tiny12_space() { return make_space({3, 4, 5}, {4}, 0); }

// 2 inputs, 0 intermediates, 2 output cells, 2 ops -> 192 genomes.
SpaceConfig small192_space() { return make_space({3, 4}, {3, 4}, 0); }

class CountingEvaluator : public Evaluator {
 public:
  explicit CountingEvaluator(Genome target) : inner_(std::move(target)) {}
  RewardRecord evaluate(const Genome& genome, std::uint64_t seed) const override {
    calls.fetch_add(1);
    return inner_.evaluate(genome, seed);
  }
  mutable std::atomic<int> calls{0};

 private:
  PlantedEvaluator inner_;
};

// Deterministically fails the first evaluation of genomes whose hash starts
// with a low hex digit; succeeds on any later attempt via the retry set.
class FlakyEvaluator : public Evaluator {
 public:
  explicit FlakyEvaluator(Genome target) : inner_(std::move(target)) {}
  RewardRecord evaluate(const Genome& genome, std::uint64_t seed) const override {
    const std::string hash = genome_hash(genome);
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (hash[0] <= '3' && !failed_once_.count(hash)) {
        failed_once_.insert(hash);
        throw Error("evaluation-failed", "injected failure");
      }
    }
    return inner_.evaluate(genome, seed);
  }

 private:
  PlantedEvaluator inner_;
  mutable std::mutex mu_;
  mutable std::set<std::string> failed_once_;
};

}  // namespace

TEST_CASE("planted reward peaks only at the target") {
  auto space = small192_space();
  Genome target = sample_random(space, 77);
  PlantedEvaluator eval(target);
  CHECK(eval.evaluate(target, 0).reward == 1.0);
  int perfect = 0;
  for (const Genome& g : enumerate_all(space)) {
    const double r = eval.evaluate(g, 0).reward;
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    perfect += r == 1.0;
  }
  CHECK(perfect == 1);
}

TEST_CASE("controller masking: sampled genomes are always valid") {
  auto space = space_preset("default5");
  Controller controller(space, PpoConfig{}, 3);
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    SampleTrace trace = controller.sample(rng);
    CHECK(validate(trace.genome).ok());
  }
}

TEST_CASE("masked softmax assigns exactly zero to illegal decisions") {
  auto space = space_preset("default5");
  Controller controller(space, PpoConfig{}, 3);
  Rng rng(6);
  SampleTrace trace = controller.sample(rng);
  auto probs = controller.trace_probs(trace);
  const auto& layout = controller.layout();
  std::vector<int> prefix;
  for (int t = 0; t < layout.total_steps(); ++t) {
    const auto legal = layout.legal_tokens(t, prefix);
    std::set<int> legal_set(legal.begin(), legal.end());
    double total = 0.0;
    for (int j = 0; j < static_cast<int>(probs[static_cast<std::size_t>(t)].size()); ++j) {
      const double p = probs[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
      if (!legal_set.count(j)) CHECK(p == 0.0);
      total += p;
    }
    CHECK(total == doctest::Approx(1.0));
    prefix.push_back(trace.tokens[static_cast<std::size_t>(t)]);
  }
}

TEST_CASE("evaluation pool") {
  auto space = space_preset("default5");
  Genome target = sample_random(space, 1);

  SUBCASE("results are independent of worker count") {
    std::vector<PoolCandidate> candidates;
    for (int i = 0; i < 100; ++i) candidates.push_back({i, sample_random(space, 500 + static_cast<std::uint64_t>(i))});
    PlantedEvaluator eval(target);
    RewardCache cache1, cache8;
    auto r1 = evaluation_pool(candidates, eval, cache1, 1, 9);
    auto r8 = evaluation_pool(candidates, eval, cache8, 8, 9);
    REQUIRE(r1.size() == 100);
    REQUIRE(r8.size() == 100);
    for (std::size_t i = 0; i < r1.size(); ++i) {
      CHECK(r1[i].id == r8[i].id);
      CHECK(r1[i].record.reward == r8[i].record.reward);
    }
  }
  SUBCASE("duplicate genomes in one batch are scored once") {
    CountingEvaluator eval(target);
    RewardCache cache;
    Genome g = sample_random(space, 2);
    std::vector<PoolCandidate> batch = {{0, g}, {1, g}, {2, g}, {3, sample_random(space, 3)}};
    auto outcomes = evaluation_pool(batch, eval, cache, 2, 9);
    CHECK(eval.calls.load() == 2);
    CHECK(outcomes[0].record.reward == outcomes[1].record.reward);
    CHECK(outcomes.size() == 4);
  }
  SUBCASE("cache hits skip evaluation") {
    CountingEvaluator eval(target);
    RewardCache cache;
    Genome g = sample_random(space, 2);
    (void)evaluation_pool({{0, g}}, eval, cache, 1, 9);
    auto again = evaluation_pool({{1, g}}, eval, cache, 1, 9);
    CHECK(eval.calls.load() == 1);
    CHECK(again[0].cache_hit);
  }
  SUBCASE("failures are reported, not dropped") {
    FlakyEvaluator eval(target);
    RewardCache cache;
    std::vector<PoolCandidate> candidates;
    for (int i = 0; i < 40; ++i) candidates.push_back({i, sample_random(space, 900 + static_cast<std::uint64_t>(i))});
    auto outcomes = evaluation_pool(candidates, eval, cache, 2, 9);
    REQUIRE(outcomes.size() == 40);
    int failed = 0;
    for (const auto& o : outcomes) failed += o.failed;
    CHECK(failed > 0);  // some hashes start with 0..3
  }
}

TEST_CASE("random search") {
  auto space = tiny12_space();
  Genome target = sample_random(space, 4);
  PlantedEvaluator eval(target);

  SUBCASE("budget one returns the single sample") {
    auto result = run_random_search(space, eval, 1, 10, 1);
    CHECK(result.log.total() == 1);
    CHECK(genome_hash(result.best) == result.log.best_hash);
  }
  SUBCASE("log total equals budget") {
    auto result = run_random_search(space, eval, 25, 11, 2);
    CHECK(result.log.total() == 25);
  }
  SUBCASE("permutation sampler at full budget finds the brute-force optimum") {
    auto result = run_random_search(space, eval, 12, 12, 2, RandomSamplerMode::Permutation);
    CHECK(result.log.total() == 12);
    CHECK(eval.evaluate(result.best, 0).reward == 1.0);
    CHECK(result.best == target);
  }
  SUBCASE("identical invocations give identical summaries") {
    auto a = run_random_search(space, eval, 20, 13, 1);
    auto b = run_random_search(space, eval, 20, 13, 2);
    CHECK(a.log.summary_json() == b.log.summary_json());
  }
  SUBCASE("flaky evaluator still delivers the full budget") {
    FlakyEvaluator flaky(sample_random(space, 4));
    auto result = run_random_search(space, flaky, 30, 14, 2);
    CHECK(result.log.total() == 30);
  }
}

TEST_CASE("regularized evolution") {
  auto space = small192_space();
  Genome target = sample_random(space, 21);
  PlantedEvaluator eval(target);

  SUBCASE("zero cycles returns the best of the initial population") {
    auto result = run_evolution(space, eval, 8, 0, 3, 31, 2);
    CHECK(result.log.total() == 8);
    double best = -1.0;
    for (const auto& r : result.log.records) best = std::max(best, r.reward);
    CHECK(result.log.best_reward == best);
  }
  SUBCASE("best-so-far reward is monotone over the log") {
    auto result = run_evolution(space, eval, 8, 30, 3, 32, 2);
    double best = -1.0;
    for (const auto& r : result.log.records) {
      best = std::max(best, r.reward);
      CHECK(r.unique_so_far <= r.total_so_far);
    }
    CHECK(result.log.best_reward == doctest::Approx(best));
  }
  SUBCASE("finds the planted optimum on most seeds") {
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto result = run_evolution(space, eval, 16, 50, 4, 100 + seed, 2);
      hits += eval.evaluate(result.best, 0).reward == 1.0;
    }
    CHECK(hits >= 9);
  }
}

TEST_CASE("rnn ppo controller learns the planted reward") {
  auto space = make_space({3, 4, 5}, {4, 5}, 1);  // small but non-trivial
  Genome target = sample_random(space, 55);
  PlantedEvaluator eval(target);
  PpoConfig ppo;
  auto result = run_rnn_ppo(space, eval, 60, 12, 7, 2, ppo);

  const auto means = result.log.iteration_mean_rewards();
  REQUIRE(means.size() == 60);
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 6; ++i) {
    first += means[static_cast<std::size_t>(i)];
    last += means[static_cast<std::size_t>(54 + i)];
  }
  CHECK(last / 6.0 > first / 6.0 + 0.1);
  CHECK(!result.log.controller_loss.empty());

  SUBCASE("uniqueness ratio falls as the controller converges") {
    const auto quarters = result.log.uniqueness_quarters();
    REQUIRE(quarters.size() == 4);
    CHECK(quarters[3] < quarters[0]);
  }
  SUBCASE("ppo is reproducible") {
    auto again = run_rnn_ppo(space, eval, 60, 12, 7, 2, ppo);
    CHECK(again.log.summary_json() == result.log.summary_json());
  }
}
