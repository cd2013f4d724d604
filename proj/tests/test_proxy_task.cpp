#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "pyrsearch/proxy_task.hpp"

using namespace pyrsearch;

namespace {

// Small stackable space over levels 2..3 for fast end-to-end runs.
SpaceConfig tiny_space() {
  auto space = make_space({2, 3}, {2, 3}, 1,
                          {BinaryOpKind::Sum, BinaryOpKind::GlobalPoolAttention}, 8);
  return space;
}

Genome tiny_genome() {
  Genome g;
  g.space = tiny_space();
  g.cells = {
      {0, 1, 3, BinaryOpKind::Sum},   // intermediate at 3
      {0, 2, 2, BinaryOpKind::Sum},   // P2 = sum(C2, cell0)
      {1, 3, 3, BinaryOpKind::Sum},   // P3 = sum(C3, P2)
  };
  g.output_order = {2, 3};
  return g;
}

std::vector<std::map<LevelId, Tensor4>> target_maps(const std::vector<SyntheticScene>& scenes) {
  std::vector<std::map<LevelId, Tensor4>> out;
  for (const auto& scene : scenes) out.push_back(scene.targets);
  return out;
}

}  // namespace

TEST_CASE("dataset generation is banded, centered and deterministic") {
  TaskConfig cfg = task_preset("default");
  cfg.seed = 99;
  Dataset a = generate_dataset(cfg);
  Dataset b = generate_dataset(cfg);
  REQUIRE(a.train.size() == static_cast<std::size_t>(cfg.train_scenes));
  REQUIRE(a.val.size() == static_cast<std::size_t>(cfg.val_scenes));

  SUBCASE("identical seeds give byte-identical datasets") {
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      CHECK(a.train[i].image.data == b.train[i].image.data);
      for (const auto& [level, t] : a.train[i].targets)
        CHECK(t.data == b.train[i].targets.at(level).data);
    }
    cfg.seed = 100;
    Dataset c = generate_dataset(cfg);
    CHECK(a.train[0].image.data != c.train[0].image.data);
  }
  SUBCASE("every object lands on exactly the level of its size band") {
    for (const auto& scene : a.train) {
      std::map<LevelId, int> marks;
      for (const auto& [level, t] : scene.targets) {
        int count = 0;
        for (double v : t.data) count += v > 0.5;
        marks[level] = count;
      }
      std::map<LevelId, int> expected;
      for (LevelId level : cfg.levels) expected[level] = 0;
      for (const auto& obj : scene.objects) {
        // band membership: side in [edges[i], edges[i+1])
        const std::size_t band = static_cast<std::size_t>(
            std::find(cfg.levels.begin(), cfg.levels.end(), obj.level) - cfg.levels.begin());
        CHECK(obj.side >= cfg.band_edges[band]);
        CHECK(obj.side < cfg.band_edges[band + 1]);
        expected[obj.level] += 1;
      }
      // Objects can share a heatmap cell, so marks <= objects per level.
      for (LevelId level : cfg.levels) {
        CHECK(marks[level] <= expected[level]);
        if (expected[level] > 0) CHECK(marks[level] >= 1);
      }
    }
  }
  SUBCASE("empty scenes have all-zero heatmaps") {
    TaskConfig empty = cfg;
    empty.min_objects = empty.max_objects = 0;
    Dataset d = generate_dataset(empty);
    for (const auto& [level, t] : d.train[0].targets)
      for (double v : t.data) CHECK(v == 0.0);
  }
}

TEST_CASE("band example: side 6 with bands 4/8/16/32 lands on the finest level") {
  TaskConfig cfg;
  cfg.image_side = 64;
  cfg.levels = {2, 3, 4};
  cfg.band_edges = {4, 8, 16, 32};
  cfg.min_objects = cfg.max_objects = 1;
  cfg.seed = 0;
  // Scan a few seeds for an object of side 6 and check its level.
  bool found = false;
  for (std::uint64_t s = 0; s < 200 && !found; ++s) {
    cfg.seed = s;
    Dataset d = generate_dataset(cfg);
    for (const auto& scene : d.train)
      for (const auto& obj : scene.objects)
        if (obj.side == 6) {
          CHECK(obj.level == 2);
          found = true;
        }
  }
  CHECK(found);
}

TEST_CASE("average precision basics") {
  SUBCASE("perfect hard predictions give AP 1") {
    CHECK(average_precision({1, 0, 1, 0}, {1, 0, 1, 0}) == doctest::Approx(1.0));
  }
  SUBCASE("no positives defines AP 0") {
    CHECK(average_precision({0.3, 0.9}, {0, 0}) == 0.0);
  }
  SUBCASE("monotone transforms leave AP unchanged") {
    Rng rng(4);
    std::vector<double> scores, positives;
    for (int i = 0; i < 500; ++i) {
      scores.push_back(rng.normal());
      positives.push_back(rng.uniform01() < 0.3 ? 1.0 : 0.0);
    }
    const double base = average_precision(scores, positives);
    std::vector<double> warped;
    for (double s : scores) warped.push_back(std::exp(2.0 * s) + 7.0);
    CHECK(average_precision(warped, positives) == doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("random scores on balanced targets approach the positive rate") {
    double total = 0.0;
    const double rate = 0.5;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      std::vector<double> scores, positives;
      for (int i = 0; i < 2000; ++i) {
        scores.push_back(rng.uniform01());
        positives.push_back(rng.uniform01() < rate ? 1.0 : 0.0);
      }
      total += average_precision(scores, positives);
    }
    CHECK(total / 10.0 == doctest::Approx(rate).epsilon(0.1));
  }
}

TEST_CASE("reward evaluation is deterministic and bounded") {
  TaskConfig cfg = task_preset("tiny");
  cfg.seed = 7;
  cfg.steps = 30;  // keep the unit test quick
  Genome g = tiny_genome();
  RewardRecord a = evaluate_reward(g, cfg, 1, 5);
  RewardRecord b = evaluate_reward(g, cfg, 1, 5);
  CHECK(a.reward == b.reward);
  CHECK(a.reward >= 0.0);
  CHECK(a.reward <= 1.0);
  CHECK(a.genome_hash == genome_hash(g));

  RewardRecord c = evaluate_reward(g, cfg, 1, 6);
  CHECK(a.reward != doctest::Approx(c.reward).epsilon(1e-15));  // seed matters
}

TEST_CASE("training improves validation AP over an untrained model") {
  TaskConfig cfg = task_preset("tiny");
  cfg.seed = 21;
  cfg.steps = 150;
  Genome g = tiny_genome();
  Dataset data = generate_dataset(cfg);

  ProxyModel untrained = build_model(g, cfg, 1, false, 3);
  auto preds0 = predict(untrained, data.val);
  const double ap0 = evaluate_ap(preds0, target_maps(data.val));

  RewardRecord trained = evaluate_reward(g, cfg, 1, 3);
  CHECK(trained.reward > ap0);
  CHECK(trained.reward > 0.3);  // the tiny task is easy enough to learn
}

TEST_CASE("deep supervision and early exit") {
  TaskConfig cfg = task_preset("tiny");
  cfg.seed = 13;
  cfg.steps = 60;
  Genome g = tiny_genome();
  Dataset data = generate_dataset(cfg);
  ProxyModel model = train_deeply_supervised(g, cfg, 3, 11);

  SUBCASE("stage bounds are enforced") {
    CHECK_THROWS_WITH_AS(evaluate_early_exit(model, 0, data.val),
                         doctest::Contains("stage-out-of-range"), Error);
    CHECK_THROWS_WITH_AS(evaluate_early_exit(model, 4, data.val),
                         doctest::Contains("stage-out-of-range"), Error);
  }
  SUBCASE("compute strictly increases with the exit stage") {
    auto e1 = evaluate_early_exit(model, 1, data.val);
    auto e2 = evaluate_early_exit(model, 2, data.val);
    auto e3 = evaluate_early_exit(model, 3, data.val);
    CHECK(e1.macs < e2.macs);
    CHECK(e2.macs < e3.macs);
    for (const auto& e : {e1, e2, e3}) {
      CHECK(e.ap >= 0.0);
      CHECK(e.ap <= 1.0);
    }
  }
  SUBCASE("per-stage losses stay finite and fall in median") {
    TaskConfig longer = cfg;
    longer.steps = 120;
    ProxyModel trained = train_deeply_supervised(g, longer, 3, 11);
    REQUIRE(trained.stage_loss_history.size() == 120);
    auto stage_median = [&](int stage, std::size_t lo, std::size_t hi) {
      std::vector<double> window;
      for (std::size_t i = lo; i < hi; ++i)
        window.push_back(trained.stage_loss_history[i][static_cast<std::size_t>(stage)]);
      std::sort(window.begin(), window.end());
      return window[window.size() / 2];
    };
    for (int stage = 0; stage < 3; ++stage) {
      for (const auto& step : trained.stage_loss_history)
        CHECK(std::isfinite(step[static_cast<std::size_t>(stage)]));
      CHECK(stage_median(stage, 90, 120) < stage_median(stage, 0, 30));
    }
  }
  SUBCASE("final exit equals a straight full forward") {
    auto e3 = evaluate_early_exit(model, 3, data.val);
    auto preds = predict(model, data.val);
    CHECK(e3.ap == doctest::Approx(evaluate_ap(preds, target_maps(data.val))).epsilon(1e-12));
  }
  SUBCASE("stage-1 parameters receive gradient through the per-stage heads") {
    ProxyModel before = build_model(g, cfg, 3, true, 11);
    TaskConfig short_cfg = cfg;
    short_cfg.steps = 3;
    ProxyModel trained = build_model(g, short_cfg, 3, true, 11);
    train_model(trained, generate_dataset(short_cfg));
    int stage1_moved = 0;
    for (std::size_t i = 0; i < trained.graph.nodes.size(); ++i) {
      if (trained.graph.nodes[i].stage != 1 ||
          trained.graph.nodes[i].kind != NodeKind::ConvBlock)
        continue;
      const std::string name = "node" + std::to_string(i) + ".w";
      const Param* p = before.state.params.find(name);
      const Param* q = trained.state.params.find(name);
      REQUIRE(p != nullptr);
      REQUIRE(q != nullptr);
      stage1_moved += p->value.data != q->value.data;
    }
    CHECK(stage1_moved > 0);
  }
}

TEST_CASE("scale specialization: fine heads beat coarse heads on small objects") {
  // Heads are compared on a common grid (the finest) so the plain base-rate
  // advantage of small coarse grids cannot mask the effect.
  TaskConfig cfg = task_preset("default");
  cfg.seed = 7;
  cfg.steps = 500;
  cfg.train_scenes = 64;
  cfg.contrast_min = 1.2;
  cfg.contrast_max = 1.8;
  cfg.noise_sigma = 0.10;
  Genome g;
  g.space = space_preset("toy3");
  g.cells = {{1, 2, 3, BinaryOpKind::Sum},
             {0, 3, 2, BinaryOpKind::Sum},
             {1, 4, 3, BinaryOpKind::Sum},
             {2, 5, 4, BinaryOpKind::Sum}};
  g.output_order = {2, 3, 4};

  Dataset data = generate_dataset(cfg);
  ProxyModel model = build_model(g, cfg, 1, false, 0);
  train_model(model, data);
  auto preds = predict(model, data.val);

  const LevelId fine = cfg.levels.front();
  auto small_band_ap_of_head = [&](LevelId head) {
    std::vector<double> scores, positives;
    const int grid = cfg.image_side >> fine;
    const int scale = 1 << (head - fine);
    for (std::size_t i = 0; i < data.val.size(); ++i) {
      Tensor4 target = Tensor4::zeros(1, 1, grid, grid);
      for (const ObjectSpec& obj : data.val[i].objects)
        if (obj.level == fine)
          target.at(0, 0, (obj.y + obj.side / 2) >> fine, (obj.x + obj.side / 2) >> fine) = 1.0;
      const Tensor4& pred = preds[i].at(head);
      for (int y = 0; y < grid; ++y)
        for (int x = 0; x < grid; ++x) {
          scores.push_back(pred.at(0, 0, y / scale, x / scale));
          positives.push_back(target.at(0, 0, y, x));
        }
    }
    return average_precision(scores, positives);
  };
  const double fine_ap = small_band_ap_of_head(2);
  const double coarse_ap = small_band_ap_of_head(4);
  CAPTURE(fine_ap);
  CAPTURE(coarse_ap);
  CHECK(fine_ap > coarse_ap);
}

TEST_CASE("deep supervision at stack 1 equals plain training") {
  TaskConfig cfg = task_preset("tiny");
  cfg.seed = 31;
  cfg.steps = 20;
  Genome g = tiny_genome();
  Dataset data = generate_dataset(cfg);

  ProxyModel deep = build_model(g, cfg, 1, true, 9);
  ProxyModel plain = build_model(g, cfg, 1, false, 9);
  train_model(deep, data);
  train_model(plain, data);
  auto pd = predict(deep, data.val);
  auto pp = predict(plain, data.val);
  for (std::size_t i = 0; i < pd.size(); ++i)
    for (const auto& [level, t] : pd[i]) CHECK(t.data == pp[i].at(level).data);
}

TEST_CASE("degenerate coarse genome validates, compiles and stacks") {
  for (const char* name : {"default5", "toy3"}) {
    auto space = space_preset(name);
    Genome g = degenerate_coarse_genome(space);
    CHECK(validate(g).ok());
    auto inputs = PyramidInputSpec::uniform(128, space.input_levels, 8);
    Genome sized = g;
    sized.space.feature_dim = 8;
    CHECK_NOTHROW(stack(sized, 3, inputs).check_invariants());
  }
}

TEST_CASE("task config json round-trip") {
  for (const char* name : {"default", "tiny", "fivelevel"}) {
    TaskConfig cfg = task_preset(name);
    cfg.seed = 42;
    TaskConfig back = task_from_json(task_to_json(cfg));
    CHECK(task_to_json(back) == task_to_json(cfg));
  }
  CHECK_THROWS_WITH_AS(task_from_json("{bad"), doctest::Contains("parse-error"), Error);
}
