#include <doctest.h>

#include <algorithm>
#include <set>

#include "pyrsearch/search_space.hpp"

using namespace pyrsearch;

namespace {

// Brute-force oracle for the space size: walk the decision tree directly,
// independent of enumeration_count's closed form.
std::uint64_t count_by_tree(const SpaceConfig& space) {
  std::uint64_t per_cells = 1;
  const auto allowed = space.allowed_intermediate_levels();
  for (int i = 0; i < space.num_cells(); ++i) {
    std::uint64_t pairs = 0;
    const int pool = space.num_inputs() + i;
    for (int a = 0; a < pool; ++a)
      for (int b = 0; b < pool; ++b)
        if (a != b) ++pairs;
    per_cells *= pairs * space.ops.size();
    if (i < space.num_intermediate_cells) per_cells *= allowed.size();
  }
  std::vector<LevelId> order = space.output_levels;
  std::uint64_t perms = 0;
  std::sort(order.begin(), order.end());
  do {
    ++perms;
  } while (std::next_permutation(order.begin(), order.end()));
  return per_cells * perms;
}

SpaceConfig tiny12_space() {
  // 3 inputs, 0 intermediates, 1 output cell, 2 ops -> 3*2*1*2 = 12 genomes.
  return make_space({3, 4, 5}, {4}, 0);
}

}  // namespace

TEST_CASE("presets validate and match the published structure") {
  Genome nasfpn = preset("nasfpn-7cell");
  CHECK(validate(nasfpn).ok());
  CHECK(nasfpn.cells.size() == 7);
  std::set<LevelId> outs(nasfpn.output_order.begin(), nasfpn.output_order.end());
  CHECK(outs == std::set<LevelId>{3, 4, 5, 6, 7});

  Genome fpn = preset("vanilla-fpn");
  CHECK(validate(fpn).ok());
  for (const CellSpec& cell : fpn.cells) CHECK(cell.op == BinaryOpKind::Sum);

  CHECK_THROWS_WITH_AS(preset("nope"), doctest::Contains("unknown-preset"), Error);
}

TEST_CASE("validate reports every violation") {
  Genome genome = preset("nasfpn-7cell");

  SUBCASE("selection with replacement") {
    genome.cells[0].input_a = genome.cells[0].input_b = 0;
    auto report = validate(genome);
    REQUIRE(!report.ok());
    CHECK(report.violations[0].rule == "replacement");
    CHECK(report.violations[0].cell_index == 0);
  }
  SUBCASE("forbidden intermediate level (the stride-8 analog)") {
    genome.cells[0].out_level = 3;
    auto report = validate(genome);
    REQUIRE(!report.ok());
    CHECK(report.violations[0].rule == "forbidden-intermediate-level");
  }
  SUBCASE("index outside the candidate pool") {
    genome.cells[0].input_b = 9;
    CHECK(!validate(genome).ok());
  }
  SUBCASE("output order must stay a permutation") {
    genome.output_order = {3, 3, 5, 7, 6};
    auto report = validate(genome);
    bool found = false;
    for (const auto& v : report.violations) found |= v.rule == "output-order-permutation";
    CHECK(found);
  }
  SUBCASE("multiple violations are all listed") {
    genome.cells[0].input_a = genome.cells[0].input_b;
    genome.cells[1].out_level = 3;
    CHECK(validate(genome).violations.size() >= 2);
  }
}

TEST_CASE("sample_random is deterministic and closed over the valid set") {
  auto space = space_preset("default5");
  Genome a = sample_random(space, 42);
  Genome b = sample_random(space, 42);
  CHECK(to_json(a) == to_json(b));
  CHECK(to_json(a) != to_json(sample_random(space, 43)));

  for (std::uint64_t seed = 0; seed < 1000; ++seed)
    CHECK(validate(sample_random(space, seed)).ok());

  SUBCASE("sum-only space never samples attention") {
    auto sum_space = make_space({3, 4, 5, 6, 7}, {3, 4, 5, 6, 7}, 2, {BinaryOpKind::Sum});
    for (std::uint64_t seed = 0; seed < 50; ++seed)
      for (const CellSpec& cell : sample_random(sum_space, seed).cells)
        CHECK(cell.op == BinaryOpKind::Sum);
  }
  SUBCASE("degenerate space is rejected") {
    CHECK_THROWS_WITH_AS(sample_random(make_space({3}, {3}, 0), 1),
                         doctest::Contains("degenerate-space"), Error);
  }
}

TEST_CASE("mutate changes exactly one decision and stays valid") {
  Genome base = preset("nasfpn-7cell");
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    Genome child = mutate(base, seed);
    CHECK(validate(child).ok());
    CHECK(decision_distance(base, child) == 1);
  }

  SUBCASE("op flips leave the indices unchanged") {
    // Find a seed whose move is an op flip and check nothing else moved.
    int flips = 0;
    for (std::uint64_t seed = 0; seed < 200 && flips < 5; ++seed) {
      Genome child = mutate(base, seed);
      for (std::size_t i = 0; i < base.cells.size(); ++i) {
        if (child.cells[i].op != base.cells[i].op) {
          ++flips;
          CHECK(child.cells[i].input_a == base.cells[i].input_a);
          CHECK(child.cells[i].input_b == base.cells[i].input_b);
          CHECK(child.cells[i].out_level == base.cells[i].out_level);
        }
      }
    }
    CHECK(flips > 0);
  }
}

TEST_CASE("enumerate matches the closed-form count") {
  SUBCASE("12-genome toy space") {
    auto genomes = enumerate_all(tiny12_space());
    CHECK(genomes.size() == 12);
    CHECK(enumeration_count(tiny12_space()) == 12);
  }
  SUBCASE("sum-only halves the op factor") {
    auto space = make_space({3, 4, 5}, {4}, 0, {BinaryOpKind::Sum});
    CHECK(enumeration_count(space) == 6);
    CHECK(enumerate_all(space).size() == 6);
  }
  SUBCASE("two output cells double via output_order permutations") {
    auto two = make_space({3, 4, 5}, {4, 5}, 0, {BinaryOpKind::Sum});
    // cell0 pool 3 (6 pairs), cell1 pool 4 (12 pairs), 2 permutations.
    CHECK(enumeration_count(two) == 6ull * 12 * 2);
  }
  SUBCASE("every enumerated genome is valid and unique") {
    auto space = make_space({2, 3, 4}, {3, 4}, 1);
    auto genomes = enumerate_all(space);
    CHECK(genomes.size() == enumeration_count(space));
    CHECK(genomes.size() == count_by_tree(space));
    std::set<std::string> seen;
    for (const Genome& g : genomes) {
      CHECK(validate(g).ok());
      seen.insert(genome_hash(g));
    }
    CHECK(seen.size() == genomes.size());
  }
  SUBCASE("cap is enforced") {
    CHECK_THROWS_WITH_AS(enumerate_all(space_preset("default5"), 1000),
                         doctest::Contains("space-too-large"), Error);
  }
}

TEST_CASE("count oracle property over random small spaces") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int base = 2 + rng.uniform_int(3);
    const int nin = 2 + rng.uniform_int(2);
    std::vector<LevelId> levels;
    for (int i = 0; i < nin; ++i) levels.push_back(base + i);
    std::vector<LevelId> outputs(levels.end() - 2, levels.end());
    const int intermediates = rng.uniform_int(2);
    std::vector<BinaryOpKind> ops = {BinaryOpKind::Sum};
    if (rng.uniform_int(2) == 1) ops.push_back(BinaryOpKind::GlobalPoolAttention);
    auto space = make_space(levels, outputs, intermediates, ops);
    auto genomes = enumerate_all(space, 200000);
    CHECK(genomes.size() == enumeration_count(space));
    CHECK(genomes.size() == count_by_tree(space));
    for (std::size_t i = 0; i < genomes.size(); i += 97)
      CHECK(validate(genomes[i]).ok());
  }
}

TEST_CASE("json round-trip is the identity on valid genomes") {
  auto space = space_preset("default5");
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    Genome g = sample_random(space, seed);
    Genome back = from_json(to_json(g));
    CHECK(back == g);
    CHECK(genome_hash(back) == genome_hash(g));
  }

  SUBCASE("replacement is rejected on load") {
    Genome g = preset("nasfpn-7cell");
    g.cells[2].input_a = g.cells[2].input_b;
    std::string text = to_json(g);
    CHECK_THROWS_WITH_AS(from_json(text), doctest::Contains("invalid-genome"), Error);
  }
  SUBCASE("unknown op string is a schema violation") {
    std::string text = to_json(preset("nasfpn-7cell"));
    auto pos = text.find("gpool");
    text.replace(pos, 5, "gmean");
    CHECK_THROWS_WITH_AS(from_json(text), doctest::Contains("schema-violation"), Error);
  }
  SUBCASE("garbage is a parse error") {
    CHECK_THROWS_WITH_AS(from_json("{nope"), doctest::Contains("parse-error"), Error);
  }
  SUBCASE("unknown keys are rejected") {
    std::string text = to_json(preset("vanilla-fpn"));
    text.insert(1, "\"extra\":1,");
    CHECK_THROWS_WITH_AS(from_json(text), doctest::Contains("schema-violation"), Error);
  }
}

TEST_CASE("space json round-trip and presets") {
  for (const char* name : {"default5", "lite", "toy3"}) {
    auto space = space_preset(name);
    CHECK(space_from_json(space_to_json(space)) == space);
  }
  CHECK(space_preset("lite").conv_mode == ConvMode::DepthwiseSeparable);
  CHECK(space_preset("lite").output_levels == std::vector<LevelId>{3, 4, 5, 6});
  CHECK(space_preset("default5").forbidden_intermediate_levels == std::vector<LevelId>{3});
}
