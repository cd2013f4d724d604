#include "pyrsearch/search_space.hpp"

#include <algorithm>
#include <json.hpp>
#include <set>

namespace pyrsearch {

using nlohmann::json;

std::string op_name(BinaryOpKind op) {
  return op == BinaryOpKind::Sum ? "sum" : "gpool";
}

BinaryOpKind op_from_name(const std::string& name) {
  if (name == "sum") return BinaryOpKind::Sum;
  if (name == "gpool") return BinaryOpKind::GlobalPoolAttention;
  throw Error("schema-violation", "unknown op '" + name + "'");
}

std::string conv_mode_name(ConvMode mode) {
  return mode == ConvMode::Full ? "full" : "dwsep";
}

ConvMode conv_mode_from_name(const std::string& name) {
  if (name == "full") return ConvMode::Full;
  if (name == "dwsep") return ConvMode::DepthwiseSeparable;
  throw Error("schema-violation", "unknown conv mode '" + name + "'");
}

namespace {

bool sorted_unique(const std::vector<int>& v) {
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] <= v[i - 1]) return false;
  return true;
}

bool contains(const std::vector<int>& v, int x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

bool contains_op(const std::vector<BinaryOpKind>& ops, BinaryOpKind op) {
  return std::find(ops.begin(), ops.end(), op) != ops.end();
}

}  // namespace

std::vector<LevelId> SpaceConfig::allowed_intermediate_levels() const {
  std::vector<LevelId> out;
  for (LevelId level : output_levels)
    if (!contains(forbidden_intermediate_levels, level)) out.push_back(level);
  return out;
}

void SpaceConfig::check() const {
  auto fail = [](const std::string& msg) { throw Error("invalid-space", msg); };
  if (input_levels.empty()) fail("no input levels");
  if (output_levels.empty()) fail("no output levels");
  if (!sorted_unique(input_levels)) fail("input levels must be sorted and unique");
  if (!sorted_unique(output_levels)) fail("output levels must be sorted and unique");
  for (LevelId level : input_levels)
    if (level < 0 || level > 24) fail("input level out of range");
  for (LevelId level : output_levels)
    if (level < 0 || level > 24) fail("output level out of range");
  if (num_intermediate_cells < 0) fail("negative intermediate cell count");
  if (ops.empty()) fail("no binary ops");
  if (ops.size() > 2 || (ops.size() == 2 && ops[0] == ops[1])) fail("duplicate ops");
  if (feature_dim < 1) fail("feature_dim must be positive");
  if (num_intermediate_cells > 0 && allowed_intermediate_levels().empty())
    fail("no legal level for intermediate cells");
}

SpaceConfig make_space(std::vector<LevelId> input_levels, std::vector<LevelId> output_levels,
                       int num_intermediate_cells, std::vector<BinaryOpKind> ops,
                       int feature_dim, ConvMode conv_mode) {
  SpaceConfig space;
  space.input_levels = std::move(input_levels);
  space.output_levels = std::move(output_levels);
  space.num_intermediate_cells = num_intermediate_cells;
  if (!space.input_levels.empty())
    space.forbidden_intermediate_levels = {
        *std::min_element(space.input_levels.begin(), space.input_levels.end())};
  space.ops = std::move(ops);
  space.feature_dim = feature_dim;
  space.conv_mode = conv_mode;
  space.check();
  return space;
}

SpaceConfig space_preset(const std::string& name) {
  if (name == "default5") return make_space({3, 4, 5, 6, 7}, {3, 4, 5, 6, 7}, 2);
  if (name == "lite") {
    auto s = make_space({3, 4, 5, 6, 7}, {3, 4, 5, 6}, 11,
                        {BinaryOpKind::Sum, BinaryOpKind::GlobalPoolAttention}, 64,
                        ConvMode::DepthwiseSeparable);
    return s;
  }
  if (name == "toy3")
    return make_space({2, 3, 4}, {2, 3, 4}, 1,
                      {BinaryOpKind::Sum, BinaryOpKind::GlobalPoolAttention}, 16);
  throw Error("unknown-preset", "no space preset named '" + name + "'");
}

ValidationReport validate(const Genome& genome) {
  ValidationReport report;
  auto add = [&](int cell, const std::string& rule, const std::string& msg) {
    report.violations.push_back({cell, rule, msg});
  };

  const SpaceConfig& space = genome.space;
  try {
    space.check();
  } catch (const Error& e) {
    add(-1, "invalid-space", e.what());
    return report;
  }

  const int num_cells = space.num_cells();
  if (static_cast<int>(genome.cells.size()) != num_cells)
    add(-1, "cell-count",
        "expected " + std::to_string(num_cells) + " cells, got " +
            std::to_string(genome.cells.size()));

  // output_order must be a permutation of the output level set.
  std::vector<LevelId> sorted_order = genome.output_order;
  std::sort(sorted_order.begin(), sorted_order.end());
  if (sorted_order != space.output_levels)
    add(-1, "output-order-permutation", "output_order is not a permutation of output_levels");

  const auto allowed = space.allowed_intermediate_levels();
  const int num_inputs = space.num_inputs();
  for (int i = 0; i < static_cast<int>(genome.cells.size()); ++i) {
    const CellSpec& cell = genome.cells[i];
    const int pool = num_inputs + i;
    if (cell.input_a == cell.input_b)
      add(i, "replacement", "inputs must be selected without replacement");
    if (cell.input_a < 0 || cell.input_a >= pool || cell.input_b < 0 || cell.input_b >= pool)
      add(i, "index-range", "input index outside candidate pool of size " + std::to_string(pool));
    if (!contains_op(space.ops, cell.op))
      add(i, "op-not-allowed", "op '" + op_name(cell.op) + "' not in space");
    const bool intermediate = i < space.num_intermediate_cells;
    if (intermediate) {
      if (contains(space.forbidden_intermediate_levels, cell.out_level))
        add(i, "forbidden-intermediate-level",
            "level " + std::to_string(cell.out_level) + " is forbidden for intermediates");
      else if (!contains(allowed, cell.out_level))
        add(i, "intermediate-level-not-allowed",
            "level " + std::to_string(cell.out_level) + " outside the allowed intermediate set");
    } else {
      const int j = i - space.num_intermediate_cells;
      if (j < static_cast<int>(genome.output_order.size()) &&
          cell.out_level != genome.output_order[j])
        add(i, "output-order-mismatch",
            "output cell level " + std::to_string(cell.out_level) +
                " does not match output_order entry " + std::to_string(genome.output_order[j]));
    }
  }
  return report;
}

Genome sample_random(const SpaceConfig& space, std::uint64_t seed) {
  space.check();
  if (space.num_inputs() < 2)
    throw Error("degenerate-space", "need at least two initial candidates to pick a pair");
  Rng rng(seed);
  Genome genome;
  genome.space = space;
  genome.output_order = space.output_levels;
  rng.shuffle(genome.output_order);

  const auto allowed = space.allowed_intermediate_levels();
  for (int i = 0; i < space.num_cells(); ++i) {
    const int pool = space.num_inputs() + i;
    CellSpec cell;
    cell.input_a = rng.uniform_int(pool);
    cell.input_b = rng.uniform_int(pool - 1);
    if (cell.input_b >= cell.input_a) ++cell.input_b;
    cell.op = rng.pick(space.ops);
    if (i < space.num_intermediate_cells)
      cell.out_level = rng.pick(allowed);
    else
      cell.out_level = genome.output_order[static_cast<std::size_t>(i - space.num_intermediate_cells)];
    genome.cells.push_back(cell);
  }
  return genome;
}

namespace {

// Mutation move slots: one per free decision, plus output-order transpositions.
enum class MoveField { InputA, InputB, Level, Op, Transposition };
struct Move {
  MoveField field;
  int cell = 0;  // or first permutation index
  int other = 0; // second permutation index for transpositions
};

}  // namespace

Genome mutate(const Genome& genome, std::uint64_t seed) {
  if (!validate(genome).ok()) throw Error("invalid-genome", "mutate requires a valid genome");
  const SpaceConfig& space = genome.space;
  Rng rng(seed);

  std::vector<Move> moves;
  for (int i = 0; i < space.num_cells(); ++i) {
    moves.push_back({MoveField::InputA, i, 0});
    moves.push_back({MoveField::InputB, i, 0});
    moves.push_back({MoveField::Op, i, 0});
    if (i < space.num_intermediate_cells) moves.push_back({MoveField::Level, i, 0});
  }
  const int k = space.num_output_cells();
  for (int p = 0; p < k; ++p)
    for (int q = p + 1; q < k; ++q) moves.push_back({MoveField::Transposition, p, q});

  const auto allowed = space.allowed_intermediate_levels();
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const Move move = moves[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(moves.size())))];
    Genome out = genome;
    if (move.field == MoveField::Transposition) {
      auto& order = out.output_order;
      std::swap(order[static_cast<std::size_t>(move.cell)], order[static_cast<std::size_t>(move.other)]);
      for (int j = 0; j < k; ++j)
        out.cells[static_cast<std::size_t>(space.num_intermediate_cells + j)].out_level =
            order[static_cast<std::size_t>(j)];
      return out;
    }
    CellSpec& cell = out.cells[static_cast<std::size_t>(move.cell)];
    const int pool = space.num_inputs() + move.cell;
    std::vector<int> options;
    switch (move.field) {
      case MoveField::InputA:
        for (int v = 0; v < pool; ++v)
          if (v != cell.input_a && v != cell.input_b) options.push_back(v);
        if (options.empty()) continue;
        cell.input_a = options[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(options.size())))];
        return out;
      case MoveField::InputB:
        for (int v = 0; v < pool; ++v)
          if (v != cell.input_a && v != cell.input_b) options.push_back(v);
        if (options.empty()) continue;
        cell.input_b = options[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(options.size())))];
        return out;
      case MoveField::Level:
        for (LevelId level : allowed)
          if (level != cell.out_level) options.push_back(level);
        if (options.empty()) continue;
        cell.out_level = options[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(options.size())))];
        return out;
      case MoveField::Op: {
        std::vector<BinaryOpKind> ops;
        for (BinaryOpKind op : space.ops)
          if (op != cell.op) ops.push_back(op);
        if (ops.empty()) continue;
        cell.op = ops[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(ops.size())))];
        return out;
      }
      case MoveField::Transposition:
        break;
    }
  }
  throw Error("mutation-exhausted", "no legal single-decision mutation exists");
}

int decision_distance(const Genome& a, const Genome& b) {
  if (a.space.num_cells() != b.space.num_cells() ||
      a.output_order.size() != b.output_order.size())
    throw Error("shape-mismatch", "genomes come from differently shaped spaces");
  int distance = 0;
  const int intermediates = a.space.num_intermediate_cells;
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    distance += a.cells[i].input_a != b.cells[i].input_a;
    distance += a.cells[i].input_b != b.cells[i].input_b;
    distance += a.cells[i].op != b.cells[i].op;
    if (static_cast<int>(i) < intermediates)
      distance += a.cells[i].out_level != b.cells[i].out_level;
  }
  int order_diffs = 0;
  for (std::size_t i = 0; i < a.output_order.size(); ++i)
    order_diffs += a.output_order[i] != b.output_order[i];
  if (order_diffs == 2) {
    // A swapped pair counts as one decision.
    distance += 1;
  } else {
    distance += order_diffs;
  }
  return distance;
}

namespace {

// Decision layout per cell: a, b, [level if intermediate], op; then one
// permutation digit at the end. Rightmost digit moves fastest.
std::vector<int> decision_radices(const SpaceConfig& space) {
  std::vector<int> radices;
  const int allowed = static_cast<int>(space.allowed_intermediate_levels().size());
  for (int i = 0; i < space.num_cells(); ++i) {
    const int pool = space.num_inputs() + i;
    radices.push_back(pool);
    radices.push_back(pool - 1);
    if (i < space.num_intermediate_cells) radices.push_back(allowed);
    radices.push_back(static_cast<int>(space.ops.size()));
  }
  std::uint64_t fact = 1;
  for (int j = 2; j <= space.num_output_cells(); ++j) fact *= static_cast<std::uint64_t>(j);
  if (fact > static_cast<std::uint64_t>(INT32_MAX))
    throw Error("space-too-large", "too many output permutations to enumerate");
  radices.push_back(static_cast<int>(fact));
  return radices;
}

std::vector<LevelId> unrank_permutation(std::vector<LevelId> sorted_levels, int rank) {
  std::vector<LevelId> out;
  const int k = static_cast<int>(sorted_levels.size());
  std::vector<std::uint64_t> fact(static_cast<std::size_t>(k) + 1, 1);
  for (int i = 1; i <= k; ++i) fact[static_cast<std::size_t>(i)] = fact[static_cast<std::size_t>(i - 1)] * static_cast<std::uint64_t>(i);
  std::uint64_t r = static_cast<std::uint64_t>(rank);
  for (int i = 0; i < k; ++i) {
    const std::uint64_t f = fact[static_cast<std::size_t>(k - 1 - i)];
    const auto idx = static_cast<std::size_t>(r / f);
    out.push_back(sorted_levels[idx]);
    sorted_levels.erase(sorted_levels.begin() + static_cast<std::ptrdiff_t>(idx));
    r %= f;
  }
  return out;
}

Genome genome_from_digits(const SpaceConfig& space, const std::vector<int>& digits) {
  Genome genome;
  genome.space = space;
  const auto allowed = space.allowed_intermediate_levels();
  std::size_t d = 0;
  for (int i = 0; i < space.num_cells(); ++i) {
    CellSpec cell;
    cell.input_a = digits[d++];
    cell.input_b = digits[d++];
    if (cell.input_b >= cell.input_a) ++cell.input_b;
    if (i < space.num_intermediate_cells)
      cell.out_level = allowed[static_cast<std::size_t>(digits[d++])];
    cell.op = space.ops[static_cast<std::size_t>(digits[d++])];
    genome.cells.push_back(cell);
  }
  genome.output_order = unrank_permutation(space.output_levels, digits[d]);
  for (int j = 0; j < space.num_output_cells(); ++j)
    genome.cells[static_cast<std::size_t>(space.num_intermediate_cells + j)].out_level =
        genome.output_order[static_cast<std::size_t>(j)];
  return genome;
}

}  // namespace

std::uint64_t enumeration_count(const SpaceConfig& space) {
  space.check();
  if (space.num_inputs() < 2)
    throw Error("degenerate-space", "need at least two initial candidates");
  unsigned __int128 count = 1;
  const int allowed = static_cast<int>(space.allowed_intermediate_levels().size());
  for (int i = 0; i < space.num_cells(); ++i) {
    const unsigned __int128 pool = static_cast<unsigned __int128>(space.num_inputs() + i);
    count *= pool * (pool - 1);
    if (i < space.num_intermediate_cells) count *= static_cast<unsigned __int128>(allowed);
    count *= static_cast<unsigned __int128>(space.ops.size());
    if (count > static_cast<unsigned __int128>(UINT64_MAX))
      throw Error("count-overflow", "space size exceeds 2^64");
  }
  for (int j = 2; j <= space.num_output_cells(); ++j) {
    count *= static_cast<unsigned __int128>(j);
    if (count > static_cast<unsigned __int128>(UINT64_MAX))
      throw Error("count-overflow", "space size exceeds 2^64");
  }
  return static_cast<std::uint64_t>(count);
}

GenomeEnumerator::GenomeEnumerator(SpaceConfig space, std::uint64_t cap)
    : space_(std::move(space)) {
  count_ = enumeration_count(space_);
  if (count_ > cap)
    throw Error("space-too-large",
                "space holds " + std::to_string(count_) + " genomes, cap is " + std::to_string(cap));
  radices_ = decision_radices(space_);
  digits_.assign(radices_.size(), 0);
}

bool GenomeEnumerator::next(Genome& out) {
  if (exhausted_) return false;
  if (!first_) {
    int pos = static_cast<int>(digits_.size()) - 1;
    while (pos >= 0) {
      if (++digits_[static_cast<std::size_t>(pos)] < radices_[static_cast<std::size_t>(pos)]) break;
      digits_[static_cast<std::size_t>(pos)] = 0;
      --pos;
    }
    if (pos < 0) {
      exhausted_ = true;
      return false;
    }
  }
  first_ = false;
  out = genome_from_digits(space_, digits_);
  return true;
}

std::vector<Genome> enumerate_all(const SpaceConfig& space, std::uint64_t cap) {
  GenomeEnumerator it(space, cap);
  std::vector<Genome> out;
  out.reserve(it.count());
  Genome g;
  while (it.next(g)) out.push_back(g);
  return out;
}

Genome preset(const std::string& name) {
  const auto sum = BinaryOpKind::Sum;
  const auto gpool = BinaryOpKind::GlobalPoolAttention;
  if (name == "nasfpn-7cell") {
    // Transcribed from the published 7-cell diagram: inputs C3..C7 are
    // candidates 0..4, two intermediate cells at level 4, then the five
    // output cells producing P3, P4, P5, P7, P6 in that order.
    Genome genome;
    genome.space = space_preset("default5");
    genome.cells = {
        {1, 3, 4, gpool},   // gp(C4, C6) -> 4
        {1, 5, 4, sum},     // sum(C4, cell0) -> 4
        {0, 6, 3, sum},     // P3 = sum(C3, cell1)
        {6, 7, 4, sum},     // P4 = sum(cell1, P3)
        {7, 8, 5, gpool},   // P5 = gp(P3, P4)
        {6, 9, 7, gpool},   // P7 = gp(cell1, P5)
        {9, 10, 6, gpool},  // P6 = gp(P5, P7)
    };
    genome.output_order = {3, 4, 5, 7, 6};
    return genome;
  }
  if (name == "vanilla-fpn") {
    // Top-down pathway: each output is the lateral input plus the upsampled
    // next-coarser output. The coarsest cell has no coarser output to pull
    // from, so it merges the two coarsest inputs instead.
    Genome genome;
    genome.space = space_preset("default5");
    genome.space.num_intermediate_cells = 0;
    genome.cells = {
        {4, 3, 7, sum},  // P7 = sum(C7, C6)
        {3, 5, 6, sum},  // P6 = sum(C6, P7)
        {2, 6, 5, sum},  // P5 = sum(C5, P6)
        {1, 7, 4, sum},  // P4 = sum(C4, P5)
        {0, 8, 3, sum},  // P3 = sum(C3, P4)
    };
    genome.output_order = {7, 6, 5, 4, 3};
    return genome;
  }
  throw Error("unknown-preset", "no genome preset named '" + name + "'");
}

namespace {

json space_json(const SpaceConfig& space) {
  json ops = json::array();
  for (BinaryOpKind op : space.ops) ops.push_back(op_name(op));
  return json{{"input_levels", space.input_levels},
              {"output_levels", space.output_levels},
              {"num_intermediate_cells", space.num_intermediate_cells},
              {"forbidden_intermediate_levels", space.forbidden_intermediate_levels},
              {"ops", ops},
              {"feature_dim", space.feature_dim},
              {"conv_mode", conv_mode_name(space.conv_mode)}};
}

void require_keys(const json& obj, const std::vector<std::string>& required,
                  const std::vector<std::string>& optional, const std::string& where) {
  if (!obj.is_object()) throw Error("schema-violation", where + " must be an object");
  for (const auto& key : required)
    if (!obj.contains(key)) throw Error("schema-violation", where + " missing key '" + key + "'");
  for (const auto& item : obj.items()) {
    const std::string& key = item.key();
    if (std::find(required.begin(), required.end(), key) == required.end() &&
        std::find(optional.begin(), optional.end(), key) == optional.end())
      throw Error("schema-violation", where + " has unknown key '" + key + "'");
  }
}

std::vector<int> int_array(const json& arr, const std::string& where) {
  if (!arr.is_array()) throw Error("schema-violation", where + " must be an array");
  std::vector<int> out;
  for (const auto& v : arr) {
    if (!v.is_number_integer()) throw Error("schema-violation", where + " must hold integers");
    out.push_back(v.get<int>());
  }
  return out;
}

SpaceConfig space_from(const json& obj) {
  require_keys(obj, {"input_levels", "output_levels", "num_intermediate_cells", "ops",
                     "feature_dim", "conv_mode"},
               {"forbidden_intermediate_levels"}, "space");
  SpaceConfig space;
  space.input_levels = int_array(obj.at("input_levels"), "input_levels");
  space.output_levels = int_array(obj.at("output_levels"), "output_levels");
  if (!obj.at("num_intermediate_cells").is_number_integer())
    throw Error("schema-violation", "num_intermediate_cells must be an integer");
  space.num_intermediate_cells = obj.at("num_intermediate_cells").get<int>();
  if (obj.contains("forbidden_intermediate_levels"))
    space.forbidden_intermediate_levels =
        int_array(obj.at("forbidden_intermediate_levels"), "forbidden_intermediate_levels");
  else if (!space.input_levels.empty())
    space.forbidden_intermediate_levels = {
        *std::min_element(space.input_levels.begin(), space.input_levels.end())};
  if (!obj.at("ops").is_array()) throw Error("schema-violation", "ops must be an array");
  for (const auto& op : obj.at("ops")) {
    if (!op.is_string()) throw Error("schema-violation", "ops must hold strings");
    space.ops.push_back(op_from_name(op.get<std::string>()));
  }
  if (!obj.at("feature_dim").is_number_integer())
    throw Error("schema-violation", "feature_dim must be an integer");
  space.feature_dim = obj.at("feature_dim").get<int>();
  if (!obj.at("conv_mode").is_string())
    throw Error("schema-violation", "conv_mode must be a string");
  space.conv_mode = conv_mode_from_name(obj.at("conv_mode").get<std::string>());
  return space;
}

json parse_text(const std::string& text) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw Error("parse-error", "malformed JSON");
  return doc;
}

}  // namespace

std::string to_json(const Genome& genome) {
  json cells = json::array();
  for (const CellSpec& cell : genome.cells)
    cells.push_back(json{{"a", cell.input_a},
                         {"b", cell.input_b},
                         {"level", cell.out_level},
                         {"op", op_name(cell.op)}});
  json doc{{"version", 1},
           {"space", space_json(genome.space)},
           {"cells", cells},
           {"output_order", genome.output_order}};
  return doc.dump();
}

Genome parse_genome(const std::string& text) {
  const json doc = parse_text(text);
  require_keys(doc, {"version", "space", "cells", "output_order"}, {}, "genome");
  if (!doc.at("version").is_number_integer() || doc.at("version").get<int>() != 1)
    throw Error("schema-violation", "unsupported genome schema version");
  Genome genome;
  genome.space = space_from(doc.at("space"));
  if (!doc.at("cells").is_array()) throw Error("schema-violation", "cells must be an array");
  for (const auto& c : doc.at("cells")) {
    require_keys(c, {"a", "b", "level", "op"}, {}, "cell");
    if (!c.at("a").is_number_integer() || !c.at("b").is_number_integer() ||
        !c.at("level").is_number_integer() || !c.at("op").is_string())
      throw Error("schema-violation", "cell fields have wrong types");
    CellSpec cell;
    cell.input_a = c.at("a").get<int>();
    cell.input_b = c.at("b").get<int>();
    cell.out_level = c.at("level").get<int>();
    cell.op = op_from_name(c.at("op").get<std::string>());
    genome.cells.push_back(cell);
  }
  genome.output_order = int_array(doc.at("output_order"), "output_order");
  return genome;
}

Genome from_json(const std::string& text) {
  Genome genome = parse_genome(text);
  ValidationReport report = validate(genome);
  if (!report.ok()) {
    std::string msg = "genome fails validation:";
    for (const Violation& v : report.violations)
      msg += " [cell " + std::to_string(v.cell_index) + " " + v.rule + "]";
    throw Error("invalid-genome", msg);
  }
  return genome;
}

std::string space_to_json(const SpaceConfig& space) { return space_json(space).dump(); }

SpaceConfig space_from_json(const std::string& text) {
  SpaceConfig space = space_from(parse_text(text));
  space.check();
  return space;
}

std::string genome_hash(const Genome& genome) { return to_hex(fnv1a64(to_json(genome))); }

}  // namespace pyrsearch
