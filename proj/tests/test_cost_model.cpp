#include <doctest.h>

#include "pyrsearch/cost_model.hpp"

using namespace pyrsearch;

namespace {

GraphNode conv_node(int cin, int cout, int side, ConvMode mode = ConvMode::Full,
                    ConvBlockKind kind = ConvBlockKind::Merge3x3) {
  GraphNode node;
  node.kind = NodeKind::ConvBlock;
  node.conv_kind = kind;
  node.conv_mode = mode;
  node.in_channels = cin;
  node.channels = cout;
  node.height = node.width = side;
  return node;
}

}  // namespace

TEST_CASE("conv block closed forms") {
  // 3x3 full conv, Cin=Cout=256 on a 5x5 map: 2*9*256*256*25 flops.
  CHECK(2 * op_units(conv_node(256, 256, 5)) == 29491200ull);
  CHECK(op_params(conv_node(256, 256, 5)) == 9ull * 256 * 256 + 2 * 256);

  // Depthwise separable split.
  GraphNode dw = conv_node(64, 64, 8, ConvMode::DepthwiseSeparable);
  CHECK(2 * op_units(dw) == 2ull * (9 * 64 + 64 * 64) * 64);
  CHECK(op_params(dw) == 9ull * 64 + 64ull * 64 + 2 * 64);

  // 1x1 projection.
  GraphNode proj = conv_node(8, 16, 4, ConvMode::Full, ConvBlockKind::Projection1x1);
  CHECK(2 * op_units(proj) == 2ull * 8 * 16 * 16);
  CHECK(op_params(proj) == 8ull * 16 + 2 * 16);
}

TEST_CASE("fusion ops add no parameters") {
  GraphNode merge;
  merge.kind = NodeKind::Merge;
  merge.merge_op = BinaryOpKind::Sum;
  merge.height = merge.width = 4;
  merge.channels = merge.in_channels = 8;
  CHECK(op_params(merge) == 0);
  CHECK(op_units(merge) == 4ull * 4 * 8);

  merge.merge_op = BinaryOpKind::GlobalPoolAttention;
  CHECK(op_params(merge) == 0);
  CHECK(op_units(merge) == 3ull * 4 * 4 * 8);

  GraphNode pool;
  pool.kind = NodeKind::Resample;
  pool.resample_mode = ResampleMode::MaxPoolDown;
  pool.resample_factor = 2;
  pool.height = pool.width = 4;
  pool.channels = pool.in_channels = 8;
  CHECK(op_params(pool) == 0);
  CHECK(op_units(pool) == 3ull * 4 * 4 * 8);  // (f^2-1) compares per output element

  pool.resample_mode = ResampleMode::NearestUpsample;
  CHECK(op_units(pool) == 0);
}

TEST_CASE("estimate aggregates per-node costs and needs shapes") {
  auto inputs = PyramidInputSpec::uniform(256, {3, 4, 5, 6, 7}, 256);
  FeatureGraph g = compile(preset("nasfpn-7cell"), inputs);
  CostReport report = estimate(g);
  std::uint64_t flops = 0, params = 0;
  for (const NodeCost& cost : report.per_node) {
    flops += cost.flops;
    params += cost.params;
  }
  CHECK(flops == report.total_flops);
  CHECK(params == report.total_params);
  CHECK(report.per_node.size() == g.nodes.size());

  FeatureGraph bare = g;
  for (GraphNode& node : bare.nodes) node.height = node.width = 0;
  CHECK_THROWS_WITH_AS(estimate(bare), doctest::Contains("shapes-missing"), Error);
}

TEST_CASE("image-side doubling multiplies conv flops by exactly 4") {
  Genome genome = preset("nasfpn-7cell");
  auto small = compile(genome, PyramidInputSpec::uniform(256, {3, 4, 5, 6, 7}, 256));
  auto large = compile(genome, PyramidInputSpec::uniform(512, {3, 4, 5, 6, 7}, 256));
  auto rs = estimate(small);
  auto rl = estimate(large);
  for (std::size_t i = 0; i < rs.per_node.size(); ++i) {
    if (small.nodes[i].kind != NodeKind::ConvBlock) continue;
    CHECK(rl.per_node[i].flops == 4 * rs.per_node[i].flops);
    CHECK(rl.per_node[i].params == rs.per_node[i].params);
  }
}

TEST_CASE("feature dim 384 vs 256 gives a 2.25 params ratio per conv block") {
  Genome a = preset("nasfpn-7cell");
  Genome b = a;
  a.space.feature_dim = 256;
  b.space.feature_dim = 384;
  auto ga = compile(a, PyramidInputSpec::uniform(256, {3, 4, 5, 6, 7}, 256));
  auto gb = compile(b, PyramidInputSpec::uniform(256, {3, 4, 5, 6, 7}, 384));
  auto ra = estimate(ga);
  auto rb = estimate(gb);
  for (std::size_t i = 0; i < ga.nodes.size(); ++i) {
    if (ga.nodes[i].kind != NodeKind::ConvBlock) continue;
    const double ratio =
        static_cast<double>(rb.per_node[i].params) / static_cast<double>(ra.per_node[i].params);
    CHECK(ratio == doctest::Approx(2.25).epsilon(0.01));  // (384/256)^2, BN term slightly below
  }
}

TEST_CASE("stacking twice roughly doubles parameters") {
  Genome genome = preset("nasfpn-7cell");
  auto inputs = PyramidInputSpec::uniform(256, {3, 4, 5, 6, 7}, 64);
  auto r1 = estimate(stack(genome, 1, inputs));
  auto r2 = estimate(stack(genome, 2, inputs));
  const double ratio = static_cast<double>(r2.total_params) / static_cast<double>(r1.total_params);
  CHECK(ratio > 1.9);
  CHECK(ratio < 2.1);  // shared input projections keep it just under 2
}

TEST_CASE("compare is antisymmetric and zero on itself") {
  auto inputs = PyramidInputSpec::uniform(256, {3, 4, 5, 6, 7}, 256);
  auto ra = estimate(compile(preset("nasfpn-7cell"), inputs));
  auto rb = estimate(compile(preset("vanilla-fpn"), inputs));

  auto self = compare(ra, ra);
  CHECK(self.flops_delta == 0);
  CHECK(self.params_delta == 0);
  CHECK(self.flops_ratio == doctest::Approx(1.0));

  auto ab = compare(ra, rb);
  auto ba = compare(rb, ra);
  CHECK(ab.flops_delta == -ba.flops_delta);
  CHECK(ab.params_delta == -ba.params_delta);
}

namespace {

// Inserts one extra intermediate cell after the existing intermediates,
// shifting later candidate indices past the insertion point.
Genome with_extra_cell(const Genome& genome, int a, int b, LevelId level, BinaryOpKind op) {
  Genome out = genome;
  const int insert_at = genome.space.num_intermediate_cells;
  const int pool_pos = genome.space.num_inputs() + insert_at;
  out.space.num_intermediate_cells += 1;
  out.cells.insert(out.cells.begin() + insert_at, {a, b, level, op});
  for (std::size_t i = static_cast<std::size_t>(insert_at) + 1; i < out.cells.size(); ++i) {
    if (out.cells[i].input_a >= pool_pos) ++out.cells[i].input_a;
    if (out.cells[i].input_b >= pool_pos) ++out.cells[i].input_b;
  }
  return out;
}

}  // namespace

TEST_CASE("adding a cell never decreases cost") {
  auto space = space_preset("default5");
  space.feature_dim = 32;
  space.num_intermediate_cells = 1;
  auto inputs = PyramidInputSpec::uniform(128, {3, 4, 5, 6, 7}, 32);
  Rng rng(11);
  const auto allowed = space.allowed_intermediate_levels();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Genome genome = sample_random(space, seed);
    const int pool = genome.space.num_inputs() + genome.space.num_intermediate_cells;
    const int a = rng.uniform_int(pool);
    int b = rng.uniform_int(pool - 1);
    if (b >= a) ++b;
    Genome bigger = with_extra_cell(genome, a, b, rng.pick(allowed), rng.pick(space.ops));
    REQUIRE(validate(bigger).ok());
    auto rs = estimate(compile(genome, inputs));
    auto rb = estimate(compile(bigger, inputs));
    CHECK(rb.total_flops >= rs.total_flops);
    CHECK(rb.total_params >= rs.total_params);
  }
}
