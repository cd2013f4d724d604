#pragma once

#include <map>
#include <string>
#include <vector>

#include "pyrsearch/search_space.hpp"

namespace pyrsearch {

enum class NodeKind { Input, Resample, Merge, ConvBlock, OutputSum };
enum class ResampleMode { NearestUpsample, MaxPoolDown };
enum class ConvBlockKind { Merge3x3, Projection1x1 };

std::string node_kind_name(NodeKind kind);

struct GraphNode {
  NodeKind kind = NodeKind::Input;
  LevelId level = 0;
  int stage = 0;  // 0 = shared inputs/projections, 1..n = pyramid copies
  std::vector<int> preds;

  // Payloads, meaningful per kind.
  ResampleMode resample_mode = ResampleMode::NearestUpsample;
  int resample_factor = 1;
  BinaryOpKind merge_op = BinaryOpKind::Sum;
  ConvBlockKind conv_kind = ConvBlockKind::Merge3x3;
  ConvMode conv_mode = ConvMode::Full;

  // Shapes, filled by infer_shapes. channels is the output width.
  int height = 0;
  int width = 0;
  int channels = 0;
  int in_channels = 0;
};

/// Backbone interface: image size, channel width per pyramid level, and the
/// coarsest level the backbone computes directly; levels above it are
/// synthesized by max pooling that feature (the stride 2/4 pooling idiom).
struct PyramidInputSpec {
  int image_side = 0;
  std::vector<std::pair<LevelId, int>> level_widths;  // sorted by level
  LevelId backbone_top_level = -1;                    // -1: all levels are real

  static PyramidInputSpec uniform(int image_side, const std::vector<LevelId>& levels, int width);
  int width_for(LevelId level) const;
  void check() const;
};

/// Shape-inferred fusion DAG. Nodes are stored in topological order by
/// construction (predecessor ids are always smaller).
struct FeatureGraph {
  std::vector<GraphNode> nodes;
  std::map<LevelId, int> outputs;                   // final stage OutputSum per level
  std::vector<std::map<LevelId, int>> stage_outputs;  // index 0 = stage 1
  int stack_count = 1;
  int image_side = 0;
  int feature_dim = 0;
  SpaceConfig space;

  int count_kind(NodeKind kind) const;
  std::vector<std::vector<int>> consumers() const;

  /// Asserts the structural invariants every compiled graph must satisfy:
  /// topological predecessor order, merge shape consistency, merge followed
  /// by exactly one conv block, and leftover closure. Throws
  /// Error("graph-invariant") with a description when violated.
  void check_invariants() const;
};

/// Lowers a valid genome into a fusion graph against the given inputs,
/// inserting resampling where levels differ, a conv block after every merge,
/// and the leftover-sum closure into the matching output levels.
FeatureGraph compile(const Genome& genome, const PyramidInputSpec& inputs);

/// Chains n copies of the program; copy k's output sums feed copy k+1's
/// cells. Requires input and output level sets to match.
FeatureGraph stack(const Genome& genome, int n, const PyramidInputSpec& inputs);

/// Recomputes every node's (height, width, channels) for a new image side.
/// feature_dim must match the width the graph was compiled for.
void infer_shapes(FeatureGraph& graph, int image_side, int feature_dim);

/// Deterministic Graphviz text: inputs and outputs styled distinctly, one
/// rank per pyramid level.
std::string export_dot(const FeatureGraph& graph);

/// Node table + edge list dump for tooling.
std::string graph_to_json(const FeatureGraph& graph);

}  // namespace pyrsearch
