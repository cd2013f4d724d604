#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pyrsearch/graph_compiler.hpp"

namespace pyrsearch {

/// Analytic cost of one compiled graph for a single image. FLOPs are defined
/// as 2x the multiply-accumulate-equivalent unit count; see op_units() for
/// the per-node convention shared with the executor's instrumented counter.
struct NodeCost {
  int node = 0;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

struct CostReport {
  std::uint64_t total_flops = 0;
  std::uint64_t total_params = 0;
  std::vector<NodeCost> per_node;
};

/// MAC-equivalent units for one node at its inferred shape (batch 1).
/// Convention: conv MACs count 9*Cin*Cout (or the depthwise-separable split),
/// elementwise adds/multiplies/compares count one unit each, nearest
/// upsampling is free, and batch norm folds into the preceding conv at
/// inference (0 units, 2 params/channel).
std::uint64_t op_units(const GraphNode& node);

std::uint64_t op_params(const GraphNode& node);

/// Per-node and total FLOPs/params. Throws Error("shapes-missing") when the
/// graph has not been shape-inferred.
CostReport estimate(const FeatureGraph& graph);

struct CostDelta {
  std::int64_t flops_delta = 0;   // a - b
  std::int64_t params_delta = 0;  // a - b
  double flops_ratio = 0.0;       // a / b
  double params_ratio = 0.0;      // a / b
};

CostDelta compare(const CostReport& a, const CostReport& b);

std::string render_cost_table(const CostReport& report, const FeatureGraph& graph);
std::string cost_to_json(const CostReport& report);

}  // namespace pyrsearch
