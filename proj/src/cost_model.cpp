#include "pyrsearch/cost_model.hpp"

#include <iomanip>
#include <json.hpp>
#include <sstream>

namespace pyrsearch {

using nlohmann::json;

std::uint64_t op_units(const GraphNode& node) {
  const auto hw = static_cast<std::uint64_t>(node.height) * static_cast<std::uint64_t>(node.width);
  const auto cin = static_cast<std::uint64_t>(node.in_channels);
  const auto cout = static_cast<std::uint64_t>(node.channels);
  switch (node.kind) {
    case NodeKind::Input:
      return 0;
    case NodeKind::Resample: {
      if (node.resample_mode == ResampleMode::NearestUpsample) return 0;  // pure gather
      const auto f = static_cast<std::uint64_t>(node.resample_factor);
      return (f * f - 1) * hw * cout;  // compares per output element
    }
    case NodeKind::Merge:
      if (node.merge_op == BinaryOpKind::Sum) return hw * cout;
      // Global-pool attention: per-channel global max (HW-1 compares),
      // sigmoid gate (1), gated multiply (HW) and the residual add (HW).
      return 3 * hw * cout;
    case NodeKind::ConvBlock:
      if (node.conv_kind == ConvBlockKind::Projection1x1) return cin * cout * hw;
      if (node.conv_mode == ConvMode::DepthwiseSeparable) return (9 * cin + cin * cout) * hw;
      return 9 * cin * cout * hw;
    case NodeKind::OutputSum:
      return (static_cast<std::uint64_t>(node.preds.size()) - 1) * hw * cout;
  }
  return 0;
}

std::uint64_t op_params(const GraphNode& node) {
  if (node.kind != NodeKind::ConvBlock) return 0;  // fusion ops add no trainable parameters
  const auto cin = static_cast<std::uint64_t>(node.in_channels);
  const auto cout = static_cast<std::uint64_t>(node.channels);
  const std::uint64_t bn = 2 * cout;
  if (node.conv_kind == ConvBlockKind::Projection1x1) return cin * cout + bn;
  if (node.conv_mode == ConvMode::DepthwiseSeparable) return 9 * cin + cin * cout + bn;
  return 9 * cin * cout + bn;
}

CostReport estimate(const FeatureGraph& graph) {
  CostReport report;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const GraphNode& node = graph.nodes[i];
    if (node.height < 1 || node.width < 1 || node.channels < 1)
      throw Error("shapes-missing", "node " + std::to_string(i) + " has no inferred shape");
    NodeCost cost;
    cost.node = static_cast<int>(i);
    cost.flops = 2 * op_units(node);
    cost.params = op_params(node);
    report.total_flops += cost.flops;
    report.total_params += cost.params;
    report.per_node.push_back(cost);
  }
  return report;
}

CostDelta compare(const CostReport& a, const CostReport& b) {
  CostDelta delta;
  delta.flops_delta = static_cast<std::int64_t>(a.total_flops) - static_cast<std::int64_t>(b.total_flops);
  delta.params_delta = static_cast<std::int64_t>(a.total_params) - static_cast<std::int64_t>(b.total_params);
  delta.flops_ratio = b.total_flops == 0 ? 0.0
                                         : static_cast<double>(a.total_flops) / static_cast<double>(b.total_flops);
  delta.params_ratio = b.total_params == 0 ? 0.0
                                           : static_cast<double>(a.total_params) / static_cast<double>(b.total_params);
  return delta;
}

std::string render_cost_table(const CostReport& report, const FeatureGraph& graph) {
  std::ostringstream out;
  out << std::left << std::setw(6) << "node" << std::setw(12) << "kind" << std::setw(7) << "level"
      << std::setw(7) << "stage" << std::right << std::setw(16) << "flops" << std::setw(14)
      << "params" << "\n";
  for (const NodeCost& cost : report.per_node) {
    const GraphNode& node = graph.nodes[static_cast<std::size_t>(cost.node)];
    if (cost.flops == 0 && cost.params == 0) continue;
    out << std::left << std::setw(6) << cost.node << std::setw(12) << node_kind_name(node.kind)
        << std::setw(7) << node.level << std::setw(7) << node.stage << std::right << std::setw(16)
        << cost.flops << std::setw(14) << cost.params << "\n";
  }
  out << std::left << std::setw(32) << "total" << std::right << std::setw(16) << report.total_flops
      << std::setw(14) << report.total_params << "\n";
  return out.str();
}

std::string cost_to_json(const CostReport& report) {
  json per_node = json::array();
  for (const NodeCost& cost : report.per_node)
    per_node.push_back(json{{"node", cost.node}, {"flops", cost.flops}, {"params", cost.params}});
  return json{{"total_flops", report.total_flops},
              {"total_params", report.total_params},
              {"per_node", per_node}}
      .dump();
}

}  // namespace pyrsearch
