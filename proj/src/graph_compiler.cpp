#include "pyrsearch/graph_compiler.hpp"

#include <algorithm>
#include <json.hpp>
#include <set>
#include <sstream>

namespace pyrsearch {

using nlohmann::json;

std::string node_kind_name(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return "input";
    case NodeKind::Resample: return "resample";
    case NodeKind::Merge: return "merge";
    case NodeKind::ConvBlock: return "conv_block";
    case NodeKind::OutputSum: return "output_sum";
  }
  return "?";
}

PyramidInputSpec PyramidInputSpec::uniform(int image_side, const std::vector<LevelId>& levels,
                                           int width) {
  PyramidInputSpec spec;
  spec.image_side = image_side;
  for (LevelId level : levels) spec.level_widths.emplace_back(level, width);
  return spec;
}

int PyramidInputSpec::width_for(LevelId level) const {
  for (const auto& [l, w] : level_widths)
    if (l == level) return w;
  throw Error("input-spec-mismatch", "no backbone width for level " + std::to_string(level));
}

void PyramidInputSpec::check() const {
  if (image_side < 1) throw Error("invalid-input-spec", "image_side must be positive");
  if (level_widths.empty()) throw Error("invalid-input-spec", "no levels");
  for (std::size_t i = 1; i < level_widths.size(); ++i)
    if (level_widths[i].first <= level_widths[i - 1].first)
      throw Error("invalid-input-spec", "levels must be sorted and unique");
  for (const auto& [l, w] : level_widths) {
    (void)l;
    if (w < 1) throw Error("invalid-input-spec", "channel width must be positive");
  }
  const LevelId max_level = level_widths.back().first;
  if (image_side % (1 << max_level) != 0)
    throw Error("indivisible-image-size",
                std::to_string(image_side) + " is not divisible by 2^" + std::to_string(max_level));
}

int FeatureGraph::count_kind(NodeKind kind) const {
  int n = 0;
  for (const GraphNode& node : nodes) n += node.kind == kind;
  return n;
}

std::vector<std::vector<int>> FeatureGraph::consumers() const {
  std::vector<std::vector<int>> out(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (int p : nodes[i].preds) out[static_cast<std::size_t>(p)].push_back(static_cast<int>(i));
  return out;
}

void FeatureGraph::check_invariants() const {
  auto fail = [](const std::string& msg) { throw Error("graph-invariant", msg); };
  const auto users = consumers();
  std::set<LevelId> output_levels(space.output_levels.begin(), space.output_levels.end());

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const GraphNode& node = nodes[i];
    for (int p : node.preds) {
      if (p < 0 || p >= static_cast<int>(i)) fail("predecessor does not precede node");
    }
    switch (node.kind) {
      case NodeKind::Input:
        if (!node.preds.empty()) fail("input node with predecessors");
        break;
      case NodeKind::Resample: {
        if (node.preds.size() != 1) fail("resample arity");
        const int f = node.resample_factor;
        if (f < 2 || (f & (f - 1)) != 0) fail("resample factor must be a power of two >= 2");
        break;
      }
      case NodeKind::Merge: {
        if (node.preds.size() != 2) fail("merge must have exactly two predecessors");
        for (int p : node.preds) {
          const GraphNode& pred = nodes[static_cast<std::size_t>(p)];
          if (pred.height != node.height || pred.width != node.width)
            fail("merge predecessor spatial size mismatch");
        }
        const auto& uses = users[i];
        if (uses.size() != 1 || nodes[static_cast<std::size_t>(uses[0])].kind != NodeKind::ConvBlock)
          fail("merge must feed exactly one conv block");
        break;
      }
      case NodeKind::ConvBlock:
        if (node.preds.size() != 1) fail("conv block arity");
        break;
      case NodeKind::OutputSum:
        if (node.preds.empty()) fail("output sum needs at least one predecessor");
        for (int p : node.preds)
          if (nodes[static_cast<std::size_t>(p)].level != node.level)
            fail("output sum folds a mismatched level");
        break;
    }
    // Leftover closure: no dangling compute. Final outputs terminate the
    // graph; inputs at levels without an output slot may stay unconnected.
    if (users[i].empty()) {
      const bool final_output = node.kind == NodeKind::OutputSum && node.stage == stack_count;
      const bool spare_input = node.kind == NodeKind::Input && !output_levels.count(node.level);
      if (!final_output && !spare_input) fail("dangling node " + std::to_string(i));
    }
  }

  std::set<LevelId> covered;
  for (const auto& [level, id] : outputs) {
    covered.insert(level);
    if (nodes[static_cast<std::size_t>(id)].kind != NodeKind::OutputSum) fail("outputs map points at a non-output node");
  }
  if (covered != output_levels) fail("outputs do not cover the output level set");
}

namespace {

struct Candidate {
  int node = -1;        // materialized node id, -1 for an untouched input slot
  bool input_slot = false;
  int input_index = -1;
  LevelId level = 0;
  bool consumed = false;
};

class Builder {
 public:
  Builder(const Genome& genome, const PyramidInputSpec& inputs, int n)
      : genome_(genome), inputs_(inputs), n_(n) {
    graph_.space = genome.space;
    graph_.stack_count = n;
    graph_.image_side = inputs.image_side;
    graph_.feature_dim = genome.space.feature_dim;
  }

  FeatureGraph build() {
    make_input_nodes();
    for (int stage = 1; stage <= n_; ++stage) run_stage(stage);
    graph_.outputs = graph_.stage_outputs.back();
    infer_shapes(graph_, inputs_.image_side, genome_.space.feature_dim);
    graph_.check_invariants();
    return std::move(graph_);
  }

 private:
  int add_node(GraphNode node) {
    graph_.nodes.push_back(std::move(node));
    return static_cast<int>(graph_.nodes.size()) - 1;
  }

  void make_input_nodes() {
    for (LevelId level : genome_.space.input_levels) {
      GraphNode node;
      node.kind = NodeKind::Input;
      node.level = level;
      node.stage = 0;
      node.channels = inputs_.width_for(level);
      input_nodes_.push_back(add_node(node));
    }
  }

  // Materializes the projection conv for an input slot on first use, so a
  // never-consumed backbone feature costs nothing.
  int materialize(Candidate& cand) {
    if (!cand.input_slot || cand.node >= 0) return cand.node;
    const int raw = input_nodes_[static_cast<std::size_t>(cand.input_index)];
    const int width = graph_.nodes[static_cast<std::size_t>(raw)].channels;
    if (width == genome_.space.feature_dim) {
      cand.node = raw;
      return raw;
    }
    GraphNode proj;
    proj.kind = NodeKind::ConvBlock;
    proj.conv_kind = ConvBlockKind::Projection1x1;
    proj.conv_mode = genome_.space.conv_mode;
    proj.level = cand.level;
    proj.stage = 0;
    proj.preds = {raw};
    cand.node = add_node(proj);
    return cand.node;
  }

  int resample_if_needed(int node, LevelId from, LevelId to, int stage) {
    if (from == to) return node;
    GraphNode r;
    r.kind = NodeKind::Resample;
    r.level = to;
    r.stage = stage;
    r.preds = {node};
    if (from > to) {
      r.resample_mode = ResampleMode::NearestUpsample;
      r.resample_factor = 1 << (from - to);
    } else {
      r.resample_mode = ResampleMode::MaxPoolDown;
      r.resample_factor = 1 << (to - from);
    }
    return add_node(r);
  }

  void run_stage(int stage) {
    const SpaceConfig& space = genome_.space;
    std::vector<Candidate> pool;
    if (stage == 1) {
      for (int i = 0; i < space.num_inputs(); ++i)
        pool.push_back({-1, true, i, space.input_levels[static_cast<std::size_t>(i)], false});
    } else {
      const auto& prev = graph_.stage_outputs.back();
      for (LevelId level : space.input_levels)
        pool.push_back({prev.at(level), false, -1, level, false});
    }

    for (int i = 0; i < space.num_cells(); ++i) {
      const CellSpec& cell = genome_.cells[static_cast<std::size_t>(i)];
      Candidate& ca = pool[static_cast<std::size_t>(cell.input_a)];
      Candidate& cb = pool[static_cast<std::size_t>(cell.input_b)];
      ca.consumed = cb.consumed = true;
      const int na = resample_if_needed(materialize(ca), ca.level, cell.out_level, stage);
      const int nb = resample_if_needed(materialize(cb), cb.level, cell.out_level, stage);

      GraphNode merge;
      merge.kind = NodeKind::Merge;
      merge.merge_op = cell.op;
      merge.level = cell.out_level;
      merge.stage = stage;
      merge.preds = {na, nb};
      const int merge_id = add_node(merge);

      GraphNode conv;
      conv.kind = NodeKind::ConvBlock;
      conv.conv_kind = ConvBlockKind::Merge3x3;
      conv.conv_mode = space.conv_mode;
      conv.level = cell.out_level;
      conv.stage = stage;
      conv.preds = {merge_id};
      pool.push_back({add_node(conv), false, -1, cell.out_level, false});
    }

    // Close the stage: one OutputSum per output level, fed by that level's
    // output cell plus every leftover candidate of the same resolution.
    std::map<LevelId, int> outs;
    const int first_output_entry = space.num_inputs() + space.num_intermediate_cells;
    for (LevelId level : space.output_levels) {
      GraphNode sum;
      sum.kind = NodeKind::OutputSum;
      sum.level = level;
      sum.stage = stage;
      for (int j = 0; j < space.num_output_cells(); ++j) {
        if (genome_.output_order[static_cast<std::size_t>(j)] == level)
          sum.preds.push_back(pool[static_cast<std::size_t>(first_output_entry + j)].node);
      }
      for (int e = 0; e < first_output_entry; ++e) {
        Candidate& cand = pool[static_cast<std::size_t>(e)];
        if (!cand.consumed && cand.level == level) sum.preds.push_back(materialize(cand));
      }
      outs[level] = add_node(sum);
    }
    graph_.stage_outputs.push_back(std::move(outs));
  }

  const Genome& genome_;
  const PyramidInputSpec& inputs_;
  int n_;
  FeatureGraph graph_;
  std::vector<int> input_nodes_;
};

}  // namespace

FeatureGraph compile(const Genome& genome, const PyramidInputSpec& inputs) {
  return stack(genome, 1, inputs);
}

FeatureGraph stack(const Genome& genome, int n, const PyramidInputSpec& inputs) {
  if (n < 1) throw Error("invalid-stack-count", "stack count must be >= 1");
  ValidationReport report = validate(genome);
  if (!report.ok()) {
    std::string msg = "cannot compile an invalid genome:";
    for (const Violation& v : report.violations) msg += " [" + v.rule + "]";
    throw Error("invalid-genome", msg);
  }
  if (n > 1) {
    std::vector<LevelId> in = genome.space.input_levels;
    std::vector<LevelId> out = genome.space.output_levels;
    std::sort(in.begin(), in.end());
    std::sort(out.begin(), out.end());
    if (in != out)
      throw Error("not-stackable", "input level set differs from output level set");
  }
  inputs.check();
  for (LevelId level : genome.space.input_levels) (void)inputs.width_for(level);
  return Builder(genome, inputs, n).build();
}

void infer_shapes(FeatureGraph& graph, int image_side, int feature_dim) {
  if (feature_dim != graph.feature_dim)
    throw Error("feature-dim-structure-mismatch",
                "graph was compiled for feature_dim " + std::to_string(graph.feature_dim) +
                    "; recompile to change it");
  LevelId max_level = 0;
  for (const GraphNode& node : graph.nodes) max_level = std::max(max_level, node.level);
  if (image_side < 1 || image_side % (1 << max_level) != 0)
    throw Error("indivisible-image-size",
                std::to_string(image_side) + " is not divisible by 2^" + std::to_string(max_level));

  graph.image_side = image_side;
  for (GraphNode& node : graph.nodes) {
    node.height = node.width = image_side >> node.level;
    switch (node.kind) {
      case NodeKind::Input:
        node.in_channels = node.channels;  // backbone width, set at compile
        break;
      case NodeKind::Resample:
      case NodeKind::Merge:
      case NodeKind::OutputSum:
        node.channels = feature_dim;
        node.in_channels = feature_dim;
        break;
      case NodeKind::ConvBlock:
        node.in_channels = graph.nodes[static_cast<std::size_t>(node.preds[0])].channels;
        node.channels = feature_dim;
        break;
    }
  }
}

std::string export_dot(const FeatureGraph& graph) {
  if (graph.nodes.empty() || graph.nodes[0].height == 0)
    throw Error("shapes-missing", "infer shapes before exporting");
  std::ostringstream out;
  out << "digraph pyramid {\n  rankdir=TB;\n  node [fontname=\"Helvetica\"];\n";
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const GraphNode& node = graph.nodes[i];
    out << "  n" << i << " [";
    switch (node.kind) {
      case NodeKind::Input:
        out << "label=\"C" << node.level << "\\n" << node.channels << "x" << node.height << "x"
            << node.width << "\", shape=circle, style=filled, fillcolor=palegreen";
        break;
      case NodeKind::Resample:
        out << "label=\""
            << (node.resample_mode == ResampleMode::NearestUpsample ? "up x" : "pool x")
            << node.resample_factor << "\", shape=box";
        break;
      case NodeKind::Merge:
        out << "label=\"" << (node.merge_op == BinaryOpKind::Sum ? "sum" : "gp")
            << "\", shape=oval";
        break;
      case NodeKind::ConvBlock:
        out << "label=\"" << (node.conv_kind == ConvBlockKind::Projection1x1 ? "proj" : "r-c-b")
            << "\", shape=box, style=rounded";
        break;
      case NodeKind::OutputSum:
        out << "label=\"P" << node.level << " s" << node.stage
            << "\", shape=doublecircle, style=filled, fillcolor=lightcoral";
        break;
    }
    out << "];\n";
  }
  for (std::size_t i = 0; i < graph.nodes.size(); ++i)
    for (int p : graph.nodes[i].preds) out << "  n" << p << " -> n" << i << ";\n";

  std::set<LevelId> levels;
  for (const GraphNode& node : graph.nodes) levels.insert(node.level);
  for (LevelId level : levels) {
    out << "  { rank=same;";
    for (std::size_t i = 0; i < graph.nodes.size(); ++i)
      if (graph.nodes[i].level == level) out << " n" << i << ";";
    out << " }\n";
  }
  out << "}\n";
  return out.str();
}

std::string graph_to_json(const FeatureGraph& graph) {
  json nodes = json::array();
  json edges = json::array();
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const GraphNode& node = graph.nodes[i];
    json entry{{"id", i},
               {"kind", node_kind_name(node.kind)},
               {"level", node.level},
               {"stage", node.stage},
               {"height", node.height},
               {"width", node.width},
               {"channels", node.channels}};
    switch (node.kind) {
      case NodeKind::Resample:
        entry["mode"] = node.resample_mode == ResampleMode::NearestUpsample ? "nearest_up" : "maxpool_down";
        entry["factor"] = node.resample_factor;
        break;
      case NodeKind::Merge:
        entry["op"] = op_name(node.merge_op);
        break;
      case NodeKind::ConvBlock:
        entry["conv"] = node.conv_kind == ConvBlockKind::Projection1x1 ? "projection1x1" : "merge3x3";
        entry["conv_mode"] = conv_mode_name(node.conv_mode);
        entry["in_channels"] = node.in_channels;
        break;
      default:
        break;
    }
    nodes.push_back(entry);
    for (int p : node.preds) edges.push_back(json::array({p, static_cast<int>(i)}));
  }
  json outputs = json::object();
  for (const auto& [level, id] : graph.outputs) outputs[std::to_string(level)] = id;
  json stages = json::array();
  for (const auto& stage : graph.stage_outputs) {
    json s = json::object();
    for (const auto& [level, id] : stage) s[std::to_string(level)] = id;
    stages.push_back(s);
  }
  json doc{{"image_side", graph.image_side}, {"feature_dim", graph.feature_dim},
           {"stack_count", graph.stack_count}, {"nodes", nodes},
           {"edges", edges},                   {"outputs", outputs},
           {"stage_outputs", stages}};
  return doc.dump();
}

}  // namespace pyrsearch
