#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pyrsearch/common.hpp"

namespace pyrsearch {

/// Pyramid level L; the feature map at level L has stride 2^L pixels
/// (L=3 is the stride-8 map).
using LevelId = int;

enum class BinaryOpKind { Sum, GlobalPoolAttention };
enum class ConvMode { Full, DepthwiseSeparable };

std::string op_name(BinaryOpKind op);
BinaryOpKind op_from_name(const std::string& name);
std::string conv_mode_name(ConvMode mode);
ConvMode conv_mode_from_name(const std::string& name);

/// One merging cell: pick two earlier candidates (without replacement),
/// a target level and a fusion op. Output cells get their level from the
/// genome's output_order instead of a free choice.
struct CellSpec {
  int input_a = 0;
  int input_b = 0;
  LevelId out_level = 0;
  BinaryOpKind op = BinaryOpKind::Sum;

  bool operator==(const CellSpec&) const = default;
};

/// The search space definition. output_levels and forbidden levels are kept
/// sorted and unique; ops are kept in enum order.
struct SpaceConfig {
  std::vector<LevelId> input_levels;
  std::vector<LevelId> output_levels;
  int num_intermediate_cells = 0;
  std::vector<LevelId> forbidden_intermediate_levels;
  std::vector<BinaryOpKind> ops;
  int feature_dim = 256;
  ConvMode conv_mode = ConvMode::Full;

  int num_inputs() const { return static_cast<int>(input_levels.size()); }
  int num_output_cells() const { return static_cast<int>(output_levels.size()); }
  int num_cells() const { return num_intermediate_cells + num_output_cells(); }

  /// Levels an intermediate cell may output: the output level set minus the
  /// forbidden set. Levels outside the output set are excluded so every
  /// leftover layer has a matching output for the leftover-sum rule.
  std::vector<LevelId> allowed_intermediate_levels() const;

  /// Throws Error("invalid-space") when structurally malformed.
  void check() const;

  bool operator==(const SpaceConfig&) const = default;
};

/// Builds a space with the default forbidden set (the finest input level).
SpaceConfig make_space(std::vector<LevelId> input_levels,
                       std::vector<LevelId> output_levels,
                       int num_intermediate_cells,
                       std::vector<BinaryOpKind> ops = {BinaryOpKind::Sum,
                                                        BinaryOpKind::GlobalPoolAttention},
                       int feature_dim = 256, ConvMode conv_mode = ConvMode::Full);

/// Named space presets: "default5" (levels 3..7), "lite" (inputs 3..7,
/// outputs 3..6, depthwise-separable), "toy3" (levels 2..4, small dim).
SpaceConfig space_preset(const std::string& name);

/// A merging-cell program: intermediates first, then one output cell per
/// output level in output_order's order. Indices only reference earlier
/// candidates, so genomes are acyclic by construction.
struct Genome {
  SpaceConfig space;
  std::vector<CellSpec> cells;
  std::vector<LevelId> output_order;

  bool operator==(const Genome&) const = default;
};

struct Violation {
  int cell_index = -1;  // -1 = genome-level rule
  std::string rule;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

/// Checks every Genome/CellSpec invariant; violations enumerate all
/// failures, not just the first.
ValidationReport validate(const Genome& genome);

/// Uniformly samples a valid genome. Identical seeds give identical genomes.
/// Throws Error("degenerate-space") when fewer than two initial candidates.
Genome sample_random(const SpaceConfig& space, std::uint64_t seed);

/// Changes exactly one decision (input_a/input_b/out_level/op of one cell, or
/// one transposition of output_order) while staying valid.
Genome mutate(const Genome& genome, std::uint64_t seed);

/// Number of decisions differing between two genomes over the same space.
/// Output-cell levels are derived from output_order; a transposed
/// output_order counts as one decision.
int decision_distance(const Genome& a, const Genome& b);

/// Closed-form size of the space: product over cells of
/// (candidates choose ordered pair) x legal levels x |ops|, times the
/// output-order permutations. Throws Error("count-overflow") past 2^64.
std::uint64_t enumeration_count(const SpaceConfig& space);

/// Streams every valid genome exactly once, in a fixed lexicographic order.
/// Throws Error("space-too-large") when the count exceeds the cap.
class GenomeEnumerator {
 public:
  explicit GenomeEnumerator(SpaceConfig space, std::uint64_t cap = 1'000'000);

  bool next(Genome& out);
  std::uint64_t count() const { return count_; }

 private:
  SpaceConfig space_;
  std::vector<int> radices_;
  std::vector<int> digits_;
  std::uint64_t count_ = 0;
  bool exhausted_ = false;
  bool first_ = true;
};

std::vector<Genome> enumerate_all(const SpaceConfig& space, std::uint64_t cap = 1'000'000);

/// Named genomes: "nasfpn-7cell" (transcription of the published
/// 7-merging-cell architecture diagram) and "vanilla-fpn" (the top-down
/// baseline pathway encoded in the grammar).
Genome preset(const std::string& name);

/// Canonical JSON (schema version 1). from_json validates and throws
/// Error("parse-error"), Error("schema-violation") or Error("invalid-genome").
std::string to_json(const Genome& genome);
Genome from_json(const std::string& text);

/// Schema-checked parse without the validity gate (validation reported
/// separately by the caller).
Genome parse_genome(const std::string& text);

std::string space_to_json(const SpaceConfig& space);
SpaceConfig space_from_json(const std::string& text);

/// Hash of the canonical serialized form; the identity used for uniqueness
/// statistics and the reward cache.
std::string genome_hash(const Genome& genome);

}  // namespace pyrsearch
