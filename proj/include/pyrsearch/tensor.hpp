#pragma once

#include <cstdint>
#include <vector>

#include "pyrsearch/common.hpp"

namespace pyrsearch {

/// Wide = 64-bit storage (required for gradient checks), Narrow = values
/// squashed through 32-bit precision on write.
enum class Precision { Wide, Narrow };

/// Dense (batch, channels, height, width) tensor of doubles.
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  Precision precision = Precision::Wide;
  std::vector<double> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, Precision p = Precision::Wide)
      : n(n_), c(c_), h(h_), w(w_), precision(p) {
    if (n < 1 || c < 1 || h < 1 || w < 1)
      throw Error("invalid-tensor-shape", "all dims must be >= 1");
    data.assign(numel(), 0.0);
  }

  static Tensor4 zeros(int n, int c, int h, int w, Precision p = Precision::Wide) {
    return Tensor4(n, c, h, w, p);
  }

  static Tensor4 scalar(double value) {
    Tensor4 t(1, 1, 1, 1);
    t.data[0] = value;
    return t;
  }

  static Tensor4 random_normal(Rng& rng, int n, int c, int h, int w, double stddev,
                               Precision p = Precision::Wide) {
    Tensor4 t(n, c, h, w, p);
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    t.quantize();
    return t;
  }

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
           static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }

  std::size_t offset(int in, int ic, int ih, int iw) const {
    return ((static_cast<std::size_t>(in) * static_cast<std::size_t>(c) +
             static_cast<std::size_t>(ic)) *
                static_cast<std::size_t>(h) +
            static_cast<std::size_t>(ih)) *
               static_cast<std::size_t>(w) +
           static_cast<std::size_t>(iw);
  }

  double& at(int in, int ic, int ih, int iw) { return data[offset(in, ic, ih, iw)]; }
  double at(int in, int ic, int ih, int iw) const { return data[offset(in, ic, ih, iw)]; }

  bool same_shape(const Tensor4& other) const {
    return n == other.n && c == other.c && h == other.h && w == other.w;
  }

  /// Rounds stored values through float when Narrow.
  void quantize() {
    if (precision != Precision::Narrow) return;
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
  }
};

/// Forward-pass instrumentation. Units are MAC-equivalents: one conv
/// multiply-accumulate, elementwise add/multiply or pool compare counts one;
/// reported FLOPs are 2x this. Matches cost_model::op_units per graph node.
struct OpCounter {
  std::uint64_t units = 0;
};

}  // namespace pyrsearch
