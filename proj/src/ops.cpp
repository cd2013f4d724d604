#include "pyrsearch/ops.hpp"

#include <algorithm>
#include <cmath>

namespace pyrsearch {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// log(1 + exp(t)) without overflow.
double softplus(double t) { return t > 30.0 ? t : std::log1p(std::exp(t)); }

Precision join(Precision a, Precision b) {
  return (a == Precision::Narrow || b == Precision::Narrow) ? Precision::Narrow : Precision::Wide;
}

}  // namespace

int Tape::push(Tensor4 value, bool needs, BackFn backprop) {
  value.quantize();
  Var var;
  var.value = std::move(value);
  var.needs_grad = needs;
  var.backprop = std::move(backprop);
  vars_.push_back(std::move(var));
  return static_cast<int>(vars_.size()) - 1;
}

int Tape::leaf(Tensor4 value, bool needs) { return push(std::move(value), needs, nullptr); }

const Tensor4& Tape::grad(int id) const {
  const Var& var = vars_[static_cast<std::size_t>(id)];
  if (var.grad.data.empty())
    throw Error("no-forward-pass", "no gradient was propagated to this variable");
  return var.grad;
}

Tensor4& Tape::grad_buf(int id) {
  Var& var = vars_[static_cast<std::size_t>(id)];
  if (var.grad.data.empty())
    var.grad = Tensor4::zeros(var.value.n, var.value.c, var.value.h, var.value.w);
  return var.grad;
}

void Tape::backward(int root) {
  if (vars_.empty()) throw Error("no-forward-pass", "tape is empty");
  const Tensor4& rv = value(root);
  if (rv.numel() != 1) throw Error("shape-mismatch", "backward root must be scalar");
  grad_buf(root).data[0] = 1.0;
  for (int id = static_cast<int>(vars_.size()) - 1; id >= 0; --id) {
    Var& var = vars_[static_cast<std::size_t>(id)];
    if (!var.backprop || !var.needs_grad || var.grad.data.empty()) continue;
    var.backprop(*this, id);
  }
}

int Tape::conv3x3(int x, int w) {
  const Tensor4& xv = value(x);
  const Tensor4& wv = value(w);
  if (wv.h != 3 || wv.w != 3 || wv.c != xv.c)
    throw Error("shape-mismatch", "conv3x3 weight must be [Cout,Cin,3,3] with Cin matching");
  const int N = xv.n, CI = xv.c, CO = wv.n, H = xv.h, W = xv.w;
  Tensor4 out(N, CO, H, W, join(xv.precision, wv.precision));
  for (int in = 0; in < N; ++in)
    for (int co = 0; co < CO; ++co) {
      double* yplane = &out.data[out.offset(in, co, 0, 0)];
      for (int ci = 0; ci < CI; ++ci) {
        const double* xplane = &xv.data[xv.offset(in, ci, 0, 0)];
        const double* w9 = &wv.data[wv.offset(co, ci, 0, 0)];
        for (int oh = 0; oh < H; ++oh) {
          double* yrow = yplane + static_cast<std::size_t>(oh) * W;
          for (int kh = 0; kh < 3; ++kh) {
            const int ih = oh + kh - 1;
            if (ih < 0 || ih >= H) continue;
            const double* xrow = xplane + static_cast<std::size_t>(ih) * W;
            for (int kw = 0; kw < 3; ++kw) {
              const double wval = w9[kh * 3 + kw];
              const int lo = std::max(0, 1 - kw);
              const int hi = std::min(W, W + 1 - kw);
              for (int ow = lo; ow < hi; ++ow) yrow[ow] += wval * xrow[ow + kw - 1];
            }
          }
        }
      }
    }
  // Nominal dense MAC count; zero-padding taps included.
  count(9ull * static_cast<std::uint64_t>(CI) * static_cast<std::uint64_t>(CO) *
        static_cast<std::uint64_t>(H) * static_cast<std::uint64_t>(W) * static_cast<std::uint64_t>(N));

  const bool ng = needs_grad(x) || needs_grad(w);
  return push(std::move(out), ng, [x, w, N, CI, CO, H, W](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    const Tensor4& xv2 = t.value(x);
    const Tensor4& wv2 = t.value(w);
    const bool want_x = t.needs_grad(x);
    const bool want_w = t.needs_grad(w);
    Tensor4* gx = want_x ? &t.grad_buf(x) : nullptr;
    Tensor4* gw = want_w ? &t.grad_buf(w) : nullptr;
    for (int in = 0; in < N; ++in)
      for (int co = 0; co < CO; ++co) {
        const double* gyplane = &gy.data[gy.offset(in, co, 0, 0)];
        for (int ci = 0; ci < CI; ++ci) {
          const double* xplane = &xv2.data[xv2.offset(in, ci, 0, 0)];
          const double* w9 = &wv2.data[wv2.offset(co, ci, 0, 0)];
          double* gxplane = want_x ? &gx->data[gx->offset(in, ci, 0, 0)] : nullptr;
          double* gw9 = want_w ? &gw->data[gw->offset(co, ci, 0, 0)] : nullptr;
          for (int oh = 0; oh < H; ++oh) {
            const double* gyrow = gyplane + static_cast<std::size_t>(oh) * W;
            for (int kh = 0; kh < 3; ++kh) {
              const int ih = oh + kh - 1;
              if (ih < 0 || ih >= H) continue;
              const double* xrow = xplane + static_cast<std::size_t>(ih) * W;
              double* gxrow = want_x ? gxplane + static_cast<std::size_t>(ih) * W : nullptr;
              for (int kw = 0; kw < 3; ++kw) {
                const double wval = w9[kh * 3 + kw];
                const int lo = std::max(0, 1 - kw);
                const int hi = std::min(W, W + 1 - kw);
                double wacc = 0.0;
                for (int ow = lo; ow < hi; ++ow) {
                  const double g = gyrow[ow];
                  if (want_x) gxrow[ow + kw - 1] += wval * g;
                  wacc += xrow[ow + kw - 1] * g;
                }
                if (want_w) gw9[kh * 3 + kw] += wacc;
              }
            }
          }
        }
      }
  });
}

int Tape::conv1x1(int x, int w) {
  const Tensor4& xv = value(x);
  const Tensor4& wv = value(w);
  if (wv.h != 1 || wv.w != 1 || wv.c != xv.c)
    throw Error("shape-mismatch", "conv1x1 weight must be [Cout,Cin,1,1] with Cin matching");
  const int N = xv.n, CI = xv.c, CO = wv.n, H = xv.h, W = xv.w;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor4 out(N, CO, H, W, join(xv.precision, wv.precision));
  for (int in = 0; in < N; ++in)
    for (int co = 0; co < CO; ++co) {
      double* yplane = &out.data[out.offset(in, co, 0, 0)];
      for (int ci = 0; ci < CI; ++ci) {
        const double wval = wv.data[wv.offset(co, ci, 0, 0)];
        const double* xplane = &xv.data[xv.offset(in, ci, 0, 0)];
        for (std::size_t i = 0; i < plane; ++i) yplane[i] += wval * xplane[i];
      }
    }
  count(static_cast<std::uint64_t>(CI) * static_cast<std::uint64_t>(CO) * plane *
        static_cast<std::uint64_t>(N));

  const bool ng = needs_grad(x) || needs_grad(w);
  return push(std::move(out), ng, [x, w, N, CI, CO, plane](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    const Tensor4& xv2 = t.value(x);
    const Tensor4& wv2 = t.value(w);
    const bool want_x = t.needs_grad(x);
    const bool want_w = t.needs_grad(w);
    Tensor4* gx = want_x ? &t.grad_buf(x) : nullptr;
    Tensor4* gw = want_w ? &t.grad_buf(w) : nullptr;
    for (int in = 0; in < N; ++in)
      for (int co = 0; co < CO; ++co) {
        const double* gyplane = &gy.data[gy.offset(in, co, 0, 0)];
        for (int ci = 0; ci < CI; ++ci) {
          const double wval = wv2.data[wv2.offset(co, ci, 0, 0)];
          const double* xplane = &xv2.data[xv2.offset(in, ci, 0, 0)];
          double wacc = 0.0;
          double* gxplane = want_x ? &gx->data[gx->offset(in, ci, 0, 0)] : nullptr;
          for (std::size_t i = 0; i < plane; ++i) {
            const double g = gyplane[i];
            if (want_x) gxplane[i] += wval * g;
            wacc += xplane[i] * g;
          }
          if (want_w) gw->data[gw->offset(co, ci, 0, 0)] += wacc;
        }
      }
  });
}

int Tape::depthwise3x3(int x, int w) {
  const Tensor4& xv = value(x);
  const Tensor4& wv = value(w);
  if (wv.h != 3 || wv.w != 3 || wv.c != 1 || wv.n != xv.c)
    throw Error("shape-mismatch", "depthwise3x3 weight must be [C,1,3,3]");
  const int N = xv.n, C = xv.c, H = xv.h, W = xv.w;
  Tensor4 out(N, C, H, W, join(xv.precision, wv.precision));
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      double* yplane = &out.data[out.offset(in, c, 0, 0)];
      const double* xplane = &xv.data[xv.offset(in, c, 0, 0)];
      const double* w9 = &wv.data[wv.offset(c, 0, 0, 0)];
      for (int oh = 0; oh < H; ++oh) {
        double* yrow = yplane + static_cast<std::size_t>(oh) * W;
        for (int kh = 0; kh < 3; ++kh) {
          const int ih = oh + kh - 1;
          if (ih < 0 || ih >= H) continue;
          const double* xrow = xplane + static_cast<std::size_t>(ih) * W;
          for (int kw = 0; kw < 3; ++kw) {
            const double wval = w9[kh * 3 + kw];
            const int lo = std::max(0, 1 - kw);
            const int hi = std::min(W, W + 1 - kw);
            for (int ow = lo; ow < hi; ++ow) yrow[ow] += wval * xrow[ow + kw - 1];
          }
        }
      }
    }
  count(9ull * static_cast<std::uint64_t>(C) * static_cast<std::uint64_t>(H) *
        static_cast<std::uint64_t>(W) * static_cast<std::uint64_t>(N));

  const bool ng = needs_grad(x) || needs_grad(w);
  return push(std::move(out), ng, [x, w, N, C, H, W](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    const Tensor4& xv2 = t.value(x);
    const Tensor4& wv2 = t.value(w);
    const bool want_x = t.needs_grad(x);
    const bool want_w = t.needs_grad(w);
    Tensor4* gx = want_x ? &t.grad_buf(x) : nullptr;
    Tensor4* gw = want_w ? &t.grad_buf(w) : nullptr;
    for (int in = 0; in < N; ++in)
      for (int c = 0; c < C; ++c) {
        const double* gyplane = &gy.data[gy.offset(in, c, 0, 0)];
        const double* xplane = &xv2.data[xv2.offset(in, c, 0, 0)];
        const double* w9 = &wv2.data[wv2.offset(c, 0, 0, 0)];
        double* gxplane = want_x ? &gx->data[gx->offset(in, c, 0, 0)] : nullptr;
        double* gw9 = want_w ? &gw->data[gw->offset(c, 0, 0, 0)] : nullptr;
        for (int oh = 0; oh < H; ++oh) {
          const double* gyrow = gyplane + static_cast<std::size_t>(oh) * W;
          for (int kh = 0; kh < 3; ++kh) {
            const int ih = oh + kh - 1;
            if (ih < 0 || ih >= H) continue;
            const double* xrow = xplane + static_cast<std::size_t>(ih) * W;
            double* gxrow = want_x ? gxplane + static_cast<std::size_t>(ih) * W : nullptr;
            for (int kw = 0; kw < 3; ++kw) {
              const double wval = w9[kh * 3 + kw];
              const int lo = std::max(0, 1 - kw);
              const int hi = std::min(W, W + 1 - kw);
              double wacc = 0.0;
              for (int ow = lo; ow < hi; ++ow) {
                const double g = gyrow[ow];
                if (want_x) gxrow[ow + kw - 1] += wval * g;
                wacc += xrow[ow + kw - 1] * g;
              }
              if (want_w) gw9[kh * 3 + kw] += wacc;
            }
          }
        }
      }
  });
}

int Tape::bias_add(int x, int b) {
  const Tensor4& xv = value(x);
  const Tensor4& bv = value(b);
  if (bv.n != 1 || bv.c != xv.c || bv.h != 1 || bv.w != 1)
    throw Error("shape-mismatch", "bias must be [1,C,1,1]");
  const int N = xv.n, C = xv.c;
  const std::size_t plane = static_cast<std::size_t>(xv.h) * xv.w;
  Tensor4 out = xv;
  out.precision = join(xv.precision, bv.precision);
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      double* yplane = &out.data[out.offset(in, c, 0, 0)];
      const double bias = bv.data[static_cast<std::size_t>(c)];
      for (std::size_t i = 0; i < plane; ++i) yplane[i] += bias;
    }
  count(xv.numel());

  const bool ng = needs_grad(x) || needs_grad(b);
  return push(std::move(out), ng, [x, b, N, C, plane](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    if (t.needs_grad(x)) {
      Tensor4& gx = t.grad_buf(x);
      for (std::size_t i = 0; i < gy.numel(); ++i) gx.data[i] += gy.data[i];
    }
    if (t.needs_grad(b)) {
      Tensor4& gb = t.grad_buf(b);
      for (int in = 0; in < N; ++in)
        for (int c = 0; c < C; ++c) {
          const double* gyplane = &gy.data[gy.offset(in, c, 0, 0)];
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += gyplane[i];
          gb.data[static_cast<std::size_t>(c)] += acc;
        }
    }
  });
}

int Tape::batchnorm(int x, int gamma, int beta, BnStats& stats, bool train, double eps,
                    double momentum) {
  const Tensor4& xv = value(x);
  const Tensor4& gv = value(gamma);
  const Tensor4& bv = value(beta);
  const int N = xv.n, C = xv.c, H = xv.h, W = xv.w;
  if (gv.c != C || bv.c != C || gv.n != 1 || bv.n != 1)
    throw Error("shape-mismatch", "batchnorm scale/shift must be [1,C,1,1]");
  if (static_cast<int>(stats.mean.size()) != C || static_cast<int>(stats.var.size()) != C)
    throw Error("shape-mismatch", "batchnorm running stats not sized for channels");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const double m = static_cast<double>(N) * static_cast<double>(plane);

  std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
  std::vector<double> var(static_cast<std::size_t>(C), 0.0);
  if (train) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int in = 0; in < N; ++in) {
        const double* xplane = &xv.data[xv.offset(in, c, 0, 0)];
        for (std::size_t i = 0; i < plane; ++i) acc += xplane[i];
      }
      mean[static_cast<std::size_t>(c)] = acc / m;
      double vacc = 0.0;
      for (int in = 0; in < N; ++in) {
        const double* xplane = &xv.data[xv.offset(in, c, 0, 0)];
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = xplane[i] - mean[static_cast<std::size_t>(c)];
          vacc += d * d;
        }
      }
      var[static_cast<std::size_t>(c)] = vacc / m;  // biased, matches eval stats
      stats.mean[static_cast<std::size_t>(c)] =
          momentum * stats.mean[static_cast<std::size_t>(c)] +
          (1.0 - momentum) * mean[static_cast<std::size_t>(c)];
      stats.var[static_cast<std::size_t>(c)] =
          momentum * stats.var[static_cast<std::size_t>(c)] +
          (1.0 - momentum) * var[static_cast<std::size_t>(c)];
    }
  } else {
    mean = stats.mean;
    var = stats.var;
  }

  std::vector<double> inv_std(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c)
    inv_std[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(c)] + eps);

  Tensor4 xhat(N, C, H, W);
  Tensor4 out(N, C, H, W, xv.precision);
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const double mu = mean[static_cast<std::size_t>(c)];
      const double is = inv_std[static_cast<std::size_t>(c)];
      const double ga = gv.data[static_cast<std::size_t>(c)];
      const double be = bv.data[static_cast<std::size_t>(c)];
      const double* xplane = &xv.data[xv.offset(in, c, 0, 0)];
      double* hplane = &xhat.data[xhat.offset(in, c, 0, 0)];
      double* yplane = &out.data[out.offset(in, c, 0, 0)];
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (xplane[i] - mu) * is;
        hplane[i] = xh;
        yplane[i] = ga * xh + be;
      }
    }
  // The inference scale+shift folds into the preceding conv; counted as 0.

  const bool ng = needs_grad(x) || needs_grad(gamma) || needs_grad(beta);
  auto xhat_ptr = std::make_shared<Tensor4>(std::move(xhat));
  auto inv_ptr = std::make_shared<std::vector<double>>(std::move(inv_std));
  return push(std::move(out), ng,
              [x, gamma, beta, train, N, C, plane, m, xhat_ptr, inv_ptr](Tape& t, int self) {
                const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
                const Tensor4& gv2 = t.value(gamma);
                for (int c = 0; c < C; ++c) {
                  const double is = (*inv_ptr)[static_cast<std::size_t>(c)];
                  const double ga = gv2.data[static_cast<std::size_t>(c)];
                  double sum_gy = 0.0, sum_gy_xhat = 0.0;
                  for (int in = 0; in < N; ++in) {
                    const double* gyp = &gy.data[gy.offset(in, c, 0, 0)];
                    const double* hp = &xhat_ptr->data[xhat_ptr->offset(in, c, 0, 0)];
                    for (std::size_t i = 0; i < plane; ++i) {
                      sum_gy += gyp[i];
                      sum_gy_xhat += gyp[i] * hp[i];
                    }
                  }
                  if (t.needs_grad(gamma))
                    t.grad_buf(gamma).data[static_cast<std::size_t>(c)] += sum_gy_xhat;
                  if (t.needs_grad(beta))
                    t.grad_buf(beta).data[static_cast<std::size_t>(c)] += sum_gy;
                  if (!t.needs_grad(x)) continue;
                  Tensor4& gx = t.grad_buf(x);
                  for (int in = 0; in < N; ++in) {
                    const double* gyp = &gy.data[gy.offset(in, c, 0, 0)];
                    const double* hp = &xhat_ptr->data[xhat_ptr->offset(in, c, 0, 0)];
                    double* gxp = &gx.data[gx.offset(in, c, 0, 0)];
                    for (std::size_t i = 0; i < plane; ++i) {
                      if (train) {
                        gxp[i] += ga * is / m * (m * gyp[i] - sum_gy - hp[i] * sum_gy_xhat);
                      } else {
                        gxp[i] += ga * is * gyp[i];
                      }
                    }
                  }
                }
              });
}

int Tape::relu(int x) {
  const Tensor4& xv = value(x);
  Tensor4 out = xv;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const bool ng = needs_grad(x);
  return push(std::move(out), ng, [x](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    const Tensor4& yv = t.value(self);
    if (!t.needs_grad(x)) return;
    Tensor4& gx = t.grad_buf(x);
    for (std::size_t i = 0; i < gy.numel(); ++i)
      if (yv.data[i] > 0.0) gx.data[i] += gy.data[i];
  });
}

int Tape::add(int a, int b) { return accumulate({a, b}); }

int Tape::accumulate(const std::vector<int>& xs) {
  if (xs.empty()) throw Error("shape-mismatch", "accumulate needs at least one input");
  if (xs.size() == 1) return xs[0];
  const Tensor4& first = value(xs[0]);
  Tensor4 out = first;
  bool ng = needs_grad(xs[0]);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const Tensor4& xv = value(xs[k]);
    if (!xv.same_shape(first)) throw Error("shape-mismatch", "accumulate shape mismatch");
    out.precision = join(out.precision, xv.precision);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += xv.data[i];
    ng = ng || needs_grad(xs[k]);
  }
  count((xs.size() - 1) * first.numel());
  std::vector<int> parents = xs;
  return push(std::move(out), ng, [parents](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    for (int p : parents) {
      if (!t.needs_grad(p)) continue;
      Tensor4& gp = t.grad_buf(p);
      for (std::size_t i = 0; i < gy.numel(); ++i) gp.data[i] += gy.data[i];
    }
  });
}

int Tape::scale(int x, double s) {
  Tensor4 out = value(x);
  for (double& v : out.data) v *= s;
  return push(std::move(out), needs_grad(x), [x, s](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    if (!t.needs_grad(x)) return;
    Tensor4& gx = t.grad_buf(x);
    for (std::size_t i = 0; i < gy.numel(); ++i) gx.data[i] += s * gy.data[i];
  });
}

int Tape::nearest_upsample(int x, int factor) {
  if (factor < 2 || (factor & (factor - 1)) != 0)
    throw Error("shape-mismatch", "upsample factor must be a power of two >= 2");
  const Tensor4& xv = value(x);
  const int N = xv.n, C = xv.c, H = xv.h, W = xv.w;
  Tensor4 out(N, C, H * factor, W * factor, xv.precision);
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const double* xplane = &xv.data[xv.offset(in, c, 0, 0)];
      double* yplane = &out.data[out.offset(in, c, 0, 0)];
      for (int oh = 0; oh < H * factor; ++oh) {
        const double* xrow = xplane + static_cast<std::size_t>(oh / factor) * W;
        double* yrow = yplane + static_cast<std::size_t>(oh) * (W * factor);
        for (int ow = 0; ow < W * factor; ++ow) yrow[ow] = xrow[ow / factor];
      }
    }
  // Pure gather, 0 units.
  return push(std::move(out), needs_grad(x), [x, factor, N, C, H, W](Tape& t, int self) {
    if (!t.needs_grad(x)) return;
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    Tensor4& gx = t.grad_buf(x);
    for (int in = 0; in < N; ++in)
      for (int c = 0; c < C; ++c) {
        double* gxplane = &gx.data[gx.offset(in, c, 0, 0)];
        const double* gyplane = &gy.data[gy.offset(in, c, 0, 0)];
        for (int oh = 0; oh < H * factor; ++oh) {
          const double* gyrow = gyplane + static_cast<std::size_t>(oh) * (W * factor);
          double* gxrow = gxplane + static_cast<std::size_t>(oh / factor) * W;
          for (int ow = 0; ow < W * factor; ++ow) gxrow[ow / factor] += gyrow[ow];
        }
      }
  });
}

int Tape::maxpool_down(int x, int factor) {
  if (factor < 2 || (factor & (factor - 1)) != 0)
    throw Error("shape-mismatch", "pool factor must be a power of two >= 2");
  const Tensor4& xv = value(x);
  if (xv.h % factor != 0 || xv.w % factor != 0)
    throw Error("shape-mismatch", "pool input not divisible by factor");
  const int N = xv.n, C = xv.c, HO = xv.h / factor, WO = xv.w / factor;
  Tensor4 out(N, C, HO, WO, xv.precision);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  std::size_t oidx = 0;
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c)
      for (int oh = 0; oh < HO; ++oh)
        for (int ow = 0; ow < WO; ++ow) {
          double best = -1e300;
          std::size_t best_at = 0;
          for (int kh = 0; kh < factor; ++kh)
            for (int kw = 0; kw < factor; ++kw) {
              const std::size_t at = xv.offset(in, c, oh * factor + kh, ow * factor + kw);
              if (xv.data[at] > best) {  // first-wins tie break
                best = xv.data[at];
                best_at = at;
              }
            }
          out.data[oidx] = best;
          (*argmax)[oidx] = best_at;
          ++oidx;
        }
  count((static_cast<std::uint64_t>(factor) * factor - 1) * out.numel());

  return push(std::move(out), needs_grad(x), [x, argmax](Tape& t, int self) {
    if (!t.needs_grad(x)) return;
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    Tensor4& gx = t.grad_buf(x);
    for (std::size_t i = 0; i < gy.numel(); ++i) gx.data[(*argmax)[i]] += gy.data[i];
  });
}

int Tape::global_pool_attention(int a, int b) {
  const Tensor4& av = value(a);
  const Tensor4& bv = value(b);
  if (!av.same_shape(bv)) throw Error("shape-mismatch", "attention operands differ in shape");
  const int N = av.n, C = av.c;
  const std::size_t plane = static_cast<std::size_t>(av.h) * av.w;

  auto gate = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * C);
  auto argmax = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(N) * C);
  Tensor4 out(N, C, av.h, av.w, join(av.precision, bv.precision));
  for (int in = 0; in < N; ++in)
    for (int c = 0; c < C; ++c) {
      const std::size_t base = av.offset(in, c, 0, 0);
      double best = av.data[base];
      std::size_t best_at = base;
      for (std::size_t i = 1; i < plane; ++i)
        if (av.data[base + i] > best) {
          best = av.data[base + i];
          best_at = base + i;
        }
      const double g = sigmoid(best);
      const std::size_t nc = static_cast<std::size_t>(in) * C + static_cast<std::size_t>(c);
      (*gate)[nc] = g;
      (*argmax)[nc] = best_at;
      for (std::size_t i = 0; i < plane; ++i)
        out.data[base + i] = av.data[base + i] + bv.data[base + i] * g;
    }
  // (HW-1) compares + 1 sigmoid per channel, then a multiply and an add per
  // element: 3*H*W*C units in total.
  count(3ull * plane * static_cast<std::uint64_t>(C) * static_cast<std::uint64_t>(N));

  const bool ng = needs_grad(a) || needs_grad(b);
  return push(std::move(out), ng, [a, b, N, C, plane, gate, argmax](Tape& t, int self) {
    const Tensor4& gy = t.vars_[static_cast<std::size_t>(self)].grad;
    const Tensor4& bv2 = t.value(b);
    const bool want_a = t.needs_grad(a);
    const bool want_b = t.needs_grad(b);
    Tensor4* ga = want_a ? &t.grad_buf(a) : nullptr;
    Tensor4* gb = want_b ? &t.grad_buf(b) : nullptr;
    for (int in = 0; in < N; ++in)
      for (int c = 0; c < C; ++c) {
        const std::size_t base = gy.offset(in, c, 0, 0);
        const std::size_t nc = static_cast<std::size_t>(in) * C + static_cast<std::size_t>(c);
        const double g = (*gate)[nc];
        double gate_grad = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double gyv = gy.data[base + i];
          if (want_a) ga->data[base + i] += gyv;  // identity path
          if (want_b) gb->data[base + i] += gyv * g;
          gate_grad += gyv * bv2.data[base + i];
        }
        // Sigmoid of the max routes to the argmax element of a.
        if (want_a) ga->data[(*argmax)[nc]] += gate_grad * g * (1.0 - g);
      }
  });
}

int Tape::focal_loss(int logits, Tensor4 targets, double alpha, double gamma) {
  const Tensor4& zv = value(logits);
  if (!zv.same_shape(targets)) throw Error("shape-mismatch", "focal loss target shape mismatch");
  const std::size_t numel = zv.numel();
  auto dcoef = std::make_shared<std::vector<double>>(numel);
  double total = 0.0;
  for (std::size_t i = 0; i < numel; ++i) {
    const double z = zv.data[i];
    const double p = sigmoid(z);
    const double log_p = -softplus(-z);
    const double log_1p = -softplus(z);
    if (targets.data[i] > 0.5) {
      const double focus = std::pow(1.0 - p, gamma);
      total += -alpha * focus * log_p;
      (*dcoef)[i] = alpha * focus * (gamma * p * log_p - (1.0 - p));
    } else {
      const double focus = std::pow(p, gamma);
      total += -(1.0 - alpha) * focus * log_1p;
      (*dcoef)[i] = (1.0 - alpha) * focus * (p - gamma * (1.0 - p) * log_1p);
    }
  }
  Tensor4 out = Tensor4::scalar(total / static_cast<double>(numel));

  return push(std::move(out), needs_grad(logits), [logits, numel, dcoef](Tape& t, int self) {
    if (!t.needs_grad(logits)) return;
    const double up = t.vars_[static_cast<std::size_t>(self)].grad.data[0];
    Tensor4& gz = t.grad_buf(logits);
    const double inv = up / static_cast<double>(numel);
    for (std::size_t i = 0; i < numel; ++i) gz.data[i] += inv * (*dcoef)[i];
  });
}

int Tape::weighted_sum(int x, Tensor4 weights) {
  const Tensor4& xv = value(x);
  if (!xv.same_shape(weights)) throw Error("shape-mismatch", "weighted_sum shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < xv.numel(); ++i) total += xv.data[i] * weights.data[i];
  auto w = std::make_shared<Tensor4>(std::move(weights));
  return push(Tensor4::scalar(total), needs_grad(x), [x, w](Tape& t, int self) {
    if (!t.needs_grad(x)) return;
    const double up = t.vars_[static_cast<std::size_t>(self)].grad.data[0];
    Tensor4& gx = t.grad_buf(x);
    for (std::size_t i = 0; i < gx.numel(); ++i) gx.data[i] += up * w->data[i];
  });
}

}  // namespace pyrsearch
