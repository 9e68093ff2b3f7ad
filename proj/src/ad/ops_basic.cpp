/* Copyright 2026 The gvbsm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "gvbsm/ad/eigen.hpp"
#include "gvbsm/ad/ops.hpp"
#include "gvbsm/error.hpp"

namespace gvbsm::ad {
namespace {

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw ShapeError(std::string(op) + ": " + msg);
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, Var x, std::size_t rank) {
  if (x.shape().size() != rank) {
    fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
  }
}

// Rows x cols view of a rank-1 or rank-2 value for last-dimension ops.
std::pair<std::size_t, std::size_t> rows_cols(const char* op, const Array& v) {
  if (v.rank() == 1) return {1, static_cast<std::size_t>(v.dim(0))};
  if (v.rank() == 2) return {static_cast<std::size_t>(v.dim(0)), static_cast<std::size_t>(v.dim(1))};
  fail(op, "expected rank 1 or 2, got " + shape_str(v.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, const Array& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      Array& gv = t.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Array& g) {
    if (t.requires_grad(a)) {
      Array& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b)) {
      Array& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a, b);
  Array out = a.value();
  const Array& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Array& g) {
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    if (t.requires_grad(a)) {
      Array& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Array& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Array out = a.value();
  for (auto& v : out.vec()) v *= s;
  return a.tape().record("scale", std::move(out), {a}, [a, s](Tape& t, const Array& g) {
    Array& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Array out = a.value();
  for (auto& v : out.vec()) v += s;
  return a.tape().record("add_scalar", std::move(out), {a}, [a](Tape& t, const Array& g) {
    Array& ga = t.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var relu(Var x) {
  Array out = x.value();
  for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
  return x.tape().record("relu", std::move(out), {x}, [x](Tape& t, const Array& g) {
    const Array& xv = t.value(x);
    Array& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var log(Var x) {
  Array out = x.value();
  for (auto& v : out.vec()) v = std::log(v);
  return x.tape().record("log", std::move(out), {x}, [x](Tape& t, const Array& g) {
    const Array& xv = t.value(x);
    Array& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
}

Var stop_grad(Var x) {
  return x.tape().record("stop_grad", x.value(), {}, nullptr);
}

Var reshape(Var x, Shape shape) {
  Array out = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(out), {x}, [x](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var transpose(Var x) {
  require_rank("transpose", x, 2);
  const Array& xv = x.value();
  const auto m = static_cast<std::size_t>(xv.dim(0));
  const auto n = static_cast<std::size_t>(xv.dim(1));
  Array out(Shape{xv.dim(1), xv.dim(0)});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  return x.tape().record("transpose", std::move(out), {x}, [x, m, n](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.dim(1) != bv.dim(0)) {
    fail("matmul", "inner dimensions differ: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  }
  const auto m = static_cast<std::size_t>(av.dim(0));
  const auto k = static_cast<std::size_t>(av.dim(1));
  const auto n = static_cast<std::size_t>(bv.dim(1));
  Array out(Shape{av.dim(0), bv.dim(1)});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.ptr() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aik = av[i * k + p];
      const double* brow = bv.ptr() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& t, const Array& g) {
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    if (t.requires_grad(a)) {
      Array& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (t.requires_grad(b)) {
      Array& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aik = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aik * g[i * n + j];
        }
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const Array& xv = x.value();
  const Array& wv = weight.value();
  if (xv.dim(1) != wv.dim(1)) {
    fail("linear", "input " + shape_str(xv.shape()) + " does not fit weight " + shape_str(wv.shape()));
  }
  const auto batch = static_cast<std::size_t>(xv.dim(0));
  const auto in = static_cast<std::size_t>(xv.dim(1));
  const auto outf = static_cast<std::size_t>(wv.dim(0));
  if (bias.valid() && bias.shape() != Shape{wv.dim(0)}) {
    fail("linear", "bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(outf));
  }
  Array out(Shape{xv.dim(0), wv.dim(0)});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < outf; ++o) {
      double s = bias.valid() ? bias.value()[o] : 0.0;
      const double* xr = xv.ptr() + b * in;
      const double* wr = wv.ptr() + o * in;
      for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
      out[b * outf + o] = s;
    }
  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return x.tape().record("linear", std::move(out), inputs,
                         [x, weight, bias, batch, in, outf](Tape& t, const Array& g) {
    const Array& xv = t.value(x);
    const Array& wv = t.value(weight);
    if (t.requires_grad(x)) {
      Array& gx = t.grad_buffer(x);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < outf; ++o) {
          const double go = g[b * outf + o];
          const double* wr = wv.ptr() + o * in;
          double* gr = gx.ptr() + b * in;
          for (std::size_t i = 0; i < in; ++i) gr[i] += go * wr[i];
        }
    }
    if (t.requires_grad(weight)) {
      Array& gw = t.grad_buffer(weight);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < outf; ++o) {
          const double go = g[b * outf + o];
          const double* xr = xv.ptr() + b * in;
          double* gr = gw.ptr() + o * in;
          for (std::size_t i = 0; i < in; ++i) gr[i] += go * xr[i];
        }
    }
    if (bias.valid() && t.requires_grad(bias)) {
      Array& gb = t.grad_buffer(bias);
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t o = 0; o < outf; ++o) gb[o] += g[b * outf + o];
    }
  });
}

Var take_rows(Var x, std::span<const std::int64_t> rows) {
  const Array& xv = x.value();
  if (xv.rank() < 1) fail("take_rows", "scalar input");
  const std::size_t stride = xv.size() / static_cast<std::size_t>(std::max<std::int64_t>(xv.dim(0), 1));
  for (auto r : rows) {
    if (r < 0 || r >= xv.dim(0)) {
      fail("take_rows", "row " + std::to_string(r) + " out of range for " + shape_str(xv.shape()));
    }
  }
  Shape shape = xv.shape();
  shape[0] = static_cast<std::int64_t>(rows.size());
  Array out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(xv.ptr() + static_cast<std::size_t>(rows[i]) * stride, stride, out.ptr() + i * stride);
  }
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  return x.tape().record("take_rows", std::move(out), {x}, [x, idx, stride](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gx.ptr() + static_cast<std::size_t>(idx[i]) * stride;
      const double* src = g.ptr() + i * stride;
      for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
    }
  });
}

Var softmax(Var x) {
  const Array& xv = x.value();
  const auto [rows, cols] = rows_cols("softmax", xv);
  Array out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * cols;
    double* yr = out.ptr() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (yr[c] = std::exp(xr[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= s;
  }
  Array y = out;
  return x.tape().record("softmax", std::move(out), {x}, [x, y, rows, cols](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var log_softmax(Var x) {
  const Array& xv = x.value();
  const auto [rows, cols] = rows_cols("log_softmax", xv);
  Array out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * cols;
    const double mx = *std::max_element(xr, xr + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(xr[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xr[c] - lse;
  }
  Array y = out;
  return x.tape().record("log_softmax", std::move(out), {x}, [x, y, rows, cols](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        gx[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gs;
      }
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record("sum", Array::scalar(s), {x}, [x](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (auto& v : gx.vec()) v += g[0];
  });
}

Var mean(Var x) {
  const Array& xv = x.value();
  if (xv.empty()) fail("mean", "empty input");
  double s = 0.0;
  for (double v : xv.data()) s += v;
  const double n = static_cast<double>(xv.size());
  return x.tape().record("mean", Array::scalar(s / n), {x}, [x, n](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (auto& v : gx.vec()) v += g[0] / n;
  });
}

Var variance(Var x) {
  const Array& xv = x.value();
  if (xv.empty()) fail("variance", "empty input");
  const double n = static_cast<double>(xv.size());
  double m = 0.0;
  for (double v : xv.data()) m += v;
  m /= n;
  double s = 0.0;
  for (double v : xv.data()) s += (v - m) * (v - m);
  return x.tape().record("variance", Array::scalar(s / n), {x}, [x, m, n](Tape& t, const Array& g) {
    const Array& xv = t.value(x);
    Array& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[0] * 2.0 * (xv[i] - m) / n;
  });
}

Var l2_norm(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  const double nrm = std::sqrt(s);
  return x.tape().record("l2_norm", Array::scalar(nrm), {x}, [x, nrm](Tape& t, const Array& g) {
    if (nrm == 0.0) return;
    const Array& xv = t.value(x);
    Array& gx = t.grad_buffer(x);
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += g[0] * xv[i] / nrm;
  });
}

Var kl_div(Var p, Var log_q) {
  require_same_shape("kl_div", p, log_q);
  const Array& pv = p.value();
  const Array& lq = log_q.value();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (pv[i] < 0.0) fail("kl_div", "negative probability");
    if (pv[i] > 0.0) s += pv[i] * (std::log(pv[i]) - lq[i]);
  }
  return p.tape().record("kl_div", Array::scalar(s), {p, log_q}, [p, log_q](Tape& t, const Array& g) {
    const Array& pv = t.value(p);
    const Array& lq = t.value(log_q);
    if (t.requires_grad(p)) {
      Array& gp = t.grad_buffer(p);
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] > 0.0) gp[i] += g[0] * (std::log(pv[i]) + 1.0 - lq[i]);
      }
    }
    if (t.requires_grad(log_q)) {
      Array& gq = t.grad_buffer(log_q);
      for (std::size_t i = 0; i < pv.size(); ++i) gq[i] -= g[0] * pv[i];
    }
  });
}

Var squared_error(Var a, Var b) {
  require_same_shape("squared_error", a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return a.tape().record("squared_error", Array::scalar(s), {a, b}, [a, b](Tape& t, const Array& g) {
    const Array& av = t.value(a);
    const Array& bv = t.value(b);
    if (t.requires_grad(a)) {
      Array& ga = t.grad_buffer(a);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += 2.0 * g[0] * (av[i] - bv[i]);
    }
    if (t.requires_grad(b)) {
      Array& gb = t.grad_buffer(b);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= 2.0 * g[0] * (av[i] - bv[i]);
    }
  });
}

Var nll_loss(Var log_probs, std::span<const int> labels) {
  require_rank("nll_loss", log_probs, 2);
  const Array& lp = log_probs.value();
  const auto batch = static_cast<std::size_t>(lp.dim(0));
  const auto classes = static_cast<std::size_t>(lp.dim(1));
  if (labels.size() != batch) {
    fail("nll_loss", std::to_string(labels.size()) + " labels for batch of " + std::to_string(batch));
  }
  if (batch == 0) fail("nll_loss", "empty batch");
  double s = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      fail("nll_loss", "label " + std::to_string(labels[b]) + " out of range");
    }
    s -= lp[b * classes + static_cast<std::size_t>(labels[b])];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  const double n = static_cast<double>(batch);
  return log_probs.tape().record("nll_loss", Array::scalar(s / n), {log_probs},
                                 [log_probs, lab, classes, n](Tape& t, const Array& g) {
    Array& gl = t.grad_buffer(log_probs);
    for (std::size_t b = 0; b < lab.size(); ++b) {
      gl[b * classes + static_cast<std::size_t>(lab[b])] -= g[0] / n;
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  return nll_loss(log_softmax(logits), labels);
}

Var eigvals_sym(Var g) {
  SymEigen eig = jacobi_eigen(g.value());
  const auto n = eig.values.size();
  Array out(Shape{static_cast<std::int64_t>(n)}, eig.values);
  const double gap = min_spectral_gap(eig.values);
  return g.tape().record("eigvals_sym", std::move(out), {g},
                         [g, vecs = std::move(eig.vectors), n, gap](Tape& t, const Array& gl) {
    if (gap < kDegenerateGap) t.flag_degenerate_spectrum();
    Array& gg = t.grad_buffer(g);
    for (std::size_t k = 0; k < n; ++k) {
      const double w = gl[k];
      if (w == 0.0) continue;
      for (std::size_t i = 0; i < n; ++i) {
        const double vi = vecs[i * n + k] * w;
        for (std::size_t j = 0; j < n; ++j) gg[i * n + j] += vi * vecs[j * n + k];
      }
    }
  });
}

}  // namespace gvbsm::ad
