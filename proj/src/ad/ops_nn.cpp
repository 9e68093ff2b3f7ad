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
#include <string>
#include <utility>
#include <vector>

#include "gvbsm/ad/ops.hpp"
#include "gvbsm/error.hpp"

namespace gvbsm::ad {
namespace {

[[noreturn]] void fail(const char* op, const std::string& msg) {
  throw ShapeError(std::string(op) + ": " + msg);
}

struct Dims4 {
  std::size_t b, c, h, w;
};

Dims4 dims4(const char* op, const Array& x) {
  if (x.rank() != 4) fail(op, "expected [B,C,H,W], got " + shape_str(x.shape()));
  return {static_cast<std::size_t>(x.dim(0)), static_cast<std::size_t>(x.dim(1)),
          static_cast<std::size_t>(x.dim(2)), static_cast<std::size_t>(x.dim(3))};
}

void require_channel_vector(const char* op, Var v, std::size_t c, const char* what) {
  if (v.shape() != Shape{static_cast<std::int64_t>(c)}) {
    fail(op, std::string(what) + " shape " + shape_str(v.shape()) + " does not match " +
                 std::to_string(c) + " channels");
  }
}

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, groups;
  std::size_t ho, wo, cin_g, cout_g, k, p;
};

// Unfolds the channels of one group of one image into col[k, p].
void im2col(const double* img, const ConvGeom& g, std::size_t group, double* col) {
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    const double* plane = img + (group * g.cin_g + c) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((c * g.kh + ky) * g.kw + kx) * g.p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill_n(dst, g.wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
  }
}

void col2im(const double* col, const ConvGeom& g, std::size_t group, double* img) {
  for (std::size_t c = 0; c < g.cin_g; ++c) {
    double* plane = img + (group * g.cin_g + c) * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((c * g.kh + ky) * g.kw + kx) * g.p;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const double* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
  }
}

struct PatchGrid {
  std::size_t gh, gw, n_p;
};

PatchGrid patch_grid(const char* op, const Dims4& d, int n_p) {
  if (n_p < 1) fail(op, "patch size must be >= 1");
  const auto np = static_cast<std::size_t>(n_p);
  if (np > std::max(d.h, d.w)) {
    fail(op, "patch size " + std::to_string(n_p) + " exceeds feature map " + std::to_string(d.h) + "x" +
                 std::to_string(d.w));
  }
  return {(d.h + np - 1) / np, (d.w + np - 1) / np, np};
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, Conv2dOptions opt) {
  const Array& xv = x.value();
  const Array& wv = weight.value();
  const Dims4 d = dims4("conv2d", xv);
  if (wv.rank() != 4) fail("conv2d", "weight must be [O,C/g,kh,kw], got " + shape_str(wv.shape()));
  if (opt.groups < 1 || opt.stride < 1 || opt.padding < 0) fail("conv2d", "invalid options");
  ConvGeom g{};
  g.batch = d.b;
  g.cin = d.c;
  g.h = d.h;
  g.w = d.w;
  g.cout = static_cast<std::size_t>(wv.dim(0));
  g.kh = static_cast<std::size_t>(wv.dim(2));
  g.kw = static_cast<std::size_t>(wv.dim(3));
  g.stride = static_cast<std::size_t>(opt.stride);
  g.pad = static_cast<std::size_t>(opt.padding);
  g.groups = static_cast<std::size_t>(opt.groups);
  if (g.cin % g.groups != 0 || g.cout % g.groups != 0) {
    fail("conv2d", "channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
                       " not divisible by groups " + std::to_string(g.groups));
  }
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (static_cast<std::size_t>(wv.dim(1)) != g.cin_g) {
    fail("conv2d", "weight " + shape_str(wv.shape()) + " does not fit input " + shape_str(xv.shape()));
  }
  if (g.h + 2 * g.pad < g.kh || g.w + 2 * g.pad < g.kw) fail("conv2d", "kernel larger than padded input");
  g.ho = (g.h + 2 * g.pad - g.kh) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.kw) / g.stride + 1;
  g.k = g.cin_g * g.kh * g.kw;
  g.p = g.ho * g.wo;
  if (bias.valid()) require_channel_vector("conv2d", bias, g.cout, "bias");

  Array out(Shape{static_cast<std::int64_t>(g.batch), static_cast<std::int64_t>(g.cout),
                  static_cast<std::int64_t>(g.ho), static_cast<std::int64_t>(g.wo)});
  std::vector<double> col(g.k * g.p);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const double* img = xv.ptr() + b * g.cin * g.h * g.w;
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      im2col(img, g, grp, col.data());
      for (std::size_t o = 0; o < g.cout_g; ++o) {
        const std::size_t oc = grp * g.cout_g + o;
        double* orow = out.ptr() + (b * g.cout + oc) * g.p;
        if (bias.valid()) std::fill_n(orow, g.p, bias.value()[oc]);
        const double* wrow = wv.ptr() + oc * g.k;
        for (std::size_t kk = 0; kk < g.k; ++kk) {
          const double wk = wrow[kk];
          const double* crow = col.data() + kk * g.p;
          for (std::size_t p = 0; p < g.p; ++p) orow[p] += wk * crow[p];
        }
      }
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return x.tape().record("conv2d", std::move(out), inputs, [x, weight, bias, g](Tape& t, const Array& gout) {
    const Array& xv = t.value(x);
    const Array& wv = t.value(weight);
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(weight);
    if (bias.valid() && t.requires_grad(bias)) {
      Array& gb = t.grad_buffer(bias);
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t oc = 0; oc < g.cout; ++oc) {
          const double* grow = gout.ptr() + (b * g.cout + oc) * g.p;
          double s = 0.0;
          for (std::size_t p = 0; p < g.p; ++p) s += grow[p];
          gb[oc] += s;
        }
    }
    if (!need_x && !need_w) return;
    std::vector<double> col(g.k * g.p);
    std::vector<double> dcol(need_x ? g.k * g.p : 0);
    Array* gx = need_x ? &t.grad_buffer(x) : nullptr;
    Array* gw = need_w ? &t.grad_buffer(weight) : nullptr;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const double* img = xv.ptr() + b * g.cin * g.h * g.w;
      for (std::size_t grp = 0; grp < g.groups; ++grp) {
        if (need_w) {
          im2col(img, g, grp, col.data());
          for (std::size_t o = 0; o < g.cout_g; ++o) {
            const std::size_t oc = grp * g.cout_g + o;
            const double* grow = gout.ptr() + (b * g.cout + oc) * g.p;
            double* gwrow = gw->ptr() + oc * g.k;
            for (std::size_t kk = 0; kk < g.k; ++kk) {
              const double* crow = col.data() + kk * g.p;
              double s = 0.0;
              for (std::size_t p = 0; p < g.p; ++p) s += grow[p] * crow[p];
              gwrow[kk] += s;
            }
          }
        }
        if (need_x) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          for (std::size_t o = 0; o < g.cout_g; ++o) {
            const std::size_t oc = grp * g.cout_g + o;
            const double* grow = gout.ptr() + (b * g.cout + oc) * g.p;
            const double* wrow = wv.ptr() + oc * g.k;
            for (std::size_t kk = 0; kk < g.k; ++kk) {
              const double wk = wrow[kk];
              double* drow = dcol.data() + kk * g.p;
              for (std::size_t p = 0; p < g.p; ++p) drow[p] += wk * grow[p];
            }
          }
          col2im(dcol.data(), g, grp, gx->ptr() + b * g.cin * g.h * g.w);
        }
      }
    }
  });
}

Var avg_pool2d(Var x, int kernel) {
  const Array& xv = x.value();
  const Dims4 d = dims4("avg_pool2d", xv);
  if (kernel < 1) fail("avg_pool2d", "kernel must be >= 1");
  const auto k = static_cast<std::size_t>(kernel);
  const std::size_t ho = d.h / k;
  const std::size_t wo = d.w / k;
  if (ho == 0 || wo == 0) fail("avg_pool2d", "kernel larger than input " + shape_str(xv.shape()));
  Array out(Shape{xv.dim(0), xv.dim(1), static_cast<std::int64_t>(ho), static_cast<std::int64_t>(wo)});
  const double inv = 1.0 / static_cast<double>(k * k);
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    const double* src = xv.ptr() + bc * d.h * d.w;
    double* dst = out.ptr() + bc * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) s += src[(oy * k + ky) * d.w + ox * k + kx];
        dst[oy * wo + ox] = s * inv;
      }
  }
  return x.tape().record("avg_pool2d", std::move(out), {x}, [x, d, k, ho, wo, inv](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
      double* dst = gx.ptr() + bc * d.h * d.w;
      const double* src = g.ptr() + bc * ho * wo;
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const double v = src[oy * wo + ox] * inv;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) dst[(oy * k + ky) * d.w + ox * k + kx] += v;
        }
    }
  });
}

Var global_avg_pool(Var x) {
  const Array& xv = x.value();
  const Dims4 d = dims4("global_avg_pool", xv);
  const std::size_t hw = d.h * d.w;
  Array out(Shape{xv.dim(0), xv.dim(1)});
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[bc * hw + i];
    out[bc] = s / static_cast<double>(hw);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x}, [x, d, hw](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc)
      for (std::size_t i = 0; i < hw; ++i) gx[bc * hw + i] += g[bc] * inv;
  });
}

Var channel_shuffle(Var x, int groups) {
  const Array& xv = x.value();
  const Dims4 d = dims4("channel_shuffle", xv);
  if (groups < 1 || d.c % static_cast<std::size_t>(groups) != 0) {
    fail("channel_shuffle", std::to_string(d.c) + " channels not divisible by " + std::to_string(groups));
  }
  const auto ng = static_cast<std::size_t>(groups);
  const std::size_t per = d.c / ng;
  const std::size_t hw = d.h * d.w;
  // Output channel i*ng + gi reads input channel gi*per + i.
  std::vector<std::size_t> src_of(d.c);
  for (std::size_t gi = 0; gi < ng; ++gi)
    for (std::size_t i = 0; i < per; ++i) src_of[i * ng + gi] = gi * per + i;
  Array out(xv.shape());
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      std::copy_n(xv.ptr() + (b * d.c + src_of[c]) * hw, hw, out.ptr() + (b * d.c + c) * hw);
    }
  return x.tape().record("channel_shuffle", std::move(out), {x}, [x, d, hw, src_of](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c) {
        double* dst = gx.ptr() + (b * d.c + src_of[c]) * hw;
        const double* src = g.ptr() + (b * d.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
  });
}

Var channel_mean(Var x) {
  const Array& xv = x.value();
  const Dims4 d = dims4("channel_mean", xv);
  const std::size_t hw = d.h * d.w;
  const double n = static_cast<double>(d.b * hw);
  if (n == 0) fail("channel_mean", "empty input");
  Array out(Shape{xv.dim(1)});
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* src = xv.ptr() + (b * d.c + c) * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += src[i];
      out[c] += s;
    }
  for (auto& v : out.vec()) v /= n;
  return x.tape().record("channel_mean", std::move(out), {x}, [x, d, hw, n](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c) {
        double* dst = gx.ptr() + (b * d.c + c) * hw;
        const double v = g[c] / n;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += v;
      }
  });
}

Var channel_var(Var x) {
  const Array& xv = x.value();
  const Dims4 d = dims4("channel_var", xv);
  const std::size_t hw = d.h * d.w;
  const double n = static_cast<double>(d.b * hw);
  if (n == 0) fail("channel_var", "empty input");
  std::vector<double> mu(d.c, 0.0);
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* src = xv.ptr() + (b * d.c + c) * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += src[i];
      mu[c] += s;
    }
  for (auto& v : mu) v /= n;
  Array out(Shape{xv.dim(1)});
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* src = xv.ptr() + (b * d.c + c) * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += (src[i] - mu[c]) * (src[i] - mu[c]);
      out[c] += s;
    }
  for (auto& v : out.vec()) v /= n;
  return x.tape().record("channel_var", std::move(out), {x}, [x, d, hw, n, mu](Tape& t, const Array& g) {
    const Array& xv = t.value(x);
    Array& gx = t.grad_buffer(x);
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t off = (b * d.c + c) * hw;
        const double v = 2.0 * g[c] / n;
        for (std::size_t i = 0; i < hw; ++i) gx[off + i] += v * (xv[off + i] - mu[c]);
      }
  });
}

namespace {

// Per-cell means of x over (batch, channel, cell pixels), plus the cell
// element counts.
std::pair<std::vector<double>, std::vector<double>> cell_means(const Array& xv, const Dims4& d,
                                                               const PatchGrid& pg) {
  std::vector<double> sums(pg.gh * pg.gw, 0.0);
  std::vector<double> counts(pg.gh * pg.gw, 0.0);
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    const double* plane = xv.ptr() + bc * d.h * d.w;
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        const std::size_t cell = (y / pg.n_p) * pg.gw + x / pg.n_p;
        sums[cell] += plane[y * d.w + x];
        counts[cell] += 1.0;
      }
  }
  for (std::size_t i = 0; i < sums.size(); ++i) sums[i] /= counts[i];
  return {sums, counts};
}

}  // namespace

Var patch_mean(Var x, int n_p) {
  const Array& xv = x.value();
  const Dims4 d = dims4("patch_mean", xv);
  const PatchGrid pg = patch_grid("patch_mean", d, n_p);
  auto [means, counts] = cell_means(xv, d, pg);
  Array out(Shape{static_cast<std::int64_t>(pg.gh), static_cast<std::int64_t>(pg.gw)}, means);
  return x.tape().record("patch_mean", std::move(out), {x}, [x, d, pg, counts](Tape& t, const Array& g) {
    Array& gx = t.grad_buffer(x);
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
      double* plane = gx.ptr() + bc * d.h * d.w;
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t xx = 0; xx < d.w; ++xx) {
          const std::size_t cell = (y / pg.n_p) * pg.gw + xx / pg.n_p;
          plane[y * d.w + xx] += g[cell] / counts[cell];
        }
    }
  });
}

Var patch_var(Var x, int n_p) {
  const Array& xv = x.value();
  const Dims4 d = dims4("patch_var", xv);
  const PatchGrid pg = patch_grid("patch_var", d, n_p);
  auto [means, counts] = cell_means(xv, d, pg);
  std::vector<double> vars(means.size(), 0.0);
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    const double* plane = xv.ptr() + bc * d.h * d.w;
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t xx = 0; xx < d.w; ++xx) {
        const std::size_t cell = (y / pg.n_p) * pg.gw + xx / pg.n_p;
        const double dv = plane[y * d.w + xx] - means[cell];
        vars[cell] += dv * dv;
      }
  }
  for (std::size_t i = 0; i < vars.size(); ++i) vars[i] /= counts[i];
  Array out(Shape{static_cast<std::int64_t>(pg.gh), static_cast<std::int64_t>(pg.gw)}, vars);
  return x.tape().record("patch_var", std::move(out), {x},
                         [x, d, pg, means = std::move(means), counts = std::move(counts)](Tape& t, const Array& g) {
    const Array& xv = t.value(x);
    Array& gx = t.grad_buffer(x);
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
      const std::size_t off = bc * d.h * d.w;
      for (std::size_t y = 0; y < d.h; ++y)
        for (std::size_t xx = 0; xx < d.w; ++xx) {
          const std::size_t cell = (y / pg.n_p) * pg.gw + xx / pg.n_p;
          const std::size_t i = off + y * d.w + xx;
          gx[i] += 2.0 * g[cell] * (xv[i] - means[cell]) / counts[cell];
        }
    }
  });
}

Var batch_norm(Var x, Var mean, Var var, Var gamma, Var beta, double eps) {
  const Array& xv = x.value();
  const Dims4 d = dims4("batch_norm", xv);
  require_channel_vector("batch_norm", mean, d.c, "mean");
  require_channel_vector("batch_norm", var, d.c, "var");
  require_channel_vector("batch_norm", gamma, d.c, "gamma");
  require_channel_vector("batch_norm", beta, d.c, "beta");
  const std::size_t hw = d.h * d.w;
  const Array& mv = mean.value();
  const Array& vv = var.value();
  const Array& gv = gamma.value();
  const Array& bv = beta.value();
  std::vector<double> inv(d.c);
  for (std::size_t c = 0; c < d.c; ++c) {
    if (vv[c] + eps <= 0.0) fail("batch_norm", "non-positive variance");
    inv[c] = 1.0 / std::sqrt(vv[c] + eps);
  }
  Array out(xv.shape());
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = (b * d.c + c) * hw;
      const double a = gv[c] * inv[c];
      const double s = bv[c] - a * mv[c];
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = a * xv[off + i] + s;
    }
  return x.tape().record("batch_norm", std::move(out), {x, mean, var, gamma, beta},
                         [x, mean, var, gamma, beta, d, hw, inv](Tape& t, const Array& g) {
    const Array& xv = t.value(x);
    const Array& mv = t.value(mean);
    const Array& gv = t.value(gamma);
    const bool nx = t.requires_grad(x), nm = t.requires_grad(mean), nv = t.requires_grad(var);
    const bool ng = t.requires_grad(gamma), nb = t.requires_grad(beta);
    Array* gx = nx ? &t.grad_buffer(x) : nullptr;
    std::vector<double> sum_g(d.c, 0.0), sum_gxc(d.c, 0.0);
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t off = (b * d.c + c) * hw;
        const double a = gv[c] * inv[c];
        double sg = 0.0, sgx = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          sg += g[off + i];
          sgx += g[off + i] * (xv[off + i] - mv[c]);
          if (gx) (*gx)[off + i] += a * g[off + i];
        }
        sum_g[c] += sg;
        sum_gxc[c] += sgx;
      }
    for (std::size_t c = 0; c < d.c; ++c) {
      if (nm) t.grad_buffer(mean)[c] -= gv[c] * inv[c] * sum_g[c];
      if (nv) t.grad_buffer(var)[c] += -0.5 * gv[c] * inv[c] * inv[c] * inv[c] * sum_gxc[c];
      if (ng) t.grad_buffer(gamma)[c] += inv[c] * sum_gxc[c];
      if (nb) t.grad_buffer(beta)[c] += sum_g[c];
    }
  });
}

Var group_norm(Var x, int groups, Var gamma, Var beta, double eps) {
  const Array& xv = x.value();
  const Dims4 d = dims4("group_norm", xv);
  if (groups < 1 || d.c % static_cast<std::size_t>(groups) != 0) {
    fail("group_norm", std::to_string(d.c) + " channels not divisible by " + std::to_string(groups) + " groups");
  }
  require_channel_vector("group_norm", gamma, d.c, "gamma");
  require_channel_vector("group_norm", beta, d.c, "beta");
  const auto ng = static_cast<std::size_t>(groups);
  const std::size_t hw = d.h * d.w;
  const std::size_t cg = d.c / ng;
  const std::size_t n = cg * hw;
  const Array& gv = gamma.value();
  const Array& bv = beta.value();
  Array xhat(xv.shape());
  std::vector<double> inv(d.b * ng);
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t gi = 0; gi < ng; ++gi) {
      const std::size_t off = (b * d.c + gi * cg) * hw;
      double m = 0.0;
      for (std::size_t i = 0; i < n; ++i) m += xv[off + i];
      m /= static_cast<double>(n);
      double v = 0.0;
      for (std::size_t i = 0; i < n; ++i) v += (xv[off + i] - m) * (xv[off + i] - m);
      v /= static_cast<double>(n);
      const double iv = 1.0 / std::sqrt(v + eps);
      inv[b * ng + gi] = iv;
      for (std::size_t i = 0; i < n; ++i) xhat[off + i] = (xv[off + i] - m) * iv;
    }
  Array out(xv.shape());
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = (b * d.c + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) out[off + i] = gv[c] * xhat[off + i] + bv[c];
    }
  return x.tape().record("group_norm", std::move(out), {x, gamma, beta},
                         [x, gamma, beta, d, ng, cg, hw, n, xhat = std::move(xhat), inv](Tape& t, const Array& g) {
    const Array& gv = t.value(gamma);
    if (t.requires_grad(gamma) || t.requires_grad(beta)) {
      std::vector<double> sg(d.c, 0.0), sgx(d.c, 0.0);
      for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t c = 0; c < d.c; ++c) {
          const std::size_t off = (b * d.c + c) * hw;
          for (std::size_t i = 0; i < hw; ++i) {
            sg[c] += g[off + i];
            sgx[c] += g[off + i] * xhat[off + i];
          }
        }
      if (t.requires_grad(gamma)) {
        Array& gg = t.grad_buffer(gamma);
        for (std::size_t c = 0; c < d.c; ++c) gg[c] += sgx[c];
      }
      if (t.requires_grad(beta)) {
        Array& gb = t.grad_buffer(beta);
        for (std::size_t c = 0; c < d.c; ++c) gb[c] += sg[c];
      }
    }
    if (!t.requires_grad(x)) return;
    Array& gx = t.grad_buffer(x);
    const double nn = static_cast<double>(n);
    std::vector<double> dxhat(n);
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t gi = 0; gi < ng; ++gi) {
        const std::size_t off = (b * d.c + gi * cg) * hw;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t c = gi * cg + i / hw;
          dxhat[i] = g[off + i] * gv[c];
          s1 += dxhat[i];
          s2 += dxhat[i] * xhat[off + i];
        }
        const double iv = inv[b * ng + gi];
        for (std::size_t i = 0; i < n; ++i) {
          gx[off + i] += iv / nn * (nn * dxhat[i] - s1 - xhat[off + i] * s2);
        }
      }
  });
}

}  // namespace gvbsm::ad
