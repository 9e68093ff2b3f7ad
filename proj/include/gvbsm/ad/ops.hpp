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
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gvbsm/ad/tape.hpp"

// Differentiable operations. Every function records onto the tape owning its
// first argument and throws ShapeError naming the operation on non-conforming
// shapes.
namespace gvbsm::ad {

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var x);
Var log(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// Identity forward; contributes nothing to upstream gradients.
Var stop_grad(Var x);

Var reshape(Var x, Shape shape);
Var transpose(Var x);                      // [M,N] -> [N,M]
Var matmul(Var a, Var b);                  // [M,K] x [K,N]
Var linear(Var x, Var weight, Var bias);   // x[B,I], w[O,I], b[O] (bias may be invalid)
Var take_rows(Var x, std::span<const std::int64_t> rows);  // gather along dim 0

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};
// x[B,C,H,W], w[O,C/groups,kh,kw], bias[O] or invalid.
Var conv2d(Var x, Var weight, Var bias, Conv2dOptions opt = {});
Var avg_pool2d(Var x, int kernel);   // stride == kernel, floor mode
Var global_avg_pool(Var x);          // [B,C,H,W] -> [B,C]
Var channel_shuffle(Var x, int groups);

// Per-channel statistics of x[B,C,H,W] over (B,H,W); variance is biased.
Var channel_mean(Var x);
Var channel_var(Var x);

// Patch statistics: the H x W plane is cut into cells of n_p x n_p pixels
// (edge cells smaller); each cell reduces over batch, channel and the cell's
// pixels. Output shape [ceil(H/n_p), ceil(W/n_p)].
Var patch_mean(Var x, int n_p);
Var patch_var(Var x, int n_p);

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, with mean/var given as
/// separate inputs so callers decide between batch and running statistics.
Var batch_norm(Var x, Var mean, Var var, Var gamma, Var beta, double eps);
Var group_norm(Var x, int groups, Var gamma, Var beta, double eps);

// Along the last dimension of a rank-1 or rank-2 input.
Var softmax(Var x);
Var log_softmax(Var x);

Var sum(Var x);
Var mean(Var x);
Var variance(Var x);  // biased, over all elements
/// Euclidean norm of all elements (Frobenius norm for matrices). The
/// gradient at the origin is taken as zero.
Var l2_norm(Var x);
/// sum p * (log p - log_q), with 0 log 0 = 0.
Var kl_div(Var p, Var log_q);
Var squared_error(Var a, Var b);  // sum of squared differences
/// Mean over the batch of -log_probs[b, labels[b]].
Var nll_loss(Var log_probs, std::span<const int> labels);
Var cross_entropy(Var logits, std::span<const int> labels);

/// Eigenvalues (ascending) of a symmetric matrix. Reverse pass uses
/// d lambda_i = v_i^T dG v_i.
Var eigvals_sym(Var g);

}  // namespace gvbsm::ad
