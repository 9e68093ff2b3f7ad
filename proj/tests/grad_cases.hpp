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

// Gradient-check cases for every differentiable engine operation. Shared by
// the unit suite and the acceptance suite.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fd_oracle.hpp"
#include "gvbsm/ad/eigen.hpp"

namespace gvbsm::testing {

struct GradCase {
  std::string name;
  std::function<std::vector<Array>(std::uint64_t seed)> make_inputs;
  ScalarFn fn;
};

inline std::vector<Array> randoms(std::uint64_t seed, std::initializer_list<Shape> shapes,
                                  double lo = -1.0, double hi = 1.0) {
  std::vector<Array> out;
  std::uint64_t s = seed * 7919ULL + 13ULL;
  for (const auto& sh : shapes) out.push_back(random_array(sh, s++, lo, hi));
  return out;
}

inline std::vector<GradCase> engine_grad_cases() {
  using namespace ad;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<std::vector<Array>(std::uint64_t)> mk, ScalarFn fn) {
    cases.push_back({std::move(name), std::move(mk), std::move(fn)});
  };

  add_case("add", [](auto s) { return randoms(s, {{3, 4}, {3, 4}}); },
           [](Tape&, const std::vector<Var>& v) { return project(add(v[0], v[1]), 1); });
  add_case("sub", [](auto s) { return randoms(s, {{3, 4}, {3, 4}}); },
           [](Tape&, const std::vector<Var>& v) { return project(sub(v[0], v[1]), 2); });
  add_case("mul", [](auto s) { return randoms(s, {{3, 4}, {3, 4}}); },
           [](Tape&, const std::vector<Var>& v) { return project(mul(v[0], v[1]), 3); });
  add_case("scale+add_scalar", [](auto s) { return randoms(s, {{5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(add_scalar(scale(v[0], 1.7), 0.3), 4); });
  add_case("relu", [](auto s) { return randoms(s, {{4, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(relu(v[0]), 5); });
  add_case("log", [](auto s) { return randoms(s, {{6}}, 0.5, 2.0); },
           [](Tape&, const std::vector<Var>& v) { return project(log(v[0]), 6); });
  add_case("transpose", [](auto s) { return randoms(s, {{3, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(transpose(v[0]), 7); });
  add_case("matmul", [](auto s) { return randoms(s, {{3, 4}, {4, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(matmul(v[0], v[1]), 8); });
  add_case("linear", [](auto s) { return randoms(s, {{4, 6}, {3, 6}, {3}}); },
           [](Tape&, const std::vector<Var>& v) { return project(linear(v[0], v[1], v[2]), 9); });
  add_case("take_rows", [](auto s) { return randoms(s, {{5, 3}}); },
           [](Tape&, const std::vector<Var>& v) {
             const std::vector<std::int64_t> rows{4, 0, 0, 2};
             return project(take_rows(v[0], rows), 10);
           });
  add_case("conv2d", [](auto s) { return randoms(s, {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}}); },
           [](Tape&, const std::vector<Var>& v) {
             return project(conv2d(v[0], v[1], v[2], {.stride = 1, .padding = 1, .groups = 1}), 11);
           });
  add_case("conv2d_stride2", [](auto s) { return randoms(s, {{2, 2, 6, 6}, {3, 2, 3, 3}}); },
           [](Tape&, const std::vector<Var>& v) {
             return project(conv2d(v[0], v[1], Var{}, {.stride = 2, .padding = 1, .groups = 1}), 12);
           });
  add_case("conv2d_depthwise", [](auto s) { return randoms(s, {{1, 4, 5, 5}, {4, 1, 3, 3}}); },
           [](Tape&, const std::vector<Var>& v) {
             return project(conv2d(v[0], v[1], Var{}, {.stride = 1, .padding = 1, .groups = 4}), 13);
           });
  add_case("conv2d_grouped_1x1", [](auto s) { return randoms(s, {{2, 4, 3, 3}, {6, 2, 1, 1}}); },
           [](Tape&, const std::vector<Var>& v) {
             return project(conv2d(v[0], v[1], Var{}, {.stride = 1, .padding = 0, .groups = 2}), 14);
           });
  add_case("avg_pool2d", [](auto s) { return randoms(s, {{2, 2, 5, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(avg_pool2d(v[0], 2), 15); });
  add_case("global_avg_pool", [](auto s) { return randoms(s, {{2, 3, 3, 4}}); },
           [](Tape&, const std::vector<Var>& v) { return project(global_avg_pool(v[0]), 16); });
  add_case("channel_shuffle", [](auto s) { return randoms(s, {{2, 6, 2, 2}}); },
           [](Tape&, const std::vector<Var>& v) { return project(channel_shuffle(v[0], 3), 17); });
  add_case("channel_mean", [](auto s) { return randoms(s, {{3, 4, 3, 3}}); },
           [](Tape&, const std::vector<Var>& v) { return project(channel_mean(v[0]), 18); });
  add_case("channel_var", [](auto s) { return randoms(s, {{3, 4, 3, 3}}); },
           [](Tape&, const std::vector<Var>& v) { return project(channel_var(v[0]), 19); });
  add_case("patch_mean", [](auto s) { return randoms(s, {{2, 3, 5, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(patch_mean(v[0], 2), 20); });
  add_case("patch_var", [](auto s) { return randoms(s, {{2, 3, 5, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(patch_var(v[0], 2), 21); });
  add_case("batch_norm_train", [](auto s) { return randoms(s, {{3, 4, 3, 3}, {4}, {4}}); },
           [](Tape&, const std::vector<Var>& v) {
             Var m = channel_mean(v[0]);
             Var var = channel_var(v[0]);
             return project(batch_norm(v[0], m, var, v[1], v[2], 1e-5), 22);
           });
  add_case("batch_norm_eval", [](auto s) {
             auto in = randoms(s, {{3, 4, 3, 3}, {4}, {4}, {4}});
             in.push_back(random_array({4}, s + 99, 0.5, 1.5));
             return in;
           },
           [](Tape&, const std::vector<Var>& v) {
             return project(batch_norm(v[0], v[3], v[4], v[1], v[2], 1e-5), 23);
           });
  add_case("group_norm", [](auto s) { return randoms(s, {{2, 4, 3, 3}, {4}, {4}}); },
           [](Tape&, const std::vector<Var>& v) { return project(group_norm(v[0], 2, v[1], v[2], 1e-5), 24); });
  add_case("softmax", [](auto s) { return randoms(s, {{3, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(softmax(v[0]), 25); });
  add_case("log_softmax", [](auto s) { return randoms(s, {{3, 5}}); },
           [](Tape&, const std::vector<Var>& v) { return project(log_softmax(v[0]), 26); });
  add_case("sum+mean", [](auto s) { return randoms(s, {{2, 3}}); },
           [](Tape&, const std::vector<Var>& v) { return add(sum(mul(v[0], v[0])), mean(v[0])); });
  add_case("variance", [](auto s) { return randoms(s, {{7}}); },
           [](Tape&, const std::vector<Var>& v) { return variance(v[0]); });
  add_case("l2_norm", [](auto s) { return randoms(s, {{3, 3}}); },
           [](Tape&, const std::vector<Var>& v) { return l2_norm(v[0]); });
  add_case("kl_div", [](auto s) { return randoms(s, {{6}, {6}}); },
           [](Tape&, const std::vector<Var>& v) { return kl_div(softmax(v[0]), log_softmax(v[1])); });
  add_case("squared_error", [](auto s) { return randoms(s, {{4, 3}, {4, 3}}); },
           [](Tape&, const std::vector<Var>& v) { return squared_error(v[0], v[1]); });
  add_case("cross_entropy", [](auto s) { return randoms(s, {{4, 5}}, -2.0, 2.0); },
           [](Tape&, const std::vector<Var>& v) {
             const std::vector<int> labels{0, 3, 1, 4};
             return cross_entropy(v[0], labels);
           });
  add_case("eigvals_sym",
           [](std::uint64_t s) {
             // Re-draw until the spectral gap exceeds 1e-3 (FD is meaningless
             // across near-crossings).
             for (std::uint64_t k = 0;; ++k) {
               auto in = randoms(s * 1000 + k, {{4, 4}});
               Array g(Shape{4, 4});
               for (int i = 0; i < 4; ++i)
                 for (int j = 0; j < 4; ++j) g[i * 4 + j] = 0.5 * (in[0][i * 4 + j] + in[0][j * 4 + i]);
               if (min_spectral_gap(jacobi_eigen(g).values) > 1e-3) return in;
             }
           },
           [](Tape&, const std::vector<Var>& v) {
             Var g = scale(add(v[0], transpose(v[0])), 0.5);
             return project(eigvals_sym(g), 27);
           });
  add_case("eigvals_gram", [](auto s) { return randoms(s, {{3, 6}}); },
           [](Tape&, const std::vector<Var>& v) {
             return project(eigvals_sym(matmul(v[0], transpose(v[0]))), 28);
           });
  return cases;
}

}  // namespace gvbsm::testing
