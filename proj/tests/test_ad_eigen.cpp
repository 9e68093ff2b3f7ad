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
#include <cmath>
#include <limits>
#include <random>

#include "charpoly_oracle.hpp"
#include "doctest.h"
#include "fd_oracle.hpp"
#include "gvbsm/ad/eigen.hpp"
#include "gvbsm/ad/ops.hpp"
#include "gvbsm/error.hpp"

using namespace gvbsm;
using namespace gvbsm::ad;

namespace {

Array from_int(const std::vector<std::vector<int>>& m) {
  const auto n = static_cast<std::int64_t>(m.size());
  Array a(Shape{n, n});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) a[i * m.size() + j] = m[i][j];
  return a;
}

}  // namespace

TEST_CASE("diag(1,2): eigenvalues and gradient of the largest") {
  Tape t;
  Var g = t.leaf(Array(Shape{2, 2}, {1, 0, 0, 2}), true);
  Var ev = eigvals_sym(g);
  CHECK(ev.value()[0] == doctest::Approx(1.0));
  CHECK(ev.value()[1] == doctest::Approx(2.0));
  Var top = take_rows(ev, std::vector<std::int64_t>{1});
  t.backward(sum(top));
  const Array grad = t.grad(g);
  CHECK(grad[0] == doctest::Approx(0.0));
  CHECK(grad[1] == doctest::Approx(0.0));
  CHECK(grad[2] == doctest::Approx(0.0));
  CHECK(grad[3] == doctest::Approx(1.0));
  CHECK_FALSE(t.degenerate_spectrum());
}

TEST_CASE("identity spectrum is flagged degenerate on the reverse pass") {
  Tape t;
  Array eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Var g = t.leaf(eye, true);
  Var ev = eigvals_sym(g);
  for (double v : ev.value().data()) CHECK(v == doctest::Approx(1.0));
  t.backward(sum(ev));
  CHECK(t.degenerate_spectrum());
  // sum of eigenvalues = trace, so its gradient is I regardless of basis.
  const Array grad = t.grad(g);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(grad[i * 3 + j] == doctest::Approx(i == j ? 1.0 : 0.0));
}

TEST_CASE("random symmetric 4x4 eigenvalue gradients match finite differences") {
  int checked = 0;
  for (std::uint64_t seed = 1; checked < 10; ++seed) {
    Array a = gvbsm::testing::random_array({4, 4}, seed);
    Array g(Shape{4, 4});
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) g[i * 4 + j] = 0.5 * (a[i * 4 + j] + a[j * 4 + i]);
    if (min_spectral_gap(jacobi_eigen(g).values) <= 1e-3) continue;
    ++checked;
    const double err = gvbsm::testing::grad_rel_error({a}, [](Tape&, const std::vector<Var>& v) {
      return gvbsm::testing::project(eigvals_sym(scale(add(v[0], transpose(v[0])), 0.5)), 77);
    });
    CHECK(err <= 1e-5);
  }
}

TEST_CASE("trace identity and orthonormal eigenvectors") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (int n = 1; n <= 12; ++n) {
    Array g(Shape{n, n});
    for (int i = 0; i < n; ++i)
      for (int j = i; j < n; ++j) g[i * n + j] = g[j * n + i] = nd(rng) * 10.0;
    const SymEigen e = jacobi_eigen(g);
    double tr = 0.0, sum = 0.0;
    for (int i = 0; i < n; ++i) tr += g[i * n + i];
    for (double v : e.values) sum += v;
    CHECK(std::abs(sum - tr) <= 1e-9 * std::max(1.0, std::abs(tr)));
    CHECK(std::is_sorted(e.values.begin(), e.values.end()));
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b) {
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += e.vectors[i * n + a] * e.vectors[i * n + b];
        CHECK(dot == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-10));
      }
  }
}

TEST_CASE("asymmetric and non-finite inputs are rejected") {
  CHECK_THROWS_AS(jacobi_eigen(Array(Shape{2, 2}, {1, 1e-3, 0, 1})), ShapeError);
  CHECK_THROWS_AS(jacobi_eigen(Array(Shape{2, 2}, {1, 0, 0, std::numeric_limits<double>::quiet_NaN()})),
                  ShapeError);
  CHECK_THROWS_AS(jacobi_eigen(Array(Shape{2, 3})), ShapeError);
  CHECK_NOTHROW(jacobi_eigen(Array(Shape{2, 2}, {1, 1e-10, 0, 1})));
}

TEST_CASE("characteristic-polynomial oracle agrees on all 2x2 integer matrices") {
  for (int a = -3; a <= 3; ++a)
    for (int b = -3; b <= 3; ++b)
      for (int c = -3; c <= 3; ++c) {
        const std::vector<std::vector<int>> m{{a, b}, {b, c}};
        const auto expect = gvbsm::testing::oracle_eigenvalues(m);
        const auto got = jacobi_eigen(from_int(m)).values;
        REQUIRE(expect.size() == 2);
        for (int i = 0; i < 2; ++i) CHECK(std::abs(got[i] - expect[i]) <= 1e-9);
      }
}

TEST_CASE("oracle handles repeated roots") {
  const std::vector<std::vector<int>> m{{2, 0, 0, 0}, {0, 2, 0, 0}, {0, 0, -1, 0}, {0, 0, 0, 2}};
  const auto ev = gvbsm::testing::oracle_eigenvalues(m);
  REQUIRE(ev.size() == 4);
  CHECK(ev[0] == doctest::Approx(-1));
  CHECK(ev[1] == doctest::Approx(2));
  CHECK(ev[3] == doctest::Approx(2));
}
