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

// Exact eigenvalue oracle for small symmetric integer matrices.
//
// The characteristic polynomial is computed in exact rational arithmetic
// (Faddeev-LeVerrier), split into square-free factors (Yun), and each
// factor's simple real roots are isolated between the roots of its
// derivative and refined by bisection in long double.

#include <algorithm>
#include <cmath>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

namespace gvbsm::testing {

using Rational = boost::multiprecision::cpp_rational;
// Coefficients, lowest degree first.
using Poly = std::vector<Rational>;

inline void poly_trim(Poly& p) {
  while (p.size() > 1 && p.back() == 0) p.pop_back();
}

inline Poly poly_derivative(const Poly& p) {
  if (p.size() <= 1) return Poly{Rational(0)};
  Poly d(p.size() - 1);
  for (std::size_t i = 1; i < p.size(); ++i) d[i - 1] = p[i] * static_cast<int>(i);
  return d;
}

// Returns quotient, stores remainder in `rem`.
inline Poly poly_divmod(Poly num, const Poly& den, Poly& rem) {
  poly_trim(num);
  if (num.size() < den.size()) {
    rem = num;
    return Poly{Rational(0)};
  }
  Poly q(num.size() - den.size() + 1, Rational(0));
  for (std::size_t k = q.size(); k-- > 0;) {
    const Rational f = num[k + den.size() - 1] / den.back();
    q[k] = f;
    for (std::size_t i = 0; i < den.size(); ++i) num[k + i] -= f * den[i];
  }
  num.resize(std::max<std::size_t>(den.size() - 1, 1));
  if (den.size() == 1) num[0] = 0;
  poly_trim(num);
  rem = num;
  poly_trim(q);
  return q;
}

inline bool poly_is_zero(const Poly& p) { return p.size() == 1 && p[0] == 0; }

inline Poly poly_monic(Poly p) {
  poly_trim(p);
  const Rational lead = p.back();
  for (auto& c : p) c /= lead;
  return p;
}

inline Poly poly_gcd(Poly a, Poly b) {
  poly_trim(a);
  poly_trim(b);
  while (!poly_is_zero(b)) {
    Poly r;
    poly_divmod(a, b, r);
    a = b;
    b = r;
  }
  return poly_monic(a);
}

inline Poly poly_sub(Poly a, const Poly& b) {
  if (a.size() < b.size()) a.resize(b.size(), Rational(0));
  for (std::size_t i = 0; i < b.size(); ++i) a[i] -= b[i];
  poly_trim(a);
  return a;
}

inline Poly poly_exact_div(const Poly& a, const Poly& b) {
  Poly r;
  return poly_divmod(a, b, r);
}

inline long double poly_eval(const Poly& p, long double x) {
  long double acc = 0.0L;
  for (std::size_t i = p.size(); i-- > 0;) acc = acc * x + static_cast<long double>(p[i]);
  return acc;
}

// Characteristic polynomial det(lambda I - A), monic.
inline Poly char_poly(const std::vector<std::vector<int>>& a) {
  const std::size_t n = a.size();
  using Mat = std::vector<std::vector<Rational>>;
  Poly c(n + 1, Rational(0));
  c[n] = 1;
  Mat m(n, std::vector<Rational>(n, Rational(0)));
  for (std::size_t k = 1; k <= n; ++k) {
    Mat am(n, std::vector<Rational>(n, Rational(0)));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        Rational s = 0;
        for (std::size_t l = 0; l < n; ++l) s += Rational(a[i][l]) * m[l][j];
        am[i][j] = s;
      }
    for (std::size_t i = 0; i < n; ++i) am[i][i] += c[n - k + 1];
    m = am;
    Rational tr = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t l = 0; l < n; ++l) tr += Rational(a[i][l]) * m[l][i];
    c[n - k] = -tr / static_cast<int>(k);
  }
  return c;
}

// Distinct roots of a square-free, real-rooted polynomial.
inline std::vector<long double> simple_real_roots(const Poly& p) {
  const std::size_t deg = p.size() - 1;
  if (deg == 0) return {};
  if (deg == 1) return {static_cast<long double>(-p[0] / p[1])};
  long double bound = 0.0L;
  for (std::size_t i = 0; i < deg; ++i) {
    bound = std::max(bound, std::fabs(static_cast<long double>(p[i] / p[deg])));
  }
  bound += 1.0L;
  std::vector<long double> crit = simple_real_roots(poly_derivative(p));
  std::vector<long double> edges{-bound};
  edges.insert(edges.end(), crit.begin(), crit.end());
  edges.push_back(bound);
  std::vector<long double> roots;
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
    long double lo = edges[i], hi = edges[i + 1];
    long double flo = poly_eval(p, lo);
    if (flo == 0.0L) {
      roots.push_back(lo);
      continue;
    }
    if (poly_eval(p, hi) == 0.0L) continue;  // picked up as next interval's lo
    for (int it = 0; it < 200 && hi - lo > 0.0L; ++it) {
      const long double mid = lo + (hi - lo) / 2;
      if (mid == lo || mid == hi) break;
      const long double fm = poly_eval(p, mid);
      if (fm == 0.0L) {
        lo = hi = mid;
        break;
      }
      if ((fm < 0) == (flo < 0)) {
        lo = mid;
        flo = fm;
      } else {
        hi = mid;
      }
    }
    roots.push_back(lo + (hi - lo) / 2);
  }
  return roots;
}

// All eigenvalues (with multiplicity), ascending.
inline std::vector<double> oracle_eigenvalues(const std::vector<std::vector<int>>& a) {
  const Poly p = char_poly(a);
  // Yun square-free factorisation: p = prod_i f_i^i.
  std::vector<double> out;
  const Poly dp = poly_derivative(p);
  Poly b = poly_gcd(p, dp);
  Poly c = poly_exact_div(p, b);
  Poly d = poly_sub(poly_exact_div(dp, b), poly_derivative(c));
  for (int mult = 1; c.size() > 1; ++mult) {
    const Poly f = poly_gcd(c, d);
    for (long double r : simple_real_roots(f)) {
      for (int k = 0; k < mult; ++k) out.push_back(static_cast<double>(r));
    }
    c = poly_exact_div(c, f);
    d = poly_sub(poly_exact_div(d, f), poly_derivative(c));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace gvbsm::testing
