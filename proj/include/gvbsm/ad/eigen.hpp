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

#include <vector>

#include "gvbsm/ad/array.hpp"

namespace gvbsm::ad {

inline constexpr double kSymmetryTolerance = 1e-8;
inline constexpr double kJacobiTolerance = 1e-10;
inline constexpr double kDegenerateGap = 1e-8;

struct SymEigen {
  std::vector<double> values;   // ascending
  Array vectors;                // [n,n], column i is the unit eigenvector of values[i]
  int sweeps = 0;
};

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Rejects non-square input, non-finite entries and asymmetry beyond
/// kSymmetryTolerance (scaled by max(1, max |g_ij|)). Sweeps stop once the
/// off-diagonal Frobenius norm falls below kJacobiTolerance * max(1, ||g||_F).
SymEigen jacobi_eigen(const Array& g);

/// Smallest gap between consecutive ascending eigenvalues; +inf for n < 2.
double min_spectral_gap(const std::vector<double>& ascending);

}  // namespace gvbsm::ad
