// Copyright 2026 The kmsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#pragma once

#include <Eigen/Dense>

namespace kmsd::testing {

/**
 * Brute-force nearest point of the n = 2 cone {rho^1/2 - rho^1/4 v rho^1/4 : v >= 0} for real
 * data. Grid search over v = L L^T with L real lower triangular, then a pattern-search polish.
 */
inline Eigen::Matrix2d brute_force_cone_point(const Eigen::Matrix2d& a, const Eigen::Matrix2d& rho_half,
                                              const Eigen::Matrix2d& rho_quarter) {
  auto point = [&](const Eigen::Vector3d& l) {
    Eigen::Matrix2d low;
    low << l(0), 0.0, l(1), l(2);
    return Eigen::Matrix2d(rho_half - rho_quarter * low * low.transpose() * rho_quarter);
  };
  auto f = [&](const Eigen::Vector3d& l) { return (a - point(l)).squaredNorm(); };
  Eigen::Vector3d best(0, 0, 0);
  double fbest = f(best);
  for (double x = -3.0; x <= 3.0; x += 0.05)
    for (double y = -3.0; y <= 3.0; y += 0.05)
      for (double z = -3.0; z <= 3.0; z += 0.05) {
        const Eigen::Vector3d l(x, y, z);
        const double v = f(l);
        if (v < fbest) {
          fbest = v;
          best = l;
        }
      }
  for (double h = 0.05; h > 1e-13;) {
    bool moved = false;
    for (int k = 0; k < 3; ++k)
      for (double sgn : {-1.0, 1.0}) {
        Eigen::Vector3d l = best;
        l(k) += sgn * h;
        const double v = f(l);
        if (v < fbest) {
          fbest = v;
          best = l;
          moved = true;
        }
      }
    if (!moved) h *= 0.5;
  }
  return point(best);
}

}  // namespace kmsd::testing
