#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tsd/tensor.hpp"

TSD_NAMESPACE_BEGIN

struct GradCheckOptions {
  Real eps = sizeof(Real) == 4 ? Real(1e-3) : Real(1e-6);
  // Per-coordinate error is |analytic − numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1.0;
  // 0 checks every coordinate; otherwise a seeded random subset per parameter.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // Skip coordinates whose ±eps step moves any ReLU, smooth-L1, bilinear or
  // IoU input onto another piece.
  bool skip_kink_crossings = true;
};

struct GradCheckResult {
  double max_relative_error = 0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;
  std::string worst;  // "param[i]: analytic vs numeric" for the worst coordinate
};

// Compares backward() against central differences (f(θ+eps) − f(θ−eps)) / 2eps
// for every coordinate of every parameter. f must rebuild its graph from the
// current parameter values on each call. Parameters must be leaves with
// requires_grad; their gradients are zeroed first and left holding the
// analytic gradient afterwards. Coordinates whose step crosses a kink are
// skipped and counted.
GradCheckResult finite_difference_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                        const GradCheckOptions& options = {});

TSD_NAMESPACE_END
