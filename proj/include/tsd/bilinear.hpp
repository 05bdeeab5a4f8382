#pragma once

#include <array>
#include <cmath>
#include <cstddef>

#include "tsd/kink.hpp"
#include "tsd/precision.hpp"

TSD_NAMESPACE_BEGIN

// Four-corner interpolation weights for a point on an H×W lattice, plus their
// derivatives w.r.t. x and y. Corners off the lattice get index -1 and
// contribute nothing, which is zero padding.
struct BilinearTaps {
  std::array<std::ptrdiff_t, 4> index{-1, -1, -1, -1};
  std::array<Real, 4> weight{};
  std::array<Real, 4> dweight_dx{};
  std::array<Real, 4> dweight_dy{};
};

inline BilinearTaps bilinear_taps(int height, int width, Real x, Real y) {
  BilinearTaps taps;
  KinkMonitor::note_lattice(x);
  KinkMonitor::note_lattice(y);
  if (!(x > Real(-1)) || !(y > Real(-1)) || !(x < Real(width)) || !(y < Real(height))) return taps;
  const Real xf = std::floor(x);
  const Real yf = std::floor(y);
  const int x0 = static_cast<int>(xf);
  const int y0 = static_cast<int>(yf);
  const Real lx = x - xf;
  const Real ly = y - yf;
  const Real hx = 1 - lx;
  const Real hy = 1 - ly;

  const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
  const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
  const Real w[4] = {hy * hx, hy * lx, ly * hx, ly * lx};
  const Real dx[4] = {-hy, hy, -ly, ly};
  const Real dy[4] = {-hx, -lx, hx, lx};
  for (int c = 0; c < 4; ++c) {
    if (xs[c] < 0 || xs[c] >= width || ys[c] < 0 || ys[c] >= height) continue;
    taps.index[c] = static_cast<std::ptrdiff_t>(ys[c]) * width + xs[c];
    taps.weight[c] = w[c];
    taps.dweight_dx[c] = dx[c];
    taps.dweight_dy[c] = dy[c];
  }
  return taps;
}

TSD_NAMESPACE_END
