#pragma once

// Reference computations the flow tests compare against; none of them
// touch the variational solver.

#include <cmath>
#include <limits>
#include <map>
#include <utility>

#include "flowgate/flow.hpp"
#include "flowgate/image.hpp"

namespace flowgate::test {

// Most frequent integer displacement of 8x8-style blocks from a to b found
// by exhaustive SSD search in [-radius, radius]^2 over the central region.
inline std::pair<int, int> block_match_mode(const ImageBuffer& a, const ImageBuffer& b, int block, int radius) {
  const ImageBuffer ga = to_gray(a), gb = to_gray(b);
  std::map<std::pair<int, int>, int> votes;
  const int margin = radius + block;
  for (int y0 = margin; y0 + block + margin <= a.height(); y0 += block) {
    for (int x0 = margin; x0 + block + margin <= a.width(); x0 += block) {
      double best = std::numeric_limits<double>::infinity();
      std::pair<int, int> arg{0, 0};
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          double ssd = 0.0;
          for (int y = 0; y < block; ++y) {
            for (int x = 0; x < block; ++x) {
              const double d = ga.at(x0 + x, y0 + y) - gb.at(x0 + x + dx, y0 + y + dy);
              ssd += d * d;
            }
          }
          if (ssd < best) {
            best = ssd;
            arg = {dx, dy};
          }
        }
      }
      ++votes[arg];
    }
  }
  std::pair<int, int> mode{0, 0};
  int n = -1;
  for (const auto& [k, v] : votes) {
    if (v > n) {
      n = v;
      mode = k;
    }
  }
  return mode;
}

// Least-squares k in flow ~ (k - 1)(p - c) over the central `fraction`.
inline double expansion_scale(const FlowField& f, double fraction) {
  const double cx = (f.width - 1) / 2.0, cy = (f.height - 1) / 2.0;
  const double hx = fraction * f.width / 2.0, hy = fraction * f.height / 2.0;
  double num = 0.0, den = 0.0;
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      if (std::abs(dx) > hx || std::abs(dy) > hy) continue;
      num += f.u[f.index(x, y)] * dx + f.v[f.index(x, y)] * dy;
      den += dx * dx + dy * dy;
    }
  }
  return 1.0 + num / den;
}

}  // namespace flowgate::test
