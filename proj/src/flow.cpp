#include "flowgate/flow.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "flowgate/errors.hpp"

namespace flowgate {

namespace {

// Unconstrained scalar raster used inside the solver (derivatives are
// signed, so ImageBuffer's [0,1] contract does not apply).
struct Plane {
  int w = 0;
  int h = 0;
  std::vector<double> d;

  Plane() = default;
  Plane(int w_, int h_, double fill = 0.0) : w(w_), h(h_), d(static_cast<std::size_t>(w_) * h_, fill) {}

  double& operator()(int x, int y) { return d[static_cast<std::size_t>(y) * w + x]; }
  double operator()(int x, int y) const { return d[static_cast<std::size_t>(y) * w + x]; }
  double clamped(int x, int y) const { return (*this)(std::clamp(x, 0, w - 1), std::clamp(y, 0, h - 1)); }
  double sample(double x, double y) const {
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const int x0 = static_cast<int>(x);
    const int y0 = static_cast<int>(y);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    return ((*this)(x0, y0) * (1 - fx) + (*this)(x1, y0) * fx) * (1 - fy) +
           ((*this)(x0, y1) * (1 - fx) + (*this)(x1, y1) * fx) * fy;
  }
};

Plane to_plane(const ImageBuffer& gray) {
  Plane p(gray.width(), gray.height());
  std::copy(gray.samples().begin(), gray.samples().end(), p.d.begin());
  return p;
}

Plane blur_plane(const Plane& src, double sigma) {
  if (!(sigma > 0.0)) return src;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += (k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= sum;
  Plane tmp(src.w, src.h), out(src.w, src.h);
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * src.clamped(x + i, y);
      tmp(x, y) = acc;
    }
  for (int y = 0; y < src.h; ++y)
    for (int x = 0; x < src.w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.clamped(x, y + i);
      out(x, y) = acc;
    }
  return out;
}

Plane resize_plane(const Plane& src, int w, int h) {
  if (w == src.w && h == src.h) return src;
  Plane out(w, h);
  const double sx = static_cast<double>(src.w) / w;
  const double sy = static_cast<double>(src.h) / h;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out(x, y) = src.sample((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
  return out;
}

// Downsample with an anti-alias prefilter matched to the scale factor.
Plane downsample(const Plane& src, int w, int h, double scale) {
  const double sigma = 0.5 * std::sqrt(1.0 / (scale * scale) - 1.0);
  return resize_plane(blur_plane(src, sigma), w, h);
}

// Fourth-order central difference with edge replication.
void gradients(const Plane& img, Plane& gx, Plane& gy) {
  gx = Plane(img.w, img.h);
  gy = Plane(img.w, img.h);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      gx(x, y) = (img.clamped(x - 2, y) - 8.0 * img.clamped(x - 1, y) + 8.0 * img.clamped(x + 1, y) -
                  img.clamped(x + 2, y)) /
                 12.0;
      gy(x, y) = (img.clamped(x, y - 2) - 8.0 * img.clamped(x, y - 1) + 8.0 * img.clamped(x, y + 1) -
                  img.clamped(x, y + 2)) /
                 12.0;
    }
}

struct LevelFlow {
  Plane u;
  Plane v;
};

LevelFlow upsample(const LevelFlow& f, int w, int h) {
  LevelFlow out{resize_plane(f.u, w, h), resize_plane(f.v, w, h)};
  const double sx = static_cast<double>(w) / f.u.w;
  const double sy = static_cast<double>(h) / f.u.h;
  for (double& x : out.u.d) x *= sx;
  for (double& y : out.v.d) y *= sy;
  return out;
}

constexpr double kCharbonnierEps = 0.05;

double charbonnier_weight(double s2, double eps) { return 1.0 / std::sqrt(s2 + eps * eps); }

// One pyramid level: refine_iters relinearizations, each followed by
// inner_iters Jacobi sweeps of the per-pixel 2x2 normal equations.
void solve_level(const Plane& a, const Plane& b, LevelFlow& flow, const FlowConfig& cfg) {
  const int w = a.w, h = a.h;
  const double lambda = cfg.alpha * cfg.alpha;
  const bool robust = cfg.penalty == SmoothnessPenalty::Charbonnier;

  Plane ax, ay;
  gradients(a, ax, ay);
  Plane bw(w, h), bx, by;
  Plane ix(w, h), iy(w, h), r(w, h);
  // Smoothness weights on the edge to the right (wx) and below (wy).
  Plane wx(w, h, 1.0), wy(w, h, 1.0);
  Plane next_u(w, h), next_v(w, h);

  for (int pass = 0; pass < cfg.refine_iters; ++pass) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) bw(x, y) = b.sample(x + flow.u(x, y), y + flow.v(x, y));
    gradients(bw, bx, by);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double tx = x + flow.u(x, y);
        const double ty = y + flow.v(x, y);
        // Pixels whose match leaves the frame keep only the smoothness term.
        if (tx < 0.0 || tx > w - 1 || ty < 0.0 || ty > h - 1) {
          ix(x, y) = iy(x, y) = r(x, y) = 0.0;
          continue;
        }
        const double gx = 0.5 * (ax(x, y) + bx(x, y));
        const double gy = 0.5 * (ay(x, y) + by(x, y));
        const double it = bw(x, y) - a(x, y);
        ix(x, y) = gx;
        iy(x, y) = gy;
        r(x, y) = gx * flow.u(x, y) + gy * flow.v(x, y) - it;
      }

    const LevelFlow base = flow;
    for (int sweep = 0; sweep < cfg.inner_iters; ++sweep) {
      if (robust && sweep % 10 == 0) {
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            if (x + 1 < w) {
              const double du = flow.u(x + 1, y) - flow.u(x, y), dv = flow.v(x + 1, y) - flow.v(x, y);
              wx(x, y) = charbonnier_weight(du * du + dv * dv, kCharbonnierEps) * kCharbonnierEps;
            }
            if (y + 1 < h) {
              const double du = flow.u(x, y + 1) - flow.u(x, y), dv = flow.v(x, y + 1) - flow.v(x, y);
              wy(x, y) = charbonnier_weight(du * du + dv * dv, kCharbonnierEps) * kCharbonnierEps;
            }
          }
      }
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double su = 0.0, sv = 0.0, sw = 0.0;
          if (x > 0) {
            const double e = wx(x - 1, y);
            su += e * flow.u(x - 1, y);
            sv += e * flow.v(x - 1, y);
            sw += e;
          }
          if (x + 1 < w) {
            const double e = wx(x, y);
            su += e * flow.u(x + 1, y);
            sv += e * flow.v(x + 1, y);
            sw += e;
          }
          if (y > 0) {
            const double e = wy(x, y - 1);
            su += e * flow.u(x, y - 1);
            sv += e * flow.v(x, y - 1);
            sw += e;
          }
          if (y + 1 < h) {
            const double e = wy(x, y);
            su += e * flow.u(x, y + 1);
            sv += e * flow.v(x, y + 1);
            sw += e;
          }
          const double gx = ix(x, y), gy = iy(x, y), rr = r(x, y);
          const double a11 = gx * gx + lambda * sw;
          const double a22 = gy * gy + lambda * sw;
          const double a12 = gx * gy;
          const double b1 = lambda * su + gx * rr;
          const double b2 = lambda * sv + gy * rr;
          const double det = a11 * a22 - a12 * a12;
          if (det <= 0.0) {
            next_u(x, y) = base.u(x, y);
            next_v(x, y) = base.v(x, y);
            continue;
          }
          next_u(x, y) = (a22 * b1 - a12 * b2) / det;
          next_v(x, y) = (a11 * b2 - a12 * b1) / det;
        }
      }
      std::swap(flow.u.d, next_u.d);
      std::swap(flow.v.d, next_v.d);
    }
  }
}

void check_finite(const ImageBuffer& img, const char* name) {
  for (double s : img.samples()) {
    if (!std::isfinite(s)) throw std::invalid_argument(std::string("estimate_flow: non-finite samples in ") + name);
  }
}

}  // namespace

FlowField::FlowField(int w, int h)
    : width(w), height(h), u(static_cast<std::size_t>(w) * h, 0.0), v(static_cast<std::size_t>(w) * h, 0.0) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("flow dimensions must be positive");
}

bool FlowField::finite() const {
  return std::all_of(u.begin(), u.end(), [](double x) { return std::isfinite(x); }) &&
         std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

MagnitudeMap::MagnitudeMap(int w, int h, double fill)
    : width(w), height(h), m(static_cast<std::size_t>(w) * h, fill) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("magnitude map dimensions must be positive");
}

void FlowConfig::validate() const {
  if (resolution < 64 || resolution > 1024) throw std::invalid_argument("flow resolution must be in [64, 1024]");
  if (refine_iters <= 0 || inner_iters <= 0) throw std::invalid_argument("flow iteration counts must be positive");
  if (!(alpha > 0.0)) throw std::invalid_argument("flow alpha must be positive");
  if (!(pyramid_scale > 0.0 && pyramid_scale < 1.0)) throw std::invalid_argument("pyramid scale must be in (0,1)");
  if (min_level_size < 4) throw std::invalid_argument("min level size must be at least 4");
  if (!(presmooth_sigma >= 0.0)) throw std::invalid_argument("presmooth sigma must be nonnegative");
}

void to_json(nlohmann::json& j, const FlowConfig& c) {
  j = {{"resolution", c.resolution},
       {"refine_iters", c.refine_iters},
       {"inner_iters", c.inner_iters},
       {"alpha", c.alpha},
       {"pyramid_scale", c.pyramid_scale},
       {"min_level_size", c.min_level_size},
       {"penalty", c.penalty == SmoothnessPenalty::Quadratic ? "quadratic" : "charbonnier"},
       {"presmooth_sigma", c.presmooth_sigma}};
}

void from_json(const nlohmann::json& j, FlowConfig& c) {
  if (!j.is_object()) throw DataError("flow config must be an object");
  try {
    c.resolution = j.value("resolution", c.resolution);
    c.refine_iters = j.value("refine_iters", c.refine_iters);
    c.inner_iters = j.value("inner_iters", c.inner_iters);
    c.alpha = j.value("alpha", c.alpha);
    c.pyramid_scale = j.value("pyramid_scale", c.pyramid_scale);
    c.min_level_size = j.value("min_level_size", c.min_level_size);
    c.presmooth_sigma = j.value("presmooth_sigma", c.presmooth_sigma);
    if (j.contains("penalty")) {
      const auto p = j.at("penalty").get<std::string>();
      if (p == "quadratic") {
        c.penalty = SmoothnessPenalty::Quadratic;
      } else if (p == "charbonnier") {
        c.penalty = SmoothnessPenalty::Charbonnier;
      } else {
        throw DataError("unknown flow penalty: " + p);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("flow config: ") + e.what());
  }
}

VariationalFlowEstimator::VariationalFlowEstimator(FlowConfig cfg) : cfg_(cfg) { cfg_.validate(); }

FlowField VariationalFlowEstimator::estimate(const ImageBuffer& a, const ImageBuffer& b) const {
  return estimate_flow(a, b, cfg_);
}

FlowField estimate_flow(const ImageBuffer& a, const ImageBuffer& b, const FlowConfig& cfg) {
  cfg.validate();
  if (a.width() != b.width() || a.height() != b.height())
    throw std::invalid_argument("estimate_flow: input dimensions differ");
  if (a.empty()) throw std::invalid_argument("estimate_flow: empty input");
  check_finite(a, "first image");
  check_finite(b, "second image");

  const int in_w = a.width(), in_h = a.height();
  const double fit = static_cast<double>(cfg.resolution) / std::max(in_w, in_h);
  const int work_w = std::max(2, static_cast<int>(std::lround(in_w * fit)));
  const int work_h = std::max(2, static_cast<int>(std::lround(in_h * fit)));

  Plane pa = to_plane(to_gray(a));
  Plane pb = to_plane(to_gray(b));
  if (work_w != in_w || work_h != in_h) {
    if (fit < 1.0) {
      pa = downsample(pa, work_w, work_h, fit);
      pb = downsample(pb, work_w, work_h, fit);
    } else {
      pa = resize_plane(pa, work_w, work_h);
      pb = resize_plane(pb, work_w, work_h);
    }
  }
  pa = blur_plane(pa, cfg.presmooth_sigma);
  pb = blur_plane(pb, cfg.presmooth_sigma);

  std::vector<Plane> pyr_a{pa}, pyr_b{pb};
  while (true) {
    const Plane& top = pyr_a.back();
    const int nw = static_cast<int>(std::lround(top.w * cfg.pyramid_scale));
    const int nh = static_cast<int>(std::lround(top.h * cfg.pyramid_scale));
    if (std::min(nw, nh) < cfg.min_level_size) break;
    pyr_a.push_back(downsample(top, nw, nh, cfg.pyramid_scale));
    pyr_b.push_back(downsample(pyr_b.back(), nw, nh, cfg.pyramid_scale));
  }

  LevelFlow flow{Plane(pyr_a.back().w, pyr_a.back().h), Plane(pyr_a.back().w, pyr_a.back().h)};
  for (int level = static_cast<int>(pyr_a.size()) - 1; level >= 0; --level) {
    const Plane& la = pyr_a[level];
    if (flow.u.w != la.w || flow.u.h != la.h) flow = upsample(flow, la.w, la.h);
    solve_level(la, pyr_b[level], flow, cfg);
  }

  FlowField out(work_w, work_h);
  out.u = std::move(flow.u.d);
  out.v = std::move(flow.v.d);
  if (work_w != in_w || work_h != in_h) out = resize_flow(out, in_w, in_h);
  return out;
}

FlowField resize_flow(const FlowField& f, int w, int h) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("resize_flow: target must be non-empty");
  if (w == f.width && h == f.height) return f;
  Plane pu(f.width, f.height), pv(f.width, f.height);
  pu.d = f.u;
  pv.d = f.v;
  const LevelFlow up = upsample({pu, pv}, w, h);
  FlowField out(w, h);
  out.u = up.u.d;
  out.v = up.v.d;
  return out;
}

ImageBuffer warp_by_flow(const ImageBuffer& img, const FlowField& f) {
  if (img.width() != f.width || img.height() != f.height) throw std::invalid_argument("warp_by_flow: size mismatch");
  ImageBuffer out(img.width(), img.height(), img.channels());
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) {
      const std::size_t i = f.index(x, y);
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.sample(x + f.u[i], y + f.v[i], c);
    }
  return out;
}

MagnitudeMap magnitude(const FlowField& f) {
  MagnitudeMap out(f.width, f.height);
  for (std::size_t i = 0; i < out.m.size(); ++i) out.m[i] = std::hypot(f.u[i], f.v[i]);
  return out;
}

MagnitudeMap clip_magnitude(const MagnitudeMap& m, double crop_side) {
  if (!(crop_side > 0.0)) throw std::invalid_argument("clip_magnitude: crop side must be positive");
  const double limit = kClipFraction * crop_side;
  MagnitudeMap out = m;
  for (double& x : out.m) x = std::min(x, limit);
  return out;
}

double mean_epe(const FlowField& a, const FlowField& b, double fraction) {
  if (a.width != b.width || a.height != b.height) throw std::invalid_argument("mean_epe: size mismatch");
  const int mx = static_cast<int>(std::lround(a.width * (1.0 - fraction) / 2.0));
  const int my = static_cast<int>(std::lround(a.height * (1.0 - fraction) / 2.0));
  double acc = 0.0;
  std::size_t n = 0;
  for (int y = my; y < a.height - my; ++y)
    for (int x = mx; x < a.width - mx; ++x) {
      const std::size_t i = a.index(x, y);
      acc += std::hypot(a.u[i] - b.u[i], a.v[i] - b.v[i]);
      ++n;
    }
  return n == 0 ? 0.0 : acc / n;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

bool get_u32(std::istream& in, std::uint32_t& v) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace

void write_flo(std::ostream& out, const FlowField& f) {
  put_f32(out, kFloSentinel);
  put_u32(out, static_cast<std::uint32_t>(f.width));
  put_u32(out, static_cast<std::uint32_t>(f.height));
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    put_f32(out, static_cast<float>(f.u[i]));
    put_f32(out, static_cast<float>(f.v[i]));
  }
  if (!out) throw DataError("write_flo: stream error");
}

FlowField read_flo(std::istream& in) {
  std::uint32_t tag = 0, w = 0, h = 0;
  if (!get_u32(in, tag)) throw DataError("read_flo: truncated header");
  if (std::bit_cast<float>(tag) != kFloSentinel) throw DataError("read_flo: bad sentinel");
  if (!get_u32(in, w) || !get_u32(in, h)) throw DataError("read_flo: truncated header");
  const auto sw = static_cast<std::int32_t>(w);
  const auto sh = static_cast<std::int32_t>(h);
  if (sw <= 0 || sh <= 0 || sw > 100000 || sh > 100000) throw DataError("read_flo: implausible dimensions");
  FlowField f(sw, sh);
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    std::uint32_t bu = 0, bv = 0;
    if (!get_u32(in, bu) || !get_u32(in, bv)) throw DataError("read_flo: truncated payload");
    f.u[i] = std::bit_cast<float>(bu);
    f.v[i] = std::bit_cast<float>(bv);
  }
  return f;
}

void write_flo(const std::filesystem::path& path, const FlowField& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_flo(out, f);
}

FlowField read_flo(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_flo(in);
}

}  // namespace flowgate
