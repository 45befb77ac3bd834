#include "flowgate/features.hpp"

#include <fftw3.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include "flowgate/errors.hpp"

namespace flowgate {

namespace {

// Keeps the ratio defined (and equal to 1) when both regions are still.
constexpr double kRatioEps = 0.05;
constexpr double kFaceRadius = 0.6;
constexpr double kRingInner = 0.8;
constexpr double kHighFrequency = 0.15;  // cycles per pixel
constexpr int kOrientationBins = 18;

// FFTW planning is not thread-safe; execution is.
std::mutex fftw_plan_mutex;

struct Regions {
  std::vector<std::size_t> face;
  std::vector<std::size_t> ring;
};

Regions regions(int w, int h) {
  Regions r;
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  for (int y = 0; y < h; ++y) {
    const double dy = (y - cy) / (h / 2.0);
    for (int x = 0; x < w; ++x) {
      const double dx = (x - cx) / (w / 2.0);
      const std::size_t k = static_cast<std::size_t>(y) * w + x;
      if (dx * dx + dy * dy < kFaceRadius * kFaceRadius) r.face.push_back(k);
      if (std::max(std::abs(dx), std::abs(dy)) > kRingInner) r.ring.push_back(k);
    }
  }
  return r;
}

std::vector<double> gather(const std::vector<double>& v, const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t k : idx) out.push_back(v[k]);
  return out;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

// Least-squares m = s r + b; returns (s, residual RMS).
std::pair<double, double> radial_fit(const std::vector<double>& m, const std::vector<std::size_t>& idx, int w, int h) {
  const double cx = (w - 1) / 2.0, cy = (h - 1) / 2.0;
  double sr = 0, sm = 0, srr = 0, srm = 0;
  const double n = static_cast<double>(idx.size());
  std::vector<double> r(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double x = static_cast<double>(idx[i] % w) - cx, y = static_cast<double>(idx[i] / w) - cy;
    r[i] = std::hypot(x, y);
    sr += r[i];
    sm += m[idx[i]];
    srr += r[i] * r[i];
    srm += r[i] * m[idx[i]];
  }
  const double det = n * srr - sr * sr;
  const double s = det > 0 ? (n * srm - sr * sm) / det : 0.0;
  const double b = (sm - s * sr) / n;
  double e = 0.0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const double d = m[idx[i]] - s * r[i] - b;
    e += d * d;
  }
  return {s, std::sqrt(e / n)};
}

void check_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::invalid_argument(std::string(what) + " contains non-finite values");
  }
}

}  // namespace

std::string to_string(StreamMode m) {
  switch (m) {
    case StreamMode::Dual:
      return "dual";
    case StreamMode::FlowOnly:
      return "flow_only";
    case StreamMode::RgbOnly:
      return "rgb_only";
  }
  return "unknown";
}

std::string to_string(FlowRepresentation r) {
  switch (r) {
    case FlowRepresentation::Raw:
      return "raw_flow";
    case FlowRepresentation::Magnitude:
      return "magnitude";
    case FlowRepresentation::ClippedMagnitude:
      return "clipped_magnitude";
  }
  return "unknown";
}

StreamMode stream_mode_from_string(const std::string& s) {
  for (StreamMode m : {StreamMode::Dual, StreamMode::FlowOnly, StreamMode::RgbOnly}) {
    if (to_string(m) == s) return m;
  }
  throw DataError("unknown stream mode: " + s);
}

FlowRepresentation flow_representation_from_string(const std::string& s) {
  for (FlowRepresentation r :
       {FlowRepresentation::Raw, FlowRepresentation::Magnitude, FlowRepresentation::ClippedMagnitude}) {
    if (to_string(r) == s) return r;
  }
  throw DataError("unknown flow representation: " + s);
}

std::vector<double> FeatureVector::joined() const {
  std::vector<double> out = flow;
  out.insert(out.end(), rgb.begin(), rgb.end());
  return out;
}

bool FeatureVector::finite() const {
  return std::all_of(flow.begin(), flow.end(), [](double x) { return std::isfinite(x); }) &&
         std::all_of(rgb.begin(), rgb.end(), [](double x) { return std::isfinite(x); });
}

void to_json(nlohmann::json& j, const FeatureVector& f) { j = {{"flow", f.flow}, {"rgb", f.rgb}}; }

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
  const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * (values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double a = values[lo];
  if (hi == lo) return a;
  const double b = *std::min_element(values.begin() + lo + 1, values.end());
  return a + (pos - lo) * (b - a);
}

std::vector<double> magnitude_features(const MagnitudeMap& m) {
  if (m.width < 8 || m.height < 8) throw std::invalid_argument("magnitude map too small");
  check_finite(m.m, "magnitude map");
  const Regions reg = regions(m.width, m.height);
  const auto face = gather(m.m, reg.face);
  const auto ring = gather(m.m, reg.ring);
  std::vector<double> f;
  for (const auto* v : {&face, &ring})
    for (double p : {10.0, 50.0, 90.0}) f.push_back(percentile(*v, p));
  f.push_back((mean(face) + kRatioEps) / (mean(ring) + kRatioEps));
  f.push_back(radial_fit(m.m, reg.face, m.width, m.height).second);
  std::vector<std::size_t> all(m.m.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  f.push_back(radial_fit(m.m, all, m.width, m.height).first);
  return f;
}

std::vector<double> raw_flow_features(const FlowField& fl) {
  if (fl.width < 8 || fl.height < 8) throw std::invalid_argument("flow field too small");
  if (!fl.finite()) throw std::invalid_argument("flow field contains non-finite values");
  const Regions reg = regions(fl.width, fl.height);
  std::vector<double> f;
  for (const auto* idx : {&reg.face, &reg.ring})
    for (const auto* comp : {&fl.u, &fl.v}) {
      const auto vals = gather(*comp, *idx);
      for (double p : {10.0, 50.0, 90.0}) f.push_back(percentile(vals, p));
    }
  for (const auto* idx : {&reg.face, &reg.ring})
    for (const auto* comp : {&fl.u, &fl.v}) f.push_back(mean(gather(*comp, *idx)));

  // u = s X + tx, v = s Y + ty over the face disc.
  const double cx = (fl.width - 1) / 2.0, cy = (fl.height - 1) / 2.0;
  Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
  Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
  for (std::size_t k : reg.face) {
    const double X = static_cast<double>(k % fl.width) - cx, Y = static_cast<double>(k / fl.width) - cy;
    A(0, 0) += X * X + Y * Y;
    A(0, 1) += X;
    A(0, 2) += Y;
    A(1, 1) += 1;
    A(2, 2) += 1;
    rhs(0) += X * fl.u[k] + Y * fl.v[k];
    rhs(1) += fl.u[k];
    rhs(2) += fl.v[k];
  }
  A(1, 0) = A(0, 1);
  A(2, 0) = A(0, 2);
  const Eigen::Vector3d p = A.ldlt().solve(rhs);
  double e = 0.0;
  for (std::size_t k : reg.face) {
    const double X = static_cast<double>(k % fl.width) - cx, Y = static_cast<double>(k / fl.width) - cy;
    const double du = fl.u[k] - p(0) * X - p(1), dv = fl.v[k] - p(0) * Y - p(2);
    e += du * du + dv * dv;
  }
  f.push_back(p(0));
  f.push_back(std::sqrt(e / reg.face.size()));
  return f;
}

std::vector<double> rgb_features(const ImageBuffer& crop) {
  if (crop.width() < 8 || crop.height() < 8) throw std::invalid_argument("crop too small for RGB features");
  check_finite(crop.samples(), "crop");
  const int w = crop.width(), h = crop.height();
  const ImageBuffer gray = to_gray(crop);

  double lap = 0.0;
  std::array<double, kOrientationBins> hist{};
  for (int y = 1; y < h - 1; ++y)
    for (int x = 1; x < w - 1; ++x) {
      const double l = gray.at(x - 1, y) + gray.at(x + 1, y) + gray.at(x, y - 1) + gray.at(x, y + 1) - 4 * gray.at(x, y);
      lap += l * l;
      const double gx = 0.5 * (gray.at(x + 1, y) - gray.at(x - 1, y));
      const double gy = 0.5 * (gray.at(x, y + 1) - gray.at(x, y - 1));
      const double mag = std::hypot(gx, gy);
      if (mag <= 0.0) continue;
      double theta = std::atan2(gy, gx);
      if (theta < 0) theta += std::numbers::pi;
      const int bin = std::min(kOrientationBins - 1, static_cast<int>(theta / std::numbers::pi * kOrientationBins));
      hist[bin] += mag;
    }
  lap /= static_cast<double>(w - 2) * (h - 2);
  double total = 0.0;
  for (double v : hist) total += v;
  double entropy = 0.0;
  for (double v : hist) {
    if (v > 0 && total > 0) entropy -= (v / total) * std::log(v / total);
  }

  std::vector<double> sat;
  sat.reserve(crop.pixel_count());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (crop.channels() < 3) {
        sat.push_back(0.0);
        continue;
      }
      const double r = crop.at(x, y, 0), g = crop.at(x, y, 1), b = crop.at(x, y, 2);
      const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
      sat.push_back(mx > 0 ? (mx - mn) / mx : 0.0);
    }
  const double sat_mean = mean(sat);
  double sat_var = 0.0;
  for (double s : sat) sat_var += (s - sat_mean) * (s - sat_mean);
  sat_var /= sat.size();

  // Share of non-DC spectral energy above kHighFrequency.
  const int hw = w / 2 + 1;
  double* in = fftw_alloc_real(static_cast<std::size_t>(w) * h);
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(hw) * h);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_plan_mutex);
    plan = fftw_plan_dft_r2c_2d(h, w, in, out, FFTW_ESTIMATE);
  }
  const double gmean = mean(std::vector<double>(gray.samples().begin(), gray.samples().end()));
  for (int k = 0; k < w * h; ++k) in[k] = gray.samples()[k] - gmean;
  fftw_execute(plan);
  double hi = 0.0, all = 0.0;
  for (int ky = 0; ky < h; ++ky) {
    const double fy = (ky <= h / 2 ? ky : ky - h) / static_cast<double>(h);
    for (int kx = 0; kx < hw; ++kx) {
      if (kx == 0 && ky == 0) continue;
      const double fx = kx / static_cast<double>(w);
      // Half-spectrum bins other than the edges stand for two conjugates.
      const double weight = (kx == 0 || (w % 2 == 0 && kx == w / 2)) ? 1.0 : 2.0;
      const auto& c = out[static_cast<std::size_t>(ky) * hw + kx];
      const double e = weight * (c[0] * c[0] + c[1] * c[1]);
      all += e;
      if (std::hypot(fx, fy) > kHighFrequency) hi += e;
    }
  }
  {
    std::lock_guard lock(fftw_plan_mutex);
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);

  return {std::log10(lap + 1e-10), entropy, sat_mean, sat_var, all > 0 ? hi / all : 0.0};
}

FeatureVector extract_features(const PreprocessedPair& pair, const MagnitudeMap& mag, StreamMode mode) {
  if (mag.width != pair.f1_crop.width() || mag.height != pair.f1_crop.height())
    throw std::invalid_argument("magnitude map must match the crop size");
  FeatureVector fv;
  fv.flow = mode == StreamMode::RgbOnly ? std::vector<double>(kMagnitudeFeatureNames.size(), 0.0) : magnitude_features(mag);
  fv.rgb = mode == StreamMode::FlowOnly ? std::vector<double>(kRgbFeatureNames.size(), 0.0) : rgb_features(pair.f2_crop);
  return fv;
}

FeatureVector extract_features(const PreprocessedPair& pair, const FlowField& flow, FlowRepresentation rep,
                               StreamMode mode) {
  if (rep != FlowRepresentation::Raw) {
    MagnitudeMap m = magnitude(flow);
    if (rep == FlowRepresentation::ClippedMagnitude) m = clip_magnitude(m, pair.f1_crop.width());
    return extract_features(pair, m, mode);
  }
  if (flow.width != pair.f1_crop.width() || flow.height != pair.f1_crop.height())
    throw std::invalid_argument("flow field must match the crop size");
  FeatureVector fv;
  fv.flow = mode == StreamMode::RgbOnly ? std::vector<double>(kRawFlowFeatureNames.size(), 0.0) : raw_flow_features(flow);
  fv.rgb = mode == StreamMode::FlowOnly ? std::vector<double>(kRgbFeatureNames.size(), 0.0) : rgb_features(pair.f2_crop);
  return fv;
}

}  // namespace flowgate
