#pragma once

#include <nlohmann/json_fwd.hpp>

#include <cstddef>
#include <iosfwd>
#include <filesystem>
#include <memory>
#include <vector>

#include "flowgate/image.hpp"

namespace flowgate {

// Per-pixel displacement from the first frame to the second, in pixels.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> u;
  std::vector<double> v;

  FlowField() = default;
  FlowField(int w, int h);

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  bool finite() const;
  friend bool operator==(const FlowField&, const FlowField&) = default;
};

struct MagnitudeMap {
  int width = 0;
  int height = 0;
  std::vector<double> m;

  MagnitudeMap() = default;
  MagnitudeMap(int w, int h, double fill = 0.0);

  double at(int x, int y) const { return m[static_cast<std::size_t>(y) * width + x]; }
  friend bool operator==(const MagnitudeMap&, const MagnitudeMap&) = default;
};

enum class SmoothnessPenalty {
  Quadratic,   // classic Horn-Schunck
  Charbonnier  // robust, edge-preserving (lagged diffusivity)
};

// Coarse-to-fine variational solver settings. The energy minimized per
// pyramid level is
//   sum psi_d((I_x du + I_y dv + I_t)^2) + alpha^2 sum psi_s(|grad u|^2 + |grad v|^2)
// on [0,1] intensities, with psi the identity for the quadratic penalty.
struct FlowConfig {
  int resolution = 256;  // inputs are resampled so that max(w, h) == resolution
  int refine_iters = 3;  // warp / relinearize passes per pyramid level
  int inner_iters = 60;  // Jacobi sweeps per pass
  double alpha = 0.1;
  double pyramid_scale = 0.5;
  int min_level_size = 16;
  SmoothnessPenalty penalty = SmoothnessPenalty::Charbonnier;
  double presmooth_sigma = 0.0;  // Gaussian applied to the finest level

  // Throws std::invalid_argument on out-of-range settings.
  void validate() const;
};

void to_json(nlohmann::json& j, const FlowConfig& c);
void from_json(const nlohmann::json& j, FlowConfig& c);

// Swappable estimator boundary: two same-sized crops in, flow out.
class FlowEstimator {
 public:
  virtual ~FlowEstimator() = default;
  virtual FlowField estimate(const ImageBuffer& a, const ImageBuffer& b) const = 0;
};

class VariationalFlowEstimator final : public FlowEstimator {
 public:
  explicit VariationalFlowEstimator(FlowConfig cfg);
  FlowField estimate(const ImageBuffer& a, const ImageBuffer& b) const override;
  const FlowConfig& config() const { return cfg_; }

 private:
  FlowConfig cfg_;
};

// Flow from a to b (a(x) ~ b(x + flow(x))). RGB inputs are reduced to
// luminance. Throws std::invalid_argument on dimension mismatch or
// non-finite samples.
FlowField estimate_flow(const ImageBuffer& a, const ImageBuffer& b, const FlowConfig& cfg = {});

// Bilinear field resample; vector components scale with the axis ratio.
FlowField resize_flow(const FlowField& f, int w, int h);

// Warps `img` backwards along the flow: out(x) = img(x + flow(x)).
ImageBuffer warp_by_flow(const ImageBuffer& img, const FlowField& f);

MagnitudeMap magnitude(const FlowField& f);
// min(m, 0.2 * crop_side) elementwise. Throws on crop_side <= 0.
MagnitudeMap clip_magnitude(const MagnitudeMap& m, double crop_side);
constexpr double kClipFraction = 0.2;

// Mean endpoint error over a centered window covering `fraction` of each
// dimension.
double mean_epe(const FlowField& a, const FlowField& b, double fraction = 1.0);

// Middlebury .flo: float 202021.25, int32 width, int32 height, then
// row-major interleaved float32 (u, v); little-endian.
constexpr float kFloSentinel = 202021.25f;
void write_flo(std::ostream& out, const FlowField& f);
FlowField read_flo(std::istream& in);
void write_flo(const std::filesystem::path& path, const FlowField& f);
FlowField read_flo(const std::filesystem::path& path);

}  // namespace flowgate
