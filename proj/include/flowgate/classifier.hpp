#pragma once

// Fused linear head over the engineered features, its logistic-loss
// trainer, and the training-time sample augmentation.

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "flowgate/features.hpp"
#include "flowgate/protocol.hpp"

namespace flowgate {

struct LinearHead {
  static constexpr int kSchemaVersion = 1;

  StreamMode mode = StreamMode::Dual;
  FlowRepresentation representation = FlowRepresentation::ClippedMagnitude;
  // Standardization frozen from the training set. Features whose training
  // std is <= 1e-12 are not retained and carry zero weight.
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<bool> retained;
  // Training range per feature; inputs are clamped to it before
  // standardization so the linear score never extrapolates past the data
  // it was fitted on. Empty = no clamping.
  std::vector<double> feature_min;
  std::vector<double> feature_max;
  std::vector<double> weights;
  double bias = 0.0;
  bool fitted = false;

  // Zero weights and unit standardization for `dim` features.
  static LinearHead zero(int dim, StreamMode mode = StreamMode::Dual,
                         FlowRepresentation rep = FlowRepresentation::ClippedMagnitude);
  int dim() const { return static_cast<int>(weights.size()); }
  // Standardized retained features after range clamping (dropped ones read 0).
  std::vector<double> standardize(std::span<const double> x) const;
  double logit(std::span<const double> x) const;
};

void to_json(nlohmann::json& j, const LinearHead& h);
// Throws DataError on schema mismatch or inconsistent sizes.
void from_json(const nlohmann::json& j, LinearHead& h);

// Logistic of the standardized dot product, in (0, 1); higher = more live.
// Throws std::logic_error for an unfitted head and std::invalid_argument on
// a dimension mismatch or non-finite features.
double score(const LinearHead& head, const FeatureVector& fv);
double score(const LinearHead& head, std::span<const double> x);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 3000;
  // Step size; 0 selects 1/L with L the exact Lipschitz constant of the
  // gradient, which makes the loss provably non-increasing.
  double lr = 0.0;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

struct TrainResult {
  LinearHead head;
  std::vector<double> loss_history;  // loss before each epoch, then final
  double lr = 0.0;
};

// Mean logistic loss (labels 1 = live) plus 0.5 * l2 * |w|^2 on already
// standardized rows, with its analytic gradient.
struct LossGradient {
  double loss = 0.0;
  std::vector<double> grad_w;
  double grad_b = 0.0;
};
LossGradient logistic_loss_gradient(std::span<const double> w, double b, const std::vector<std::vector<double>>& z,
                                    std::span<const int> labels, double l2);

// Full-batch gradient descent. Throws TrainingError on a single-class or
// empty set, a loss increase, or divergence (> 10x the initial loss).
TrainResult train_head(const std::vector<std::vector<double>>& x, std::span<const int> labels, StreamMode mode,
                       FlowRepresentation rep, const TrainConfig& cfg = {});

struct AugmentConfig {
  bool random_frame = false;
  double frame_pool_frac = 0.10;
  bool multires = false;
  int res_min = 192;
  int res_max = 320;
  bool perspective = false;
  double corner_jitter = 0.05;  // fraction of the face crop side
  // Default: one corner displacement (relative to each frame's crop) shared
  // by f1 and f3, i.e. the same change of view in both frames.
  bool independent_perspective = false;

  // Throws std::invalid_argument outside the documented ranges.
  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

// Which frames feed the pipeline for one training sample, and how.
struct SampleSelection {
  int f1 = 0;
  int f2 = 0;
  int f3 = 0;
  std::optional<int> flow_resolution;  // multires draw
  std::optional<Transform2D> warp_f1;  // perspective jitter, frame -> frame
  std::optional<Transform2D> warp_f3;
  bool degraded = false;  // sequence too short for the frame pools
};

// f1 from the frame_pool_frac smallest faces, f3 from the largest (pool size
// max(1, round(frac * n))); f2 stays the protocol middle checkpoint. With
// every option off the protocol checkpoints are returned unchanged.
// Sequences shorter than 10 frames fall back to the checkpoints.
SampleSelection augment_sample(std::span<const FaceBox> boxes, const Checkpoints& checkpoints,
                               const AugmentConfig& cfg, std::uint64_t seed);

}  // namespace flowgate
