#pragma once

// Engineered stand-ins for the two backbones: statistics of the f1->f3
// motion field (flow stream) and texture/colour cues of the f2 crop (RGB
// stream).
//
// Regions on an N x N crop with center c = (N-1)/2 and normalized offsets
// d = (p - c) / (N/2):
//   face  = |d| < 0.6        (disc inscribed in the central 60%)
//   ring  = max(|dx|,|dy|) > 0.8   (outer 20% of the half-extent)
//
// Magnitude-stream order (kMagnitudeFeatureNames):
//   0-2 face p10/p50/p90, 3-5 ring p10/p50/p90, 6 face/ring mean ratio,
//   7 face expansion-fit residual RMS (m ~ s r + b), 8 radial slope over
//   the whole crop.
// Raw-flow order (kRawFlowFeatureNames): face p10/p50/p90 of u then v,
//   ring p10/p50/p90 of u then v, face mean u/v, ring mean u/v, vector
//   expansion scale and residual RMS over the face.
// RGB order (kRgbFeatureNames): log10 Laplacian energy, gradient
//   orientation entropy, saturation mean, saturation variance, share of
//   spectral energy above 0.15 cycles/px.

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <string>
#include <vector>

#include "flowgate/flow.hpp"
#include "flowgate/geometry.hpp"
#include "flowgate/image.hpp"

namespace flowgate {

enum class StreamMode { Dual, FlowOnly, RgbOnly };
enum class FlowRepresentation { Raw, Magnitude, ClippedMagnitude };

std::string to_string(StreamMode m);
std::string to_string(FlowRepresentation r);
// Throw DataError on unknown names.
StreamMode stream_mode_from_string(const std::string& s);
FlowRepresentation flow_representation_from_string(const std::string& s);

inline constexpr std::array<const char*, 9> kMagnitudeFeatureNames{
    "face_p10", "face_p50", "face_p90", "ring_p10", "ring_p50", "ring_p90", "face_ring_ratio", "expansion_residual",
    "radial_slope"};
inline constexpr std::array<const char*, 18> kRawFlowFeatureNames{
    "face_u_p10", "face_u_p50", "face_u_p90", "face_v_p10", "face_v_p50",  "face_v_p90",
    "ring_u_p10", "ring_u_p50", "ring_u_p90", "ring_v_p10", "ring_v_p50",  "ring_v_p90",
    "face_u_mean", "face_v_mean", "ring_u_mean", "ring_v_mean", "expansion_scale", "expansion_residual"};
inline constexpr std::array<const char*, 5> kRgbFeatureNames{"laplacian_energy", "gradient_entropy",
                                                             "saturation_mean", "saturation_var", "hf_energy"};

struct FeatureVector {
  std::vector<double> flow;
  std::vector<double> rgb;

  std::vector<double> joined() const;
  bool finite() const;
};

void to_json(nlohmann::json& j, const FeatureVector& f);

// Linear-interpolated percentile (p in [0, 100]) of an unsorted sample.
double percentile(std::vector<double> values, double p);

std::vector<double> magnitude_features(const MagnitudeMap& m);
std::vector<double> raw_flow_features(const FlowField& f);
std::vector<double> rgb_features(const ImageBuffer& crop);

// Throws std::invalid_argument on non-finite input or when the map does not
// match the crop size.
FeatureVector extract_features(const PreprocessedPair& pair, const MagnitudeMap& mag, StreamMode mode);
// Derives the requested representation from the flow field first; the
// clipping threshold is kClipFraction of the crop side in crop pixels.
FeatureVector extract_features(const PreprocessedPair& pair, const FlowField& flow, FlowRepresentation rep,
                               StreamMode mode);

}  // namespace flowgate
