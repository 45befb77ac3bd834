#pragma once

// End-to-end scoring shared by the CLI and the HTTP service:
// protocol -> triplet -> preprocess -> flow -> features -> head.

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowgate/classifier.hpp"
#include "flowgate/features.hpp"
#include "flowgate/flow.hpp"
#include "flowgate/geometry.hpp"
#include "flowgate/protocol.hpp"
#include "flowgate/simulator.hpp"

namespace flowgate {

struct PipelineConfig {
  ProtocolConfig protocol;
  PreprocessConfig preprocess;
  FlowConfig flow;
  double threshold = 0.5;  // score >= threshold -> "live"

  void validate() const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
// Partial objects override only the keys they contain.
void from_json(const nlohmann::json& j, PipelineConfig& c);

struct Detection {
  FaceBox box;
  KeyPoints keypoints;
};

// Checkpoint frames f1, f2, f3 with their detections.
struct Triplet {
  std::array<ImageBuffer, 3> frames;
  std::array<Detection, 3> detections;
};

struct FlowSample {
  PreprocessedPair pair;
  FlowField flow;
};

// Preprocess the triplet and estimate f1 -> f3 flow on the crops.
FlowSample run_flow_stage(const Triplet& t, const PreprocessConfig& pre, const FlowConfig& flow);

struct Verdict {
  double score = 0.5;
  bool live = false;
  StreamMode mode = StreamMode::Dual;
  FlowRepresentation representation = FlowRepresentation::ClippedMagnitude;
  FeatureVector features;
};

// Canonical JSON: {"score", "label", "mode", "representation",
// "per_stream_features": {"flow": [...], "rgb": [...]}}.
nlohmann::json verdict_json(const Verdict& v);
// Exact text emitted by both `classify` and the verdict endpoint.
std::string verdict_text(const Verdict& v);

// Scores a triplet with the head's own stream mode and flow representation.
Verdict classify_triplet(const Triplet& t, const LinearHead& head, const PipelineConfig& cfg);

// Steps the protocol over per-frame detections (nullopt = no face).
CaptureSession run_protocol(std::span<const std::optional<FaceBox>> detections, int frame_w, int frame_h,
                            const ProtocolConfig& cfg);

// Random-access view of one recording: detections are cheap, frames may be
// rendered or decoded on demand.
class SequenceSource {
 public:
  virtual ~SequenceSource() = default;
  virtual int frame_count() const = 0;
  virtual int width() const = 0;
  virtual int height() const = 0;
  virtual std::optional<Detection> detection(int i) const = 0;
  virtual ImageBuffer frame(int i) const = 0;
};

std::unique_ptr<SequenceSource> make_renderer_source(const SceneSpec& spec);
// Lazily decodes frame_%03d.png from a sequence directory; annotations are
// read eagerly. Throws DataError on missing or malformed files.
std::unique_ptr<SequenceSource> make_directory_source(const std::filesystem::path& dir);
std::unique_ptr<SequenceSource> make_memory_source(LoadedSequence seq);

// Runs the protocol over the source and returns the Done session, or
// nullopt when the sequence never completes.
std::optional<CaptureSession> capture(const SequenceSource& src, const ProtocolConfig& cfg);

// Triplet for a selection (checkpoints or augmented draw), applying any
// perspective warps to the frame and its detection.
Triplet load_triplet(const SequenceSource& src, const SampleSelection& sel);

}  // namespace flowgate
