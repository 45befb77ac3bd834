#pragma once

// "Approaching face" capture protocol. The user first matches the small
// guidance square (start_rel_height of the frame height, centered), then
// moves toward the camera until the face fills the large square
// (end_rel_height). Checkpoint frames are taken where the relative face
// height first crosses start / mid / end. Retreating or losing the face
// restarts the recording.

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <optional>
#include <span>
#include <string>

#include "flowgate/geometry.hpp"
#include "flowgate/image.hpp"

namespace flowgate {

struct ProtocolConfig {
  double start_rel_height = 0.50;
  double mid_rel_height = 0.625;
  double end_rel_height = 0.75;
  double center_tolerance = 0.10;    // fraction of frame height
  double retreat_hysteresis = 0.03;  // fraction of frame height
  int max_missing_frames = 5;

  // Throws std::invalid_argument when the invariants do not hold.
  void validate() const;
  friend bool operator==(const ProtocolConfig&, const ProtocolConfig&) = default;
};

enum class CaptureState { WaitAlign, Recording, Done, Restarted };

std::string to_string(CaptureState s);

struct Checkpoints {
  std::optional<int> first;
  std::optional<int> middle;
  std::optional<int> last;

  bool complete() const { return first && middle && last; }
  friend bool operator==(const Checkpoints&, const Checkpoints&) = default;
};

struct CaptureSession {
  CaptureState state = CaptureState::WaitAlign;
  double running_max_height = 0.0;
  int missing_count = 0;
  std::optional<int> last_frame_index;
  Checkpoints checkpoints;

  friend bool operator==(const CaptureSession&, const CaptureSession&) = default;
};

// Which checkpoint (if any) the stepped frame became.
enum class CheckpointHit { None, First, Middle, Last };

struct StepResult {
  CaptureSession session;
  CheckpointHit hit = CheckpointHit::None;
  bool restarted = false;
  // True when the input session was already Done; nothing changed.
  bool noop = false;
  double rel_height = 0.0;  // 0 when no detection
};

// Pure transition. Throws std::invalid_argument when frame_index does not
// increase or frame_h is not positive.
StepResult step(const CaptureSession& session, int frame_index, const std::optional<FaceBox>& detection, int frame_w,
                int frame_h, const ProtocolConfig& cfg = {});

// Frames at the three checkpoints. Throws std::logic_error when the
// session is not Done and std::out_of_range for indices past the sequence.
std::array<ImageBuffer, 3> extract_triplet(std::span<const ImageBuffer> frames, const CaptureSession& session);

void to_json(nlohmann::json& j, const ProtocolConfig& c);
void from_json(const nlohmann::json& j, ProtocolConfig& c);
void to_json(nlohmann::json& j, const CaptureSession& s);

}  // namespace flowgate
