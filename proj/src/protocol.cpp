#include "flowgate/protocol.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <stdexcept>

#include "flowgate/errors.hpp"

namespace flowgate {

namespace {

// Threshold comparisons tolerate rounding in box heights computed from
// projected geometry.
constexpr double kEps = 1e-9;

CaptureSession restarted(int frame_index) {
  CaptureSession s;
  s.state = CaptureState::Restarted;
  s.last_frame_index = frame_index;
  return s;
}

}  // namespace

void ProtocolConfig::validate() const {
  if (!(0.0 < start_rel_height && start_rel_height < mid_rel_height && mid_rel_height < end_rel_height &&
        end_rel_height < 1.0))
    throw std::invalid_argument("protocol heights must satisfy 0 < start < mid < end < 1");
  if (!(center_tolerance > 0.0) || !(retreat_hysteresis > 0.0) || max_missing_frames <= 0)
    throw std::invalid_argument("protocol tolerances must be positive");
}

std::string to_string(CaptureState s) {
  switch (s) {
    case CaptureState::WaitAlign:
      return "WaitAlign";
    case CaptureState::Recording:
      return "Recording";
    case CaptureState::Done:
      return "Done";
    case CaptureState::Restarted:
      return "Restarted";
  }
  return "Unknown";
}

StepResult step(const CaptureSession& session, int frame_index, const std::optional<FaceBox>& detection, int frame_w,
                int frame_h, const ProtocolConfig& cfg) {
  if (frame_h <= 0 || frame_w <= 0) throw std::invalid_argument("frame dimensions must be positive");
  StepResult r;
  if (session.state == CaptureState::Done) {
    r.session = session;
    r.noop = true;
    return r;
  }
  if (session.last_frame_index && frame_index <= *session.last_frame_index)
    throw std::invalid_argument("frame_index must increase strictly");

  CaptureSession s = session;
  if (s.state == CaptureState::Restarted) s.state = CaptureState::WaitAlign;
  s.last_frame_index = frame_index;

  if (!detection) {
    ++s.missing_count;
    if (s.state == CaptureState::Recording && s.missing_count > cfg.max_missing_frames) {
      r.session = restarted(frame_index);
      r.restarted = true;
      return r;
    }
    r.session = s;
    return r;
  }

  s.missing_count = 0;
  const double rel = detection->h / frame_h;
  r.rel_height = rel;

  if (s.state == CaptureState::WaitAlign) {
    const Point c = detection->center();
    const double tol = cfg.center_tolerance * frame_h;
    const bool centered = std::abs(c.x - (frame_w - 1) / 2.0) <= tol && std::abs(c.y - (frame_h - 1) / 2.0) <= tol;
    // The face has to match the small square, not already exceed the
    // middle checkpoint.
    const bool in_start_band = rel >= cfg.start_rel_height - kEps && rel < cfg.mid_rel_height - kEps;
    if (centered && in_start_band) {
      s.state = CaptureState::Recording;
      s.checkpoints.first = frame_index;
      s.running_max_height = rel;
      r.hit = CheckpointHit::First;
    }
    r.session = s;
    return r;
  }

  // Recording.
  if (rel < s.running_max_height - cfg.retreat_hysteresis) {
    r.session = restarted(frame_index);
    r.restarted = true;
    return r;
  }
  s.running_max_height = std::max(s.running_max_height, rel);
  if (!s.checkpoints.middle) {
    if (rel >= cfg.mid_rel_height - kEps) {
      s.checkpoints.middle = frame_index;
      r.hit = CheckpointHit::Middle;
    }
  } else if (rel >= cfg.end_rel_height - kEps) {
    s.checkpoints.last = frame_index;
    s.state = CaptureState::Done;
    r.hit = CheckpointHit::Last;
  }
  r.session = s;
  return r;
}

std::array<ImageBuffer, 3> extract_triplet(std::span<const ImageBuffer> frames, const CaptureSession& session) {
  if (session.state != CaptureState::Done || !session.checkpoints.complete())
    throw std::logic_error("capture session is not Done");
  const auto& cp = session.checkpoints;
  for (int i : {*cp.first, *cp.middle, *cp.last}) {
    if (i < 0 || static_cast<std::size_t>(i) >= frames.size())
      throw std::out_of_range("checkpoint index outside the frame sequence");
  }
  return {frames[*cp.first], frames[*cp.middle], frames[*cp.last]};
}

void to_json(nlohmann::json& j, const ProtocolConfig& c) {
  j = {{"start_rel_height", c.start_rel_height},
       {"mid_rel_height", c.mid_rel_height},
       {"end_rel_height", c.end_rel_height},
       {"center_tolerance", c.center_tolerance},
       {"retreat_hysteresis", c.retreat_hysteresis},
       {"max_missing_frames", c.max_missing_frames}};
}

void from_json(const nlohmann::json& j, ProtocolConfig& c) {
  if (!j.is_object()) throw DataError("protocol config must be an object");
  c.start_rel_height = j.value("start_rel_height", c.start_rel_height);
  c.mid_rel_height = j.value("mid_rel_height", c.mid_rel_height);
  c.end_rel_height = j.value("end_rel_height", c.end_rel_height);
  c.center_tolerance = j.value("center_tolerance", c.center_tolerance);
  c.retreat_hysteresis = j.value("retreat_hysteresis", c.retreat_hysteresis);
  c.max_missing_frames = j.value("max_missing_frames", c.max_missing_frames);
}

void to_json(nlohmann::json& j, const CaptureSession& s) {
  auto opt = [](const std::optional<int>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = {{"state", to_string(s.state)},
       {"running_max_height", s.running_max_height},
       {"missing_count", s.missing_count},
       {"checkpoints",
        {{"first", opt(s.checkpoints.first)}, {"middle", opt(s.checkpoints.middle)}, {"last", opt(s.checkpoints.last)}}}};
}

}  // namespace flowgate
