#include "flowgate/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>

#include "flowgate/errors.hpp"
#include "flowgate/image_io.hpp"

namespace flowgate {

void PipelineConfig::validate() const {
  protocol.validate();
  flow.validate();
  if (!(preprocess.margin >= 0.0 && preprocess.margin <= 1.0)) throw std::invalid_argument("margin must be in [0, 1]");
  if (preprocess.crop_size < 16 || preprocess.crop_size > 1024)
    throw std::invalid_argument("crop_size must be in [16, 1024]");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must be in (0, 1)");
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"protocol", c.protocol},
       {"preprocess",
        {{"margin", c.preprocess.margin},
         {"crop_size", c.preprocess.crop_size},
         {"shared_box", c.preprocess.shared_box}}},
       {"flow", c.flow},
       {"threshold", c.threshold}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (!j.is_object()) throw DataError("pipeline config must be an object");
  try {
    if (j.contains("protocol")) from_json(j["protocol"], c.protocol);
    if (j.contains("flow")) {
      // Merge over the current values.
      nlohmann::json merged = c.flow;
      merged.update(j["flow"]);
      from_json(merged, c.flow);
    }
    if (j.contains("preprocess")) {
      const auto& p = j["preprocess"];
      c.preprocess.margin = p.value("margin", c.preprocess.margin);
      c.preprocess.crop_size = p.value("crop_size", c.preprocess.crop_size);
      c.preprocess.shared_box = p.value("shared_box", c.preprocess.shared_box);
    }
    c.threshold = j.value("threshold", c.threshold);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("pipeline config: ") + e.what());
  }
}

FlowSample run_flow_stage(const Triplet& t, const PreprocessConfig& pre, const FlowConfig& flow) {
  const auto& d = t.detections;
  FlowSample s;
  s.pair = preprocess_triplet(t.frames[0], t.frames[1], t.frames[2], d[0].keypoints, d[1].keypoints, d[2].keypoints,
                              d[0].box, d[1].box, d[2].box, pre);
  s.flow = estimate_flow(s.pair.f1_crop, s.pair.f3_crop, flow);
  return s;
}

nlohmann::json verdict_json(const Verdict& v) {
  return {{"score", v.score},
          {"label", v.live ? "live" : "spoof"},
          {"mode", to_string(v.mode)},
          {"representation", to_string(v.representation)},
          {"per_stream_features", v.features}};
}

std::string verdict_text(const Verdict& v) { return verdict_json(v).dump(2) + "\n"; }

Verdict classify_triplet(const Triplet& t, const LinearHead& head, const PipelineConfig& cfg) {
  const FlowSample s = run_flow_stage(t, cfg.preprocess, cfg.flow);
  Verdict v;
  v.mode = head.mode;
  v.representation = head.representation;
  v.features = extract_features(s.pair, s.flow, head.representation, head.mode);
  v.score = score(head, v.features);
  v.live = v.score >= cfg.threshold;
  return v;
}

CaptureSession run_protocol(std::span<const std::optional<FaceBox>> detections, int frame_w, int frame_h,
                            const ProtocolConfig& cfg) {
  CaptureSession s;
  for (std::size_t i = 0; i < detections.size() && s.state != CaptureState::Done; ++i) {
    s = step(s, static_cast<int>(i), detections[i], frame_w, frame_h, cfg).session;
  }
  return s;
}

namespace {

class RendererSource final : public SequenceSource {
 public:
  explicit RendererSource(const SceneSpec& spec) : r_(spec) {}
  int frame_count() const override { return r_.frame_count(); }
  int width() const override { return r_.spec().width; }
  int height() const override { return r_.spec().height; }
  std::optional<Detection> detection(int i) const override {
    const FrameAnnotation a = r_.annotation(i);
    return Detection{a.box, a.keypoints};
  }
  ImageBuffer frame(int i) const override { return r_.frame(i); }

 private:
  SceneRenderer r_;
};

class DirectorySource final : public SequenceSource {
 public:
  explicit DirectorySource(const std::filesystem::path& dir) : dir_(dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("sequence directory not found: " + dir.string());
    std::ifstream in(dir / "annotations.json");
    if (!in) throw DataError("missing annotations.json in " + dir.string());
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed annotations.json: " + std::string(e.what()));
    }
    if (!j.contains("frames") || !j["frames"].is_array()) throw DataError("annotations.json lacks a frames array");
    for (const auto& f : j["frames"]) {
      if (f.is_null() || !f.contains("box")) {
        det_.emplace_back(std::nullopt);
        continue;
      }
      if (!f.contains("keypoints")) throw DataError("annotation with a box must carry keypoints");
      det_.push_back(Detection{f["box"].get<FaceBox>(), f["keypoints"].get<KeyPoints>()});
    }
    for (std::size_t i = 0; i < det_.size(); ++i) {
      if (!std::filesystem::exists(path(static_cast<int>(i))))
        throw DataError("missing frame file " + path(static_cast<int>(i)).string());
    }
    if (det_.empty()) throw DataError("no frames in " + dir.string());
    const ImageBuffer first = frame(0);
    w_ = first.width();
    h_ = first.height();
    if (j.contains("frame_width") && (j["frame_width"] != w_ || j["frame_height"] != h_))
      throw DataError("annotated frame size does not match the images");
  }
  int frame_count() const override { return static_cast<int>(det_.size()); }
  int width() const override { return w_; }
  int height() const override { return h_; }
  std::optional<Detection> detection(int i) const override { return det_.at(i); }
  ImageBuffer frame(int i) const override {
    ImageBuffer img = read_image(path(i));
    if (!img.empty() && w_ > 0 && (img.width() != w_ || img.height() != h_))
      throw DataError("frame " + std::to_string(i) + " has a different size");
    return img;
  }

 private:
  std::filesystem::path path(int i) const {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03d.png", i);
    return dir_ / name;
  }
  std::filesystem::path dir_;
  std::vector<std::optional<Detection>> det_;
  int w_ = 0, h_ = 0;
};

class MemorySource final : public SequenceSource {
 public:
  explicit MemorySource(LoadedSequence seq) : seq_(std::move(seq)) {
    if (seq_.frames.empty()) throw DataError("empty sequence");
  }
  int frame_count() const override { return static_cast<int>(seq_.frames.size()); }
  int width() const override { return seq_.frames.front().width(); }
  int height() const override { return seq_.frames.front().height(); }
  std::optional<Detection> detection(int i) const override {
    const auto& a = seq_.annotations.at(i);
    if (!a) return std::nullopt;
    return Detection{a->box, a->keypoints};
  }
  ImageBuffer frame(int i) const override { return seq_.frames.at(i); }

 private:
  LoadedSequence seq_;
};

}  // namespace

std::unique_ptr<SequenceSource> make_renderer_source(const SceneSpec& spec) {
  return std::make_unique<RendererSource>(spec);
}

std::unique_ptr<SequenceSource> make_directory_source(const std::filesystem::path& dir) {
  return std::make_unique<DirectorySource>(dir);
}

std::unique_ptr<SequenceSource> make_memory_source(LoadedSequence seq) {
  return std::make_unique<MemorySource>(std::move(seq));
}

std::optional<CaptureSession> capture(const SequenceSource& src, const ProtocolConfig& cfg) {
  std::vector<std::optional<FaceBox>> boxes;
  for (int i = 0; i < src.frame_count(); ++i) {
    const auto d = src.detection(i);
    boxes.push_back(d ? std::optional<FaceBox>(d->box) : std::nullopt);
  }
  CaptureSession s = run_protocol(boxes, src.width(), src.height(), cfg);
  if (s.state != CaptureState::Done) return std::nullopt;
  return s;
}

Triplet load_triplet(const SequenceSource& src, const SampleSelection& sel) {
  Triplet t;
  const std::array<int, 3> idx{sel.f1, sel.f2, sel.f3};
  const std::array<const std::optional<Transform2D>*, 3> warps{&sel.warp_f1, nullptr, &sel.warp_f3};
  for (int k = 0; k < 3; ++k) {
    const auto d = src.detection(idx[k]);
    if (!d) throw DataError("selected frame " + std::to_string(idx[k]) + " has no detection");
    t.frames[k] = src.frame(idx[k]);
    t.detections[k] = *d;
    if (warps[k] && warps[k]->has_value()) {
      const Transform2D& h = **warps[k];
      t.frames[k] = warp(t.frames[k], h, t.frames[k].width(), t.frames[k].height());
      t.detections[k] = {d->box.mapped(h), d->keypoints.mapped(h)};
    }
  }
  return t;
}

}  // namespace flowgate
