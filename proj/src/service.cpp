#include "flowgate/service.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <array>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>

#include "flowgate/errors.hpp"
#include "flowgate/image_io.hpp"

namespace flowgate {

namespace {

using Clock = std::chrono::steady_clock;

ServiceResponse json_response(int status, const nlohmann::json& j) { return {status, j.dump()}; }

ServiceResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

struct Buffered {
  ImageBuffer frame;
  Detection detection;
};

struct Session {
  std::mutex mutex;
  CaptureSession capture;
  int next_frame = 0;
  int frame_w = 0, frame_h = 0;
  double last_rel_height = 0.0;
  // f1, f2, f3; the only full frames kept.
  std::array<std::optional<Buffered>, 3> buffer;
  std::optional<std::string> verdict;
  Clock::time_point last_access;
};

nlohmann::json checkpoints_hit(const Checkpoints& c) {
  nlohmann::json j = nlohmann::json::array();
  if (c.first) j.push_back("first");
  if (c.middle) j.push_back("middle");
  if (c.last) j.push_back("last");
  return j;
}

int slot_for(CheckpointHit hit) {
  switch (hit) {
    case CheckpointHit::First:
      return 0;
    case CheckpointHit::Middle:
      return 1;
    case CheckpointHit::Last:
      return 2;
    case CheckpointHit::None:
      break;
  }
  return -1;
}

}  // namespace

struct SessionService::Impl {
  LinearHead head;
  PipelineConfig pipeline;
  ServiceConfig cfg;

  mutable std::mutex registry_mutex;
  std::map<std::string, std::shared_ptr<Session>> sessions;
  std::set<std::string> expired;
  std::mt19937_64 rng{std::random_device{}()};

  Clock::time_point now() const { return cfg.clock ? cfg.clock() : Clock::now(); }

  std::string new_id() {
    char buf[33];
    std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(rng()),
                  static_cast<unsigned long long>(rng()));
    return buf;
  }

  void sweep_locked(Clock::time_point t) {
    for (auto it = sessions.begin(); it != sessions.end();) {
      // A session busy with a request is not idle.
      std::unique_lock lock(it->second->mutex, std::try_to_lock);
      if (lock.owns_lock() && t - it->second->last_access > cfg.idle_timeout) {
        expired.insert(it->first);
        lock.unlock();
        it = sessions.erase(it);
      } else {
        ++it;
      }
    }
  }

  // Looks the session up and refreshes its idle timer; fills `err` on 404/410.
  std::shared_ptr<Session> find(const std::string& id, ServiceResponse& err) {
    std::lock_guard lock(registry_mutex);
    sweep_locked(now());
    const auto it = sessions.find(id);
    if (it != sessions.end()) return it->second;
    err = expired.count(id) ? error_response(410, "session expired") : error_response(404, "unknown session");
    return nullptr;
  }

  nlohmann::json state_json(const std::string& id, const Session& s) const {
    return {{"id", id},
            {"state", to_string(s.capture.state)},
            {"rel_height", s.last_rel_height},
            {"checkpoints_hit", checkpoints_hit(s.capture.checkpoints)},
            {"frames_received", s.next_frame},
            {"verdict_ready", s.verdict.has_value()}};
  }
};

SessionService::SessionService(LinearHead head, PipelineConfig pipeline, ServiceConfig cfg)
    : impl_(std::make_unique<Impl>()) {
  if (!head.fitted) throw std::invalid_argument("service needs a fitted head");
  pipeline.validate();
  if (cfg.idle_timeout.count() <= 0) throw std::invalid_argument("idle timeout must be positive");
  impl_->head = std::move(head);
  impl_->pipeline = std::move(pipeline);
  impl_->cfg = std::move(cfg);
}

SessionService::~SessionService() = default;

const ServiceConfig& SessionService::config() const { return impl_->cfg; }

void SessionService::sweep() {
  std::lock_guard lock(impl_->registry_mutex);
  impl_->sweep_locked(impl_->now());
}

std::size_t SessionService::session_count() const {
  std::lock_guard lock(impl_->registry_mutex);
  return impl_->sessions.size();
}

ServiceResponse SessionService::create_session() {
  auto s = std::make_shared<Session>();
  std::string id;
  {
    std::lock_guard lock(impl_->registry_mutex);
    const auto t = impl_->now();
    impl_->sweep_locked(t);
    do {
      id = impl_->new_id();
    } while (impl_->sessions.count(id) || impl_->expired.count(id));
    s->last_access = t;
    impl_->sessions.emplace(id, s);
  }
  spdlog::debug("session {} created", id);
  return json_response(201, {{"id", id}, {"config", impl_->pipeline.protocol}});
}

ServiceResponse SessionService::post_frame(const std::string& id, std::span<const std::uint8_t> image,
                                           const std::string& annotations_json) {
  ServiceResponse err;
  const auto s = impl_->find(id, err);
  if (!s) return err;

  // Decode and validate before touching the session.
  ImageBuffer frame;
  std::optional<Detection> det;
  try {
    frame = decode_image(image);
    const nlohmann::json j = nlohmann::json::parse(annotations_json);
    if (!j.is_object()) throw DataError("annotations must be an object");
    if (j.contains("box") && !j["box"].is_null()) {
      if (!j.contains("keypoints")) throw DataError("a box needs keypoints");
      det = Detection{j["box"].get<FaceBox>(), j["keypoints"].get<KeyPoints>()};
    }
  } catch (const DataError& e) {
    return error_response(400, e.what());
  } catch (const nlohmann::json::exception& e) {
    return error_response(400, std::string("annotations: ") + e.what());
  }

  std::lock_guard lock(s->mutex);
  s->last_access = impl_->now();
  if (s->frame_w == 0) {
    s->frame_w = frame.width();
    s->frame_h = frame.height();
  } else if (frame.width() != s->frame_w || frame.height() != s->frame_h) {
    return error_response(400, "frame size differs from the session's first frame");
  }
  const StepResult r = step(s->capture, s->next_frame, det ? std::optional<FaceBox>(det->box) : std::nullopt,
                            s->frame_w, s->frame_h, impl_->pipeline.protocol);
  if (!r.noop) {
    ++s->next_frame;
    s->capture = r.session;
    s->last_rel_height = r.rel_height;
    if (r.restarted) {
      for (auto& b : s->buffer) b.reset();
    }
    const int slot = slot_for(r.hit);
    if (slot >= 0) {
      if (slot == 0) {
        for (auto& b : s->buffer) b.reset();
      }
      s->buffer[slot] = Buffered{std::move(frame), *det};
    }
  }
  return json_response(200, {{"state", to_string(s->capture.state)},
                             {"rel_height", r.rel_height},
                             {"checkpoints_hit", checkpoints_hit(s->capture.checkpoints)},
                             {"restarted", r.restarted}});
}

ServiceResponse SessionService::get_session(const std::string& id) {
  ServiceResponse err;
  const auto s = impl_->find(id, err);
  if (!s) return err;
  std::lock_guard lock(s->mutex);
  s->last_access = impl_->now();
  return json_response(200, impl_->state_json(id, *s));
}

ServiceResponse SessionService::verdict(const std::string& id) {
  ServiceResponse err;
  const auto s = impl_->find(id, err);
  if (!s) return err;
  Triplet t;
  {
    std::lock_guard lock(s->mutex);
    s->last_access = impl_->now();
    if (s->capture.state != CaptureState::Done) return error_response(409, "capture is not complete");
    if (s->verdict) return {200, *s->verdict};
    for (int k = 0; k < 3; ++k) {
      t.frames[k] = s->buffer[k]->frame;
      t.detections[k] = s->buffer[k]->detection;
    }
  }
  // Scored outside the lock: the session stays readable meanwhile, and a
  // Done session's buffer no longer changes.
  std::string text;
  try {
    text = verdict_text(classify_triplet(t, impl_->head, impl_->pipeline));
  } catch (const std::exception& e) {
    return error_response(400, std::string("cannot score the captured frames: ") + e.what());
  }
  std::lock_guard lock(s->mutex);
  if (!s->verdict) s->verdict = text;
  return {200, *s->verdict};
}

struct HttpServer::Impl {
  SessionService& service;
  httplib::Server server;

  explicit Impl(SessionService& s) : service(s) {}

  void reply(httplib::Response& res, const ServiceResponse& r) {
    res.status = r.status;
    res.set_content(r.body, "application/json");
  }
};

HttpServer::HttpServer(SessionService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  auto* impl = impl_.get();
  const std::string origin = service.config().cors_origin;

  srv.set_default_headers({{"Access-Control-Allow-Origin", origin},
                           {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  srv.Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  srv.Post("/api/v1/sessions", [impl](const httplib::Request&, httplib::Response& res) {
    impl->reply(res, impl->service.create_session());
  });
  srv.Post(R"(/api/v1/sessions/([0-9a-f]+)/frames)", [impl](const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data() || !req.has_file("image") || !req.has_file("annotations")) {
      impl->reply(res, error_response(400, "expected multipart fields 'image' and 'annotations'"));
      return;
    }
    const std::string& img = req.get_file_value("image").content;
    const std::span<const std::uint8_t> bytes(reinterpret_cast<const std::uint8_t*>(img.data()), img.size());
    impl->reply(res, impl->service.post_frame(req.matches[1], bytes, req.get_file_value("annotations").content));
  });
  srv.Get(R"(/api/v1/sessions/([0-9a-f]+))", [impl](const httplib::Request& req, httplib::Response& res) {
    impl->reply(res, impl->service.get_session(req.matches[1]));
  });
  srv.Post(R"(/api/v1/sessions/([0-9a-f]+)/verdict)", [impl](const httplib::Request& req, httplib::Response& res) {
    impl->reply(res, impl->service.verdict(req.matches[1]));
  });
  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) res.set_content(nlohmann::json{{"error", httplib::status_message(res.status)}}.dump(), "application/json");
  });
  srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    spdlog::error("request failed: {}", what);
    res.status = 500;
    res.set_content(nlohmann::json{{"error", what}}.dump(), "application/json");
  });
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound <= 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

}  // namespace flowgate
