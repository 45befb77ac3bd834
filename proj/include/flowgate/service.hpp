#pragma once

// HTTP session API for live cooperative capture. The client posts frames
// with its own face detection; the server steps the capture protocol,
// keeps only the three checkpoint frames and scores them on request.
//
//   POST /api/v1/sessions               -> 201 {id, config}
//   POST /api/v1/sessions/{id}/frames   multipart: "image" (PNG/JPEG) +
//                                       "annotations" ({box, keypoints} or {box: null})
//   GET  /api/v1/sessions/{id}
//   POST /api/v1/sessions/{id}/verdict  -> same bytes as `flowgate classify`
//
// Errors: 400 malformed input, 404 unknown session, 409 verdict before
// Done, 410 expired session. Bodies are {"error": "..."}.

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>

#include "flowgate/classifier.hpp"
#include "flowgate/pipeline.hpp"

namespace flowgate {

struct ServiceConfig {
  std::chrono::milliseconds idle_timeout{120'000};
  std::string cors_origin = "*";
  // Injectable for tests; defaults to steady_clock::now.
  std::function<std::chrono::steady_clock::time_point()> clock;
};

struct ServiceResponse {
  int status = 200;
  std::string body;
};

// Transport-independent core; every method is safe to call concurrently.
// Requests for one session are serialized, distinct sessions never block
// each other beyond a short registry lookup.
class SessionService {
 public:
  // Throws std::invalid_argument when the head is unfitted or the pipeline
  // config is invalid.
  SessionService(LinearHead head, PipelineConfig pipeline, ServiceConfig cfg = {});
  ~SessionService();
  SessionService(const SessionService&) = delete;
  SessionService& operator=(const SessionService&) = delete;

  ServiceResponse create_session();
  ServiceResponse post_frame(const std::string& id, std::span<const std::uint8_t> image,
                             const std::string& annotations_json);
  ServiceResponse get_session(const std::string& id);
  ServiceResponse verdict(const std::string& id);

  // Drops sessions idle for longer than the timeout; later requests for
  // them answer 410. Called on every request as well.
  void sweep();
  std::size_t session_count() const;
  const ServiceConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// httplib front end. bind() picks the port (0 = any free port) and returns
// it; listen() blocks until stop().
class HttpServer {
 public:
  explicit HttpServer(SessionService& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Throws std::runtime_error when the address cannot be bound.
  int bind(const std::string& host, int port);
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace flowgate
