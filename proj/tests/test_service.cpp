#include <doctest.h>

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <sstream>
#include <thread>

#include "flowgate/cli.hpp"
#include "flowgate/features.hpp"
#include "flowgate/image_io.hpp"
#include "flowgate/service.hpp"
#include "protocol_table.hpp"
#include "service_driver.hpp"
#include "service_fuzz.hpp"
#include "test_util.hpp"

// After the Eigen users: <resolv.h> defines a _res macro.
#include <httplib.h>

using namespace flowgate;
namespace fs = std::filesystem;

namespace {

LinearHead demo_head() {
  const int dim = static_cast<int>(kMagnitudeFeatureNames.size() + kRgbFeatureNames.size());
  LinearHead h = LinearHead::zero(dim);
  for (int i = 0; i < dim; ++i) h.weights[i] = 0.02 * ((i % 3) - 1);
  h.bias = 0.1;
  return h;
}

// Sequence directory written once per test binary run.
const fs::path& real_sequence() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "flowgate_service_real";
    fs::remove_all(d);
    SceneSpec s;
    s.attack = AttackClass::Real;
    s.texture_seed = 21;
    write_sequence(d, render(s));
    return d;
  }();
  return dir;
}

std::vector<std::uint8_t> png(const ImageBuffer& img) { return encode_png(img); }

struct FakeClock {
  std::shared_ptr<std::atomic<long long>> ms = std::make_shared<std::atomic<long long>>(0);
  std::chrono::steady_clock::time_point operator()() const {
    return std::chrono::steady_clock::time_point(std::chrono::milliseconds(ms->load()));
  }
};

}  // namespace

TEST_CASE("a monotone approach reaches a verdict equal to the CLI's") {
  SessionService svc(demo_head(), {});
  const test::DriveResult r = test::drive_sequence(svc, real_sequence());
  CHECK(r.final_state == "Done");
  CHECK(r.restarts == 0);
  REQUIRE(r.verdict.status == 200);
  const auto v = nlohmann::json::parse(r.verdict.body);
  CHECK(v["score"].get<double>() > 0.0);
  CHECK(v["score"].get<double>() < 1.0);
  CHECK(v.contains("label"));
  CHECK(v["per_stream_features"].contains("flow"));
  // Asking again returns the cached bytes.
  CHECK(svc.verdict(r.id).body == r.verdict.body);

  const fs::path head = fs::temp_directory_path() / "flowgate_service_head.json";
  std::ofstream(head) << nlohmann::json(demo_head()).dump();
  std::ostringstream out, err;
  REQUIRE(run_cli({"classify", "--seq", real_sequence().string(), "--head", head.string()}, out, err) == kExitOk);
  CHECK(out.str() == r.verdict.body);

  const auto state = nlohmann::json::parse(svc.get_session(r.id).body);
  CHECK(state["state"] == "Done");
  CHECK(state["verdict_ready"] == true);
  CHECK(state["checkpoints_hit"] == nlohmann::json{"first", "middle", "last"});
}

TEST_CASE("retreat restarts and clears checkpoints") {
  SessionService svc(demo_head(), {});
  const std::string id = nlohmann::json::parse(svc.create_session().body)["id"];
  const auto frame = png(ImageBuffer(test::kW, test::kH, 1, 0.5));
  nlohmann::json j;
  for (double rel : {0.50, 0.60}) {
    j = nlohmann::json::parse(svc.post_frame(id, frame, test::annotation(test::centered_box(rel))).body);
    CHECK(j["restarted"] == false);
  }
  CHECK(j["checkpoints_hit"] == nlohmann::json{"first"});
  j = nlohmann::json::parse(svc.post_frame(id, frame, test::annotation(test::centered_box(0.55))).body);
  CHECK(j["restarted"] == true);
  CHECK(j["state"] == "Restarted");
  CHECK(j["checkpoints_hit"].empty());
  CHECK(svc.verdict(id).status == 409);
}

TEST_CASE("error statuses") {
  FakeClock clock;
  ServiceConfig cfg;
  cfg.idle_timeout = std::chrono::seconds(10);
  cfg.clock = clock;
  SessionService svc(demo_head(), {}, cfg);
  const std::string id = nlohmann::json::parse(svc.create_session().body)["id"];
  const auto frame = png(ImageBuffer(test::kW, test::kH, 1, 0.5));

  CHECK(svc.verdict(id).status == 409);
  CHECK(svc.get_session("abc").status == 404);
  CHECK(svc.post_frame("abc", frame, test::annotation(std::nullopt)).status == 404);

  const std::vector<std::uint8_t> garbage{1, 2, 3, 4};
  CHECK(svc.post_frame(id, garbage, test::annotation(std::nullopt)).status == 400);
  CHECK(svc.post_frame(id, frame, "{not json").status == 400);
  CHECK(svc.post_frame(id, frame, R"({"box":[1,2,3,4]})").status == 400);
  REQUIRE(svc.post_frame(id, frame, test::annotation(std::nullopt)).status == 200);
  CHECK(svc.post_frame(id, png(ImageBuffer(80, 50, 1, 0.5)), test::annotation(std::nullopt)).status == 400);
  // Rejected frames do not advance the session.
  CHECK(nlohmann::json::parse(svc.get_session(id).body)["frames_received"] == 1);

  clock.ms->store(9'000);
  CHECK(svc.get_session(id).status == 200);
  clock.ms->store(20'000);
  CHECK(svc.get_session(id).status == 410);
  CHECK(svc.verdict(id).status == 410);
  CHECK(svc.session_count() == 0);
  const auto err = nlohmann::json::parse(svc.get_session(id).body);
  CHECK(err.contains("error"));

  CHECK_THROWS_AS(SessionService(LinearHead{}, {}), std::invalid_argument);
}

TEST_CASE("concurrent sessions do not share state") {
  SessionService svc(demo_head(), {});
  const auto failures = test::fuzz_sessions(svc, demo_head(), 100, 8);
  for (const auto& f : failures) FAIL_CHECK(f);
  CHECK(svc.session_count() == 100);
}

TEST_CASE("HTTP front end") {
  SessionService svc(demo_head(), {});
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  std::thread loop([&] { server.listen(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 200 && !client.Get("/api/v1/sessions/0"); ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(10));

  auto created = client.Post("/api/v1/sessions");
  REQUIRE(created);
  CHECK(created->status == 201);
  CHECK(created->get_header_value("Access-Control-Allow-Origin") == "*");
  const auto body = nlohmann::json::parse(created->body);
  const std::string id = body["id"];
  CHECK(body["config"]["start_rel_height"] == 0.5);

  const auto frame = png(ImageBuffer(test::kW, test::kH, 1, 0.5));
  httplib::MultipartFormDataItems items{
      {"image", std::string(frame.begin(), frame.end()), "f.png", "image/png"},
      {"annotations", test::annotation(test::centered_box(0.5)), "", "application/json"}};
  auto posted = client.Post("/api/v1/sessions/" + id + "/frames", items);
  REQUIRE(posted);
  CHECK(posted->status == 200);
  CHECK(nlohmann::json::parse(posted->body)["state"] == "Recording");

  auto missing = client.Post("/api/v1/sessions/" + id + "/frames", httplib::MultipartFormDataItems{});
  REQUIRE(missing);
  CHECK(missing->status == 400);

  auto state = client.Get("/api/v1/sessions/" + id);
  REQUIRE(state);
  CHECK(nlohmann::json::parse(state->body)["frames_received"] == 1);
  auto early = client.Post("/api/v1/sessions/" + id + "/verdict");
  REQUIRE(early);
  CHECK(early->status == 409);
  auto unknown = client.Get("/api/v1/sessions/deadbeef");
  REQUIRE(unknown);
  CHECK(unknown->status == 404);
  auto preflight = client.Options("/api/v1/sessions");
  REQUIRE(preflight);
  CHECK(preflight->status == 204);
  CHECK(preflight->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

  server.stop();
  loop.join();
}
