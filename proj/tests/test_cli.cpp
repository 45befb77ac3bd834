#include <doctest.h>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "flowgate/classifier.hpp"
#include "flowgate/cli.hpp"
#include "flowgate/flow.hpp"
#include "flowgate/image_io.hpp"
#include "test_util.hpp"

using namespace flowgate;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("flowgate_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[fs::relative(e.path(), root).string()] = ss.str();
  }
  return files;
}

void write_json(const fs::path& p, const nlohmann::json& j) { std::ofstream(p) << j.dump(); }

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"frobnicate"}).code == kExitUsage);
  CHECK(cli({"simulate", "--n", "two"}).code == kExitUsage);
  CHECK(cli({"simulate"}).code == kExitUsage);  // --out missing
  CHECK(cli({"eval", "--suite", "nope"}).code == kExitUsage);
  CHECK(cli({"--help"}).code == kExitOk);
}

TEST_CASE("simulate is deterministic per seed") {
  const fs::path a = scratch_dir("sim_a"), b = scratch_dir("sim_b");
  for (const auto& dir : {a, b}) {
    const Run r = cli({"simulate", "--classes", "Real,PrintedPhoto", "--n", "1", "--seed", "7", "--out", dir.string()});
    REQUIRE(r.code == kExitOk);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["sequences"] == 2);
  }
  const auto ta = tree(a), tb = tree(b);
  CHECK(ta.size() > 30);
  CHECK(ta == tb);
  CHECK(cli({"simulate", "--classes", "Hologram", "--out", a.string()}).code == kExitUsage);
}

TEST_CASE("flow of identical images is zero") {
  const fs::path d = scratch_dir("flow");
  write_image(d / "a.png", test::smooth_texture(64, 48, 3, 8.0, 3));
  const Run r = cli({"flow", "--f1", (d / "a.png").string(), "--f3", (d / "a.png").string(), "--res", "64", "--out",
                     (d / "z.flo").string()});
  REQUIRE(r.code == kExitOk);
  const FlowField f = read_flo(d / "z.flo");
  CHECK(f.width == 64);
  CHECK(f.height == 48);
  for (std::size_t k = 0; k < f.u.size(); ++k) {
    REQUIRE(f.u[k] == 0.0f);
    REQUIRE(f.v[k] == 0.0f);
  }
  CHECK(nlohmann::json::parse(r.out)["max_magnitude"] == 0.0);
  CHECK(cli({"flow", "--f1", (d / "missing.png").string(), "--f3", (d / "a.png").string(), "--out",
             (d / "x.flo").string()})
            .code == kExitData);
}

TEST_CASE("config files fill flags and flags win") {
  const fs::path d = scratch_dir("config");
  write_json(d / "cfg.json", {{"seed", 3}, {"simulate", {{"n", 1}, {"classes", "StaticVideo"}}}});
  Run r = cli({"simulate", "--config", (d / "cfg.json").string(), "--out", (d / "one").string()});
  REQUIRE(r.code == kExitOk);
  auto j = nlohmann::json::parse(r.out);
  CHECK(j["sequences"] == 1);
  CHECK(j["seed"] == 3);
  r = cli({"simulate", "--config", (d / "cfg.json").string(), "--n", "2", "--seed", "4", "--out",
           (d / "two").string()});
  REQUIRE(r.code == kExitOk);
  j = nlohmann::json::parse(r.out);
  CHECK(j["sequences"] == 2);
  CHECK(j["seed"] == 4);

  write_json(d / "bad.json", {{"simulate", {{"frames_per_second", 30}}}});
  CHECK(cli({"simulate", "--config", (d / "bad.json").string(), "--out", d.string()}).code == kExitUsage);
  write_json(d / "bad2.json", {{"colour", "blue"}});
  CHECK(cli({"simulate", "--config", (d / "bad2.json").string(), "--out", d.string()}).code == kExitUsage);
  CHECK(cli({"simulate", "--config", (d / "nope.json").string(), "--out", d.string()}).code == kExitData);
}

TEST_CASE("train then classify") {
  const fs::path d = scratch_dir("train");
  REQUIRE(cli({"simulate", "--n", "2", "--seed", "11", "--out", (d / "data").string()}).code == kExitOk);
  write_json(d / "cfg.json", {{"trainer", {{"epochs", 200}}}});
  Run r = cli({"train", "--data", (d / "data").string(), "--out", (d / "head.json").string(), "--config",
               (d / "cfg.json").string(), "--seed", "11"});
  REQUIRE(r.code == kExitOk);
  CHECK(nlohmann::json::parse(r.out)["n_train"] == 12);

  const std::string seq = (d / "data" / "Real" / "Real_0000").string();
  r = cli({"classify", "--seq", seq, "--head", (d / "head.json").string(), "--mode", "dual"});
  REQUIRE(r.code == kExitOk);
  const auto v = nlohmann::json::parse(r.out);
  CHECK(v["score"].get<double>() > 0.0);
  CHECK(v["score"].get<double>() < 1.0);
  CHECK(v.contains("per_stream_features"));
  // Same inputs, same bytes.
  CHECK(cli({"classify", "--seq", seq, "--head", (d / "head.json").string()}).out == r.out);

  CHECK(cli({"classify", "--seq", seq, "--head", (d / "head.json").string(), "--mode", "flow_only"}).code ==
        kExitData);
  CHECK(cli({"classify", "--seq", (d / "nowhere").string(), "--head", (d / "head.json").string()}).code ==
        kExitData);
  write_json(d / "broken.json", {{"weights", "x"}});
  CHECK(cli({"classify", "--seq", seq, "--head", (d / "broken.json").string()}).code == kExitData);
  CHECK(cli({"train", "--data", (d / "data").string(), "--out", (d / "h2.json").string(), "--augment", "mixup"})
            .code == kExitUsage);
}
