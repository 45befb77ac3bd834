#include "flowgate/cli.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "flowgate/errors.hpp"
#include "flowgate/eval.hpp"
#include "flowgate/image_io.hpp"
#include "flowgate/service.hpp"

namespace flowgate {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << text)) throw DataError("cannot write " + p.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

LinearHead read_head(const std::filesystem::path& p) {
  LinearHead h;
  try {
    from_json(read_json_file(p), h);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed head file " + p.string() + ": " + e.what());
  }
  if (!h.fitted) throw DataError("head in " + p.string() + " is not fitted");
  return h;
}

// One subcommand's flags, each bound to a variable; values missing on the
// command line are taken from the config file section of the same name.
class Flags {
 public:
  Flags(CLI::App* sub, std::string section) : sub_(sub), section_(std::move(section)) {}

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    CLI::Option* opt = sub_->add_option("--" + name, var, desc);
    if constexpr (!std::is_same_v<T, std::string>) opt->capture_default_str();
    known_.insert(name);
    apply_.push_back([opt, &var, name](const nlohmann::json& sec) {
      if (opt->count() == 0 && sec.contains(name)) {
        try {
          var = sec[name].get<T>();
        } catch (const nlohmann::json::exception& e) {
          throw UsageError("config value for --" + name + ": " + e.what());
        }
      }
    });
    return opt;
  }

  void merge(const nlohmann::json& config) const {
    if (!config.contains(section_)) return;
    const auto& sec = config[section_];
    if (!sec.is_object()) throw UsageError("config section '" + section_ + "' must be an object");
    for (const auto& [k, v] : sec.items()) {
      if (!known_.count(k)) throw UsageError("unknown key '" + k + "' in config section '" + section_ + "'");
    }
    for (const auto& f : apply_) f(sec);
  }

  CLI::App* app() const { return sub_; }

 private:
  CLI::App* sub_;
  std::string section_;
  std::set<std::string> known_;
  std::vector<std::function<void(const nlohmann::json&)>> apply_;
};

void require(bool present, const std::string& flag) {
  if (!present) throw UsageError("--" + flag + " is required");
}

struct Common {
  std::uint64_t seed = 0;
  std::string config_path;
  nlohmann::json config = nlohmann::json::object();
  PipelineConfig pipeline;
  TrainConfig train;
};

void load_config(Common& c, CLI::Option* seed_opt) {
  if (c.config_path.empty()) return;
  c.config = read_json_file(c.config_path);
  if (!c.config.is_object()) throw UsageError("config file must hold a JSON object");
  static const std::set<std::string> top{"seed",     "pipeline", "trainer", "simulate", "flow",
                                         "classify", "train",    "eval",    "serve"};
  for (const auto& [k, v] : c.config.items()) {
    if (!top.count(k)) throw UsageError("unknown config key '" + k + "'");
  }
  if (seed_opt->count() == 0 && c.config.contains("seed")) c.seed = c.config["seed"].get<std::uint64_t>();
  if (c.config.contains("pipeline")) from_json(c.config["pipeline"], c.pipeline);
  // Optimizer settings, shared by train and eval.
  if (c.config.contains("trainer")) {
    const auto& t = c.config["trainer"];
    if (!t.is_object()) throw UsageError("config section 'trainer' must be an object");
    for (const auto& [k, v] : t.items()) {
      if (k != "epochs" && k != "lr" && k != "l2") throw UsageError("unknown key '" + k + "' in config section 'trainer'");
    }
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.l2 = t.value("l2", c.train.l2);
  }
}

// ---- subcommands -----------------------------------------------------------

struct SimulateArgs {
  std::string classes;
  int n = 10;
  std::string out;
};

int cmd_simulate(const SimulateArgs& a, const Common& c, std::ostream& out) {
  require(!a.out.empty(), "out");
  if (a.n < 1) throw UsageError("--n must be at least 1");
  std::vector<AttackClass> classes;
  if (a.classes.empty()) {
    classes.assign(kAllClasses.begin(), kAllClasses.end());
  } else {
    try {
      for (const auto& name : split_list(a.classes)) classes.push_back(attack_class_from_string(name));
    } catch (const DataError& e) {
      throw UsageError(e.what());
    }
  }
  const Dataset d = make_dataset(a.n, c.seed, classes);
  write_dataset(a.out, d);
  out << nlohmann::json{{"out", a.out}, {"seed", c.seed}, {"sequences", d.items.size()}}.dump() << "\n";
  return kExitOk;
}

struct FlowArgs {
  std::string f1, f3, annotations, out;
  int res = 256;
  int iters = 3;
};

int cmd_flow(const FlowArgs& a, const Common& c, std::ostream& out) {
  require(!a.f1.empty(), "f1");
  require(!a.f3.empty(), "f3");
  require(!a.out.empty(), "out");
  FlowConfig fc = c.pipeline.flow;
  fc.resolution = a.res;
  fc.refine_iters = a.iters;
  try {
    fc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const ImageBuffer i1 = read_image(a.f1);
  const ImageBuffer i3 = read_image(a.f3);
  FlowField f;
  if (!a.annotations.empty()) {
    // {"f1": {box, keypoints}, "f3": {box, keypoints}}: preprocess first.
    const nlohmann::json j = read_json_file(a.annotations);
    if (!j.is_object() || !j.contains("f1") || !j.contains("f3"))
      throw DataError("annotations need \"f1\" and \"f3\" entries");
    const auto det = [&](const char* k) {
      const auto& e = j[k];
      if (!e.is_object() || !e.contains("box") || !e.contains("keypoints"))
        throw DataError(std::string("annotation ") + k + " needs box and keypoints");
      return Detection{e["box"].get<FaceBox>(), e["keypoints"].get<KeyPoints>()};
    };
    const Detection d1 = det("f1"), d3 = det("f3");
    const PreprocessedPair p =
        preprocess_triplet(i1, i1, i3, d1.keypoints, d1.keypoints, d3.keypoints, d1.box, d1.box, d3.box, c.pipeline.preprocess);
    f = estimate_flow(p.f1_crop, p.f3_crop, fc);
  } else {
    if (i1.width() != i3.width() || i1.height() != i3.height()) throw DataError("f1 and f3 differ in size");
    f = estimate_flow(i1, i3, fc);
  }
  write_flo(a.out, f);
  const MagnitudeMap m = magnitude(f);
  double mean = 0.0, mx = 0.0;
  for (double v : m.m) {
    mean += v;
    mx = std::max(mx, v);
  }
  mean /= static_cast<double>(m.m.size());
  out << nlohmann::json{{"out", a.out},
                        {"width", f.width},
                        {"height", f.height},
                        {"mean_magnitude", mean},
                        {"max_magnitude", mx}}
             .dump()
      << "\n";
  return kExitOk;
}

struct ClassifyArgs {
  std::string seq, head, mode;
};

int cmd_classify(const ClassifyArgs& a, const Common& c, std::ostream& out) {
  require(!a.seq.empty(), "seq");
  require(!a.head.empty(), "head");
  const LinearHead head = read_head(a.head);
  if (!a.mode.empty()) {
    StreamMode m;
    try {
      m = stream_mode_from_string(a.mode);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
    if (m != head.mode)
      throw DataError("--mode " + a.mode + " does not match the head, which was trained for " + to_string(head.mode));
  }
  const auto src = make_directory_source(a.seq);
  const auto session = capture(*src, c.pipeline.protocol);
  if (!session) throw DataError("capture protocol never completed on " + a.seq);
  SampleSelection sel;
  sel.f1 = *session->checkpoints.first;
  sel.f2 = *session->checkpoints.middle;
  sel.f3 = *session->checkpoints.last;
  out << verdict_text(classify_triplet(load_triplet(*src, sel), head, c.pipeline));
  return kExitOk;
}

struct TrainArgs {
  std::string data, out, augment, mode = "dual", representation = "clipped_magnitude";
};

int cmd_train(const TrainArgs& a, const Common& c, std::ostream& out) {
  require(!a.data.empty(), "data");
  require(!a.out.empty(), "out");
  AugmentConfig aug;
  for (const auto& name : split_list(a.augment)) {
    if (name == "random_frame") {
      aug.random_frame = true;
    } else if (name == "multires") {
      aug.multires = true;
    } else if (name == "perspective") {
      aug.perspective = true;
    } else if (name != "none") {
      throw UsageError("unknown augmentation '" + name + "'");
    }
  }
  StreamMode mode;
  FlowRepresentation rep;
  try {
    mode = stream_mode_from_string(a.mode);
    rep = flow_representation_from_string(a.representation);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  EvalOptions opt;
  opt.pipeline = c.pipeline;
  opt.train = c.train;
  opt.train.seed = c.seed;
  opt.seed = c.seed;
  Evaluator ev(load_eval_dataset(a.data), opt);
  const LinearHead head = ev.train(mode, rep, aug);
  write_text_file(a.out, nlohmann::json(head).dump(2) + "\n");
  int n_train = 0;
  for (const auto& it : ev.data().items) n_train += it.split == Split::Train;
  out << nlohmann::json{{"out", a.out},
                        {"mode", to_string(mode)},
                        {"representation", to_string(rep)},
                        {"augment", aug},
                        {"n_train", n_train}}
             .dump()
      << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string suite, data, out;
  int n = 50;
  unsigned threads = 0;
};

int cmd_eval(const EvalArgs& a, const Common& c, std::ostream& out) {
  require(!a.suite.empty(), "suite");
  std::vector<std::string> suites;
  const auto& all = suite_names();
  for (const auto& s : split_list(a.suite)) {
    if (s == "all") {
      suites.insert(suites.end(), all.begin(), all.end());
    } else if (std::find(all.begin(), all.end(), s) != all.end()) {
      suites.push_back(s);
    } else {
      throw UsageError("unknown suite '" + s + "'");
    }
  }
  std::string format = "json";
  if (!a.out.empty()) {
    const std::string ext = std::filesystem::path(a.out).extension().string();
    if (ext == ".txt") {
      format = "text";
    } else if (ext == ".csv") {
      format = "csv";
    } else if (ext != ".json") {
      throw UsageError("--out must end in .json, .txt or .csv");
    }
  }
  EvalOptions opt;
  opt.pipeline = c.pipeline;
  opt.train = c.train;
  opt.train.seed = c.seed;
  opt.seed = c.seed;
  opt.threads = a.threads;
  if (a.data.empty() && a.n < 1) throw UsageError("--n must be at least 1");
  Evaluator ev(a.data.empty() ? eval_dataset(make_dataset(a.n, c.seed)) : load_eval_dataset(a.data), opt);
  std::vector<EvalReport> reports;
  for (const auto& s : suites) reports.push_back(ev.run(s));

  const nlohmann::json j = reports.size() == 1 ? nlohmann::json(reports.front()) : nlohmann::json(reports);
  if (!a.out.empty()) {
    std::string text;
    if (format == "json") {
      text = j.dump(2) + "\n";
    } else {
      for (const auto& r : reports) text += format == "csv" ? report_csv(r) : report_text(r);
    }
    write_text_file(a.out, text);
  }
  out << j.dump() << "\n";
  return kExitOk;
}

struct ServeArgs {
  std::string head, host = "0.0.0.0";
  int port = 8080;
  double idle_timeout = 120.0;
};

HttpServer* g_server = nullptr;

extern "C" void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve(const ServeArgs& a, const Common& c, std::ostream& out) {
  require(!a.head.empty(), "head");
  if (a.port < 0 || a.port > 65535) throw UsageError("--port must be in [0, 65535]");
  if (!(a.idle_timeout > 0)) throw UsageError("--idle-timeout must be positive");
  ServiceConfig sc;
  sc.idle_timeout = std::chrono::milliseconds(static_cast<long long>(a.idle_timeout * 1000.0));
  SessionService service(read_head(a.head), c.pipeline, sc);
  HttpServer server(service);
  const int port = server.bind(a.host, a.port);
  out << nlohmann::json{{"host", a.host}, {"port", port}}.dump() << "\n" << std::flush;
  spdlog::info("listening on {}:{}", a.host, port);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.listen();
  g_server = nullptr;
  return kExitOk;
}

void setup_logging(std::ostream& err) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  auto logger = std::make_shared<spdlog::logger>("flowgate", sink);
  logger->set_pattern("[%H:%M:%S.%e] [%l] %v");
  spdlog::level::level_enum level = spdlog::level::info;
  if (const char* env = std::getenv("FLOWGATE_LOG")) {
    level = spdlog::level::from_str(env);
    // from_str maps unknown names to off; only accept real level names.
    if (level == spdlog::level::off && std::string(env) != "off") level = spdlog::level::info;
  }
  logger->set_level(level);
  spdlog::set_default_logger(logger);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  setup_logging(err);
  CLI::App app{"flowgate: approaching-face liveness pipeline"};
  app.require_subcommand(1);

  Common common;
  std::vector<std::pair<std::unique_ptr<Flags>, CLI::Option*>> subs;
  auto add_sub = [&](const std::string& name, const std::string& desc) {
    CLI::App* sub = app.add_subcommand(name, desc);
    CLI::Option* seed = sub->add_option("--seed", common.seed, "random seed")->capture_default_str();
    sub->add_option("--config", common.config_path, "JSON config file; flags win");
    subs.emplace_back(std::make_unique<Flags>(sub, name), seed);
    return subs.back().first.get();
  };

  SimulateArgs sim;
  Flags* f_sim = add_sub("simulate", "render a synthetic dataset tree");
  f_sim->add("classes", sim.classes, "comma-separated classes (default: all)");
  f_sim->add("n", sim.n, "sequences per class");
  f_sim->add("out", sim.out, "output directory");

  FlowArgs flow;
  Flags* f_flow = add_sub("flow", "estimate f1 -> f3 optical flow");
  f_flow->add("f1", flow.f1, "first image");
  f_flow->add("f3", flow.f3, "third image");
  f_flow->add("annotations", flow.annotations, "JSON {f1:{box,keypoints}, f3:{...}}; enables preprocessing");
  f_flow->add("res", flow.res, "flow resolution");
  f_flow->add("iters", flow.iters, "refinement iterations per level");
  f_flow->add("out", flow.out, "output .flo file");

  ClassifyArgs cls;
  Flags* f_cls = add_sub("classify", "score one recorded sequence");
  f_cls->add("seq", cls.seq, "sequence directory");
  f_cls->add("head", cls.head, "trained head JSON");
  f_cls->add("mode", cls.mode, "expected stream mode: dual, flow_only, rgb_only");

  TrainArgs tr;
  Flags* f_tr = add_sub("train", "train a head on a dataset tree");
  f_tr->add("data", tr.data, "dataset directory");
  f_tr->add("out", tr.out, "output head JSON");
  f_tr->add("augment", tr.augment, "comma-separated: random_frame, multires, perspective");
  f_tr->add("mode", tr.mode, "dual, flow_only or rgb_only");
  f_tr->add("representation", tr.representation, "raw_flow, magnitude or clipped_magnitude");

  EvalArgs ev;
  Flags* f_ev = add_sub("eval", "run evaluation suites");
  f_ev->add("suite", ev.suite, "suite name(s), comma-separated, or all");
  f_ev->add("data", ev.data, "dataset directory (default: simulate --n per class)");
  f_ev->add("n", ev.n, "sequences per class when simulating");
  f_ev->add("out", ev.out, "report file: .json, .txt or .csv");
  f_ev->add("threads", ev.threads, "worker threads (0 = all cores)");

  ServeArgs sv;
  Flags* f_sv = add_sub("serve", "run the HTTP session service");
  f_sv->add("head", sv.head, "trained head JSON");
  f_sv->add("port", sv.port, "TCP port (0 = any free port)");
  f_sv->add("host", sv.host, "bind address");
  f_sv->add("idle-timeout", sv.idle_timeout, "session idle timeout in seconds");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    for (auto& [flags, seed_opt] : subs) {
      if (!flags->app()->parsed()) continue;
      load_config(common, seed_opt);
      flags->merge(common.config);
      common.pipeline.validate();
      const std::string& name = flags->app()->get_name();
      if (name == "simulate") return cmd_simulate(sim, common, out);
      if (name == "flow") return cmd_flow(flow, common, out);
      if (name == "classify") return cmd_classify(cls, common, out);
      if (name == "train") return cmd_train(tr, common, out);
      if (name == "eval") return cmd_eval(ev, common, out);
      if (name == "serve") return cmd_serve(sv, common, out);
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  err << "no subcommand\n";
  return kExitUsage;
}

}  // namespace flowgate
