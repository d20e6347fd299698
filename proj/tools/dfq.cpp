// dfq: train a toy segmenter, synthesize calibration images, quantize,
// evaluate and compare. Talks to the library through its C interface only.
//
// Every option is a long flag. A flat key=value file passed with --config
// supplies values for flags not given on the command line. Each command
// writes its resolved configuration next to its main output as <stem>.cfg,
// which can be fed back through --config to repeat the run.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dfq/dfq.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(dfq_status s, const std::string& context) {
  if (s != DFQ_OK) throw RuntimeFailure(context + ": " + dfq_last_error());
}

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Model = std::unique_ptr<dfq_model, Deleter<dfq_model, dfq_model_free>>;
using Quantized = std::unique_ptr<dfq_quantized, Deleter<dfq_quantized, dfq_quantized_free>>;
using Dataset = std::unique_ptr<dfq_dataset, Deleter<dfq_dataset, dfq_dataset_free>>;
using Image = std::unique_ptr<dfq_image, Deleter<dfq_image, dfq_image_free>>;
using Synthesis = std::unique_ptr<dfq_synthesis, Deleter<dfq_synthesis, dfq_synthesis_free>>;
using Report = std::unique_ptr<dfq_report, Deleter<dfq_report, dfq_report_free>>;
using Table = std::unique_ptr<dfq_table, Deleter<dfq_table, dfq_table_free>>;

void print_warnings() {
  dfq_drain_warnings([](const char* m, void*) { std::cerr << "warning: " << m << '\n'; }, nullptr);
}

// ---- value formatting for the config echo ---------------------------------

std::string text(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
std::string text(const std::string& v) { return v; }
template <class T>
  requires std::is_integral_v<T>
std::string text(T v) {
  return std::to_string(v);
}
template <class T>
std::string text(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + text(v[i]);
  return out;
}

// Registers options on a subcommand and remembers how to print them back.
class Options {
 public:
  explicit Options(CLI::App* app) : app_(app) {}

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    auto* o = app_->add_option("--" + name, var, help)->capture_default_str();
    if constexpr (requires { var.push_back(var[0]); }) o->delimiter(',');
    echo_.emplace_back(name, [&var] { return text(var); });
    return o;
  }

  std::string echo() const {
    std::string out = "# dfq " + app_->get_name() + " resolved configuration\n";
    for (const auto& [k, f] : echo_) out += k + "=" + f() + "\n";
    return out;
  }

 private:
  CLI::App* app_;
  std::vector<std::pair<std::string, std::function<std::string()>>> echo_;
};

// ---- config file ----------------------------------------------------------

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open config file '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  for (int n = 1; std::getline(in, line); ++n) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
      throw UsageError(path + ":" + std::to_string(n) + ": expected key=value");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Long option names present on the command line, with or without "=value".
std::set<std::string> given_flags(const std::vector<std::string>& args) {
  std::set<std::string> out;
  for (const auto& a : args)
    if (a.size() > 2 && a.compare(0, 2, "--") == 0) out.insert(a.substr(2, a.find('=') - 2));
  return out;
}

// The subcommand's arguments with values from --config prepended for every
// key the command line does not set.
std::vector<std::string> merge_config(const std::vector<std::string>& args) {
  std::string config;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file argument");
      config = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    }
  }
  if (config.empty()) return args;
  const auto given = given_flags(args);
  std::vector<std::string> out;
  for (const auto& [k, v] : read_config(config)) {
    if (k == "config") throw UsageError(config + ": config files cannot include other config files");
    if (!given.count(k)) out.push_back("--" + k + "=" + v);
  }
  out.insert(out.end(), args.begin(), args.end());
  return out;
}

// ---- paths ----------------------------------------------------------------

std::string with_suffix(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / p.stem()).string() + suffix;
}

void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << contents) || !out.flush()) throw RuntimeFailure("cannot write '" + path + "'");
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw RuntimeFailure(what + " '" + path + "' does not exist");
}

// Exported 8-bit images are for viewing; the float tensor sits next to them.
std::string raw_image_for(const std::string& path) {
  const auto ext = fs::path(path).extension().string();
  if (ext == ".pgm" || ext == ".ppm") {
    const auto raw = fs::path(path).replace_extension(".dfqi").string();
    if (!fs::exists(raw))
      throw RuntimeFailure("calibration image '" + raw + "' (float data for '" + path + "') does not exist");
    return raw;
  }
  require_file(path, "calibration image");
  return path;
}

Image load_image(const std::string& path) {
  const auto raw = raw_image_for(path);
  dfq_image* img = nullptr;
  check(dfq_image_load(raw.c_str(), &img), "loading '" + raw + "'");
  return Image(img);
}

Model load_model(const std::string& path) {
  require_file(path, "model file");
  dfq_model* m = nullptr;
  check(dfq_model_load(path.c_str(), &m), "loading '" + path + "'");
  return Model(m);
}

// ---- enums ----------------------------------------------------------------

const std::map<std::string, dfq_calib_source> kSources{{"none", DFQ_SOURCE_NONE},
                                                       {"synthesized", DFQ_SOURCE_SYNTHESIZED},
                                                       {"gaussian", DFQ_SOURCE_GAUSSIAN},
                                                       {"real", DFQ_SOURCE_REAL}};
const std::map<std::string, dfq_norm_mode> kNormModes{{"reparameterized", DFQ_NORM_REPARAMETERIZED},
                                                      {"per-layer", DFQ_NORM_PER_LAYER},
                                                      {"per-channel", DFQ_NORM_PER_CHANNEL}};
const std::map<std::string, dfq_entropy_sign> kSigns{{"maximize", DFQ_ENTROPY_MAXIMIZE},
                                                     {"minimize", DFQ_ENTROPY_MINIMIZE}};
const std::map<std::string, dfq_entropy_estimator> kEstimators{
    {"resubstitution", DFQ_ESTIMATOR_RESUBSTITUTION}, {"leave-one-out", DFQ_ESTIMATOR_LEAVE_ONE_OUT}};

template <class E>
CLI::Option* restrict_to(CLI::Option* o, const std::map<std::string, E>& m) {
  std::vector<std::string> keys;
  for (const auto& [k, v] : m) keys.push_back(k);
  return o->check(CLI::IsMember(keys));
}

// ---- shared option groups -------------------------------------------------

struct SeedOption {
  std::uint64_t seed;
  void resolve() {
    if (const char* env = std::getenv("DFQ_SEED")) {
      const std::string s(env);
      std::uint64_t v = 0;
      const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw UsageError("DFQ_SEED must be an unsigned integer, got '" + s + "'");
      seed = v;
    }
  }
};

struct SynthOptions {
  std::string entropy_sign = "maximize";
  std::string estimator = "resubstitution";
  dfq_synth_config c{};

  SynthOptions() { dfq_synth_config_default(&c); }

  void add(Options& o) {
    o.add("alpha", c.alpha, "weight of the class term in the semantic loss");
    o.add("beta", c.beta, "weight of the patch-similarity entropy");
    o.add("eps1", c.eps1, "minimum peak score for a new pseudo label");
    o.add("eps2", c.eps2, "minimum pseudo label size in pixels (negative: max(1, 0.002 * H * W))");
    o.add("iters", c.total_iters, "optimization iterations")->check(CLI::NonNegativeNumber);
    o.add("evolve", c.evolve_iters, "iterations during which labels may grow")->check(CLI::NonNegativeNumber);
    o.add("lr", c.lr, "peak Adam learning rate");
    o.add("lr-min", c.lr_min, "final learning rate of the cosine schedule");
    o.add("adam-beta1", c.adam_beta1, "Adam first-moment decay");
    o.add("adam-beta2", c.adam_beta2, "Adam second-moment decay");
    restrict_to(o.add("entropy-sign", entropy_sign, "maximize or minimize the entropy term"), kSigns);
    restrict_to(o.add("estimator", estimator, "entropy estimator"), kEstimators);
  }

  // A shorter run than the default evolve window shrinks the window with it;
  // the echo records the shrunk value.
  dfq_synth_config resolved(std::uint64_t seed) {
    if (c.evolve_iters > c.total_iters) c.evolve_iters = c.total_iters;
    auto r = c;
    r.seed = seed;
    r.entropy_sign = kSigns.at(entropy_sign);
    r.estimator = kEstimators.at(estimator);
    return r;
  }
};

struct EvalData {
  std::uint64_t data_seed = 1000;
  std::size_t data_size = 100;
  std::string dataset_name = "toy";

  void add(Options& o) {
    o.add("data-seed", data_seed, "seed of the held-out evaluation set");
    o.add("data-size", data_size, "number of held-out images")->check(CLI::PositiveNumber);
    o.add("dataset", dataset_name, "dataset label written to the CSV");
  }

  Dataset make(const dfq_model_config& cfg) const {
    dfq_dataset* d = nullptr;
    check(dfq_dataset_generate(data_seed, data_size, &cfg, &d), "generating evaluation data");
    return Dataset(d);
  }
};

void write_echo(const std::string& out, const Options& o) {
  const auto path = with_suffix(out, ".cfg");
  write_file(path, o.echo());
}

// ---- commands -------------------------------------------------------------

struct Command {
  CLI::App* app;
  std::function<int()> run;
};

Command make_train(CLI::App& root) {
  auto* app = root.add_subcommand("train", "train the toy segmenter on generated data");
  auto o = std::make_shared<Options>(app);
  struct State {
    std::string out;
    SeedOption seed{42};
    std::size_t train_size = 200;
    dfq_model_config cfg{};
    dfq_train_options train{};
    EvalData eval;
  };
  auto s = std::make_shared<State>();
  dfq_model_config_default(&s->cfg);
  dfq_train_options_default(&s->train);

  o->add("out", s->out, "model file to write (.dfqm)")->required();
  o->add("seed", s->seed.seed, "seed for data, initialization and shuffling");
  o->add("train-size", s->train_size, "number of training images")->check(CLI::PositiveNumber);
  o->add("epochs", s->train.epochs, "training epochs")->check(CLI::NonNegativeNumber);
  o->add("train-lr", s->train.lr, "peak learning rate");
  o->add("batch-size", s->train.batch_size, "images per step")->check(CLI::PositiveNumber);
  o->add("image-size", s->cfg.image_size, "image side in pixels");
  o->add("patch-size", s->cfg.patch_size, "patch side in pixels");
  o->add("embed-dim", s->cfg.embed_dim, "token width");
  o->add("layers", s->cfg.num_layers, "transformer blocks");
  o->add("heads", s->cfg.num_heads, "attention heads");
  o->add("mlp-ratio", s->cfg.mlp_ratio, "MLP hidden width over token width");
  o->add("classes", s->cfg.num_classes, "classes including background");
  o->add("channels", s->cfg.channels, "image channels (1 or 3)");
  s->eval.add(*o);

  return {app, [s, o] {
            s->seed.resolve();
            s->train.seed = s->seed.seed;
            if (dfq_model_config_validate(&s->cfg) != DFQ_OK) throw UsageError(dfq_last_error());
            dfq_dataset* d = nullptr;
            check(dfq_dataset_generate(s->seed.seed, s->train_size, &s->cfg, &d), "generating training data");
            Dataset data(d);
            dfq_model* m0 = nullptr;
            check(dfq_model_create(&s->cfg, s->seed.seed, &m0), "creating model");
            Model init(m0);
            dfq_model* m1 = nullptr;
            double loss = 0.0;
            check(dfq_train(init.get(), data.get(), &s->train, &m1, &loss), "training");
            Model trained(m1);
            check(dfq_model_save(trained.get(), s->out.c_str()), "writing model");
            write_echo(s->out, *o);
            const auto held_out = s->eval.make(s->cfg);
            dfq_report* r = nullptr;
            check(dfq_evaluate_model(trained.get(), held_out.get(), &r), "evaluating");
            Report report(r);
            std::printf("trained %zu parameters, final loss %s\n", dfq_model_parameter_count(trained.get()),
                        text(loss).c_str());
            std::printf("held-out mean IoU %.4f over %zu masks\n", dfq_report_mean_iou(r), dfq_report_num_masks(r));
            return 0;
          }};
}

Command make_synth(CLI::App& root) {
  auto* app = root.add_subcommand("synth", "synthesize a calibration image from a trained model");
  auto o = std::make_shared<Options>(app);
  struct State {
    std::string model, out;
    SeedOption seed{0};
    SynthOptions synth;
  };
  auto s = std::make_shared<State>();
  o->add("model", s->model, "trained model (.dfqm)")->required();
  o->add("out", s->out, "image to write (.pgm for 1 channel, .ppm for 3)")->required();
  o->add("seed", s->seed.seed, "seed of the starting Gaussian image");
  s->synth.add(*o);

  return {app, [s, o] {
            s->seed.resolve();
            const auto model = load_model(s->model);
            const auto cfg = s->synth.resolved(s->seed.seed);
            const auto raw = with_suffix(s->out, ".dfqi");
            const auto overlay = with_suffix(s->out, ".overlay.ppm");
            const auto trace = with_suffix(s->out, ".trace.csv");
            dfq_synthesis* res = nullptr;
            dfq_image* last_good = nullptr;
            const dfq_status st = dfq_synthesize(model.get(), &cfg, &res, &last_good);
            if (st == DFQ_ERR_NUMERIC && last_good) {
              Image keep(last_good);
              const std::string msg = dfq_last_error();
              const auto path = with_suffix(s->out, ".last_good.dfqi");
              check(dfq_image_save(keep.get(), path.c_str()), "writing last good image");
              throw RuntimeFailure("synthesis: " + msg + " (last finite image saved to '" + path + "')");
            }
            check(st, "synthesis");
            Synthesis synth(res);
            dfq_image* img = nullptr;
            check(dfq_synthesis_image(res, &img), "synthesis");
            Image image(img);
            check(dfq_image_write_pnm(img, s->out.c_str()), "writing image");
            check(dfq_image_save(img, raw.c_str()), "writing image");
            check(dfq_synthesis_write_overlay(res, overlay.c_str()), "writing overlay");
            check(dfq_synthesis_write_trace(res, trace.c_str()), "writing trace");
            write_echo(s->out, *o);
            const std::size_t n = dfq_synthesis_num_masks(res);
            std::printf("%zu pseudo labels (%zu candidates rejected)\n", n, dfq_synthesis_rejected(res));
            for (std::size_t i = 0; i < n; ++i) {
              int cat = 0;
              std::size_t size = 0;
              double peak = 0.0;
              long birth = 0;
              check(dfq_synthesis_mask(res, i, &cat, &size, &peak, &birth), "synthesis");
              std::printf("  class %d, %zu px, peak %.3f, from iteration %ld\n", cat, size, peak, birth);
            }
            return 0;
          }};
}

struct BitsOptions {
  int bits = 4;
  int w_bits = 0;
  int a_bits = 0;
  void add(Options& o) {
    o.add("bits", bits, "bit width for weights and activations");
    o.add("w-bits", w_bits, "weight bit width (0: use --bits)");
    o.add("a-bits", a_bits, "activation bit width (0: use --bits)");
  }
  int w() const { return w_bits ? w_bits : bits; }
  int a() const { return a_bits ? a_bits : bits; }
};

Command make_quantize(CLI::App& root) {
  auto* app = root.add_subcommand("quantize", "calibrate and quantize a trained model");
  auto o = std::make_shared<Options>(app);
  struct State {
    std::string model, out, norm = "reparameterized";
    std::vector<std::string> calib;
    BitsOptions bits;
  };
  auto s = std::make_shared<State>();
  o->add("model", s->model, "trained model (.dfqm)")->required();
  o->add("calib", s->calib, "calibration images (.pgm/.ppm exports or .dfqi)")->required();
  o->add("out", s->out, "quantized model to write (.dfqm)")->required();
  s->bits.add(*o);
  restrict_to(o->add("norm", s->norm, "LayerNorm output handling"), kNormModes);

  return {app, [s, o] {
            const auto model = load_model(s->model);
            std::vector<Image> images;
            std::vector<const dfq_image*> ptrs;
            for (const auto& p : s->calib) {
              images.push_back(load_image(p));
              ptrs.push_back(images.back().get());
            }
            dfq_quantized* q = nullptr;
            check(dfq_quantize(model.get(), ptrs.data(), ptrs.size(), s->bits.w(), s->bits.a(),
                               kNormModes.at(s->norm), &q),
                  "quantizing");
            Quantized qm(q);
            check(dfq_quantized_save(q, s->out.c_str()), "writing quantized model");
            write_echo(s->out, *o);
            std::printf("%s\n", dfq_quantized_describe(q));
            return 0;
          }};
}

Command make_eval(CLI::App& root) {
  auto* app = root.add_subcommand("eval", "evaluate a full-precision or quantized model");
  auto o = std::make_shared<Options>(app);
  struct State {
    std::string model, out, masks, source = "none";
    SeedOption seed{0};
    EvalData eval;
  };
  auto s = std::make_shared<State>();
  o->add("model", s->model, "model or quantized model (.dfqm)")->required();
  o->add("out", s->out, "report CSV to write")->required();
  o->add("masks", s->masks, "optional per-mask IoU CSV");
  restrict_to(o->add("source", s->source, "calibration source recorded in the report"), kSources);
  o->add("seed", s->seed.seed, "calibration seed recorded in the report");
  s->eval.add(*o);

  return {app, [s, o] {
            s->seed.resolve();
            require_file(s->model, "model file");
            dfq_model* m = nullptr;
            dfq_quantized* q = nullptr;
            Model model;
            Quantized quant;
            dfq_model_config cfg{};
            const dfq_status st = dfq_model_load(s->model.c_str(), &m);
            if (st == DFQ_OK) {
              model.reset(m);
              dfq_model_get_config(m, &cfg);
            } else {
              const std::string first = dfq_last_error();
              if (st != DFQ_ERR_FORMAT || dfq_quantized_load(s->model.c_str(), &q) != DFQ_OK)
                throw RuntimeFailure("loading '" + s->model + "': " + first);
              quant.reset(q);
            }
            Report report;
            dfq_report* r = nullptr;
            if (model) {
              const auto data = s->eval.make(cfg);
              check(dfq_evaluate_model(model.get(), data.get(), &r), "evaluating");
            } else {
              dfq_quantized_get_config(q, &cfg);
              const auto data = s->eval.make(cfg);
              check(dfq_evaluate_quantized(q, data.get(), &r), "evaluating");
            }
            report.reset(r);
            dfq_report_set_origin(r, kSources.at(s->source), s->seed.seed);
            check(dfq_report_write_csv(r, s->eval.dataset_name.c_str(), s->out.c_str()), "writing report");
            if (!s->masks.empty()) check(dfq_report_write_masks_csv(r, s->masks.c_str()), "writing masks");
            write_echo(s->out, *o);
            std::printf("precision %s, mean IoU %.4f over %zu masks, %llu bytes, %llu BOPs\n",
                        dfq_report_precision(r), dfq_report_mean_iou(r), dfq_report_num_masks(r),
                        static_cast<unsigned long long>(dfq_report_size_bytes(r)),
                        static_cast<unsigned long long>(dfq_report_bops(r)));
            return 0;
          }};
}

Command make_compare(CLI::App& root) {
  auto* app = root.add_subcommand("compare", "compare calibration sources across bit widths");
  auto o = std::make_shared<Options>(app);
  struct State {
    std::string model, out, norm = "reparameterized";
    std::vector<std::string> sources{"synthesized", "gaussian", "real"};
    std::vector<int> bits{4};
    std::vector<std::string> calib;
    std::size_t num_calib = 1;
    std::uint64_t real_offset = 500;
    SeedOption seed{0};
    SynthOptions synth;
    EvalData eval;
  };
  auto s = std::make_shared<State>();
  o->add("model", s->model, "trained model (.dfqm)")->required();
  o->add("out", s->out, "comparison CSV to write")->required();
  o->add("sources", s->sources, "calibration sources, comma separated")
      ->check(CLI::IsMember({"synthesized", "gaussian", "real"}));
  o->add("bits", s->bits, "bit widths, comma separated (weights and activations alike)");
  o->add("calib", s->calib, "synthesized images to use instead of running synthesis");
  o->add("num-calib", s->num_calib, "calibration images per source")->check(CLI::PositiveNumber);
  o->add("real-offset", s->real_offset, "real images come from the generator at seed + this");
  o->add("seed", s->seed.seed, "seed of the synthesized and Gaussian images");
  restrict_to(o->add("norm", s->norm, "LayerNorm output handling"), kNormModes);
  s->synth.add(*o);
  s->eval.add(*o);

  return {app, [s, o] {
            s->seed.resolve();
            if (kNormModes.at(s->norm) != DFQ_NORM_REPARAMETERIZED)
              throw UsageError("compare supports only --norm reparameterized");
            const auto model = load_model(s->model);
            dfq_model_config mc;
            dfq_model_get_config(model.get(), &mc);
            std::vector<Image> owned;
            std::vector<std::vector<const dfq_image*>> ptrs;
            std::vector<dfq_calib_set> sets;
            for (const auto& name : s->sources) {
              std::vector<const dfq_image*> imgs;
              std::vector<Image> got;
              if (name == "synthesized" && !s->calib.empty()) {
                for (const auto& p : s->calib) got.push_back(load_image(p));
              } else if (name == "synthesized") {
                for (std::size_t i = 0; i < s->num_calib; ++i) {
                  const auto cfg = s->synth.resolved(s->seed.seed + i);
                  dfq_synthesis* r = nullptr;
                  check(dfq_synthesize(model.get(), &cfg, &r, nullptr), "synthesis");
                  Synthesis keep(r);
                  dfq_image* g = nullptr;
                  check(dfq_synthesis_image(r, &g), "synthesis");
                  got.emplace_back(g);
                }
              } else if (name == "gaussian") {
                for (std::size_t i = 0; i < s->num_calib; ++i) {
                  dfq_image* g = nullptr;
                  check(dfq_image_gaussian(s->seed.seed + i, &mc, &g), "creating image");
                  got.emplace_back(g);
                }
              } else {
                dfq_dataset* d = nullptr;
                check(dfq_dataset_generate(s->seed.seed + s->real_offset, s->num_calib, &mc, &d),
                      "generating real calibration data");
                Dataset data(d);
                for (std::size_t i = 0; i < s->num_calib; ++i) {
                  dfq_image* g = nullptr;
                  check(dfq_dataset_image(d, i, &g), "reading real calibration data");
                  got.emplace_back(g);
                }
              }
              for (auto& g : got) {
                imgs.push_back(g.get());
                owned.push_back(std::move(g));
              }
              ptrs.push_back(std::move(imgs));
              sets.push_back({kSources.at(name), nullptr, 0});
            }
            for (std::size_t i = 0; i < sets.size(); ++i) {
              sets[i].images = ptrs[i].data();
              sets[i].count = ptrs[i].size();
            }
            const auto data = s->eval.make(mc);
            dfq_table* t = nullptr;
            check(dfq_compare(model.get(), data.get(), sets.data(), sets.size(), s->bits.data(), s->bits.size(),
                              s->eval.dataset_name.c_str(), s->seed.seed, &t),
                  "comparing");
            Table table(t);
            check(dfq_table_write_csv(t, s->out.c_str()), "writing comparison");
            write_echo(s->out, *o);
            for (std::size_t i = 0; i < dfq_table_rows(t); ++i) {
              dfq_calib_source src;
              int w = 0, a = 0;
              double iou = 0.0;
              check(dfq_table_row(t, i, &src, &w, &a, &iou), "reading comparison");
              std::string name = "fp";
              for (const auto& [k, v] : kSources)
                if (v == src && i > 0) name = k;
              std::printf("%-12s W%d/A%d  mean IoU %.4f\n", name.c_str(), w, a, iou);
            }
            return 0;
          }};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App root("data-free quantization toolkit for a toy ViT segmenter", "dfq");
  root.require_subcommand(1);
  root.set_version_flag("--version", std::string(dfq_version()));

  std::vector<Command> commands{make_train(root), make_synth(root), make_quantize(root), make_eval(root),
                                make_compare(root)};
  std::string unused_config;
  for (auto& c : commands) c.app->add_option("--config", unused_config, "key=value file of option defaults");

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    // argv[0] is the subcommand; the config file applies to its options.
    if (!args.empty() && args[0].rfind("-", 0) != 0) {
      std::vector<std::string> rest(args.begin() + 1, args.end());
      rest = merge_config(rest);
      rest.insert(rest.begin(), args[0]);
      args = std::move(rest);
    }
    std::reverse(args.begin(), args.end());  // CLI11 consumes the vector from the back
    root.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return root.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return root.exit(e);
  } catch (const CLI::ParseError& e) {
    root.exit(e);
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "dfq: " << e.what() << '\n';
    return kExitUsage;
  } catch (const RuntimeFailure& e) {
    std::cerr << "dfq: " << e.what() << '\n';
    return kExitRuntime;
  }

  for (auto& c : commands) {
    if (!c.app->parsed()) continue;
    try {
      const int rc = c.run();
      print_warnings();
      return rc;
    } catch (const UsageError& e) {
      std::cerr << "dfq " << c.app->get_name() << ": " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::exception& e) {
      print_warnings();
      std::cerr << "dfq " << c.app->get_name() << ": " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  return kExitUsage;
}
