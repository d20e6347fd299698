// Drives the dfq executable as a user would and checks files and exit codes.
#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"
#include "dfq/dfq.h"

namespace fs = std::filesystem;

namespace {

const fs::path& workdir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "dfq_cli_tests";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return (workdir() / name).string(); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Run {
  int code;
  std::string output;  // stdout and stderr together
};

Run dfq(const std::string& args, const std::string& env = "") {
  const std::string log = at("last.log");
  const std::string cmd = env + (env.empty() ? "" : " ") + "'" + DFQ_CLI_PATH + "' " + args + " > '" + log + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

const std::string kTiny =
    " --image-size 16 --patch-size 4 --embed-dim 8 --layers 2 --heads 2 --classes 3";

// A small trained model shared by the tests below.
const std::string& model() {
  static const std::string path = [] {
    const std::string p = at("tiny.dfqm");
    const Run r = dfq("train --out " + p + kTiny + " --train-size 16 --epochs 2");
    REQUIRE_MESSAGE(r.code == 0, r.output);
    return p;
  }();
  return path;
}

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(dfq("").code == 2);
  CHECK(dfq("train").code == 2);
  CHECK(dfq("synth --out " + at("x.pgm")).code == 2);
  CHECK(dfq("quantize --model m --out q").code == 2);
  CHECK(dfq("eval --model m").code == 2);
  CHECK(dfq("compare --model m").code == 2);
  CHECK(dfq("train --out x --no-such-flag").code == 2);
  CHECK(dfq("train --out x --epochs -1").code == 2);
  CHECK(dfq("synth --model m --out x --entropy-sign sideways").code == 2);
  CHECK(dfq("frobnicate").code == 2);
  CHECK(dfq("--help").code == 0);
  CHECK(dfq("train --help").code == 0);
}

TEST_CASE("train writes the model and its configuration") {
  const Run r = dfq("train --seed 42 --out " + at("a.dfqm") + kTiny + " --train-size 16 --epochs 2");
  REQUIRE_MESSAGE(r.code == 0, r.output);
  CHECK(contains(r.output, "mean IoU"));
  CHECK(fs::exists(at("a.dfqm")));
  const std::string cfg = slurp(at("a.cfg"));
  CHECK(contains(cfg, "seed=42\n"));
  CHECK(contains(cfg, "image-size=16\n"));
  REQUIRE(dfq("train --seed 42 --out " + at("b.dfqm") + kTiny + " --train-size 16 --epochs 2").code == 0);
  CHECK(slurp(at("a.dfqm")) == slurp(at("b.dfqm")));
}

TEST_CASE("runtime failures exit with 1") {
  CHECK(dfq("train --out /nonexistent/dir/m.dfqm" + kTiny + " --train-size 2 --epochs 0").code == 1);
  const Run missing = dfq("synth --model " + at("absent.dfqm") + " --out " + at("x.pgm"));
  CHECK(missing.code == 1);
  CHECK(contains(missing.output, "absent.dfqm"));
  const Run q = dfq("quantize --model " + model() + " --calib " + at("nothing.pgm") + " --out " + at("q.dfqm"));
  CHECK(q.code == 1);
  CHECK(contains(q.output, "nothing.dfqi"));
  const Run e = dfq("eval --model " + at("absent.dfqm") + " --out " + at("e.csv"));
  CHECK(e.code == 1);
  CHECK(contains(e.output, "absent.dfqm"));
  const Run c = dfq("compare --model " + model() + " --out " + at("c.csv") + " --calib " + at("none.pgm"));
  CHECK(c.code == 1);
  CHECK(contains(c.output, "none.dfqi"));
}

TEST_CASE("synth defaults, outputs and the PGM header") {
  const Run r = dfq("synth --model " + model() + " --out " + at("s.pgm"));
  REQUIRE_MESSAGE(r.code == 0, r.output);
  const std::string cfg = slurp(at("s.cfg"));
  for (const char* kv : {"alpha=0.5\n", "beta=0.05\n", "iters=1500\n", "evolve=500\n", "seed=0\n"})
    CHECK(contains(cfg, kv));
  CHECK(slurp(at("s.pgm")).rfind("P5\n16 16\n255\n", 0) == 0);
  CHECK(slurp(at("s.pgm")).size() == 13 + 256);
  CHECK(slurp(at("s.overlay.ppm")).rfind("P6\n16 16\n255\n", 0) == 0);
  const std::string trace = slurp(at("s.trace.csv"));
  CHECK(trace.rfind("iteration,l_sm,l_dm,l_is,num_masks\n", 0) == 0);
  CHECK(std::count(trace.begin(), trace.end(), '\n') == 1501);
  CHECK(fs::file_size(at("s.dfqi")) == 20 + 8 * 256);

  // Re-running from the echoed configuration reproduces every output.
  const std::string image = slurp(at("s.dfqi")), pgm = slurp(at("s.pgm"));
  REQUIRE(dfq("synth --config " + at("s.cfg")).code == 0);
  CHECK(slurp(at("s.dfqi")) == image);
  CHECK(slurp(at("s.pgm")) == pgm);
  CHECK(slurp(at("s.trace.csv")) == trace);
  CHECK(slurp(at("s.cfg")) == cfg);
}

TEST_CASE("zero iterations write the starting Gaussian image") {
  REQUIRE(dfq("synth --iters 0 --seed 3 --model " + model() + " --out " + at("z.pgm")).code == 0);
  CHECK(contains(slurp(at("z.cfg")), "iters=0\n"));
  CHECK(contains(slurp(at("z.cfg")), "evolve=0\n"));
  dfq_model_config c;
  dfq_model_config_default(&c);
  c.image_size = 16;
  c.patch_size = 4;
  dfq_image* g = nullptr;
  REQUIRE(dfq_image_gaussian(3, &c, &g) == DFQ_OK);
  dfq_image* written = nullptr;
  REQUIRE(dfq_image_load(at("z.dfqi").c_str(), &written) == DFQ_OK);
  CHECK(std::equal(dfq_image_data(g), dfq_image_data(g) + 256, dfq_image_data(written)));
  dfq_image_free(g);
  dfq_image_free(written);
  CHECK(slurp(at("z.trace.csv")) == "iteration,l_sm,l_dm,l_is,num_masks\n");
}

TEST_CASE("seed override from the environment") {
  REQUIRE(dfq("synth --iters 0 --model " + model() + " --out " + at("env.pgm"), "DFQ_SEED=7").code == 0);
  CHECK(contains(slurp(at("env.cfg")), "seed=7\n"));
  CHECK(dfq("synth --iters 0 --model " + model() + " --out " + at("env.pgm"), "DFQ_SEED=x").code == 2);
}

TEST_CASE("config files") {
  const std::string cfg = at("flags.cfg");
  std::ofstream(cfg) << "# comment\niters = 4\nevolve=2\nseed=9\n";
  REQUIRE(dfq("synth --config " + cfg + " --seed 5 --model " + model() + " --out " + at("f.pgm")).code == 0);
  const std::string echo = slurp(at("f.cfg"));
  CHECK(contains(echo, "iters=4\n"));
  CHECK(contains(echo, "seed=5\n"));  // flags win over the file
  std::ofstream(cfg) << "this line has no equals sign\n";
  CHECK(dfq("synth --config " + cfg + " --model " + model() + " --out " + at("f.pgm")).code == 2);
  CHECK(dfq("synth --config " + at("no_such.cfg") + " --model " + model() + " --out " + at("f.pgm")).code == 1);
}

TEST_CASE("quantize, eval and compare") {
  REQUIRE(dfq("synth --iters 20 --evolve 10 --model " + model() + " --out " + at("c.pgm")).code == 0);
  const Run q = dfq("quantize --bits 4 --calib " + at("c.pgm") + " --model " + model() + " --out " + at("q.dfqm"));
  REQUIRE_MESSAGE(q.code == 0, q.output);
  CHECK(contains(q.output, "W4/A4, weights per-channel, activations per-layer"));
  const Run mixed = dfq("quantize --w-bits 8 --a-bits 4 --calib " + at("c.dfqi") + " --model " + model() +
                        " --out " + at("q84.dfqm"));
  CHECK(contains(mixed.output, "W8/A4"));

  REQUIRE(dfq("eval --data-size 4 --model " + model() + " --out " + at("fp.csv")).code == 0);
  CHECK(contains(slurp(at("fp.csv")), "\n32/32,32,32,fp,fp,"));
  REQUIRE(dfq("eval --data-size 4 --source synthesized --model " + at("q.dfqm") + " --out " + at("q.csv") +
              " --masks " + at("masks.csv")).code == 0);
  CHECK(contains(slurp(at("q.csv")), "\n4/4,4,4,per-channel,per-layer,synthesized,"));
  CHECK(slurp(at("masks.csv")).rfind("image,class,iou\n", 0) == 0);

  const Run c = dfq("compare --sources synthesized,gaussian,real --bits 4,8 --calib " + at("c.pgm") +
                    " --data-size 4 --model " + model() + " --out " + at("cmp.csv"));
  REQUIRE_MESSAGE(c.code == 0, c.output);
  const std::string csv = slurp(at("cmp.csv"));
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 2 + 1);
  CHECK(contains(csv, "\nfp,none,32,32,"));
  REQUIRE(dfq("compare --sources gaussian --bits 4 --data-size 4 --model " + model() + " --out " + at("cmp1.csv"))
              .code == 0);
  const std::string one = slurp(at("cmp1.csv"));
  CHECK(std::count(one.begin(), one.end(), '\n') == 1 + 1 + 1);
  CHECK(dfq("compare --sources gaussian --norm per-layer --model " + model() + " --out " + at("x.csv")).code == 2);
}
