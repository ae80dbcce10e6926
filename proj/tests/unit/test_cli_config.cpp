#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cmnet/config.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace cmnet;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string(CMNET_CLI_PATH) + " " + args + " --log-level warn >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

const std::string kSmall =
    " -s model.input_size=64 -s data.synth_size=64 -s data.synth_per_class=4 -s train.epochs=1"
    " -s train.batch_size=8";

}  // namespace

TEST_CASE("INI documents parse into the run configuration") {
  const RunConfig c = parse_run_config(
      "[model]\nalpha = 0.75\nsharing = halves_shared\nablation_row = f\n"
      "[train]\noptimizer = adaptive_moment\nlr = 0.0001\nschedule = halve_every\n"
      "schedule_every = 50\nseed = 42\n"
      "[data]\nsource = synthetic\nsynth_classes = 7\nmean = 0.5,0.5,0.5\n");
  CHECK(c.train.model.alpha == 0.75);
  CHECK(c.train.model.sharing == SharingPolicy::halves_shared);
  CHECK(c.train.model.ablation_row == 'f');
  CHECK(c.train.optimizer == OptimizerKind::adaptive_moment);
  CHECK(c.train.lr == 1e-4);
  CHECK(c.train.schedule.kind == ScheduleKind::halve_every);
  CHECK(c.train.schedule.every == 50);
  CHECK(c.train.seed == 42);
  CHECK(c.data.synth_classes == 7);
  CHECK(c.train.norm.mean[1] == 0.5f);
  // untouched keys keep their defaults
  CHECK(c.train.momentum == 0.9);
  CHECK(c.train.weight_decay == 1e-4);
}

TEST_CASE("rendered configs parse back to the same key values") {
  RunConfig c;
  c.train.model.alpha = 0.3;
  c.train.model.division.spatial_parts = 9;
  c.train.lr = 0.0123;
  c.train.norm.stddev = {0.1f, 0.2f, 0.3f};
  c.data.source = "folder";
  c.data.train_dir = "/tmp/x";
  const RunConfig back = parse_run_config(render_ini(c));
  CHECK(to_key_values(back) == to_key_values(c));
  CHECK(format_number(0.1) == "0.1");
  for (double v : {1e-4, 0.0123, 1.0 / 3.0, 12345678.9}) CHECK(std::stod(format_number(v)) == v);
}

TEST_CASE("config errors name the offending line and key") {
  const auto message = [](const std::string& text) {
    try {
      parse_run_config(text, "run.ini");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message("[model]\nalpha = 0.5\nbogus = 1\n").find("run.ini:3") != std::string::npos);
  CHECK(message("[model]\nalpha = 0.5\nbogus = 1\n").find("model.bogus") != std::string::npos);
  CHECK(message("[train]\n\nlr = fast\n").find("run.ini:3") != std::string::npos);
  CHECK(message("[optics]\nx = 1\n").find("optics") != std::string::npos);
  CHECK(message("[model\nalpha = 1\n").find("run.ini:1") != std::string::npos);
  CHECK(message("[model]\nablation_row = q\n").find("ablation") != std::string::npos);
  CHECK(message("[data]\nsource = cloud\n").find("data.source") != std::string::npos);
  CHECK(message("[data]\nmean = 1,2\n").find("data.mean") != std::string::npos);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.ini"), ConfigError);
}

TEST_CASE("overrides apply after the file") {
  RunConfig c = parse_run_config("[train]\nlr = 0.5\n");
  apply_overrides(c, {"train.lr=0.25", "model.use_cmem=false", "data.synth_size=96"});
  CHECK(c.train.lr == 0.25);
  CHECK_FALSE(c.train.model.use_cmem);
  CHECK(c.data.synth_size == 96);
  CHECK_THROWS_AS(apply_overrides(c, {"train.lr"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"train.nope=1"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"train.epochs=-3"}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"model.use_cmem=maybe"}), ConfigError);
}

TEST_CASE("cli exit codes and error reports") {
  const fs::path root = cmnet::testing::fresh_dir("cli_errors");
  CHECK(cli("") == 2);
  CHECK(cli("frobnicate") == 2);
  CHECK(cli("--help") == 0);

  const fs::path bad = root / "bad";
  CHECK(cli("train -o " + bad.string() + " -s train.lr=-1") == 2);
  const json err = read_json(bad / "error.json");
  CHECK(err["exit_code"] == 2);
  CHECK(err["message"].get<std::string>().find("lr") != std::string::npos);

  const fs::path missing = root / "missing";
  CHECK(cli("train -o " + missing.string() +
            " -s data.source=folder -s data.train_dir=/nonexistent/cmnet") == 1);
  CHECK(read_json(missing / "error.json")["exit_code"] == 1);
  CHECK(fs::exists(missing / "run.log"));
}

TEST_CASE("synth-data is deterministic") {
  const fs::path root = cmnet::testing::fresh_dir("cli_synth");
  for (const char* name : {"a", "b"})
    REQUIRE(cli("synth-data -o " + (root / name).string() +
                " --seed 4 --classes 3 --n 2 --size 32 --asymmetry 0.1") == 0);
  const std::string manifest = slurp(root / "a" / "manifest.csv");
  CHECK(manifest == slurp(root / "b" / "manifest.csv"));
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(root / "a" / "images")) {
    if (e.path().extension() != ".png") continue;
    ++files;
    const fs::path twin = root / "b" / fs::relative(e.path(), root / "a");
    CHECK(slurp(e.path()) == slurp(twin));
  }
  CHECK(files == 6);
}

TEST_CASE("split-preview writes two 112-wide halves") {
  const fs::path root = cmnet::testing::fresh_dir("cli_split");
  write_image(root / "face.png", Image(224, 224, 3, 0.3f));
  REQUIRE(cli("split-preview -o " + (root / "out").string() + " --image " +
              (root / "face.png").string() + " --mirror") == 0);
  const json m = read_json(root / "out" / "metrics.json");
  CHECK(m["left_width"] == 112);
  CHECK(m["right_width"] == 112);
  CHECK(m["mirrored"] == true);
  CHECK(read_image(root / "out" / "left.png")->width == 112);
}

TEST_CASE("train, evaluate and saliency from the command line") {
  const fs::path root = cmnet::testing::fresh_dir("cli_train");
  REQUIRE(cli("train -o " + (root / "t").string() + kSmall) == 0);
  CHECK(fs::exists(root / "t" / "checkpoint.cmnt"));
  CHECK(fs::exists(root / "t" / "history.csv"));
  CHECK(fs::exists(root / "t" / "effective_config.ini"));
  const json tm = read_json(root / "t" / "metrics.json");
  CHECK(tm.contains("history"));

  REQUIRE(cli("synth-data -o " + (root / "d").string() + " --seed 2 --classes 2 --n 3 --size 64") == 0);
  const std::string ck = (root / "t" / "checkpoint.cmnt").string();
  REQUIRE(cli("evaluate -o " + (root / "e").string() + " --checkpoint " + ck + " --data " +
              (root / "d" / "images").string()) == 0);
  const json em = read_json(root / "e" / "metrics.json");
  CHECK(em["accuracy"].get<double>() >= 0.0);
  CHECK(fs::exists(root / "e" / "confusion.csv"));
  CHECK(fs::exists(root / "e" / "confusion.png"));

  REQUIRE(cli("cross-evaluate -o " + (root / "x").string() + " --checkpoint " + ck + " --data " +
              (root / "d" / "images").string() + " --label-map 0:1,1:0") == 0);
  CHECK(cli("cross-evaluate -o " + (root / "y").string() + " --checkpoint " + ck + " --data " +
            (root / "d" / "images").string() + " --label-map 0:1") == 1);
  CHECK(read_json(root / "y" / "error.json")["kind"] == "mapping");

  const std::string img = (root / "d" / "images" / "class0" / "00000.png").string();
  REQUIRE(cli("saliency -o " + (root / "s").string() + " --checkpoint " + ck + " --image " + img) == 0);
  CHECK(read_image(root / "s" / "heatmap.png")->width == 64);
}

TEST_CASE("alpha sweep covers eleven values") {
  const fs::path root = cmnet::testing::fresh_dir("cli_sweep");
  REQUIRE(cli("alpha-sweep -o " + root.string() + kSmall + " -s data.synth_per_class=2") == 0);
  const json m = read_json(root / "metrics.json");
  REQUIRE(m["sweep"].size() == 11);
  CHECK(m["sweep"][0]["alpha"] == 0.0);
  CHECK(m["sweep"][10]["alpha"] == 1.0);
  std::ifstream csv(root / "alpha_sweep.csv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 12);
}

TEST_CASE("ablate and profile") {
  const fs::path root = cmnet::testing::fresh_dir("cli_ablate");
  REQUIRE(cli("ablate -o " + (root / "a").string() + kSmall +
              " -s model.input_size=96 -s data.synth_size=96 -s train.epochs=0 -s data.synth_per_class=1") == 0);
  const json m = read_json(root / "a" / "metrics.json");
  CHECK(m["rows"].size() == 9);
  REQUIRE(cli("ablate -o " + (root / "b").string() + kSmall + " --rows a,h") == 0);
  CHECK(read_json(root / "b" / "metrics.json")["rows"].size() == 2);
  CHECK(cli("ablate -o " + (root / "c").string() + kSmall + " --rows a,z") == 2);

  REQUIRE(cli("profile -o " + (root / "p").string() + " --input-size 64 --input-size 128") == 0);
  const json p = read_json(root / "p" / "metrics.json");
  REQUIRE(p["profiles"].size() == 2);
  CHECK(p["profiles"][0]["parameters"] == p["profiles"][1]["parameters"]);
  CHECK(p["profiles"][0]["flops"].get<double>() < p["profiles"][1]["flops"].get<double>());
}
