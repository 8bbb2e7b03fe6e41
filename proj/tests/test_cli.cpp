#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "stressvit/cli.hpp"
#include "stressvit/data.hpp"
#include "stressvit/feature_io.hpp"
#include "test_util.hpp"

using namespace stressvit;
using namespace stressvit::cli;

namespace {

struct Run {
  int code;
  std::string err;
};

// Runs the built executable with stderr captured to a file.
Run run_cli(const std::string& args, const std::filesystem::path& work) {
  const auto err = work / "stderr.txt";
  const std::string cmd = std::string("\"") + STRESSVIT_CLI + "\" " + args + " > /dev/null 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  std::ifstream f(err);
  std::stringstream ss;
  ss << f.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream f(p);
  return nlohmann::json::parse(f);
}

int usage_code(const std::vector<std::string>& args) {
  try {
    parse_cli(args);
  } catch (const UsageError& e) {
    return e.exit_code();
  }
  return -1;
}

}  // namespace

TEST_CASE("argument parsing") {
  const Command synth = parse_cli({"synth", "--out", "data/", "--images", "8", "--seed", "7"});
  REQUIRE(std::holds_alternative<SynthCommand>(synth));
  CHECK(std::get<SynthCommand>(synth).images == 8);
  CHECK(std::get<SynthCommand>(synth).seed == 7);
  CHECK(std::get<SynthCommand>(synth).out == "data/");

  const Command train = parse_cli({"train", "--scenario", "scenarios/s8.json"});
  REQUIRE(std::holds_alternative<TrainCommand>(train));
  CHECK(std::get<TrainCommand>(train).scenario == "scenarios/s8.json");
  CHECK_FALSE(std::get<TrainCommand>(train).seed.has_value());

  CHECK(usage_code({"train", "--bogus"}) == 2);
  CHECK(usage_code({"train", "--scenario", "x.json", "--bogus", "1"}) == 2);
  CHECK(usage_code({"nonsense"}) == 2);
  CHECK(usage_code({}) == 2);
  CHECK(usage_code({"--help"}) == 0);
  CHECK(usage_code({"eval", "--checkpoint", "a"}) == 2);
  CHECK(usage_code({"kfold", "--pipeline", "svm", "--out", "o", "--features", "f.csv", "--data", "d"}) == 2);
  CHECK(usage_code({"kfold", "--pipeline", "svm", "--out", "o"}) == 2);
  CHECK(usage_code({"kfold", "--pipeline", "vit", "--out", "o", "--data", "d"}) == 2);
  CHECK(usage_code({"svm-train", "--features", "f", "--out", "m", "--kernel", "poly"}) == 2);

  const Command kf = parse_cli({"kfold", "--pipeline", "svm", "--features", "f.csv", "--out", "o", "--k", "4", "--C",
                                "2.5", "--kernel", "linear"});
  const auto& k = std::get<KfoldCommand>(kf);
  CHECK(k.k == 4);
  CHECK(k.svm.C == 2.5);
  CHECK(k.svm.kernel == "linear");
}

TEST_CASE("content hashes") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
  CHECK(hash_hex(0xabcULL) == "0000000000000abc");
}

TEST_CASE("end-to-end command line workflow") {
  const auto work = testutil::temp_dir("cli");
  const auto data = work / "data", held = work / "held";
  {
    std::ofstream s(work / "scenario.json");
    s << R"({"model": "TINY", "trainable_blocks": "all", "optimizer": "adamw", "lr": 0.001, "patience": 15,
             "factor": 0.2, "batch_size": 16, "attn_dropout": 0, "mlp_dropout": 0, "max_epochs": 60, "seed": 3})";
  }
  auto ok = [&](const std::string& args) {
    const Run r = run_cli(args, work);
    INFO(args << "\n" << r.err);
    CHECK(r.code == 0);
    return r;
  };

  ok("synth --out " + data.string() + " --images 6 --healthy 3 --stressed 3 --size 96 --seed 1");
  ok("synth --out " + held.string() + " --images 3 --healthy 3 --stressed 3 --size 96 --seed 2 --format csv");
  CHECK(std::filesystem::exists(data / "images" / "img_000.ppm"));
  CHECK(std::filesystem::exists(data / "annotations" / "img_005.xml"));
  CHECK(std::filesystem::exists(held / "annotations.csv"));
  CHECK(load_dataset(held).size() == 3);

  const auto manifest = read_json(data / "manifest.json");
  CHECK(manifest["command"] == "synth");
  CHECK(manifest["outputs"].size() == 12);
  for (const auto& o : manifest["outputs"]) CHECK(o["fnv1a64"].get<std::string>().size() == 16);

  ok("train --scenario " + (work / "scenario.json").string() + " --data " + data.string() + " --out " +
     (work / "run").string());
  CHECK(std::filesystem::exists(work / "run" / "model.ckpt"));
  const auto log = read_json(work / "run" / "train_log.json");
  CHECK(log["epochs"].size() >= 1);

  const std::string ckpt = (work / "run" / "model.ckpt").string();
  ok("eval --checkpoint " + ckpt + " --data " + held.string() + " --out " + (work / "eval").string());
  const auto report = read_json(work / "eval" / "eval_report.json");
  CHECK(report["samples"] == 18);
  MESSAGE("held-out accuracy after 60 epochs: " << report["accuracy"]);
  CHECK(std::filesystem::exists(work / "eval" / "roc.csv"));

  ok("extract-features --checkpoint " + ckpt + " --data " + data.string() + " --out " + (work / "f.csv").string());
  ok("extract-features --checkpoint " + ckpt + " --data " + held.string() + " --out " + (work / "h.csv").string());
  const FeatureSet fs = read_features(work / "f.csv");
  CHECK(fs.x.size() == 36);
  CHECK(fs.x[0].size() == 32);
  CHECK(std::filesystem::exists(work / "f.csv.manifest.json"));

  ok("svm-train --features " + (work / "f.csv").string() + " --out " + (work / "svm.json").string());
  ok("svm-eval --model " + (work / "svm.json").string() + " --features " + (work / "h.csv").string() + " --out " +
     (work / "svm_eval").string());
  CHECK(read_json(work / "svm_eval" / "eval_report.json")["samples"] == 18);

  ok("attn --checkpoint " + ckpt + " --image " + (held / "images" / "img_000.ppm").string() + " --out " +
     (work / "attn").string());
  CHECK(std::filesystem::exists(work / "attn" / "attn_layer_00.ppm"));
  CHECK(std::filesystem::exists(work / "attn" / "attn_layer_01.ppm"));
  CHECK_FALSE(std::filesystem::exists(work / "attn" / "attn_layer_02.ppm"));
  CHECK(read_json(work / "attn" / "manifest.json")["outputs"].size() == 2);

  ok("kfold --pipeline svm --features " + (work / "f.csv").string() + " --out " + (work / "kf").string());
  const auto kf = read_json(work / "kf" / "eval_report.json");
  CHECK(kf["folds"].size() == 5);
  CHECK(kf["mean_roc"].size() == 101);
  CHECK(std::filesystem::exists(work / "kf" / "mean_roc.csv"));
}

TEST_CASE("failures are reported as json with exit code 1") {
  const auto work = testutil::temp_dir("cli_fail");
  const Run r = run_cli("eval --checkpoint " + (work / "none.ckpt").string() + " --data " + work.string() +
                            " --out " + (work / "o").string(),
                        work);
  CHECK(r.code == 1);
  const auto j = nlohmann::json::parse(r.err);
  CHECK(j["error"]["message"].get<std::string>().find("none.ckpt") != std::string::npos);

  const Run bad = run_cli("train --bogus", work);
  CHECK(bad.code == 2);
}
