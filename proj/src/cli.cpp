#include "stressvit/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "stressvit/attention_maps.hpp"
#include "stressvit/checkpoint.hpp"
#include "stressvit/feature_io.hpp"
#include "stressvit/metrics.hpp"
#include "stressvit/svm.hpp"
#include "stressvit/train.hpp"

namespace stressvit::cli {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t default_seed() {
  const char* env = std::getenv("STRESSVIT_SEED");
  if (!env || !*env) return 0;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(env, &used);
    if (used != std::strlen(env)) throw std::invalid_argument(env);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("STRESSVIT_SEED is not an unsigned integer: '") + env + "'");
  }
}

Command parse_cli(const std::vector<std::string>& args) {
  const std::uint64_t env_seed = default_seed();
  CLI::App app{"Crop stress detection with vision transformers and SVMs", "stressvit"};
  app.require_subcommand(1);

  SynthCommand synth;
  synth.seed = env_seed;
  std::string synth_format = "xml";
  auto* s = app.add_subcommand("synth", "Generate a synthetic annotated field-image dataset");
  s->add_option("--out", synth.out, "Output dataset directory")->required();
  s->add_option("--images", synth.images, "Number of images")->check(CLI::PositiveNumber);
  s->add_option("--seed", synth.seed, "Base seed");
  s->add_option("--healthy", synth.healthy, "Healthy regions per image");
  s->add_option("--stressed", synth.stressed, "Stressed regions per image");
  s->add_option("--size", synth.size, "Image width and height in pixels")->check(CLI::PositiveNumber);
  s->add_option("--format", synth_format, "Annotation format")->check(CLI::IsMember({"xml", "csv"}));

  TrainCommand train;
  std::uint64_t train_seed = 0;
  std::string train_init;
  auto* t = app.add_subcommand("train", "Fine-tune a ViT from a scenario file");
  t->add_option("--scenario", train.scenario, "Scenario JSON")->required();
  t->add_option("--data", train.data, "Dataset directory");
  t->add_option("--out", train.out, "Output directory");
  t->add_option("--init", train_init, "Starting checkpoint (random init when omitted)");
  t->add_option("--val-fraction", train.val_fraction, "Validation share of the windows")->check(CLI::Range(0.01, 0.99));
  auto* t_seed = t->add_option("--seed", train_seed, "Override the scenario seed");

  EvalCommand eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--checkpoint", eval.checkpoint, "Model checkpoint")->required();
  e->add_option("--data", eval.data, "Dataset directory")->required();
  e->add_option("--out", eval.out, "Output directory")->required();
  e->add_option("--threshold", eval.threshold, "Stressed-score threshold")->check(CLI::Range(0.0, 1.0));

  ExtractFeaturesCommand extract;
  auto* x = app.add_subcommand("extract-features", "Write pooled ViT features of every window as CSV");
  x->add_option("--checkpoint", extract.checkpoint, "Model checkpoint")->required();
  x->add_option("--data", extract.data, "Dataset directory")->required();
  x->add_option("--out", extract.out, "Output CSV")->required();

  auto add_svm_flags = [](CLI::App* sub, SvmOptions& o) {
    sub->add_option("--C", o.C, "Soft-margin penalty")->check(CLI::PositiveNumber);
    sub->add_option("--kernel", o.kernel, "Kernel")->check(CLI::IsMember({"rbf", "linear"}));
    sub->add_option("--gamma", o.gamma, "RBF width (default: 1 / (d * Var(X)))")->check(CLI::PositiveNumber);
    sub->add_option("--tol", o.tol, "KKT tolerance")->check(CLI::PositiveNumber);
  };

  SvmTrainCommand svm_train;
  auto* st = app.add_subcommand("svm-train", "Train an SVM on a feature CSV");
  st->add_option("--features", svm_train.features, "Feature CSV")->required();
  st->add_option("--out", svm_train.out, "Output model JSON")->required();
  add_svm_flags(st, svm_train.svm);

  SvmEvalCommand svm_eval;
  auto* se = app.add_subcommand("svm-eval", "Evaluate an SVM on a feature CSV");
  se->add_option("--model", svm_eval.model, "SVM model JSON")->required();
  se->add_option("--features", svm_eval.features, "Feature CSV")->required();
  se->add_option("--out", svm_eval.out, "Output directory")->required();

  AttnCommand attn;
  auto* a = app.add_subcommand("attn", "Render per-layer attention overlays for one image");
  a->add_option("--checkpoint", attn.checkpoint, "Model checkpoint")->required();
  a->add_option("--image", attn.image, "Input PPM image")->required();
  a->add_option("--out", attn.out, "Output directory")->required();
  a->add_option("--alpha", attn.alpha, "Overlay opacity")->check(CLI::Range(0.0, 1.0));

  KfoldCommand kfold;
  kfold.seed = env_seed;
  std::string kf_data, kf_features, kf_checkpoint, kf_scenario;
  auto* k = app.add_subcommand("kfold", "Cross-validated evaluation of the ViT or ViT+SVM pipeline");
  k->add_option("--pipeline", kfold.pipeline, "svm or vit")->required()->check(CLI::IsMember({"svm", "vit"}));
  auto* k_data = k->add_option("--data", kf_data, "Dataset directory");
  auto* k_feat = k->add_option("--features", kf_features, "Precomputed feature CSV (svm pipeline)");
  k->add_option("--checkpoint", kf_checkpoint, "Feature extractor or starting checkpoint");
  k->add_option("--scenario", kf_scenario, "Scenario JSON (vit pipeline)");
  k->add_option("--out", kfold.out, "Output directory")->required();
  k->add_option("--k", kfold.k, "Number of folds")->check(CLI::Range(2, 1000));
  k->add_option("--seed", kfold.seed, "Fold seed");
  k->add_option("--val-fraction", kfold.val_fraction, "Validation share inside each training part")
      ->check(CLI::Range(0.01, 0.99));
  add_svm_flags(k, kfold.svm);
  k_feat->excludes(k_data);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::string help = app.help();
    for (auto* sub : app.get_subcommands()) help = sub->help();
    throw UsageError(help, 0);
  } catch (const CLI::ParseError& err) {
    throw UsageError(err.what());
  }

  if (s->parsed()) {
    synth.format = synth_format == "csv" ? AnnotationFormat::csv : AnnotationFormat::voc_xml;
    return synth;
  }
  if (t->parsed()) {
    if (!train_init.empty()) train.init = train_init;
    if (t_seed->count() > 0) train.seed = train_seed;
    else if (std::getenv("STRESSVIT_SEED")) train.seed = env_seed;
    return train;
  }
  if (e->parsed()) return eval;
  if (x->parsed()) return extract;
  if (st->parsed()) return svm_train;
  if (se->parsed()) return svm_eval;
  if (a->parsed()) return attn;

  if (!kf_data.empty()) kfold.data = kf_data;
  if (!kf_features.empty()) kfold.features = kf_features;
  if (!kf_checkpoint.empty()) kfold.checkpoint = kf_checkpoint;
  if (!kf_scenario.empty()) kfold.scenario = kf_scenario;
  if (kfold.pipeline == "svm") {
    if (kfold.scenario) throw UsageError("--scenario applies to the vit pipeline only");
    if (kfold.features && kfold.checkpoint) throw UsageError("--features and --checkpoint are mutually exclusive");
    if (!kfold.features && !(kfold.data && kfold.checkpoint)) {
      throw UsageError("svm pipeline needs --features, or --data with --checkpoint");
    }
  } else {
    if (kfold.features) throw UsageError("--features applies to the svm pipeline only");
    if (!kfold.data || !kfold.scenario) throw UsageError("vit pipeline needs --data and --scenario");
  }
  return kfold;
}

namespace {

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!f) throw std::runtime_error("short write to " + p.string());
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Directories hash as the sorted (relative path, content hash) listing.
std::string content_hash(const fs::path& p) {
  if (fs::is_directory(p)) {
    std::vector<std::string> lines;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (!e.is_regular_file()) continue;
      lines.push_back(fs::relative(e.path(), p).generic_string() + " " + hash_hex(fnv1a64(read_bytes(e.path()))));
    }
    std::sort(lines.begin(), lines.end());
    std::string all;
    for (const auto& l : lines) all += l + "\n";
    return hash_hex(fnv1a64(all));
  }
  return hash_hex(fnv1a64(read_bytes(p)));
}

class Manifest {
 public:
  Manifest(std::string command, nlohmann::json config) {
    j_["tool"] = "stressvit";
    j_["command"] = std::move(command);
    j_["config"] = std::move(config);
    j_["inputs"] = nlohmann::json::array();
    j_["outputs"] = nlohmann::json::array();
    j_["started_at"] = utc_now();
  }

  void input(const fs::path& p) { j_["inputs"].push_back({{"path", p.generic_string()}, {"fnv1a64", content_hash(p)}}); }

  void output(const fs::path& p) {
    if (!fs::is_regular_file(p)) throw std::runtime_error("expected output missing: " + p.string());
    j_["outputs"].push_back({{"path", p.generic_string()},
                             {"bytes", fs::file_size(p)},
                             {"fnv1a64", content_hash(p)}});
  }

  void write_text_output(const fs::path& p, const std::string& text) {
    write_text(p, text);
    output(p);
  }

  RunResult finish(const fs::path& manifest_path) {
    j_["finished_at"] = utc_now();
    write_text(manifest_path, j_.dump(2) + "\n");
    return {0, j_};
  }

 private:
  nlohmann::json j_;
};

LabeledTensors load_windows(const fs::path& data, std::size_t image_size) {
  auto windows = extract_all_windows(load_dataset(data));
  if (windows.empty()) throw DataError("dataset " + data.string() + " contains no annotated windows");
  return prepare_windows(windows, image_size);
}

KernelSpec kernel_of(const SvmOptions& o) {
  if (o.kernel == "linear") return KernelSpec::linear();
  return o.gamma ? KernelSpec::rbf(*o.gamma) : KernelSpec::rbf_scale();
}

nlohmann::json svm_options_json(const SvmOptions& o) {
  nlohmann::json j{{"C", o.C}, {"kernel", o.kernel}, {"tol", o.tol}};
  if (o.gamma) j["gamma"] = *o.gamma;
  else if (o.kernel == "rbf") j["gamma"] = "scale";
  return j;
}

SvmTrainConfig svm_config(const SvmOptions& o) {
  SvmTrainConfig c;
  c.C = o.C;
  c.tol = o.tol;
  c.kernel = kernel_of(o);
  return c;
}

Predictions svm_predictions(const SvmModel& m, const FeatureMatrix& x) {
  Predictions p;
  for (const auto& row : x) {
    const double f = decision_function(m, row);
    p.scores.push_back(f);
    p.labels.push_back(f > 0.0 ? 1 : 0);
  }
  return p;
}

ViTModel initial_model(const ViTConfig& cfg, const std::optional<fs::path>& init, std::uint64_t seed) {
  if (init) return checkpoint_load(*init, cfg);
  Rng rng(derive_seed(seed, 0x1417));
  return ViTModel::init(cfg, rng);
}

RunResult run(const SynthCommand& c) {
  Manifest m("synth", {{"images", c.images}, {"seed", c.seed}, {"healthy", c.healthy}, {"stressed", c.stressed},
                       {"size", c.size}, {"format", c.format == AnnotationFormat::csv ? "csv" : "xml"}});
  fs::create_directories(c.out / "images");
  std::string csv = "image,x_min,y_min,x_max,y_max,label\n";
  for (std::size_t i = 0; i < c.images; ++i) {
    SynthConfig cfg;
    cfg.width = cfg.height = c.size;
    cfg.healthy = c.healthy;
    cfg.stressed = c.stressed;
    cfg.seed = derive_seed(c.seed, i);
    AnnotatedImage img = synthesize_field_image(cfg);
    char id[32];
    std::snprintf(id, sizeof id, "img_%03zu", i);
    img.id = id;
    const fs::path ppm = c.out / "images" / (img.id + ".ppm");
    write_ppm(img.image, ppm);
    m.output(ppm);
    if (c.format == AnnotationFormat::voc_xml) {
      m.write_text_output(c.out / "annotations" / (img.id + ".xml"), to_voc_xml(img, img.id + ".ppm"));
    } else {
      for (const auto& b : img.boxes) {
        csv += img.id + ".ppm," + std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," +
               std::to_string(b.x_max) + "," + std::to_string(b.y_max) + "," + label_name(b.label) + "\n";
      }
    }
  }
  if (c.format == AnnotationFormat::csv) m.write_text_output(c.out / "annotations.csv", csv);
  return m.finish(c.out / "manifest.json");
}

RunResult run(const TrainCommand& c) {
  ScenarioConfig sc = load_scenario(c.scenario);
  if (c.seed) sc.seed = *c.seed;
  Manifest m("train", nlohmann::json::parse(scenario_json(sc)));
  m.input(c.scenario);
  m.input(c.data);
  if (c.init) m.input(*c.init);

  const ViTConfig cfg = sc.vit_config();
  const LabeledTensors all = load_windows(c.data, cfg.image_size);
  const auto [tr, va] = train_val_split(all.size(), c.val_fraction, derive_seed(sc.seed, 0x5917));
  const ViTModel init = initial_model(cfg, c.init, sc.seed);
  const TrainResult res = run_training(sc, init, all.subset(tr), all.subset(va));

  fs::create_directories(c.out);
  checkpoint_save(res.model, c.out / "model.ckpt");
  m.output(c.out / "model.ckpt");
  m.write_text_output(c.out / "train_log.json", train_log_json(res.log));
  return m.finish(c.out / "manifest.json");
}

RunResult run(const EvalCommand& c) {
  Manifest m("eval", {{"threshold", c.threshold}});
  m.input(c.checkpoint);
  m.input(c.data);
  const ViTModel model = checkpoint_load(c.checkpoint);
  const LabeledTensors data = load_windows(c.data, model.config.image_size);
  const Predictions p = predict_labels(model, data.images, c.threshold);
  const EvalReport r = evaluate_predictions(p, data.labels);
  m.write_text_output(c.out / "eval_report.json", eval_report_json(r));
  if (!r.roc.empty()) m.write_text_output(c.out / "roc.csv", roc_csv(r.roc));
  return m.finish(c.out / "manifest.json");
}

RunResult run(const ExtractFeaturesCommand& c) {
  Manifest m("extract-features", nlohmann::json::object());
  m.input(c.checkpoint);
  m.input(c.data);
  const ViTModel model = checkpoint_load(c.checkpoint);
  const LabeledTensors data = load_windows(c.data, model.config.image_size);
  m.write_text_output(c.out, format_features(extract_features(model, data.images), data.labels));
  return m.finish(fs::path(c.out.string() + ".manifest.json"));
}

RunResult run(const SvmTrainCommand& c) {
  Manifest m("svm-train", svm_options_json(c.svm));
  m.input(c.features);
  const FeatureSet fs_ = read_features(c.features);
  const SvmModel model = train_svm(fs_.x, fs_.y, svm_config(c.svm));
  if (c.out.has_parent_path()) fs::create_directories(c.out.parent_path());
  save_svm_model(model, c.out);
  m.output(c.out);
  return m.finish(fs::path(c.out.string() + ".manifest.json"));
}

RunResult run(const SvmEvalCommand& c) {
  Manifest m("svm-eval", nlohmann::json::object());
  m.input(c.model);
  m.input(c.features);
  const SvmModel model = load_svm_model(c.model);
  const FeatureSet fs_ = read_features(c.features);
  const EvalReport r = evaluate_predictions(svm_predictions(model, fs_.x), fs_.y);
  m.write_text_output(c.out / "eval_report.json", eval_report_json(r));
  if (!r.roc.empty()) m.write_text_output(c.out / "roc.csv", roc_csv(r.roc));
  return m.finish(c.out / "manifest.json");
}

RunResult run(const AttnCommand& c) {
  Manifest m("attn", {{"alpha", c.alpha}});
  m.input(c.checkpoint);
  m.input(c.image);
  const ViTModel model = checkpoint_load(c.checkpoint);
  const RgbImage image = read_ppm(c.image);
  const Tensor x = preprocess(image, model.config.image_size);
  const ForwardResult fwd = vit_forward(model, stack_images(std::span<const Tensor>(&x, 1)), {false, true}, nullptr, nullptr);
  const auto overlays = attention_overlays(fwd.records, image, c.alpha);
  fs::create_directories(c.out);
  for (std::size_t i = 0; i < overlays.size(); ++i) {
    const fs::path p = c.out / overlay_filename(i);
    write_ppm(overlays[i], p);
    m.output(p);
  }
  return m.finish(c.out / "manifest.json");
}

RunResult run(const KfoldCommand& c) {
  nlohmann::json cfg{{"pipeline", c.pipeline}, {"k", c.k}, {"seed", c.seed}};
  EvalReport report;
  std::optional<Manifest> m;

  if (c.pipeline == "svm") {
    cfg["svm"] = svm_options_json(c.svm);
    m.emplace("kfold", cfg);
    FeatureSet set;
    if (c.features) {
      m->input(*c.features);
      set = read_features(*c.features);
    } else {
      m->input(*c.checkpoint);
      m->input(*c.data);
      const ViTModel model = checkpoint_load(*c.checkpoint);
      const LabeledTensors data = load_windows(*c.data, model.config.image_size);
      set.x = extract_features(model, data.images);
      set.y = data.labels;
    }
    const SvmTrainConfig svm = svm_config(c.svm);
    report = kfold_evaluate(set.y, c.k, c.seed, [&](const auto& train, const auto& test) {
      FeatureMatrix xtr, xte;
      std::vector<int> ytr;
      for (auto i : train) {
        xtr.push_back(set.x[i]);
        ytr.push_back(set.y[i]);
      }
      for (auto i : test) xte.push_back(set.x[i]);
      return svm_predictions(train_svm(xtr, ytr, svm), xte);
    });
  } else {
    ScenarioConfig sc = load_scenario(*c.scenario);
    cfg["scenario"] = nlohmann::json::parse(scenario_json(sc));
    cfg["val_fraction"] = c.val_fraction;
    m.emplace("kfold", cfg);
    m->input(*c.scenario);
    m->input(*c.data);
    if (c.checkpoint) m->input(*c.checkpoint);
    const ViTConfig vcfg = sc.vit_config();
    const LabeledTensors data = load_windows(*c.data, vcfg.image_size);
    const ViTModel init = initial_model(vcfg, c.checkpoint, sc.seed);
    report = kfold_evaluate(data.labels, c.k, c.seed, [&](const auto& train, const auto& test) {
      const LabeledTensors part = data.subset(train);
      const auto [tr, va] = train_val_split(part.size(), c.val_fraction, derive_seed(sc.seed, 0x5917));
      const TrainResult res = run_training(sc, init, part.subset(tr), part.subset(va));
      return predict_labels(res.model, data.subset(test).images);
    });
  }

  m->write_text_output(c.out / "eval_report.json", eval_report_json(report));
  m->write_text_output(c.out / "roc.csv", roc_csv(report.roc));
  m->write_text_output(c.out / "mean_roc.csv", roc_csv(report.mean_roc));
  return m->finish(c.out / "manifest.json");
}

}  // namespace

RunResult run_command(const Command& command) {
  return std::visit([](const auto& c) { return run(c); }, command);
}

int main_entry(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  Command cmd;
  try {
    cmd = parse_cli(args);
  } catch (const UsageError& e) {
    (e.exit_code() == 0 ? std::cout : std::cerr) << e.what() << "\n";
    return e.exit_code();
  }
  try {
    const RunResult r = run_command(cmd);
    std::cout << r.manifest.dump(2) << "\n";
    return r.exit_code;
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", {{"message", e.what()}}}};
    if (dynamic_cast<const FoldError*>(&e)) err["error"]["fold"] = dynamic_cast<const FoldError&>(e).fold();
    std::cerr << err.dump() << "\n";
    return 1;
  }
}

}  // namespace stressvit::cli
