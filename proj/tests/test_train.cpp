#include <doctest.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "stressvit/checkpoint.hpp"
#include "stressvit/train.hpp"
#include "test_util.hpp"

using namespace stressvit;

namespace {

LabeledTensors synthetic_set(std::size_t images, std::uint64_t seed, std::size_t per_class = 2) {
  std::vector<AnnotatedImage> imgs;
  for (std::size_t i = 0; i < images; ++i) {
    SynthConfig cfg;
    cfg.width = cfg.height = 96;
    cfg.healthy = cfg.stressed = per_class;
    cfg.seed = derive_seed(seed, i);
    imgs.push_back(synthesize_field_image(cfg));
  }
  return prepare_windows(extract_all_windows(imgs), 32);
}

ScenarioConfig quick_scenario() {
  ScenarioConfig s;
  s.model = "TINY";
  s.batch_size = 8;
  s.max_epochs = 3;
  s.patience = 5;
  s.seed = 3;
  return s;
}

ViTModel tiny_init(std::uint64_t seed) {
  Rng rng(seed);
  return ViTModel::init(ViTConfig::tiny(), rng);
}

std::vector<double> scripted(std::initializer_list<double> v) { return v; }

}  // namespace

TEST_CASE("binary cross-entropy") {
  auto value = [](double z, int y) {
    return bce_loss(constant(Tensor({1, 1}, z)), std::vector<int>{y}).value().item();
  };
  CHECK(value(0.0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(value(0.0, 1) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(value(20.0, 1) < 1e-8);
  CHECK(value(2.0, 1) == doctest::Approx(std::log1p(std::exp(-2.0))).epsilon(1e-15));
  CHECK(value(2.0, 1) == doctest::Approx(0.126928).epsilon(1e-5));
  CHECK(std::isfinite(value(-800.0, 1)));
  CHECK_THROWS_AS(bce_loss(constant(Tensor({2, 1})), std::vector<int>{1, 3}), std::invalid_argument);
  CHECK_THROWS_AS(bce_loss(constant(Tensor({2, 2})), std::vector<int>{1, 0}), ShapeError);

  // d loss / d z = (sigmoid(z) - y) / B, analytically and by central differences.
  Parameter z(Tensor({3, 1}, std::vector<double>{-1.5, 0.2, 4.0}));
  const std::vector<int> y{1, 0, 1};
  Tape tape;
  Parameter* ps[] = {&z};
  backward(bce_loss(tape.param(z), y), tape, ps);
  for (std::size_t i = 0; i < 3; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z.value[i]));
    CHECK(z.grad[i] == doctest::Approx((s - y[i]) / 3.0).epsilon(1e-14));
  }
  const auto fd = testutil::finite_difference_check({{"z", &z}}, {z.grad}, [&] {
    return bce_loss(constant(z.value), y).value().item();
  });
  CHECK(fd.max_rel_error < 1e-7);
}

TEST_CASE("plateau monitor") {
  SUBCASE("constant validation loss") {
    PlateauMonitor m(0.001, 5, 0.2, 0.0, 10);
    m.set_baseline(1.0);
    for (int epoch = 1; epoch <= 10; ++epoch) {
      const auto s = m.observe(1.0);
      CHECK_FALSE(s.improved);
      CHECK(s.reduced == (epoch == 5));
      CHECK(s.stop == (epoch == 10));
      if (epoch < 5) CHECK(s.lr == 0.001);
      if (epoch >= 5) CHECK(s.lr == doctest::Approx(0.0002).epsilon(1e-15));
    }
  }
  SUBCASE("an improvement resets both counters") {
    PlateauMonitor m(0.001, 3, 0.5, 0.0, 6);
    m.set_baseline(1.0);
    for (int i = 0; i < 2; ++i) m.observe(1.0);
    CHECK(m.stale_epochs() == 2);
    CHECK(m.observe(0.9).improved);
    CHECK(m.stale_epochs() == 0);
    CHECK_FALSE(m.observe(0.9).reduced);
    CHECK_FALSE(m.observe(0.9).reduced);
    CHECK(m.observe(0.9).reduced);
  }
  SUBCASE("tiny gains do not count") {
    PlateauMonitor m(0.01, 1, 0.1, 0.0, 100);
    m.set_baseline(1.0);
    const auto s = m.observe(1.0 - 5e-7);
    CHECK_FALSE(s.improved);
    CHECK(s.reduced);
    CHECK(m.observe(0.5).improved);
  }
  SUBCASE("learning rate floor") {
    PlateauMonitor m(1.0, 1, 0.1, 0.05, 100);
    m.set_baseline(0.0);
    m.observe(1.0);
    m.observe(1.0);
    CHECK(m.observe(1.0).lr == 0.05);
  }
  CHECK_THROWS(PlateauMonitor(0.1, 0, 0.2, 0.0, 10));
  CHECK_THROWS(PlateauMonitor(0.1, 5, 1.0, 0.0, 10));
}

TEST_CASE("scenario files") {
  const std::filesystem::path dir = std::filesystem::path(STRESSVIT_SOURCE_DIR) / "scenarios";
  for (int i = 1; i <= 11; ++i) {
    const ScenarioConfig s = load_scenario(dir / ("s" + std::to_string(i) + ".json"));
    CHECK(s.lr == 0.001);
    CHECK(s.factor == 0.2);
    CHECK(s.patience == ((i == 5 || i == 6) ? 2 : 5));
    CHECK(s.batch_size == ((i == 6 || i == 10) ? 64 : 128));
    CHECK(s.model == (i == 4 ? "L/16" : "B/16"));
    CHECK(s.stop_patience() == 2 * s.patience);
    s.validate();
  }
  CHECK_FALSE(load_scenario(dir / "s9.json").trainable_blocks.has_value());
  CHECK(load_scenario(dir / "s1.json").trainable_blocks == 1u);
  CHECK(load_scenario(dir / "s8.json").mlp_dropout == 0.2);
  CHECK(load_scenario(dir / "tiny.json").model == "TINY");

  const ScenarioConfig t = load_scenario(dir / "tiny.json");
  const ScenarioConfig back = parse_scenario(scenario_json(t));
  CHECK(scenario_json(back) == scenario_json(t));

  const std::string base =
      R"({"trainable_blocks": 2, "optimizer": "adam", "lr": 0.001, "patience": 5, "factor": 0.2, "batch_size": 4, "attn_dropout": 0, "mlp_dropout": 0)";
  CHECK(parse_scenario(base + "}").optimizer == OptimizerKind::adam);
  CHECK_THROWS_AS(parse_scenario(base + R"(, "momentum": 0.9})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_scenario(R"({"trainable_blocks": 2})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_scenario(base + R"(, "model": "TINY", "trainable_blocks": 3})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_scenario("{"), std::invalid_argument);
  ScenarioConfig bad = t;
  bad.factor = 1.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("train/validation split") {
  const auto [tr, va] = train_val_split(100, 0.1, 5);
  CHECK(va.size() == 10);
  CHECK(tr.size() == 90);
  std::vector<std::size_t> all = tr;
  all.insert(all.end(), va.begin(), va.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(all[i] == i);
  CHECK(train_val_split(100, 0.1, 5) == std::make_pair(tr, va));
  CHECK(train_val_split(3, 0.01, 1).second.size() == 1);
}

TEST_CASE("callbacks inside the training loop") {
  const LabeledTensors data = synthetic_set(2, 1);
  ScenarioConfig s = quick_scenario();
  s.max_epochs = 30;
  std::vector<double> lrs;
  TrainHooks hooks;
  hooks.val_loss_override = [](std::size_t, double) { return 0.5; };
  hooks.on_epoch = [&](const EpochRecord& r) { lrs.push_back(r.lr); };
  const TrainResult r = run_training(s, tiny_init(1), data, data, hooks);
  CHECK(r.log.stop_epoch == 10);
  CHECK(r.log.stop_reason == "early_stop");
  CHECK(r.log.epochs.size() == 10);
  CHECK(r.log.best_epoch == 0);
  REQUIRE(lrs.size() == 10);
  CHECK(lrs[4] == 0.001);                                    // epoch 5 still runs at the initial rate
  CHECK(lrs[5] == doctest::Approx(0.0002).epsilon(1e-15));  // reduced after epoch 5
  CHECK(lrs[9] == doctest::Approx(0.0002).epsilon(1e-15));

  // An improvement at epoch 4 pushes the stop out to epoch 14.
  const auto losses = scripted({0.5, 0.5, 0.5, 0.5, 0.4});
  hooks.val_loss_override = [&](std::size_t e, double) { return e < losses.size() ? losses[e] : 0.4; };
  lrs.clear();
  const TrainResult r2 = run_training(s, tiny_init(1), data, data, hooks);
  CHECK(r2.log.stop_epoch == 14);
  CHECK(r2.log.best_epoch == 4);
  CHECK(lrs[8] == 0.001);
  CHECK(lrs[9] == doctest::Approx(0.0002).epsilon(1e-15));
}

TEST_CASE("training is deterministic and keeps the best weights") {
  const LabeledTensors train = synthetic_set(3, 2), val = synthetic_set(1, 3);
  ScenarioConfig s = quick_scenario();
  s.attn_dropout = 0.1;
  s.mlp_dropout = 0.1;
  s.max_epochs = 4;
  const TrainResult a = run_training(s, tiny_init(4), train, val);
  const TrainResult b = run_training(s, tiny_init(4), train, val);
  CHECK(train_log_json(a.log) == train_log_json(b.log));
  CHECK(encode_checkpoint(a.model) == encode_checkpoint(b.model));
  CHECK(a.log.epochs.size() <= a.log.stop_epoch);
  for (std::size_t i = 0; i < a.log.epochs.size(); ++i) {
    CHECK(a.log.epochs[i].epoch == i + 1);
    CHECK(a.log.best_val_loss <= a.log.epochs[i].val_loss);
  }
  CHECK(a.log.best_val_loss <= a.log.initial_val_loss);
  CHECK(evaluate_loss(a.model, val).loss == doctest::Approx(a.log.best_val_loss).epsilon(1e-12));

  const auto j = nlohmann::json::parse(train_log_json(a.log));
  CHECK(j["epochs"].size() == a.log.epochs.size());
  CHECK(j.contains("best_epoch"));
  CHECK(j.contains("stop_epoch"));

  ScenarioConfig other = s;
  other.seed = 4;
  CHECK(train_log_json(run_training(other, tiny_init(4), train, val).log) != train_log_json(a.log));
}

TEST_CASE("frozen blocks stay untouched during training") {
  const LabeledTensors data = synthetic_set(2, 5);
  ScenarioConfig s = quick_scenario();
  s.trainable_blocks = 1;
  s.max_epochs = 2;
  const ViTModel init = testutil::spread_model(ViTConfig::tiny(), 8, 0.1);
  const TrainResult r = run_training(s, init, data, data);
  CHECK(r.model.blocks[0].query_w.value == init.blocks[0].query_w.value);
  CHECK(r.model.patch_w.value == init.patch_w.value);
  CHECK_FALSE(r.model.blocks[1].query_w.value == init.blocks[1].query_w.value);
  CHECK_FALSE(r.model.head_w.value == init.head_w.value);
}

TEST_CASE("training input validation") {
  const LabeledTensors data = synthetic_set(1, 6);
  LabeledTensors one_class;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.labels[i] == 1) {
      one_class.images.push_back(data.images[i]);
      one_class.labels.push_back(1);
    }
  CHECK_THROWS_AS(run_training(quick_scenario(), tiny_init(1), one_class, data), TrainingError);
  CHECK_THROWS_AS(run_training(quick_scenario(), tiny_init(1), data, LabeledTensors{}), TrainingError);
  ScenarioConfig b16 = quick_scenario();
  b16.model = "B/16";
  CHECK_THROWS_AS(run_training(b16, tiny_init(1), data, data), TrainingError);

  ScenarioConfig hot = quick_scenario();
  hot.lr = 1e300;
  hot.optimizer = OptimizerKind::adam;
  hot.max_epochs = 5;
  CHECK_THROWS_AS(run_training(hot, testutil::spread_model(ViTConfig::tiny(), 1, 0.3), data, data), TrainingError);
}

TEST_CASE("tiny model overfits a small window set") {
  std::vector<AnnotatedImage> imgs;
  for (std::size_t i = 0; i < 4; ++i) {
    SynthConfig cfg;
    cfg.healthy = cfg.stressed = 4;
    cfg.seed = derive_seed(11, i);
    imgs.push_back(synthesize_field_image(cfg));
  }
  const LabeledTensors data = prepare_windows(extract_all_windows(imgs), 32);
  REQUIRE(data.size() == 32);
  ScenarioConfig s = quick_scenario();
  s.batch_size = 16;
  s.patience = 15;
  s.max_epochs = 200;
  const TrainResult r = run_training(s, tiny_init(7), data, data);
  const double acc = evaluate_loss(r.model, data).accuracy;
  MESSAGE("train accuracy " << acc << " after " << r.log.stop_epoch << " epochs");
  CHECK(acc >= 0.95);

  const Predictions p = predict_labels(r.model, data.images);
  CHECK(p.scores.size() == 32);
  for (std::size_t i = 0; i < 32; ++i) CHECK(p.labels[i] == (p.scores[i] >= 0.5 ? 1 : 0));
  const auto feats = extract_features(r.model, data.images);
  CHECK(feats.size() == 32);
  CHECK(feats[0].size() == 32);
}

TEST_CASE("checkpoint round trip") {
  ViTModel m = testutil::spread_model(ViTConfig::tiny(), 12, 0.5);
  set_trainable(m, FreezeSpec::last(1));
  const auto dir = testutil::temp_dir("ckpt");
  checkpoint_save(m, dir / "m.ckpt");
  const ViTModel back = checkpoint_load(dir / "m.ckpt", ViTConfig::tiny());
  const auto a = m.named_parameters();
  const auto b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].param->value == b[i].param->value);
    CHECK(a[i].param->trainable == b[i].param->trainable);
  }
  Rng rng(1);
  const Tensor x = testutil::random_tensor({2, 3, 32, 32}, rng, 0.0, 1.0);
  CHECK(vit_logits(back, x) == vit_logits(m, x));
  CHECK(checkpoint_config(dir / "m.ckpt").same_shape(ViTConfig::tiny()));
  CHECK(encode_checkpoint(checkpoint_load(dir / "m.ckpt")) == encode_checkpoint(m));

  std::string bytes = encode_checkpoint(m);
  CHECK(bytes.substr(0, 8) == "SVITCKPT");
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3), ViTConfig::tiny()), CheckpointError);
  bytes[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bytes, ViTConfig::tiny()), CheckpointError);
  CHECK_THROWS_AS(checkpoint_load(dir / "absent.ckpt", ViTConfig::tiny()), CheckpointError);

  const ViTConfig cfg = vit_config_from_json(vit_config_json(ViTConfig::b16()));
  CHECK(cfg.same_shape(ViTConfig::b16()));
}

TEST_CASE("checkpoint mismatch names the offending entries") {
  ViTConfig three = ViTConfig::tiny();
  three.num_layers = 3;
  const std::string bytes = encode_checkpoint(ViTModel(three));
  try {
    decode_checkpoint(bytes, ViTConfig::tiny());
    FAIL("expected a mismatch");
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("unexpected blocks.2.attn.query.weight") != std::string::npos);
    CHECK(msg.find("16 entries") != std::string::npos);
  }
  ViTConfig wide = ViTConfig::tiny();
  wide.mlp_dim = 128;
  try {
    decode_checkpoint(encode_checkpoint(ViTModel(wide)), ViTConfig::tiny());
    FAIL("expected a mismatch");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("blocks.0.mlp.fc1.weight stored [32x128] expected [32x64]") != std::string::npos);
  }
}

TEST_CASE("a full-size checkpoint does not load into the tiny model") {
  const std::string bytes = encode_checkpoint(ViTModel(ViTConfig::b16()));
  CHECK(decode_checkpoint_config(bytes).same_shape(ViTConfig::b16()));
  try {
    decode_checkpoint(bytes, ViTConfig::tiny());
    FAIL("expected a mismatch");
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("patch_embed.weight stored [768x768] expected [192x32]") != std::string::npos);
    CHECK(msg.find("more") != std::string::npos);
  }
}
