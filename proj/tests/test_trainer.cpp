#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "aimlab/trainer.hpp"

using namespace aimlab;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(bool(f));
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

bool same_params(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].name() != b[i].name()) return false;
    if (a[i].data() != b[i].data()) return false;
  }
  return true;
}

ModelDims small_dims(int vocab) {
  ModelDims dims;
  dims.vocab = vocab;
  dims.d_w = 6;
  dims.d_h = 10;
  dims.d_e = 6;
  dims.max_src_len = 4;
  dims.max_steps = 4;
  return dims;
}

TrainConfig small_config(TrainMode mode, int vocab) {
  TrainConfig cfg;
  cfg.mode = mode;
  cfg.dims = small_dims(vocab);
  cfg.batch_size = 2;
  cfg.pretrain_epochs = 2;
  cfg.adv_steps = 2;
  cfg.seed = 7;
  return cfg;
}

// Four pairs with disjoint word sets, three times over so every split holds
// the same content. Memorizing the train rows therefore scores perfectly on
// the test rows.
Dataset four_pair_dataset() {
  Dataset ds;
  auto add = [&ds](const Sentence& s, const Sentence& t, int split) {
    ds.pairs.push_back({s, t});
    ds.split.push_back(split);
  };
  std::vector<std::pair<Sentence, Sentence>> rows = {
      {{"red", "circle"}, {"crimson", "ring"}},
      {{"blue", "square"}, {"azure", "box"}},
      {{"green", "line"}, {"jade", "stroke"}},
      {{"black", "dot"}, {"ink", "point"}},
  };
  for (const auto& [s, t] : rows) add(s, t, Dataset::kTrain);
  for (const auto& [s, t] : rows) add(s, t, Dataset::kValid);
  for (const auto& [s, t] : rows) add(s, t, Dataset::kTest);
  return ds;
}

Dataset swap_pairs(const Dataset& ds) {
  Dataset out;
  out.split = ds.split;
  for (const auto& p : ds.pairs) out.pairs.push_back({p.tgt, p.src});
  return out;
}

// End-biased generator: emits the end token immediately whatever the source.
GeneratorParams immediate_end_model(const ModelDims& dims, const std::string& prefix) {
  Rng rng(3);
  auto gen = make_generator(dims, prefix, rng);
  for (Tensor p : gen.params())
    for (double& x : p.mutable_data()) x = 0.0;
  for (double& x : gen.lstm_b.mutable_data()) x = 20.0;
  auto& w = gen.out_w.mutable_data();
  for (int j = 0; j < dims.d_h; ++j) w[dims.end_id * dims.d_h + j] = 100.0;
  return gen;
}

}  // namespace

TEST_CASE("mode names round-trip and junk is rejected") {
  for (TrainMode m :
       {TrainMode::kSeq2Seq, TrainMode::kCgan, TrainMode::kAim, TrainMode::kDaim})
    CHECK(train_mode_from_string(to_string(m)) == m);
  CHECK(to_string(TrainMode::kSeq2Seq) == "seq2seq");
  CHECK_THROWS_AS(train_mode_from_string("gan"), std::invalid_argument);
}

TEST_CASE("config validation names the offending field") {
  auto expect_reject = [](void (*mutate)(TrainConfig&), const std::string& field) {
    TrainConfig cfg = small_config(TrainMode::kAim, 12);
    mutate(cfg);
    try {
      cfg.validate();
      FAIL("expected rejection of ", field);
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find(field) != std::string::npos);
    }
  };
  expect_reject([](TrainConfig& c) { c.lambda = -1.0; }, "lambda");
  expect_reject([](TrainConfig& c) { c.mle_weight = -0.5; }, "mle_weight");
  expect_reject([](TrainConfig& c) { c.tau = 0.0; }, "tau");
  expect_reject([](TrainConfig& c) { c.sigma = -0.1; }, "sigma");
  expect_reject([](TrainConfig& c) { c.backward_weight = -2.0; }, "backward_weight");
  expect_reject([](TrainConfig& c) { c.lr_pretrain = 0.0; }, "lr_pretrain");
  expect_reject([](TrainConfig& c) { c.batch_size = 0; }, "batch_size");
  expect_reject([](TrainConfig& c) { c.disc_steps_per_gen = 0; }, "disc_steps_per_gen");
  expect_reject([](TrainConfig& c) { c.beam_width = 0; }, "beam_width");

  TrainConfig ok = small_config(TrainMode::kDaim, 12);
  CHECK_NOTHROW(ok.validate());
}

TEST_CASE("canonical config form is stable and the hash tracks every field") {
  TrainConfig base = small_config(TrainMode::kAim, 12);
  CHECK(config_canonical(base) == config_canonical(base));
  uint64_t h = config_hash(base);
  CHECK(h == config_hash(base));

  // one mutation per field; each must move the hash
  std::vector<void (*)(TrainConfig&)> mutations = {
      [](TrainConfig& c) { c.mode = TrainMode::kDaim; },
      [](TrainConfig& c) { c.lambda = 0.2; },
      [](TrainConfig& c) { c.mle_weight = 0.01; },
      [](TrainConfig& c) { c.tau = 0.7; },
      [](TrainConfig& c) { c.sigma = 0.2; },
      [](TrainConfig& c) { c.backward_weight = 0.5; },
      [](TrainConfig& c) { c.lr_pretrain = 2e-3; },
      [](TrainConfig& c) { c.lr_gen = 2e-3; },
      [](TrainConfig& c) { c.lr_disc = 2e-3; },
      [](TrainConfig& c) { c.batch_size = 3; },
      [](TrainConfig& c) { c.pretrain_epochs = 5; },
      [](TrainConfig& c) { c.adv_steps = 9; },
      [](TrainConfig& c) { c.disc_steps_per_gen = 2; },
      [](TrainConfig& c) { c.beam_width = 7; },
      [](TrainConfig& c) { c.seed = 8; },
      [](TrainConfig& c) { c.dims.vocab = 13; },
      [](TrainConfig& c) { c.dims.d_h = 11; },
  };
  for (auto& mutate : mutations) {
    TrainConfig other = base;
    mutate(other);
    CHECK(config_hash(other) != h);
  }

  // every scalar field appears by name in the canonical text
  std::string canon = config_canonical(base);
  for (const char* key :
       {"mode=", "lambda=", "mle_weight=", "tau=", "sigma=", "backward_weight=",
        "lr_pretrain=", "lr_gen=", "lr_disc=", "batch_size=", "pretrain_epochs=",
        "adv_steps=", "disc_steps_per_gen=", "beam_width=", "seed=", "dims.vocab="})
    CHECK(canon.find(key) != std::string::npos);
}

TEST_CASE("adam follows the bias-corrected update rule") {
  Tensor w = Tensor::leaf("w", {2}, {1.0, -3.0}, true);
  GradMap grads;
  grads["w"] = {0.5, -0.25};

  AdamConfig cfg;
  cfg.lr = 0.1;
  AdamState state;

  // mirror of the defining recursion, kept independent of the implementation
  double m[2] = {0.0, 0.0}, v[2] = {0.0, 0.0};
  double expect[2] = {1.0, -3.0};
  auto reference_step = [&](int t) {
    for (int i = 0; i < 2; ++i) {
      double g = grads["w"][i];
      m[i] = 0.9 * m[i] + 0.1 * g;
      v[i] = 0.999 * v[i] + 0.001 * g * g;
      double mhat = m[i] / (1.0 - std::pow(0.9, t));
      double vhat = v[i] / (1.0 - std::pow(0.999, t));
      expect[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  };

  adam_step(state, cfg, {w}, grads);
  reference_step(1);
  CHECK(state.t == 1);
  CHECK(w.data()[0] == doctest::Approx(expect[0]).epsilon(1e-14));
  CHECK(w.data()[1] == doctest::Approx(expect[1]).epsilon(1e-14));

  adam_step(state, cfg, {w}, grads);
  reference_step(2);
  CHECK(state.t == 2);
  CHECK(w.data()[0] == doctest::Approx(expect[0]).epsilon(1e-14));
  CHECK(w.data()[1] == doctest::Approx(expect[1]).epsilon(1e-14));

  SUBCASE("parameters without a gradient entry stay put") {
    Tensor u = Tensor::leaf("u", {1}, {4.0}, true);
    AdamState s2;
    adam_step(s2, cfg, {u, w}, grads);
    CHECK(u.data()[0] == 4.0);
    CHECK(s2.m.count("u") == 0);
  }

  SUBCASE("a gradient of the wrong size is an error") {
    GradMap bad;
    bad["w"] = {1.0};
    AdamState s3;
    CHECK_THROWS_AS(adam_step(s3, cfg, {w}, bad), std::runtime_error);
  }

  SUBCASE("descent on a quadratic reaches the minimum") {
    Tensor x = Tensor::leaf("x", {1}, {8.0}, true);
    AdamState s4;
    AdamConfig quad;
    quad.lr = 0.05;
    for (int t = 0; t < 600; ++t) {
      GradMap gm;
      gm["x"] = {2.0 * (x.data()[0] - 3.0)};
      adam_step(s4, quad, {x}, gm);
    }
    CHECK(std::abs(x.data()[0] - 3.0) < 1e-3);
  }
}

TEST_CASE("checkpoints round-trip bit for bit and reject damage") {
  TrainConfig cfg = small_config(TrainMode::kAim, 12);
  Models models = init_models(cfg);

  // make the optimizer state nontrivial before snapshotting
  AdamState gen_adam, disc_adam;
  AdamConfig opt;
  GradMap g;
  for (const Tensor& p : models.fwd.params()) g[p.name()] = std::vector<double>(p.size(), 0.25);
  adam_step(gen_adam, opt, models.fwd.params(), g);
  GradMap gd;
  for (const Tensor& p : models.disc.params()) gd[p.name()] = std::vector<double>(p.size(), -0.5);
  adam_step(disc_adam, opt, models.disc.params(), gd);

  Checkpoint ckpt = make_checkpoint(cfg, models, &gen_adam, &disc_adam, 42);
  CHECK(ckpt.config_hash == config_hash(cfg));
  CHECK(ckpt.step == 42);
  CHECK(ckpt.adam_t.at("gen") == 1);
  CHECK(ckpt.adam_t.at("disc") == 1);

  std::string path = temp_path("aimlab_ckpt_roundtrip.bin");
  save_checkpoint(ckpt, path);
  Checkpoint back = load_checkpoint(path);

  CHECK(back.config_hash == ckpt.config_hash);
  CHECK(back.step == ckpt.step);
  CHECK(back.adam_t == ckpt.adam_t);
  REQUIRE(back.params.size() == ckpt.params.size());
  for (const auto& [name, block] : ckpt.params) {
    REQUIRE(back.params.count(name) == 1);
    CHECK(back.params.at(name).shape == block.shape);
    CHECK(back.params.at(name).data == block.data);
  }
  CHECK(back.adam_m.size() == ckpt.adam_m.size());
  CHECK(back.adam_v.size() == ckpt.adam_v.size());

  SUBCASE("saving the loaded snapshot reproduces the file byte for byte") {
    std::string again = temp_path("aimlab_ckpt_again.bin");
    save_checkpoint(back, again);
    CHECK(read_bytes(again) == read_bytes(path));
    std::filesystem::remove(again);
  }

  SUBCASE("restoring into freshly initialized models reproduces every value") {
    TrainConfig other = cfg;
    other.seed = 99;  // different init, same shapes
    Models fresh = init_models(other);
    CHECK_FALSE(same_params(fresh.fwd.params(), models.fwd.params()));
    restore_models(back, fresh);
    CHECK(same_params(fresh.fwd.params(), models.fwd.params()));
    CHECK(same_params(fresh.bwd.params(), models.bwd.params()));
    CHECK(same_params(fresh.disc.params(), models.disc.params()));

    AdamState gen_back = restore_adam(back, "gen");
    CHECK(gen_back.t == gen_adam.t);
    CHECK(gen_back.m == gen_adam.m);
    CHECK(gen_back.v == gen_adam.v);
  }

  SUBCASE("a foreign or damaged file is refused") {
    std::string bytes = read_bytes(path);

    std::string bad_magic = temp_path("aimlab_ckpt_magic.bin");
    {
      std::string copy = bytes;
      copy[0] = 'X';
      std::ofstream f(bad_magic, std::ios::binary);
      f << copy;
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(bad_magic), doctest::Contains("not a checkpoint"),
                         std::runtime_error);

    std::string bad_version = temp_path("aimlab_ckpt_version.bin");
    {
      std::string copy = bytes;
      copy[4] = 9;
      std::ofstream f(bad_version, std::ios::binary);
      f << copy;
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(bad_version), doctest::Contains("version"),
                         std::runtime_error);

    std::string truncated = temp_path("aimlab_ckpt_trunc.bin");
    {
      std::ofstream f(truncated, std::ios::binary);
      f << bytes.substr(0, bytes.size() / 2);
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(truncated), doctest::Contains("truncated"),
                         std::runtime_error);

    std::string padded = temp_path("aimlab_ckpt_padded.bin");
    {
      std::ofstream f(padded, std::ios::binary);
      f << bytes << '\0';
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(padded), doctest::Contains("trailing"),
                         std::runtime_error);

    CHECK_THROWS_AS(load_checkpoint(temp_path("aimlab_ckpt_missing.bin")),
                    std::runtime_error);
    for (const auto& p : {bad_magic, bad_version, truncated, padded})
      std::filesystem::remove(p);
  }

  SUBCASE("restore refuses shape mismatches and missing blocks") {
    TrainConfig narrow = cfg;
    narrow.dims.d_h = 8;
    Models other = init_models(narrow);
    CHECK_THROWS_AS(restore_models(back, other), std::runtime_error);

    Checkpoint gutted = back;
    gutted.params.erase(gutted.params.begin());
    Models fresh = init_models(cfg);
    CHECK_THROWS_AS(restore_models(gutted, fresh), std::runtime_error);
  }

  std::filesystem::remove(path);
}

// Corpus shaped so that conditioning on the source can actually win at this
// scale: responses fill the decoder window, so every step of every pair is a
// content prediction instead of four pairs competing over one shared
// end-of-sequence row.
static Dataset window_filling_dataset() {
  Dataset ds;
  const std::vector<std::pair<Sentence, Sentence>> rows = {
      {{"red", "circle"}, {"crimson", "ring", "arc", "bow"}},
      {{"blue", "square"}, {"azure", "box", "tile", "slab"}},
      {{"green", "line"}, {"jade", "stroke", "rail", "rod"}},
      {{"black", "dot"}, {"ink", "point", "pip", "mote"}},
  };
  for (auto split : {Dataset::kTrain, Dataset::kValid, Dataset::kTest})
    for (const auto& [src, tgt] : rows) {
      ds.pairs.push_back({src, tgt});
      ds.split.push_back(split);
    }
  return ds;
}

TEST_CASE("pretraining memorizes a four-pair corpus and evaluates to perfect overlap") {
  Dataset ds = window_filling_dataset();
  Vocab vocab = build_vocab(ds, 64);

  TrainConfig cfg = small_config(TrainMode::kSeq2Seq, static_cast<int>(vocab.size()));
  // With the fixed-range init the encoder output is dominated by the
  // projection bias; the source-dependent part is a few percent of its norm
  // and has to outgrow the unconditional mixture fit (loss log 4) before the
  // optimizer saturates the gates. Wider filters raise the useful signal,
  // and this width, rate, and seed are verified to cross.
  cfg.dims.d_h = 48;
  cfg.dims.d_w = 48;
  cfg.dims.d_e = 8;
  cfg.lr_pretrain = 0.02;
  cfg.batch_size = 4;
  cfg.pretrain_epochs = 300;  // one minibatch per epoch at this size
  cfg.seed = 11;

  PretrainOutcome out = pretrain(cfg, ds, vocab);

  REQUIRE(out.fwd.step_loss.size() == 300);
  CHECK(out.fwd.step_loss.back() < 0.1);
  REQUIRE(out.fwd.val_mle.size() == 300);
  CHECK(out.fwd.val_mle.back() < 0.1);
  CHECK(out.fwd.step_loss.front() > out.fwd.step_loss.back());
  // The backward direction trains on four-token sources compressed to a
  // single conv column; it reliably reaches the mixture fit but memorizes
  // only for lucky seeds, so assert the plateau bound instead.
  CHECK(out.bwd.step_loss.back() < 1.5);

  // pretrain() must agree with the manual loop: same seed, same streams
  Models models = init_models(cfg);
  PretrainState state;
  state.gen = models.fwd;
  pretrain_epochs(cfg, ds, vocab, false, cfg.pretrain_epochs, state);
  CHECK(state.step_loss == out.fwd.step_loss);
  CHECK(same_params(out.fwd.gen.params(), state.gen.params()));

  SUBCASE("hard decoding reproduces the memorized pairs exactly") {
    Models full = init_models(cfg);
    full.fwd = out.fwd.gen;
    full.bwd = out.bwd.gen;
    Checkpoint ckpt = make_checkpoint(cfg, full, nullptr, nullptr, 300);

    MetricsConfig mc;
    EvalResult ev = evaluate_model(ckpt, cfg, ds, vocab, mc);
    CHECK(ev.checkpoint_hash == config_hash(cfg));
    REQUIRE(ev.report.bleu.has_value());
    CHECK(*ev.report.bleu == doctest::Approx(1.0).epsilon(1e-12));
    REQUIRE(ev.generations.size() == 4);
    CHECK(ev.generations[0] == Sentence{"crimson", "ring", "arc", "bow"});
    CHECK_FALSE(ev.source_specificity.has_value());
  }

  SUBCASE("a checkpoint holding only forward blocks still evaluates") {
    Checkpoint slim;
    slim.config_hash = config_hash(cfg);
    pack_tensors(slim, out.fwd.gen.params());
    MetricsConfig mc;
    mc.rouge_l = false;
    EvalResult ev = evaluate_model(slim, cfg, ds, vocab, mc);
    REQUIRE(ev.report.bleu.has_value());
    CHECK(*ev.report.bleu == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_FALSE(ev.report.rouge_l.has_value());
  }
}

TEST_CASE("backward pretraining equals forward pretraining on the swapped corpus") {
  Dataset ds = four_pair_dataset();
  Dataset swapped = swap_pairs(ds);
  Vocab vocab = build_vocab(ds, 64);  // shared table, same ids both ways

  TrainConfig cfg = small_config(TrainMode::kSeq2Seq, static_cast<int>(vocab.size()));
  cfg.seed = 21;

  Models ma = init_models(cfg);
  PretrainState backward_run;
  backward_run.gen = ma.bwd;
  pretrain_epochs(cfg, ds, vocab, true, 3, backward_run);

  Models mb = init_models(cfg);
  PretrainState forward_on_swapped;
  forward_on_swapped.gen = mb.bwd;  // same initial values as ma.bwd
  pretrain_epochs(cfg, swapped, vocab, false, 3, forward_on_swapped);

  CHECK(backward_run.step_loss == forward_on_swapped.step_loss);
  CHECK(backward_run.val_mle == forward_on_swapped.val_mle);
  CHECK(same_params(backward_run.gen.params(), forward_on_swapped.gen.params()));
}

TEST_CASE("interrupted pretraining resumes on the exact trajectory") {
  Dataset ds = four_pair_dataset();
  Vocab vocab = build_vocab(ds, 64);
  TrainConfig cfg = small_config(TrainMode::kSeq2Seq, static_cast<int>(vocab.size()));
  cfg.seed = 31;
  cfg.batch_size = 3;  // ragged batches cross epoch boundaries

  Models ma = init_models(cfg);
  PretrainState straight;
  straight.gen = ma.fwd;
  pretrain_epochs(cfg, ds, vocab, false, 4, straight);

  Models mb = init_models(cfg);
  PretrainState first_half;
  first_half.gen = mb.fwd;
  pretrain_epochs(cfg, ds, vocab, false, 2, first_half);

  Checkpoint ckpt;
  ckpt.config_hash = config_hash(cfg);
  ckpt.step = first_half.epoch;
  pack_tensors(ckpt, first_half.gen.params());
  pack_adam(ckpt, first_half.adam, "gen");
  std::string path = temp_path("aimlab_ckpt_resume.bin");
  save_checkpoint(ckpt, path);

  Checkpoint loaded = load_checkpoint(path);
  Models mc = init_models(cfg);
  PretrainState resumed;
  resumed.gen = mc.fwd;
  restore_tensors(loaded, resumed.gen.params());
  resumed.adam = restore_adam(loaded, "gen");
  resumed.epoch = static_cast<int>(loaded.step);
  pretrain_epochs(cfg, ds, vocab, false, 2, resumed);

  REQUIRE(straight.step_loss.size() >= resumed.step_loss.size());
  std::vector<double> tail(straight.step_loss.end() - resumed.step_loss.size(),
                           straight.step_loss.end());
  CHECK(tail == resumed.step_loss);
  CHECK(straight.val_mle.back() == resumed.val_mle.back());
  CHECK(same_params(straight.gen.params(), resumed.gen.params()));
  std::filesystem::remove(path);
}

TEST_CASE("identical seeds give identical adversarial runs, byte for byte") {
  Dataset ds = four_pair_dataset();
  Vocab vocab = build_vocab(ds, 64);
  TrainConfig cfg = small_config(TrainMode::kDaim, static_cast<int>(vocab.size()));
  cfg.adv_steps = 3;
  cfg.disc_steps_per_gen = 2;
  cfg.seed = 41;

  Checkpoint start = make_checkpoint(cfg, init_models(cfg), nullptr, nullptr, 0);

  auto run = [&]() {
    Models m = init_models(cfg);
    restore_models(start, m);
    return train_adversarial(cfg, ds, vocab, m);
  };
  AdvOutcome a = run();
  AdvOutcome b = run();

  REQUIRE(a.log.steps.size() == 3);
  for (size_t i = 0; i < a.log.steps.size(); ++i) {
    CHECK(a.log.steps[i].disc_loss == b.log.steps[i].disc_loss);
    CHECK(a.log.steps[i].mi_forward == b.log.steps[i].mi_forward);
    CHECK(a.log.steps[i].mi_backward == b.log.steps[i].mi_backward);
    CHECK(a.log.steps[i].mle == b.log.steps[i].mle);
  }
  CHECK(a.log.disc_curve == b.log.disc_curve);

  std::string pa = temp_path("aimlab_adv_a.bin");
  std::string pb = temp_path("aimlab_adv_b.bin");
  save_checkpoint(make_checkpoint(cfg, a.models, &a.gen_adam, &a.disc_adam, cfg.adv_steps),
                  pa);
  save_checkpoint(make_checkpoint(cfg, b.models, &b.gen_adam, &b.disc_adam, cfg.adv_steps),
                  pb);
  CHECK(read_bytes(pa) == read_bytes(pb));
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);
}

TEST_CASE("a frozen generator lets the discriminator descend monotonically") {
  // one training pair and zero noise: every update sees the same batch
  Dataset ds;
  ds.pairs.push_back({{"hello", "there"}, {"general", "greeting"}});
  ds.split.push_back(Dataset::kTrain);
  Vocab vocab = build_vocab(ds, 16);

  TrainConfig cfg = small_config(TrainMode::kCgan, static_cast<int>(vocab.size()));
  cfg.batch_size = 1;
  cfg.sigma = 0.0;
  cfg.lambda = 0.0;
  cfg.mle_weight = 0.0;
  cfg.lr_gen = 0.0;
  cfg.lr_disc = 1e-3;
  cfg.adv_steps = 50;
  cfg.seed = 51;

  Models models = init_models(cfg);
  std::vector<double> gen_before;
  for (const Tensor& p : models.fwd.params())
    gen_before.insert(gen_before.end(), p.data().begin(), p.data().end());

  AdvOutcome out = train_adversarial(cfg, ds, vocab, models);
  REQUIRE(out.log.disc_curve.size() == 50);
  for (size_t i = 1; i < out.log.disc_curve.size(); ++i)
    CHECK(out.log.disc_curve[i] <= out.log.disc_curve[i - 1] + 1e-12);
  CHECK(out.log.disc_curve.back() < out.log.disc_curve.front());

  // lr_gen = 0 really froze the generator
  std::vector<double> gen_after;
  for (const Tensor& p : out.models.fwd.params())
    gen_after.insert(gen_after.end(), p.data().begin(), p.data().end());
  CHECK(gen_before == gen_after);
}

TEST_CASE("an aim step and a zero-weighted daim step are indistinguishable") {
  Dataset ds = four_pair_dataset();
  Vocab vocab = build_vocab(ds, 64);

  TrainConfig aim_cfg = small_config(TrainMode::kAim, static_cast<int>(vocab.size()));
  aim_cfg.adv_steps = 2;
  aim_cfg.seed = 61;
  TrainConfig daim_cfg = aim_cfg;
  daim_cfg.mode = TrainMode::kDaim;
  daim_cfg.backward_weight = 0.0;

  Checkpoint start = make_checkpoint(aim_cfg, init_models(aim_cfg), nullptr, nullptr, 0);

  auto run = [&](const TrainConfig& cfg) {
    Models m = init_models(cfg);
    restore_models(start, m);
    return train_adversarial(cfg, ds, vocab, m);
  };
  AdvOutcome aim_out = run(aim_cfg);
  AdvOutcome daim_out = run(daim_cfg);

  CHECK(same_params(aim_out.models.fwd.params(), daim_out.models.fwd.params()));
  CHECK(same_params(aim_out.models.bwd.params(), daim_out.models.bwd.params()));
  CHECK(same_params(aim_out.models.disc.params(), daim_out.models.disc.params()));
  REQUIRE(aim_out.log.steps.size() == daim_out.log.steps.size());
  for (size_t i = 0; i < aim_out.log.steps.size(); ++i) {
    CHECK(aim_out.log.steps[i].disc_loss == daim_out.log.steps[i].disc_loss);
    CHECK(aim_out.log.steps[i].mi_forward == daim_out.log.steps[i].mi_forward);
    CHECK(daim_out.log.steps[i].mi_backward == 0.0);
    CHECK(aim_out.log.steps[i].mle == daim_out.log.steps[i].mle);
  }

  // a nonzero backward weight must actually change the trajectory
  TrainConfig dual_cfg = daim_cfg;
  dual_cfg.backward_weight = 1.0;
  AdvOutcome dual_out = run(dual_cfg);
  CHECK_FALSE(same_params(aim_out.models.fwd.params(), dual_out.models.fwd.params()));
}

TEST_CASE("adversarial training rejects unusable setups") {
  Dataset ds = four_pair_dataset();
  Vocab vocab = build_vocab(ds, 64);
  TrainConfig cfg = small_config(TrainMode::kSeq2Seq, static_cast<int>(vocab.size()));
  cfg.adv_steps = 1;

  CHECK_THROWS_WITH_AS(train_adversarial(cfg, ds, vocab, init_models(cfg)),
                       doctest::Contains("seq2seq"), std::invalid_argument);

  TrainConfig solo = cfg;
  solo.mode = TrainMode::kAim;
  solo.batch_size = 1;
  CHECK_THROWS_WITH_AS(train_adversarial(solo, ds, vocab, init_models(solo)),
                       doctest::Contains("batch_size"), std::invalid_argument);

  // cgan has no score-function baseline, so a single-row batch is fine
  TrainConfig cgan = cfg;
  cgan.mode = TrainMode::kCgan;
  cgan.batch_size = 1;
  CHECK_NOTHROW(train_adversarial(cgan, ds, vocab, init_models(cgan)));

  Dataset empty_train = ds;
  for (int& tag : empty_train.split) tag = Dataset::kTest;
  TrainConfig aim = cfg;
  aim.mode = TrainMode::kAim;
  CHECK_THROWS_AS(train_adversarial(aim, empty_train, vocab, init_models(aim)),
                  std::runtime_error);
}

TEST_CASE("a discriminator that separates everything trips the saturation warning") {
  Dataset ds;
  ds.pairs.push_back({{"hello", "there"}, {"general", "greeting"}});
  ds.split.push_back(Dataset::kTrain);
  Vocab vocab = build_vocab(ds, 16);

  // frozen generator, hard-driven critic: the score gap saturates quickly
  TrainConfig cfg = small_config(TrainMode::kCgan, static_cast<int>(vocab.size()));
  cfg.batch_size = 1;
  cfg.sigma = 0.0;
  cfg.lambda = 0.0;
  cfg.mle_weight = 0.0;
  cfg.lr_gen = 0.0;
  cfg.lr_disc = 0.2;
  cfg.adv_steps = 4;
  cfg.disc_steps_per_gen = 60;
  cfg.seed = 71;

  AdvOutcome out = train_adversarial(cfg, ds, vocab, init_models(cfg));
  CHECK(out.log.saturation_warning);
  CHECK(2 * out.log.clamped_batches > out.log.disc_batches / 2);
  bool mentioned = false;
  for (const auto& w : out.log.warnings)
    if (w.find("saturated") != std::string::npos) mentioned = true;
  CHECK(mentioned);
}

TEST_CASE("reranking selects by the blended score") {
  TrainConfig cfg = small_config(TrainMode::kSeq2Seq, 12);
  cfg.seed = 81;
  Models m = init_models(cfg);
  std::vector<int> source = {4, 5};

  // the source as the backward model scores it: clipped, then end-marked
  std::vector<int> scored_src = source;
  if (static_cast<int>(scored_src.size()) < cfg.dims.max_steps)
    scored_src.push_back(cfg.dims.end_id);

  auto backward_score = [&](const std::vector<int>& tokens, bool ended) {
    std::vector<int> scored = tokens;
    if (ended && static_cast<int>(scored.size()) < cfg.dims.max_steps)
      scored.push_back(cfg.dims.end_id);
    return seq_logprob(m.bwd, tokens, scored_src).item();
  };

  SUBCASE("zero weight returns the plain beam winner") {
    for (std::vector<int> src : {std::vector<int>{4, 5}, {7}, {3, 9, 10}}) {
      auto beam = beam_search(m.fwd, src, 4);
      Hypothesis picked = mmi_bidi_rerank(m.fwd, m.bwd, src, 4, 0.0);
      CHECK(picked.tokens == beam.front().tokens);
      CHECK(picked.logprob == beam.front().logprob);
    }
  }

  SUBCASE("full weight returns the backward argmax") {
    auto beam = beam_search(m.fwd, source, 5);
    const Hypothesis* best = nullptr;
    double best_q = 0.0;
    for (const auto& cand : beam) {
      double q = backward_score(cand.tokens, cand.ended);
      if (!best || q > best_q ||
          (q == best_q && cand.tokens.size() < best->tokens.size())) {
        best = &cand;
        best_q = q;
      }
    }
    Hypothesis picked = mmi_bidi_rerank(m.fwd, m.bwd, source, 5, 1.0);
    REQUIRE(best != nullptr);
    CHECK(picked.tokens == best->tokens);
    CHECK(picked.logprob == doctest::Approx(best_q).epsilon(1e-12));
  }

  SUBCASE("a hand-scored blend matches on three candidates") {
    auto beam = beam_search(m.fwd, source, 3);
    REQUIRE(beam.size() == 3);
    double w = 0.4;
    int winner = 0;
    double winner_score = 0.0;
    for (int i = 0; i < 3; ++i) {
      double score =
          (1.0 - w) * beam[i].logprob + w * backward_score(beam[i].tokens, beam[i].ended);
      if (i == 0 || score > winner_score) {
        winner = i;
        winner_score = score;
      }
    }
    Hypothesis picked = mmi_bidi_rerank(m.fwd, m.bwd, source, 3, w);
    CHECK(picked.tokens == beam[winner].tokens);
    CHECK(picked.logprob == doctest::Approx(winner_score).epsilon(1e-12));
  }

  SUBCASE("out-of-range arguments are refused") {
    CHECK_THROWS_AS(mmi_bidi_rerank(m.fwd, m.bwd, source, 0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(mmi_bidi_rerank(m.fwd, m.bwd, source, 3, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(mmi_bidi_rerank(m.fwd, m.bwd, source, 3, 1.5), std::invalid_argument);
  }
}

TEST_CASE("weight selection scans the grid deterministically") {
  Dataset ds = four_pair_dataset();
  Vocab vocab = build_vocab(ds, 64);
  TrainConfig cfg = small_config(TrainMode::kSeq2Seq, static_cast<int>(vocab.size()));
  cfg.beam_width = 3;

  // an end-biased generator produces the same empty candidate at every
  // weight, so the scan ties everywhere and keeps the smallest value
  GeneratorParams fwd = immediate_end_model(cfg.dims, "fwd.");
  GeneratorParams bwd = immediate_end_model(cfg.dims, "bwd.");
  double w = select_mmi_weight(cfg, fwd, bwd, ds, vocab);
  CHECK(w == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(select_mmi_weight(cfg, fwd, bwd, ds, vocab) == w);

  Dataset no_valid = ds;
  for (int& tag : no_valid.split) tag = Dataset::kTrain;
  CHECK_THROWS_AS(select_mmi_weight(cfg, fwd, bwd, no_valid, vocab), std::runtime_error);
}

TEST_CASE("evaluation flags a generator stuck on the bland reply") {
  // two sources, one shared bland reply of a single repeated word, and one
  // specific reply each
  SyntheticTask task;
  task.sources = {"q0 a", "q1 a"};
  task.responses = {"b b b b", "yes q0 s", "yes q1 s"};
  task.bland = {0};
  task.joint = {{0.25, 0.25, 0.0}, {0.25, 0.0, 0.25}};
  task.validate();

  Dataset ds;
  ds.pairs.push_back({{"q0", "a"}, {"b", "b", "b", "b"}});
  ds.split.push_back(Dataset::kTest);
  ds.pairs.push_back({{"q1", "a"}, {"yes", "q1", "s"}});
  ds.split.push_back(Dataset::kTest);
  ds.pairs.push_back({{"q0", "a"}, {"b", "b", "b", "b"}});
  ds.split.push_back(Dataset::kTrain);
  Vocab vocab = build_vocab(ds, 32);

  TrainConfig cfg = small_config(TrainMode::kSeq2Seq, static_cast<int>(vocab.size()));

  // constant-logit generator: the repeated word wins every step, so the
  // response runs to the length cap as b b b b
  Rng rng(5);
  GeneratorParams gen = make_generator(cfg.dims, "fwd.", rng);
  for (Tensor p : gen.params())
    for (double& x : p.mutable_data()) x = 0.0;
  for (double& x : gen.lstm_b.mutable_data()) x = 20.0;
  int b_id = vocab.id("b");
  REQUIRE(b_id != Vocab::kUnk);
  for (int j = 0; j < cfg.dims.d_h; ++j)
    gen.out_w.mutable_data()[b_id * cfg.dims.d_h + j] = 100.0;

  Models m = init_models(cfg);
  m.fwd = gen;
  Checkpoint ckpt = make_checkpoint(cfg, m, nullptr, nullptr, 0);

  MetricsConfig mc;
  EvalResult ev = evaluate_model(ckpt, cfg, ds, vocab, mc, nullptr, &task);

  REQUIRE(ev.generations.size() == 2);
  CHECK(ev.generations[0] == Sentence{"b", "b", "b", "b"});
  CHECK(ev.generations[1] == Sentence{"b", "b", "b", "b"});

  REQUIRE(ev.source_specificity.has_value());
  CHECK(*ev.source_specificity == 0.0);

  // one distinct 4-gram overall: the entropy of a single-reply bland set
  REQUIRE(ev.report.ent_4.has_value());
  CHECK(*ev.report.ent_4 == 0.0);
  REQUIRE(ev.report.dist_1.has_value());
  CHECK(*ev.report.dist_1 == doctest::Approx(1.0 / 8.0).epsilon(1e-12));
  REQUIRE(ev.report.dist_2.has_value());
  CHECK(*ev.report.dist_2 == doctest::Approx(1.0 / 6.0).epsilon(1e-12));

  SUBCASE("a test source outside the task is an error") {
    Dataset foreign = ds;
    foreign.pairs[0].src = {"mystery"};
    Vocab v2 = build_vocab(foreign, 32);
    TrainConfig c2 = cfg;
    c2.dims.vocab = static_cast<int>(v2.size());
    Models m2 = init_models(c2);
    Checkpoint ck2 = make_checkpoint(c2, m2, nullptr, nullptr, 0);
    CHECK_THROWS_WITH_AS(evaluate_model(ck2, c2, foreign, v2, mc, nullptr, &task),
                         doctest::Contains("not part of the synthetic task"),
                         std::runtime_error);
  }
}
