#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "aimlab/cli.hpp"
#include "aimlab/corpus.hpp"
#include "aimlab/metrics.hpp"
#include "aimlab/trainer.hpp"

using namespace aimlab;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

size_t count_substr(const std::string& text, const std::string& needle) {
  size_t n = 0;
  for (size_t pos = text.find(needle); pos != std::string::npos;
       pos = text.find(needle, pos + needle.size()))
    ++n;
  return n;
}

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = run_command(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

// Small enough that every pipeline stage finishes in well under a second.
std::string tiny_config_json() {
  TrainConfig cfg;
  cfg.mode = TrainMode::kAim;
  cfg.batch_size = 4;
  cfg.pretrain_epochs = 2;
  cfg.adv_steps = 2;
  cfg.beam_width = 3;
  cfg.seed = 7;
  cfg.dims.vocab = 32;
  cfg.dims.d_w = 8;
  cfg.dims.d_h = 10;
  cfg.dims.d_e = 6;
  cfg.dims.max_src_len = 4;
  cfg.dims.max_steps = 4;
  return save_config(cfg);
}

}  // namespace

TEST_CASE("config files fill defaults and round trip") {
  TrainConfig defaults = parse_config("");
  CHECK(defaults.lambda == 0.1);
  CHECK(defaults.mle_weight == 0.001);
  CHECK(parse_config("  \n\t ").seed == defaults.seed);

  TrainConfig cfg;
  cfg.mode = TrainMode::kDaim;
  cfg.lambda = 0.35;
  cfg.backward_weight = 0.5;
  cfg.lr_disc = 2e-4;
  cfg.batch_size = 9;
  cfg.seed = 987654321098765ull;
  cfg.dims.d_h = 48;
  cfg.dims.max_steps = 7;
  TrainConfig back = parse_config(save_config(cfg));
  CHECK(config_canonical(back) == config_canonical(cfg));
  CHECK(config_hash(back) == config_hash(cfg));

  SUBCASE("through an actual file") {
    fs::path dir = fresh_dir("aimlab_cli_cfg");
    write_file(dir / "c.json", save_config(cfg));
    CHECK(config_canonical(load_config((dir / "c.json").string())) == config_canonical(cfg));

    write_file(dir / "empty.json", "");
    TrainConfig fresh = load_config((dir / "empty.json").string());
    CHECK(fresh.lambda == 0.1);
    CHECK(fresh.mle_weight == 0.001);
    fs::remove_all(dir);
  }

  SUBCASE("partial files keep the other defaults") {
    TrainConfig partial = parse_config(R"({"lambda": 0.2, "dims": {"d_h": 12}})");
    CHECK(partial.lambda == 0.2);
    CHECK(partial.dims.d_h == 12);
    CHECK(partial.mle_weight == 0.001);
    CHECK(partial.dims.d_w == TrainConfig{}.dims.d_w);
  }
}

TEST_CASE("config files reject unknown keys, bad types, and bad values by path") {
  CHECK_THROWS_WITH_AS(parse_config(R"({"momentum": 0.9})"), doctest::Contains("momentum"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(R"({"dims": {"d_q": 3}})"), doctest::Contains("dims.d_q"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(R"({"lambda": "high"})"), doctest::Contains("lambda"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(R"({"lambda": -1})"), doctest::Contains("lambda"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(R"({"seed": -4})"), doctest::Contains("seed"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(R"({"mode": "warp"})"), doctest::Contains("warp"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config(R"({"dims": 3})"), doctest::Contains("dims"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_config("[1, 2]"), doctest::Contains("top level"),
                       std::invalid_argument);
  CHECK_THROWS_AS(parse_config("{nope"), std::invalid_argument);
}

TEST_CASE("synthetic task tables survive the json round trip") {
  SyntheticTask task = bland_trap_task(3, 2, 2, 0.5);
  SyntheticTask back = task_from_json(task_to_json(task));
  back.validate();
  CHECK(back.sources == task.sources);
  CHECK(back.responses == task.responses);
  CHECK(back.joint == task.joint);
  CHECK(back.bland == task.bland);

  CHECK_THROWS_WITH_AS(task_from_json(R"({"sources": []})"), doctest::Contains("missing key"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      task_from_json(
          R"({"sources": [], "responses": [], "joint": [], "bland": [], "extra": 1})"),
      doctest::Contains("extra"), std::invalid_argument);
}

TEST_CASE("run manifests are valid structured documents") {
  RunManifest m;
  m.command = "train";
  m.seed = 42;
  m.config_json = save_config(TrainConfig{});
  m.artifacts = {"model.ckpt", "curves.csv"};
  m.warnings = {"discriminator saturated"};
  m.elapsed_seconds = 1.5;

  nlohmann::json j = nlohmann::json::parse(m.to_json());
  CHECK(j["command"] == "train");
  CHECK(j["seed"] == 42);
  CHECK(j["config"]["lambda"] == 0.1);
  CHECK(j["artifacts"].size() == 2);
  CHECK(j["warnings"][0] == "discriminator saturated");

  RunManifest empty;
  empty.command = "metrics";
  nlohmann::json k = nlohmann::json::parse(empty.to_json());
  CHECK(k["config"].is_null());
  CHECK(k["artifacts"].empty());
}

TEST_CASE("plot emission renders every logged point and is byte stable") {
  fs::path dir = fresh_dir("aimlab_cli_plots");

  write_file(dir / "curves.csv",
             "step,disc_loss,mle\n0,1.5,3.0\n1,1.2,2.5\n2,1.0,2.1\n3,0.9,1.8\n");
  auto written = emit_plots(dir.string());
  REQUIRE(written == std::vector<std::string>{"curves.svg"});
  std::string svg = read_file(dir / "curves.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(count_substr(svg, "<polyline") == 2);
  CHECK(count_substr(svg, "<circle") == 8);  // 4 steps, 2 series
  CHECK(svg.find("disc_loss") != std::string::npos);

  std::string again = read_file(dir / "curves.svg");
  emit_plots(dir.string());
  CHECK(read_file(dir / "curves.svg") == again);

  SUBCASE("single-length responses give a single bar") {
    write_file(dir / "generations.txt", "a b c\nd e f\ng h i\n");
    auto more = emit_plots(dir.string());
    CHECK(more == std::vector<std::string>{"curves.svg", "lengths.svg"});
    std::string hist = read_file(dir / "lengths.svg");
    CHECK(count_substr(hist, "class=\"bar\"") == 1);
    CHECK(hist.find("response length") != std::string::npos);
  }

  SUBCASE("mixed lengths give one bar per observed length") {
    write_file(dir / "generations.txt", "a\nb c\nd e\nf g h\n");
    emit_plots(dir.string());
    CHECK(count_substr(read_file(dir / "lengths.svg"), "class=\"bar\"") == 3);
  }

  SUBCASE("malformed rows are rejected with their position") {
    write_file(dir / "curves.csv", "step,a\n0,1.0\n1,oops\n");
    CHECK_THROWS_WITH_AS(emit_plots(dir.string()), doctest::Contains("row 2"),
                         std::runtime_error);
  }

  fs::remove_all(dir);
  fs::create_directories(dir);
  CHECK_THROWS_WITH_AS(emit_plots(dir.string()), doctest::Contains("emit_plots"),
                       std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("metrics subcommand scores a fixture end to end") {
  fs::path dir = fresh_dir("aimlab_cli_metrics");
  write_file(dir / "h.txt", "the cat sat on the mat\na dog ran far away today\n");
  write_file(dir / "r.txt", "the cat sat on a mat\nthe dog ran very far away\n");
  write_file(dir / "e.vec",
             "the 1 0 0\ncat 0 1 0\nsat 0 0 1\non 1 1 0\na 0 1 1\nmat 1 0 1\ndog 1 1 1\n"
             "ran 0.5 1 0\nfar 1 0.5 0\naway 0 1 0.5\ntoday 0.5 0 1\nvery 1 0 0.5\n");

  auto r = cli({"metrics", "--hyp", (dir / "h.txt").string(), "--ref", (dir / "r.txt").string(),
                "--emb", (dir / "e.vec").string(), "--run-dir", dir.string(), "--name", "m"});
  REQUIRE(r.code == 0);

  MetricsReport report = MetricsReport::from_json(read_file(dir / "m" / "report.json"));
  CHECK(report.n_pairs == 2);
  CHECK(report.bleu.has_value());
  CHECK(report.rouge_l.has_value());
  CHECK(report.greedy.has_value());
  CHECK(report.average.has_value());
  CHECK(report.extreme.has_value());
  CHECK(report.dist_1.has_value());
  CHECK(report.dist_2.has_value());
  CHECK(report.ent_4.has_value());
  CHECK(*report.bleu > 0.0);
  CHECK(*report.bleu < 1.0);

  std::string csv = read_file(dir / "m" / "report.csv");
  CHECK(csv.find("metric,value") == 0);
  CHECK(csv.find("bleu,") != std::string::npos);
  CHECK(csv.find("greedy,") != std::string::npos);

  nlohmann::json manifest = nlohmann::json::parse(read_file(dir / "m" / "manifest.json"));
  CHECK(manifest["command"] == "metrics");
  for (const auto& artifact : manifest["artifacts"])
    CHECK(fs::exists(dir / "m" / artifact.get<std::string>()));

  SUBCASE("a missing required flag names it and exits 1") {
    auto bad = cli({"metrics", "--ref", (dir / "r.txt").string()});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("--hyp") != std::string::npos);
  }

  SUBCASE("an unknown subcommand exits 1") {
    auto bad = cli({"frobnicate"});
    CHECK(bad.code == 1);
  }

  SUBCASE("help exits 0") {
    auto help = cli({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("metrics") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("the full pipeline runs through the command line") {
  fs::path dir = fresh_dir("aimlab_cli_pipeline");
  write_file(dir / "tiny.json", tiny_config_json());
  const std::string root = dir.string();
  const std::string cfg = (dir / "tiny.json").string();

  auto synth = cli({"synth", "--sources", "3", "--specifics", "2", "--bland", "2", "--count",
                    "60", "--seed", "5", "--run-dir", root, "--name", "synth"});
  REQUIRE(synth.code == 0);
  const std::string corpus = (dir / "synth" / "corpus.tsv").string();
  CHECK_NOTHROW(load_task((dir / "synth" / "task.json").string()));
  Dataset ds = load_tsv(corpus);
  CHECK(ds.pairs.size() == 60);

  auto pre = cli({"pretrain", "--config", cfg, "--data", corpus, "--run-dir", root, "--name",
                  "pre", "--seed", "9"});
  REQUIRE(pre.code == 0);
  Checkpoint pre_ckpt = load_checkpoint((dir / "pre" / "pretrained.ckpt").string());
  CHECK(pre_ckpt.step > 0);
  nlohmann::json pre_manifest = nlohmann::json::parse(read_file(dir / "pre" / "manifest.json"));
  CHECK(pre_manifest["seed"] == 9);  // the flag overrides the config seed
  CHECK(nlohmann::json::parse(read_file(dir / "pre" / "config.json"))["seed"] == 9);
  for (const auto& artifact : pre_manifest["artifacts"])
    CHECK(fs::exists(dir / "pre" / artifact.get<std::string>()));
  CHECK(fs::exists(dir / "pre" / "curves.svg"));

  Vocab vocab = load_vocab((dir / "pre" / "vocab.txt").string());
  CHECK(vocab.size() > 4);

  auto train = cli({"train", "--config", cfg, "--data", corpus, "--from",
                    (dir / "pre" / "pretrained.ckpt").string(), "--run-dir", root, "--name",
                    "adv", "--seed", "9"});
  REQUIRE(train.code == 0);
  CHECK(fs::exists(dir / "adv" / "model.ckpt"));
  std::string curves = read_file(dir / "adv" / "curves.csv");
  CHECK(curves.find("step,disc_loss,mi_forward,mi_backward,mle") == 0);
  CHECK(count_substr(curves, "\n") == 3);  // header plus adv_steps rows

  auto eval = cli({"eval", "--config", cfg, "--data", corpus, "--ckpt",
                   (dir / "adv" / "model.ckpt").string(), "--vocab",
                   (dir / "pre" / "vocab.txt").string(), "--task",
                   (dir / "synth" / "task.json").string(), "--no-entropy", "--run-dir", root,
                   "--name", "eval", "--seed", "9"});
  REQUIRE(eval.code == 0);
  MetricsReport report = MetricsReport::from_json(read_file(dir / "eval" / "report.json"));
  CHECK(report.n_pairs == 6);  // a tenth of the corpus lands in the test split
  CHECK(read_file(dir / "eval" / "report.csv").find("source_specificity,") !=
        std::string::npos);
  CHECK(fs::exists(dir / "eval" / "generations.txt"));
  CHECK(fs::exists(dir / "eval" / "lengths.svg"));

  write_file(dir / "srcs.txt", "ask q0\nask q1\n");
  auto gen = cli({"generate", "--config", cfg, "--ckpt", (dir / "adv" / "model.ckpt").string(),
                  "--vocab", (dir / "pre" / "vocab.txt").string(), "--src",
                  (dir / "srcs.txt").string(), "--run-dir", root, "--name", "gen"});
  REQUIRE(gen.code == 0);
  CHECK(count_substr(read_file(dir / "gen" / "generations.txt"), "\n") == 2);

  auto rerank = cli({"rerank", "--config", cfg, "--ckpt", (dir / "adv" / "model.ckpt").string(),
                     "--vocab", (dir / "pre" / "vocab.txt").string(), "--src",
                     (dir / "srcs.txt").string(), "--w-mmi", "0.3", "--run-dir", root, "--name",
                     "rr"});
  REQUIRE(rerank.code == 0);
  CHECK(count_substr(read_file(dir / "rr" / "reranked.txt"), "\n") == 2);

  SUBCASE("identical invocations give identical artifacts") {
    auto again = cli({"pretrain", "--config", cfg, "--data", corpus, "--run-dir", root,
                      "--name", "pre2", "--seed", "9"});
    REQUIRE(again.code == 0);
    CHECK(read_file(dir / "pre2" / "pretrained.ckpt") ==
          read_file(dir / "pre" / "pretrained.ckpt"));
    CHECK(read_file(dir / "pre2" / "curves.csv") == read_file(dir / "pre" / "curves.csv"));
    CHECK(read_file(dir / "pre2" / "curves.svg") == read_file(dir / "pre" / "curves.svg"));
  }

  SUBCASE("cold start excludes a warm start") {
    auto both = cli({"train", "--config", cfg, "--data", corpus, "--from",
                     (dir / "pre" / "pretrained.ckpt").string(), "--cold-start", "--run-dir",
                     root, "--name", "x"});
    CHECK(both.code == 1);
  }

  SUBCASE("a config error surfaces as a user error") {
    write_file(dir / "bad.json", R"({"lambda": -2})");
    auto bad = cli({"pretrain", "--config", (dir / "bad.json").string(), "--data", corpus,
                    "--run-dir", root, "--name", "bad"});
    CHECK(bad.code == 1);
    CHECK(bad.err.find("lambda") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("built-in check suites pass and report through exit codes") {
  fs::path dir = fresh_dir("aimlab_cli_checks");
  auto self = cli({"selftest", "--run-dir", dir.string(), "--name", "self"});
  CHECK(self.code == 0);
  CHECK(count_substr(self.out, "ok   ") == 7);
  CHECK(self.err.empty());

  auto bench = cli({"gradbench", "--run-dir", dir.string(), "--name", "bench"});
  CHECK(bench.code == 0);
  CHECK(bench.out.find("all passed") != std::string::npos);
  nlohmann::json doc = nlohmann::json::parse(read_file(dir / "bench" / "gradbench.json"));
  CHECK(doc.is_array());
  CHECK(doc.size() >= 30);
  for (const auto& row : doc) CHECK(row["pass"] == true);
  fs::remove_all(dir);
}
