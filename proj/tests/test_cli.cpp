#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "chexopt/train.hpp"

namespace fs = std::filesystem;
using namespace chexopt;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + CHEXOPT_CLI_PATH + " " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path workdir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("chexopt_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// 32-pixel desk profile keeps the runs short.
const char* kTinyConfig = R"({
  "model": {"profile": {"base": "desk", "name": "desk-32", "input_size": 32}},
  "optim": {"lr": 1e-3, "ema_decay": 0.9},
  "train": {"epochs": 2, "batch_size": 8}
})";

// Split dataset with n images per class at 32x32.
fs::path make_split_data(const fs::path& w, std::size_t n) {
  const auto g = run("generate-data -o " + q(w / "raw") + " --per-class " + std::to_string(n) +
                     " --image-size 32 --seed 2");
  EXPECT_EQ(g.code, 0) << g.out;
  const auto s = run("split -m " + q(w / "raw") + " -o " + q(w / "split") + " --seed 2");
  EXPECT_EQ(s.code, 0) << s.out;
  return w / "split";
}

}  // namespace

TEST(CliGenerate, DefaultConfigWritesClassDirectories) {
  const fs::path w = workdir("gen_default");
  const auto r = run("generate-data -o " + q(w / "d"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(fs::exists(w / "d" / "manifest.json"));
  std::size_t dirs = 0;
  for (const auto& e : fs::directory_iterator(w / "d" / "images")) dirs += e.is_directory();
  EXPECT_EQ(dirs, 5u);
  EXPECT_EQ(count_ext(w / "d", ".pgm"), 2500u);
}

TEST(CliGenerate, PerClassCountAndHashRepeats) {
  const fs::path w = workdir("gen_hash");
  const auto a = run("generate-data -o " + q(w / "a") + " --per-class 10 --seed 7");
  const auto b = run("generate-data -o " + q(w / "b") + " --per-class 10 --seed 7");
  const auto c = run("generate-data -o " + q(w / "c") + " --per-class 10 --seed 8");
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(count_ext(w / "a", ".pgm"), 50u);
  auto hash = [](const std::string& out) { return out.substr(out.find("manifest hash: ")); };
  EXPECT_EQ(hash(a.out), hash(b.out));
  EXPECT_NE(hash(a.out), hash(c.out));
  EXPECT_EQ(slurp(w / "a" / "manifest.json"), slurp(w / "b" / "manifest.json"));
}

TEST(CliBalance, TenthScaleTableCountsToTarget) {
  const fs::path w = workdir("balance");
  write(w / "c.json", R"({"data": {"per_class": [274, 362, 6036, 139, 249], "image_size": 32}})");
  ASSERT_EQ(run("generate-data -c " + q(w / "c.json") + " -o " + q(w / "raw")).code, 0);
  const auto r = run("balance -m " + q(w / "raw") + " -o " + q(w / "bal") + " --target 362");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("balanced: Cardiomegaly 362, COVID-19 362, Normal 362, Pneumonia 362, "
                       "Tuberculosis 362 (total 1810)"),
            std::string::npos)
      << r.out;
  EXPECT_NE(r.out.find("augmented: Cardiomegaly 88, COVID-19 0, Normal 0, Pneumonia 223, "
                       "Tuberculosis 113 (total 424)"),
            std::string::npos)
      << r.out;
  const auto m = data::load_manifest(w / "bal", false);
  for (auto c : m.counts()) EXPECT_EQ(c, 362u);
  EXPECT_EQ(count_ext(w / "bal", ".pgm"), 1810u);

  const auto again = run("balance -m " + q(w / "bal") + " -o " + q(w / "bal") + " --target 362");
  EXPECT_EQ(again.code, 0);
  EXPECT_NE(again.out.find("already balanced"), std::string::npos) << again.out;
}

TEST(CliBalance, MissingClassNamesTheClass) {
  const fs::path w = workdir("balance_missing");
  write(w / "c.json", R"({"data": {"per_class": [5, 5, 5, 5, 0], "image_size": 32}})");
  ASSERT_EQ(run("generate-data -c " + q(w / "c.json") + " -o " + q(w / "raw")).code, 0);
  const auto r = run("balance -m " + q(w / "raw") + " -o " + q(w / "bal") + " --target 5");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("Tuberculosis"), std::string::npos) << r.out;
}

TEST(CliTrain, OneEpochOneCheckpointAndEvaluate) {
  const fs::path w = workdir("train_one");
  const fs::path data = make_split_data(w, 8);
  write(w / "c.json", kTinyConfig);
  const auto r = run("train -c " + q(w / "c.json") + " -d " + q(data) + " -o " + q(w / "runs") +
                     " --seed 0 --epochs 1");
  ASSERT_EQ(r.code, 0) << r.out;
  const fs::path run_dir = w / "runs" / "proposed" / "seed_0";
  EXPECT_EQ(count_ext(run_dir / "checkpoints", ".ckpt"), 1u);
  const auto summary = nlohmann::json::parse(slurp(run_dir / "summary.json"));
  EXPECT_TRUE(summary.at("test").contains("macro_f1"));
  EXPECT_EQ(summary.at("best_epoch"), 1);

  const std::string ck = q(run_dir / "checkpoints" / "epoch_001.ckpt");
  const auto e1 = run("evaluate -k " + ck + " -d " + q(data) + " -o " + q(w / "ev1"));
  const auto e2 = run("evaluate -k " + ck + " -d " + q(data) + " -o " + q(w / "ev2"));
  ASSERT_EQ(e1.code, 0) << e1.out;
  for (const char* f : {"confusion_matrix.txt", "per_class.csv", "metrics.json"})
    EXPECT_EQ(slurp(w / "ev1" / f), slurp(w / "ev2" / f)) << f;
  // The best checkpoint on test reproduces the run's own test matrix.
  EXPECT_EQ(slurp(w / "ev1" / "confusion_matrix.txt"), slurp(run_dir / "confusion_matrix.txt"));
  EXPECT_NE(slurp(w / "ev1" / "confusion_matrix.txt").find("%)"), std::string::npos);

  write(w / "wrong.json", R"({"model": {"profile": "full-table4"}})");
  const auto bad = run("evaluate -k " + ck + " -d " + q(data) + " -o " + q(w / "ev3") + " -c " +
                       q(w / "wrong.json"));
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.out.find("fingerprint"), std::string::npos) << bad.out;
}

TEST(CliTrain, ResumeMatchesUninterruptedRun) {
  const fs::path w = workdir("train_resume");
  const fs::path data = make_split_data(w, 8);
  write(w / "c.json", kTinyConfig);
  const std::string base = "train -c " + q(w / "c.json") + " -d " + q(data) + " --seed 3 --epochs 3 -o ";
  ASSERT_EQ(run(base + q(w / "full")).code, 0);
  const auto stop = run(base + q(w / "part") + " --stop-after 1");
  ASSERT_EQ(stop.code, 0) << stop.out;
  EXPECT_NE(stop.out.find("--resume"), std::string::npos);
  EXPECT_FALSE(fs::exists(w / "part" / "proposed" / "seed_3" / "summary.json"));
  const auto resumed = run(base + q(w / "part") + " --resume");
  ASSERT_EQ(resumed.code, 0) << resumed.out;
  EXPECT_EQ(resumed.out.find("epoch 1/3"), std::string::npos) << "epoch 1 was rerun";
  for (const char* f : {"summary.json", "metrics.csv", "lr_trace.csv", "confusion_matrix.txt"}) {
    EXPECT_EQ(slurp(w / "part" / "proposed" / "seed_3" / f), slurp(w / "full" / "proposed" / "seed_3" / f)) << f;
  }
}

TEST(CliTrain, BothArmsOverSeedsWriteComparison) {
  const fs::path w = workdir("train_both");
  const fs::path data = make_split_data(w, 6);
  write(w / "c.json", kTinyConfig);
  const auto r = run("train -c " + q(w / "c.json") + " -d " + q(data) + " -o " + q(w / "runs") +
                         " --seeds 0..1 --epochs 1 --arm both --parallel 2",
                     "CHEXOPT_THREADS=2");
  // Tiny runs can tie exactly, which is reported as degenerate (exit 4).
  ASSERT_TRUE(r.code == 0 || r.code == 4) << r.out;
  EXPECT_TRUE(fs::exists(w / "runs" / "table7.md"));
  EXPECT_TRUE(fs::exists(w / "runs" / "per_run.csv"));
  EXPECT_TRUE(fs::exists(w / "runs" / "baseline" / "seed_1" / "summary.json"));
  const auto rep = run("report -r " + q(w / "runs" / "baseline"));
  EXPECT_EQ(rep.code, 0) << rep.out;
  EXPECT_TRUE(fs::exists(w / "runs" / "baseline" / "seed_0" / "report.md"));
}

namespace {
void write_canned(const fs::path& dir, const std::string& arm, const std::vector<double>& acc) {
  for (std::size_t i = 0; i < acc.size(); ++i) {
    train::RunSummary s;
    s.arm = arm;
    s.seed = i;
    s.epochs = 1;
    s.completed = true;
    s.best_epoch = 1;
    s.test.accuracy = acc[i] / 100.0;
    s.test.precision = s.test.accuracy - 0.002 * double(i % 4);
    s.test.recall = s.test.accuracy - 0.001 * double(i % 3);
    s.test.f1 = s.test.accuracy - 0.003 * double(i % 2);
    const fs::path d = dir / ("seed_" + std::to_string(i));
    fs::create_directories(d);
    write(d / "summary.json", s.to_json().dump(2));
  }
}
}  // namespace

TEST(CliCompare, CannedSummariesRenderTableRow) {
  const fs::path w = workdir("compare");
  write_canned(w / "base", "Baseline", {95.10, 95.50, 95.20, 95.40, 95.30, 95.00, 95.60, 95.25, 95.35});
  write_canned(w / "prop", "Proposed", {96.40, 96.50, 96.30, 96.60, 96.45, 96.35, 96.55, 96.42, 96.48});
  const auto r = run("compare -a " + q(w / "base") + " -b " + q(w / "prop") + " -o " + q(w / "out") +
                     " --bootstrap-iterations 2000");
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string md = slurp(w / "out" / "table7.md");
  std::string acc_row;
  std::istringstream lines(md);
  for (std::string line; std::getline(lines, line);)
    if (line.rfind("| Accuracy (%)", 0) == 0) acc_row = line;
  ASSERT_FALSE(acc_row.empty()) << md;
  EXPECT_NE(acc_row.find("95.30"), std::string::npos) << acc_row;
  EXPECT_NE(acc_row.find("96.45"), std::string::npos) << acc_row;
  EXPECT_NE(acc_row.find("+1.15"), std::string::npos) << acc_row;
  EXPECT_NE(acc_row.find("<0.001"), std::string::npos) << acc_row;
  EXPECT_TRUE(fs::exists(w / "out" / "per_run.csv"));

  const auto swapped = run("compare -a " + q(w / "prop") + " -b " + q(w / "base") + " -o " +
                           q(w / "out2") + " --bootstrap-iterations 2000");
  ASSERT_EQ(swapped.code, 0);
  EXPECT_NE(slurp(w / "out2" / "table7.md").find("-1.15"), std::string::npos);

  const auto single = run("compare -a " + q(w / "base" / "seed_0") + " -b " + q(w / "prop" / "seed_0") +
                          " -o " + q(w / "out3"));
  EXPECT_EQ(single.code, 2);
  EXPECT_NE(single.out.find("n >= 2"), std::string::npos) << single.out;

  const auto same = run("compare -a " + q(w / "base") + " -b " + q(w / "base") + " -o " + q(w / "out4") +
                        " --bootstrap-iterations 200");
  EXPECT_EQ(same.code, 4) << same.out;
  EXPECT_TRUE(fs::exists(w / "out4" / "table7.md"));
}

TEST(CliErrors, ExitCodes) {
  const fs::path w = workdir("errors");
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("--help").code, 0);
  write(w / "bad.json", R"({"optim": {"learning_rate": 0.1}})");
  const auto unknown = run("generate-data -c " + q(w / "bad.json") + " -o " + q(w / "x"));
  EXPECT_EQ(unknown.code, 2);
  EXPECT_NE(unknown.out.find("learning_rate"), std::string::npos);
  write(w / "notjson.json", "{");
  EXPECT_EQ(run("generate-data -c " + q(w / "notjson.json") + " -o " + q(w / "x")).code, 2);
  EXPECT_EQ(run("split -m " + q(w / "missing") + " -o " + q(w / "y")).code, 3);
  EXPECT_EQ(run("generate-data -c " + q(w / "missing.json") + " -o " + q(w / "x")).code, 3);
  EXPECT_EQ(run("generate-data -o " + q(w / "x") + " --image-size 8").code, 2);
  const fs::path data = make_split_data(w, 4);
  EXPECT_EQ(run("train -d " + q(data) + " -o " + q(w / "r") + " --seeds 2..1").code, 2);
}

// ---------------------------------------------------------------------------
// Config document

#include "chexopt/config.hpp"
#include "chexopt/error.hpp"

TEST(CliConfig, PaperDefaults) {
  const auto c = config::CliConfig::from_json(nlohmann::json::object());
  EXPECT_EQ(c.train.adamw.lr, 1e-4);
  EXPECT_EQ(c.train.adamw.weight_decay, 1e-5);
  EXPECT_EQ(c.train.adamw.beta1, 0.9);
  EXPECT_EQ(c.train.adamw.beta2, 0.999);
  EXPECT_EQ(c.train.adamw.eps, 1e-8);
  EXPECT_EQ(c.train.epochs, 50u);
  EXPECT_EQ(c.train.ema_decay, 0.999);
  EXPECT_TRUE(c.train.cosine);
  EXPECT_EQ(c.data.split.train, 0.70);
  EXPECT_EQ(c.data.split.val, 0.10);
  EXPECT_EQ(c.data.split.test, 0.20);
  for (const auto* p : {&c.train.augmentation, &c.data.balance_augmentation}) {
    EXPECT_EQ(p->hflip_p, 0.5);
    EXPECT_EQ(p->rotation_deg, 15.0);
    EXPECT_EQ(p->brightness, 0.10);
    EXPECT_EQ(p->contrast, 0.10);
  }
  EXPECT_EQ(c.seeds.size(), 9u);
}

TEST(CliConfig, UnknownKeysPerSectionAndRoundTrip) {
  using nlohmann::json;
  for (const char* section : {"data", "model", "optim", "train", "report"}) {
    json j = {{section, {{"nonsense", 1}}}};
    try {
      config::CliConfig::from_json(j);
      ADD_FAILURE() << section;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find("nonsense"), std::string::npos) << e.what();
    }
  }
  EXPECT_THROW(config::CliConfig::from_json({{"extra", {}}}), ConfigError);
  EXPECT_THROW(config::CliConfig::from_json({{"report", {{"formats", {"pdf"}}}}}), ConfigError);

  const auto desk = config::CliConfig::load(fs::path(CHEXOPT_SOURCE_DIR) / "configs" / "desk_benchmark.json");
  EXPECT_EQ(desk.train.epochs, 15u);
  EXPECT_EQ(desk.train.to_json(), train::TrainConfig::desk_benchmark().to_json());
  const auto back = config::CliConfig::from_json(desk.to_json());
  EXPECT_EQ(back.to_json(), desk.to_json());
  EXPECT_NO_THROW(config::CliConfig::load(fs::path(CHEXOPT_SOURCE_DIR) / "configs" / "paper_defaults.json"));
}

TEST(CliConfig, SeedLists) {
  using V = std::vector<std::uint64_t>;
  EXPECT_EQ(config::parse_seeds("0..8"), (V{0, 1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(config::parse_seeds("4"), (V{4}));
  EXPECT_EQ(config::parse_seeds("1,3,5"), (V{1, 3, 5}));
  EXPECT_EQ(config::parse_seeds("0..2,7"), (V{0, 1, 2, 7}));
  for (const char* bad : {"", "a", "3..1", "1,1", "1,", "-1"})
    EXPECT_THROW(config::parse_seeds(bad), ConfigError) << bad;
}
