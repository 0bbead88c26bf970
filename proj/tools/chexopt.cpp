// chexopt: synthetic chest X-ray classification experiment harness.
//
// Exit codes: 0 success, 2 configuration/validation, 3 I/O, 4 numerically
// degenerate result, 1 anything else.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chexopt/config.hpp"
#include "chexopt/data.hpp"
#include "chexopt/error.hpp"
#include "chexopt/metrics.hpp"
#include "chexopt/train.hpp"

namespace fs = std::filesystem;
using namespace chexopt;
using nlohmann::json;

namespace {

config::CliConfig load_config(const std::string& path) {
  return path.empty() ? config::CliConfig::from_json(json::object()) : config::CliConfig::load(path);
}

std::string counts_line(const std::array<std::size_t, data::kNumClasses>& c) {
  std::ostringstream os;
  std::size_t total = 0;
  for (std::size_t k = 0; k < data::kNumClasses; ++k) {
    os << (k ? ", " : "") << data::class_names()[k] << ' ' << c[k];
    total += c[k];
  }
  os << " (total " << total << ')';
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
  if (!f) throw IoError("write failed: " + p.string());
}

bool same_dir(const fs::path& a, const fs::path& b) {
  std::error_code ec;
  return fs::exists(b) && fs::equivalent(a, b, ec);
}

// Saves m under out; images are copied when out is not the source directory.
fs::path save_to(data::DatasetManifest& m, const fs::path& source_dir, const fs::path& out) {
  if (!same_dir(source_dir, out))
    for (auto& r : m.records) r.path.clear();
  const fs::path p = data::save_manifest(m, out);
  std::cout << "manifest: " << p.string() << "\n"
            << "manifest hash: " << config::hex64(config::file_hash(p)) << "\n";
  return p;
}

fs::path manifest_dir(const fs::path& p) { return fs::is_directory(p) ? p : p.parent_path(); }

// A run directory, or a directory whose subdirectories are run directories.
std::vector<fs::path> expand_runs(const std::vector<std::string>& args) {
  std::vector<fs::path> out;
  for (const auto& a : args) {
    const fs::path p = a;
    if (fs::exists(p / "summary.json") || fs::is_regular_file(p)) {
      out.push_back(p);
      continue;
    }
    if (!fs::is_directory(p)) throw IoError("no run summary at " + p.string());
    std::vector<fs::path> sub;
    for (const auto& e : fs::directory_iterator(p))
      if (fs::exists(e.path() / "summary.json")) sub.push_back(e.path());
    if (sub.empty()) throw IoError("no run summaries under " + p.string());
    std::sort(sub.begin(), sub.end());
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  std::string config, out;
  std::optional<std::size_t> per_class, image_size;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a) {
  auto cfg = load_config(a.config);
  if (a.per_class) cfg.data.per_class.fill(*a.per_class);
  if (a.image_size) cfg.data.image_size = *a.image_size;
  if (a.seed) cfg.data.seed = *a.seed;
  cfg.validate();
  auto m = data::generate_synthetic(cfg.data.per_class, cfg.data.image_size, cfg.data.seed);
  std::cout << "generated " << counts_line(m.counts()) << " at " << cfg.data.image_size << "x"
            << cfg.data.image_size << ", seed " << cfg.data.seed << "\n";
  data::save_manifest(m, a.out);
  const fs::path p = fs::path(a.out) / "manifest.json";
  std::cout << "manifest: " << p.string() << "\n"
            << "manifest hash: " << config::hex64(config::file_hash(p)) << "\n";
  return 0;
}

struct BalanceArgs {
  std::string config, manifest, out;
  std::optional<std::size_t> target;
  std::optional<std::uint64_t> seed;
};

int cmd_balance(const BalanceArgs& a) {
  auto cfg = load_config(a.config);
  const std::optional<std::size_t> target = a.target ? a.target : cfg.data.balance_target;
  if (!target) throw ConfigError("balance: no target; pass --target or set data.balance.target");
  const std::uint64_t seed = a.seed.value_or(cfg.data.seed);
  auto m = data::load_manifest(a.manifest);
  const auto before = m.counts();
  std::cout << "input: " << counts_line(before) << "\n";
  for (std::size_t k = 0; k < data::kNumClasses; ++k)
    if (before[k] == 0) throw ConfigError("balance: class " + data::class_names()[k] + " has no images");

  const bool balanced = std::all_of(before.begin(), before.end(), [&](std::size_t n) { return n == *target; });
  if (balanced) {
    std::cout << "already balanced at " << *target << " per class; nothing to do\n";
    if (!same_dir(manifest_dir(a.manifest), a.out)) save_to(m, manifest_dir(a.manifest), a.out);
    return 0;
  }
  auto b = data::balance_dataset(m, *target, cfg.data.balance_augmentation, seed);
  std::array<std::size_t, data::kNumClasses> aug{};
  for (const auto& r : b.records)
    if (r.origin == data::Origin::Augmented) ++aug[r.label];
  std::cout << "balanced: " << counts_line(b.counts()) << "\n"
            << "augmented: " << counts_line(aug) << "\n";
  save_to(b, manifest_dir(a.manifest), a.out);
  return 0;
}

struct SplitArgs {
  std::string config, manifest, out;
  std::optional<std::uint64_t> seed;
};

int cmd_split(const SplitArgs& a) {
  auto cfg = load_config(a.config);
  const std::uint64_t seed = a.seed.value_or(cfg.data.seed);
  auto m = data::load_manifest(a.manifest);
  auto s = data::stratified_split(m, cfg.data.split, seed);
  std::cout << "train: " << counts_line(s.counts(data::Split::Train)) << "\n"
            << "val:   " << counts_line(s.counts(data::Split::Val)) << "\n"
            << "test:  " << counts_line(s.counts(data::Split::Test)) << "\n";
  const auto leak = data::leakage_report(s);
  std::cout << "augmented copies in a different split from their parent: " << leak.cross_split
            << " of " << leak.augmented << "\n";
  save_to(s, manifest_dir(a.manifest), a.out);
  return 0;
}

struct TrainArgs {
  std::string config, data, out, arm = "proposed", seeds;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, batch_size, parallel, stop_after;
  std::optional<double> lr;
  bool resume = false;
};

int cmd_train(const TrainArgs& a) {
  auto cfg = load_config(a.config);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.lr) cfg.train.adamw.lr = *a.lr;
  if (a.parallel) cfg.parallel = *a.parallel;
  if (!a.seeds.empty()) cfg.seeds = config::parse_seeds(a.seeds);
  if (a.seed) cfg.seeds = {*a.seed};
  if (a.arm != "proposed" && a.arm != "baseline" && a.arm != "both")
    throw ConfigError("--arm must be proposed, baseline or both");
  cfg.validate();
  const fs::path out = a.out.empty() ? cfg.report.out_dir : fs::path(a.out);

  auto manifest = data::load_manifest(a.data);
  std::vector<train::TrainConfig> arms;
  if (a.arm != "baseline") arms.push_back(cfg.train);
  if (a.arm != "proposed") arms.push_back(train::TrainConfig::ablated_baseline(cfg.train));

  struct Job {
    train::TrainConfig cfg;
    fs::path dir;
  };
  std::vector<Job> jobs;
  for (const auto& arm : arms) {
    for (auto s : cfg.seeds) {
      Job j{arm, out / arm.arm / ("seed_" + std::to_string(s))};
      j.cfg.seed = s;
      jobs.push_back(std::move(j));
    }
  }
  const std::size_t workers = train::worker_cap(cfg.parallel);
  std::mutex io;
  std::vector<train::RunSummary> results(jobs.size());
  train::parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const Job& job = jobs[i];
    train::RunOptions opts;
    opts.resume = a.resume;
    opts.stop_after_epoch = a.stop_after;
    opts.on_epoch = [&](const train::EpochRecord& e) {
      std::lock_guard lock(io);
      std::printf("[%s seed %llu] epoch %zu/%zu lr %.3e loss %.4f train_acc %.4f val_acc %.4f val_f1 %.4f%s%s\n",
                  job.cfg.arm.c_str(), static_cast<unsigned long long>(job.cfg.seed), e.epoch,
                  job.cfg.epochs, e.lr, e.train.mean_loss, e.train.train_accuracy, e.val_accuracy,
                  e.val_macro_f1, e.train.skipped_steps ? " (skipped steps)" : "",
                  e.checkpointed ? " *" : "");
      std::fflush(stdout);
    };
    results[i] = train::run_experiment(job.cfg, manifest, job.dir, opts);
    std::lock_guard lock(io);
    const auto& r = results[i];
    if (r.completed) {
      std::printf("[%s seed %llu] best epoch %zu (val macro-F1 %.4f); test accuracy %s%%, macro-F1 %s%%; summary hash %s\n",
                  r.arm.c_str(), static_cast<unsigned long long>(r.seed), r.best_epoch,
                  r.best_val_macro_f1, pct(r.test.accuracy).c_str(), pct(r.test.f1).c_str(),
                  config::hex64(config::file_hash(job.dir / "summary.json")).c_str());
    } else {
      std::printf("[%s seed %llu] stopped after epoch %zu; rerun with --resume to continue\n",
                  r.arm.c_str(), static_cast<unsigned long long>(r.seed), r.history.size());
    }
    std::fflush(stdout);
  });

  if (arms.size() == 2 && cfg.seeds.size() >= 2 && !a.stop_after) {
    const std::size_t n = cfg.seeds.size();
    std::vector<train::RunSummary> p(results.begin(), results.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<train::RunSummary> b(results.begin() + static_cast<std::ptrdiff_t>(n), results.end());
    const auto rep = train::compare_runs(b, p, cfg.report.bootstrap_seed, cfg.report.bootstrap_iterations);
    train::write_report(rep, out);
    std::cout << rep.markdown;
    if (rep.degenerate) {
      std::cerr << "error: zero-variance paired differences; t, p and d are undefined\n";
      return 4;
    }
  }
  return 0;
}

struct EvaluateArgs {
  std::string config, checkpoint, data, split = "test", out;
  bool no_ema = false, single_crop = false;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const auto ck = train::read_checkpoint(a.checkpoint);
  train::TrainConfig tc;
  if (!a.config.empty()) {
    tc = config::CliConfig::load(a.config).train;
  } else if (ck.meta.contains("config")) {
    tc = train::TrainConfig::from_json(ck.meta.at("config"));
  } else {
    throw ConfigError("evaluate: checkpoint carries no config; pass --config");
  }
  train::TrainState st = train::TrainState::make(tc);
  train::restore(st, ck);

  const data::Split want = data::split_from_string(a.split);
  auto m = data::load_manifest(a.data);
  std::vector<const data::SampleRecord*> recs;
  for (const auto& r : m.records)
    if (r.split == want) recs.push_back(&r);
  if (recs.empty()) throw ConfigError("evaluate: split '" + a.split + "' is empty in " + a.data);

  PrecisionGuard precision(tc.precision);
  const bool use_ema = st.ema && !a.no_ema;
  const auto r = train::validate(st.net, recs, {!a.single_crop && tc.tencrop, tc.crop_fraction},
                                 use_ema ? &*st.ema : nullptr);
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
  const fs::path out = a.out;
  write_file(out / "confusion_matrix.txt", metrics::confusion_text(r.confusion));
  write_file(out / "per_class.csv", metrics::per_class_csv(r.confusion));
  const json j = {{"checkpoint", a.checkpoint},
                  {"epoch", ck.epoch},
                  {"split", a.split},
                  {"samples", recs.size()},
                  {"weights", use_ema ? "ema" : "raw"},
                  {"tencrop", !a.single_crop && tc.tencrop},
                  {"accuracy", r.macro.accuracy},
                  {"macro_precision", r.macro.precision},
                  {"macro_recall", r.macro.recall},
                  {"macro_f1", r.macro.f1},
                  {"loss", r.loss}};
  write_file(out / "metrics.json", j.dump(2) + "\n");
  std::cout << metrics::confusion_text(r.confusion) << "accuracy " << pct(r.macro.accuracy)
            << "%, macro-F1 " << pct(r.macro.f1) << "%\n";
  return 0;
}

struct CompareArgs {
  std::string config, out;
  std::vector<std::string> baseline, proposed;
  std::optional<std::size_t> iterations;
};

int cmd_compare(const CompareArgs& a) {
  auto cfg = load_config(a.config);
  if (a.iterations) cfg.report.bootstrap_iterations = *a.iterations;
  cfg.validate();
  std::vector<train::RunSummary> b, p;
  for (const auto& d : expand_runs(a.baseline)) b.push_back(train::load_summary(d));
  for (const auto& d : expand_runs(a.proposed)) p.push_back(train::load_summary(d));
  const auto rep = train::compare_runs(b, p, cfg.report.bootstrap_seed, cfg.report.bootstrap_iterations);
  const fs::path out = a.out.empty() ? cfg.report.out_dir : fs::path(a.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  if (cfg.report.wants("md")) write_file(out / "table7.md", rep.markdown);
  if (cfg.report.wants("csv")) write_file(out / "per_run.csv", rep.per_run_csv);
  std::cout << rep.markdown;
  if (rep.degenerate) {
    std::cerr << "error: zero-variance paired differences; t, p and d are undefined\n";
    return 4;
  }
  return 0;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

std::string run_report(const train::RunSummary& s) {
  std::ostringstream os;
  os << "# Run " << s.arm << " seed " << s.seed << "\n\n";
  if (!s.completed) {
    os << "Stopped after epoch " << s.history.size() << " of " << s.epochs << ".\n";
    return os.str();
  }
  os << "Best epoch " << s.best_epoch << " of " << s.epochs << " (validation macro-F1 "
     << pct(s.best_val_macro_f1) << "%). Test metrics use the best checkpoint"
     << (s.config.value("ema", false) ? " with EMA weights" : "")
     << (s.config.value("tencrop", true) ? " and TenCrop (averaged probabilities)" : "") << ".\n\n";
  os << "| Metric | Value (%) |\n|---|---|\n"
     << "| Accuracy | " << pct(s.test.accuracy) << " |\n"
     << "| Macro precision | " << pct(s.test.precision) << " |\n"
     << "| Macro recall | " << pct(s.test.recall) << " |\n"
     << "| Macro F1 | " << pct(s.test.f1) << " |\n\n";
  os << "## Per class\n\n| Class | Accuracy (%) | Precision (%) | Recall (%) | F1-Score (%) | Support |\n"
        "|---|---|---|---|---|---|\n";
  const auto pc = metrics::per_class_metrics(s.test_confusion);
  for (std::size_t k = 0; k < pc.size(); ++k) {
    os << "| " << s.test_confusion.names()[k] << " | " << pct(pc[k].accuracy) << " | "
       << pct(pc[k].precision) << " | " << pct(pc[k].recall) << " | " << pct(pc[k].f1) << " | "
       << pc[k].support << " |\n";
  }
  os << "\n## Confusion matrix (test)\n\n```\n" << metrics::confusion_text(s.test_confusion) << "```\n\n";
  os << "## Epochs\n\n| Epoch | lr | Train loss | Train acc (%) | Val acc (%) | Val macro-F1 (%) | Checkpoint |\n"
        "|---|---|---|---|---|---|---|\n";
  for (const auto& e : s.history) {
    char lr[32], loss[32];
    std::snprintf(lr, sizeof lr, "%.3e", e.lr);
    std::snprintf(loss, sizeof loss, "%.4f", e.train.mean_loss);
    os << "| " << e.epoch << " | " << lr << " | " << loss << " | " << pct(e.train.train_accuracy)
       << " | " << pct(e.val_accuracy) << " | " << pct(e.val_macro_f1) << " | "
       << (e.checkpointed ? "yes" : "") << " |\n";
  }
  os << "\nId audit: " << s.audit.train << " train, " << s.audit.val << " val, " << s.audit.test
     << " test ids; " << s.audit.overlap << " train ids evaluated outside training.\n";
  return os.str();
}

int cmd_report(const ReportArgs& a) {
  for (const auto& d : expand_runs(a.runs)) {
    const auto s = train::load_summary(d);
    const fs::path dir = fs::is_directory(d) ? d : d.parent_path();
    const fs::path out = a.out.empty() ? dir : fs::path(a.out) / (s.arm + "_seed_" + std::to_string(s.seed));
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    write_file(out / "report.md", run_report(s));
    if (s.completed) {
      write_file(out / "confusion_matrix.txt", metrics::confusion_text(s.test_confusion));
      write_file(out / "per_class.csv", metrics::per_class_csv(s.test_confusion));
    }
    std::cout << "report: " << (out / "report.md").string() << "\n";
  }
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const IoError*>(&e)) return 3;
  if (dynamic_cast<const DegenerateError*>(&e)) return 4;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic chest X-ray classification: data, training and statistics harness"};
  app.require_subcommand(1);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate-data", "Write a synthetic dataset (PGM images + manifest.json)");
  gen->add_option("-c,--config", ga.config, "Experiment config (JSON)");
  gen->add_option("-o,--out", ga.out, "Dataset directory")->required();
  gen->add_option("--per-class", ga.per_class, "Images per class (overrides data.per_class)");
  gen->add_option("--image-size", ga.image_size, "Image side in pixels");
  gen->add_option("--seed", ga.seed, "Data seed");

  BalanceArgs ba;
  auto* bal = app.add_subcommand("balance", "Undersample / augment every class to a common count");
  bal->add_option("-c,--config", ba.config, "Experiment config (JSON)");
  bal->add_option("-m,--manifest", ba.manifest, "Input manifest or dataset directory")->required();
  bal->add_option("-o,--out", ba.out, "Output dataset directory")->required();
  bal->add_option("--target", ba.target, "Images per class after balancing");
  bal->add_option("--seed", ba.seed, "Balancing seed");

  SplitArgs sa;
  auto* spl = app.add_subcommand("split", "Stratified train/val/test split");
  spl->add_option("-c,--config", sa.config, "Experiment config (JSON)");
  spl->add_option("-m,--manifest", sa.manifest, "Input manifest or dataset directory")->required();
  spl->add_option("-o,--out", sa.out, "Output dataset directory")->required();
  spl->add_option("--seed", sa.seed, "Split seed");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train one run per (arm, seed)");
  trn->add_option("-c,--config", ta.config, "Experiment config (JSON)");
  trn->add_option("-d,--data", ta.data, "Split dataset directory or manifest")->required();
  trn->add_option("-o,--out", ta.out, "Output root (default report.out_dir)");
  trn->add_option("--arm", ta.arm, "proposed, baseline (ablated stack) or both");
  trn->add_option("--seed", ta.seed, "Single run seed");
  trn->add_option("--seeds", ta.seeds, "Run seeds, e.g. 0..8");
  trn->add_option("--epochs", ta.epochs, "Epochs T");
  trn->add_option("--batch-size", ta.batch_size, "Batch size");
  trn->add_option("--lr", ta.lr, "Peak learning rate");
  trn->add_option("--parallel", ta.parallel, "Concurrent runs (capped by CHEXOPT_THREADS)");
  trn->add_flag("--resume", ta.resume, "Continue from resume.ckpt where present");
  trn->add_option("--stop-after", ta.stop_after, "Stop after this epoch (resumable)");

  EvaluateArgs ea;
  auto* evl = app.add_subcommand("evaluate", "Evaluate a checkpoint on one split");
  evl->add_option("-c,--config", ea.config, "Experiment config (default: the checkpoint's own)");
  evl->add_option("-k,--checkpoint", ea.checkpoint, "Checkpoint file")->required();
  evl->add_option("-d,--data", ea.data, "Split dataset directory or manifest")->required();
  evl->add_option("--split", ea.split, "train, val or test");
  evl->add_option("-o,--out", ea.out, "Output directory")->required();
  evl->add_flag("--no-ema", ea.no_ema, "Use raw weights even if the checkpoint has EMA weights");
  evl->add_flag("--single-crop", ea.single_crop, "Centre crop instead of TenCrop");

  CompareArgs ca;
  auto* cmp = app.add_subcommand("compare", "Paired comparison of two arms over matching seeds");
  cmp->add_option("-c,--config", ca.config, "Experiment config (report section)");
  cmp->add_option("-a,--baseline", ca.baseline, "Baseline run directories (or their parent)")->required();
  cmp->add_option("-b,--proposed", ca.proposed, "Proposed run directories (or their parent)")->required();
  cmp->add_option("-o,--out", ca.out, "Output directory (default report.out_dir)");
  cmp->add_option("--bootstrap-iterations", ca.iterations, "Bootstrap resamples");

  ReportArgs ra;
  auto* rep = app.add_subcommand("report", "Render report.md for finished runs");
  rep->add_option("-r,--run", ra.runs, "Run directories (or their parent)")->required();
  rep->add_option("-o,--out", ra.out, "Output directory (default: each run directory)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(ga);
    if (*bal) return cmd_balance(ba);
    if (*spl) return cmd_split(sa);
    if (*trn) return cmd_train(ta);
    if (*evl) return cmd_evaluate(ea);
    if (*cmp) return cmd_compare(ca);
    if (*rep) return cmd_report(ra);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 1;
}
