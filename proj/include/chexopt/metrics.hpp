#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace chexopt::metrics {

struct OneVsRest {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes, std::vector<std::string> names = {});
  // Row-major counts, cell[i*C + j] = true i predicted j.
  static ConfusionMatrix from_counts(std::size_t classes, std::vector<std::uint64_t> cells,
                                     std::vector<std::string> names = {});

  void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1);

  std::size_t classes() const { return c_; }
  const std::vector<std::string>& names() const { return names_; }
  std::uint64_t cell(std::size_t i, std::size_t j) const { return cells_[i * c_ + j]; }
  const std::vector<std::uint64_t>& cells() const { return cells_; }
  std::uint64_t row_sum(std::size_t i) const;
  std::uint64_t col_sum(std::size_t j) const;
  std::uint64_t total() const;
  std::uint64_t trace() const;
  OneVsRest one_vs_rest(std::size_t k) const;

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t c_ = 0;
  std::vector<std::uint64_t> cells_;
  std::vector<std::string> names_;
};

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t classes,
                                 std::vector<std::string> names = {});

struct ClassMetrics {
  double accuracy = 0;  // one-vs-rest (TP+TN)/total
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  std::uint64_t support = 0;
};

// Zero denominators give 0.
std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm);
double overall_accuracy(const ConfusionMatrix& cm);
double macro_average(std::span<const double> values);

struct MacroMetrics {
  double accuracy = 0;  // overall trace/total
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};
MacroMetrics macro_metrics(const ConfusionMatrix& cm);

// ---------------------------------------------------------------------------
// Statistics

double mean(std::span<const double> x);
// Sample standard deviation (n-1 denominator).
double sample_sd(std::span<const double> x);

// I_x(a, b) by continued fraction.
double regularized_incomplete_beta(double a, double b, double x);
// P(|T| >= |t|) for Student's t with df degrees of freedom.
double student_t_two_tailed_p(double t, double df);

struct TTestResult {
  double t = 0;
  double df = 0;
  double p = 0;
};

// Throws DegenerateError when the differences have zero variance.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);
// Paired effect size mean(d)/sd(d), d = a - b.
double cohens_d_paired(std::span<const double> a, std::span<const double> b);

struct Interval {
  double lo = 0;
  double hi = 0;
};

using Statistic = std::function<double(std::span<const double>)>;

// Percentile bootstrap.
Interval bootstrap_ci(std::span<const double> sample, std::uint64_t seed,
                      std::size_t iterations = 10000, double level = 0.95,
                      const Statistic& statistic = {});

// ---------------------------------------------------------------------------
// Reports

// Per-class table: Class,Accuracy (%),Precision (%),Recall (%),F1-Score (%),Support
// followed by a macro-average row.
std::string per_class_csv(const ConfusionMatrix& cm);
// Counts with row percentages, one line per true class.
std::string confusion_text(const ConfusionMatrix& cm);

struct ArmStats {
  double mean = 0;
  double sd = 0;
  Interval ci;
};

struct ComparisonRow {
  std::string metric;       // e.g. "Accuracy (%)"
  ArmStats baseline;
  ArmStats proposed;
  double delta = 0;         // proposed mean - baseline mean
  bool degenerate = false;  // zero-variance differences: t, p, d undefined
  TTestResult test;
  double cohens_d = 0;
};

// Builds one row from paired per-seed values (already in report units).
ComparisonRow compare_metric(const std::string& metric, std::span<const double> baseline,
                             std::span<const double> proposed, std::uint64_t bootstrap_seed,
                             std::size_t bootstrap_iterations = 10000);

std::string format_p(double p);
std::string comparison_markdown(const std::vector<ComparisonRow>& rows, std::size_t n_runs,
                                const std::string& baseline_name = "Baseline",
                                const std::string& proposed_name = "Proposed");

}  // namespace chexopt::metrics
