#include "chexopt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "chexopt/error.hpp"
#include "chexopt/rng.hpp"

namespace chexopt::metrics {

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<std::string> names)
    : c_(classes), cells_(classes * classes, 0), names_(std::move(names)) {
  if (classes < 1) throw ConfigError("confusion matrix: needs at least one class");
  if (names_.empty()) {
    for (std::size_t i = 0; i < classes; ++i) names_.push_back("class" + std::to_string(i));
  }
  if (names_.size() != classes) throw ConfigError("confusion matrix: name count differs from class count");
}

ConfusionMatrix ConfusionMatrix::from_counts(std::size_t classes, std::vector<std::uint64_t> cells,
                                             std::vector<std::string> names) {
  ConfusionMatrix cm(classes, std::move(names));
  if (cells.size() != classes * classes) {
    throw ShapeError("confusion matrix: expected " + std::to_string(classes * classes) +
                     " cells, got " + std::to_string(cells.size()));
  }
  cm.cells_ = std::move(cells);
  return cm;
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t n) {
  if (truth >= c_ || predicted >= c_) {
    throw ConfigError("confusion matrix: label " + std::to_string(std::max(truth, predicted)) +
                      " outside [0," + std::to_string(c_) + ")");
  }
  cells_[truth * c_ + predicted] += n;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t i) const {
  std::uint64_t s = 0;
  for (std::size_t j = 0; j < c_; ++j) s += cell(i, j);
  return s;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t j) const {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < c_; ++i) s += cell(i, j);
  return s;
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(cells_.begin(), cells_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t s = 0;
  for (std::size_t i = 0; i < c_; ++i) s += cell(i, i);
  return s;
}

OneVsRest ConfusionMatrix::one_vs_rest(std::size_t k) const {
  OneVsRest r;
  r.tp = cell(k, k);
  r.fn = row_sum(k) - r.tp;
  r.fp = col_sum(k) - r.tp;
  r.tn = total() - r.tp - r.fn - r.fp;
  return r;
}

ConfusionMatrix confusion_matrix(std::span<const std::size_t> truth,
                                 std::span<const std::size_t> predicted, std::size_t classes,
                                 std::vector<std::string> names) {
  if (truth.size() != predicted.size()) {
    throw ShapeError("confusion_matrix: " + std::to_string(truth.size()) + " true labels vs " +
                     std::to_string(predicted.size()) + " predictions");
  }
  ConfusionMatrix cm(classes, std::move(names));
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

namespace {
double ratio(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace

std::vector<ClassMetrics> per_class_metrics(const ConfusionMatrix& cm) {
  std::vector<ClassMetrics> out;
  const std::uint64_t total = cm.total();
  for (std::size_t k = 0; k < cm.classes(); ++k) {
    const auto o = cm.one_vs_rest(k);
    ClassMetrics m;
    m.accuracy = ratio(o.tp + o.tn, total);
    m.precision = ratio(o.tp, o.tp + o.fp);
    m.recall = ratio(o.tp, o.tp + o.fn);
    m.f1 = (m.precision + m.recall) == 0 ? 0.0
                                         : 2 * m.precision * m.recall / (m.precision + m.recall);
    m.support = o.tp + o.fn;
    out.push_back(m);
  }
  return out;
}

double overall_accuracy(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ConfigError("overall_accuracy: empty confusion matrix");
  return ratio(cm.trace(), cm.total());
}

double macro_average(std::span<const double> values) {
  if (values.empty()) throw ConfigError("macro_average: no per-class values");
  double s = 0;
  for (double v : values) s += v;
  return s / static_cast<double>(values.size());
}

MacroMetrics macro_metrics(const ConfusionMatrix& cm) {
  const auto pc = per_class_metrics(cm);
  std::vector<double> p, r, f;
  for (const auto& m : pc) {
    p.push_back(m.precision);
    r.push_back(m.recall);
    f.push_back(m.f1);
  }
  return {overall_accuracy(cm), macro_average(p), macro_average(r), macro_average(f)};
}

// ---------------------------------------------------------------------------

double mean(std::span<const double> x) {
  if (x.empty()) throw ConfigError("mean: empty sample");
  double s = 0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double sample_sd(std::span<const double> x) {
  if (x.size() < 2) throw ConfigError("sample_sd: need at least two values");
  const double m = mean(x);
  double ss = 0;
  for (double v : x) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

namespace {

// Lentz's method for the incomplete-beta continued fraction.
double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1, qam = a - 1;
  double c = 1, d = 1 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1) < kEps) return h;
  }
  throw DegenerateError("incomplete beta: continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0 && b > 0)) throw ConfigError("incomplete beta: a and b must be positive");
  if (!(x >= 0 && x <= 1)) throw ConfigError("incomplete beta: x must lie in [0,1]");
  if (x == 0 || x == 1) return x;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // Use the symmetry relation where the fraction converges fastest.
  if (x < (a + 1) / (a + b + 2)) return front * beta_cf(a, b, x) / a;
  return 1 - front * beta_cf(b, a, 1 - x) / b;
}

double student_t_two_tailed_p(double t, double df) {
  if (!(df > 0)) throw ConfigError("t distribution: df must be positive");
  if (std::isnan(t)) throw DegenerateError("t distribution: t is NaN");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(df / 2, 0.5, df / (df + t * t));
}

namespace {
std::vector<double> differences(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ConfigError("paired samples differ in length (" + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + ")");
  }
  if (a.size() < 2) throw ConfigError("paired test needs n >= 2 pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return d;
}
}  // namespace

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  const auto d = differences(a, b);
  const double sd = sample_sd(d);
  if (sd == 0) throw DegenerateError("paired t-test: differences have zero variance; p is undefined");
  const double n = static_cast<double>(d.size());
  TTestResult r;
  r.t = mean(d) / (sd / std::sqrt(n));
  r.df = n - 1;
  r.p = student_t_two_tailed_p(r.t, r.df);
  return r;
}

double cohens_d_paired(std::span<const double> a, std::span<const double> b) {
  const auto d = differences(a, b);
  const double sd = sample_sd(d);
  if (sd == 0) throw DegenerateError("cohen's d: differences have zero variance");
  return mean(d) / sd;
}

Interval bootstrap_ci(std::span<const double> sample, std::uint64_t seed, std::size_t iterations,
                      double level, const Statistic& statistic) {
  if (sample.size() < 2) throw ConfigError("bootstrap: need n >= 2");
  if (iterations < 1) throw ConfigError("bootstrap: iterations must be >= 1");
  if (!(level > 0 && level < 1)) throw ConfigError("bootstrap: level must lie in (0,1)");
  const Statistic stat = statistic ? statistic : Statistic([](std::span<const double> x) { return mean(x); });
  std::mt19937_64 rng(seed);
  std::vector<double> resample(sample.size()), stats(iterations);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (auto& v : resample) v = sample[uniform_index(rng, sample.size())];
    stats[it] = stat(resample);
  }
  std::sort(stats.begin(), stats.end());
  // Linear interpolation between order statistics.
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(iterations - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, iterations - 1);
    const double frac = pos - static_cast<double>(lo);
    return stats[lo] + frac * (stats[hi] - stats[lo]);
  };
  const double alpha = 1 - level;
  return {quantile(alpha / 2), quantile(1 - alpha / 2)};
}

// ---------------------------------------------------------------------------

namespace {
std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
}  // namespace

std::string per_class_csv(const ConfusionMatrix& cm) {
  std::ostringstream os;
  os << "Class,Accuracy (%),Precision (%),Recall (%),F1-Score (%),Support\n";
  const auto pc = per_class_metrics(cm);
  for (std::size_t k = 0; k < pc.size(); ++k) {
    os << cm.names()[k] << ',' << fixed(100 * pc[k].accuracy, 2) << ','
       << fixed(100 * pc[k].precision, 2) << ',' << fixed(100 * pc[k].recall, 2) << ','
       << fixed(100 * pc[k].f1, 2) << ',' << pc[k].support << '\n';
  }
  const auto m = macro_metrics(cm);
  os << "Macro average," << fixed(100 * m.accuracy, 2) << ',' << fixed(100 * m.precision, 2) << ','
     << fixed(100 * m.recall, 2) << ',' << fixed(100 * m.f1, 2) << ',' << cm.total() << '\n';
  return os.str();
}

std::string confusion_text(const ConfusionMatrix& cm) {
  const std::size_t C = cm.classes();
  std::vector<std::vector<std::string>> cells(C, std::vector<std::string>(C));
  std::size_t width = 0, label_w = std::string("True \\ Predicted").size();
  for (std::size_t i = 0; i < C; ++i) {
    label_w = std::max(label_w, cm.names()[i].size());
    const std::uint64_t row = cm.row_sum(i);
    for (std::size_t j = 0; j < C; ++j) {
      const double pct = row == 0 ? 0.0 : 100.0 * static_cast<double>(cm.cell(i, j)) / static_cast<double>(row);
      cells[i][j] = std::to_string(cm.cell(i, j)) + " (" + fixed(pct, 1) + "%)";
      width = std::max({width, cells[i][j].size(), cm.names()[j].size()});
    }
  }
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
  std::ostringstream os;
  os << pad("True \\ Predicted", label_w);
  for (std::size_t j = 0; j < C; ++j) os << "  " << pad(cm.names()[j], width);
  os << '\n';
  for (std::size_t i = 0; i < C; ++i) {
    os << pad(cm.names()[i], label_w);
    for (std::size_t j = 0; j < C; ++j) os << "  " << pad(cells[i][j], width);
    os << '\n';
  }
  os << "Total " << cm.total() << ", correct " << cm.trace() << " ("
     << fixed(100.0 * static_cast<double>(cm.trace()) / static_cast<double>(std::max<std::uint64_t>(cm.total(), 1)), 2)
     << "%)\n";
  return os.str();
}

ComparisonRow compare_metric(const std::string& metric, std::span<const double> baseline,
                             std::span<const double> proposed, std::uint64_t bootstrap_seed,
                             std::size_t bootstrap_iterations) {
  if (baseline.size() != proposed.size()) {
    throw ConfigError("compare: arms have different run counts (" + std::to_string(baseline.size()) +
                      " vs " + std::to_string(proposed.size()) + ")");
  }
  if (baseline.size() < 2) throw ConfigError("compare: need n >= 2 runs per arm");
  ComparisonRow row;
  row.metric = metric;
  auto arm = [&](std::span<const double> x, std::uint64_t salt) {
    return ArmStats{mean(x), sample_sd(x),
                    bootstrap_ci(x, derive_seed(bootstrap_seed, metric, salt), bootstrap_iterations)};
  };
  row.baseline = arm(baseline, 0);
  row.proposed = arm(proposed, 1);
  row.delta = row.proposed.mean - row.baseline.mean;
  try {
    row.test = paired_t_test(proposed, baseline);
    row.cohens_d = cohens_d_paired(proposed, baseline);
  } catch (const DegenerateError&) {
    row.degenerate = true;
  }
  return row;
}

std::string format_p(double p) {
  if (p < 0.001) return "<0.001";
  return fixed(p, 3);
}

std::string comparison_markdown(const std::vector<ComparisonRow>& rows, std::size_t n_runs,
                                const std::string& baseline_name, const std::string& proposed_name) {
  std::ostringstream os;
  os << "Overall performance comparison across " << n_runs << " independent runs\n\n";
  os << "| Metric | " << baseline_name << " | " << proposed_name
     << " | Absolute Δ | t | p-value | Cohen's d (paired) | " << baseline_name << " 95% CI | "
     << proposed_name << " 95% CI |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    const std::string sign = r.delta >= 0 ? "+" : "";
    os << "| " << r.metric << " | " << fixed(r.baseline.mean, 2) << " ± " << fixed(r.baseline.sd, 2)
       << " | " << fixed(r.proposed.mean, 2) << " ± " << fixed(r.proposed.sd, 2) << " | " << sign
       << fixed(r.delta, 2) << " | ";
    if (r.degenerate) {
      os << "— | — | — | ";
    } else {
      os << fixed(r.test.t, 3) << " | " << format_p(r.test.p) << " | " << fixed(r.cohens_d, 2) << " | ";
    }
    os << "[" << fixed(r.baseline.ci.lo, 2) << ", " << fixed(r.baseline.ci.hi, 2) << "] | ["
       << fixed(r.proposed.ci.lo, 2) << ", " << fixed(r.proposed.ci.hi, 2) << "] |\n";
  }
  os << "\nPaired t-tests pair runs by seed (df = n-1); Cohen's d is mean(d)/sd(d) over the paired "
        "differences; intervals are percentile bootstrap over run means.\n";
  bool any_degenerate = false;
  for (const auto& r : rows) any_degenerate |= r.degenerate;
  if (any_degenerate) os << "— : paired differences have zero variance, so t, p and d are undefined.\n";
  return os.str();
}

}  // namespace chexopt::metrics
