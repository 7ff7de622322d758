#pragma once

// Fréchet loss distributions: evaluation, sampling, quick (median based)
// estimation, sample classification, and least-squares fits to quantile tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ftree/detail/integrate.hpp"
#include "ftree/detail/random.hpp"
#include "ftree/errors.hpp"

namespace ftree {

/// Fréchet law F(x) = exp[-((x - epsilon) / (u - epsilon))^(-1/lambda)] for x > epsilon.
///
/// `lambda` is the shape (tail index), `epsilon` the lower support limit and `u`
/// the point where F(u) = exp(-1).
struct FrechetParams {
  double lambda = 1.0;
  double u = 1.0;
  double epsilon = 0.0;

  [[nodiscard]] double scale() const { return u - epsilon; }
  [[nodiscard]] bool valid() const {
    return std::isfinite(lambda) && std::isfinite(u) && std::isfinite(epsilon) && lambda > 0.0 &&
           u > epsilon;
  }
  [[nodiscard]] bool has_finite_mean() const { return lambda < 1.0; }

  friend bool operator==(const FrechetParams&, const FrechetParams&) = default;
};

inline void require_valid(const FrechetParams& p) {
  if (!p.valid()) {
    std::ostringstream os;
    os << "invalid Frechet parameters (lambda=" << p.lambda << ", u=" << p.u
       << ", epsilon=" << p.epsilon << "): need lambda > 0 and u > epsilon";
    throw ParameterError(os.str());
  }
}

inline void require_finite_mean(const FrechetParams& p) {
  if (!p.has_finite_mean()) {
    std::ostringstream os;
    os << "Frechet law with lambda=" << p.lambda << " has no finite mean";
    throw InfiniteMeanError(os.str());
  }
}

inline double cdf(const FrechetParams& p, double xi) {
  require_valid(p);
  if (!(xi > p.epsilon)) return 0.0;
  const double z = (xi - p.epsilon) / p.scale();
  return std::exp(-std::pow(z, -1.0 / p.lambda));
}

inline double quantile(const FrechetParams& p, double prob) {
  require_valid(p);
  if (!(prob > 0.0 && prob < 1.0)) {
    std::ostringstream os;
    os << "quantile level " << prob << " outside (0, 1)";
    throw DomainError(os.str());
  }
  return p.epsilon + p.scale() * std::pow(-std::log(prob), -p.lambda);
}

inline double median(const FrechetParams& p) {
  require_valid(p);
  return p.epsilon + p.scale() * std::pow(std::numbers::ln2, -p.lambda);
}

inline double mean(const FrechetParams& p) {
  require_valid(p);
  require_finite_mean(p);
  return p.epsilon + p.scale() * std::tgamma(1.0 - p.lambda);
}

/// Integral of the quantile function over [a, b] within [0, 1].
///
/// Substituting t = -log p and then t = w^(1/(1-lambda)) turns the integrand
/// into the smooth exp(-w^k) with k = 1/(1-lambda), removing the p -> 1 pole.
inline double partial_expectation(const FrechetParams& p, double a, double b,
                                  double abs_tol = 1e-13) {
  require_valid(p);
  require_finite_mean(p);
  a = std::clamp(a, 0.0, 1.0);
  b = std::clamp(b, 0.0, 1.0);
  if (!(b > a)) return 0.0;
  const double k = 1.0 / (1.0 - p.lambda);
  const double w_cap = std::pow(745.0, 1.0 - p.lambda);
  auto w_of = [&](double prob) {
    if (prob <= 0.0) return w_cap;
    if (prob >= 1.0) return 0.0;
    return std::min(w_cap, std::pow(-std::log(prob), 1.0 - p.lambda));
  };
  const double w_lo = w_of(b);
  const double w_hi = w_of(a);
  const double factor = p.scale() * k;
  const double integral = detail::adaptive_simpson(
      [k](double w) { return std::exp(-std::pow(w, k)); }, w_lo, w_hi, abs_tol / factor);
  return p.epsilon * (b - a) + factor * integral;
}

/// Average value-at-risk: mean of the quantile function above `level`.
inline double avar(const FrechetParams& p, double level) {
  require_valid(p);
  require_finite_mean(p);
  if (!(level >= 0.0 && level < 1.0)) {
    throw DomainError("avar level must lie in [0, 1)");
  }
  return partial_expectation(p, level, 1.0, 1e-8 * (1.0 - level)) / (1.0 - level);
}

/// Inverse-transform sample, reproducible for a given seed.
inline std::vector<double> sample(const FrechetParams& p, std::size_t n, std::uint64_t seed) {
  require_valid(p);
  detail::UniformStream uniform(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = quantile(p, uniform());
  return out;
}

/// Right-hand side g(lambda, N) of the median/extremes identity used by the
/// quick estimator.
inline double g_function(double lambda, std::size_t n) {
  if (!(lambda > 0.0) || n < 3) {
    throw DomainError("g_function needs lambda > 0 and N >= 3");
  }
  const double nd = static_cast<double>(n);
  const double f = std::pow(-std::log1p(-std::pow(0.5, 1.0 / nd)), -lambda);
  const double denom = 1.0 - f * std::pow(std::numbers::ln2, lambda);
  if (!(denom > 0.0)) {
    std::ostringstream os;
    os << "g_function denominator non-positive at lambda=" << lambda << ", N=" << n;
    throw EvaluationError(os.str());
  }
  return (std::pow(nd, lambda) - 1.0) / denom;
}

/// Sorted sample with its order-statistic summary.
class SampleState {
 public:
  SampleState() = default;

  static SampleState from_values(std::vector<double> values) {
    SampleState s;
    s.values_ = std::move(values);
    std::sort(s.values_.begin(), s.values_.end());
    return s;
  }

  /// Summary-only state; x1, xs and xN are taken as given.
  static SampleState from_summary(double x1, double xs, double xn, std::size_t n) {
    SampleState s;
    s.summary_only_ = true;
    s.x1_ = x1;
    s.xs_ = xs;
    s.xn_ = xn;
    s.n_ = n;
    return s;
  }

  [[nodiscard]] std::size_t size() const { return summary_only_ ? n_ : values_.size(); }
  [[nodiscard]] std::span<const double> sorted_values() const { return values_; }
  [[nodiscard]] bool summary_only() const { return summary_only_; }

  [[nodiscard]] double smallest() const {
    require_nonempty();
    return summary_only_ ? x1_ : values_.front();
  }
  [[nodiscard]] double largest() const {
    require_nonempty();
    return summary_only_ ? xn_ : values_.back();
  }
  /// Middle order statistic; mean of the two central values for even N.
  [[nodiscard]] double median() const {
    require_nonempty();
    if (summary_only_) return xs_;
    const std::size_t n = values_.size();
    if (n % 2 == 1) return values_[n / 2];
    return 0.5 * (values_[n / 2 - 1] + values_[n / 2]);
  }

  [[nodiscard]] SampleState appended(double value) const {
    if (summary_only_) throw InputError("cannot append to a summary-only sample");
    SampleState s = *this;
    s.values_.insert(std::upper_bound(s.values_.begin(), s.values_.end(), value), value);
    return s;
  }

 private:
  void require_nonempty() const {
    if (size() == 0) throw InputError("empty sample");
  }

  std::vector<double> values_;
  bool summary_only_ = false;
  double x1_ = 0.0, xs_ = 0.0, xn_ = 0.0;
  std::size_t n_ = 0;
};

/// Search box for the shape parameter in the quick estimator.
struct LambdaGrid {
  double lo = 0.01;
  double hi = 5.0;
  int cells = 500;
  double tol = 1e-14;  // golden-section stopping width
};

struct GumbelEstimate {
  FrechetParams params;
  double residual = 0.0;      // |LHS - g(lambda_hat, N)|
  int brackets = 0;           // number of sign-change cells found on the grid
  bool ambiguous() const { return brackets > 1; }
};

namespace detail {

template <class F>
double golden_section_min(F&& f, double a, double b, double tol) {
  constexpr double inv_phi = 0.6180339887498949;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(c);
  double fd = f(d);
  while (b - a > tol * std::max(1.0, std::abs(a))) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  return fc <= fd ? c : d;
}

}  // namespace detail

/// Quick estimate from the smallest value, the median and the largest value.
///
/// The shape solves (xN - xs) / (xs - x1) = g(lambda, N); the residual is not
/// smooth in lambda, so every sign-change cell of a uniform grid is refined by
/// golden section on |residual| and the best one wins (ties go to the smaller
/// lambda). Location parameters then follow in closed form.
inline GumbelEstimate gumbel_estimate_detailed(const SampleState& summary,
                                               const LambdaGrid& grid = {}) {
  const std::size_t n = summary.size();
  if (n < 3) throw EstimationError("quick estimation needs at least 3 observations");
  const double x1 = summary.smallest();
  const double xs = summary.median();
  const double xn = summary.largest();
  if (!(xs > x1)) {
    throw EstimationError("quick estimation failed: smallest value equals the median");
  }
  const double lhs = (xn - xs) / (xs - x1);
  auto residual = [&](double lambda) { return lhs - g_function(lambda, n); };

  const double step = (grid.hi - grid.lo) / grid.cells;
  GumbelEstimate best;
  double best_abs = std::numeric_limits<double>::infinity();
  double best_lambda = 0.0;
  double prev = residual(grid.lo);
  for (int j = 0; j < grid.cells; ++j) {
    const double a = grid.lo + j * step;
    const double b = (j + 1 == grid.cells) ? grid.hi : grid.lo + (j + 1) * step;
    const double next = residual(b);
    if ((prev <= 0.0 && next >= 0.0) || (prev >= 0.0 && next <= 0.0)) {
      ++best.brackets;
      const double lam = detail::golden_section_min(
          [&](double l) { return std::abs(residual(l)); }, a, b, grid.tol);
      const double r = std::abs(residual(lam));
      if (r < best_abs) {
        best_abs = r;
        best_lambda = lam;
      }
    }
    prev = next;
  }
  if (best.brackets == 0) {
    std::ostringstream os;
    os << "quick estimation failed: no root of the shape equation in [" << grid.lo << ", "
       << grid.hi << "] (lhs=" << lhs << ")";
    throw EstimationError(os.str());
  }
  const double npow = std::pow(static_cast<double>(n), best_lambda);
  const double eps = (xs * npow - xn) / (npow - 1.0);
  if (!(eps < xs)) {
    throw DegenerateEstimateError("quick estimation produced a lower limit above the median");
  }
  best.params.lambda = best_lambda;
  best.params.epsilon = eps;
  best.params.u = eps + (xs - eps) * std::pow(std::numbers::ln2, best_lambda);
  best.residual = best_abs;
  return best;
}

inline FrechetParams gumbel_estimate(const SampleState& summary, const LambdaGrid& grid = {}) {
  return gumbel_estimate_detailed(summary, grid).params;
}

enum class SampleClass { Group1Case1, Group2Case2, Group2Case3 };

inline std::string_view to_string(SampleClass c) {
  switch (c) {
    case SampleClass::Group1Case1: return "Group1Case1";
    case SampleClass::Group2Case2: return "Group2Case2";
    case SampleClass::Group2Case3: return "Group2Case3";
  }
  return "?";
}

inline bool is_group1(SampleClass c) { return c == SampleClass::Group1Case1; }

/// Group 1 when the new point sits at or below the risk threshold in
/// probability; otherwise Case 3 if it exceeds the current sample maximum.
inline SampleClass classify(const SampleState& summary, const FrechetParams& params,
                            double new_point, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw DomainError("classification threshold must lie in (0, 1)");
  }
  if (cdf(params, new_point) <= threshold) return SampleClass::Group1Case1;
  if (new_point > summary.largest()) return SampleClass::Group2Case3;
  return SampleClass::Group2Case2;
}

/// Median-ratio update with unchanged shape: both location parameters scale
/// linearly with the ratio of new to old sample median.
inline FrechetParams quick_update(const FrechetParams& params, double median_ratio) {
  require_valid(params);
  if (!(median_ratio > 0.0) || !std::isfinite(median_ratio)) {
    throw DomainError("median ratio must be positive");
  }
  return {params.lambda, params.u * median_ratio, params.epsilon * median_ratio};
}

struct UpdateResult {
  SampleState state;
  FrechetParams params;
  SampleClass sample_class;
  double median_ratio = 1.0;
};

/// Adds one observation: Group 1 points use the median-ratio update, the
/// others trigger a full quick re-estimation on the enlarged sample.
inline UpdateResult append_and_update(const SampleState& state, const FrechetParams& params,
                                      double new_point, double threshold = 0.5,
                                      const LambdaGrid& grid = {}) {
  UpdateResult out;
  out.sample_class = classify(state, params, new_point, threshold);
  out.state = state.appended(new_point);
  out.median_ratio = out.state.median() / state.median();
  if (is_group1(out.sample_class)) {
    out.params = quick_update(params, out.median_ratio);
  } else {
    out.params = gumbel_estimate(out.state, grid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Quantile tables

struct QuantileRow {
  double probability = 0.0;
  double loss = 0.0;
};

/// Loss levels at given cumulative probabilities plus the probability of no loss.
struct QuantileTable {
  std::vector<QuantileRow> rows;
  double pnl = 0.0;

  void validate() const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      if (!(r.probability > 0.0 && r.probability < 1.0)) {
        throw InputError("quantile table probability outside (0, 1)");
      }
      if (!(r.loss >= 0.0)) throw InputError("quantile table loss must be >= 0");
      if (i > 0 && !(r.probability > rows[i - 1].probability)) {
        throw InputError("quantile table probabilities must be strictly increasing");
      }
      if (i > 0 && r.loss < rows[i - 1].loss) {
        throw InputError("quantile table losses must be nondecreasing");
      }
    }
  }
};

enum class Family { Frechet, Weibull, Gumbel };

inline std::string_view to_string(Family f) {
  switch (f) {
    case Family::Frechet: return "frechet";
    case Family::Weibull: return "weibull";
    case Family::Gumbel: return "gumbel";
  }
  return "?";
}

/// Location-scale-shape record shared by the three families:
///   Frechet: Q(p) = location + scale * (-log p)^(-shape)
///   Weibull: Q(p) = location + scale * (-log(1-p))^(1/shape)
///   Gumbel:  Q(p) = location - scale * log(-log p)        (shape unused)
struct TableFit {
  Family family = Family::Frechet;
  double location = 0.0;
  double scale = 1.0;
  double shape = 1.0;
  double residual_norm = 0.0;
  std::vector<QuantileRow> used_rows;
  std::vector<double> fitted;
  std::vector<double> relative_errors;

  [[nodiscard]] FrechetParams frechet() const {
    if (family != Family::Frechet) throw InputError("fit is not a Frechet fit");
    return {shape, location + scale, location};
  }

  [[nodiscard]] double quantile_at(double p) const {
    switch (family) {
      case Family::Frechet: return location + scale * std::pow(-std::log(p), -shape);
      case Family::Weibull: return location + scale * std::pow(-std::log1p(-p), 1.0 / shape);
      case Family::Gumbel: return location - scale * std::log(-std::log(p));
    }
    return 0.0;
  }
};

namespace detail {

struct LineFit {
  double intercept = 0.0;
  double slope = 0.0;
  double sse = std::numeric_limits<double>::infinity();
};

inline LineFit least_squares_line(std::span<const double> x, std::span<const double> y) {
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  LineFit f;
  if (!(sxx > 0.0)) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = f.intercept + f.slope * x[i] - y[i];
    f.sse += r * r;
  }
  return f;
}

}  // namespace detail

/// Least-squares fit of a family's quantile function to the positive-loss rows.
///
/// Zero-loss rows carry the no-loss atom and are excluded. For the shape
/// families the exponent is searched on a grid and refined by golden section,
/// with location and scale solved by linear least squares at each trial.
inline TableFit fit_quantile_table(const QuantileTable& table, Family family,
                                   const LambdaGrid& grid = {}) {
  table.validate();
  TableFit fit;
  fit.family = family;
  for (const auto& r : table.rows) {
    if (r.loss > 0.0) fit.used_rows.push_back(r);
  }
  if (fit.used_rows.size() < 3) {
    throw FitError("quantile table fit needs at least 3 rows with positive loss");
  }
  std::vector<double> y;
  for (const auto& r : fit.used_rows) y.push_back(r.loss);

  auto regressors = [&](double shape) {
    std::vector<double> x;
    for (const auto& r : fit.used_rows) {
      switch (family) {
        case Family::Frechet: x.push_back(std::pow(-std::log(r.probability), -shape)); break;
        case Family::Weibull:
          x.push_back(std::pow(-std::log1p(-r.probability), 1.0 / shape));
          break;
        case Family::Gumbel: x.push_back(-std::log(-std::log(r.probability))); break;
      }
    }
    return x;
  };
  auto line_at = [&](double shape) {
    auto f = detail::least_squares_line(regressors(shape), y);
    if (!(f.slope > 0.0)) f.sse = std::numeric_limits<double>::infinity();
    return f;
  };

  double shape = 1.0;
  detail::LineFit line;
  if (family == Family::Gumbel) {
    line = line_at(1.0);
  } else {
    const double step = (grid.hi - grid.lo) / grid.cells;
    int best = -1;
    double best_sse = std::numeric_limits<double>::infinity();
    for (int j = 0; j <= grid.cells; ++j) {
      const double sse = line_at(grid.lo + j * step).sse;
      if (sse < best_sse) {
        best_sse = sse;
        best = j;
      }
    }
    if (best < 0) {
      throw FitError("quantile table fit degenerate: no positive scale for any shape");
    }
    const double a = grid.lo + std::max(0, best - 1) * step;
    const double b = grid.lo + std::min(grid.cells, best + 1) * step;
    shape = detail::golden_section_min([&](double s) { return line_at(s).sse; }, a, b, 1e-12);
    if (line_at(shape).sse > best_sse) shape = grid.lo + best * step;
    line = line_at(shape);
  }
  if (!std::isfinite(line.sse)) {
    throw FitError("quantile table fit degenerate: zero or negative scale");
  }
  fit.location = line.intercept;
  fit.scale = line.slope;
  fit.shape = shape;
  fit.residual_norm = std::sqrt(line.sse);
  for (const auto& r : fit.used_rows) {
    const double q = fit.quantile_at(r.probability);
    fit.fitted.push_back(q);
    fit.relative_errors.push_back(std::abs(q / r.loss - 1.0));
  }
  return fit;
}

}  // namespace ftree
