#include "eaa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>

namespace eaa {

namespace {

// Large finite stand-in for "no source here". Finite so the envelope
// arithmetic below never produces inf - inf.
constexpr double kFar = 1e20;

void check_mask(const BinaryMask& m, const char* who) {
  if (m.shape.size() != 2 && m.shape.size() != 3)
    throw ShapeError(std::string(who) + ": mask must be 2-D or 3-D, got rank " +
                     std::to_string(m.shape.size()));
  if (m.values.size() != numel(m.shape))
    throw ShapeError(std::string(who) + ": mask has " + std::to_string(m.values.size()) +
                     " values for shape " + shape_str(m.shape));
}

void check_same_shape(const BinaryMask& a, const BinaryMask& b, const char* who) {
  check_mask(a, who);
  check_mask(b, who);
  if (a.shape != b.shape)
    throw ShapeError(std::string(who) + ": mask shapes differ, " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
}

// One-dimensional squared distance transform of the sampled function f,
// lower envelope of the parabolas q -> (x - q)^2 + f[q].
void dt1d(const double* f, double* d, std::size_t n, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kFar;
  z[1] = kFar;
  for (int q = 1; q < static_cast<int>(n); ++q) {
    double s;
    for (;;) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * q - 2.0 * p);
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kFar;
  }
  k = 0;
  for (int q = 0; q < static_cast<int>(n); ++q) {
    while (z[k + 1] < double(q)) ++k;
    const int p = v[k];
    d[q] = double(q - p) * (q - p) + f[p];
  }
}

// Run dt1d along one axis of a dense row-major array, in place.
void dt_axis(std::vector<double>& a, const Shape& shape, std::size_t axis) {
  const std::size_t n = shape[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];

  std::vector<double> f(n), d(n);
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double* base = a.data() + o * n * inner + in;
      for (std::size_t q = 0; q < n; ++q) f[q] = base[q * inner];
      dt1d(f.data(), d.data(), n, v.data(), z.data());
      for (std::size_t q = 0; q < n; ++q) base[q * inner] = d[q];
    }
  }
}

// Distances from every set voxel of `from` to the nearest set voxel of `to`.
std::vector<double> directed_distances(const BinaryMask& from, const BinaryMask& to) {
  const std::vector<double> sq = squared_edt(to);
  std::vector<double> out;
  out.reserve(from.count());
  for (std::size_t i = 0; i < from.values.size(); ++i)
    if (from.values[i]) out.push_back(std::sqrt(sq[i]));
  return out;
}

double percentile95(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  if (n == 1) return xs[0];
  const double pos = 0.95 * double(n - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= n) return xs[n - 1];
  const double frac = pos - double(lo);
  return xs[lo] + frac * (xs[lo + 1] - xs[lo]);
}

void require_nonempty(const BinaryMask& m, const char* who) {
  if (m.count() == 0)
    throw ValueError(std::string(who) + ": distance to an empty mask is undefined");
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

BinaryMask BinaryMask::plane(std::size_t h, std::size_t w, std::vector<std::uint8_t> v) {
  BinaryMask m{{h, w}, std::move(v)};
  check_mask(m, "BinaryMask::plane");
  for (auto& b : m.values) b = b ? 1 : 0;
  return m;
}

BinaryMask BinaryMask::volume(std::size_t s, std::size_t h, std::size_t w,
                              std::vector<std::uint8_t> v) {
  BinaryMask m{{s, h, w}, std::move(v)};
  check_mask(m, "BinaryMask::volume");
  for (auto& b : m.values) b = b ? 1 : 0;
  return m;
}

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (auto b : values) n += b ? 1 : 0;
  return n;
}

ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt) {
  check_same_shape(pred, gt, "confusion_counts");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    const bool p = pred.values[i] != 0;
    const bool g = gt.values[i] != 0;
    if (p && g)
      ++c.tp;
    else if (p && !g)
      ++c.fp;
    else if (!p && g)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

double dsc(const ConfusionCounts& c) {
  const double denom = double(c.fp) + 2.0 * double(c.tp) + double(c.fn);
  if (denom == 0.0) return 1.0;
  return 2.0 * double(c.tp) / denom;
}

double sensitivity(const ConfusionCounts& c) {
  const double denom = double(c.tp) + double(c.fn);
  if (denom == 0.0) return 1.0;
  return double(c.tp) / denom;
}

double specificity(const ConfusionCounts& c) {
  const double denom = double(c.tn) + double(c.fp);
  if (denom == 0.0) return 1.0;
  return double(c.tn) / denom;
}

double volume_similarity(const BinaryMask& pred, const BinaryMask& gt, VsForm form) {
  check_same_shape(pred, gt, "volume_similarity");
  const double m = double(gt.count());
  const double w = double(pred.count());
  if (m + w == 0.0) return 0.0;
  if (form == VsForm::asymmetric) return (2.0 * m - w) / (m + w);
  return 2.0 * (m - w) / (m + w);
}

std::vector<double> squared_edt(const BinaryMask& mask) {
  check_mask(mask, "squared_edt");
  std::vector<double> a(mask.values.size());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = mask.values[i] ? 0.0 : kFar;
  for (std::size_t axis = mask.shape.size(); axis-- > 0;) dt_axis(a, mask.shape, axis);
  return a;
}

double hausdorff(const BinaryMask& a, const BinaryMask& b) {
  check_same_shape(a, b, "hausdorff");
  require_nonempty(a, "hausdorff");
  require_nonempty(b, "hausdorff");
  double best = 0.0;
  for (double d : directed_distances(a, b)) best = std::max(best, d);
  for (double d : directed_distances(b, a)) best = std::max(best, d);
  return best;
}

double hausdorff95(const BinaryMask& a, const BinaryMask& b) {
  check_same_shape(a, b, "hausdorff95");
  require_nonempty(a, "hausdorff95");
  require_nonempty(b, "hausdorff95");
  std::vector<double> pool = directed_distances(a, b);
  const std::vector<double> rev = directed_distances(b, a);
  pool.insert(pool.end(), rev.begin(), rev.end());
  return percentile95(std::move(pool));
}

MetricsReport evaluate_masks(const BinaryMask& pred, const BinaryMask& gt, VsForm form) {
  const ConfusionCounts c = confusion_counts(pred, gt);
  MetricsReport r;
  r.dsc = dsc(c);
  r.sensitivity = sensitivity(c);
  r.specificity = specificity(c);
  r.volume_similarity = volume_similarity(pred, gt, form);
  if (pred.count() > 0 && gt.count() > 0) {
    r.hd = hausdorff(pred, gt);
    r.hd95 = hausdorff95(pred, gt);
    r.has_hd = true;
  } else {
    r.hd = std::numeric_limits<double>::quiet_NaN();
    r.hd95 = std::numeric_limits<double>::quiet_NaN();
    r.has_hd = false;
  }
  return r;
}

MetricsReport aggregate_metrics(const std::vector<MetricsReport>& rows) {
  if (rows.empty()) throw ValueError("aggregate_metrics: no rows");
  MetricsReport agg;
  double hd_sum = 0.0, hd95_sum = 0.0;
  std::size_t hd_n = 0;
  for (const auto& r : rows) {
    agg.dsc += r.dsc;
    agg.sensitivity += r.sensitivity;
    agg.specificity += r.specificity;
    agg.volume_similarity += r.volume_similarity;
    if (r.has_hd) {
      hd_sum += r.hd;
      hd95_sum += r.hd95;
      ++hd_n;
    }
  }
  const double n = double(rows.size());
  agg.dsc /= n;
  agg.sensitivity /= n;
  agg.specificity /= n;
  agg.volume_similarity /= n;
  if (hd_n > 0) {
    agg.hd = hd_sum / double(hd_n);
    agg.hd95 = hd95_sum / double(hd_n);
  } else {
    agg.hd = std::numeric_limits<double>::quiet_NaN();
    agg.hd95 = std::numeric_limits<double>::quiet_NaN();
  }
  agg.has_hd = hd_n == rows.size();
  return agg;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsReport>& rows) {
  os << "dsc,hd,hd95,sensitivity,specificity,volume_similarity\n";
  for (const auto& r : rows) {
    os << fmt_double(r.dsc) << ',';
    os << (r.has_hd ? fmt_double(r.hd) : "nan") << ',';
    os << (r.has_hd ? fmt_double(r.hd95) : "nan") << ',';
    os << fmt_double(r.sensitivity) << ',';
    os << fmt_double(r.specificity) << ',';
    os << fmt_double(r.volume_similarity) << '\n';
  }
}

}  // namespace eaa
