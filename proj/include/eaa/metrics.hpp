#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "eaa/common.hpp"

namespace eaa {

// Binary mask over a 2-D (H,W) or 3-D (S,H,W) grid, row-major. Nonzero input
// values are normalized to 1.
struct BinaryMask {
  Shape shape;
  std::vector<std::uint8_t> values;

  static BinaryMask plane(std::size_t h, std::size_t w, std::vector<std::uint8_t> v);
  static BinaryMask volume(std::size_t s, std::size_t h, std::size_t w,
                           std::vector<std::uint8_t> v);
  std::size_t count() const;  // number of set voxels
};

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

ConfusionCounts confusion_counts(const BinaryMask& pred, const BinaryMask& gt);

// 2TP / (FP + 2TP + FN); 1.0 when both masks are empty.
double dsc(const ConfusionCounts& c);
// TP / (TP + FN); 1.0 when the ground truth is empty.
double sensitivity(const ConfusionCounts& c);
// TN / (TN + FP); 1.0 when the ground truth covers everything.
double specificity(const ConfusionCounts& c);

// With M = |gt| and W = |pred|:
//   asymmetric:        (2M - W) / (M + W)   (1/2 at equal sizes)
//   signed_difference: 2(M - W) / (M + W)   (0 at equal sizes)
// Both return 0.0 when both masks are empty.
enum class VsForm { asymmetric, signed_difference };
double volume_similarity(const BinaryMask& pred, const BinaryMask& gt,
                         VsForm form = VsForm::asymmetric);

// Exact squared Euclidean distance to the nearest set voxel, per voxel, in
// grid units (slices count like rows). Separable lower-envelope transform.
std::vector<double> squared_edt(const BinaryMask& mask);

// Symmetric Hausdorff distance between the set voxels. Throws ValueError on
// an empty mask: the distance is undefined there.
double hausdorff(const BinaryMask& a, const BinaryMask& b);

// 95th percentile (linear interpolation over the sorted pool) of the
// nearest-neighbour distances pooled from both directions.
double hausdorff95(const BinaryMask& a, const BinaryMask& b);

struct MetricsReport {
  double dsc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double volume_similarity = 0.0;
  double hd = 0.0;
  double hd95 = 0.0;
  bool has_hd = false;  // false when either mask was empty
};

// Overlap metrics always; distances only when both masks are non-empty.
MetricsReport evaluate_masks(const BinaryMask& pred, const BinaryMask& gt,
                             VsForm form = VsForm::asymmetric);

// Fieldwise arithmetic mean. hd/hd95 average over the rows that have them;
// has_hd is true only if every row did.
MetricsReport aggregate_metrics(const std::vector<MetricsReport>& rows);

// Header dsc,hd,hd95,sensitivity,specificity,volume_similarity, one row per
// report, "nan" for missing distances.
void write_metrics_csv(std::ostream& os, const std::vector<MetricsReport>& rows);

}  // namespace eaa
