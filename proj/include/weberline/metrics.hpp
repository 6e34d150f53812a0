#pragma once

#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "weberline/registration.hpp"
#include "weberline/volume.hpp"

namespace weberline {

/// 2|a ∩ b| / (|a| + |b|) over the selected region; 1.0 when both are empty.
double dice(const Mask& a, const Mask& b, SurfaceLabel region = SurfaceLabel::Both);

/// Symmetric Hausdorff distance (max of both directed maxima).
double hausdorff(const PointCloud& a, const PointCloud& b);

/// Symmetric 95th-percentile surface distance. Each direction takes the
/// ceil(0.95 n)-th smallest nearest-neighbor distance; the result is the max.
double hd95(const PointCloud& a, const PointCloud& b);

/// rows = true class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes) : k_(classes), counts_(static_cast<std::size_t>(classes) * classes, 0) {}

  int classes() const { return k_; }
  long long& at(int truth, int pred) { return counts_[static_cast<std::size_t>(truth) * k_ + pred]; }
  long long at(int truth, int pred) const { return counts_[static_cast<std::size_t>(truth) * k_ + pred]; }
  long long total() const;
  long long trace() const;
  long long row_sum(int truth) const;
  std::vector<double> row_normalized() const;

 private:
  int k_;
  std::vector<long long> counts_;
};

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int classes);

struct BinaryCounts {
  long long tp = 0, tn = 0, fp = 0, fn = 0;
};

BinaryCounts one_vs_rest(const ConfusionMatrix& cm, int positive);

/// Ratios with a zero denominator are left empty ("undefined").
struct BinaryRates {
  std::optional<double> accuracy, precision, specificity, sensitivity;
};

BinaryRates binary_rates(const BinaryCounts& c);

/// Rank-sum AUROC with average ranks for ties.
double auroc(std::span<const double> positives, std::span<const double> negatives);

struct ClassMetrics {
  std::string name;
  BinaryRates rates;
  std::optional<double> auroc;
};

struct SegmentationMetrics {
  std::string structure;
  double dice = 0.0;
  double hd95 = 0.0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  ClassMetrics macro;
  // trace / total
  double overall_accuracy = 0.0;
  ConfusionMatrix confusion{0};
  std::vector<SegmentationMetrics> segmentation;

  void write_csv(std::ostream& os) const;
  void write_confusion_csv(std::ostream& os) const;
  void write_text(std::ostream& os) const;
};

/// One-vs-rest rates per class and their macro average (undefined entries are
/// excluded from the average). `scores` is N x K row-major class probabilities.
MetricsReport classification_report(std::span<const int> truth, std::span<const int> predicted,
                                    std::span<const double> scores,
                                    const std::vector<std::string>& class_names);

/// Dice and HD95 for tibia, fibula and their union.
std::vector<SegmentationMetrics> segmentation_metrics(const Mask& prediction, const Mask& truth);

}  // namespace weberline
