#include "weberline/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <numeric>
#include <stdexcept>

#include "weberline/kdtree.hpp"

namespace weberline {

namespace {

bool in_region(std::uint8_t v, SurfaceLabel r) {
  switch (r) {
    case SurfaceLabel::Tibia: return v == kTibia;
    case SurfaceLabel::Fibula: return v == kFibula;
    case SurfaceLabel::Both: return v != kBackground;
  }
  return false;
}

std::vector<double> directed_distances(const PointCloud& from, const PointCloud& to) {
  if (from.empty() || to.empty()) throw std::invalid_argument("empty surface");
  const KdTree tree(to.points);
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& p : from.points) d.push_back(std::sqrt(tree.nearest(p).squared_distance));
  return d;
}

double nearest_rank_95(std::vector<double> d) {
  const std::size_t n = d.size();
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  const std::size_t idx = std::clamp<std::size_t>(rank, 1, n) - 1;
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(idx), d.end());
  return d[idx];
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& xs) {
  double sum = 0.0;
  int n = 0;
  for (const auto& x : xs)
    if (x) {
      sum += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace

double dice(const Mask& a, const Mask& b, SurfaceLabel region) {
  if (a.grid.dims != b.grid.dims) throw std::invalid_argument("dice: dims mismatch");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = in_region(a.data[i], region), y = in_region(b.data[i], region);
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double hausdorff(const PointCloud& a, const PointCloud& b) {
  const auto ab = directed_distances(a, b);
  const auto ba = directed_distances(b, a);
  return std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
}

double hd95(const PointCloud& a, const PointCloud& b) {
  return std::max(nearest_rank_95(directed_distances(a, b)),
                  nearest_rank_95(directed_distances(b, a)));
}

long long ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), 0LL);
}

long long ConfusionMatrix::trace() const {
  long long t = 0;
  for (int i = 0; i < k_; ++i) t += at(i, i);
  return t;
}

long long ConfusionMatrix::row_sum(int truth) const {
  long long s = 0;
  for (int j = 0; j < k_; ++j) s += at(truth, j);
  return s;
}

std::vector<double> ConfusionMatrix::row_normalized() const {
  std::vector<double> out(counts_.size(), 0.0);
  for (int i = 0; i < k_; ++i) {
    const long long r = row_sum(i);
    if (r == 0) continue;
    for (int j = 0; j < k_; ++j)
      out[static_cast<std::size_t>(i) * k_ + j] = static_cast<double>(at(i, j)) / static_cast<double>(r);
  }
  return out;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> predicted, int classes) {
  if (truth.size() != predicted.size())
    throw std::invalid_argument("confusion: label vectors differ in length");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= classes || predicted[i] < 0 || predicted[i] >= classes)
      throw std::invalid_argument("confusion: label out of range");
    ++cm.at(truth[i], predicted[i]);
  }
  return cm;
}

BinaryCounts one_vs_rest(const ConfusionMatrix& cm, int positive) {
  BinaryCounts c;
  const int k = cm.classes();
  for (int t = 0; t < k; ++t)
    for (int p = 0; p < k; ++p) {
      const long long n = cm.at(t, p);
      if (t == positive && p == positive)
        c.tp += n;
      else if (t == positive)
        c.fn += n;
      else if (p == positive)
        c.fp += n;
      else
        c.tn += n;
    }
  return c;
}

BinaryRates binary_rates(const BinaryCounts& c) {
  auto ratio = [](long long num, long long den) -> std::optional<double> {
    if (den == 0) return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
  };
  BinaryRates r;
  r.accuracy = ratio(c.tp + c.tn, c.tp + c.fp + c.tn + c.fn);
  r.precision = ratio(c.tp, c.tp + c.fp);
  r.specificity = ratio(c.tn, c.tn + c.fp);
  r.sensitivity = ratio(c.tp, c.tp + c.fn);
  return r;
}

double auroc(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty())
    throw std::invalid_argument("auroc: single-class input");
  std::vector<std::pair<double, bool>> all;
  all.reserve(positives.size() + negatives.size());
  for (double s : positives) all.emplace_back(s, true);
  for (double s : negatives) all.emplace_back(s, false);
  std::stable_sort(all.begin(), all.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  // Ascending ranks starting at 1, averaged over ties.
  double rank_sum = 0.0;
  const std::size_t n = all.size();
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && all[j + 1].first == all[i].first) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t)
      if (all[t].second) rank_sum += avg;
    i = j + 1;
  }
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

MetricsReport classification_report(std::span<const int> truth, std::span<const int> predicted,
                                    std::span<const double> scores,
                                    const std::vector<std::string>& class_names) {
  const int k = static_cast<int>(class_names.size());
  if (truth.empty()) throw std::invalid_argument("classification_report: empty test set");
  if (scores.size() != truth.size() * static_cast<std::size_t>(k))
    throw std::invalid_argument("classification_report: score matrix shape mismatch");
  MetricsReport rep;
  rep.confusion = confusion(truth, predicted, k);
  rep.overall_accuracy =
      static_cast<double>(rep.confusion.trace()) / static_cast<double>(rep.confusion.total());

  std::vector<std::optional<double>> acc, pre, spe, sen, auc;
  for (int c = 0; c < k; ++c) {
    ClassMetrics m;
    m.name = class_names[c];
    m.rates = binary_rates(one_vs_rest(rep.confusion, c));
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < truth.size(); ++i)
      (truth[i] == c ? pos : neg).push_back(scores[i * k + c]);
    if (!pos.empty() && !neg.empty()) m.auroc = auroc(pos, neg);
    acc.push_back(m.rates.accuracy);
    pre.push_back(m.rates.precision);
    spe.push_back(m.rates.specificity);
    sen.push_back(m.rates.sensitivity);
    auc.push_back(m.auroc);
    rep.per_class.push_back(std::move(m));
  }
  rep.macro.name = "macro";
  rep.macro.rates = {mean_defined(acc), mean_defined(pre), mean_defined(spe), mean_defined(sen)};
  rep.macro.auroc = mean_defined(auc);
  return rep;
}

std::vector<SegmentationMetrics> segmentation_metrics(const Mask& prediction, const Mask& truth) {
  std::vector<SegmentationMetrics> out;
  const std::pair<SurfaceLabel, const char*> parts[] = {
      {SurfaceLabel::Tibia, "tibia"}, {SurfaceLabel::Fibula, "fibula"}, {SurfaceLabel::Both, "union"}};
  for (const auto& [label, name] : parts) {
    SegmentationMetrics m;
    m.structure = name;
    m.dice = dice(prediction, truth, label);
    m.hd95 = hd95(extract_surface_points(prediction, label), extract_surface_points(truth, label));
    out.push_back(m);
  }
  return out;
}

void MetricsReport::write_csv(std::ostream& os) const {
  os << "class,accuracy,precision,specificity,sensitivity,auroc\n";
  auto row = [&](const ClassMetrics& m) {
    os << m.name << ',' << fmt(m.rates.accuracy) << ',' << fmt(m.rates.precision) << ','
       << fmt(m.rates.specificity) << ',' << fmt(m.rates.sensitivity) << ',' << fmt(m.auroc)
       << '\n';
  };
  for (const auto& m : per_class) row(m);
  row(macro);
  os << "overall," << fmt(overall_accuracy) << ",,,,\n";
  for (const auto& s : segmentation)
    os << "dice_" << s.structure << ',' << fmt(s.dice) << ",,,,\n"
       << "hd95_" << s.structure << ',' << fmt(s.hd95) << ",,,,\n";
}

void MetricsReport::write_confusion_csv(std::ostream& os) const {
  const int k = confusion.classes();
  auto name = [&](int i) { return i < static_cast<int>(per_class.size()) ? per_class[i].name : std::to_string(i); };
  os << "kind,true";
  for (int j = 0; j < k; ++j) os << ",pred_" << name(j);
  os << '\n';
  for (int i = 0; i < k; ++i) {
    os << "count," << name(i);
    for (int j = 0; j < k; ++j) os << ',' << confusion.at(i, j);
    os << '\n';
  }
  const auto norm = confusion.row_normalized();
  for (int i = 0; i < k; ++i) {
    os << "row_normalized," << name(i);
    for (int j = 0; j < k; ++j) os << ',' << fmt(norm[static_cast<std::size_t>(i) * k + j]);
    os << '\n';
  }
}

void MetricsReport::write_text(std::ostream& os) const {
  auto cell = [](const std::optional<double>& v) { return v ? fmt(v) : std::string("   n/a  "); };
  os << "class     Acc       Pre       Spe       Sen       AUROC\n";
  auto row = [&](const ClassMetrics& m) {
    os << std::left << std::setw(8) << m.name << "  " << cell(m.rates.accuracy) << "  "
       << cell(m.rates.precision) << "  " << cell(m.rates.specificity) << "  "
       << cell(m.rates.sensitivity) << "  " << cell(m.auroc) << '\n';
  };
  for (const auto& m : per_class) row(m);
  row(macro);
  os << "overall accuracy: " << fmt(overall_accuracy) << '\n';
  os << "confusion (rows = truth):\n";
  const int k = confusion.classes();
  for (int i = 0; i < k; ++i) {
    os << "  ";
    for (int j = 0; j < k; ++j) os << std::setw(6) << confusion.at(i, j);
    os << '\n';
  }
  for (const auto& s : segmentation)
    os << s.structure << ": Dice " << fmt(s.dice) << "  HD95 " << fmt(s.hd95) << " mm\n";
}

}  // namespace weberline
