#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "weberline/metrics.hpp"
#include "weberline/models.hpp"
#include "weberline/phantom.hpp"

namespace weberline::ssl {

using tn::Tensor;

/// One classifier input: a C×H×W image built from a syndesmosis crop pair.
struct Sample {
  std::vector<double> image;
  int label = -1;         // -1 when unlabeled
  int hidden_label = -1;  // ground truth kept for oracle metrics only
};

struct SampleSet {
  int channels = 0, rows = 0, cols = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  Tensor batch(std::span<const int> indices) const;
  std::vector<int> labels(std::span<const int> indices) const;
};

/// Relation-weight network scoring a (sample map, class prototype) pair:
/// conv1(s2)-BN-ReLU, SE, conv2-BN, conv3-BN-ReLU, SE, conv4-BN, GAP, fc, sigmoid.
class RelationNet {
 public:
  RelationNet() = default;
  RelationNet(int feature_channels, int width, int se_reduction, std::mt19937_64& rng);

  /// Pre-sigmoid relation logits, N×1, for N×2C×H×W spliced pairs.
  Tensor logits(const Tensor& pairs, tn::BatchNormMode mode);
  tn::ParameterRefs refs();
  tn::Linear& output_layer() { return fc_; }

 private:
  tn::Conv2d conv1_, conv2_, conv3_, conv4_;
  tn::BatchNorm bn1_, bn2_, bn3_, bn4_;
  tn::SEBlock se1_, se2_;
  tn::Linear fc_;
};

struct ModelConfig {
  int in_channels = 3;
  int classes = kNumClasses;
  int rwn_width = 64;
  int se_reduction = 4;
};

/// Extractor parameters theta_s, head phi and RWN parameters theta_R.
class TrainState {
 public:
  TrainState(const ModelConfig& cfg, std::uint64_t seed);
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;

  const ModelConfig& config() const { return config_; }
  tn::MiniExtractor& extractor() { return extractor_; }
  RelationNet& rwn() { return rwn_; }

  std::vector<tn::Parameter*> theta_s() { return extractor_.backbone().params; }
  std::vector<tn::Parameter*> phi() { return extractor_.head().params; }
  std::vector<tn::Parameter*> theta_r() { return rwn_.refs().params; }
  tn::ParameterRefs all();

  void save(const std::filesystem::path& path);
  void load(const std::filesystem::path& path);

 private:
  ModelConfig config_;
  tn::MiniExtractor extractor_;
  RelationNet rwn_;
};

tn::ExtractorOutput extract_features(TrainState& state, const Tensor& batch,
                                     tn::BatchNormMode mode = tn::BatchNormMode::Eval);

struct ClassPrototype {
  int class_id = 0;
  tn::Shape shape;  // C×H×W
  std::vector<double> map;
};

/// Per-class mean of the feature maps; every class must be present.
std::vector<ClassPrototype> compute_prototypes(const Tensor& maps, std::span<const int> labels,
                                               int classes);

/// N×K spliced pairs, sample-major: row i*K + k joins map i with prototype k.
Tensor splice_pairs(const Tensor& maps, const std::vector<ClassPrototype>& prototypes);

/// Relation score in [0,1] for a single sample/prototype pair (eval mode).
double rwn_forward(TrainState& state, std::span<const double> sample_map,
                   const ClassPrototype& prototype);

/// w[i*K + k] = relation score of sample i with prototype k (eval mode).
std::vector<double> relation_weights(TrainState& state, const Tensor& maps,
                                     const std::vector<ClassPrototype>& prototypes);

struct PseudoLabels {
  std::vector<int> labels;
  std::vector<double> confidence;
};

/// argmax softmax with ties going to the lowest class index.
PseudoLabels pseudo_label(std::span<const double> logits, int classes);
PseudoLabels pseudo_label(TrainState& state, const Tensor& batch);

Tensor loss_supervised(const Tensor& logits, std::span<const int> labels);

enum class Weighting {
  Logits,      // logits scaled by the weight before the softmax
  LossWeight,  // per-sample cross-entropy scaled by the weight
};

/// Cross-entropy of pseudo-labels with per-sample relation weights in [0,1].
Tensor loss_unsupervised(const Tensor& logits, std::span<const int> pseudo_labels,
                         std::span<const double> weights, Weighting mode = Weighting::Logits);

/// FIFO store of recently selected confident feature vectors.
class ConfidenceBuffer {
 public:
  explicit ConfidenceBuffer(std::size_t capacity = 256) : capacity_(capacity) {}

  void push(std::vector<double> v);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<std::vector<double>>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::size_t capacity_;
  std::deque<std::vector<double>> entries_;
};

inline constexpr double kDefaultSelectionThreshold = 0.5;

/// Indices with confidence > threshold; their feature vector rows are pushed
/// into `buffer` in index order.
std::vector<int> select_confident(std::span<const double> confidence, const Tensor& vectors,
                                  double threshold, ConfidenceBuffer& buffer);

/// Median pairwise Euclidean distance over the union of the rows of a and b.
double median_pairwise_distance(const Tensor& a, const Tensor& b);

/// Squared MMD with a Gaussian kernel; sigma defaults to the median heuristic.
Tensor loss_mmd(const Tensor& labeled, const Tensor& unlabeled,
                std::optional<double> sigma = std::nullopt);

inline constexpr double kDefaultLambda = 15.0;

Tensor loss_total(const Tensor& loss_l, const Tensor& loss_u, const Tensor& loss_mmd,
                  double lambda = kDefaultLambda);

struct TrainConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  int batch_size = 32;
  int epochs = 500;
  double lambda = kDefaultLambda;
  double threshold = kDefaultSelectionThreshold;
  std::size_t buffer_capacity = 256;
  std::optional<double> mmd_sigma;
  Weighting weighting = Weighting::Logits;
  bool use_unlabeled = true;
  // Random left-right flips of training images (label preserving).
  bool flip_augment = false;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double loss_l = 0, loss_u = 0, loss_mmd = 0, loss_total = 0;
  int n_selected = 0;
  std::optional<double> pseudo_label_accuracy;
  std::optional<double> val_accuracy;
};

/// Alternating trainer. Phase 1 fits theta_R on labeled pairs with the extractor
/// frozen; phase 2 fits theta_s and phi on L_l + L_u + lambda * L_MMD with
/// theta_R frozen.
class Trainer {
 public:
  Trainer(TrainState& state, TrainConfig cfg, std::uint64_t seed);

  EpochLog train_epoch(const SampleSet& labeled, const SampleSet& unlabeled,
                       const SampleSet* validation = nullptr);
  const TrainConfig& config() const { return cfg_; }
  const ConfidenceBuffer& labeled_buffer() const { return buffer_l_; }
  const ConfidenceBuffer& unlabeled_buffer() const { return buffer_u_; }

  // Exposed for tests that check which parameter groups each phase touches.
  double rwn_step(const SampleSet& labeled, std::span<const int> idx);
  struct StepLosses {
    double l = 0, u = 0, mmd = 0, total = 0;
    int selected = 0;
    int pseudo_correct = 0, pseudo_total = 0;
  };
  StepLosses extractor_step(const SampleSet& labeled, std::span<const int> idx_l,
                            const SampleSet& unlabeled, std::span<const int> idx_u);

 private:
  std::vector<int> labeled_batch(const SampleSet& labeled, std::span<const int> perm,
                                 std::size_t& cursor);
  Tensor training_batch(const SampleSet& set, std::span<const int> idx);

  TrainState& state_;
  TrainConfig cfg_;
  std::mt19937_64 rng_;
  ConfidenceBuffer buffer_l_, buffer_u_;
  std::vector<ClassPrototype> prototypes_;
  int epoch_ = 0;
};

struct Predictions {
  std::vector<int> labels;
  std::vector<double> probabilities;  // N×K
};

Predictions predict(TrainState& state, const SampleSet& set, int batch_size = 64);
double accuracy(const Predictions& p, const SampleSet& set);
MetricsReport evaluate(TrainState& state, const SampleSet& test);

}  // namespace weberline::ssl
