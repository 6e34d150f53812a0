#pragma once

#include <random>

#include "weberline/layers.hpp"

namespace weberline::tn {

struct ExtractorOutput {
  Tensor maps;     // N×64×H/4×W/4
  Tensor vectors;  // N×64 (global average of maps)
  Tensor logits;   // N×classes
};

/// Small stand-in for the ImageNet ResNet-18 backbone:
/// conv3x3(16)-BN-ReLU, conv3x3(32, s2)-BN-ReLU, SE, conv3x3(64, s2)-BN-ReLU,
/// global average pool, fc(64 -> classes).
class MiniExtractor {
 public:
  static constexpr int kFeatureChannels = 64;

  MiniExtractor() = default;
  MiniExtractor(int in_channels, int classes, std::mt19937_64& rng);

  ExtractorOutput operator()(const Tensor& x, BatchNormMode mode);

  /// Backbone parameters (conv, BN, SE).
  ParameterRefs backbone();
  /// Classifier head.
  ParameterRefs head();

 private:
  Conv2d conv1_, conv2_, conv3_;
  BatchNorm bn1_, bn2_, bn3_;
  SEBlock se_;
  Linear fc_;
};

}  // namespace weberline::tn
