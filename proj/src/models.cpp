#include "weberline/models.hpp"

namespace weberline::tn {

MiniExtractor::MiniExtractor(int in_channels, int classes, std::mt19937_64& rng)
    : conv1_("extractor.conv1", in_channels, 16, 3, 1, 1, rng),
      conv2_("extractor.conv2", 16, 32, 3, 2, 1, rng),
      conv3_("extractor.conv3", 32, kFeatureChannels, 3, 2, 1, rng),
      bn1_("extractor.bn1", 16),
      bn2_("extractor.bn2", 32),
      bn3_("extractor.bn3", kFeatureChannels),
      se_("extractor.se", 32, 4, rng),
      fc_("head.fc", kFeatureChannels, classes, rng) {}

ExtractorOutput MiniExtractor::operator()(const Tensor& x, BatchNormMode mode) {
  Tensor h = relu(bn1_(conv1_(x), mode));
  h = relu(bn2_(conv2_(h), mode));
  h = se_(h);
  ExtractorOutput out;
  out.maps = relu(bn3_(conv3_(h), mode));
  out.vectors = global_avg_pool(out.maps);
  out.logits = fc_(out.vectors);
  return out;
}

ParameterRefs MiniExtractor::backbone() {
  ParameterRefs r;
  conv1_.collect(r);
  bn1_.collect(r);
  conv2_.collect(r);
  bn2_.collect(r);
  se_.collect(r);
  conv3_.collect(r);
  bn3_.collect(r);
  return r;
}

ParameterRefs MiniExtractor::head() {
  ParameterRefs r;
  fc_.collect(r);
  return r;
}

}  // namespace weberline::tn
