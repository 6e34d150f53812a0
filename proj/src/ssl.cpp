#include "weberline/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "weberline/phantom.hpp"

namespace weberline::ssl {

using tn::BatchNormMode;

Tensor SampleSet::batch(std::span<const int> indices) const {
  const std::size_t per = static_cast<std::size_t>(channels) * rows * cols;
  std::vector<double> data;
  data.reserve(indices.size() * per);
  for (int i : indices) {
    const auto& img = samples.at(static_cast<std::size_t>(i)).image;
    if (img.size() != per) throw tn::TensorError("sample image does not match set geometry");
    data.insert(data.end(), img.begin(), img.end());
  }
  return Tensor::constant({static_cast<int>(indices.size()), channels, rows, cols}, std::move(data));
}

std::vector<int> SampleSet::labels(std::span<const int> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(samples.at(static_cast<std::size_t>(i)).label);
  return out;
}

RelationNet::RelationNet(int feature_channels, int width, int se_reduction, std::mt19937_64& rng)
    : conv1_("rwn.conv1", 2 * feature_channels, width, 3, 2, 1, rng),
      conv2_("rwn.conv2", width, width, 3, 1, 1, rng),
      conv3_("rwn.conv3", width, width, 3, 1, 1, rng),
      conv4_("rwn.conv4", width, width, 3, 1, 1, rng),
      bn1_("rwn.bn1", width),
      bn2_("rwn.bn2", width),
      bn3_("rwn.bn3", width),
      bn4_("rwn.bn4", width),
      se1_("rwn.se1", width, se_reduction, rng),
      se2_("rwn.se2", width, se_reduction, rng),
      fc_("rwn.fc", width, 1, rng) {}

Tensor RelationNet::logits(const Tensor& pairs, BatchNormMode mode) {
  Tensor h = tn::relu(bn1_(conv1_(pairs), mode));
  h = se1_(h);
  h = bn2_(conv2_(h), mode);
  h = tn::relu(bn3_(conv3_(h), mode));
  h = se2_(h);
  h = bn4_(conv4_(h), mode);
  return fc_(tn::global_avg_pool(h));
}

tn::ParameterRefs RelationNet::refs() {
  tn::ParameterRefs r;
  conv1_.collect(r);
  bn1_.collect(r);
  se1_.collect(r);
  conv2_.collect(r);
  bn2_.collect(r);
  conv3_.collect(r);
  bn3_.collect(r);
  se2_.collect(r);
  conv4_.collect(r);
  bn4_.collect(r);
  fc_.collect(r);
  return r;
}

TrainState::TrainState(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
  std::mt19937_64 rng(seed);
  extractor_ = tn::MiniExtractor(cfg.in_channels, cfg.classes, rng);
  rwn_ = RelationNet(tn::MiniExtractor::kFeatureChannels, cfg.rwn_width, cfg.se_reduction, rng);
}

tn::ParameterRefs TrainState::all() {
  tn::ParameterRefs r = extractor_.backbone();
  r.append(extractor_.head());
  r.append(rwn_.refs());
  return r;
}

void TrainState::save(const std::filesystem::path& path) { tn::save_checkpoint(path, all()); }
void TrainState::load(const std::filesystem::path& path) { tn::load_checkpoint(path, all()); }

tn::ExtractorOutput extract_features(TrainState& state, const Tensor& batch, BatchNormMode mode) {
  if (batch.rank() != 4 || batch.dim(0) < 1) throw tn::TensorError("extract_features: empty batch");
  if (batch.dim(1) != state.config().in_channels)
    throw tn::TensorError("extract_features: channel count does not match the model");
  return state.extractor()(batch, mode);
}

std::vector<ClassPrototype> compute_prototypes(const Tensor& maps, std::span<const int> labels,
                                               int classes) {
  if (maps.rank() != 4 || static_cast<std::size_t>(maps.dim(0)) != labels.size())
    throw tn::TensorError("compute_prototypes: maps/labels mismatch");
  const std::size_t per = maps.size() / static_cast<std::size_t>(maps.dim(0));
  std::vector<ClassPrototype> out(static_cast<std::size_t>(classes));
  std::vector<int> counts(static_cast<std::size_t>(classes), 0);
  for (int k = 0; k < classes; ++k) {
    out[k].class_id = k;
    out[k].shape = {maps.dim(1), maps.dim(2), maps.dim(3)};
    out[k].map.assign(per, 0.0);
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= classes) throw tn::TensorError("compute_prototypes: label out of range");
    ++counts[y];
    const double* src = maps.data().data() + i * per;
    for (std::size_t j = 0; j < per; ++j) out[y].map[j] += src[j];
  }
  for (int k = 0; k < classes; ++k) {
    if (counts[k] == 0) throw tn::TensorError("compute_prototypes: missing class " + std::to_string(k));
    for (auto& v : out[k].map) v /= counts[k];
  }
  return out;
}

Tensor splice_pairs(const Tensor& maps, const std::vector<ClassPrototype>& prototypes) {
  const int n = maps.dim(0), c = maps.dim(1), h = maps.dim(2), w = maps.dim(3);
  const std::size_t per = static_cast<std::size_t>(c) * h * w;
  for (const auto& p : prototypes)
    if (p.map.size() != per) throw tn::TensorError("splice_pairs: prototype shape mismatch");
  const int k = static_cast<int>(prototypes.size());
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(n) * k * 2 * per);
  for (int i = 0; i < n; ++i) {
    const double* m = maps.data().data() + static_cast<std::size_t>(i) * per;
    for (const auto& p : prototypes) {
      data.insert(data.end(), m, m + per);
      data.insert(data.end(), p.map.begin(), p.map.end());
    }
  }
  return Tensor::constant({n * k, 2 * c, h, w}, std::move(data));
}

namespace {

double logistic(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

double rwn_forward(TrainState& state, std::span<const double> sample_map,
                   const ClassPrototype& prototype) {
  if (sample_map.size() != prototype.map.size())
    throw tn::TensorError("rwn_forward: shape mismatch");
  const auto& s = prototype.shape;
  Tensor map = Tensor::constant({1, s[0], s[1], s[2]}, {sample_map.begin(), sample_map.end()});
  const Tensor pairs = splice_pairs(map, {prototype});
  return logistic(state.rwn().logits(pairs, BatchNormMode::Eval).item());
}

std::vector<double> relation_weights(TrainState& state, const Tensor& maps,
                                     const std::vector<ClassPrototype>& prototypes) {
  if (prototypes.empty()) throw tn::TensorError("relation_weights: no prototypes");
  const Tensor logits = state.rwn().logits(splice_pairs(maps.detach(), prototypes), BatchNormMode::Eval);
  std::vector<double> w(logits.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = logistic(logits[i]);
  return w;
}

PseudoLabels pseudo_label(std::span<const double> logits, int classes) {
  const auto prob = tn::softmax_rows(logits, classes);
  const std::size_t n = logits.size() / static_cast<std::size_t>(classes);
  PseudoLabels out;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data() + i * classes;
    const int best = static_cast<int>(std::max_element(z, z + classes) - z);  // first max wins
    out.labels.push_back(best);
    out.confidence.push_back(prob[i * classes + best]);
  }
  return out;
}

PseudoLabels pseudo_label(TrainState& state, const Tensor& batch) {
  const auto out = extract_features(state, batch, BatchNormMode::Eval);
  return pseudo_label(out.logits.data(), state.config().classes);
}

Tensor loss_supervised(const Tensor& logits, std::span<const int> labels) {
  return tn::softmax_ce(logits, tn::one_hot(labels, logits.dim(1)));
}

Tensor loss_unsupervised(const Tensor& logits, std::span<const int> pseudo_labels,
                         std::span<const double> weights, Weighting mode) {
  const int n = logits.dim(0);
  if (pseudo_labels.size() != static_cast<std::size_t>(n) || weights.size() != static_cast<std::size_t>(n))
    throw tn::TensorError("loss_unsupervised: size mismatch");
  for (double w : weights)
    if (!(w >= 0.0 && w <= 1.0)) throw tn::TensorError("loss_unsupervised: weight out of range");
  const Tensor targets = tn::one_hot(pseudo_labels, logits.dim(1));
  if (mode == Weighting::Logits) {
    const Tensor w = Tensor::constant({n}, {weights.begin(), weights.end()});
    return tn::softmax_ce(tn::scale_rows(logits, w), targets);
  }
  std::vector<Tensor> terms;
  for (int i = 0; i < n; ++i) {
    const int row[] = {i};
    terms.push_back(tn::scale(tn::softmax_ce(tn::index_rows(logits, row), tn::index_rows(targets, row)),
                              weights[i] / n));
  }
  return tn::sum(tn::concat(terms, 0));
}

void ConfidenceBuffer::push(std::vector<double> v) {
  if (capacity_ == 0) return;
  if (entries_.size() == capacity_) entries_.pop_front();
  entries_.push_back(std::move(v));
}

std::vector<int> select_confident(std::span<const double> confidence, const Tensor& vectors,
                                  double threshold, ConfidenceBuffer& buffer) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("selection threshold must lie in (0,1)");
  std::vector<int> keep;
  const std::size_t d = vectors.size() / static_cast<std::size_t>(vectors.dim(0));
  for (std::size_t i = 0; i < confidence.size(); ++i)
    if (confidence[i] > threshold) {
      keep.push_back(static_cast<int>(i));
      const double* row = vectors.data().data() + i * d;
      buffer.push(std::vector<double>(row, row + d));
    }
  return keep;
}

double median_pairwise_distance(const Tensor& a, const Tensor& b) {
  const int d = a.dim(1);
  std::vector<const double*> rows;
  for (int i = 0; i < a.dim(0); ++i) rows.push_back(a.data().data() + static_cast<std::size_t>(i) * d);
  for (int i = 0; i < b.dim(0); ++i) rows.push_back(b.data().data() + static_cast<std::size_t>(i) * d);
  std::vector<double> dist;
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (int t = 0; t < d; ++t) s += (rows[i][t] - rows[j][t]) * (rows[i][t] - rows[j][t]);
      dist.push_back(std::sqrt(s));
    }
  if (dist.empty()) return 1.0;
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  double med = dist[mid];
  if (dist.size() % 2 == 0) {
    const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lower);
  }
  return med > 0.0 ? med : 1.0;
}

Tensor loss_mmd(const Tensor& labeled, const Tensor& unlabeled, std::optional<double> sigma) {
  if (!labeled.defined() || !unlabeled.defined() || labeled.dim(0) == 0 || unlabeled.dim(0) == 0)
    throw tn::TensorError("loss_mmd: empty set");
  const double s = sigma ? *sigma : median_pairwise_distance(labeled, unlabeled);
  return tn::mmd_rbf(labeled, unlabeled, s);
}

Tensor loss_total(const Tensor& loss_l, const Tensor& loss_u, const Tensor& loss_mmd, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  return tn::add(tn::add(loss_l, loss_u), tn::scale(loss_mmd, lambda));
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !(momentum >= 0.0 && momentum < 1.0))
    throw std::invalid_argument("invalid optimizer settings");
  if (batch_size < 1 || epochs < 1) throw std::invalid_argument("batch size and epochs must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must lie in (0,1)");
}

Trainer::Trainer(TrainState& state, TrainConfig cfg, std::uint64_t seed)
    : state_(state), cfg_(cfg), rng_(seed), buffer_l_(cfg.buffer_capacity), buffer_u_(cfg.buffer_capacity) {
  cfg_.validate();
}

namespace {

Tensor buffer_tensor(const std::deque<std::vector<double>>& entries, int dim) {
  std::vector<double> data;
  data.reserve(entries.size() * static_cast<std::size_t>(dim));
  for (const auto& e : entries) data.insert(data.end(), e.begin(), e.end());
  return Tensor::constant({static_cast<int>(entries.size()), dim}, std::move(data));
}

Tensor rows_range(const Tensor& x, int begin, int end) {
  std::vector<int> idx(static_cast<std::size_t>(end - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return tn::index_rows(x, idx);
}

// Selected rows (tracked) joined with the buffer contents from before this step.
std::optional<Tensor> expanded_set(const Tensor& vectors, const std::vector<int>& selected,
                                   const std::deque<std::vector<double>>& prior) {
  std::vector<Tensor> parts;
  if (!selected.empty()) parts.push_back(tn::index_rows(vectors, selected));
  if (!prior.empty()) parts.push_back(buffer_tensor(prior, vectors.dim(1)));
  if (parts.empty()) return std::nullopt;
  return parts.size() == 1 ? parts[0] : tn::concat(parts, 0);
}

}  // namespace

Tensor Trainer::training_batch(const SampleSet& set, std::span<const int> idx) {
  Tensor x = set.batch(idx);
  if (!cfg_.flip_augment) return x;
  auto data = x.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(set.rows) * set.cols;
  std::bernoulli_distribution coin(0.5);
  for (std::size_t n = 0; n < idx.size(); ++n) {
    if (!coin(rng_)) continue;
    for (int c = 0; c < set.channels; ++c)
      for (int r = 0; r < set.rows; ++r) {
        double* row = data.data() + (n * set.channels + c) * plane + static_cast<std::size_t>(r) * set.cols;
        std::reverse(row, row + set.cols);
      }
  }
  return x;
}

double Trainer::rwn_step(const SampleSet& labeled, std::span<const int> idx) {
  const int k = state_.config().classes;
  const Tensor x = training_batch(labeled, idx);
  const auto labels = labeled.labels(idx);
  const Tensor maps = extract_features(state_, x, BatchNormMode::BatchStatsOnly).maps.detach();
  prototypes_ = compute_prototypes(maps, labels, k);
  const Tensor pairs = splice_pairs(maps, prototypes_);
  const Tensor z = state_.rwn().logits(pairs, BatchNormMode::Train);
  // Binary match/mismatch cross-entropy as a two-way softmax over (0, z).
  const int rows = z.dim(0);
  std::vector<int> match(static_cast<std::size_t>(rows));
  for (int i = 0; i < rows; ++i) match[i] = (i % k) == labels[static_cast<std::size_t>(i / k)] ? 1 : 0;
  const Tensor two_way = tn::concat({Tensor::zeros({rows, 1}), z}, 1);
  const Tensor loss = tn::softmax_ce(two_way, tn::one_hot(match, 2));
  loss.backward();
  tn::sgd_momentum_step(state_.theta_r(), cfg_.lr, cfg_.momentum);
  return loss.item();
}

Trainer::StepLosses Trainer::extractor_step(const SampleSet& labeled, std::span<const int> idx_l,
                                            const SampleSet& unlabeled, std::span<const int> idx_u) {
  const int k = state_.config().classes;
  const int nl = static_cast<int>(idx_l.size());
  const int nu = static_cast<int>(idx_u.size());
  Tensor x = training_batch(labeled, idx_l);
  if (nu > 0) x = tn::concat({x, training_batch(unlabeled, idx_u)}, 0);
  const auto out = extract_features(state_, x, BatchNormMode::Train);
  const auto labels = labeled.labels(idx_l);

  StepLosses s;
  const Tensor logits_l = rows_range(out.logits, 0, nl);
  const Tensor loss_l = loss_supervised(logits_l, labels);
  Tensor loss_u = Tensor::scalar(0.0);
  Tensor loss_m = Tensor::scalar(0.0);

  if (nu > 0) {
    const Tensor logits_u = rows_range(out.logits, nl, nl + nu);
    const Tensor vectors_l = rows_range(out.vectors, 0, nl);
    const Tensor vectors_u = rows_range(out.vectors, nl, nl + nu);
    const PseudoLabels pl = pseudo_label(logits_u.data(), k);
    const PseudoLabels pl_l = pseudo_label(logits_l.data(), k);

    const Tensor maps_u = rows_range(out.maps, nl, nl + nu).detach();
    const auto w = relation_weights(state_, maps_u, prototypes_);

    const auto prior_l = buffer_l_.entries();
    const auto prior_u = buffer_u_.entries();
    const auto sel_l = select_confident(pl_l.confidence, vectors_l.detach(), cfg_.threshold, buffer_l_);
    const auto sel_u = select_confident(pl.confidence, vectors_u.detach(), cfg_.threshold, buffer_u_);
    s.selected = static_cast<int>(sel_u.size());

    for (int i = 0; i < nu; ++i) {
      const int hidden = unlabeled.samples[static_cast<std::size_t>(idx_u[i])].hidden_label;
      if (hidden < 0) continue;
      ++s.pseudo_total;
      s.pseudo_correct += pl.labels[i] == hidden;
    }

    if (!sel_u.empty()) {
      std::vector<int> targets;
      std::vector<double> weights;
      for (int i : sel_u) {
        targets.push_back(pl.labels[i]);
        weights.push_back(w[static_cast<std::size_t>(i) * k + pl.labels[i]]);
      }
      loss_u = loss_unsupervised(tn::index_rows(logits_u, sel_u), targets, weights, cfg_.weighting);
    }
    const auto set_l = expanded_set(vectors_l, sel_l, prior_l);
    const auto set_u = expanded_set(vectors_u, sel_u, prior_u);
    if (set_l && set_u) loss_m = loss_mmd(*set_l, *set_u, cfg_.mmd_sigma);
  }

  const Tensor total = loss_total(loss_l, loss_u, loss_m, cfg_.lambda);
  total.backward();
  auto params = state_.theta_s();
  const auto head = state_.phi();
  params.insert(params.end(), head.begin(), head.end());
  tn::sgd_momentum_step(params, cfg_.lr, cfg_.momentum);

  s.l = loss_l.item();
  s.u = loss_u.item();
  s.mmd = loss_m.item();
  s.total = total.item();
  return s;
}

std::vector<int> Trainer::labeled_batch(const SampleSet& labeled, std::span<const int> perm,
                                        std::size_t& cursor) {
  const int k = state_.config().classes;
  const std::size_t size = std::min<std::size_t>(static_cast<std::size_t>(cfg_.batch_size), perm.size());
  std::vector<int> idx;
  for (std::size_t i = 0; i < size; ++i) {
    idx.push_back(perm[cursor]);
    cursor = (cursor + 1) % perm.size();
  }
  // Every class must be present for the prototypes; add one stratified draw per missing class.
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < labeled.size(); ++i) by_class[labeled.samples[i].label].push_back(static_cast<int>(i));
  std::vector<char> present(static_cast<std::size_t>(k), 0);
  for (int i : idx) present[labeled.samples[static_cast<std::size_t>(i)].label] = 1;
  for (int c = 0; c < k; ++c) {
    if (present[c]) continue;
    if (by_class[c].empty()) throw std::invalid_argument("labeled set must cover every class");
    std::uniform_int_distribution<std::size_t> pick(0, by_class[c].size() - 1);
    idx.push_back(by_class[c][pick(rng_)]);
  }
  return idx;
}

EpochLog Trainer::train_epoch(const SampleSet& labeled, const SampleSet& unlabeled,
                              const SampleSet* validation) {
  if (labeled.empty()) throw std::invalid_argument("labeled set is empty");
  for (const auto& s : labeled.samples)
    if (s.label < 0 || s.label >= state_.config().classes)
      throw std::invalid_argument("labeled sample without a valid label");
  const bool semi = cfg_.use_unlabeled && !unlabeled.empty();
  const std::size_t nl = labeled.size();
  const std::size_t nu = semi ? unlabeled.size() : 0;
  const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
  // Epoch length follows the unlabeled pool even when it is not used, so the
  // labeled-only ablation takes the same number of optimizer steps.
  const std::size_t steps = (std::max(nl, unlabeled.size()) + bs - 1) / bs;

  std::vector<int> perm_l(nl), perm_u(nu);
  std::iota(perm_l.begin(), perm_l.end(), 0);
  std::iota(perm_u.begin(), perm_u.end(), 0);
  std::shuffle(perm_l.begin(), perm_l.end(), rng_);
  std::shuffle(perm_u.begin(), perm_u.end(), rng_);

  EpochLog log;
  log.epoch = ++epoch_;
  std::size_t cur_l = 0, cur_u = 0;
  int correct = 0, total = 0;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto idx_l = labeled_batch(labeled, perm_l, cur_l);
    std::vector<int> idx_u;
    for (std::size_t i = 0; i < std::min(bs, nu); ++i) {
      idx_u.push_back(perm_u[cur_u]);
      cur_u = (cur_u + 1) % nu;
    }
    if (semi) rwn_step(labeled, idx_l);
    const StepLosses s = extractor_step(labeled, idx_l, unlabeled, idx_u);
    log.loss_l += s.l;
    log.loss_u += s.u;
    log.loss_mmd += s.mmd;
    log.loss_total += s.total;
    log.n_selected += s.selected;
    correct += s.pseudo_correct;
    total += s.pseudo_total;
  }
  const double ns = static_cast<double>(steps);
  log.loss_l /= ns;
  log.loss_u /= ns;
  log.loss_mmd /= ns;
  log.loss_total /= ns;
  if (total > 0) log.pseudo_label_accuracy = static_cast<double>(correct) / total;
  if (validation && !validation->empty()) log.val_accuracy = accuracy(predict(state_, *validation), *validation);
  return log;
}

Predictions predict(TrainState& state, const SampleSet& set, int batch_size) {
  Predictions p;
  const int k = state.config().classes;
  for (std::size_t begin = 0; begin < set.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(set.size(), begin + static_cast<std::size_t>(batch_size));
    std::vector<int> idx(end - begin);
    std::iota(idx.begin(), idx.end(), static_cast<int>(begin));
    const auto out = extract_features(state, set.batch(idx), BatchNormMode::Eval);
    const auto pl = pseudo_label(out.logits.data(), k);
    p.labels.insert(p.labels.end(), pl.labels.begin(), pl.labels.end());
    const auto prob = tn::softmax_rows(out.logits.data(), k);
    p.probabilities.insert(p.probabilities.end(), prob.begin(), prob.end());
  }
  return p;
}

double accuracy(const Predictions& p, const SampleSet& set) {
  if (set.empty()) return 0.0;
  int correct = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const int truth = set.samples[i].label >= 0 ? set.samples[i].label : set.samples[i].hidden_label;
    correct += p.labels[i] == truth;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

MetricsReport evaluate(TrainState& state, const SampleSet& test) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  const Predictions p = predict(state, test);
  std::vector<int> truth;
  for (const auto& s : test.samples) truth.push_back(s.label >= 0 ? s.label : s.hidden_label);
  std::vector<std::string> names;
  for (int c = 0; c < state.config().classes; ++c)
    names.push_back(c < kNumClasses ? to_string(static_cast<WeberLabel>(c)) : std::to_string(c));
  return classification_report(truth, p.labels, p.probabilities, names);
}

}  // namespace weberline::ssl
