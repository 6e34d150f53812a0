#include "weberline/layers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace weberline::tn {

Parameter::Parameter(std::string n, Shape shape, std::vector<double> init)
    : name(std::move(n)), value(Tensor::leaf(std::move(shape), std::move(init))),
      velocity(value.size(), 0.0) {}

void ParameterRefs::append(const ParameterRefs& other) {
  params.insert(params.end(), other.params.begin(), other.params.end());
  buffers.insert(buffers.end(), other.buffers.begin(), other.buffers.end());
}

void sgd_momentum_step(const std::vector<Parameter*>& params, double lr, double momentum) {
  for (Parameter* p : params) {
    auto g = p->value.grad();
    auto v = p->value.mutable_data();
    if (p->velocity.size() != v.size()) p->velocity.assign(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      p->velocity[i] = momentum * p->velocity[i] + gi;
      v[i] -= lr * p->velocity[i];
    }
    p->zero_grad();
  }
}

void zero_grad(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

std::uint64_t checksum(const std::vector<Parameter*>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Parameter* p : params)
    for (double v : p->value.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 1099511628211ULL;
      }
    }
  return h;
}

std::vector<double> kaiming_uniform(std::size_t count, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> out(count);
  for (auto& v : out) v = u(rng);
  return out;
}

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride_, int pad_,
               std::mt19937_64& rng)
    : weight(name + ".weight", {out_ch, in_ch, kernel, kernel},
             kaiming_uniform(static_cast<std::size_t>(out_ch) * in_ch * kernel * kernel,
                             in_ch * kernel * kernel, rng)),
      bias(name + ".bias", {out_ch}, std::vector<double>(static_cast<std::size_t>(out_ch), 0.0)),
      stride(stride_),
      pad(pad_) {}

Tensor Conv2d::operator()(const Tensor& x) const {
  return conv2d(x, weight.value, bias.value, stride, pad);
}

void Conv2d::collect(ParameterRefs& refs) {
  refs.params.push_back(&weight);
  refs.params.push_back(&bias);
}

Linear::Linear(std::string name, int in, int out, std::mt19937_64& rng)
    : weight(name + ".weight", {out, in},
             kaiming_uniform(static_cast<std::size_t>(out) * in, in, rng)),
      bias(name + ".bias", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0)) {}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight.value, bias.value); }

void Linear::collect(ParameterRefs& refs) {
  refs.params.push_back(&weight);
  refs.params.push_back(&bias);
}

BatchNorm::BatchNorm(std::string name, int channels)
    : gamma(name + ".gamma", {channels}, std::vector<double>(static_cast<std::size_t>(channels), 1.0)),
      beta(name + ".beta", {channels}, std::vector<double>(static_cast<std::size_t>(channels), 0.0)),
      stats(channels),
      name_(std::move(name)) {}

Tensor BatchNorm::operator()(const Tensor& x, BatchNormMode mode) {
  return batchnorm(x, gamma.value, beta.value, stats, mode);
}

void BatchNorm::collect(ParameterRefs& refs) {
  refs.params.push_back(&gamma);
  refs.params.push_back(&beta);
  const int c = static_cast<int>(stats.running_mean.size());
  refs.buffers.push_back({name_ + ".running_mean", {c}, &stats.running_mean});
  refs.buffers.push_back({name_ + ".running_var", {c}, &stats.running_var});
}

SEBlock::SEBlock(std::string name, int channels, int reduction, std::mt19937_64& rng) {
  if (reduction < 1 || channels % reduction != 0)
    throw TensorError("SE block: channels must be divisible by reduction");
  fc1 = Linear(name + ".fc1", channels, channels / reduction, rng);
  fc2 = Linear(name + ".fc2", channels / reduction, channels, rng);
}

Tensor SEBlock::operator()(const Tensor& x) const {
  return se_block(x, fc1.weight.value, fc1.bias.value, fc2.weight.value, fc2.bias.value);
}

void SEBlock::collect(ParameterRefs& refs) {
  fc1.collect(refs);
  fc2.collect(refs);
}

Tensor se_block(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                const Tensor& b2) {
  const Tensor squeeze = global_avg_pool(x);
  const Tensor excite = sigmoid(linear(relu(linear(squeeze, w1, b1)), w2, b2));
  return channel_scale(x, excite);
}

namespace {

struct Entry {
  std::string name;
  Shape shape;
  std::string kind;
  std::span<double> data;
};

std::vector<Entry> entries(const ParameterRefs& refs) {
  std::vector<Entry> out;
  for (Parameter* p : refs.params) out.push_back({p->name, p->value.shape(), "param", p->value.mutable_data()});
  for (const Buffer& b : refs.buffers) out.push_back({b.name, b.shape, "buffer", *b.data});
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParameterRefs& refs) {
  const auto es = entries(refs);
  nlohmann::json manifest;
  manifest["format"] = "weberline-ckpt-v1";
  manifest["entries"] = nlohmann::json::array();
  for (const auto& e : es)
    manifest["entries"].push_back({{"name", e.name}, {"shape", e.shape}, {"kind", e.kind}});
  const std::string text = manifest.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TensorError("cannot write checkpoint: " + path.string());
  const std::uint64_t len = text.size();
  unsigned char lb[8];
  for (int i = 0; i < 8; ++i) lb[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xFFu);
  os.write(reinterpret_cast<const char*>(lb), 8);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : es)
    os.write(reinterpret_cast<const char*>(e.data.data()),
             static_cast<std::streamsize>(e.data.size() * sizeof(double)));
  if (!os) throw TensorError("checkpoint write failed: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, const ParameterRefs& refs) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TensorError("cannot open checkpoint: " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw TensorError("checkpoint truncated");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  if (8 + len > bytes.size()) throw TensorError("checkpoint manifest truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw TensorError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  const auto es = entries(refs);
  const auto& listed = manifest.at("entries");
  if (listed.size() != es.size()) throw TensorError("shape mismatch with checkpoint: entry count");
  std::size_t off = 8 + len;
  for (std::size_t i = 0; i < es.size(); ++i) {
    if (listed[i].at("name").get<std::string>() != es[i].name ||
        listed[i].at("shape").get<Shape>() != es[i].shape)
      throw TensorError("shape mismatch with checkpoint: " + es[i].name);
    const std::size_t nbytes = es[i].data.size() * sizeof(double);
    if (off + nbytes > bytes.size()) throw TensorError("checkpoint payload truncated");
    std::memcpy(es[i].data.data(), bytes.data() + off, nbytes);
    off += nbytes;
  }
  if (off != bytes.size()) throw TensorError("checkpoint has trailing bytes");
}

}  // namespace weberline::tn
