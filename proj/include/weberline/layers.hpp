#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "weberline/tensor.hpp"

namespace weberline::tn {

/// Trainable tensor plus its SGD momentum buffer.
struct Parameter {
  std::string name;
  Tensor value;  // gradient-tracking leaf
  std::vector<double> velocity;

  Parameter() = default;
  Parameter(std::string n, Shape shape, std::vector<double> init);

  std::span<const double> gradient() const { return value.grad(); }
  void zero_grad() { value.zero_grad(); }
};

/// Non-trainable state stored in checkpoints (batch-norm running statistics).
struct Buffer {
  std::string name;
  Shape shape;
  std::vector<double>* data = nullptr;
};

/// Flat views over a model's state, in a deterministic order.
struct ParameterRefs {
  std::vector<Parameter*> params;
  std::vector<Buffer> buffers;

  void append(const ParameterRefs& other);
};

/// v <- momentum * v + g; p <- p - lr * v; gradients are zeroed afterwards.
void sgd_momentum_step(const std::vector<Parameter*>& params, double lr, double momentum);
void zero_grad(const std::vector<Parameter*>& params);

/// Order-sensitive FNV-1a hash over parameter values, for change detection in tests.
std::uint64_t checksum(const std::vector<Parameter*>& params);

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad,
         std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterRefs& refs);

  Parameter weight, bias;
  int stride = 1, pad = 0;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterRefs& refs);

  Parameter weight, bias;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(std::string name, int channels);

  Tensor operator()(const Tensor& x, BatchNormMode mode);
  void collect(ParameterRefs& refs);

  Parameter gamma, beta;
  BatchNormStats stats;

 private:
  std::string name_;
};

/// Squeeze-and-excitation: x * sigmoid(fc2(relu(fc1(gap(x))))), per channel.
class SEBlock {
 public:
  SEBlock() = default;
  SEBlock(std::string name, int channels, int reduction, std::mt19937_64& rng);

  Tensor operator()(const Tensor& x) const;
  void collect(ParameterRefs& refs);

  Linear fc1, fc2;
};

/// Composes the squeeze-excitation from primitives given explicit weights.
Tensor se_block(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                const Tensor& b2);

/// Kaiming-uniform (fan-in) weights, bound sqrt(6 / fan_in).
std::vector<double> kaiming_uniform(std::size_t count, int fan_in, std::mt19937_64& rng);

// Checkpoint: u64 LE manifest byte length, JSON manifest
// {"format":"weberline-ckpt-v1","entries":[{"name","shape","kind"}]}, then the
// f64 LE payloads in manifest order.
void save_checkpoint(const std::filesystem::path& path, const ParameterRefs& refs);
void load_checkpoint(const std::filesystem::path& path, const ParameterRefs& refs);

}  // namespace weberline::tn
