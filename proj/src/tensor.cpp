#include "weberline/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Core>

namespace weberline::tn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

using detail::Node;

void require(bool ok, const std::string& msg) {
  if (!ok) throw TensorError(msg);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined tensor");
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

// Accumulates into a parent's gradient only when it participates in differentiation.
inline std::vector<double>* grad_of(Node* n) {
  return n->requires_grad ? &n->grad_buffer() : nullptr;
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d <= 0) throw TensorError("shape dimensions must be positive: " + shape_string(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (values.size() != shape_size(shape))
    throw TensorError("data length does not match shape " + shape_string(shape));
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->value = std::move(values);
  return t;
}

Tensor Tensor::zeros(Shape shape) {
  const std::size_t n = shape_size(shape);
  return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw TensorError("item() on non-scalar tensor " + shape_string(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

Tensor Tensor::make_result(Shape shape, std::vector<double> values,
                           const std::vector<Tensor>& inputs,
                           std::function<void(const std::vector<double>&)> backward) {
  for (double v : values)
    if (!std::isfinite(v)) throw TensorError("non-finite value produced");
  Tensor out = constant(std::move(shape), std::move(values));
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    out.node_->requires_grad = true;
    for (const auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
  }
  return out;
}

void Tensor::backward() const {
  if (!defined() || size() != 1) throw TensorError("backward on non-scalar");
  if (!node_->requires_grad) return;

  // Post-order DFS gives a topological order (parents before children).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backward) continue;  // leaf
    if (n->grad.size() == n->value.size()) n->backward(n->grad);
    n->grad.clear();
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  Node *na = a.node(), *nb = b.node();
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [na, nb](const std::vector<double>& g) {
    if (auto* ga = grad_of(na))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = grad_of(nb))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
  Node *na = a.node(), *nb = b.node();
  return Tensor::make_result(a.shape(), std::move(v), {a, b}, [na, nb](const std::vector<double>& g) {
    if (auto* ga = grad_of(na))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * nb->value[i];
    if (auto* gb = grad_of(nb))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * na->value[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (auto& x : v) x *= s;
  Node* na = a.node();
  return Tensor::make_result(a.shape(), std::move(v), {a}, [na, s](const std::vector<double>& g) {
    if (auto* ga = grad_of(na))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

Tensor sum(const Tensor& a) {
  const auto d = a.data();
  const double total = std::accumulate(d.begin(), d.end(), 0.0);
  Node* na = a.node();
  return Tensor::make_result({1}, {total}, {a}, [na](const std::vector<double>& g) {
    if (auto* ga = grad_of(na))
      for (auto& x : *ga) x += g[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor relu(const Tensor& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& e : v) e = e > 0.0 ? e : 0.0;
  Node* nx = x.node();
  return Tensor::make_result(x.shape(), std::move(v), {x}, [nx](const std::vector<double>& g) {
    if (auto* gx = grad_of(nx))
      for (std::size_t i = 0; i < g.size(); ++i)
        if (nx->value[i] > 0.0) (*gx)[i] += g[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double z = x[i];
    v[i] = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  Node* nx = x.node();
  auto y = std::make_shared<std::vector<double>>(v);
  return Tensor::make_result(x.shape(), std::move(v), {x}, [nx, y](const std::vector<double>& g) {
    if (auto* gx = grad_of(nx))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (*y)[i] * (1.0 - (*y)[i]);
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4 && b.rank() == 1, "conv2d: expected NCHW, OIkk, O");
  require(stride >= 1 && pad >= 0, "conv2d: stride must be >= 1 and pad >= 0");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  require(w.dim(1) == c && w.dim(3) == k, "conv2d: weight shape " + shape_string(w.shape()) +
                                              " incompatible with input " + shape_string(x.shape()));
  require(b.dim(0) == o, "conv2d: bias length must equal output channels");
  require(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  const int kk = c * k * k;
  const int l = ho * wo;
  const int cols_n = n * l;

  // im2col: (C k k) x (N Ho Wo)
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(kk) * cols_n, 0.0);
  const auto xd = x.data();
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        double* row = cols->data() + static_cast<std::size_t>((ci * k + ki) * k + kj) * cols_n;
        for (int ni = 0; ni < n; ++ni) {
          const double* img = xd.data() + (static_cast<std::size_t>(ni) * c + ci) * h * wd;
          for (int oh = 0; oh < ho; ++oh) {
            const int ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= h) continue;
            for (int ow = 0; ow < wo; ++ow) {
              const int iw = ow * stride - pad + kj;
              if (iw < 0 || iw >= wd) continue;
              row[static_cast<std::size_t>(ni) * l + oh * wo + ow] = img[ih * wd + iw];
            }
          }
        }
      }

  const ConstRowMap wm(w.data().data(), o, kk);
  const ConstRowMap cm(cols->data(), kk, cols_n);
  const RowMat prod = wm * cm;
  std::vector<double> out(static_cast<std::size_t>(n) * o * l);
  for (int ni = 0; ni < n; ++ni)
    for (int oi = 0; oi < o; ++oi) {
      const double bias = b[static_cast<std::size_t>(oi)];
      double* dst = out.data() + (static_cast<std::size_t>(ni) * o + oi) * l;
      const double* src = prod.data() + static_cast<std::size_t>(oi) * cols_n + static_cast<std::size_t>(ni) * l;
      for (int li = 0; li < l; ++li) dst[li] = src[li] + bias;
    }
  if (!x.requires_grad() && !w.requires_grad() && !b.requires_grad()) cols.reset();

  Node *nx = x.node(), *nw = w.node(), *nb = b.node();
  return Tensor::make_result(
      {n, o, ho, wo}, std::move(out), {x, w, b},
      [=](const std::vector<double>& g) {
        RowMat gm(o, cols_n);
        for (int ni = 0; ni < n; ++ni)
          for (int oi = 0; oi < o; ++oi) {
            const double* src = g.data() + (static_cast<std::size_t>(ni) * o + oi) * l;
            for (int li = 0; li < l; ++li) gm(oi, ni * l + li) = src[li];
          }
        const ConstRowMap cm(cols->data(), kk, cols_n);
        if (auto* gw = grad_of(nw)) {
          RowMap gwm(gw->data(), o, kk);
          gwm.noalias() += gm * cm.transpose();
        }
        if (auto* gb = grad_of(nb))
          for (int oi = 0; oi < o; ++oi) (*gb)[static_cast<std::size_t>(oi)] += gm.row(oi).sum();
        if (auto* gx = grad_of(nx)) {
          const ConstRowMap wm(nw->value.data(), o, kk);
          const RowMat dcols = wm.transpose() * gm;
          for (int ci = 0; ci < c; ++ci)
            for (int ki = 0; ki < k; ++ki)
              for (int kj = 0; kj < k; ++kj) {
                const double* row = dcols.data() + static_cast<std::size_t>((ci * k + ki) * k + kj) * cols_n;
                for (int ni = 0; ni < n; ++ni) {
                  double* img = gx->data() + (static_cast<std::size_t>(ni) * c + ci) * h * wd;
                  for (int oh = 0; oh < ho; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= h) continue;
                    for (int ow = 0; ow < wo; ++ow) {
                      const int iw = ow * stride - pad + kj;
                      if (iw < 0 || iw >= wd) continue;
                      img[ih * wd + iw] += row[static_cast<std::size_t>(ni) * l + oh * wo + ow];
                    }
                  }
                }
              }
        }
      });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                 BatchNormMode mode) {
  require(x.rank() == 4 || x.rank() == 2, "batchnorm: expected N×C×H×W or N×C input");
  const int n = x.dim(0), c = x.dim(1);
  const int hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  require(gamma.size() == static_cast<std::size_t>(c) && beta.size() == static_cast<std::size_t>(c),
          "batchnorm: gamma/beta length must equal channels");
  require(stats.running_mean.size() == static_cast<std::size_t>(c), "batchnorm: stats channel mismatch");
  const bool batch_stats = mode != BatchNormMode::Eval;
  if (batch_stats && n < 2) throw TensorError("batchnorm: batch of 1 in train mode");

  const double m = static_cast<double>(n) * hw;
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(c));
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (int ci = 0; ci < c; ++ci) {
    double mu, var;
    if (batch_stats) {
      double s = 0.0;
      for (int ni = 0; ni < n; ++ni)
        for (int i = 0; i < hw; ++i) s += xd[(static_cast<std::size_t>(ni) * c + ci) * hw + i];
      mu = s / m;
      double v = 0.0;
      for (int ni = 0; ni < n; ++ni)
        for (int i = 0; i < hw; ++i) {
          const double d = xd[(static_cast<std::size_t>(ni) * c + ci) * hw + i] - mu;
          v += d * d;
        }
      var = v / m;
      if (mode == BatchNormMode::Train) {
        const double mom = stats.momentum;
        stats.running_mean[ci] = mom * stats.running_mean[ci] + (1.0 - mom) * mu;
        stats.running_var[ci] = mom * stats.running_var[ci] + (1.0 - mom) * var * m / (m - 1.0);
      }
    } else {
      mu = stats.running_mean[ci];
      var = stats.running_var[ci];
    }
    const double is = 1.0 / std::sqrt(var + stats.eps);
    (*inv_std)[ci] = is;
    for (int ni = 0; ni < n; ++ni)
      for (int i = 0; i < hw; ++i) {
        const std::size_t idx = (static_cast<std::size_t>(ni) * c + ci) * hw + i;
        const double xh = (xd[idx] - mu) * is;
        (*xhat)[idx] = xh;
        out[idx] = gamma[ci] * xh + beta[ci];
      }
  }

  Node *nx = x.node(), *ng = gamma.node(), *nb = beta.node();
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, [=](const std::vector<double>& g) {
        auto* gx = grad_of(nx);
        auto* gg = grad_of(ng);
        auto* gb = grad_of(nb);
        for (int ci = 0; ci < c; ++ci) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (int ni = 0; ni < n; ++ni)
            for (int i = 0; i < hw; ++i) {
              const std::size_t idx = (static_cast<std::size_t>(ni) * c + ci) * hw + i;
              sum_g += g[idx];
              sum_gx += g[idx] * (*xhat)[idx];
            }
          if (gg) (*gg)[ci] += sum_gx;
          if (gb) (*gb)[ci] += sum_g;
          if (!gx) continue;
          const double gam = ng->value[ci];
          const double is = (*inv_std)[ci];
          for (int ni = 0; ni < n; ++ni)
            for (int i = 0; i < hw; ++i) {
              const std::size_t idx = (static_cast<std::size_t>(ni) * c + ci) * hw + i;
              if (batch_stats)
                (*gx)[idx] += gam * is / m * (m * g[idx] - sum_g - (*xhat)[idx] * sum_gx);
              else
                (*gx)[idx] += gam * is * g[idx];
            }
        }
      });
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, "global_avg_pool: expected N×C×H×W");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(static_cast<std::size_t>(n) * c);
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    double s = 0.0;
    for (int j = 0; j < hw; ++j) s += xd[i * hw + j];
    out[i] = s / hw;
  }
  Node* nx = x.node();
  return Tensor::make_result({n, c}, std::move(out), {x}, [nx, hw](const std::vector<double>& g) {
    if (auto* gx = grad_of(nx))
      for (std::size_t i = 0; i < g.size(); ++i)
        for (int j = 0; j < hw; ++j) (*gx)[i * hw + j] += g[i] / hw;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "fc: expected N×D, O×D, O");
  const int n = x.dim(0), d = x.dim(1), o = w.dim(0);
  require(w.dim(1) == d, "fc: shape mismatch " + shape_string(x.shape()) + " x " + shape_string(w.shape()));
  require(b.dim(0) == o, "fc: bias length mismatch");
  const ConstRowMap xm(x.data().data(), n, d);
  const ConstRowMap wm(w.data().data(), o, d);
  RowMat y = xm * wm.transpose();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) y(i, j) += b[static_cast<std::size_t>(j)];
  std::vector<double> out(y.data(), y.data() + y.size());
  Node *nx = x.node(), *nw = w.node(), *nb = b.node();
  return Tensor::make_result({n, o}, std::move(out), {x, w, b}, [=](const std::vector<double>& g) {
    const ConstRowMap gm(g.data(), n, o);
    if (auto* gx = grad_of(nx)) {
      RowMap gxm(gx->data(), n, d);
      gxm.noalias() += gm * ConstRowMap(nw->value.data(), o, d);
    }
    if (auto* gw = grad_of(nw)) {
      RowMap gwm(gw->data(), o, d);
      gwm.noalias() += gm.transpose() * ConstRowMap(nx->value.data(), n, d);
    }
    if (auto* gb = grad_of(nb))
      for (int j = 0; j < o; ++j) (*gb)[static_cast<std::size_t>(j)] += gm.col(j).sum();
  });
}

Tensor channel_scale(const Tensor& x, const Tensor& s) {
  require(x.rank() == 4 && s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
          "channel_scale: expected N×C×H×W and N×C");
  const std::size_t nc = s.size();
  const int hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < nc; ++i)
    for (int j = 0; j < hw; ++j) out[i * hw + j] = x[i * hw + j] * s[i];
  Node *nx = x.node(), *ns = s.node();
  return Tensor::make_result(x.shape(), std::move(out), {x, s}, [=](const std::vector<double>& g) {
    auto* gx = grad_of(nx);
    auto* gs = grad_of(ns);
    for (std::size_t i = 0; i < nc; ++i) {
      double acc = 0.0;
      for (int j = 0; j < hw; ++j) {
        if (gx) (*gx)[i * hw + j] += g[i * hw + j] * ns->value[i];
        acc += g[i * hw + j] * nx->value[i * hw + j];
      }
      if (gs) (*gs)[i] += acc;
    }
  });
}

Tensor scale_rows(const Tensor& x, const Tensor& w) {
  require(x.rank() == 2 && w.rank() == 1 && w.dim(0) == x.dim(0), "scale_rows: expected N×K and N");
  const int n = x.dim(0), k = x.dim(1);
  std::vector<double> out(x.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out[static_cast<std::size_t>(i) * k + j] = x[static_cast<std::size_t>(i) * k + j] * w[i];
  Node *nx = x.node(), *nw = w.node();
  return Tensor::make_result(x.shape(), std::move(out), {x, w}, [=](const std::vector<double>& g) {
    auto* gx = grad_of(nx);
    auto* gw = grad_of(nw);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) {
        const std::size_t idx = static_cast<std::size_t>(i) * k + j;
        if (gx) (*gx)[idx] += g[idx] * nw->value[i];
        if (gw) (*gw)[i] += g[idx] * nx->value[idx];
      }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  require(!parts.empty(), "concat: no inputs");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  const Shape& ref = parts[0].shape();
  require(static_cast<int>(ref.size()) > axis, "concat: axis out of range");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == static_cast<int>(ref.size()), "concat: rank mismatch");
    for (int a = 0; a < p.rank(); ++a)
      if (a != axis) require(p.dim(a) == ref[a], "concat: shape mismatch off the concat axis");
    out_shape[axis] += p.dim(axis);
  }
  const std::size_t outer = axis == 0 ? 1 : static_cast<std::size_t>(ref[0]);
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < ref.size(); ++a) inner *= ref[a];

  std::vector<double> out(shape_size(out_shape));
  std::vector<std::size_t> block(parts.size());
  const std::size_t row = static_cast<std::size_t>(out_shape[axis]) * inner;
  std::size_t off = 0;
  std::vector<std::size_t> offsets(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    block[p] = static_cast<std::size_t>(parts[p].dim(axis)) * inner;
    offsets[p] = off;
    const auto src = parts[p].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src.data() + o * block[p], block[p], out.data() + o * row + off);
    off += block[p];
  }
  std::vector<Node*> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return Tensor::make_result(std::move(out_shape), std::move(out), parts,
                             [=](const std::vector<double>& g) {
                               for (std::size_t p = 0; p < nodes.size(); ++p) {
                                 auto* gp = grad_of(nodes[p]);
                                 if (!gp) continue;
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < block[p]; ++i)
                                     (*gp)[o * block[p] + i] += g[o * row + offsets[p] + i];
                               }
                             });
}

Tensor index_rows(const Tensor& x, std::span<const int> rows) {
  require(x.rank() >= 1 && !rows.empty(), "index_rows: empty selection");
  const std::size_t inner = x.size() / static_cast<std::size_t>(x.dim(0));
  Shape shape = x.shape();
  shape[0] = static_cast<int>(rows.size());
  std::vector<double> out(rows.size() * inner);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] >= 0 && rows[r] < x.dim(0), "index_rows: row out of range");
    std::copy_n(x.data().data() + static_cast<std::size_t>(rows[r]) * inner, inner, out.data() + r * inner);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  Node* nx = x.node();
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [=](const std::vector<double>& g) {
    if (auto* gx = grad_of(nx))
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t i = 0; i < inner; ++i)
          (*gx)[static_cast<std::size_t>(idx[r]) * inner + i] += g[r * inner + i];
  });
}

std::vector<double> softmax_rows(std::span<const double> logits, int cols) {
  std::vector<double> out(logits.size());
  const std::size_t rows = logits.size() / static_cast<std::size_t>(cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.data() + r * cols;
    const double m = *std::max_element(z, z + cols);
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += std::exp(z[j] - m);
    for (int j = 0; j < cols; ++j) out[r * cols + j] = std::exp(z[j] - m) / s;
  }
  return out;
}

Tensor softmax_ce(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "softmax_ce");
  require(logits.rank() == 2, "softmax_ce: expected N×C logits");
  const int n = logits.dim(0), k = logits.dim(1);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      const double t = targets[static_cast<std::size_t>(i) * k + j];
      require(t >= -1e-12, "softmax_ce: negative target");
      s += t;
    }
    require(std::abs(s - 1.0) <= 1e-9, "softmax_ce: target rows not normalized");
  }
  auto prob = std::make_shared<std::vector<double>>(softmax_rows(logits.data(), k));
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* z = logits.data().data() + static_cast<std::size_t>(i) * k;
    const double m = *std::max_element(z, z + k);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(z[j] - m);
    const double lse = m + std::log(s);
    for (int j = 0; j < k; ++j) loss -= targets[static_cast<std::size_t>(i) * k + j] * (z[j] - lse);
  }
  loss /= n;
  Node *nl = logits.node(), *nt = targets.node();
  return Tensor::make_result({1}, {loss}, {logits, targets}, [=](const std::vector<double>& g) {
    if (auto* gl = grad_of(nl))
      for (std::size_t i = 0; i < gl->size(); ++i)
        (*gl)[i] += g[0] * ((*prob)[i] - nt->value[i]) / n;
    if (auto* gt = grad_of(nt))
      for (std::size_t i = 0; i < gt->size(); ++i) (*gt)[i] -= g[0] * std::log((*prob)[i]) / n;
  });
}

Tensor mmd_rbf(const Tensor& x, const Tensor& y, double sigma) {
  require(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(1), "mmd: expected n×d and m×d");
  require(sigma > 0.0 && std::isfinite(sigma), "mmd: bandwidth must be positive");
  const int n = x.dim(0), m = y.dim(0), d = x.dim(1);
  const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
  auto kern = [&](const double* a, const double* b) {
    double s = 0.0;
    for (int t = 0; t < d; ++t) s += (a[t] - b[t]) * (a[t] - b[t]);
    return std::exp(-s * inv2s2);
  };
  const double* xd = x.data().data();
  const double* yd = y.data().data();
  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) kxx += kern(xd + i * d, xd + j * d);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) kyy += kern(yd + i * d, yd + j * d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) kxy += kern(xd + i * d, yd + j * d);
  const double value = kxx / (double(n) * n) + kyy / (double(m) * m) - 2.0 * kxy / (double(n) * m);

  Node *nx = x.node(), *ny = y.node();
  return Tensor::make_result({1}, {value}, {x, y}, [=](const std::vector<double>& g) {
    const double* xv = nx->value.data();
    const double* yv = ny->value.data();
    const double s2 = sigma * sigma;
    auto kern2 = [&](const double* a, const double* b) {
      double s = 0.0;
      for (int t = 0; t < d; ++t) s += (a[t] - b[t]) * (a[t] - b[t]);
      return std::exp(-s * inv2s2);
    };
    // d k(a,b) / d a = -k(a,b) (a - b) / sigma^2
    auto accumulate = [&](std::vector<double>* ga, const double* a, int na, const double* b, int nb,
                          double coef, bool self) {
      for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j) {
          const double kv = kern2(a + i * d, b + j * d);
          for (int t = 0; t < d; ++t) {
            const double diff = a[i * d + t] - b[j * d + t];
            (*ga)[static_cast<std::size_t>(i) * d + t] += g[0] * coef * (self ? 2.0 : 1.0) * (-kv * diff / s2);
          }
        }
    };
    if (auto* gx = grad_of(nx)) {
      accumulate(gx, xv, n, xv, n, 1.0 / (double(n) * n), true);
      accumulate(gx, xv, n, yv, m, -2.0 / (double(n) * m), false);
    }
    if (auto* gy = grad_of(ny)) {
      accumulate(gy, yv, m, yv, m, 1.0 / (double(m) * m), true);
      accumulate(gy, yv, m, xv, n, -2.0 / (double(n) * m), false);
    }
  });
}

Tensor one_hot(std::span<const int> labels, int classes) {
  std::vector<double> v(labels.size() * static_cast<std::size_t>(classes), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < classes, "one_hot: label out of range");
    v[i * classes + labels[i]] = 1.0;
  }
  return Tensor::constant({static_cast<int>(labels.size()), classes}, std::move(v));
}

}  // namespace weberline::tn
