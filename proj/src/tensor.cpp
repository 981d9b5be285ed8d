#include "flat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <unordered_set>

namespace flat::nn {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

int shape_size(const Shape& s) {
  int n = 1;
  for (int d : s) {
    require(d >= 0, "shape with negative dimension");
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

Tensor Tensor::wrap(NodePtr n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value.assign(shape_size(shape), 0.0);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::constant(const Shape& shape, std::vector<double> values) {
  require(static_cast<int>(values.size()) == shape_size(shape),
          "Tensor::constant: value count does not match shape " +
              shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->value = std::move(values);
  return wrap(std::move(n));
}

Tensor Tensor::variable(const Shape& shape, std::vector<double> values) {
  Tensor t = constant(shape, std::move(values));
  t.node()->requires_grad = true;
  return t;
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

double Tensor::item() const {
  require(size() == 1, "Tensor::item: tensor is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const Shape& s = node_->shape;
  require(idx.size() == s.size(), "Tensor::at: rank mismatch");
  size_t flat_idx = 0;
  size_t k = 0;
  for (int i : idx) {
    flat_idx = flat_idx * s[k] + i;
    ++k;
  }
  return node_->value[flat_idx];
}

void Tensor::set_values(const std::vector<double>& v) {
  require(v.size() == node_->value.size(),
          "Tensor::set_values: size mismatch");
  node_->value = v;
}

// ---- recording helpers ----

namespace {

thread_local int g_no_grad_depth = 0;

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (g_no_grad_depth > 0) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

Tensor make_node(Shape shape, std::vector<double> value, bool rec,
                 std::vector<NodePtr> parents,
                 std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (rec) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return Tensor::wrap(std::move(n));
}

void accumulate(Node* parent, const std::vector<double>& delta) {
  if (!parent->requires_grad) return;
  parent->ensure_grad();
  for (size_t i = 0; i < delta.size(); ++i) parent->grad[i] += delta[i];
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_no_grad_depth > 0) {
  ++g_no_grad_depth;
}
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

void backward(const Tensor& loss) {
  require(loss.defined() && loss.size() == 1,
          "backward: loss must be a defined scalar");
  if (!loss.requires_grad()) return;

  // Post-order DFS gives a topological order; run closures in reverse.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) n->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
              shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      double x = av[static_cast<size_t>(i) * k + l];
      if (x == 0.0) continue;
      const double* brow = bv.data() + static_cast<size_t>(l) * n;
      double* orow = out.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
    }

  bool rec = recording({&a, &b});
  Node* an = a.node();
  Node* bn = b.node();
  return make_node(
      {m, n}, std::move(out), rec, {a.handle(), b.handle()},
      [an, bn, m, k, n](Node& self) {
        const auto& g = self.grad;
        if (an->requires_grad) {
          an->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
              double acc = 0.0;
              const double* grow = g.data() + static_cast<size_t>(i) * n;
              const double* brow = bn->value.data() + static_cast<size_t>(l) * n;
              for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
              an->grad[static_cast<size_t>(i) * k + l] += acc;
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int l = 0; l < k; ++l)
            for (int i = 0; i < m; ++i) {
              double x = an->value[static_cast<size_t>(i) * k + l];
              if (x == 0.0) continue;
              const double* grow = g.data() + static_cast<size_t>(i) * n;
              double* brow = bn->grad.data() + static_cast<size_t>(l) * n;
              for (int j = 0; j < n; ++j) brow[j] += x * grow[j];
            }
        }
      });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: expected a matrix");
  int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(static_cast<size_t>(m) * n);
  const auto& av = a.values();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];

  bool rec = recording({&a});
  Node* an = a.node();
  return make_node({n, m}, std::move(out), rec, {a.handle()},
                   [an, m, n](Node& self) {
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     for (int i = 0; i < m; ++i)
                       for (int j = 0; j < n; ++j)
                         an->grad[static_cast<size_t>(i) * n + j] +=
                             self.grad[static_cast<size_t>(j) * m + i];
                   });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];

  bool rec = recording({&a, &b});
  Node* an = a.node();
  Node* bn = b.node();
  return make_node(a.shape(), std::move(out), rec, {a.handle(), b.handle()},
                   [an, bn](Node& self) {
                     accumulate(an, self.grad);
                     accumulate(bn, self.grad);
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch " +
                                      shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  std::vector<double> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];

  bool rec = recording({&a, &b});
  Node* an = a.node();
  Node* bn = b.node();
  return make_node(a.shape(), std::move(out), rec, {a.handle(), b.handle()},
                   [an, bn](Node& self) {
                     accumulate(an, self.grad);
                     if (bn->requires_grad) {
                       bn->ensure_grad();
                       for (size_t i = 0; i < self.grad.size(); ++i)
                         bn->grad[i] -= self.grad[i];
                     }
                   });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values());
  for (double& x : out) x *= c;

  bool rec = recording({&a});
  Node* an = a.node();
  return make_node(a.shape(), std::move(out), rec, {a.handle()},
                   [an, c](Node& self) {
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       an->grad[i] += c * self.grad[i];
                   });
}

Tensor add_row(const Tensor& m, const Tensor& v) {
  require(m.rank() == 2 && v.rank() == 1 && m.dim(1) == v.dim(0),
          "add_row: shape mismatch " + shape_str(m.shape()) + " + " +
              shape_str(v.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(m.values());
  const auto& vv = v.values();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i) * cols + j] += vv[j];

  bool rec = recording({&m, &v});
  Node* mn = m.node();
  Node* vn = v.node();
  return make_node(m.shape(), std::move(out), rec, {m.handle(), v.handle()},
                   [mn, vn, rows, cols](Node& self) {
                     accumulate(mn, self.grad);
                     if (vn->requires_grad) {
                       vn->ensure_grad();
                       for (int i = 0; i < rows; ++i)
                         for (int j = 0; j < cols; ++j)
                           vn->grad[j] +=
                               self.grad[static_cast<size_t>(i) * cols + j];
                     }
                   });
}

Tensor add_col(const Tensor& m, const Tensor& v) {
  require(m.rank() == 2 && v.rank() == 1 && m.dim(0) == v.dim(0),
          "add_col: shape mismatch " + shape_str(m.shape()) + " + " +
              shape_str(v.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(m.values());
  const auto& vv = v.values();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i) * cols + j] += vv[i];

  bool rec = recording({&m, &v});
  Node* mn = m.node();
  Node* vn = v.node();
  return make_node(m.shape(), std::move(out), rec, {m.handle(), v.handle()},
                   [mn, vn, rows, cols](Node& self) {
                     accumulate(mn, self.grad);
                     if (vn->requires_grad) {
                       vn->ensure_grad();
                       for (int i = 0; i < rows; ++i)
                         for (int j = 0; j < cols; ++j)
                           vn->grad[i] +=
                               self.grad[static_cast<size_t>(i) * cols + j];
                     }
                   });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& x : out)
    if (x < 0.0) x = 0.0;

  bool rec = recording({&a});
  Node* an = a.node();
  return make_node(a.shape(), std::move(out), rec, {a.handle()},
                   [an](Node& self) {
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       if (an->value[i] > 0.0) an->grad[i] += self.grad[i];
                   });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  int cols = parts[0].dim(1);
  int rows = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.dim(1) == cols,
            "concat_rows: column mismatch");
    rows += p.dim(0);
    if (!NoGradGuard::active() && p.requires_grad()) rec = true;
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rows) * cols);
  std::vector<NodePtr> parents;
  for (const Tensor& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.handle());
  }
  std::vector<Node*> raw;
  for (auto& p : parents) raw.push_back(p.get());
  return make_node({rows, cols}, std::move(out), rec, std::move(parents),
                   [raw, cols](Node& self) {
                     size_t offset = 0;
                     for (Node* p : raw) {
                       size_t count = p->value.size();
                       if (p->requires_grad) {
                         p->ensure_grad();
                         for (size_t i = 0; i < count; ++i)
                           p->grad[i] += self.grad[offset + i];
                       }
                       offset += count;
                       (void)cols;
                     }
                   });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  int rows = parts[0].dim(0);
  int cols = 0;
  bool rec = false;
  std::vector<int> widths;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row mismatch");
    widths.push_back(p.dim(1));
    cols += p.dim(1);
    if (!NoGradGuard::active() && p.requires_grad()) rec = true;
  }
  std::vector<double> out(static_cast<size_t>(rows) * cols);
  std::vector<NodePtr> parents;
  int col0 = 0;
  for (const Tensor& p : parts) {
    int w = p.dim(1);
    const auto& pv = p.values();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j)
        out[static_cast<size_t>(i) * cols + col0 + j] =
            pv[static_cast<size_t>(i) * w + j];
    col0 += w;
    parents.push_back(p.handle());
  }
  std::vector<Node*> raw;
  for (auto& p : parents) raw.push_back(p.get());
  return make_node(
      {rows, cols}, std::move(out), rec, std::move(parents),
      [raw, widths, rows, cols](Node& self) {
        int col0 = 0;
        for (size_t k = 0; k < raw.size(); ++k) {
          Node* p = raw[k];
          int w = widths[k];
          if (p->requires_grad) {
            p->ensure_grad();
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < w; ++j)
                p->grad[static_cast<size_t>(i) * w + j] +=
                    self.grad[static_cast<size_t>(i) * cols + col0 + j];
          }
          col0 += w;
        }
      });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  require(shape_size(shape) == a.size(),
          "reshape: cannot view " + shape_str(a.shape()) + " as " +
              shape_str(shape));
  std::vector<double> out(a.values());
  bool rec = recording({&a});
  Node* an = a.node();
  return make_node(shape, std::move(out), rec, {a.handle()},
                   [an](Node& self) { accumulate(an, self.grad); });
}

Tensor slice_rows(const Tensor& a, int begin, int end) {
  require(a.rank() == 2 && 0 <= begin && begin <= end && end <= a.dim(0),
          "slice_rows: bad range");
  int cols = a.dim(1);
  std::vector<double> out(a.values().begin() + static_cast<size_t>(begin) * cols,
                          a.values().begin() + static_cast<size_t>(end) * cols);
  bool rec = recording({&a});
  Node* an = a.node();
  return make_node({end - begin, cols}, std::move(out), rec, {a.handle()},
                   [an, begin, cols](Node& self) {
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     size_t off = static_cast<size_t>(begin) * cols;
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       an->grad[off + i] += self.grad[i];
                   });
}

namespace {

// Shared softmax forward/backward over per-row index lists.
void softmax_forward_row(const double* x, double* y, const int* idx, int k) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < k; ++t) mx = std::max(mx, x[idx[t]]);
  double z = 0.0;
  for (int t = 0; t < k; ++t) z += std::exp(x[idx[t]] - mx);
  for (int t = 0; t < k; ++t) y[idx[t]] = std::exp(x[idx[t]] - mx) / z;
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  require(a.rank() == 2, "softmax_rows: expected a matrix");
  int rows = a.dim(0), cols = a.dim(1);
  std::vector<double> out(static_cast<size_t>(rows) * cols, 0.0);
  std::vector<int> all(cols);
  for (int j = 0; j < cols; ++j) all[j] = j;
  for (int i = 0; i < rows; ++i)
    softmax_forward_row(a.values().data() + static_cast<size_t>(i) * cols,
                        out.data() + static_cast<size_t>(i) * cols, all.data(),
                        cols);

  bool rec = recording({&a});
  Node* an = a.node();
  return make_node(a.shape(), std::move(out), rec, {a.handle()},
                   [an, rows, cols](Node& self) {
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     for (int i = 0; i < rows; ++i) {
                       const double* y =
                           self.value.data() + static_cast<size_t>(i) * cols;
                       const double* gy =
                           self.grad.data() + static_cast<size_t>(i) * cols;
                       double s = 0.0;
                       for (int j = 0; j < cols; ++j) s += gy[j] * y[j];
                       double* gx =
                           an->grad.data() + static_cast<size_t>(i) * cols;
                       for (int j = 0; j < cols; ++j)
                         gx[j] += y[j] * (gy[j] - s);
                     }
                   });
}

Tensor masked_softmax_rows(const Tensor& a,
                           const std::vector<uint8_t>& blocked) {
  require(a.rank() == 2, "masked_softmax_rows: expected a matrix");
  int rows = a.dim(0), cols = a.dim(1);
  require(blocked.size() == a.values().size(),
          "masked_softmax_rows: mask size mismatch");
  std::vector<double> out(static_cast<size_t>(rows) * cols, 0.0);
  std::vector<int> idx;
  for (int i = 0; i < rows; ++i) {
    idx.clear();
    for (int j = 0; j < cols; ++j)
      if (!blocked[static_cast<size_t>(i) * cols + j]) idx.push_back(j);
    if (idx.empty()) continue;  // fully masked row stays all-zero
    softmax_forward_row(a.values().data() + static_cast<size_t>(i) * cols,
                        out.data() + static_cast<size_t>(i) * cols, idx.data(),
                        static_cast<int>(idx.size()));
  }

  bool rec = recording({&a});
  Node* an = a.node();
  return make_node(a.shape(), std::move(out), rec, {a.handle()},
                   [an, rows, cols](Node& self) {
                     // Masked entries have y == 0, so the plain softmax
                     // backward already sends them zero gradient.
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     for (int i = 0; i < rows; ++i) {
                       const double* y =
                           self.value.data() + static_cast<size_t>(i) * cols;
                       const double* gy =
                           self.grad.data() + static_cast<size_t>(i) * cols;
                       double s = 0.0;
                       for (int j = 0; j < cols; ++j) s += gy[j] * y[j];
                       double* gx =
                           an->grad.data() + static_cast<size_t>(i) * cols;
                       for (int j = 0; j < cols; ++j)
                         gx[j] += y[j] * (gy[j] - s);
                     }
                   });
}

Tensor mask_fill(const Tensor& a, const std::vector<uint8_t>& blocked,
                 double fill) {
  require(blocked.size() == a.values().size(),
          "mask_fill: mask size mismatch");
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i)
    if (blocked[i]) out[i] = fill;

  bool rec = recording({&a});
  Node* an = a.node();
  auto mask = blocked;
  return make_node(a.shape(), std::move(out), rec, {a.handle()},
                   [an, mask = std::move(mask)](Node& self) {
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       if (!mask[i]) an->grad[i] += self.grad[i];
                   });
}

Tensor dropout(const Tensor& a, double p, const Mode& mode) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
  if (!mode.training || p == 0.0) return a;
  require(mode.rng != nullptr, "dropout: training mode needs an rng");

  double keep_scale = 1.0 / (1.0 - p);
  std::vector<uint8_t> kept(a.values().size());
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) {
    kept[i] = mode.rng->uniform() >= p ? 1 : 0;
    out[i] = kept[i] ? out[i] * keep_scale : 0.0;
  }

  bool rec = recording({&a});
  Node* an = a.node();
  return make_node(a.shape(), std::move(out), rec, {a.handle()},
                   [an, kept = std::move(kept), keep_scale](Node& self) {
                     if (!an->requires_grad) return;
                     an->ensure_grad();
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       if (kept[i]) an->grad[i] += self.grad[i] * keep_scale;
                   });
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require(a.rank() == 2, "layer_norm: expected a matrix");
  int rows = a.dim(0), cols = a.dim(1);
  require(gain.rank() == 1 && gain.dim(0) == cols && bias.rank() == 1 &&
              bias.dim(0) == cols,
          "layer_norm: gain/bias must match feature width");

  std::vector<double> out(static_cast<size_t>(rows) * cols);
  std::vector<double> xhat(static_cast<size_t>(rows) * cols);
  std::vector<double> inv_std(rows);
  const auto& x = a.values();
  const auto& g = gain.values();
  const auto& b = bias.values();
  for (int i = 0; i < rows; ++i) {
    const double* xi = x.data() + static_cast<size_t>(i) * cols;
    double mean = 0.0;
    for (int j = 0; j < cols; ++j) mean += xi[j];
    mean /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= cols;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (int j = 0; j < cols; ++j) {
      double h = (xi[j] - mean) * inv;
      xhat[static_cast<size_t>(i) * cols + j] = h;
      out[static_cast<size_t>(i) * cols + j] = g[j] * h + b[j];
    }
  }

  bool rec = recording({&a, &gain, &bias});
  Node* an = a.node();
  Node* gn = gain.node();
  Node* bn = bias.node();
  return make_node(
      a.shape(), std::move(out), rec,
      {a.handle(), gain.handle(), bias.handle()},
      [an, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
       cols](Node& self) {
        for (int i = 0; i < rows; ++i) {
          const double* gy = self.grad.data() + static_cast<size_t>(i) * cols;
          const double* h = xhat.data() + static_cast<size_t>(i) * cols;
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (int j = 0; j < cols; ++j) gn->grad[j] += gy[j] * h[j];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (int j = 0; j < cols; ++j) bn->grad[j] += gy[j];
          }
          if (an->requires_grad) {
            an->ensure_grad();
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (int j = 0; j < cols; ++j) {
              double dh = gy[j] * gn->value[j];
              mean_dh += dh;
              mean_dh_h += dh * h[j];
            }
            mean_dh /= cols;
            mean_dh_h /= cols;
            double* gx = an->grad.data() + static_cast<size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) {
              double dh = gy[j] * gn->value[j];
              gx[j] += inv_std[i] * (dh - mean_dh - h[j] * mean_dh_h);
            }
          }
        }
      });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require(table.rank() == 2, "embedding_lookup: table must be a matrix");
  int vocab = table.dim(0), dim = table.dim(1);
  int n = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(n) * dim);
  for (int t = 0; t < n; ++t) {
    require(0 <= ids[t] && ids[t] < vocab,
            "embedding_lookup: id " + std::to_string(ids[t]) +
                " out of range for table with " + std::to_string(vocab) +
                " rows");
    std::copy_n(table.values().data() + static_cast<size_t>(ids[t]) * dim, dim,
                out.data() + static_cast<size_t>(t) * dim);
  }

  bool rec = recording({&table});
  Node* tn = table.node();
  auto ids_copy = ids;
  return make_node({n, dim}, std::move(out), rec, {table.handle()},
                   [tn, ids = std::move(ids_copy), dim](Node& self) {
                     if (!tn->requires_grad) return;
                     tn->ensure_grad();
                     for (size_t t = 0; t < ids.size(); ++t) {
                       double* row =
                           tn->grad.data() + static_cast<size_t>(ids[t]) * dim;
                       const double* gy = self.grad.data() + t * dim;
                       for (int j = 0; j < dim; ++j) row[j] += gy[j];
                     }
                   });
}

Tensor logsumexp_cols(const Tensor& m) {
  require(m.rank() == 2, "logsumexp_cols: expected a matrix");
  int rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(cols);
  const auto& x = m.values();
  for (int j = 0; j < cols; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < rows; ++i)
      mx = std::max(mx, x[static_cast<size_t>(i) * cols + j]);
    double z = 0.0;
    for (int i = 0; i < rows; ++i)
      z += std::exp(x[static_cast<size_t>(i) * cols + j] - mx);
    out[j] = mx + std::log(z);
  }

  bool rec = recording({&m});
  Node* mn = m.node();
  return make_node({cols}, std::move(out), rec, {m.handle()},
                   [mn, rows, cols](Node& self) {
                     if (!mn->requires_grad) return;
                     mn->ensure_grad();
                     for (int j = 0; j < cols; ++j) {
                       double lse = self.value[j];
                       double gy = self.grad[j];
                       for (int i = 0; i < rows; ++i) {
                         size_t k = static_cast<size_t>(i) * cols + j;
                         mn->grad[k] += gy * std::exp(mn->value[k] - lse);
                       }
                     }
                   });
}

Tensor logsumexp_all(const Tensor& a) {
  const auto& x = a.values();
  require(!x.empty(), "logsumexp_all: empty tensor");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : x) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : x) z += std::exp(v - mx);
  double lse = mx + std::log(z);

  bool rec = recording({&a});
  Node* an = a.node();
  return make_node({1}, {lse}, rec, {a.handle()}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    double lse = self.value[0];
    double gy = self.grad[0];
    for (size_t i = 0; i < an->value.size(); ++i)
      an->grad[i] += gy * std::exp(an->value[i] - lse);
  });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  bool rec = recording({&a});
  Node* an = a.node();
  return make_node({1}, {s}, rec, {a.handle()}, [an](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (size_t i = 0; i < an->grad.size(); ++i)
      an->grad[i] += self.grad[0];
  });
}

Tensor broadcast_row(const Tensor& v, int n) {
  require(v.rank() == 1, "broadcast_row: expected a vector");
  int d = v.dim(0);
  std::vector<double> out(static_cast<size_t>(n) * d);
  for (int i = 0; i < n; ++i)
    std::copy(v.values().begin(), v.values().end(),
              out.begin() + static_cast<size_t>(i) * d);

  bool rec = recording({&v});
  Node* vn = v.node();
  return make_node({n, d}, std::move(out), rec, {v.handle()},
                   [vn, n, d](Node& self) {
                     if (!vn->requires_grad) return;
                     vn->ensure_grad();
                     for (int i = 0; i < n; ++i)
                       for (int j = 0; j < d; ++j)
                         vn->grad[j] += self.grad[static_cast<size_t>(i) * d + j];
                   });
}

Tensor rel_term(const Tensor& q, const Tensor& kr) {
  require(q.rank() == 2 && kr.rank() == 3 && kr.dim(0) == q.dim(0) &&
              kr.dim(1) == q.dim(0) && kr.dim(2) == q.dim(1),
          "rel_term: expected q [S,h] and kr [S,S,h], got " +
              shape_str(q.shape()) + " and " + shape_str(kr.shape()));
  int s = q.dim(0), h = q.dim(1);
  std::vector<double> out(static_cast<size_t>(s) * s);
  const auto& qv = q.values();
  const auto& kv = kr.values();
  for (int i = 0; i < s; ++i) {
    const double* qi = qv.data() + static_cast<size_t>(i) * h;
    for (int j = 0; j < s; ++j) {
      const double* kij = kv.data() + (static_cast<size_t>(i) * s + j) * h;
      double acc = 0.0;
      for (int k = 0; k < h; ++k) acc += qi[k] * kij[k];
      out[static_cast<size_t>(i) * s + j] = acc;
    }
  }

  bool rec = recording({&q, &kr});
  Node* qn = q.node();
  Node* kn = kr.node();
  return make_node(
      {s, s}, std::move(out), rec, {q.handle(), kr.handle()},
      [qn, kn, s, h](Node& self) {
        for (int i = 0; i < s; ++i)
          for (int j = 0; j < s; ++j) {
            double gy = self.grad[static_cast<size_t>(i) * s + j];
            if (gy == 0.0) continue;
            const double* kij =
                kn->value.data() + (static_cast<size_t>(i) * s + j) * h;
            const double* qi = qn->value.data() + static_cast<size_t>(i) * h;
            if (qn->requires_grad) {
              qn->ensure_grad();
              double* gq = qn->grad.data() + static_cast<size_t>(i) * h;
              for (int k = 0; k < h; ++k) gq[k] += gy * kij[k];
            }
            if (kn->requires_grad) {
              kn->ensure_grad();
              double* gk =
                  kn->grad.data() + (static_cast<size_t>(i) * s + j) * h;
              for (int k = 0; k < h; ++k) gk[k] += gy * qi[k];
            }
          }
      });
}

Tensor pick(const Tensor& v, int i) {
  require(v.rank() == 1 && 0 <= i && i < v.dim(0), "pick: index out of range");
  bool rec = recording({&v});
  Node* vn = v.node();
  return make_node({1}, {v.values()[i]}, rec, {v.handle()},
                   [vn, i](Node& self) {
                     if (!vn->requires_grad) return;
                     vn->ensure_grad();
                     vn->grad[i] += self.grad[0];
                   });
}

Tensor pick_rows_sum(const Tensor& m, const std::vector<int>& cols) {
  require(m.rank() == 2 && static_cast<int>(cols.size()) == m.dim(0),
          "pick_rows_sum: need one column index per row");
  int width = m.dim(1);
  double s = 0.0;
  for (size_t t = 0; t < cols.size(); ++t) {
    require(0 <= cols[t] && cols[t] < width,
            "pick_rows_sum: tag id " + std::to_string(cols[t]) +
                " out of range");
    s += m.values()[t * width + cols[t]];
  }
  bool rec = recording({&m});
  Node* mn = m.node();
  auto cols_copy = cols;
  return make_node({1}, {s}, rec, {m.handle()},
                   [mn, cols = std::move(cols_copy), width](Node& self) {
                     if (!mn->requires_grad) return;
                     mn->ensure_grad();
                     for (size_t t = 0; t < cols.size(); ++t)
                       mn->grad[t * width + cols[t]] += self.grad[0];
                   });
}

Tensor pick_pairs_sum(const Tensor& m,
                      const std::vector<std::pair<int, int>>& idx) {
  require(m.rank() == 2, "pick_pairs_sum: expected a matrix");
  int rows = m.dim(0), cols = m.dim(1);
  double s = 0.0;
  for (auto [i, j] : idx) {
    require(0 <= i && i < rows && 0 <= j && j < cols,
            "pick_pairs_sum: index out of range");
    s += m.values()[static_cast<size_t>(i) * cols + j];
  }
  bool rec = recording({&m});
  Node* mn = m.node();
  auto idx_copy = idx;
  return make_node({1}, {s}, rec, {m.handle()},
                   [mn, idx = std::move(idx_copy), cols](Node& self) {
                     if (!mn->requires_grad) return;
                     mn->ensure_grad();
                     for (auto [i, j] : idx)
                       mn->grad[static_cast<size_t>(i) * cols + j] +=
                           self.grad[0];
                   });
}

void check_finite(const Tensor& a, const std::string& what) {
  for (double v : a.values())
    if (!std::isfinite(v)) fail(what + ": non-finite value detected");
}

// ---- parameters ----

Tensor ParameterStore::create(const std::string& name, const Shape& shape,
                              Init init, Rng& rng) {
  require(!by_name_.count(name), "parameter '" + name + "' already exists");
  int n = shape_size(shape);
  std::vector<double> values(n, 0.0);
  switch (init) {
    case Init::Zeros:
      break;
    case Init::Ones:
      values.assign(n, 1.0);
      break;
    case Init::GlorotUniform: {
      require(shape.size() == 2, "GlorotUniform: expected a matrix for '" +
                                     name + "'");
      double limit = std::sqrt(6.0 / (shape[0] + shape[1]));
      for (double& v : values) v = rng.uniform(-limit, limit);
      break;
    }
    case Init::NormalInvSqrt: {
      double stddev = 1.0 / std::sqrt(static_cast<double>(shape.back()));
      for (double& v : values) v = rng.normal(0.0, stddev);
      break;
    }
  }
  Tensor t = Tensor::variable(shape, std::move(values));
  order_.push_back(name);
  by_name_.emplace(name, t);
  return t;
}

Tensor ParameterStore::get(const std::string& name) const {
  auto it = by_name_.find(name);
  require(it != by_name_.end(), "unknown parameter '" + name + "'");
  return it->second;
}

bool ParameterStore::has(const std::string& name) const {
  return by_name_.count(name) > 0;
}

void ParameterStore::zero_grad() {
  for (const auto& name : order_) by_name_.at(name).zero_grad();
}

uint64_t ParameterStore::checksum() const {
  uint64_t h = 1469598103934665603ull;  // FNV-1a
  auto mix = [&h](const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& name : order_) {
    mix(name.data(), name.size());
    const auto& v = by_name_.at(name).values();
    mix(v.data(), v.size() * sizeof(double));
  }
  return h;
}

std::vector<std::vector<double>> ParameterStore::snapshot() const {
  std::vector<std::vector<double>> snap;
  snap.reserve(order_.size());
  for (const auto& name : order_) snap.push_back(by_name_.at(name).values());
  return snap;
}

void ParameterStore::restore(const std::vector<std::vector<double>>& snap) {
  require(snap.size() == order_.size(), "restore: snapshot size mismatch");
  for (size_t i = 0; i < order_.size(); ++i)
    by_name_.at(order_[i]).set_values(snap[i]);
}

namespace {

constexpr char kMagic[8] = {'F', 'L', 'A', 'T', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.good(), "checkpoint: truncated file");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void ParameterStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "checkpoint: cannot write " + path);
  out.write(kMagic, 8);
  write_u32(out, kVersion);
  write_u32(out, static_cast<uint32_t>(order_.size()));
  for (const auto& name : order_) {
    const Tensor& t = by_name_.at(name);
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(t.shape().size()));
    for (int d : t.shape()) write_u32(out, static_cast<uint32_t>(d));
    for (double v : t.values()) {
      float f = static_cast<float>(v);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      write_u32(out, bits);
    }
  }
  require(out.good(), "checkpoint: write failed for " + path);
}

void ParameterStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "checkpoint: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  require(in.good() && std::memcmp(magic, kMagic, 8) == 0,
          "checkpoint: bad magic in " + path);
  uint32_t version = read_u32(in);
  require(version == kVersion,
          "checkpoint: unsupported version " + std::to_string(version));
  uint32_t count = read_u32(in);
  require(count == order_.size(),
          "checkpoint: expected " + std::to_string(order_.size()) +
              " arrays, file has " + std::to_string(count));
  std::unordered_set<std::string> seen;
  for (uint32_t a = 0; a < count; ++a) {
    uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    require(in.good(), "checkpoint: truncated name");
    require(by_name_.count(name),
            "checkpoint: unknown array '" + name + "' in " + path);
    require(seen.insert(name).second,
            "checkpoint: duplicate array '" + name + "'");
    Tensor t = by_name_.at(name);
    uint32_t rank = read_u32(in);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d)
      shape[d] = static_cast<int>(read_u32(in));
    require(shape == t.shape(), "checkpoint: shape mismatch for '" + name +
                                    "': file " + shape_str(shape) +
                                    " vs model " + shape_str(t.shape()));
    std::vector<double>& v = t.values();
    for (double& x : v) {
      uint32_t bits = read_u32(in);
      float f;
      std::memcpy(&f, &bits, 4);
      x = static_cast<double>(f);
    }
  }
}

}  // namespace flat::nn
