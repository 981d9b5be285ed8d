#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flat/common.hpp"

namespace flat::nn {

using Shape = std::vector<int>;

int shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};
}  // namespace detail

// Shared handle to a node of the dynamically recorded computation graph.
// Value semantics on the handle, shared storage underneath.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor constant(const Shape& shape, std::vector<double> values);
  static Tensor variable(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[i]; }
  int size() const { return static_cast<int>(node_->value.size()); }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }

  double item() const;
  // Row-major element access, mostly for tests.
  double at(std::initializer_list<int> idx) const;

  void zero_grad() {
    if (node_) node_->grad.assign(node_->value.size(), 0.0);
  }
  void set_values(const std::vector<double>& v);

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> handle() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse-mode accumulation from a scalar loss into every reachable
// gradient-requiring node.
void backward(const Tensor& loss);

// Scoped, thread-local switch that stops graph recording (inference path).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active();

 private:
  bool prev_;
};

// Forward-pass mode: training enables dropout, which draws from the rng.
struct Mode {
  bool training = false;
  Rng* rng = nullptr;

  static Mode eval() { return Mode{}; }
  static Mode train(Rng& rng) { return Mode{true, &rng}; }
};

constexpr double kMaskedScore = -1e30;

// ---- core ops (forward + recorded backward) ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_row(const Tensor& m, const Tensor& v);  // [n,d] + [d]
Tensor add_col(const Tensor& m, const Tensor& v);  // [n,m] + [n]
Tensor relu(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor slice_rows(const Tensor& a, int begin, int end);
Tensor softmax_rows(const Tensor& a);
// Softmax over the unmasked entries of each row; masked entries get weight
// exactly 0, and a fully masked row is defined as all zeros.
Tensor masked_softmax_rows(const Tensor& a,
                           const std::vector<uint8_t>& blocked);
// Writes `fill` into blocked entries; gradient flows only through the rest.
Tensor mask_fill(const Tensor& a, const std::vector<uint8_t>& blocked,
                 double fill);
// Inverted dropout: scales kept entries by 1/(1-p) at train time so that
// inference needs no rescaling. Identity when p == 0 or mode is eval.
Tensor dropout(const Tensor& a, double p, const Mode& mode);
Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor logsumexp_cols(const Tensor& m);  // [n,m] -> [m], over axis 0
Tensor logsumexp_all(const Tensor& a);   // -> scalar
Tensor sum_all(const Tensor& a);         // -> scalar
Tensor broadcast_row(const Tensor& v, int n);  // [d] -> [n,d]
// out(i,j) = sum_k q(i,k) * kr(i,j,k); the pairwise-position score term.
Tensor rel_term(const Tensor& q, const Tensor& kr);
Tensor pick(const Tensor& v, int i);  // [n] -> scalar
// sum_t m[t, cols[t]] -> scalar
Tensor pick_rows_sum(const Tensor& m, const std::vector<int>& cols);
// sum over (i,j) pairs of m[i,j] -> scalar
Tensor pick_pairs_sum(const Tensor& m,
                      const std::vector<std::pair<int, int>>& idx);

// Checked mode: throws when the tensor contains NaN or Inf.
void check_finite(const Tensor& a, const std::string& what);

// ---- parameters ----

enum class Init { Zeros, Ones, GlorotUniform, NormalInvSqrt };

class ParameterStore {
 public:
  Tensor create(const std::string& name, const Shape& shape, Init init,
                Rng& rng);
  Tensor get(const std::string& name) const;
  Init init_of(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }
  int count() const { return static_cast<int>(order_.size()); }

  void zero_grad();
  uint64_t checksum() const;
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& snap);

  // Checkpoint file: magic "FLATCKPT", u32 version, u32 count, then per
  // array: u32 name length, name bytes, u32 rank, u32 dims, f32 data.
  // All integers and floats little-endian. Layout documented in README.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  struct Entry {
    Tensor tensor;
    Init init;
  };
  std::vector<std::string> order_;
  std::unordered_map<std::string, Entry> by_name_;
};

}  // namespace flat::nn
