#pragma once

// Minimal reverse-mode autodiff over dense float32 tensors. Operations record
// a tape while grad mode is on; backward() walks it in reverse topological
// order and accumulates gradients into every reachable leaf that requires them.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lcrl/common.hpp"

namespace lcrl::ag {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until something is accumulated
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<float>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0f);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float v);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const float> values() const { return node_->value; }
  std::span<float> mutable_values() { return node_->value; }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return node_->ensure_grad(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->grad.clear(); }
  bool requires_grad() const { return node_->requires_grad; }
  float item() const;

  // Seeds d(this)/d(this) = 1 and propagates. `this` must be a recorded scalar.
  void backward() const;

  // Same values, no history, no gradient requirement.
  Tensor detach() const;
  // Independent storage with identical values and requires_grad flag.
  Tensor deep_copy() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared_node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- layers -------------------------------------------------------------
// x [N,I], w [O,I], b [O] -> [N,O]
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b);
// x [N,C,H,W], w [O,C,K,K], b [O] -> [N,O,H-K+1,W-K+1]; stride 1, no padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b);
// Window k, stride k, floor semantics: 6x6 -> 3x3.
Tensor maxpool2d(const Tensor& x, int k = 2);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
// Row-wise over the last dimension of a 2-D tensor.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
// Concatenate along dimension 1 (channels or features); other dims must match.
Tensor concat(const Tensor& a, const Tensor& b);
Tensor flatten(const Tensor& x);

// ---- elementwise and reductions -----------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float s);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& x, float lo, float hi);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// x [N,A], idx[n] in [0,A) -> [N]
Tensor gather(const Tensor& x, std::span<const int> idx);
// x [N,A] -> [N]
Tensor sum_rows(const Tensor& x);

std::size_t count_nonfinite(std::span<const float> v);

// ---- parameters and optimizers ------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct OptimizerConfig {
  enum class Kind { adam, sgd };
  Kind kind = Kind::adam;
  float lr = 1e-3f;
  // Adam constants are fixed across the project.
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Named parameter tensors plus their optimizer moments. Move-only: copying
// would silently alias the underlying tensors, use clone() instead.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Tensor& add(std::string name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<NamedTensor>& entries() { return params_; }
  const std::vector<NamedTensor>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t parameter_count() const;

  ParameterSet clone() const;
  void copy_values_from(const ParameterSet& other);
  void zero_grad();
  bool all_have_grad() const;
  bool any_has_grad() const;
  std::uint64_t checksum() const;

  // Optimizer state, mirrors params_ one-to-one once initialized.
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  long step_count() const { return steps_; }
  void set_step_count(long s) { steps_ = s; }
  void reset_optimizer_state();

  friend void adam_step(ParameterSet& params, const OptimizerConfig& cfg);
  friend void sgd_step(ParameterSet& params, const OptimizerConfig& cfg);

 private:
  void ensure_state();

  std::vector<NamedTensor> params_;
  std::vector<std::vector<float>> m_, v_;
  long steps_ = 0;
};

// Tensors without a gradient are skipped, moments included; at least one
// tensor must have one.
void adam_step(ParameterSet& params, const OptimizerConfig& cfg);
void sgd_step(ParameterSet& params, const OptimizerConfig& cfg);
void optimizer_step(ParameterSet& params, const OptimizerConfig& cfg);

// Scales gradients of all sets so their joint L2 norm is at most max_norm.
// Returns the norm before scaling.
double clip_grad_norm(std::span<ParameterSet* const> sets, double max_norm);

// ---- initialization -----------------------------------------------------
// Orthogonal rows/columns scaled by gain; w is [O,I].
void init_orthogonal(Tensor& w, float gain, Rng& rng);
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)), fan_in = product of all but dim 0.
void init_fan_in_uniform(Tensor& w, Rng& rng);

// ---- checkpoint container -----------------------------------------------
// Layout (all integers little-endian):
//   "LCRLTNSR" | u32 version=1 | u32 count
//   count x { u32 name_len | name bytes | u32 ndim | ndim x u32 dims }
//   payload: each tensor's values as little-endian float32, index order.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

// Parameter values plus Adam moments and step count ("<name>", "<name>#m",
// "<name>#v", "#steps").
void append_parameter_set(std::vector<CheckpointEntry>& out, const std::string& prefix,
                          const ParameterSet& params);
// Restores values (and optimizer state when present) into an existing,
// shape-identical set.
void restore_parameter_set(const std::vector<CheckpointEntry>& in, const std::string& prefix,
                           ParameterSet& params);

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace lcrl::ag
