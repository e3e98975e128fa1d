#include "lcrl/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace lcrl::ag {

namespace {

thread_local bool g_grad_enabled = true;

using BackwardFn = std::function<void(Node&)>;

void check_finite(const char* op, const std::vector<float>& v) {
  for (float x : v)
    if (!std::isfinite(x)) throw NumericalError(std::string("non-finite value produced by ") + op);
}

Tensor make_result(const char* op, Shape shape, std::vector<float> value,
                   std::initializer_list<const Tensor*> parents, BackwardFn fn) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled)
    for (const Tensor* p : parents) needs = needs || p->requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* p : parents) node->parents.push_back(p->shared_node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), [&] { return
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()); });
}

// Gradient buffer of parent i, or nullptr when that parent needs none.
std::vector<float>* parent_grad(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  return p->requires_grad ? &p->ensure_grad() : nullptr;
}

const std::vector<float>& parent_value(Node& self, std::size_t i) { return self.parents[i]->value; }

template <typename F, typename D>
Tensor unary(const char* op, const Tensor& x, F forward, D dfdx) {
  std::vector<float> y(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = forward(xv[i]);
  return make_result(op, x.shape(), std::move(y), {&x}, [dfdx](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = parent_value(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    require(d >= 0, [&] { return "negative dimension in shape " + shape_str(s); });
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(shape_numel(shape), 0.0f);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  require(shape_numel(shape) == values.size(), [&] { return
          "Tensor::from: " + std::to_string(values.size()) + " values for shape " + shape_str(shape); });
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float v) { return from({}, {v}); }

float Tensor::item() const {
  require(numel() == 1, [&] { return "Tensor::item on tensor of shape " + shape_str(shape()); });
  return node_->value[0];
}

void Tensor::backward() const {
  require(defined(), "backward on undefined tensor");
  require(numel() == 1, [&] { return "backward requires a scalar loss, got shape " + shape_str(shape()); });
  require(node_->requires_grad, "backward on a tensor that is detached from any parameter");

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor Tensor::deep_copy() const { return from(shape(), node_->value, node_->requires_grad); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- layers -------------------------------------------------------------

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXf>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXf>;

Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 2 && w.ndim() == 2 && b.ndim() == 1 && x.dim(1) == w.dim(1) && b.dim(0) == w.dim(0), [&] {
    return "dense: incompatible shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
           shape_str(b.shape());
  });
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  std::vector<float> y(static_cast<std::size_t>(n) * out);
  ConstMatMap X(x.values().data(), n, in);
  ConstMatMap W(w.values().data(), out, in);
  ConstVecMap B(b.values().data(), out);
  MatMap Y(y.data(), n, out);
  Y.noalias() = X * W.transpose();
  Y.rowwise() += B.transpose();
  return make_result("dense", {n, out}, std::move(y), {&x, &w, &b}, [n, in, out](Node& self) {
    ConstMatMap G(self.grad.data(), n, out);
    if (auto* gx = parent_grad(self, 0)) {
      MatMap GX(gx->data(), n, in);
      GX.noalias() += G * ConstMatMap(parent_value(self, 1).data(), out, in);
    }
    if (auto* gw = parent_grad(self, 1)) {
      MatMap GW(gw->data(), out, in);
      GW.noalias() += G.transpose() * ConstMatMap(parent_value(self, 0).data(), n, in);
    }
    if (auto* gb = parent_grad(self, 2)) VecMap(gb->data(), out) += G.colwise().sum().transpose();
  });
}

namespace {

// Patch matrix [N*oh*ow, c*k*k]; row = output location, column = (ic, kh, kw).
void im2col(const float* x, int n, int c, int h, int wd, int k, float* cols) {
  const int oh = h - k + 1, ow = wd - k + 1, width = c * k * k;
  for (int ni = 0; ni < n; ++ni)
    for (int r = 0; r < oh; ++r)
      for (int col = 0; col < ow; ++col) {
        float* row = cols + ((static_cast<std::size_t>(ni) * oh + r) * ow + col) * width;
        for (int ic = 0; ic < c; ++ic) {
          const float* xp = x + ((static_cast<std::size_t>(ni) * c + ic) * h + r) * wd + col;
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) *row++ = xp[kh * wd + kw];
        }
      }
}

void col2im_add(const float* cols, int n, int c, int h, int wd, int k, float* gx) {
  const int oh = h - k + 1, ow = wd - k + 1, width = c * k * k;
  for (int ni = 0; ni < n; ++ni)
    for (int r = 0; r < oh; ++r)
      for (int col = 0; col < ow; ++col) {
        const float* row = cols + ((static_cast<std::size_t>(ni) * oh + r) * ow + col) * width;
        for (int ic = 0; ic < c; ++ic) {
          float* gp = gx + ((static_cast<std::size_t>(ni) * c + ic) * h + r) * wd + col;
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw) gp[kh * wd + kw] += *row++;
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 4 && w.ndim() == 4 && b.ndim() == 1 && x.dim(1) == w.dim(1) && w.dim(2) == w.dim(3) &&
              b.dim(0) == w.dim(0) && x.dim(2) >= w.dim(2) && x.dim(3) >= w.dim(3),
          [&] {
            return "conv2d: incompatible shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
                   shape_str(b.shape());
          });
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  const int oh = h - k + 1, ow = wd - k + 1;
  const int locs = oh * ow, width = c * k * k;
  auto cols = std::make_shared<std::vector<float>>(static_cast<std::size_t>(n) * locs * width);
  im2col(x.values().data(), n, c, h, wd, k, cols->data());
  // out[l, oc] for every location, then transposed into [N, O, oh, ow].
  RowMat out = ConstMatMap(cols->data(), static_cast<Eigen::Index>(n) * locs, width) *
               ConstMatMap(w.values().data(), o, width).transpose();
  std::vector<float> y(static_cast<std::size_t>(n) * o * locs);
  const float* bv = b.values().data();
  for (int ni = 0; ni < n; ++ni)
    for (int oc = 0; oc < o; ++oc) {
      float* yp = y.data() + (static_cast<std::size_t>(ni) * o + oc) * locs;
      for (int l = 0; l < locs; ++l) yp[l] = out(static_cast<Eigen::Index>(ni) * locs + l, oc) + bv[oc];
    }
  return make_result("conv2d", {n, o, oh, ow}, std::move(y), {&x, &w, &b},
                     [n, c, h, wd, o, k, locs, width, cols](Node& self) {
                       // Gradient w.r.t. out in [N*locs, O] layout.
                       RowMat g(static_cast<Eigen::Index>(n) * locs, o);
                       for (int ni = 0; ni < n; ++ni)
                         for (int oc = 0; oc < o; ++oc) {
                           const float* gp = self.grad.data() + (static_cast<std::size_t>(ni) * o + oc) * locs;
                           for (int l = 0; l < locs; ++l) g(static_cast<Eigen::Index>(ni) * locs + l, oc) = gp[l];
                         }
                       ConstMatMap P(cols->data(), static_cast<Eigen::Index>(n) * locs, width);
                       if (auto* gw = parent_grad(self, 1)) MatMap(gw->data(), o, width).noalias() += g.transpose() * P;
                       if (auto* gb = parent_grad(self, 2)) VecMap(gb->data(), o) += g.colwise().sum().transpose();
                       if (auto* gx = parent_grad(self, 0)) {
                         RowMat gcols = g * ConstMatMap(parent_value(self, 1).data(), o, width);
                         col2im_add(gcols.data(), n, c, h, wd, k, gx->data());
                       }
                     });
}

Tensor maxpool2d(const Tensor& x, int k) {
  require(x.ndim() == 4 && k >= 1 && x.dim(2) >= k && x.dim(3) >= k, [&] { return
          "maxpool2d: bad input shape " + shape_str(x.shape()) + " for kernel " + std::to_string(k); });
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / k, ow = w / k;
  std::vector<float> y(static_cast<std::size_t>(n) * c * oh * ow);
  std::vector<std::uint32_t> arg(y.size());
  const float* xv = x.values().data();
  for (int p = 0; p < n * c; ++p) {
    const float* xp = xv + static_cast<std::size_t>(p) * h * w;
    for (int r = 0; r < oh; ++r)
      for (int col = 0; col < ow; ++col) {
        int best = (r * k) * w + col * k;
        for (int dr = 0; dr < k; ++dr)
          for (int dc = 0; dc < k; ++dc) {
            const int idx = (r * k + dr) * w + col * k + dc;
            if (xp[idx] > xp[best]) best = idx;
          }
        const std::size_t o = (static_cast<std::size_t>(p) * oh + r) * ow + col;
        y[o] = xp[best];
        arg[o] = static_cast<std::uint32_t>(static_cast<std::size_t>(p) * h * w + best);
      }
  }
  return make_result("maxpool2d", {n, c, oh, ow}, std::move(y), {&x}, [arg = std::move(arg)](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < arg.size(); ++i) (*gx)[arg[i]] += self.grad[i];
  });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float xv, float) { return xv > 0.0f ? 1.0f : 0.0f; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](float v) { return std::tanh(v); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](float v) { return v * v; }, [](float xv, float) { return 2.0f * xv; });
}

Tensor scale(const Tensor& x, float s) {
  return unary(
      "scale", x, [s](float v) { return v * s; }, [s](float, float) { return s; });
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  require(lo <= hi, "clamp: lo > hi");
  return unary(
      "clamp", x, [lo, hi](float v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](float xv, float) { return (xv >= lo && xv <= hi) ? 1.0f : 0.0f; });
}

Tensor softmax(const Tensor& x) {
  require(x.ndim() == 2, [&] { return "softmax: expects [N,A], got " + shape_str(x.shape()); });
  const int n = x.dim(0), a = x.dim(1);
  std::vector<float> y(x.numel());
  const float* xv = x.values().data();
  for (int i = 0; i < n; ++i) {
    const float* xr = xv + static_cast<std::size_t>(i) * a;
    float* yr = y.data() + static_cast<std::size_t>(i) * a;
    const float m = *std::max_element(xr, xr + a);
    float s = 0.0f;
    for (int j = 0; j < a; ++j) s += (yr[j] = std::exp(xr[j] - m));
    for (int j = 0; j < a; ++j) yr[j] /= s;
  }
  return make_result("softmax", x.shape(), std::move(y), {&x}, [n, a](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (int i = 0; i < n; ++i) {
      const float* yr = self.value.data() + static_cast<std::size_t>(i) * a;
      const float* gr = self.grad.data() + static_cast<std::size_t>(i) * a;
      float dot = 0.0f;
      for (int j = 0; j < a; ++j) dot += gr[j] * yr[j];
      for (int j = 0; j < a; ++j) (*gx)[static_cast<std::size_t>(i) * a + j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  require(x.ndim() == 2, [&] { return "log_softmax: expects [N,A], got " + shape_str(x.shape()); });
  const int n = x.dim(0), a = x.dim(1);
  std::vector<float> y(x.numel());
  const float* xv = x.values().data();
  for (int i = 0; i < n; ++i) {
    const float* xr = xv + static_cast<std::size_t>(i) * a;
    float* yr = y.data() + static_cast<std::size_t>(i) * a;
    const float m = *std::max_element(xr, xr + a);
    double s = 0.0;
    for (int j = 0; j < a; ++j) s += std::exp(static_cast<double>(xr[j] - m));
    const float lse = m + static_cast<float>(std::log(s));
    for (int j = 0; j < a; ++j) yr[j] = xr[j] - lse;
  }
  return make_result("log_softmax", x.shape(), std::move(y), {&x}, [n, a](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (int i = 0; i < n; ++i) {
      const float* yr = self.value.data() + static_cast<std::size_t>(i) * a;
      const float* gr = self.grad.data() + static_cast<std::size_t>(i) * a;
      float gs = 0.0f;
      for (int j = 0; j < a; ++j) gs += gr[j];
      for (int j = 0; j < a; ++j) (*gx)[static_cast<std::size_t>(i) * a + j] += gr[j] - std::exp(yr[j]) * gs;
    }
  });
}

Tensor concat(const Tensor& a, const Tensor& b) {
  bool ok = a.ndim() >= 2 && a.ndim() == b.ndim() && a.dim(0) == b.dim(0);
  for (int d = 2; ok && d < a.ndim(); ++d) ok = a.dim(d) == b.dim(d);
  require(ok, [&] { return "concat: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()); });
  const int n = a.dim(0);
  const std::size_t sa = a.numel() / static_cast<std::size_t>(n), sb = b.numel() / static_cast<std::size_t>(n);
  std::vector<float> y(a.numel() + b.numel());
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.values().data() + i * sa, sa, y.data() + i * (sa + sb));
    std::copy_n(b.values().data() + i * sb, sb, y.data() + i * (sa + sb) + sa);
  }
  Shape shape = a.shape();
  shape[1] += b.dim(1);
  return make_result("concat", std::move(shape), std::move(y), {&a, &b}, [n, sa, sb](Node& self) {
    auto* ga = parent_grad(self, 0);
    auto* gb = parent_grad(self, 1);
    for (int i = 0; i < n; ++i) {
      const float* g = self.grad.data() + i * (sa + sb);
      if (ga)
        for (std::size_t j = 0; j < sa; ++j) (*ga)[i * sa + j] += g[j];
      if (gb)
        for (std::size_t j = 0; j < sb; ++j) (*gb)[i * sb + j] += g[sa + j];
    }
  });
}

Tensor flatten(const Tensor& x) {
  require(x.ndim() >= 1, "flatten: scalar input");
  const int n = x.dim(0);
  const int rest = n == 0 ? 0 : static_cast<int>(x.numel() / static_cast<std::size_t>(n));
  return make_result("flatten", {n, rest}, std::vector<float>(x.values().begin(), x.values().end()), {&x},
                     [](Node& self) {
                       auto* gx = parent_grad(self, 0);
                       if (!gx) return;
                       for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
                     });
}

// ---- elementwise and reductions -----------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] + b.values()[i];
  return make_result("add", a.shape(), std::move(y), {&a, &b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (auto* g = parent_grad(self, p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] - b.values()[i];
  return make_result("sub", a.shape(), std::move(y), {&a, &b}, [](Node& self) {
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] * b.values()[i];
  return make_result("mul", a.shape(), std::move(y), {&a, &b}, [](Node& self) {
    const auto& av = parent_value(self, 0);
    const auto& bv = parent_value(self, 1);
    if (auto* g = parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (auto* g = parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape("minimum", a, b);
  std::vector<float> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::min(a.values()[i], b.values()[i]);
  return make_result("minimum", a.shape(), std::move(y), {&a, &b}, [](Node& self) {
    const auto& av = parent_value(self, 0);
    const auto& bv = parent_value(self, 1);
    auto* ga = parent_grad(self, 0);
    auto* gb = parent_grad(self, 1);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (av[i] <= bv[i]) {
        if (ga) (*ga)[i] += self.grad[i];
      } else if (gb) {
        (*gb)[i] += self.grad[i];
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.values()) s += v;
  return make_result("sum", {}, {static_cast<float>(s)}, {&x}, [](Node& self) {
    if (auto* g = parent_grad(self, 0))
      for (float& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  require(x.numel() > 0, "mean of empty tensor");
  double s = 0.0;
  for (float v : x.values()) s += v;
  const float inv = 1.0f / static_cast<float>(x.numel());
  return make_result("mean", {}, {static_cast<float>(s * inv)}, {&x}, [inv](Node& self) {
    if (auto* g = parent_grad(self, 0))
      for (float& v : *g) v += self.grad[0] * inv;
  });
}

Tensor gather(const Tensor& x, std::span<const int> idx) {
  require(x.ndim() == 2 && static_cast<std::size_t>(x.dim(0)) == idx.size(), [&] { return
          "gather: expects [N,A] with N indices, got " + shape_str(x.shape()) + " and " +
              std::to_string(idx.size()) + " indices"; });
  const int n = x.dim(0), a = x.dim(1);
  std::vector<float> y(static_cast<std::size_t>(n));
  std::vector<int> index(idx.begin(), idx.end());
  for (int i = 0; i < n; ++i) {
    require(index[i] >= 0 && index[i] < a, "gather: index out of range");
    y[i] = x.values()[static_cast<std::size_t>(i) * a + index[i]];
  }
  return make_result("gather", {n}, std::move(y), {&x}, [a, index = std::move(index)](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < index.size(); ++i) (*gx)[i * a + index[i]] += self.grad[i];
  });
}

Tensor sum_rows(const Tensor& x) {
  require(x.ndim() == 2, [&] { return "sum_rows: expects [N,A], got " + shape_str(x.shape()); });
  const int n = x.dim(0), a = x.dim(1);
  std::vector<float> y(static_cast<std::size_t>(n), 0.0f);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < a; ++j) y[i] += x.values()[static_cast<std::size_t>(i) * a + j];
  return make_result("sum_rows", {n}, std::move(y), {&x}, [a](Node& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      for (int j = 0; j < a; ++j) (*gx)[i * a + j] += self.grad[i];
  });
}

std::size_t count_nonfinite(std::span<const float> v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return !std::isfinite(x); }));
}

// ---- parameters and optimizers ------------------------------------------

Tensor& ParameterSet::add(std::string name, Tensor t) {
  require(!contains(name), "ParameterSet: duplicate parameter '" + name + "'");
  require(t.requires_grad(), "ParameterSet: parameter '" + name + "' must require grad");
  params_.push_back({std::move(name), std::move(t)});
  m_.clear();
  v_.clear();
  return params_.back().tensor;
}

Tensor& ParameterSet::get(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ContractViolation("ParameterSet: no parameter named '" + name + "'");
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ContractViolation("ParameterSet: no parameter named '" + name + "'");
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const NamedTensor& p) { return p.name == name; });
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& p : params_) out.params_.push_back({p.name, p.tensor.deep_copy()});
  out.m_ = m_;
  out.v_ = v_;
  out.steps_ = steps_;
  return out;
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  require(other.params_.size() == params_.size(), "copy_values_from: parameter count mismatch");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    require(params_[i].name == other.params_[i].name &&
                params_[i].tensor.shape() == other.params_[i].tensor.shape(),
            "copy_values_from: mismatch at '" + params_[i].name + "'");
    auto dst = params_[i].tensor.mutable_values();
    auto src = other.params_[i].tensor.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  m_ = other.m_;
  v_ = other.v_;
  steps_ = other.steps_;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

bool ParameterSet::all_have_grad() const {
  return std::all_of(params_.begin(), params_.end(), [](const NamedTensor& p) { return p.tensor.has_grad(); });
}

bool ParameterSet::any_has_grad() const {
  return std::any_of(params_.begin(), params_.end(), [](const NamedTensor& p) { return p.tensor.has_grad(); });
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.tensor.shape().data(), p.tensor.shape().size() * sizeof(int), h);
    h = fnv1a(p.tensor.values().data(), p.tensor.numel() * sizeof(float), h);
  }
  return h;
}

void ParameterSet::reset_optimizer_state() {
  m_.clear();
  v_.clear();
  steps_ = 0;
}

void ParameterSet::ensure_state() {
  if (m_.size() == params_.size()) return;
  m_.clear();
  v_.clear();
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0f);
    v_.emplace_back(p.tensor.numel(), 0.0f);
  }
}

void adam_step(ParameterSet& params, const OptimizerConfig& cfg) {
  require(params.any_has_grad(), "adam_step: no parameter has a gradient");
  params.ensure_state();
  params.steps_ += 1;
  const double t = static_cast<double>(params.steps_);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));
  for (std::size_t i = 0; i < params.params_.size(); ++i) {
    if (!params.params_[i].tensor.has_grad()) continue;
    auto w = params.params_[i].tensor.mutable_values();
    const auto g = params.params_[i].tensor.grad();
    auto& m = params.m_[i];
    auto& v = params.v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0f - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0f - cfg.beta2) * g[j] * g[j];
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      w[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void sgd_step(ParameterSet& params, const OptimizerConfig& cfg) {
  require(params.any_has_grad(), "sgd_step: no parameter has a gradient");
  for (auto& p : params.params_) {
    if (!p.tensor.has_grad()) continue;
    auto w = p.tensor.mutable_values();
    const auto g = p.tensor.grad();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg.lr * g[j];
  }
  params.steps_ += 1;
}

void optimizer_step(ParameterSet& params, const OptimizerConfig& cfg) {
  if (cfg.kind == OptimizerConfig::Kind::adam)
    adam_step(params, cfg);
  else
    sgd_step(params, cfg);
}

double clip_grad_norm(std::span<ParameterSet* const> sets, double max_norm) {
  double sq = 0.0;
  for (ParameterSet* s : sets)
    for (const auto& p : s->entries())
      for (float g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float f = static_cast<float>(max_norm / (norm + 1e-6));
    for (ParameterSet* s : sets)
      for (auto& p : s->entries())
        if (p.tensor.has_grad())
          for (float& g : p.tensor.mutable_grad()) g *= f;
  }
  return norm;
}

// ---- initialization -----------------------------------------------------

void init_orthogonal(Tensor& w, float gain, Rng& rng) {
  require(w.ndim() == 2, [&] { return "init_orthogonal: expects a matrix, got " + shape_str(w.shape()); });
  const int rows = w.dim(0), cols = w.dim(1);
  const int big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd a(big, small);
  for (int i = 0; i < big; ++i)
    for (int j = 0; j < small; ++j) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  // Sign correction makes the distribution uniform over orthogonal matrices.
  const Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (int j = 0; j < small; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  auto v = w.mutable_values();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double x = rows >= cols ? q(i, j) : q(j, i);
      v[static_cast<std::size_t>(i) * cols + j] = static_cast<float>(gain * x);
    }
}

void init_fan_in_uniform(Tensor& w, Rng& rng) {
  require(w.ndim() >= 2, "init_fan_in_uniform: expects >= 2 dims");
  const std::size_t fan_in = w.numel() / static_cast<std::size_t>(w.dim(0));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (float& x : w.mutable_values()) x = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
}

// ---- checkpoint container -----------------------------------------------

namespace {

constexpr char kMagic[8] = {'L', 'C', 'R', 'L', 'T', 'N', 'S', 'R'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, 8);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    require(shape_numel(e.shape) == e.values.size(), "checkpoint: entry '" + e.name + "' shape/value mismatch");
    put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) put_u32(os, static_cast<std::uint32_t>(d));
  }
  for (const auto& e : entries)
    os.write(reinterpret_cast<const char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * 4));
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = get_u32(is);
  std::vector<CheckpointEntry> entries(count);
  for (auto& e : entries) {
    const std::uint32_t len = get_u32(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    const std::uint32_t ndim = get_u32(is);
    for (std::uint32_t d = 0; d < ndim; ++d) e.shape.push_back(static_cast<int>(get_u32(is)));
  }
  for (auto& e : entries) {
    e.values.resize(shape_numel(e.shape));
    is.read(reinterpret_cast<char*>(e.values.data()), static_cast<std::streamsize>(e.values.size() * 4));
    if (!is) throw std::runtime_error("checkpoint: truncated payload in '" + path + "'");
  }
  return entries;
}

void append_parameter_set(std::vector<CheckpointEntry>& out, const std::string& prefix,
                          const ParameterSet& params) {
  for (const auto& p : params.entries())
    out.push_back({prefix + p.name, p.tensor.shape(), {p.tensor.values().begin(), p.tensor.values().end()}});
  const auto& m = params.first_moments();
  const auto& v = params.second_moments();
  if (m.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params.entries()[i];
      out.push_back({prefix + p.name + "#m", p.tensor.shape(), m[i]});
      out.push_back({prefix + p.name + "#v", p.tensor.shape(), v[i]});
    }
  }
  out.push_back({prefix + "#steps", {1}, {static_cast<float>(params.step_count())}});
}

void restore_parameter_set(const std::vector<CheckpointEntry>& in, const std::string& prefix,
                           ParameterSet& params) {
  auto find = [&](const std::string& name) -> const CheckpointEntry* {
    for (const auto& e : in)
      if (e.name == name) return &e;
    return nullptr;
  };
  bool have_moments = true;
  for (auto& p : params.entries()) {
    const CheckpointEntry* e = find(prefix + p.name);
    if (!e) throw std::runtime_error("checkpoint: missing tensor '" + prefix + p.name + "'");
    if (e->shape != p.tensor.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + e->name + "': " + shape_str(e->shape) +
                               " vs " + shape_str(p.tensor.shape()));
    std::copy(e->values.begin(), e->values.end(), p.tensor.mutable_values().begin());
    have_moments = have_moments && find(prefix + p.name + "#m") && find(prefix + p.name + "#v");
  }
  params.reset_optimizer_state();
  if (have_moments && params.size() > 0) {
    for (auto& p : params.entries()) {
      params.first_moments().push_back(find(prefix + p.name + "#m")->values);
      params.second_moments().push_back(find(prefix + p.name + "#v")->values);
    }
  }
  if (const CheckpointEntry* s = find(prefix + "#steps")) params.set_step_count(static_cast<long>(s->values[0]));
}

}  // namespace lcrl::ag
