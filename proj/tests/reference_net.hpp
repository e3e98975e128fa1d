#pragma once

// Double-precision reference forward passes written directly from the layer
// definitions, used as finite-difference oracles for the float32 autodiff.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "lcrl/modular_policy.hpp"

namespace ref {

struct T {
  std::vector<int> shape;
  std::vector<double> v;

  std::size_t numel() const { return v.size(); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
};

inline T from_tensor(const lcrl::ag::Tensor& t) {
  T out;
  out.shape.assign(t.shape().begin(), t.shape().end());
  out.v.assign(t.values().begin(), t.values().end());
  return out;
}

inline T dense(const T& x, const T& w, const T& b) {
  const int n = x.dim(0), in = x.dim(1), o = w.dim(0);
  T y{{n, o}, std::vector<double>(static_cast<std::size_t>(n * o))};
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) {
      double s = b.v[static_cast<std::size_t>(j)];
      for (int k = 0; k < in; ++k) s += x.v[static_cast<std::size_t>(i * in + k)] * w.v[static_cast<std::size_t>(j * in + k)];
      y.v[static_cast<std::size_t>(i * o + j)] = s;
    }
  return y;
}

inline T conv2d(const T& x, const T& w, const T& b) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int o = w.dim(0), k = w.dim(2);
  const int oh = h - k + 1, ow = wd - k + 1;
  T y{{n, o, oh, ow}, std::vector<double>(static_cast<std::size_t>(n * o * oh * ow))};
  for (int s = 0; s < n; ++s)
    for (int f = 0; f < o; ++f)
      for (int r = 0; r < oh; ++r)
        for (int q = 0; q < ow; ++q) {
          double acc = b.v[static_cast<std::size_t>(f)];
          for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < k; ++i)
              for (int j = 0; j < k; ++j)
                acc += x.v[static_cast<std::size_t>(((s * c + ch) * h + r + i) * wd + q + j)] *
                       w.v[static_cast<std::size_t>(((f * c + ch) * k + i) * k + j)];
          y.v[static_cast<std::size_t>(((s * o + f) * oh + r) * ow + q)] = acc;
        }
  return y;
}

inline T maxpool(const T& x, int k) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / k, ow = w / k;
  T y{{n, c, oh, ow}, std::vector<double>(static_cast<std::size_t>(n * c * oh * ow))};
  for (int s = 0; s < n * c; ++s)
    for (int r = 0; r < oh; ++r)
      for (int q = 0; q < ow; ++q) {
        double m = -INFINITY;
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) m = std::max(m, x.v[static_cast<std::size_t>((s * h + r * k + i) * w + q * k + j)]);
        y.v[static_cast<std::size_t>((s * oh + r) * ow + q)] = m;
      }
  return y;
}

template <typename F>
T map(const T& x, F f) {
  T y = x;
  for (double& v : y.v) v = f(v);
  return y;
}

inline T relu(const T& x) { return map(x, [](double v) { return v > 0.0 ? v : 0.0; }); }
inline T tanh(const T& x) { return map(x, [](double v) { return std::tanh(v); }); }

inline T log_softmax(const T& x) {
  T y = x;
  const int n = x.dim(0), a = x.dim(1);
  for (int i = 0; i < n; ++i) {
    double m = -INFINITY;
    for (int j = 0; j < a; ++j) m = std::max(m, x.v[static_cast<std::size_t>(i * a + j)]);
    double z = 0.0;
    for (int j = 0; j < a; ++j) z += std::exp(x.v[static_cast<std::size_t>(i * a + j)] - m);
    for (int j = 0; j < a; ++j) y.v[static_cast<std::size_t>(i * a + j)] = x.v[static_cast<std::size_t>(i * a + j)] - m - std::log(z);
  }
  return y;
}

inline T softmax(const T& x) { return map(log_softmax(x), [](double v) { return std::exp(v); }); }

// Along dimension 1.
inline T concat(const T& a, const T& b) {
  const int n = a.dim(0);
  const std::size_t ra = a.numel() / static_cast<std::size_t>(n), rb = b.numel() / static_cast<std::size_t>(n);
  T y;
  y.shape = a.shape;
  y.shape[1] = a.dim(1) + b.dim(1);
  for (int i = 0; i < n; ++i) {
    y.v.insert(y.v.end(), a.v.begin() + static_cast<long>(i * ra), a.v.begin() + static_cast<long>((i + 1) * ra));
    y.v.insert(y.v.end(), b.v.begin() + static_cast<long>(i * rb), b.v.begin() + static_cast<long>((i + 1) * rb));
  }
  return y;
}

inline T flatten(const T& x) {
  T y = x;
  y.shape = {x.dim(0), static_cast<int>(x.numel() / static_cast<std::size_t>(x.dim(0)))};
  return y;
}

inline T add(const T& a, const T& b) {
  T y = a;
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += b.v[i];
  return y;
}

inline T channels(const T& obs, int first, int count) {
  const int n = obs.dim(0), c = obs.dim(1), plane = obs.dim(2) * obs.dim(3);
  T y{{n, count, obs.dim(2), obs.dim(3)}, {}};
  for (int i = 0; i < n; ++i)
    y.v.insert(y.v.end(), obs.v.begin() + (i * c + first) * plane, obs.v.begin() + (i * c + first + count) * plane);
  return y;
}

using Module = std::map<std::string, T>;

inline Module from_set(const lcrl::ag::ParameterSet& p) {
  Module m;
  for (const auto& e : p.entries()) m[e.name] = from_tensor(e.tensor);
  return m;
}

inline T conv_block(const T& x, const Module& m, const std::string& name) {
  return relu(conv2d(x, m.at(name + ".w"), m.at(name + ".b")));
}

inline T preprocess(const T& x, const Module& m, const std::string& prefix) {
  return conv_block(maxpool(conv_block(x, m, prefix + "conv1"), 2), m, prefix + "conv2");
}

struct Out {
  T logits;
  T q;
};

// Mirrors the layered architecture: static -> target -> agent chain with
// factored inputs, or a single chained stack over the full observation.
inline Out policy(const Module& sm, const Module& tm, const Module& am, bool factored, const T& obs,
                  const T* descriptor = nullptr) {
  T features;
  if (factored) {
    const T s = preprocess(channels(obs, 0, 5), sm, "");
    const T t = conv_block(concat(preprocess(channels(obs, 5, 1), tm, "pre."), s), tm, "post");
    const T a = conv_block(preprocess(channels(obs, 6, 1), am, "pre."), am, "pre.conv3");
    features = flatten(concat(a, t));
  } else {
    features = flatten(conv_block(preprocess(obs, sm, ""), tm, "post"));
  }
  if (descriptor) features = concat(features, *descriptor);
  Out o;
  o.logits = dense(tanh(dense(features, am.at("actor.fc1.w"), am.at("actor.fc1.b"))), am.at("actor.fc2.w"),
                   am.at("actor.fc2.b"));
  o.q = dense(tanh(dense(features, am.at("critic.fc1.w"), am.at("critic.fc1.b"))), am.at("critic.fc2.w"),
              am.at("critic.fc2.b"));
  return o;
}

inline double dot(const T& a, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * w[i];
  return s;
}

// ||a - b|| / (||a|| + ||b||), 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) + std::sqrt(nb);
  return denom == 0.0 ? 0.0 : std::sqrt(d) / denom;
}

}  // namespace ref
