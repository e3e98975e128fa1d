#include "lcrl/bcq.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace lcrl {

using ag::Tensor;

namespace {

std::uint8_t to_byte(float v) {
  require(v >= 0.0f && v <= 255.0f && v == std::floor(v), "TransitionBuffer: observation value is not a small integer");
  return static_cast<std::uint8_t>(v);
}

ag::Shape batch_shape(int n, const ag::Shape& per_sample) {
  ag::Shape s{n};
  s.insert(s.end(), per_sample.begin(), per_sample.end());
  return s;
}

std::vector<float> probabilities(std::span<const float> logits) {
  std::vector<float> p(logits.size());
  const float m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (p[i] = std::exp(logits[i] - m));
  for (float& x : p) x = static_cast<float>(x / s);
  return p;
}

}  // namespace

Tensor TransitionBatch::obs_tensor() const { return Tensor::from(batch_shape(size, obs_shape), obs); }
Tensor TransitionBatch::next_obs_tensor() const { return Tensor::from(batch_shape(size, obs_shape), next_obs); }

TransitionBuffer::TransitionBuffer(TaskDescriptor task, std::size_t capacity) : task_(task), capacity_(capacity) {
  require(capacity > 0, "TransitionBuffer: capacity must be positive");
}

std::size_t TransitionBuffer::slot(std::size_t chronological) const {
  require(chronological < size_, "TransitionBuffer: index out of range");
  const std::size_t oldest = size_ < capacity_ ? 0 : head_;
  return (oldest + chronological) % capacity_;
}

void TransitionBuffer::push(const ObsTensor& obs, int action, float reward, const ObsTensor& next_obs, bool done) {
  require(action >= 0 && action < kNumActions, "TransitionBuffer::push: bad action");
  require(capacity_ > 0, "TransitionBuffer::push: buffer has no capacity");
  if (obs_.empty()) {
    // Grow lazily so a large capacity costs nothing until used.
    obs_.reserve(std::min<std::size_t>(capacity_, 4096) * kObsSize);
  }
  std::array<std::uint8_t, kObsSize> o{}, n{};
  for (int i = 0; i < kObsSize; ++i) {
    o[i] = to_byte(obs.data[i]);
    n[i] = to_byte(next_obs.data[i]);
  }
  if (size_ < capacity_) {
    obs_.insert(obs_.end(), o.begin(), o.end());
    next_obs_.insert(next_obs_.end(), n.begin(), n.end());
    actions_.push_back(static_cast<std::uint8_t>(action));
    rewards_.push_back(reward);
    dones_.push_back(done ? 1 : 0);
    size_ += 1;
    head_ = size_ % capacity_;
  } else {
    std::copy(o.begin(), o.end(), obs_.begin() + static_cast<std::ptrdiff_t>(head_ * kObsSize));
    std::copy(n.begin(), n.end(), next_obs_.begin() + static_cast<std::ptrdiff_t>(head_ * kObsSize));
    actions_[head_] = static_cast<std::uint8_t>(action);
    rewards_[head_] = reward;
    dones_[head_] = done ? 1 : 0;
    head_ = (head_ + 1) % capacity_;
  }
  pushed_ += 1;
}

TransitionBatch TransitionBuffer::gather(std::span<const std::size_t> chronological) const {
  TransitionBatch b;
  b.size = static_cast<int>(chronological.size());
  b.obs_shape = {kObsChannels, kViewSize, kViewSize};
  b.obs.resize(chronological.size() * kObsSize);
  b.next_obs.resize(chronological.size() * kObsSize);
  for (std::size_t k = 0; k < chronological.size(); ++k) {
    const std::size_t s = slot(chronological[k]);
    for (int i = 0; i < kObsSize; ++i) {
      b.obs[k * kObsSize + i] = obs_[s * kObsSize + i];
      b.next_obs[k * kObsSize + i] = next_obs_[s * kObsSize + i];
    }
    b.actions.push_back(actions_[s]);
    b.rewards.push_back(rewards_[s]);
    b.dones.push_back(dones_[s]);
  }
  return b;
}

TransitionBatch TransitionBuffer::sample(std::size_t n, Rng& rng) const {
  require(size_ > 0, "TransitionBuffer::sample: empty buffer");
  std::vector<std::size_t> idx(n);
  for (auto& i : idx) i = rng.uniform_index(size_);
  return gather(idx);
}

ObsTensor TransitionBuffer::obs_at(std::size_t i) const {
  ObsTensor o;
  const std::size_t s = slot(i);
  for (int k = 0; k < kObsSize; ++k) o.data[k] = obs_[s * kObsSize + k];
  return o;
}

int TransitionBuffer::action_at(std::size_t i) const { return actions_[slot(i)]; }
float TransitionBuffer::reward_at(std::size_t i) const { return rewards_[slot(i)]; }
bool TransitionBuffer::done_at(std::size_t i) const { return dones_[slot(i)] != 0; }

namespace {
constexpr char kBufMagic[8] = {'L', 'C', 'R', 'L', 'B', 'U', 'F', 'F'};
constexpr std::uint32_t kBufVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("buffer file: truncated");
  return v;
}
}  // namespace

void TransitionBuffer::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("buffer file: cannot open '" + path + "' for writing");
  os.write(kBufMagic, 8);
  put<std::uint32_t>(os, kBufVersion);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(task_.static_index()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(task_.color_index()));
  put<std::uint8_t>(os, static_cast<std::uint8_t>(task_.dynamics_id));
  put<std::uint64_t>(os, size_);
  put<std::uint64_t>(os, capacity_);
  put<std::uint64_t>(os, pushed_);
  std::vector<float> row(kObsSize);
  for (std::size_t i = 0; i < size_; ++i) {
    const std::size_t s = slot(i);
    for (int k = 0; k < kObsSize; ++k) row[k] = obs_[s * kObsSize + k];
    os.write(reinterpret_cast<const char*>(row.data()), kObsSize * 4);
    put<std::uint8_t>(os, actions_[s]);
    put<float>(os, rewards_[s]);
    for (int k = 0; k < kObsSize; ++k) row[k] = next_obs_[s * kObsSize + k];
    os.write(reinterpret_cast<const char*>(row.data()), kObsSize * 4);
    put<std::uint8_t>(os, dones_[s]);
  }
  if (!os) throw std::runtime_error("buffer file: write failed for '" + path + "'");
}

TransitionBuffer TransitionBuffer::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("buffer file: cannot open '" + path + "'");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kBufMagic, 8) != 0) throw std::runtime_error("buffer file: bad magic");
  if (get<std::uint32_t>(is) != kBufVersion) throw std::runtime_error("buffer file: unsupported version");
  const int s = get<std::uint8_t>(is), c = get<std::uint8_t>(is), d = get<std::uint8_t>(is);
  const auto count = get<std::uint64_t>(is);
  const auto capacity = get<std::uint64_t>(is);
  const auto pushed = get<std::uint64_t>(is);
  if (count > capacity) throw std::runtime_error("buffer file: count exceeds capacity");
  TransitionBuffer b(TaskDescriptor::from_indices(s, c, d), capacity);
  ObsTensor o, n;
  for (std::uint64_t i = 0; i < count; ++i) {
    is.read(reinterpret_cast<char*>(o.data.data()), kObsSize * 4);
    const int a = get<std::uint8_t>(is);
    const float r = get<float>(is);
    is.read(reinterpret_cast<char*>(n.data.data()), kObsSize * 4);
    const bool done = get<std::uint8_t>(is) != 0;
    if (!is) throw std::runtime_error("buffer file: truncated record");
    b.push(o, a, r, n, done);
  }
  b.pushed_ = pushed;
  return b;
}

bool operator==(const TransitionBuffer& a, const TransitionBuffer& b) {
  if (!(a.task_ == b.task_) || a.size_ != b.size_ || a.capacity_ != b.capacity_) return false;
  for (std::size_t i = 0; i < a.size_; ++i) {
    const std::size_t sa = a.slot(i), sb = b.slot(i);
    if (a.actions_[sa] != b.actions_[sb] || a.rewards_[sa] != b.rewards_[sb] || a.dones_[sa] != b.dones_[sb])
      return false;
    if (!std::equal(a.obs_.begin() + sa * kObsSize, a.obs_.begin() + (sa + 1) * kObsSize,
                    b.obs_.begin() + sb * kObsSize) ||
        !std::equal(a.next_obs_.begin() + sa * kObsSize, a.next_obs_.begin() + (sa + 1) * kObsSize,
                    b.next_obs_.begin() + sb * kObsSize))
      return false;
  }
  return true;
}

void BCQConfig::validate() const {
  require(tau >= 0.0f && tau <= 1.0f, "BCQConfig: tau must lie in [0,1]");
  require(gamma >= 0.0 && gamma <= 1.0, "BCQConfig: gamma must lie in [0,1]");
  require(epochs > 0 && minibatch > 0 && target_update_period > 0, "BCQConfig: counts must be positive");
  require(boltzmann_temperature > 0.0, "BCQConfig: temperature must be positive");
}

int constrained_greedy_action(std::span<const float> q_row, std::span<const float> actor_probs, float tau,
                              bool relative) {
  require(q_row.size() == actor_probs.size() && !q_row.empty(), "constrained_greedy_action: size mismatch");
  const float pmax = *std::max_element(actor_probs.begin(), actor_probs.end());
  int best = -1;
  for (std::size_t a = 0; a < q_row.size(); ++a) {
    const bool eligible = relative ? (actor_probs[a] / pmax > tau) : (actor_probs[a] > tau);
    const bool is_mode = actor_probs[a] == pmax;
    if (!eligible && !is_mode) continue;
    if (best < 0 || q_row[a] > q_row[static_cast<std::size_t>(best)]) best = static_cast<int>(a);
  }
  return best;
}

int boltzmann_sample(std::span<const float> q_row, double temperature, Rng& rng) {
  require(temperature > 0.0, "boltzmann_sample: temperature must be positive");
  require(!q_row.empty(), "boltzmann_sample: empty row");
  const float m = *std::max_element(q_row.begin(), q_row.end());
  std::vector<double> w(q_row.size());
  double total = 0.0;
  for (std::size_t a = 0; a < w.size(); ++a) total += (w[a] = std::exp((q_row[a] - m) / temperature));
  double u = rng.uniform() * total;
  for (std::size_t a = 0; a < w.size(); ++a) {
    if (u < w[a]) return static_cast<int>(a);
    u -= w[a];
  }
  return static_cast<int>(w.size() - 1);
}

Tensor behavior_cloning_loss(ActorCritic& actor, const TransitionBatch& batch) {
  const PolicyOutput out = actor.forward(batch.obs_tensor());
  const Tensor logp = ag::gather(ag::log_softmax(out.logits), batch.actions);
  return ag::scale(ag::mean(logp), -1.0f);
}

double behavior_cloning_update(ActorCritic& actor, const TransitionBatch& batch, const ag::OptimizerConfig& opt) {
  auto sets = actor.parameter_sets();
  for (auto* s : sets) s->zero_grad();
  const Tensor loss = behavior_cloning_loss(actor, batch);
  loss.backward();
  for (auto* s : sets)
    if (s->any_has_grad()) ag::optimizer_step(*s, opt);
  return loss.item();
}

BCQLosses bcq_loss(ActorCritic& current, ActorCritic& target, const TransitionBatch& batch, const BCQConfig& cfg,
                   bool train_critic, Tensor* loss_out) {
  require(batch.size > 0, "bcq_loss: empty batch");
  BCQLosses res;
  const int n = batch.size;
  res.next_actions.assign(static_cast<std::size_t>(n), -1);
  res.targets.assign(static_cast<std::size_t>(n), 0.0f);
  res.unconstrained.assign(static_cast<std::size_t>(n), 0.0f);
  if (train_critic) {
    ag::NoGradGuard ng;
    const Tensor next = batch.next_obs_tensor();
    const PolicyOutput cur_next = current.forward(next);
    const PolicyOutput tgt_next = target.forward(next);
    const int a = cur_next.logits.dim(1);
    for (int i = 0; i < n; ++i) {
      const float r = batch.rewards[static_cast<std::size_t>(i)];
      if (batch.dones[static_cast<std::size_t>(i)]) {
        res.targets[i] = r;
        res.unconstrained[i] = r;
        continue;
      }
      const auto q_row = tgt_next.q.values().subspan(static_cast<std::size_t>(i) * a, a);
      const auto probs = probabilities(cur_next.logits.values().subspan(static_cast<std::size_t>(i) * a, a));
      const int a_next = constrained_greedy_action(q_row, probs, cfg.tau, cfg.relative_threshold);
      const float qmax = *std::max_element(q_row.begin(), q_row.end());
      res.next_actions[i] = a_next;
      res.targets[i] = r + static_cast<float>(cfg.gamma) * q_row[static_cast<std::size_t>(a_next)];
      res.unconstrained[i] = r + static_cast<float>(cfg.gamma) * qmax;
      if (res.targets[i] > res.unconstrained[i])
        throw NumericalError("bcq: constrained target exceeds unconstrained target");
    }
  }
  const PolicyOutput out = current.forward(batch.obs_tensor());
  const Tensor nll = ag::scale(ag::mean(ag::gather(ag::log_softmax(out.logits), batch.actions)), -1.0f);
  Tensor loss = nll;
  res.actor_loss = nll.item();
  if (train_critic) {
    const Tensor q_taken = ag::gather(out.q, batch.actions);
    const Tensor critic = ag::mean(ag::square(ag::sub(q_taken, Tensor::from({n}, res.targets))));
    res.critic_loss = critic.item();
    loss = ag::add(loss, critic);
  }
  if (!std::isfinite(loss.item()))
    throw NumericalError("bcq: non-finite loss (critic " + std::to_string(res.critic_loss) + ", actor " +
                         std::to_string(res.actor_loss) + ")");
  if (loss_out) *loss_out = loss;
  return res;
}

BCQLosses bcq_update(ActorCritic& current, ActorCritic& target, const TransitionBatch& batch, const BCQConfig& cfg) {
  auto sets = current.parameter_sets();
  for (auto* s : sets) s->zero_grad();
  Tensor loss;
  BCQLosses res = bcq_loss(current, target, batch, cfg, true, &loss);
  loss.backward();
  if (cfg.max_grad_norm > 0.0) ag::clip_grad_norm(sets, cfg.max_grad_norm);
  for (auto* s : sets)
    if (s->any_has_grad()) ag::optimizer_step(*s, cfg.optimizer);
  return res;
}

BCQTrainer::BCQTrainer(ActorCritic& current, ActorCritic& target, BCQConfig cfg)
    : current_(current), target_(target), cfg_(cfg) {
  cfg_.validate();
  sync_target();
}

void BCQTrainer::sync_target() {
  auto cur = current_.parameter_sets();
  auto tgt = target_.parameter_sets();
  require(cur.size() == tgt.size(), "BCQTrainer: parameter layout mismatch");
  for (std::size_t i = 0; i < cur.size(); ++i) {
    // Values only; the target never takes optimizer steps.
    auto& src = cur[i]->entries();
    auto& dst = tgt[i]->entries();
    require(src.size() == dst.size(), "BCQTrainer: parameter layout mismatch");
    for (std::size_t j = 0; j < src.size(); ++j) {
      auto s = src[j].tensor.values();
      std::copy(s.begin(), s.end(), dst[j].tensor.mutable_values().begin());
    }
  }
}

BCQLosses BCQTrainer::update(const TransitionBatch& batch) {
  BCQLosses res;
  if (steps_ < cfg_.actor_warmup_updates) {
    auto sets = current_.parameter_sets();
    for (auto* s : sets) s->zero_grad();
    Tensor loss;
    res = bcq_loss(current_, target_, batch, cfg_, false, &loss);
    loss.backward();
    for (auto* s : sets)
      if (s->any_has_grad()) ag::optimizer_step(*s, cfg_.optimizer);
  } else {
    res = bcq_update(current_, target_, batch, cfg_);
  }
  steps_ += 1;
  if (steps_ % cfg_.target_update_period == 0) sync_target();
  return res;
}

void multi_task_bcq(std::span<const BCQTaskSlot> slots, const BCQConfig& cfg, long updates_per_epoch,
                    const std::function<void()>& sync_target, Rng& rng) {
  cfg.validate();
  if (slots.empty()) return;
  std::size_t largest = 0;
  for (const auto& s : slots) {
    require(s.current && s.target && s.buffer && s.buffer->size() > 0, "multi_task_bcq: incomplete slot");
    largest = std::max(largest, s.buffer->size());
  }
  const auto mb = static_cast<std::size_t>(cfg.minibatch);
  const long rounds = updates_per_epoch > 0 ? updates_per_epoch : std::max<long>(1, static_cast<long>((largest + mb - 1) / mb));
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch)
    for (long i = 0; i < rounds; ++i)
      for (const auto& slot : slots) {
        const TransitionBatch batch = slot.buffer->sample(mb, rng);
        auto sets = slot.current->parameter_sets();
        for (auto* s : sets) s->zero_grad();
        Tensor loss;
        bcq_loss(*slot.current, *slot.target, batch, cfg, step >= cfg.actor_warmup_updates, &loss);
        loss.backward();
        if (cfg.max_grad_norm > 0.0) ag::clip_grad_norm(sets, cfg.max_grad_norm);
        for (auto* s : sets)
          if (s->any_has_grad()) ag::optimizer_step(*s, cfg.optimizer);
        step += 1;
        if (step % cfg.target_update_period == 0) sync_target();
      }
}

}  // namespace lcrl
