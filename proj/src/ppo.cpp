#include "lcrl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <json.hpp>

namespace lcrl {

using ag::Tensor;

void PPOConfig::validate() const {
  require(steps_per_update > 0 && minibatch > 0 && epochs > 0, "PPOConfig: counts must be positive");
  require(steps_per_update % minibatch == 0, "PPOConfig: minibatch must divide steps_per_update");
  require(gamma > 0.0 && gamma <= 1.0 && gae_lambda >= 0.0 && gae_lambda <= 1.0, "PPOConfig: bad discount");
  require(clip > 0.0 && entropy_coef >= 0.0 && value_coef >= 0.0 && max_grad_norm >= 0.0,
          "PPOConfig: coefficients must be non-negative");
  require(optimizer.lr > 0.0f, "PPOConfig: learning rate must be positive");
}

float state_value_from_q(std::span<const float> q_row) {
  require(!q_row.empty(), "state_value_from_q: empty row");
  return *std::max_element(q_row.begin(), q_row.end());
}

GAEResult compute_gae(std::span<const float> rewards, std::span<const float> values,
                      std::span<const std::uint8_t> dones, double gamma, double lambda) {
  require(rewards.size() == dones.size(), "compute_gae: rewards and dones differ in length");
  require(values.size() == rewards.size() + 1, "compute_gae: values must include the bootstrap entry");
  const std::size_t n = rewards.size();
  GAEResult out;
  out.advantages.assign(n, 0.0f);
  out.returns.assign(n, 0.0f);
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double live = dones[i] ? 0.0 : 1.0;
    const double delta = rewards[i] + gamma * live * values[i + 1] - values[i];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[i] = static_cast<float>(next_adv);
    out.returns[i] = static_cast<float>(next_adv + values[i]);
  }
  return out;
}

EnvRunner::EnvRunner(TaskDescriptor task, std::uint64_t seed)
    : env_(task, Rng::derive(seed, 1)), action_rng_(Rng::derive(seed, 2)) {
  obs_ = env_.reset();
}

StepOutcome EnvRunner::step(int action) {
  StepOutcome out = env_.step(action);
  episode_return_ += out.reward;
  total_steps_ += 1;
  if (out.done) {
    finished_.push_back(episode_return_);
    episode_return_ = 0.0;
    obs_ = env_.reset();
  } else {
    obs_ = out.obs;
  }
  return out;
}

namespace {

int sample_categorical(std::span<const float> logits, Rng& rng, float* log_prob) {
  const float m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float l : logits) z += std::exp(static_cast<double>(l - m));
  double u = rng.uniform() * z;
  int chosen = static_cast<int>(logits.size()) - 1;
  for (std::size_t a = 0; a < logits.size(); ++a) {
    const double w = std::exp(static_cast<double>(logits[a] - m));
    if (u < w) {
      chosen = static_cast<int>(a);
      break;
    }
    u -= w;
  }
  *log_prob = static_cast<float>(logits[static_cast<std::size_t>(chosen)] - m - std::log(z));
  return chosen;
}

}  // namespace

RolloutBatch collect_rollouts(EnvRunner& runner, ActorCritic& policy, int n_steps, TransitionBuffer* buffer) {
  require(n_steps > 0, "collect_rollouts: n_steps must be positive");
  RolloutBatch b;
  b.obs.reserve(static_cast<std::size_t>(n_steps) * kObsSize);
  b.q_values.reserve(static_cast<std::size_t>(n_steps) * kNumActions);
  runner.finished_.clear();
  ag::NoGradGuard ng;
  for (int t = 0; t < n_steps; ++t) {
    const ObsTensor obs = runner.observation();
    const PolicyOutput out = policy.forward(obs_batch(obs));
    float lp = 0.0f;
    const int action = sample_categorical(out.logits.values(), runner.action_rng(), &lp);
    const StepOutcome step = runner.step(action);
    b.obs.insert(b.obs.end(), obs.data.begin(), obs.data.end());
    b.actions.push_back(action);
    b.rewards.push_back(static_cast<float>(step.reward));
    b.dones.push_back(step.done ? 1 : 0);
    b.log_probs.push_back(lp);
    const auto q = out.q.values();
    b.q_values.insert(b.q_values.end(), q.begin(), q.end());
    b.values.push_back(state_value_from_q(q));
    if (buffer) buffer->push(obs, action, static_cast<float>(step.reward), step.obs, step.done);
  }
  if (!b.dones.back()) {
    const PolicyOutput next = policy.forward(obs_batch(runner.observation()));
    b.bootstrap_value = state_value_from_q(next.q.values());
  }
  b.episode_returns = runner.finished_;
  return b;
}

std::string PPOStats::to_json() const {
  nlohmann::json j;
  j["policy_loss"] = policy_loss;
  j["value_loss"] = value_loss;
  j["entropy"] = entropy;
  j["approx_kl"] = approx_kl;
  j["clip_fraction"] = clip_fraction;
  if (std::isfinite(mean_return))
    j["mean_return"] = mean_return;
  else
    j["mean_return"] = nullptr;
  j["episodes"] = episodes;
  return j.dump();
}

PreparedBatch prepare_batch(const RolloutBatch& batch, const PPOConfig& cfg) {
  std::vector<float> values(batch.values);
  values.push_back(batch.dones.empty() || batch.dones.back() ? 0.0f : batch.bootstrap_value);
  GAEResult g = compute_gae(batch.rewards, values, batch.dones, cfg.gamma, cfg.gae_lambda);
  PreparedBatch p;
  p.rollout = &batch;
  p.returns = std::move(g.returns);
  p.advantages = std::move(g.advantages);
  if (cfg.normalize_advantages && p.advantages.size() > 1) {
    double mean = 0.0;
    for (float a : p.advantages) mean += a;
    mean /= static_cast<double>(p.advantages.size());
    double var = 0.0;
    for (float a : p.advantages) var += (a - mean) * (a - mean);
    var /= static_cast<double>(p.advantages.size());
    const double sd = std::sqrt(var) + 1e-8;
    for (float& a : p.advantages) a = static_cast<float>((a - mean) / sd);
  }
  return p;
}

PPOLossParts ppo_loss(ActorCritic& policy, const PreparedBatch& batch, std::span<const int> indices,
                      const PPOConfig& cfg) {
  const RolloutBatch& r = *batch.rollout;
  const int n = static_cast<int>(indices.size());
  require(n > 0, "ppo_loss: empty minibatch");
  std::vector<float> obs(static_cast<std::size_t>(n) * kObsSize);
  std::vector<int> actions(static_cast<std::size_t>(n));
  std::vector<float> old_lp(static_cast<std::size_t>(n)), adv(static_cast<std::size_t>(n)),
      ret(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const auto i = static_cast<std::size_t>(indices[static_cast<std::size_t>(k)]);
    std::copy_n(r.obs.begin() + static_cast<std::ptrdiff_t>(i * kObsSize), kObsSize,
                obs.begin() + static_cast<std::ptrdiff_t>(k) * kObsSize);
    actions[k] = r.actions[i];
    old_lp[k] = r.log_probs[i];
    adv[k] = batch.advantages[i];
    ret[k] = batch.returns[i];
  }
  const PolicyOutput out = policy.forward(obs_batch(obs, n));
  const Tensor logp_all = ag::log_softmax(out.logits);
  const Tensor logp = ag::gather(logp_all, actions);
  const Tensor ratio = ag::exp(ag::sub(logp, Tensor::from({n}, old_lp)));
  const Tensor adv_t = Tensor::from({n}, adv);
  const Tensor surr1 = ag::mul(ratio, adv_t);
  const Tensor surr2 =
      ag::mul(ag::clamp(ratio, static_cast<float>(1.0 - cfg.clip), static_cast<float>(1.0 + cfg.clip)), adv_t);
  const Tensor policy_loss = ag::scale(ag::mean(ag::minimum(surr1, surr2)), -1.0f);

  const Tensor q_taken = ag::gather(out.q, actions);
  const Tensor value_loss = ag::mean(ag::square(ag::sub(q_taken, Tensor::from({n}, ret))));

  const Tensor probs = ag::softmax(out.logits);
  const Tensor entropy = ag::scale(ag::mean(ag::sum_rows(ag::mul(probs, logp_all))), -1.0f);

  PPOLossParts parts;
  parts.total = ag::add(policy_loss, ag::sub(ag::scale(value_loss, static_cast<float>(cfg.value_coef)),
                                             ag::scale(entropy, static_cast<float>(cfg.entropy_coef))));
  parts.policy_loss = policy_loss.item();
  parts.value_loss = value_loss.item();
  parts.entropy = entropy.item();
  double kl = 0.0;
  int clipped = 0;
  const auto rv = ratio.values();
  const auto lv = logp.values();
  for (int k = 0; k < n; ++k) {
    kl += old_lp[k] - lv[k];
    if (std::abs(rv[k] - 1.0f) > cfg.clip) clipped += 1;
  }
  parts.approx_kl = kl / n;
  parts.clip_fraction = static_cast<double>(clipped) / n;
  if (!std::isfinite(parts.total.item()))
    throw NumericalError("ppo: non-finite loss (policy " + std::to_string(parts.policy_loss) + ", value " +
                         std::to_string(parts.value_loss) + ", entropy " + std::to_string(parts.entropy) + ")");
  return parts;
}

PPOStats ppo_update(ActorCritic& policy, const RolloutBatch& batch, const PPOConfig& cfg, Rng& rng,
                    const ExtraLoss& extra) {
  cfg.validate();
  const int n = batch.size();
  require(n > 0, "ppo_update: empty batch");
  const PreparedBatch prepared = prepare_batch(batch, cfg);
  auto sets = policy.parameter_sets();
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  // A short final batch (budget remainder) still trains; the last minibatch
  // of each epoch may then be smaller.
  const int mb = std::min(cfg.minibatch, n);

  PPOStats stats;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (int start = 0; start < n; start += mb) {
      const int len = std::min(mb, n - start);
      const std::span<const int> idx(order.data() + start, static_cast<std::size_t>(len));
      for (auto* s : sets) s->zero_grad();
      PPOLossParts parts = ppo_loss(policy, prepared, idx, cfg);
      Tensor loss = parts.total;
      if (extra) loss = ag::add(loss, extra());
      loss.backward();
      if (cfg.max_grad_norm > 0.0) ag::clip_grad_norm(sets, cfg.max_grad_norm);
      for (auto* s : sets)
        if (s->all_have_grad()) ag::optimizer_step(*s, cfg.optimizer);
      stats.policy_loss += parts.policy_loss;
      stats.value_loss += parts.value_loss;
      stats.entropy += parts.entropy;
      stats.approx_kl += parts.approx_kl;
      stats.clip_fraction += parts.clip_fraction;
      stats.minibatches += 1;
    }
  }
  const double m = stats.minibatches;
  stats.policy_loss /= m;
  stats.value_loss /= m;
  stats.entropy /= m;
  stats.approx_kl /= m;
  stats.clip_fraction /= m;
  stats.episodes = static_cast<int>(batch.episode_returns.size());
  stats.mean_return = batch.episode_returns.empty()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : std::accumulate(batch.episode_returns.begin(), batch.episode_returns.end(), 0.0) /
                                static_cast<double>(batch.episode_returns.size());
  return stats;
}

}  // namespace lcrl
