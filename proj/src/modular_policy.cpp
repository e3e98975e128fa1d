#include "lcrl/modular_policy.hpp"

#include <cmath>
#include <sstream>

namespace lcrl {

using ag::Tensor;

namespace {

constexpr int kKernel = 2;

Tensor conv_param(int out, int in, Rng& rng) {
  Tensor w = Tensor::zeros({out, in, kKernel, kKernel}, true);
  ag::init_fan_in_uniform(w, rng);
  return w;
}

Tensor dense_param(int out, int in, float gain, Rng& rng) {
  Tensor w = Tensor::zeros({out, in}, true);
  ag::init_orthogonal(w, gain, rng);
  return w;
}

void add_conv(ag::ParameterSet& p, const std::string& name, int out, int in, Rng& rng) {
  p.add(name + ".w", conv_param(out, in, rng));
  p.add(name + ".b", Tensor::zeros({out}, true));
}

void add_dense(ag::ParameterSet& p, const std::string& name, int out, int in, float gain, Rng& rng) {
  p.add(name + ".w", dense_param(out, in, gain, rng));
  p.add(name + ".b", Tensor::zeros({out}, true));
}

Tensor conv_block(const Tensor& x, const ag::ParameterSet& p, const std::string& name) {
  return ag::relu(ag::conv2d(x, p.get(name + ".w"), p.get(name + ".b")));
}

// conv(->8)+relu+pool, conv(8->16)+relu: 7x7 -> 6x6 -> 3x3 -> 2x2.
Tensor preprocess(const Tensor& x, const ag::ParameterSet& p, const std::string& prefix) {
  Tensor h = ag::maxpool2d(conv_block(x, p, prefix + "conv1"), 2);
  return conv_block(h, p, prefix + "conv2");
}

Tensor dense_plus(const Tensor& x, const ag::ParameterSet& p, const std::string& name, const Tensor* extra) {
  Tensor y = ag::dense(x, p.get(name + ".w"), p.get(name + ".b"));
  if (extra && extra->defined()) y = ag::add(y, *extra);
  return y;
}

}  // namespace

const char* architecture_mode_name(ArchitectureMode m) {
  return m == ArchitectureMode::factored ? "factored" : "chained";
}

ArchitectureMode parse_architecture_mode(const std::string& s) {
  if (s == "factored") return ArchitectureMode::factored;
  if (s == "chained") return ArchitectureMode::chained;
  throw ContractViolation("unknown architecture mode '" + s + "'");
}

ag::ParameterSet make_module(int depth, const ArchitectureConfig& arch, Rng& rng) {
  require(depth >= 0 && depth < kNumDepths, "make_module: depth out of range");
  ag::ParameterSet p;
  const bool factored = arch.mode == ArchitectureMode::factored;
  switch (depth) {
    case 0:
      add_conv(p, "conv1", 8, arch.static_input_channels(), rng);
      add_conv(p, "conv2", 16, 8, rng);
      break;
    case 1:
      if (factored) {
        add_conv(p, "pre.conv1", 8, 1, rng);
        add_conv(p, "pre.conv2", 16, 8, rng);
        add_conv(p, "post", 32, 32, rng);
      } else {
        add_conv(p, "post", 32, 16, rng);
      }
      break;
    case 2: {
      if (factored) {
        add_conv(p, "pre.conv1", 8, 1, rng);
        add_conv(p, "pre.conv2", 16, 8, rng);
        add_conv(p, "pre.conv3", 32, 16, rng);
      }
      const int in = arch.feature_width() + arch.descriptor_width;
      const int h = arch.hidden_units;
      add_dense(p, "actor.fc1", h, in, std::sqrt(2.0f), rng);
      add_dense(p, "actor.fc2", kNumActions, h, 0.01f, rng);
      add_dense(p, "critic.fc1", h, in, std::sqrt(2.0f), rng);
      add_dense(p, "critic.fc2", kNumActions, h, 1.0f, rng);
      break;
    }
    default:
      break;
  }
  return p;
}

ModuleLibrary::ModuleLibrary(const ArchitectureConfig& arch, const std::array<int, kNumDepths>& modules_per_depth,
                             Rng& rng)
    : arch_(arch) {
  for (int d = 0; d < kNumDepths; ++d) {
    require(modules_per_depth[d] >= 0, "ModuleLibrary: negative module count");
    for (int i = 0; i < modules_per_depth[d]; ++i) modules_[d].push_back(make_module(d, arch, rng));
  }
}

std::array<int, kNumDepths> ModuleLibrary::modules_per_depth() const {
  return {modules_at(0), modules_at(1), modules_at(2)};
}

ag::ParameterSet& ModuleLibrary::module(int depth, int index) {
  require(depth >= 0 && depth < kNumDepths && index >= 0 && index < modules_at(depth), [&] { return
          "ModuleLibrary: module (" + std::to_string(depth) + "," + std::to_string(index) + ") out of range"; });
  return modules_[depth][static_cast<std::size_t>(index)];
}

const ag::ParameterSet& ModuleLibrary::module(int depth, int index) const {
  return const_cast<ModuleLibrary*>(this)->module(depth, index);
}

void ModuleLibrary::add_module(int depth, Rng& rng) {
  require(depth >= 0 && depth < kNumDepths, "add_module: depth out of range");
  modules_[depth].push_back(make_module(depth, arch_, rng));
}

std::size_t ModuleLibrary::parameter_count() const {
  std::size_t n = 0;
  for (const auto& depth : modules_)
    for (const auto& m : depth) n += m.parameter_count();
  return n;
}

std::size_t library_param_count(const ModuleLibrary& lib) { return lib.parameter_count(); }

std::uint64_t ModuleLibrary::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& depth : modules_)
    for (const auto& m : depth) {
      const std::uint64_t c = m.checksum();
      h = ag::fnv1a(&c, sizeof c, h);
    }
  return h;
}

ModuleLibrary ModuleLibrary::clone() const {
  ModuleLibrary out;
  out.arch_ = arch_;
  for (int d = 0; d < kNumDepths; ++d)
    for (const auto& m : modules_[d]) out.modules_[d].push_back(m.clone());
  return out;
}

void ModuleLibrary::copy_values_from(const ModuleLibrary& other) {
  require(other.modules_per_depth() == modules_per_depth(), "ModuleLibrary::copy_values_from: size mismatch");
  for (int d = 0; d < kNumDepths; ++d)
    for (std::size_t i = 0; i < modules_[d].size(); ++i) modules_[d][i].copy_values_from(other.modules_[d][i]);
}

std::string StructureAssignment::str() const {
  return "(" + std::to_string(modules[0]) + "," + std::to_string(modules[1]) + "," + std::to_string(modules[2]) +
         ")";
}

namespace {

Tensor channel_slice(const Tensor& obs, int first, int count) {
  const int n = obs.dim(0);
  constexpr int plane = kViewSize * kViewSize;
  std::vector<float> out(static_cast<std::size_t>(n) * count * plane);
  const float* src = obs.values().data();
  for (int i = 0; i < n; ++i)
    std::copy_n(src + (static_cast<std::size_t>(i) * kObsChannels + first) * plane, count * plane,
                out.data() + static_cast<std::size_t>(i) * count * plane);
  return Tensor::from({n, count, kViewSize, kViewSize}, std::move(out));
}

}  // namespace

ObservationViews split_observation(const Tensor& obs) {
  require(obs.ndim() == 4 && obs.dim(1) == kObsChannels && obs.dim(2) == kViewSize && obs.dim(3) == kViewSize, [&] { return
          "split_observation: expects [N,7,7,7], got " + ag::shape_str(obs.shape()); });
  return {channel_slice(obs, 0, 5), channel_slice(obs, kChanTarget, 1), channel_slice(obs, kChanAgent, 1)};
}

Tensor obs_batch(std::span<const float> flat_obs, int n) {
  require(flat_obs.size() == static_cast<std::size_t>(n) * kObsSize, "obs_batch: size mismatch");
  return Tensor::from({n, kObsChannels, kViewSize, kViewSize}, {flat_obs.begin(), flat_obs.end()});
}

Tensor obs_batch(const ObsTensor& obs) { return obs_batch(obs.data, 1); }

Tensor descriptor_batch(const std::vector<float>& bits, int n) {
  std::vector<float> out;
  out.reserve(bits.size() * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.insert(out.end(), bits.begin(), bits.end());
  return Tensor::from({n, static_cast<int>(bits.size())}, std::move(out));
}

PolicyOutput modular_forward(const ModuleRefs& modules, const ArchitectureConfig& arch, const Tensor& obs,
                             const Tensor* descriptor, const LateralInputs* lateral) {
  for (const auto* m : modules) require(m != nullptr, "modular_forward: missing module");
  const ag::ParameterSet& sm = *modules[0];
  const ag::ParameterSet& tm = *modules[1];
  const ag::ParameterSet& am = *modules[2];

  Tensor features;
  if (arch.mode == ArchitectureMode::factored) {
    const ObservationViews v = split_observation(obs);
    const Tensor s = preprocess(v.static_view, sm, "");                       // [N,16,2,2]
    const Tensor t_pre = preprocess(v.target_view, tm, "pre.");               // [N,16,2,2]
    const Tensor t = conv_block(ag::concat(t_pre, s), tm, "post");            // [N,32,1,1]
    const Tensor a = conv_block(preprocess(v.agent_view, am, "pre."), am, "pre.conv3");  // [N,32,1,1]
    features = ag::flatten(ag::concat(a, t));                                 // [N,64]
  } else {
    require(obs.ndim() == 4 && obs.dim(1) == kObsChannels, "modular_forward: expects [N,7,7,7] observations");
    const Tensor s = preprocess(obs, sm, "");
    features = ag::flatten(conv_block(s, tm, "post"));  // [N,32]
  }
  if (arch.descriptor_width > 0) {
    require(descriptor != nullptr && descriptor->defined() && descriptor->dim(1) == arch.descriptor_width, [&] { return
            "modular_forward: architecture expects a task descriptor of width " +
                std::to_string(arch.descriptor_width); });
    features = ag::concat(features, *descriptor);
  }

  PolicyOutput out;
  out.features = features;
  out.actor_hidden = ag::tanh(dense_plus(features, am, "actor.fc1", lateral ? &lateral->actor_hidden : nullptr));
  out.logits = dense_plus(out.actor_hidden, am, "actor.fc2", lateral ? &lateral->actor_out : nullptr);
  out.critic_hidden =
      ag::tanh(dense_plus(features, am, "critic.fc1", lateral ? &lateral->critic_hidden : nullptr));
  out.q = dense_plus(out.critic_hidden, am, "critic.fc2", lateral ? &lateral->critic_out : nullptr);
  return out;
}

AssembledPolicy AssembledPolicy::assemble(ModuleLibrary& lib, const StructureAssignment& s, bool clone) {
  AssembledPolicy p;
  p.arch_ = lib.arch();
  p.structure_ = s;
  for (int d = 0; d < kNumDepths; ++d) {
    require(s[d] >= 0 && s[d] < lib.modules_at(d), [&] { return "assemble_policy: module index " + std::to_string(s[d]) +
                                                       " out of range at depth " + depth_name(d) + " (k_d=" +
                                                       std::to_string(lib.modules_at(d)) + ")"; });
  }
  if (clone) {
    p.owned_.reserve(kNumDepths);
    for (int d = 0; d < kNumDepths; ++d) p.owned_.push_back(lib.module(d, s[d]).clone());
    for (int d = 0; d < kNumDepths; ++d) p.sets_[d] = &p.owned_[static_cast<std::size_t>(d)];
  } else {
    for (int d = 0; d < kNumDepths; ++d) p.sets_[d] = &lib.module(d, s[d]);
  }
  return p;
}

ModuleRefs AssembledPolicy::refs() const { return {sets_[0], sets_[1], sets_[2]}; }

PolicyOutput AssembledPolicy::forward(const Tensor& obs) {
  if (arch_.descriptor_width > 0) {
    const Tensor desc = descriptor_batch(descriptor_, obs.dim(0));
    return modular_forward(refs(), arch_, obs, &desc);
  }
  return modular_forward(refs(), arch_, obs);
}

std::vector<ag::ParameterSet*> AssembledPolicy::parameter_sets() { return {sets_[0], sets_[1], sets_[2]}; }

void AssembledPolicy::set_descriptor(std::vector<float> bits) {
  require(static_cast<int>(bits.size()) == arch_.descriptor_width, "set_descriptor: width mismatch");
  descriptor_ = std::move(bits);
}

void AssembledPolicy::write_back(ModuleLibrary& lib) const {
  require(owns_copies(), "write_back: policy aliases the library already");
  for (int d = 0; d < kNumDepths; ++d) lib.module(d, structure_[d]).copy_values_from(*sets_[d]);
}

ModuleLibrary make_monolithic(const ArchitectureConfig& arch, Rng& rng) { return ModuleLibrary(arch, {1, 1, 1}, rng); }

std::vector<LayerCount> parameter_table(const ArchitectureConfig& arch) {
  std::vector<LayerCount> rows;
  Rng rng(0);
  for (int d = 0; d < kNumDepths; ++d) {
    const ag::ParameterSet m = make_module(d, arch, rng);
    for (const auto& p : m.entries()) rows.push_back({depth_name(d), p.name, ag::shape_str(p.tensor.shape()), p.tensor.numel()});
  }
  return rows;
}

std::string format_parameter_table(const std::vector<LayerCount>& rows) {
  std::ostringstream os;
  std::size_t total = 0;
  os << "depth   layer            shape          params\n";
  for (const auto& r : rows) {
    char line[128];
    std::snprintf(line, sizeof line, "%-7s %-16s %-14s %zu\n", r.depth.c_str(), r.layer.c_str(), r.shape.c_str(),
                  r.count);
    os << line;
    total += r.count;
  }
  os << "total (one module per depth): " << total << '\n';
  return os.str();
}

}  // namespace lcrl
