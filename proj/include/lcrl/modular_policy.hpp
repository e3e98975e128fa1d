#pragma once

// Layered modular actor-critic. A library holds k_d modules per depth; a task
// assembles one module per depth and chains them static -> target -> agent.
// Each module reads its own slice of the observation (factored mode) plus the
// previous module's output; the agent module ends in separate actor and
// critic heads (6 logits, 6 Q-values).

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lcrl/gridworld.hpp"
#include "lcrl/task_space.hpp"
#include "lcrl/tensor.hpp"

namespace lcrl {

enum class ArchitectureMode { factored, chained };

const char* architecture_mode_name(ArchitectureMode m);
ArchitectureMode parse_architecture_mode(const std::string& s);

struct ArchitectureConfig {
  ArchitectureMode mode = ArchitectureMode::factored;
  int hidden_units = 64;
  // Width of a multi-hot task indicator fed to the first dense layer of each
  // head; zero for the modular method.
  int descriptor_width = 0;

  // Input channels of the static module: 5 factored, 7 chained.
  int static_input_channels() const { return mode == ArchitectureMode::factored ? 5 : kObsChannels; }
  // Width of the feature vector entering the heads (without descriptor).
  int feature_width() const { return mode == ArchitectureMode::factored ? 64 : 32; }
};

ag::ParameterSet make_module(int depth, const ArchitectureConfig& arch, Rng& rng);

class ModuleLibrary {
 public:
  ModuleLibrary() = default;
  ModuleLibrary(const ArchitectureConfig& arch, const std::array<int, kNumDepths>& modules_per_depth, Rng& rng);
  ModuleLibrary(ModuleLibrary&&) noexcept = default;
  ModuleLibrary& operator=(ModuleLibrary&&) noexcept = default;

  const ArchitectureConfig& arch() const { return arch_; }
  int modules_at(int depth) const { return static_cast<int>(modules_[depth].size()); }
  std::array<int, kNumDepths> modules_per_depth() const;

  ag::ParameterSet& module(int depth, int index);
  const ag::ParameterSet& module(int depth, int index) const;
  void add_module(int depth, Rng& rng);

  std::size_t parameter_count() const;
  std::uint64_t checksum() const;
  ModuleLibrary clone() const;
  void copy_values_from(const ModuleLibrary& other);

 private:
  ArchitectureConfig arch_;
  std::array<std::vector<ag::ParameterSet>, kNumDepths> modules_;
};

std::size_t library_param_count(const ModuleLibrary& lib);

struct StructureAssignment {
  std::array<int, kNumDepths> modules{0, 0, 0};

  int operator[](int depth) const { return modules[depth]; }
  std::string str() const;
  friend bool operator==(const StructureAssignment&, const StructureAssignment&) = default;
  friend auto operator<=>(const StructureAssignment&, const StructureAssignment&) = default;
};

struct ObservationViews {
  ag::Tensor static_view;  // [N,5,7,7] wall, floor, food, lava, door
  ag::Tensor target_view;  // [N,1,7,7]
  ag::Tensor agent_view;   // [N,1,7,7]
};

// obs is [N,7,7,7] channel-major per sample.
ObservationViews split_observation(const ag::Tensor& obs);

ag::Tensor obs_batch(std::span<const float> flat_obs, int n);
ag::Tensor obs_batch(const ObsTensor& obs);

struct PolicyOutput {
  ag::Tensor logits;         // [N,6]
  ag::Tensor q;              // [N,6]
  ag::Tensor features;       // [N,F(+D)] head input
  ag::Tensor actor_hidden;   // [N,H]
  ag::Tensor critic_hidden;  // [N,H]
};

// Extra pre-activation terms added by progressive lateral connections.
struct LateralInputs {
  ag::Tensor actor_hidden;
  ag::Tensor critic_hidden;
  ag::Tensor actor_out;
  ag::Tensor critic_out;
};

using ModuleRefs = std::array<const ag::ParameterSet*, kNumDepths>;

PolicyOutput modular_forward(const ModuleRefs& modules, const ArchitectureConfig& arch, const ag::Tensor& obs,
                             const ag::Tensor* descriptor = nullptr, const LateralInputs* lateral = nullptr);

// Anything PPO and BCQ can train: maps an observation batch to logits and Q.
class ActorCritic {
 public:
  virtual ~ActorCritic() = default;
  virtual PolicyOutput forward(const ag::Tensor& obs) = 0;
  virtual std::vector<ag::ParameterSet*> parameter_sets() = 0;
};

class AssembledPolicy : public ActorCritic {
 public:
  // clone=false aliases the library's tensors; clone=true trains private copies.
  static AssembledPolicy assemble(ModuleLibrary& lib, const StructureAssignment& s, bool clone);

  AssembledPolicy(AssembledPolicy&&) noexcept = default;
  AssembledPolicy& operator=(AssembledPolicy&&) noexcept = default;

  PolicyOutput forward(const ag::Tensor& obs) override;
  std::vector<ag::ParameterSet*> parameter_sets() override;

  bool owns_copies() const { return !owned_.empty(); }
  const StructureAssignment& structure() const { return structure_; }
  const ArchitectureConfig& arch() const { return arch_; }

  // Multi-hot row repeated across the batch (baselines only).
  void set_descriptor(std::vector<float> bits);
  const std::vector<float>& descriptor() const { return descriptor_; }

  // Copy private module values into the library slots of this structure.
  void write_back(ModuleLibrary& lib) const;

  ModuleRefs refs() const;

 private:
  AssembledPolicy() = default;

  ArchitectureConfig arch_;
  StructureAssignment structure_;
  std::array<ag::ParameterSet*, kNumDepths> sets_{};
  std::vector<ag::ParameterSet> owned_;
  std::vector<float> descriptor_;
};

ag::Tensor descriptor_batch(const std::vector<float>& bits, int n);

// Single-structure network used by the baselines: one module of each depth,
// optionally with a multi-hot descriptor input.
ModuleLibrary make_monolithic(const ArchitectureConfig& arch, Rng& rng);

struct LayerCount {
  std::string depth;
  std::string layer;
  std::string shape;
  std::size_t count = 0;
};

// Per-layer parameter counts for one module of each depth.
std::vector<LayerCount> parameter_table(const ArchitectureConfig& arch);
std::string format_parameter_table(const std::vector<LayerCount>& rows);

}  // namespace lcrl
