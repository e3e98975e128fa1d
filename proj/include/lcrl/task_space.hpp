#pragma once

// Task enumeration, multi-hot component encodings and curricula. A task's
// solution path is one module per depth, chained static -> target -> agent.

#include <array>
#include <string>
#include <vector>

#include "lcrl/common.hpp"
#include "lcrl/gridworld.hpp"

namespace lcrl {

inline constexpr int kNumDepths = 3;

enum class Depth : int { static_object = 0, target_object = 1, agent_dynamics = 2 };

const char* depth_name(int depth);

struct ComponentDepthSpec {
  // Number of component values available at each depth.
  std::array<int, kNumDepths> values_per_depth{4, 4, 4};
  // k_d: modules in the library at each depth.
  std::array<int, kNumDepths> modules_per_depth{4, 4, 4};

  int max_modules() const;
  int multihot_width() const;
  void validate() const;
};

std::vector<TaskDescriptor> enumerate_tasks(const ComponentDepthSpec& spec = {});

struct MultiHotDescriptor {
  std::vector<float> bits;
  int popcount() const;
};

MultiHotDescriptor descriptor_to_multihot(const TaskDescriptor& d,
                                          const ComponentDepthSpec& spec = {});

enum class CurriculumMode { disjoint_first, random };

const char* curriculum_mode_name(CurriculumMode m);
CurriculumMode parse_curriculum_mode(const std::string& s);

struct Curriculum {
  std::vector<TaskDescriptor> ordering;
  CurriculumMode mode = CurriculumMode::random;
};

// disjoint_first places k = max_d k_d pairwise component-disjoint tasks at the
// front (found by backtracking over a random order), then the rest shuffled.
Curriculum make_curriculum(const std::vector<TaskDescriptor>& tasks, CurriculumMode mode, Rng& rng,
                           const ComponentDepthSpec& spec = {});

bool tasks_disjoint(const TaskDescriptor& a, const TaskDescriptor& b);

// One "static/color/dyn" name per line.
std::string serialize_curriculum(const Curriculum& c);
Curriculum parse_curriculum(const std::string& text, CurriculumMode mode = CurriculumMode::random);

}  // namespace lcrl
