#include "lcrl/task_space.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace lcrl {

const char* depth_name(int depth) {
  static constexpr std::array<const char*, kNumDepths> names{"static", "target", "agent"};
  require(depth >= 0 && depth < kNumDepths, "depth_name: depth out of range");
  return names[depth];
}

int ComponentDepthSpec::max_modules() const {
  return *std::max_element(modules_per_depth.begin(), modules_per_depth.end());
}

int ComponentDepthSpec::multihot_width() const {
  return std::accumulate(values_per_depth.begin(), values_per_depth.end(), 0);
}

void ComponentDepthSpec::validate() const {
  const std::array<int, kNumDepths> limits{kNumStaticObjects, kNumColors, kNumDynamics};
  for (int d = 0; d < kNumDepths; ++d) {
    require(values_per_depth[d] >= 1 && values_per_depth[d] <= limits[d],
            std::string("ComponentDepthSpec: bad value count at depth ") + depth_name(d));
    require(modules_per_depth[d] >= 1, std::string("ComponentDepthSpec: k_d < 1 at depth ") + depth_name(d));
  }
}

std::vector<TaskDescriptor> enumerate_tasks(const ComponentDepthSpec& spec) {
  spec.validate();
  std::vector<TaskDescriptor> out;
  for (int s = 0; s < spec.values_per_depth[0]; ++s)
    for (int c = 0; c < spec.values_per_depth[1]; ++c)
      for (int d = 0; d < spec.values_per_depth[2]; ++d) out.push_back(TaskDescriptor::from_indices(s, c, d));
  return out;
}

int MultiHotDescriptor::popcount() const {
  return static_cast<int>(std::count_if(bits.begin(), bits.end(), [](float b) { return b != 0.0f; }));
}

MultiHotDescriptor descriptor_to_multihot(const TaskDescriptor& d, const ComponentDepthSpec& spec) {
  MultiHotDescriptor m;
  m.bits.assign(static_cast<std::size_t>(spec.multihot_width()), 0.0f);
  int offset = 0;
  for (int depth = 0; depth < kNumDepths; ++depth) {
    const int v = d.component(depth);
    require(v < spec.values_per_depth[depth], "descriptor_to_multihot: component outside spec");
    m.bits[static_cast<std::size_t>(offset + v)] = 1.0f;
    offset += spec.values_per_depth[depth];
  }
  return m;
}

const char* curriculum_mode_name(CurriculumMode m) {
  return m == CurriculumMode::disjoint_first ? "disjoint_first" : "random";
}

CurriculumMode parse_curriculum_mode(const std::string& s) {
  if (s == "disjoint_first") return CurriculumMode::disjoint_first;
  if (s == "random") return CurriculumMode::random;
  throw ContractViolation("unknown curriculum mode '" + s + "'");
}

bool tasks_disjoint(const TaskDescriptor& a, const TaskDescriptor& b) {
  for (int d = 0; d < kNumDepths; ++d)
    if (a.component(d) == b.component(d)) return false;
  return true;
}

namespace {

bool find_rainbow(const std::vector<TaskDescriptor>& pool, std::size_t start, int needed,
                  std::vector<std::size_t>& chosen) {
  if (needed == 0) return true;
  for (std::size_t i = start; i < pool.size(); ++i) {
    const bool ok = std::all_of(chosen.begin(), chosen.end(),
                                [&](std::size_t j) { return tasks_disjoint(pool[i], pool[j]); });
    if (!ok) continue;
    chosen.push_back(i);
    if (find_rainbow(pool, i + 1, needed - 1, chosen)) return true;
    chosen.pop_back();
  }
  return false;
}

}  // namespace

Curriculum make_curriculum(const std::vector<TaskDescriptor>& tasks, CurriculumMode mode, Rng& rng,
                           const ComponentDepthSpec& spec) {
  require(!tasks.empty(), "make_curriculum: empty task list");
  Curriculum c;
  c.mode = mode;
  c.ordering = tasks;
  rng.shuffle(c.ordering.begin(), c.ordering.end());
  if (mode == CurriculumMode::random) return c;

  const int k = spec.max_modules();
  std::vector<std::size_t> chosen;
  if (static_cast<int>(tasks.size()) < k || !find_rainbow(c.ordering, 0, k, chosen))
    throw ContractViolation("make_curriculum: no " + std::to_string(k) +
                            " pairwise-disjoint tasks exist in the given list");
  std::vector<TaskDescriptor> front, rest;
  for (std::size_t i : chosen) front.push_back(c.ordering[i]);
  for (std::size_t i = 0; i < c.ordering.size(); ++i)
    if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) rest.push_back(c.ordering[i]);
  rng.shuffle(front.begin(), front.end());
  rng.shuffle(rest.begin(), rest.end());
  c.ordering = front;
  c.ordering.insert(c.ordering.end(), rest.begin(), rest.end());
  return c;
}

std::string serialize_curriculum(const Curriculum& c) {
  std::ostringstream os;
  for (const auto& t : c.ordering) os << t.name() << '\n';
  return os.str();
}

Curriculum parse_curriculum(const std::string& text, CurriculumMode mode) {
  Curriculum c;
  c.mode = mode;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    c.ordering.push_back(TaskDescriptor::parse(line));
  }
  return c;
}

}  // namespace lcrl
