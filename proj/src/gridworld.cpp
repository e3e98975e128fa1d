#include "lcrl/gridworld.hpp"

#include <sstream>
#include <vector>

namespace lcrl {

namespace {

constexpr std::array<std::array<Primitive, kNumActions>, kNumDynamics> kPermutations{{
    {Primitive::turn_left, Primitive::turn_right, Primitive::move_forward, Primitive::pick_object,
     Primitive::drop_object, Primitive::open_door},
    {Primitive::turn_left, Primitive::turn_right, Primitive::open_door, Primitive::pick_object,
     Primitive::drop_object, Primitive::move_forward},
    {Primitive::turn_left, Primitive::move_forward, Primitive::turn_right, Primitive::pick_object,
     Primitive::drop_object, Primitive::open_door},
    {Primitive::turn_left, Primitive::move_forward, Primitive::open_door, Primitive::pick_object,
     Primitive::drop_object, Primitive::turn_right},
}};

constexpr std::array<const char*, kNumStaticObjects> kStaticNames{"wall", "floor", "food", "lava"};
constexpr std::array<const char*, kNumColors> kColorNames{"red", "green", "blue", "purple"};

Direction rotate(Direction d, int quarter_turns) {
  return static_cast<Direction>((static_cast<int>(d) + quarter_turns + 4) % 4);
}

CellKind static_cell_kind(StaticObject s) {
  switch (s) {
    case StaticObject::wall:
      return CellKind::wall;
    case StaticObject::floor:
      return CellKind::floor;
    case StaticObject::food:
      return CellKind::food;
    case StaticObject::lava:
      return CellKind::lava;
  }
  return CellKind::empty;
}

}  // namespace

int TaskDescriptor::component(int depth) const {
  switch (depth) {
    case 0:
      return static_index();
    case 1:
      return color_index();
    case 2:
      return dynamics_id;
    default:
      throw ContractViolation("TaskDescriptor::component: depth must be 0..2");
  }
}

bool TaskDescriptor::valid() const {
  return static_index() >= 0 && static_index() < kNumStaticObjects && color_index() >= 0 &&
         color_index() < kNumColors && dynamics_id >= 0 && dynamics_id < kNumDynamics;
}

std::string TaskDescriptor::name() const {
  return std::string(static_object_name(static_object)) + "/" + color_name(target_color) + "/" +
         std::to_string(dynamics_id);
}

TaskDescriptor TaskDescriptor::from_indices(int static_index, int color_index, int dynamics_id) {
  require(static_index >= 0 && static_index < kNumStaticObjects && color_index >= 0 &&
              color_index < kNumColors && dynamics_id >= 0 && dynamics_id < kNumDynamics, [&] { return
          "TaskDescriptor: component index out of range (" + std::to_string(static_index) + "," +
              std::to_string(color_index) + "," + std::to_string(dynamics_id) + ")"; });
  return {static_cast<StaticObject>(static_index), static_cast<TargetColor>(color_index),
          dynamics_id};
}

TaskDescriptor TaskDescriptor::from_id(int id) {
  require(id >= 0 && id < 64, "TaskDescriptor::from_id: id out of range");
  return from_indices(id / 16, (id / 4) % 4, id % 4);
}

TaskDescriptor TaskDescriptor::parse(const std::string& name) {
  const auto a = name.find('/');
  const auto b = name.find('/', a == std::string::npos ? a : a + 1);
  require(a != std::string::npos && b != std::string::npos, "cannot parse task '" + name + "'");
  const std::string s = name.substr(0, a), c = name.substr(a + 1, b - a - 1), d = name.substr(b + 1);
  int si = -1, ci = -1;
  for (int i = 0; i < kNumStaticObjects; ++i)
    if (s == kStaticNames[i]) si = i;
  for (int i = 0; i < kNumColors; ++i)
    if (c == kColorNames[i]) ci = i;
  require(si >= 0 && ci >= 0 && d.size() == 1 && d[0] >= '0' && d[0] <= '3',
          "cannot parse task '" + name + "'");
  return from_indices(si, ci, d[0] - '0');
}

const char* static_object_name(StaticObject s) { return kStaticNames.at(static_cast<int>(s)); }
const char* color_name(TargetColor c) { return kColorNames.at(static_cast<int>(c)); }

const char* primitive_name(Primitive p) {
  static constexpr std::array<const char*, kNumActions> names{
      "turn_left", "turn_right", "move_forward", "pick_object", "drop_object", "open_door"};
  return names.at(static_cast<int>(p));
}

Primitive permute_action(int dynamics_id, int action_index) {
  require(dynamics_id >= 0 && dynamics_id < kNumDynamics, [&] { return
          "permute_action: dynamics id " + std::to_string(dynamics_id) + " out of range"; });
  require(action_index >= 0 && action_index < kNumActions, [&] { return
          "permute_action: action index " + std::to_string(action_index) + " out of range"; });
  return kPermutations[dynamics_id][action_index];
}

GridPos step_in(GridPos p, Direction d, int distance) {
  switch (d) {
    case Direction::right:
      return {p.row, p.col + distance};
    case Direction::down:
      return {p.row + distance, p.col};
    case Direction::left:
      return {p.row, p.col - distance};
    case Direction::up:
      return {p.row - distance, p.col};
  }
  return p;
}

GridState GridState::empty_room() {
  GridState s;
  for (int r = 0; r < kGridSize; ++r)
    for (int c = 0; c < kGridSize; ++c)
      if (r == 0 || c == 0 || r == kGridSize - 1 || c == kGridSize - 1) s.at({r, c}).kind = CellKind::wall;
  return s;
}

GridPos view_to_world(const GridState& state, int view_row, int view_col) {
  const int forward = (kViewSize - 1) - view_row;
  const int lateral = view_col - kViewSize / 2;
  const GridPos ahead = step_in(state.agent, state.agent_dir, forward);
  return step_in(ahead, rotate(state.agent_dir, 1), lateral);
}

bool transparent(const GridState& state, GridPos p) {
  if (!GridState::in_bounds(p)) return false;
  const CellKind k = state.at(p).kind;
  return k != CellKind::wall && k != CellKind::door_closed;
}

VisibilityMask compute_visibility(const GridState& state) {
  VisibilityMask mask{};
  std::array<bool, kViewSize * kViewSize> clear{};
  for (int r = 0; r < kViewSize; ++r)
    for (int c = 0; c < kViewSize; ++c) clear[r * kViewSize + c] = transparent(state, view_to_world(state, r, c));

  auto idx = [](int r, int c) { return r * kViewSize + c; };
  mask[idx(kViewSize - 1, kViewSize / 2)] = true;
  for (int r = kViewSize - 1; r >= 0; --r) {
    for (int c = 0; c < kViewSize - 1; ++c) {
      if (!mask[idx(r, c)] || !clear[idx(r, c)]) continue;
      mask[idx(r, c + 1)] = true;
      if (r > 0) {
        mask[idx(r - 1, c + 1)] = true;
        mask[idx(r - 1, c)] = true;
      }
    }
    for (int c = kViewSize - 1; c > 0; --c) {
      if (!mask[idx(r, c)] || !clear[idx(r, c)]) continue;
      mask[idx(r, c - 1)] = true;
      if (r > 0) {
        mask[idx(r - 1, c - 1)] = true;
        mask[idx(r - 1, c)] = true;
      }
    }
  }
  return mask;
}

ObsTensor render_observation(const GridState& state) {
  ObsTensor obs;
  const VisibilityMask visible = compute_visibility(state);
  for (int r = 0; r < kViewSize; ++r) {
    for (int c = 0; c < kViewSize; ++c) {
      if (!visible[r * kViewSize + c]) continue;
      const GridPos p = view_to_world(state, r, c);
      if (!GridState::in_bounds(p)) {
        obs.at(kChanWall, r, c) = 1.0f;
        continue;
      }
      const Cell& cell = state.at(p);
      switch (cell.kind) {
        case CellKind::wall:
          obs.at(kChanWall, r, c) = 1.0f;
          break;
        case CellKind::floor:
          obs.at(kChanFloor, r, c) = 1.0f;
          break;
        case CellKind::food:
          obs.at(kChanFood, r, c) = 1.0f;
          break;
        case CellKind::lava:
          obs.at(kChanLava, r, c) = 1.0f;
          break;
        case CellKind::door_closed:
          obs.at(kChanDoor, r, c) = 1.0f;
          break;
        case CellKind::target:
          obs.at(kChanTarget, r, c) = static_cast<float>(cell.color + 1);
          break;
        case CellKind::empty:
        case CellKind::door_open:
          break;
      }
    }
  }
  obs.at(kChanAgent, kViewSize - 1, kViewSize / 2) = static_cast<float>(static_cast<int>(state.agent_dir) + 1);
  return obs;
}

ResetResult reset(const TaskDescriptor& task, Rng& rng) {
  require(task.valid(), "reset: invalid task descriptor");
  GridState s = GridState::empty_room();

  const int x = rng.uniform_int(2, kGridSize - 2);
  const int y = rng.uniform_int(1, kGridSize - 2);
  s.static_column = x;
  s.gap_row = y;
  const CellKind column_kind = static_cell_kind(task.static_object);
  for (int r = 1; r < kGridSize - 1; ++r) {
    if (r == y) {
      if (task.static_object == StaticObject::wall) s.at({r, x}).kind = CellKind::door_closed;
    } else {
      s.at({r, x}).kind = column_kind;
      if (column_kind == CellKind::food) s.food_placed += 1;
    }
  }

  std::vector<GridPos> free;
  for (int r = 1; r < kGridSize - 1; ++r)
    for (int c = 1; c < kGridSize - 1; ++c)
      if (s.at({r, c}).kind == CellKind::empty) free.push_back({r, c});
  const std::size_t needed = 1 + kNumColors;
  if (free.size() < needed)
    throw std::runtime_error("reset: only " + std::to_string(free.size()) + " free cells for " +
                             std::to_string(needed) + " objects");

  auto take = [&]() {
    const auto i = rng.uniform_index(free.size());
    const GridPos p = free[i];
    free.erase(free.begin() + static_cast<std::ptrdiff_t>(i));
    return p;
  };
  s.agent = take();
  s.agent_dir = static_cast<Direction>(rng.uniform_int(0, 3));
  for (int color = 0; color < kNumColors; ++color) {
    const GridPos p = take();
    s.at(p).kind = CellKind::target;
    s.at(p).color = static_cast<std::uint8_t>(color);
  }
  return {s, render_observation(s)};
}

StepOutcome step(GridState& state, const TaskDescriptor& task, int action_index) {
  require(!state.done, "step: episode already terminated");
  StepOutcome out;
  const Primitive effect = permute_action(task.dynamics_id, action_index);
  state.step_count += 1;
  const GridPos front = step_in(state.agent, state.agent_dir);
  const bool front_ok = GridState::in_bounds(front);

  switch (effect) {
    case Primitive::turn_left:
      state.agent_dir = rotate(state.agent_dir, -1);
      break;
    case Primitive::turn_right:
      state.agent_dir = rotate(state.agent_dir, 1);
      break;
    case Primitive::move_forward: {
      if (!transparent(state, front)) break;  // wall, closed door or outside
      state.agent = front;
      const Cell& cell = state.at(front);
      if (cell.kind == CellKind::lava) {
        out.reward = -kLavaPenalty;
        out.info.lava_hit = true;
        state.done = true;
      } else if (cell.kind == CellKind::target && cell.color == task.color_index()) {
        out.reward = 1.0 - 0.9 * (static_cast<double>(state.step_count) / kHorizon);
        out.info.success = true;
        state.done = true;
      }
      break;
    }
    case Primitive::pick_object:
      if (front_ok && !state.carrying && state.at(front).kind == CellKind::food) {
        Cell item = state.at(front);
        state.at(front) = Cell{};
        if (!item.spent) {
          out.reward = kFoodReward;
          state.food_collected += 1;
          item.spent = true;
        }
        state.carrying = item;
      }
      break;
    case Primitive::drop_object:
      if (front_ok && state.carrying && state.at(front).kind == CellKind::empty) {
        state.at(front) = *state.carrying;
        state.carrying.reset();
      }
      break;
    case Primitive::open_door:
      if (front_ok && state.at(front).kind == CellKind::door_closed) state.at(front).kind = CellKind::door_open;
      break;
  }

  if (!state.done && state.step_count >= kHorizon) {
    state.done = true;
    out.info.timeout = true;
  }
  out.done = state.done;
  out.info.food_collected = state.food_collected;
  out.obs = render_observation(state);
  return out;
}

std::string ascii_render(const GridState& state) {
  static constexpr std::array<char, 4> arrows{'>', 'v', '<', '^'};
  std::ostringstream os;
  for (int r = 0; r < kGridSize; ++r) {
    for (int c = 0; c < kGridSize; ++c) {
      const GridPos p{r, c};
      if (p == state.agent) {
        os << arrows[static_cast<int>(state.agent_dir)];
        continue;
      }
      const Cell& cell = state.at(p);
      switch (cell.kind) {
        case CellKind::empty:
          os << '.';
          break;
        case CellKind::wall:
          os << '#';
          break;
        case CellKind::floor:
          os << '_';
          break;
        case CellKind::food:
          os << 'f';
          break;
        case CellKind::lava:
          os << '~';
          break;
        case CellKind::door_closed:
          os << 'D';
          break;
        case CellKind::door_open:
          os << 'd';
          break;
        case CellKind::target:
          os << static_cast<char>('1' + cell.color);
          break;
      }
    }
    os << '\n';
  }
  return os.str();
}

const ObsTensor& GridWorld::reset() {
  auto r = lcrl::reset(task_, rng_);
  state_ = r.state;
  obs_ = r.obs;
  return obs_;
}

StepOutcome GridWorld::step(int action_index) {
  StepOutcome out = lcrl::step(state_, task_, action_index);
  obs_ = out.obs;
  return out;
}

}  // namespace lcrl
