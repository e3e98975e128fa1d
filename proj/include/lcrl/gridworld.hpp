#pragma once

// Compositional discrete 2-D world: an 8x8 walled grid with one column of a
// static object (wall+door, floor, food or lava), four colored targets and
// an agent whose action semantics are permuted by the task's dynamics id.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "lcrl/common.hpp"

namespace lcrl {

enum class StaticObject : std::uint8_t { wall = 0, floor = 1, food = 2, lava = 3 };
enum class TargetColor : std::uint8_t { red = 0, green = 1, blue = 2, purple = 3 };

inline constexpr int kNumStaticObjects = 4;
inline constexpr int kNumColors = 4;
inline constexpr int kNumDynamics = 4;
inline constexpr int kNumActions = 6;

struct TaskDescriptor {
  StaticObject static_object = StaticObject::wall;
  TargetColor target_color = TargetColor::red;
  int dynamics_id = 0;

  int static_index() const { return static_cast<int>(static_object); }
  int color_index() const { return static_cast<int>(target_color); }

  // Component value index at depth 0 (static), 1 (target) or 2 (dynamics).
  int component(int depth) const;

  // Dense id in [0, 64): static * 16 + color * 4 + dynamics.
  int id() const { return static_index() * 16 + color_index() * 4 + dynamics_id; }

  bool valid() const;
  std::string name() const;  // e.g. "wall/red/0"

  static TaskDescriptor from_indices(int static_index, int color_index, int dynamics_id);
  static TaskDescriptor from_id(int id);
  static TaskDescriptor parse(const std::string& name);

  friend bool operator==(const TaskDescriptor&, const TaskDescriptor&) = default;
};

const char* static_object_name(StaticObject s);
const char* color_name(TargetColor c);

// Primitive effects, in the canonical order of dynamics 0.
enum class Primitive : std::uint8_t {
  turn_left = 0,
  turn_right = 1,
  move_forward = 2,
  pick_object = 3,
  drop_object = 4,
  open_door = 5,
};

const char* primitive_name(Primitive p);

// Each dynamics id reorders which primitive an action index triggers.
Primitive permute_action(int dynamics_id, int action_index);

enum class CellKind : std::uint8_t {
  empty = 0,
  wall,
  floor,
  food,
  lava,
  door_closed,
  door_open,
  target,
};

struct Cell {
  CellKind kind = CellKind::empty;
  std::uint8_t color = 0;  // target color index, valid when kind == target
  bool spent = false;      // food that was already rewarded once

  friend bool operator==(const Cell&, const Cell&) = default;
};

// Outer ring is wall, leaving a 6x6 interior; flip here to change geometry.
inline constexpr int kGridSize = 8;
inline constexpr int kHorizon = 64;
inline constexpr int kViewSize = 7;
inline constexpr int kObsChannels = 7;
inline constexpr int kObsSize = kObsChannels * kViewSize * kViewSize;  // 343

inline constexpr double kFoodReward = 0.05;
inline constexpr double kLavaPenalty = 0.05;
// The static column spans the six interior rows minus its gap.
inline constexpr int kMaxStaticCells = kGridSize - 3;

enum class Direction : std::uint8_t { right = 0, down = 1, left = 2, up = 3 };

struct GridPos {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
};

GridPos step_in(GridPos p, Direction d, int distance = 1);

struct GridState {
  std::array<Cell, kGridSize * kGridSize> grid{};
  GridPos agent{1, 1};
  Direction agent_dir = Direction::right;
  int step_count = 0;
  std::optional<Cell> carrying;
  bool done = false;
  int food_collected = 0;
  int food_placed = 0;
  int static_column = -1;  // x of the static-object column
  int gap_row = -1;        // y of its single gap cell

  static bool in_bounds(GridPos p) {
    return p.row >= 0 && p.row < kGridSize && p.col >= 0 && p.col < kGridSize;
  }
  Cell& at(GridPos p) { return grid[p.row * kGridSize + p.col]; }
  const Cell& at(GridPos p) const { return grid[p.row * kGridSize + p.col]; }

  // Ring of walls, empty interior, agent at (1,1) facing right.
  static GridState empty_room();

  friend bool operator==(const GridState&, const GridState&) = default;
};

// Channels: wall, floor, food, lava, door (closed), target (color+1),
// agent (direction+1). Layout is channel-major [c][row][col]; row 0 is the far
// edge of the window and the agent sits at row 6, col 3 facing up.
struct ObsTensor {
  std::array<float, kObsSize> data{};

  float at(int channel, int row, int col) const {
    return data[(channel * kViewSize + row) * kViewSize + col];
  }
  float& at(int channel, int row, int col) {
    return data[(channel * kViewSize + row) * kViewSize + col];
  }
  friend bool operator==(const ObsTensor&, const ObsTensor&) = default;
};

enum ObsChannel : int {
  kChanWall = 0,
  kChanFloor = 1,
  kChanFood = 2,
  kChanLava = 3,
  kChanDoor = 4,
  kChanTarget = 5,
  kChanAgent = 6,
};

struct StepInfo {
  bool success = false;
  int food_collected = 0;
  bool lava_hit = false;
  bool timeout = false;
};

struct StepOutcome {
  ObsTensor obs;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

// Visibility mask over the 7x7 egocentric window (row-major, same layout as
// one ObsTensor channel).
using VisibilityMask = std::array<bool, kViewSize * kViewSize>;

// World position of window cell (row, col) for the agent's pose.
GridPos view_to_world(const GridState& state, int view_row, int view_col);

// Whether light passes a world cell. Out-of-bounds cells are opaque.
bool transparent(const GridState& state, GridPos p);

// Corner-propagation sweep: rows are processed from the agent's row outward;
// every visible transparent cell lights its left/right neighbors and the three
// cells above it. Opaque cells are visible themselves but light nothing.
VisibilityMask compute_visibility(const GridState& state);

ObsTensor render_observation(const GridState& state);

struct ResetResult {
  GridState state;
  ObsTensor obs;
};

ResetResult reset(const TaskDescriptor& task, Rng& rng);

// Advances `state` in place. Throws ContractViolation after termination.
StepOutcome step(GridState& state, const TaskDescriptor& task, int action_index);

std::string ascii_render(const GridState& state);

// Convenience wrapper owning task, state and RNG stream.
class GridWorld {
 public:
  GridWorld(TaskDescriptor task, std::uint64_t seed) : task_(task), rng_(seed) {}

  const ObsTensor& reset();
  StepOutcome step(int action_index);

  const GridState& state() const { return state_; }
  const TaskDescriptor& task() const { return task_; }
  const ObsTensor& observation() const { return obs_; }
  Rng& rng() { return rng_; }

 private:
  TaskDescriptor task_;
  Rng rng_;
  GridState state_;
  ObsTensor obs_;
};

}  // namespace lcrl
