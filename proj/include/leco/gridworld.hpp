#pragma once

// Procedurally generated, partially observable gridworld. Worlds are chains
// of connected rooms with doors; tasks are sparse-terminal-reward navigation
// (reach_goal) or fetch-key-unlock-door navigation (key_door_goal). A
// Noisy-TV variant adds a ball whose color is resampled when toggled.

#include <array>
#include <cstdint>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "leco/errors.hpp"
#include "leco/rng.hpp"

namespace leco {

enum class Tile : int32_t {
  Empty = 0,
  Wall = 1,
  Floor = 2,
  Door = 3,
  Key = 4,
  Ball = 5,
  Box = 6,
  Goal = 7,
  Agent = 8,
  Unseen = 9,
};
constexpr int32_t kNumTileTypes = 10;
constexpr int32_t kNumColors = 6;
constexpr int32_t kNumDoorStates = 3;  // open, closed, locked

enum class DoorState : int32_t { Open = 0, Closed = 1, Locked = 2 };

enum class TaskKind : int32_t { ReachGoal = 0, KeyDoorGoal = 1 };

enum class Action : int32_t {
  TurnLeft = 0,
  TurnRight = 1,
  Forward = 2,
  Pickup = 3,
  Drop = 4,
  Toggle = 5,
  Done = 6,
};
constexpr int32_t kNumActions = 7;

struct Cell {
  Tile type = Tile::Empty;
  int32_t color = 0;
  int32_t state = 0;

  bool walkable() const {
    switch (type) {
      case Tile::Floor:
      case Tile::Goal:
        return true;
      case Tile::Door:
        return state == static_cast<int32_t>(DoorState::Open);
      default:
        return false;
    }
  }

  bool see_through() const {
    if (type == Tile::Wall || type == Tile::Empty) return false;
    if (type == Tile::Door) return state == static_cast<int32_t>(DoorState::Open);
    return true;
  }

  bool pickable() const {
    return type == Tile::Key || type == Tile::Ball || type == Tile::Box;
  }
};

struct WorldConfig {
  uint64_t seed = 0;
  int num_rooms = 3;
  int room_size = 5;  // interior side length
  int max_episode_steps = 150;
  bool noisy_tv = false;
  TaskKind task = TaskKind::ReachGoal;

  void validate() const {
    if (num_rooms < 1) throw ConfigError("num_rooms must be >= 1");
    if (room_size < 3) throw ConfigError("room_size must be >= 3");
    if (max_episode_steps <= 0) throw ConfigError("max_episode_steps must be > 0");
    if (task == TaskKind::KeyDoorGoal && num_rooms < 3)
      throw ConfigError("key_door_goal needs num_rooms >= 3 to keep key and door apart");
  }
};

constexpr int kViewSize = 7;
constexpr int kObsChannels = 3;

// Egocentric 7x7x3 integer view: channels are tile type, color, state.
struct Observation {
  std::array<int32_t, kViewSize * kViewSize * kObsChannels> view{};

  int32_t at(int r, int c, int ch) const {
    return view[static_cast<size_t>((r * kViewSize + c) * kObsChannels + ch)];
  }
  void set(int r, int c, int32_t type, int32_t color, int32_t state) {
    const size_t base = static_cast<size_t>((r * kViewSize + c) * kObsChannels);
    view[base] = type;
    view[base + 1] = color;
    view[base + 2] = state;
  }
  bool operator==(const Observation& o) const { return view == o.view; }
};

struct Transition {
  Observation obs;  // observation after the step
  Action action = Action::Done;
  std::optional<Action> prev_action;
  double extrinsic_reward = 0.0;
  bool done = false;
};

// dir: 0 east, 1 south, 2 west, 3 north
inline constexpr int kDx[4] = {1, 0, -1, 0};
inline constexpr int kDy[4] = {0, 1, 0, -1};

class World {
 public:
  static World generate(const WorldConfig& config) {
    config.validate();
    World w;
    w.config_ = config;
    w.gen_rng_ = Rng(derive_seed(config.seed, 0x6c61796f75740000ull));
    w.tv_rng_ = Rng(derive_seed(config.seed, 0x6e6f6973650000ull));
    for (int attempt = 0; attempt < 256; ++attempt) {
      if (w.try_layout()) {
        w.validate_generated();
        return w;
      }
    }
    throw ConfigError("could not generate a connected world for this configuration");
  }

  const WorldConfig& config() const { return config_; }
  int width() const { return width_; }
  int height() const { return height_; }
  const Cell& at(int x, int y) const { return grid_[static_cast<size_t>(y * width_ + x)]; }
  std::pair<int, int> agent_pos() const { return {ax_, ay_}; }
  int agent_dir() const { return adir_; }
  std::optional<Cell> carrying() const { return carrying_; }
  bool done() const { return done_; }
  int step_count() const { return steps_; }
  std::pair<int, int> goal_pos() const { return {gx_, gy_}; }
  std::pair<int, int> ball_pos() const { return {bx_, by_}; }

  Transition step(Action action) {
    if (done_) throw UsageError("step called on a finished episode");
    const std::optional<Action> prev = last_action_;
    double reward = 0.0;

    switch (action) {
      case Action::TurnLeft:
        adir_ = (adir_ + 3) % 4;
        break;
      case Action::TurnRight:
        adir_ = (adir_ + 1) % 4;
        break;
      case Action::Forward: {
        const int nx = ax_ + kDx[adir_];
        const int ny = ay_ + kDy[adir_];
        if (in_bounds(nx, ny) && at(nx, ny).walkable()) {
          ax_ = nx;
          ay_ = ny;
          if (at(nx, ny).type == Tile::Goal) {
            reward = 1.0 - 0.9 * static_cast<double>(steps_) /
                               static_cast<double>(config_.max_episode_steps);
            done_ = true;
          }
        }
        break;
      }
      case Action::Pickup: {
        Cell& front = front_cell();
        if (!carrying_ && front.pickable()) {
          carrying_ = front;
          front = Cell{Tile::Floor, 0, 0};
        }
        break;
      }
      case Action::Drop: {
        Cell& front = front_cell();
        if (carrying_ && front.type == Tile::Floor) {
          front = *carrying_;
          carrying_.reset();
        }
        break;
      }
      case Action::Toggle: {
        Cell& front = front_cell();
        if (front.type == Tile::Door) {
          const auto st = static_cast<DoorState>(front.state);
          if (st == DoorState::Closed) {
            front.state = static_cast<int32_t>(DoorState::Open);
          } else if (st == DoorState::Open) {
            front.state = static_cast<int32_t>(DoorState::Closed);
          } else if (st == DoorState::Locked && carrying_ &&
                     carrying_->type == Tile::Key && carrying_->color == front.color) {
            front.state = static_cast<int32_t>(DoorState::Open);
          }
        } else if (front.type == Tile::Ball && config_.noisy_tv) {
          front.color = static_cast<int32_t>(tv_rng_.uniform_int(kNumColors));
        }
        break;
      }
      case Action::Done:
        break;
    }

    ++steps_;
    if (!done_ && steps_ >= config_.max_episode_steps) done_ = true;
    last_action_ = action;

    Transition t;
    t.obs = observe();
    t.action = action;
    t.prev_action = prev;
    t.extrinsic_reward = reward;
    t.done = done_;
    return t;
  }

  // Egocentric view: the agent sits at the bottom-center cell facing up.
  // Cells hidden behind walls or closed doors carry the unseen id. The
  // agent's own cell shows the carried object, or the agent tile if empty-
  // handed, so possession is observable.
  Observation observe() const {
    Cell view[kViewSize][kViewSize];
    bool outside[kViewSize][kViewSize] = {};
    const int fdx = kDx[adir_], fdy = kDy[adir_];
    const int rdx = kDx[(adir_ + 1) % 4], rdy = kDy[(adir_ + 1) % 4];
    for (int vr = 0; vr < kViewSize; ++vr) {
      for (int vc = 0; vc < kViewSize; ++vc) {
        const int fwd = (kViewSize - 1) - vr;
        const int rgt = vc - kViewSize / 2;
        const int x = ax_ + fdx * fwd + rdx * rgt;
        const int y = ay_ + fdy * fwd + rdy * rgt;
        if (in_bounds(x, y)) {
          view[vr][vc] = at(x, y);
        } else {
          view[vr][vc] = Cell{Tile::Empty, 0, 0};
          outside[vr][vc] = true;
        }
      }
    }

    // visibility flood from the agent cell; walls and closed doors occlude
    bool mask[kViewSize][kViewSize] = {};
    mask[kViewSize - 1][kViewSize / 2] = true;
    for (int j = kViewSize - 1; j >= 0; --j) {
      for (int i = 0; i < kViewSize - 1; ++i) {
        if (!mask[j][i] || !view[j][i].see_through()) continue;
        mask[j][i + 1] = true;
        if (j > 0) {
          mask[j - 1][i + 1] = true;
          mask[j - 1][i] = true;
        }
      }
      for (int i = kViewSize - 1; i >= 1; --i) {
        if (!mask[j][i] || !view[j][i].see_through()) continue;
        mask[j][i - 1] = true;
        if (j > 0) {
          mask[j - 1][i - 1] = true;
          mask[j - 1][i] = true;
        }
      }
    }

    Observation obs;
    for (int vr = 0; vr < kViewSize; ++vr)
      for (int vc = 0; vc < kViewSize; ++vc) {
        if (!mask[vr][vc] || outside[vr][vc]) {
          obs.set(vr, vc, static_cast<int32_t>(Tile::Unseen), 0, 0);
        } else {
          const Cell& c = view[vr][vc];
          obs.set(vr, vc, static_cast<int32_t>(c.type), c.color, c.state);
        }
      }
    if (carrying_) {
      obs.set(kViewSize - 1, kViewSize / 2, static_cast<int32_t>(carrying_->type),
              carrying_->color, 0);
    } else {
      obs.set(kViewSize - 1, kViewSize / 2, static_cast<int32_t>(Tile::Agent), 0, 0);
    }
    return obs;
  }

  // one character per tile
  std::string render_text() const {
    static const char* kAgentChars = ">v<^";
    std::string out;
    out.reserve(static_cast<size_t>((width_ + 1) * height_));
    for (int y = 0; y < height_; ++y) {
      for (int x = 0; x < width_; ++x) {
        char ch = ' ';
        if (x == ax_ && y == ay_) {
          ch = kAgentChars[adir_];
        } else {
          const Cell& c = at(x, y);
          switch (c.type) {
            case Tile::Empty: ch = ' '; break;
            case Tile::Wall: ch = '#'; break;
            case Tile::Floor: ch = '.'; break;
            case Tile::Door:
              ch = c.state == static_cast<int32_t>(DoorState::Open)    ? '/'
                   : c.state == static_cast<int32_t>(DoorState::Locked) ? 'L'
                                                                         : '+';
              break;
            case Tile::Key: ch = 'k'; break;
            case Tile::Ball: ch = 'o'; break;
            case Tile::Box: ch = 'b'; break;
            case Tile::Goal: ch = 'G'; break;
            default: ch = '?'; break;
          }
        }
        out += ch;
      }
      out += '\n';
    }
    return out;
  }

  // Conservative upper bound on the optimal solution length in actions;
  // world generation requires max_episode_steps to exceed it.
  int solution_bound() const {
    int cells = 0;
    if (config_.task == TaskKind::ReachGoal) {
      cells = bfs_distance(ax_, ay_, gx_, gy_, /*pass_locked=*/false);
    } else {
      const int d1 = bfs_distance(ax_, ay_, kx_, ky_, false);
      const int d2 = bfs_distance(kx_, ky_, ldx_, ldy_, false);
      const int d3 = bfs_distance(ldx_, ldy_, gx_, gy_, true);
      if (d1 < 0 || d2 < 0 || d3 < 0) return -1;
      cells = d1 + d2 + d3;
    }
    if (cells < 0) return -1;
    // up to two turns per move plus pickup/toggle interactions
    return 3 * cells + 8;
  }

  // Grid-cell BFS distance treating closed doors as passable (the agent can
  // toggle them); locked doors block unless pass_locked.
  int bfs_distance(int sx, int sy, int tx, int ty, bool pass_locked) const {
    std::vector<int> dist(static_cast<size_t>(width_ * height_), -1);
    std::queue<std::pair<int, int>> q;
    dist[static_cast<size_t>(sy * width_ + sx)] = 0;
    q.push({sx, sy});
    while (!q.empty()) {
      auto [x, y] = q.front();
      q.pop();
      if (x == tx && y == ty) return dist[static_cast<size_t>(y * width_ + x)];
      for (int d = 0; d < 4; ++d) {
        const int nx = x + kDx[d], ny = y + kDy[d];
        if (!in_bounds(nx, ny)) continue;
        if (dist[static_cast<size_t>(ny * width_ + nx)] >= 0) continue;
        const Cell& c = at(nx, ny);
        bool pass;
        if (nx == tx && ny == ty)
          pass = true;
        else if (c.type == Tile::Door)
          pass = c.state != static_cast<int32_t>(DoorState::Locked) || pass_locked;
        else
          pass = c.walkable();
        if (!pass) continue;
        dist[static_cast<size_t>(ny * width_ + nx)] = dist[static_cast<size_t>(y * width_ + x)] + 1;
        q.push({nx, ny});
      }
    }
    return -1;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = config_.seed;
    j["num_rooms"] = config_.num_rooms;
    j["room_size"] = config_.room_size;
    j["max_episode_steps"] = config_.max_episode_steps;
    j["noisy_tv"] = config_.noisy_tv;
    j["task"] = static_cast<int>(config_.task);
    j["w"] = width_;
    j["h"] = height_;
    std::vector<int32_t> cells;
    cells.reserve(grid_.size() * 3);
    for (const Cell& c : grid_) {
      cells.push_back(static_cast<int32_t>(c.type));
      cells.push_back(c.color);
      cells.push_back(c.state);
    }
    j["cells"] = cells;
    j["agent"] = {ax_, ay_, adir_};
    j["goal"] = {gx_, gy_};
    j["key"] = {kx_, ky_};
    j["locked_door"] = {ldx_, ldy_};
    j["ball"] = {bx_, by_};
    if (carrying_) j["carrying"] = {static_cast<int32_t>(carrying_->type), carrying_->color};
    j["steps"] = steps_;
    j["done"] = done_;
    if (last_action_) j["last_action"] = static_cast<int>(*last_action_);
    j["gen_rng"] = gen_rng_.save_state();
    j["tv_rng"] = tv_rng_.save_state();
    return j;
  }

  static World from_json(const nlohmann::json& j) {
    World w;
    w.config_.seed = j.at("seed").get<uint64_t>();
    w.config_.num_rooms = j.at("num_rooms").get<int>();
    w.config_.room_size = j.at("room_size").get<int>();
    w.config_.max_episode_steps = j.at("max_episode_steps").get<int>();
    w.config_.noisy_tv = j.at("noisy_tv").get<bool>();
    w.config_.task = static_cast<TaskKind>(j.at("task").get<int>());
    w.width_ = j.at("w").get<int>();
    w.height_ = j.at("h").get<int>();
    const auto cells = j.at("cells").get<std::vector<int32_t>>();
    w.grid_.resize(cells.size() / 3);
    for (size_t i = 0; i < w.grid_.size(); ++i) {
      w.grid_[i] = {static_cast<Tile>(cells[3 * i]), cells[3 * i + 1], cells[3 * i + 2]};
    }
    w.ax_ = j.at("agent")[0];
    w.ay_ = j.at("agent")[1];
    w.adir_ = j.at("agent")[2];
    w.gx_ = j.at("goal")[0];
    w.gy_ = j.at("goal")[1];
    w.kx_ = j.at("key")[0];
    w.ky_ = j.at("key")[1];
    w.ldx_ = j.at("locked_door")[0];
    w.ldy_ = j.at("locked_door")[1];
    w.bx_ = j.at("ball")[0];
    w.by_ = j.at("ball")[1];
    if (j.contains("carrying")) {
      w.carrying_ = Cell{static_cast<Tile>(j["carrying"][0].get<int32_t>()),
                         j["carrying"][1].get<int32_t>(), 0};
    }
    w.steps_ = j.at("steps").get<int>();
    w.done_ = j.at("done").get<bool>();
    if (j.contains("last_action"))
      w.last_action_ = static_cast<Action>(j["last_action"].get<int>());
    w.gen_rng_.load_state(j.at("gen_rng").get<std::string>());
    w.tv_rng_.load_state(j.at("tv_rng").get<std::string>());
    return w;
  }

 private:
  struct Room {
    int x, y;  // top-left of the wall rectangle
  };

  bool in_bounds(int x, int y) const { return x >= 0 && x < width_ && y >= 0 && y < height_; }

  Cell& mut(int x, int y) { return grid_[static_cast<size_t>(y * width_ + x)]; }

  Cell& front_cell() {
    thread_local Cell void_cell;
    const int nx = ax_ + kDx[adir_];
    const int ny = ay_ + kDy[adir_];
    if (!in_bounds(nx, ny)) {
      void_cell = Cell{Tile::Empty, 0, 0};
      return void_cell;
    }
    return mut(nx, ny);
  }

  bool try_layout() {
    const int rs = config_.room_size;
    const int span = rs + 1;  // stride between room origins
    const int n = config_.num_rooms;
    const int canvas = (2 * n + 1) * span + 2;
    width_ = height_ = canvas;
    grid_.assign(static_cast<size_t>(canvas * canvas), Cell{Tile::Empty, 0, 0});

    // chain of non-overlapping rooms laid out by a random walk
    std::vector<Room> rooms;
    std::vector<std::pair<int, int>> doors;  // wall cell between room i-1 and i
    Room cur{n * span, n * span};
    rooms.push_back(cur);
    for (int i = 1; i < n; ++i) {
      int order[4] = {0, 1, 2, 3};
      for (int k = 3; k > 0; --k)
        std::swap(order[k], order[static_cast<int>(gen_rng_.uniform_int(k + 1))]);
      bool placed = false;
      for (int oi = 0; oi < 4 && !placed; ++oi) {
        const int d = order[oi];
        Room next{cur.x + kDx[d] * span, cur.y + kDy[d] * span};
        bool clash = false;
        for (const Room& r : rooms)
          if (r.x == next.x && r.y == next.y) clash = true;
        if (clash) continue;
        const int off = 1 + static_cast<int>(gen_rng_.uniform_int(rs));
        int dx_, dy_;
        if (d == 0) { dx_ = cur.x + span; dy_ = cur.y + off; }
        else if (d == 2) { dx_ = cur.x; dy_ = cur.y + off; }
        else if (d == 1) { dx_ = cur.x + off; dy_ = cur.y + span; }
        else { dx_ = cur.x + off; dy_ = cur.y; }
        doors.push_back({dx_, dy_});
        rooms.push_back(next);
        cur = next;
        placed = true;
      }
      if (!placed) return false;
    }
    rooms_ = rooms;

    // carve rooms
    for (const Room& r : rooms) {
      for (int y = r.y; y <= r.y + span; ++y)
        for (int x = r.x; x <= r.x + span; ++x) {
          Cell& c = mut(x, y);
          const bool border = x == r.x || x == r.x + span || y == r.y || y == r.y + span;
          if (border) {
            if (c.type != Tile::Door) c = Cell{Tile::Wall, 5, 0};
          } else {
            c = Cell{Tile::Floor, 0, 0};
          }
        }
    }
    for (auto [x, y] : doors)
      mut(x, y) = Cell{Tile::Door, static_cast<int32_t>(gen_rng_.uniform_int(kNumColors)),
                       static_cast<int32_t>(DoorState::Closed)};

    auto free_cell_in = [&](const Room& r) {
      while (true) {
        const int x = r.x + 1 + static_cast<int>(gen_rng_.uniform_int(rs));
        const int y = r.y + 1 + static_cast<int>(gen_rng_.uniform_int(rs));
        if (at(x, y).type == Tile::Floor) return std::pair<int, int>{x, y};
      }
    };

    // task furnishing
    kx_ = ky_ = ldx_ = ldy_ = bx_ = by_ = -1;
    const Room& goal_room = rooms[static_cast<size_t>(n - 1)];
    std::tie(gx_, gy_) = free_cell_in(goal_room);
    mut(gx_, gy_) = Cell{Tile::Goal, 1, 0};

    int start_room = 0;
    if (config_.task == TaskKind::KeyDoorGoal) {
      // the final door is locked; the agent starts next to it and the key
      // sits at the far end of the chain, forcing a deep detour
      auto [ldx, ldy] = doors[static_cast<size_t>(n - 2)];
      const int32_t key_color = static_cast<int32_t>(gen_rng_.uniform_int(kNumColors));
      mut(ldx, ldy) = Cell{Tile::Door, key_color, static_cast<int32_t>(DoorState::Locked)};
      ldx_ = ldx;
      ldy_ = ldy;
      const int key_room = static_cast<int>(gen_rng_.uniform_int(n - 2));
      std::tie(kx_, ky_) = free_cell_in(rooms[static_cast<size_t>(key_room)]);
      mut(kx_, ky_) = Cell{Tile::Key, key_color, 0};
      start_room = n - 2;
    }

    std::tie(ax_, ay_) = free_cell_in(rooms[static_cast<size_t>(start_room)]);
    adir_ = static_cast<int>(gen_rng_.uniform_int(4));

    if (config_.noisy_tv) {
      const Room& br = rooms[static_cast<size_t>(gen_rng_.uniform_int(n))];
      for (int tries = 0; tries < 64; ++tries) {
        auto [bx, by] = free_cell_in(br);
        if (bx == ax_ && by == ay_) continue;
        Cell saved = at(bx, by);
        mut(bx, by) = Cell{Tile::Ball, static_cast<int32_t>(tv_rng_.uniform_int(kNumColors)), 0};
        if (paths_ok()) {
          bx_ = bx;
          by_ = by;
          break;
        }
        mut(bx, by) = saved;
      }
      if (bx_ < 0) return false;
    }

    crop();
    if (!paths_ok()) return false;
    steps_ = 0;
    done_ = false;
    carrying_.reset();
    last_action_.reset();
    return true;
  }

  bool paths_ok() const {
    if (config_.task == TaskKind::ReachGoal)
      return bfs_distance(ax_, ay_, gx_, gy_, false) >= 0;
    return bfs_distance(ax_, ay_, kx_, ky_, false) >= 0 &&
           bfs_distance(kx_, ky_, ldx_, ldy_, false) >= 0 &&
           bfs_distance(ldx_, ldy_, gx_, gy_, true) >= 0;
  }

  void crop() {
    int minx = width_, miny = height_, maxx = -1, maxy = -1;
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        if (at(x, y).type != Tile::Empty) {
          minx = std::min(minx, x);
          maxx = std::max(maxx, x);
          miny = std::min(miny, y);
          maxy = std::max(maxy, y);
        }
    const int nw = maxx - minx + 1, nh = maxy - miny + 1;
    std::vector<Cell> ng(static_cast<size_t>(nw * nh));
    for (int y = 0; y < nh; ++y)
      for (int x = 0; x < nw; ++x) ng[static_cast<size_t>(y * nw + x)] = at(x + minx, y + miny);
    grid_ = std::move(ng);
    width_ = nw;
    height_ = nh;
    ax_ -= minx; ay_ -= miny;
    gx_ -= minx; gy_ -= miny;
    if (kx_ >= 0) { kx_ -= minx; ky_ -= miny; }
    if (ldx_ >= 0) { ldx_ -= minx; ldy_ -= miny; }
    if (bx_ >= 0) { bx_ -= minx; by_ -= miny; }
  }

  void validate_generated() const {
    const int bound = solution_bound();
    if (bound < 0) throw ConfigError("generated world is not solvable");
    if (config_.max_episode_steps <= bound)
      throw ConfigError("max_episode_steps " + std::to_string(config_.max_episode_steps) +
                        " does not exceed the solution bound " + std::to_string(bound));
  }

  WorldConfig config_;
  Rng gen_rng_, tv_rng_;
  std::vector<Cell> grid_;
  std::vector<Room> rooms_;
  int width_ = 0, height_ = 0;
  int ax_ = 0, ay_ = 0, adir_ = 0;
  int gx_ = -1, gy_ = -1;
  int kx_ = -1, ky_ = -1;
  int ldx_ = -1, ldy_ = -1;
  int bx_ = -1, by_ = -1;
  std::optional<Cell> carrying_;
  int steps_ = 0;
  bool done_ = false;
  std::optional<Action> last_action_;
};

}  // namespace leco
