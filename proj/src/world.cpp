#include "rmmnav/world.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <tuple>

#include "rmmnav/common.hpp"

namespace rmmnav {

namespace {

constexpr double kQuantum = 1.0 / 1048576.0;  // 2^-20 m
constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr std::uint64_t kProjectionSeed = 0x7265736e6574ULL;

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[std::max(a, b)] = std::min(a, b);
    return true;
  }
};

double hash_unit(std::uint64_t h) { return static_cast<double>(mix64(h) >> 11) * 0x1.0p-53; }

}  // namespace

std::string_view action_name(Action a) {
  switch (a) {
    case Action::Forward: return "forward";
    case Action::Left: return "left";
    case Action::Right: return "right";
    case Action::Stop: return "stop";
  }
  throw InternalError("action_name: bad action");
}

Action action_from_name(std::string_view name) {
  for (Action a : kAllActions) {
    if (action_name(a) == name) return a;
  }
  throw ConfigError("unknown action '" + std::string(name) + "'");
}

std::string_view heading_word(int heading) {
  static constexpr std::array<std::string_view, 4> kWords = {"north", "east", "south", "west"};
  return kWords.at(static_cast<std::size_t>(heading));
}

double edge_length(const WorldNode& a, const WorldNode& b) {
  const double raw = std::hypot(b.x - a.x, b.y - a.y);
  return std::max(1.0, std::round(raw / kQuantum)) * kQuantum;
}

int direction_bucket(double dx, double dy) {
  // Sector centred on each compass axis; north is +y.
  const double angle = std::atan2(dx, dy);  // 0 at north, clockwise positive
  int b = static_cast<int>(std::lround(angle / (M_PI / 2.0)));
  return ((b % 4) + 4) % 4;
}

World::World(std::uint64_t seed, std::vector<WorldNode> nodes, std::vector<std::pair<NodeId, NodeId>> edges,
             std::vector<Room> rooms, std::string target_object, RoomId goal_room,
             std::vector<RoomId> distractor_rooms)
    : seed_(seed),
      nodes_(std::move(nodes)),
      edges_(std::move(edges)),
      rooms_(std::move(rooms)),
      target_object_(std::move(target_object)),
      goal_room_(goal_room),
      distractor_rooms_(std::move(distractor_rooms)) {
  const int n = num_nodes();
  if (n < 1) throw ConfigError("world has no nodes");
  for (int i = 0; i < n; ++i) {
    if (nodes_[i].id != i) throw ConfigError("world node ids must be 0..n-1 in order");
    if (nodes_[i].room < 0 || nodes_[i].room >= static_cast<int>(rooms_.size()))
      throw ConfigError("node " + std::to_string(i) + " references unknown room");
  }
  for (std::size_t r = 0; r < rooms_.size(); ++r) {
    if (rooms_[r].id != static_cast<RoomId>(r)) throw ConfigError("room ids must be 0..k-1 in order");
  }
  std::vector<int> room_count(rooms_.size(), 0);
  for (const auto& node : nodes_) ++room_count[node.room];
  if (std::ranges::find(room_count, 0) != room_count.end()) throw ConfigError("world has an empty room");
  if (goal_room_ < 0 || goal_room_ >= static_cast<int>(rooms_.size())) throw ConfigError("invalid goal_room");
  for (RoomId r : distractor_rooms_) {
    if (r < 0 || r >= static_cast<int>(rooms_.size()) || r == goal_room_)
      throw ConfigError("invalid distractor room");
  }

  adjacency_.assign(n, {});
  for (auto [a, b] : edges_) {
    if (!has_node(a) || !has_node(b) || a == b) throw ConfigError("invalid edge");
    const double len = edge_length(nodes_[a], nodes_[b]);
    adjacency_[a].push_back({b, len, direction_bucket(nodes_[b].x - nodes_[a].x, nodes_[b].y - nodes_[a].y)});
    adjacency_[b].push_back({a, len, direction_bucket(nodes_[a].x - nodes_[b].x, nodes_[a].y - nodes_[b].y)});
  }
  for (auto& adj : adjacency_) {
    std::ranges::sort(adj, {}, &Neighbor::node);
    if (std::ranges::adjacent_find(adj, {}, &Neighbor::node) != adj.end())
      throw ConfigError("duplicate edge");
  }

  // All-pairs Dijkstra; ties in the frontier pop the smaller NodeId first.
  dist_.assign(static_cast<std::size_t>(n) * n, kInf);
  using Item = std::pair<double, NodeId>;
  for (int src = 0; src < n; ++src) {
    double* row = &dist_[static_cast<std::size_t>(src) * n];
    std::priority_queue<Item, std::vector<Item>, std::greater<>> frontier;
    row[src] = 0.0;
    frontier.emplace(0.0, src);
    while (!frontier.empty()) {
      auto [d, u] = frontier.top();
      frontier.pop();
      if (d > row[u]) continue;
      for (const auto& nb : adjacency_[u]) {
        const double nd = d + nb.length;
        if (nd < row[nb.node]) {
          row[nb.node] = nd;
          frontier.emplace(nd, nb.node);
        }
      }
    }
    for (int t = 0; t < n; ++t) {
      if (row[t] == kInf) throw ConfigError("world graph is not connected");
    }
  }

  goal_node_ = -1;
  for (const auto& node : nodes_) {
    if (node.room == goal_room_) {
      goal_node_ = node.id;
      break;
    }
  }
}

bool World::room_has_target(RoomId r) const {
  return r == goal_room_ || std::ranges::find(distractor_rooms_, r) != distractor_rooms_.end();
}

double World::distance(NodeId a, NodeId b) const {
  if (!has_node(a) || !has_node(b)) throw PreconditionError("distance: node out of range");
  return dist_[static_cast<std::size_t>(a) * nodes_.size() + b];
}

std::optional<NodeId> World::forward_neighbor(NodeId node, int heading) const {
  std::optional<NodeId> best;
  double best_len = kInf;
  for (const auto& nb : adjacency_.at(node)) {
    if (nb.bucket == heading && nb.length < best_len) {
      best = nb.node;
      best_len = nb.length;
    }
  }
  return best;
}

bool World::operator==(const World& other) const {
  return seed_ == other.seed_ && nodes_ == other.nodes_ && edges_ == other.edges_ && rooms_ == other.rooms_ &&
         target_object_ == other.target_object_ && goal_room_ == other.goal_room_ &&
         distractor_rooms_ == other.distractor_rooms_;
}

World generate_world(std::uint64_t seed, const WorldParams& params) {
  if (params.num_rooms < 2) throw ConfigError("num_rooms must be >= 2");
  if (params.nodes_per_room < 1) throw ConfigError("nodes_per_room must be >= 1");
  if (params.num_rooms > static_cast<int>(kRoomLabels.size()))
    throw ConfigError("num_rooms exceeds available room labels (" + std::to_string(kRoomLabels.size()) + ")");
  if (params.object_vocab < 1 || params.object_vocab > static_cast<int>(kObjectWords.size()))
    throw ConfigError("object_vocab must be in [1, " + std::to_string(kObjectWords.size()) + "]");

  Rng rng(derive_seed(seed, 0x776f726c64ULL));
  const int R = params.num_rooms;
  const int per_room = params.nodes_per_room;
  const int grid_w = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(R))));
  const int patch = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(per_room))));
  const int pitch = patch + 1;

  // Rooms fill grid cells row-major (always a connected cell set); which
  // room lands in which cell, and its label, is shuffled.
  std::vector<int> cell_of_room(R);
  std::iota(cell_of_room.begin(), cell_of_room.end(), 0);
  for (int i = R - 1; i > 0; --i) std::swap(cell_of_room[i], cell_of_room[rng.below(i + 1)]);
  std::vector<int> label_idx(kRoomLabels.size());
  std::iota(label_idx.begin(), label_idx.end(), 0);
  for (int i = static_cast<int>(label_idx.size()) - 1; i > 0; --i) std::swap(label_idx[i], label_idx[rng.below(i + 1)]);

  std::vector<Room> rooms;
  std::vector<WorldNode> nodes;
  std::vector<std::pair<NodeId, NodeId>> edges;
  std::vector<int> room_first(R);
  for (int r = 0; r < R; ++r) {
    rooms.push_back({r, std::string(kRoomLabels[label_idx[r]])});
    room_first[r] = static_cast<int>(nodes.size());
    const int cx = cell_of_room[r] % grid_w;
    const int cy = cell_of_room[r] / grid_w;
    for (int j = 0; j < per_room; ++j) {
      const double jx = rng.uniform(-0.15, 0.15);
      const double jy = rng.uniform(-0.15, 0.15);
      nodes.push_back({static_cast<NodeId>(nodes.size()), cx * pitch + (j % patch) + jx,
                       cy * pitch + (j / patch) + jy, r});
    }
    for (int j = 0; j < per_room; ++j) {
      const int id = room_first[r] + j;
      if ((j % patch) + 1 < patch && j + 1 < per_room) edges.emplace_back(id, id + 1);
      if (j + patch < per_room) edges.emplace_back(id, id + patch);
    }
  }

  // Doors between grid-adjacent rooms: random spanning tree plus extras.
  std::vector<int> room_at_cell(static_cast<std::size_t>(grid_w) * grid_w, -1);
  for (int r = 0; r < R; ++r) room_at_cell[cell_of_room[r]] = r;
  struct Door {
    int from_room, to_room;
    bool horizontal;
  };
  std::vector<Door> doors;
  for (int c = 0; c < R; ++c) {
    const int cx = c % grid_w;
    if (cx + 1 < grid_w && c + 1 < R) doors.push_back({room_at_cell[c], room_at_cell[c + 1], true});
    if (c + grid_w < R) doors.push_back({room_at_cell[c], room_at_cell[c + grid_w], false});
  }
  for (int i = static_cast<int>(doors.size()) - 1; i > 0; --i) std::swap(doors[i], doors[rng.below(i + 1)]);
  UnionFind uf(R);
  const int row0_last = std::min(per_room, patch) - 1;
  const int col0_top = (per_room - 1) / patch;
  for (const Door& d : doors) {
    const bool tree = uf.unite(d.from_room, d.to_room);
    const bool extra = rng.uniform() < 0.35;
    if (!tree && !extra) continue;
    const int a = room_first[d.from_room] + (d.horizontal ? row0_last : col0_top * patch);
    const int b = room_first[d.to_room];
    edges.emplace_back(std::min(a, b), std::max(a, b));
  }
  std::ranges::sort(edges);

  const auto& target = kObjectWords[rng.below(params.object_vocab)];
  std::vector<RoomId> holders;
  for (int r = 0; r < R; ++r) {
    if (rng.uniform() < 0.35) holders.push_back(r);
  }
  if (holders.empty()) holders.push_back(static_cast<RoomId>(rng.below(R)));
  const RoomId goal_room = holders[rng.below(holders.size())];
  std::vector<RoomId> distractors;
  for (RoomId r : holders) {
    if (r != goal_room) distractors.push_back(r);
  }

  return World(seed, std::move(nodes), std::move(edges), std::move(rooms), std::string(target), goal_room,
               std::move(distractors));
}

Pose step(const World& world, const Pose& pose, Action action) {
  switch (action) {
    case Action::Left: return {pose.node, (pose.heading + 3) % 4};
    case Action::Right: return {pose.node, (pose.heading + 1) % 4};
    case Action::Stop: return pose;
    case Action::Forward: {
      auto next = world.forward_neighbor(pose.node, pose.heading);
      return next ? Pose{*next, pose.heading} : pose;
    }
  }
  throw InternalError("step: bad action");
}

std::vector<NodeId> shortest_path(const World& world, NodeId from, NodeId to, int horizon) {
  if (!world.has_node(from) || !world.has_node(to)) throw PreconditionError("shortest_path: node out of range");
  std::vector<NodeId> path;
  NodeId cur = from;
  while (cur != to && (horizon < 0 || static_cast<int>(path.size()) < horizon)) {
    const double remaining = world.distance(cur, to);
    std::optional<NodeId> next;
    for (const auto& nb : world.neighbors(cur)) {  // ascending NodeId
      if (nb.length + world.distance(nb.node, to) == remaining) {
        next = nb.node;
        break;
      }
    }
    if (!next) throw InternalError("shortest_path: no consistent successor");
    path.push_back(*next);
    cur = *next;
  }
  return path;
}

double goal_progress(const World& world, NodeId start, NodeId end, NodeId goal) {
  return world.distance(start, goal) - world.distance(end, goal);
}

Action teacher_action(const World& world, const Pose& pose, NodeId goal) {
  if (pose.node == goal) return Action::Stop;
  const NodeId next = shortest_path(world, pose.node, goal, 1).front();
  int bucket = -1;
  for (const auto& nb : world.neighbors(pose.node)) {
    if (nb.node == next) bucket = nb.bucket;
  }
  const int turn = (bucket - pose.heading + 4) % 4;
  if (turn == 0) return Action::Forward;
  return turn == 3 ? Action::Left : Action::Right;
}

std::vector<float> observation(const World& world, const Pose& pose, int d_img) {
  if (!world.has_node(pose.node) || pose.heading < 0 || pose.heading >= kNumHeadings)
    throw PreconditionError("observation: invalid pose");
  // Content channels: heading(4) | room label(12) | open directions(4) | target in room | bias.
  constexpr int kContent = 4 + static_cast<int>(kRoomLabels.size()) + 4 + 2;
  std::array<float, kContent> content{};
  content[pose.heading] = 1.0f;
  const Room& room = world.room_of(pose.node);
  for (std::size_t i = 0; i < kRoomLabels.size(); ++i) {
    if (kRoomLabels[i] == room.label) content[4 + i] = 1.0f;
  }
  for (const auto& nb : world.neighbors(pose.node)) content[16 + nb.bucket] = 1.0f;
  content[20] = world.room_has_target(room.id) ? 1.0f : 0.0f;
  content[21] = 1.0f;

  std::vector<float> out(d_img);
  const std::uint64_t pose_key = derive_seed(world.seed(), static_cast<std::uint64_t>(pose.node), pose.heading);
  for (int j = 0; j < d_img; ++j) {
    double pre = 0.0;
    for (int i = 0; i < kContent; ++i) {
      if (content[i] != 0.0f) pre += content[i] * (2.0 * hash_unit(derive_seed(kProjectionSeed, i, j)) - 1.0);
    }
    const double noise = 2.0 * hash_unit(derive_seed(pose_key, j)) - 1.0;
    out[j] = static_cast<float>(std::clamp(0.7 * std::tanh(pre) + 0.3 * noise, -1.0, 1.0));
  }
  return out;
}

nlohmann::json world_to_json(const World& world) {
  using nlohmann::json;
  json nodes = json::array();
  for (const auto& n : world.nodes()) nodes.push_back({{"id", n.id}, {"x", n.x}, {"y", n.y}, {"room", n.room}});
  json edges = json::array();
  for (auto [a, b] : world.edges()) edges.push_back({a, b});
  json rooms = json::array();
  for (const auto& r : world.rooms()) rooms.push_back({{"id", r.id}, {"label", r.label}});
  json j;
  j["seed"] = world.seed();
  j["nodes"] = std::move(nodes);
  j["edges"] = std::move(edges);
  j["rooms"] = std::move(rooms);
  j["target_object"] = world.target_object();
  j["goal_room"] = world.goal_room();
  j["distractor_rooms"] = world.distractor_rooms();
  return j;
}

World world_from_json(const nlohmann::json& j) {
  try {
    std::vector<WorldNode> nodes;
    for (const auto& n : j.at("nodes"))
      nodes.push_back({n.at("id").get<NodeId>(), n.at("x").get<double>(), n.at("y").get<double>(),
                       n.at("room").get<RoomId>()});
    std::vector<std::pair<NodeId, NodeId>> edges;
    for (const auto& e : j.at("edges")) edges.emplace_back(e.at(0).get<NodeId>(), e.at(1).get<NodeId>());
    std::vector<Room> rooms;
    for (const auto& r : j.at("rooms")) rooms.push_back({r.at("id").get<RoomId>(), r.at("label").get<std::string>()});
    std::vector<RoomId> distractors;
    if (j.contains("distractor_rooms")) distractors = j.at("distractor_rooms").get<std::vector<RoomId>>();
    return World(j.at("seed").get<std::uint64_t>(), std::move(nodes), std::move(edges), std::move(rooms),
                 j.at("target_object").get<std::string>(), j.at("goal_room").get<RoomId>(), std::move(distractors));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed world json: ") + e.what());
  }
}

}  // namespace rmmnav
