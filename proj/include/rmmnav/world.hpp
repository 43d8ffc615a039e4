#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace rmmnav {

using NodeId = int;
using RoomId = int;

enum class Action : std::uint8_t { Forward = 0, Left = 1, Right = 2, Stop = 3 };
inline constexpr int kNumActions = 4;
inline constexpr std::array<Action, kNumActions> kAllActions = {Action::Forward, Action::Left,
                                                                Action::Right, Action::Stop};

std::string_view action_name(Action a);
Action action_from_name(std::string_view name);

/// Compass headings: 0 north (+y), 1 east (+x), 2 south, 3 west.
inline constexpr int kNumHeadings = 4;
std::string_view heading_word(int heading);

struct Pose {
  NodeId node = 0;
  int heading = 0;
  bool operator==(const Pose&) const = default;
};

inline constexpr std::array<std::string_view, 12> kRoomLabels = {
    "kitchen", "bedroom", "bathroom", "hallway", "office", "garage",
    "closet",  "attic",   "lounge",   "pantry",  "studio", "library"};

inline constexpr std::array<std::string_view, 12> kObjectWords = {
    "plant", "lamp", "sofa", "towel", "sink", "bed", "desk", "chair", "mirror", "piano", "clock", "vase"};

struct WorldParams {
  int num_rooms = 6;
  int nodes_per_room = 4;
  int object_vocab = 8;  ///< first k entries of kObjectWords are eligible targets
};

struct WorldNode {
  NodeId id = 0;
  double x = 0.0;
  double y = 0.0;
  RoomId room = 0;
  bool operator==(const WorldNode&) const = default;
};

struct Room {
  RoomId id = 0;
  std::string label;
  bool operator==(const Room&) const = default;
};

struct Neighbor {
  NodeId node;
  double length;
  int bucket;  ///< compass sector of the direction towards `node`
};

/// Immutable navigation graph. Construction validates every invariant and
/// precomputes all-pairs distances, so queries are cheap and thread-safe.
class World {
 public:
  World(std::uint64_t seed, std::vector<WorldNode> nodes, std::vector<std::pair<NodeId, NodeId>> edges,
        std::vector<Room> rooms, std::string target_object, RoomId goal_room,
        std::vector<RoomId> distractor_rooms);

  std::uint64_t seed() const { return seed_; }
  const std::vector<WorldNode>& nodes() const { return nodes_; }
  const std::vector<std::pair<NodeId, NodeId>>& edges() const { return edges_; }
  const std::vector<Room>& rooms() const { return rooms_; }
  const std::string& target_object() const { return target_object_; }
  RoomId goal_room() const { return goal_room_; }
  const std::vector<RoomId>& distractor_rooms() const { return distractor_rooms_; }

  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  bool has_node(NodeId n) const { return n >= 0 && n < num_nodes(); }
  const std::vector<Neighbor>& neighbors(NodeId n) const { return adjacency_.at(n); }
  const Room& room_of(NodeId n) const { return rooms_.at(nodes_.at(n).room); }
  bool room_has_target(RoomId r) const;

  /// Goal location: the lowest-id node of the goal room.
  NodeId goal_node() const { return goal_node_; }

  /// Shortest-path distance in meters (exact, see edge_length).
  double distance(NodeId a, NodeId b) const;

  /// Neighbor reached by Forward from (node, heading), if any.
  std::optional<NodeId> forward_neighbor(NodeId node, int heading) const;

  bool operator==(const World& other) const;

 private:
  std::uint64_t seed_;
  std::vector<WorldNode> nodes_;
  std::vector<std::pair<NodeId, NodeId>> edges_;
  std::vector<Room> rooms_;
  std::string target_object_;
  RoomId goal_room_;
  std::vector<RoomId> distractor_rooms_;
  NodeId goal_node_ = 0;
  std::vector<std::vector<Neighbor>> adjacency_;
  std::vector<double> dist_;  // row-major all-pairs
};

/// Euclidean length quantized to a multiple of 2^-20 m. Sums and differences
/// of such values are exact in double precision at world scale.
double edge_length(const WorldNode& a, const WorldNode& b);

/// Compass sector (0..3) of the vector (dx, dy).
int direction_bucket(double dx, double dy);

World generate_world(std::uint64_t seed, const WorldParams& params);

Pose step(const World& world, const Pose& pose, Action action);

inline constexpr int kUnboundedHorizon = -1;

/// Minimal-length node sequence from `from` to `to`, excluding `from`,
/// truncated to `horizon` nodes when horizon >= 0.
std::vector<NodeId> shortest_path(const World& world, NodeId from, NodeId to, int horizon = kUnboundedHorizon);

double goal_progress(const World& world, NodeId start, NodeId end, NodeId goal);

/// Action a shortest-path follower takes at `pose` when heading to `goal`.
Action teacher_action(const World& world, const Pose& pose, NodeId goal);

inline constexpr int kDefaultImageDim = 64;

/// Deterministic pseudo-visual features in [-1, 1].
std::vector<float> observation(const World& world, const Pose& pose, int d_img = kDefaultImageDim);

nlohmann::json world_to_json(const World& world);
World world_from_json(const nlohmann::json& j);

}  // namespace rmmnav
