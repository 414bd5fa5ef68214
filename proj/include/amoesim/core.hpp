#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/container/small_vector.hpp>

namespace amoesim {

// Simulation time in integer nanoseconds from simulation start.
using SimTime = std::int64_t;
using RequestId = std::int64_t;

constexpr SimTime kNsPerSec = 1'000'000'000;

inline SimTime seconds_to_ns(double s) {
  return static_cast<SimTime>(s * static_cast<double>(kNsPerSec) + 0.5);
}
inline double ns_to_seconds(SimTime t) {
  return static_cast<double>(t) / static_cast<double>(kNsPerSec);
}

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LayerKind : std::uint8_t { Attention = 0, Expert = 1, Sampler = 2 };

const char* to_string(LayerKind kind);

/// Addresses one schedulable layer.
///
/// Attention: (block, attention DP rank). Expert: (block, expert index).
/// Sampler: (num_blocks, DP rank), so the sampler orders after the last block
/// and acts as the final pipeline stage on its attention GPU.
struct LayerId {
  LayerKind kind = LayerKind::Attention;
  int block = 0;
  int slot = 0;

  static constexpr LayerId attention(int block, int rank) { return {LayerKind::Attention, block, rank}; }
  static constexpr LayerId expert(int block, int expert) { return {LayerKind::Expert, block, expert}; }
  static constexpr LayerId sampler(int num_blocks, int rank) { return {LayerKind::Sampler, num_blocks, rank}; }

  // Block-major, then Attention < Expert < Sampler, then slot.
  friend constexpr std::strong_ordering operator<=>(const LayerId& a, const LayerId& b) {
    if (auto c = a.block <=> b.block; c != 0) return c;
    if (auto c = static_cast<int>(a.kind) <=> static_cast<int>(b.kind); c != 0) return c;
    return a.slot <=> b.slot;
  }
  friend constexpr bool operator==(const LayerId&, const LayerId&) = default;
};

/// Compact text form, e.g. "A3.0", "E3.5", "S32.1". Contains no commas.
std::string to_string(const LayerId& id);
std::optional<LayerId> parse_layer_id(const std::string& text);

struct ModelConfig {
  int num_blocks = 32;
  int num_experts = 8;
  int top_k = 1;
  int hidden_dim = 4096;
  int bytes_per_element = 2;
};

/// Unit of scheduling: one token's metadata as it moves between layers.
struct TokenMeta {
  RequestId request_id = 0;
  LayerId layer_id;
  int payload_tensors = 1;
  std::int64_t payload_bytes = 0;
  std::int64_t context_len = 0;
  boost::container::small_vector<double, 2> topk_weights;
};

struct RequestState {
  RequestId request_id = 0;
  int input_len = 0;
  int output_len = 0;
  int generated = 0;
  int dp_rank = -1;
  SimTime arrival_time = 0;
  std::optional<SimTime> completion_time;
  std::vector<SimTime> per_token_times;

  bool admitted() const { return dp_rank >= 0; }
  bool done() const { return completion_time.has_value(); }
  std::int64_t kv_need() const { return static_cast<std::int64_t>(input_len) + output_len; }
};

/// Total map LayerId -> GPU index, stored densely.
class Placement {
 public:
  Placement() = default;
  Placement(const ModelConfig& model, int dp_degree);

  void assign(const LayerId& id, int gpu);
  std::optional<int> find(const LayerId& id) const;
  int at(const LayerId& id) const;

  /// Every addressable layer for this model and DP degree, in total order.
  std::vector<LayerId> domain() const;
  std::vector<LayerId> unmapped() const;
  std::size_t size() const;

  int num_blocks() const { return num_blocks_; }
  int num_experts() const { return num_experts_; }
  int dp_degree() const { return dp_degree_; }

 private:
  const int* slot_ptr(const LayerId& id) const;
  int* slot_ptr(const LayerId& id);

  int num_blocks_ = 0;
  int num_experts_ = 0;
  int dp_degree_ = 0;
  std::vector<int> attention_;  // [block * dp + rank]
  std::vector<int> expert_;     // [block * experts + expert]
  std::vector<int> sampler_;    // [rank]
};

struct LinkParams {
  double bandwidth_bytes_per_s = 600e9;
  SimTime propagation_ns = 2'000;
  SimTime metadata_ns = 20'000;
};

/// GPU indices: attention GPUs are [0, attention_gpus), expert GPUs follow.
struct ClusterConfig {
  int attention_gpus = 4;
  int expert_gpus = 4;
  std::int64_t kv_slots_per_attention_gpu = 200'000;
  std::vector<int> node_of;  // empty: every GPU on node 0
  LinkParams intra_node;
  LinkParams inter_node{12.5e9, 10'000, 20'000};
  std::optional<Placement> placement;  // default placement when unset

  int total_gpus() const { return attention_gpus + expert_gpus; }
  int expert_gpu_index(int ordinal) const { return attention_gpus + ordinal; }
  int node(int gpu) const;
  const LinkParams& link(int src, int dst) const;
};

Placement default_placement(const ModelConfig& model, const ClusterConfig& cluster);

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

ValidationReport validate_config(const ModelConfig& model, const ClusterConfig& cluster);

}  // namespace amoesim
