#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "amoesim/core.hpp"
#include "amoesim/perf_model.hpp"
#include "amoesim/workload.hpp"

namespace amoesim {

/// A token reached a runtime that does not host its target layer.
class RoutingFault : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct QueuedToken {
  TokenMeta token;
  SimTime enqueued = 0;
};

/// Per-layer FIFO of tokens awaiting execution.
struct MicroQueue {
  LayerId layer_id;
  std::deque<QueuedToken> tokens;

  std::size_t depth() const { return tokens.size(); }
};

/// Holds top-K duplicates keyed by <request, layer> until all K inputs arrive.
class TokenPool {
 public:
  struct Merge {
    TokenMeta token;
    int legs = 0;
  };

  /// Returns the merged token once `expected` legs have been received.
  std::optional<Merge> add(TokenMeta leg, int expected);

  std::size_t pending() const { return pending_.size(); }
  bool empty() const { return pending_.empty(); }
  std::vector<std::pair<RequestId, LayerId>> keys() const;

 private:
  struct Partial {
    TokenMeta token;
    int received = 0;
  };
  std::map<std::pair<RequestId, LayerId>, Partial> pending_;
};

enum class PolicyKind { MTFS, FLFS, Defrag };

const char* to_string(PolicyKind kind);

struct SchedulerPolicy {
  PolicyKind kind = PolicyKind::Defrag;
  int lookahead_depth = 4;
  double weight_decay = 0.9;
  /// Divisor of the lookahead token totals; 0 means the number of queues the
  /// GPU hosts per stage.
  int lookahead_divisor = 0;
  /// Largest batch drained from one queue; 0 means the whole queue.
  std::size_t max_batch = 0;
};

std::vector<std::string> validate_policy(const SchedulerPolicy& policy);

/// Queue occupancy as seen by the scheduler: one entry per hosted layer.
struct QueueLoad {
  LayerId layer;
  std::size_t depth = 0;
};

/// Lookahead-scored layer selection over a set of hosted queues.
///
/// Stages are blocks, numbered by LayerId::block, and wrap modulo
/// `num_stages`. For each stage b the lookahead is
///   sum_{k=1..W} (tokens queued at stage (b+k) mod num_stages / divisor) * delta^k
/// and a non-empty queue scores lookahead(b) + depth. Returns the highest
/// score; ties go to the smallest LayerId. `loads` must be sorted by layer.
std::optional<LayerId> defrag_select(std::span<const QueueLoad> loads, int num_stages, double divisor,
                                     int lookahead_depth, double weight_decay);

/// Layers executed in one step, drained from one queue.
struct ExecutionBatch {
  int gpu = -1;
  LayerId layer;
  std::vector<TokenMeta> tokens;
  SimTime start = 0;
  SimTime queue_delay_sum = 0;
  std::int64_t total_context = 0;
  std::int64_t kv_allocated = 0;
};

/// One simulated GPU: receptor, scheduler, executor state.
class RuntimeState {
 public:
  RuntimeState(int gpu_id, std::vector<LayerId> hosted, const ModelConfig& model, std::int64_t kv_capacity);

  int gpu_id() const { return gpu_id_; }
  const std::vector<LayerId>& hosted() const { return hosted_; }
  bool hosts(const LayerId& id) const { return index_.count(id) != 0; }
  bool hosts_sampler() const { return hosts_sampler_; }

  /// Receptor. Tokens needing more than one input (top-K merges into
  /// attention or sampler) go through the token pool; ready tokens are
  /// appended to their queue stamped with `now`. Throws RoutingFault for a
  /// layer this runtime does not host. Returns the number of pool merges
  /// completed, each of which consumed `expected_legs` inputs.
  struct IngestResult {
    std::size_t enqueued = 0;
    std::vector<std::pair<RequestId, int>> merges;  // request, legs consumed
  };
  IngestResult ingest(std::vector<TokenMeta> batch, SimTime now);

  std::optional<LayerId> schedule(const SchedulerPolicy& policy) const;
  std::optional<LayerId> schedule_mtfs() const;
  std::optional<LayerId> schedule_flfs() const;
  std::optional<LayerId> schedule_defrag(const SchedulerPolicy& policy) const;

  /// Drains the selected queue (up to max_batch) into one batch and charges
  /// KV slots for block-0 attention. Throws std::logic_error on an empty
  /// queue or a KV overflow.
  ExecutionBatch form_batch(const LayerId& layer, SimTime now, std::size_t max_batch = 0);

  const MicroQueue& queue(const LayerId& id) const;
  std::size_t queue_depth(const LayerId& id) const { return queue(id).depth(); }
  std::size_t queued_tokens() const { return queued_total_; }
  std::vector<QueueLoad> loads() const;

  const TokenPool& pool() const { return pool_; }

  // KV slot accounting (attention GPUs).
  std::int64_t kv_capacity() const { return kv_capacity_; }
  std::int64_t kv_used() const { return kv_used_; }
  std::int64_t kv_reserved() const { return kv_reserved_; }
  std::int64_t kv_free() const { return kv_capacity_ - kv_reserved_; }
  void kv_admit(RequestId id, std::int64_t prompt_slots, std::int64_t reservation);
  void kv_release(RequestId id);
  const std::unordered_map<RequestId, std::int64_t>& block_table() const { return block_table_; }

  bool busy() const { return busy_; }
  SimTime busy_until() const { return busy_until_; }
  void mark_busy(SimTime until);
  void mark_idle() { busy_ = false; }

 private:
  MicroQueue& queue_mut(const LayerId& id);

  int gpu_id_;
  int num_blocks_;
  int num_experts_;
  int top_k_;
  std::vector<LayerId> hosted_;  // sorted
  std::map<LayerId, std::size_t> index_;
  std::vector<MicroQueue> queues_;
  std::size_t queued_total_ = 0;
  bool hosts_sampler_ = false;
  TokenPool pool_;

  std::int64_t kv_capacity_ = 0;
  std::int64_t kv_used_ = 0;
  std::int64_t kv_reserved_ = 0;
  std::unordered_map<RequestId, std::int64_t> block_table_;
  std::unordered_map<RequestId, std::int64_t> reservations_;

  bool busy_ = false;
  SimTime busy_until_ = 0;
};

/// Outbound token batch for one destination GPU.
struct Outbound {
  int dst_gpu = -1;
  std::vector<TokenMeta> tokens;
};

struct DispatchResult {
  std::vector<Outbound> outbound;  // ordered by destination GPU
  std::vector<RequestId> completed;
  std::size_t emitted = 0;
};

/// Relabels executed tokens with their next layer and groups them by
/// destination (step 4 of the runtime pipeline).
class Dispatcher {
 public:
  Dispatcher(const ModelConfig& model, const Placement& placement, std::vector<std::vector<double>> block_probs,
             Rng routing_rng);

  /// `requests` resolves a request id; unknown ids are a hard fault.
  DispatchResult dispatch(const ExecutionBatch& batch, std::unordered_map<RequestId, RequestState>& requests,
                          SimTime now);

  const std::vector<double>& probs(int block) const { return block_probs_[static_cast<std::size_t>(block)]; }

 private:
  const ModelConfig& model_;
  const Placement& placement_;
  std::vector<std::vector<double>> block_probs_;
  Rng rng_;
  std::int64_t token_bytes_;
};

}  // namespace amoesim
