#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "amoesim/core.hpp"

namespace amoesim {

enum class SimMode { AEP, SyncEP };

const char* to_string(SimMode mode);

struct ExecutionRecord {
  int gpu = 0;
  LayerId layer;
  std::int64_t batch = 0;
  SimTime start = 0;
  SimTime end = 0;
  SimTime queue_delay_sum = 0;
};

struct TransferRecord {
  int src = 0;
  int dst = 0;
  std::int64_t bytes = 0;
  std::int64_t tokens = 0;
  SimTime issue = 0;
  SimTime phase1_end = 0;
  SimTime phase2_start = 0;
  SimTime phase2_end = 0;
};

/// Per-request ledger entry plus the visit counters used by the audit.
struct RequestRecord {
  RequestId id = 0;
  SimTime arrival = 0;
  std::optional<SimTime> completion;
  int input_len = 0;
  int output_len = 0;
  int dp_rank = -1;
  std::vector<SimTime> token_times;

  std::int64_t attention_visits = 0;
  std::int64_t kv_allocs = 0;  // block-0 attention visits
  std::int64_t expert_legs = 0;
  std::int64_t merges = 0;
  std::int64_t merged_legs = 0;
  std::int64_t bad_merges = 0;  // merges that did not consume exactly top_k legs
  std::int64_t sampler_visits = 0;
};

struct QueueDepthSample {
  SimTime time = 0;
  int gpu = 0;
  LayerId layer;
  std::int64_t depth = 0;
};

struct GpuRecord {
  int gpu = 0;
  std::string role;  // attention | expert | colocated
  int dp_rank = -1;  // rank whose KV lives here, -1 if none
  SimTime busy_ns = 0;
  std::int64_t pool_pending = 0;
  std::int64_t queued = 0;
  std::int64_t kv_used = 0;
  std::int64_t kv_reserved = 0;
  std::int64_t kv_capacity = 0;
};

struct SimTrace {
  SimMode mode = SimMode::AEP;
  std::string policy;  // scheduler name, or "sync" for the baseline
  int num_blocks = 0;
  int num_experts = 0;
  int top_k = 1;
  double arrival_rate = 0;
  SimTime duration = 0;  // arrival horizon
  SimTime end_time = 0;  // last processed instant
  bool drained = false;  // stopped because no work remained
  double window_lo = 0.2;
  double window_hi = 0.9;

  std::vector<ExecutionRecord> executions;
  std::vector<TransferRecord> transfers;
  std::vector<RequestRecord> requests;
  std::vector<QueueDepthSample> queue_depth;
  std::vector<GpuRecord> gpus;

  SimTime window_start() const;
  SimTime window_end() const;
};

}  // namespace amoesim
