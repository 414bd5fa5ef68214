#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "amoesim/config.hpp"
#include "amoesim/trace.hpp"

namespace amoesim {

enum class EventKind : std::uint8_t { RequestArrival, Phase1Arrive, Phase2Complete, ExecDone };

struct SimEvent {
  SimTime time = 0;
  std::uint64_t seq = 0;
  EventKind kind = EventKind::ExecDone;
  int index = 0;  // request index, transfer index, or GPU, by kind
};

/// Later-first comparator so std::priority_queue pops the smallest (time, seq).
struct EventAfter {
  bool operator()(const SimEvent& a, const SimEvent& b) const {
    if (a.time != b.time) return a.time > b.time;
    return a.seq > b.seq;
  }
};

/// The event heap ran dry while tokens were still waiting in queues or pools.
class DeadlockError : public std::runtime_error {
 public:
  DeadlockError(const std::string& what, std::vector<std::string> stuck)
      : std::runtime_error(what), stuck_(std::move(stuck)) {}
  const std::vector<std::string>& stuck() const { return stuck_; }

 private:
  std::vector<std::string> stuck_;
};

struct RunOptions {
  /// Test hook: the transfer with this issue ordinal (0-based, remote
  /// transfers only) is lost and never reaches its destination.
  std::optional<std::int64_t> drop_transfer_seq;
};

/// Runs cfg.mode. Throws ConfigError when validation fails.
SimTrace run(const SimConfig& cfg, const RunOptions& options = {});

/// Event-driven asynchronous expert parallelism.
SimTrace run_aep(const SimConfig& cfg, const RunOptions& options = {});

/// Iteration-locked expert parallelism over all attention_gpus + expert_gpus
/// GPUs. Every GPU is one attention DP rank and hosts experts e with
/// e mod G == gpu; total KV capacity matches the AEP cluster.
SimTrace run_sync_baseline(const SimConfig& cfg);

struct AuditReport {
  std::vector<std::string> violations;
  std::int64_t requests_checked = 0;
  std::int64_t merges_checked = 0;
  bool ok() const { return violations.empty(); }
};

/// Token conservation, merge arity, pool emptiness, KV accounting and token
/// time monotonicity over a finished trace.
AuditReport drain_check(const SimTrace& trace);

}  // namespace amoesim
