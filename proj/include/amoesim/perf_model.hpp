#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "amoesim/core.hpp"

namespace amoesim {

enum class Stage : std::uint8_t { Schedule, PageTable, Pre, Exec, Post };
constexpr std::size_t kNumStages = 5;

/// Affine latency model for one layer kind:
///   fixed_ns + per_token_ns * batch + per_context_ns * total_context.
/// When `table` is non-empty it replaces fixed + per_token with a piecewise
/// linear curve over batch size (points sorted by batch, extrapolated from the
/// last segment).
struct LayerCostParams {
  double fixed_ns = 0;
  double per_token_ns = 0;
  double per_context_ns = 0;
  std::array<double, kNumStages> stage_split{0.1, 0.0, 0.1, 0.7, 0.1};
  std::vector<std::pair<std::int64_t, double>> table;
};

struct PerfParams {
  LayerCostParams attention{200'000, 15'000, 50, {0.04, 0.25, 0.08, 0.45, 0.18}, {}};
  LayerCostParams expert{180'000, 40'000, 0, {0.04, 0.0, 0.06, 0.85, 0.05}, {}};
  LayerCostParams sampler{50'000, 5'000, 0, {0.10, 0.0, 0.10, 0.70, 0.10}, {}};

  const LayerCostParams& of(LayerKind kind) const;
  LayerCostParams& of(LayerKind kind);
};

/// Returns violations of the parameter invariants (non-negative costs,
/// stage splits summing to 1, monotone lookup tables).
std::vector<std::string> validate_perf(const PerfParams& perf);

/// Execution time in ns, rounded up. Throws std::invalid_argument for an
/// empty batch. The context term applies to attention layers only.
SimTime exec_time(LayerKind kind, std::int64_t batch_size, std::int64_t total_context, const PerfParams& perf);

/// fixed_ns attributed to each execution stage, for trace annotation.
std::array<double, kNumStages> stage_breakdown(LayerKind kind, const PerfParams& perf);

struct TransferTime {
  SimTime phase1 = 0;  // metadata message on the sender's CPU queue
  SimTime phase2 = 0;  // bulk payload: propagation + serialization
  SimTime total() const { return phase1 + phase2; }
};

TransferTime transfer_time(std::int64_t bytes, const LinkParams& link);

std::int64_t batch_payload_bytes(std::int64_t tokens, const ModelConfig& model);

}  // namespace amoesim
