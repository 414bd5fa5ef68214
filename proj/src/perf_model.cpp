#include "amoesim/perf_model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace amoesim {

const LayerCostParams& PerfParams::of(LayerKind kind) const {
  switch (kind) {
    case LayerKind::Attention: return attention;
    case LayerKind::Expert: return expert;
    case LayerKind::Sampler: return sampler;
  }
  return expert;
}

LayerCostParams& PerfParams::of(LayerKind kind) {
  return const_cast<LayerCostParams&>(std::as_const(*this).of(kind));
}

std::vector<std::string> validate_perf(const PerfParams& perf) {
  std::vector<std::string> out;
  for (auto kind : {LayerKind::Attention, LayerKind::Expert, LayerKind::Sampler}) {
    const auto& p = perf.of(kind);
    const std::string name = to_string(kind);
    if (p.fixed_ns < 0 || p.per_token_ns < 0 || p.per_context_ns < 0) {
      out.push_back(name + " cost parameters must be non-negative");
    }
    double split = 0;
    for (double s : p.stage_split) {
      if (s < 0) out.push_back(name + " stage_split entries must be non-negative");
      split += s;
    }
    if (std::abs(split - 1.0) > 1e-9) out.push_back(name + " stage_split must sum to 1");
    for (std::size_t i = 0; i < p.table.size(); ++i) {
      if (p.table[i].first < 1 || p.table[i].second < 0) {
        out.push_back(name + " table points need batch >= 1 and time >= 0");
      }
      if (i > 0 && (p.table[i].first <= p.table[i - 1].first || p.table[i].second < p.table[i - 1].second)) {
        out.push_back(name + " table must be strictly increasing in batch and non-decreasing in time");
      }
    }
  }
  return out;
}

namespace {

double table_lookup(const std::vector<std::pair<std::int64_t, double>>& table, std::int64_t batch) {
  if (table.size() == 1) return table.front().second;
  const auto x = static_cast<double>(batch);
  std::size_t hi = 1;
  while (hi + 1 < table.size() && table[hi].first < batch) ++hi;
  const auto& [x0, y0] = table[hi - 1];
  const auto& [x1, y1] = table[hi];
  const double slope = (y1 - y0) / static_cast<double>(x1 - x0);
  // Clamp below the first point: a smaller batch is never slower.
  if (batch <= x0) return y0;
  return y0 + slope * (x - static_cast<double>(x0));
}

}  // namespace

SimTime exec_time(LayerKind kind, std::int64_t batch_size, std::int64_t total_context, const PerfParams& perf) {
  if (batch_size < 1) throw std::invalid_argument("exec_time: batch_size must be >= 1");
  const auto& p = perf.of(kind);
  double t = p.table.empty() ? p.fixed_ns + p.per_token_ns * static_cast<double>(batch_size)
                             : table_lookup(p.table, batch_size);
  if (kind == LayerKind::Attention) t += p.per_context_ns * static_cast<double>(total_context);
  return static_cast<SimTime>(std::ceil(t));
}

std::array<double, kNumStages> stage_breakdown(LayerKind kind, const PerfParams& perf) {
  const auto& p = perf.of(kind);
  std::array<double, kNumStages> out{};
  for (std::size_t i = 0; i < kNumStages; ++i) out[i] = p.fixed_ns * p.stage_split[i];
  return out;
}

TransferTime transfer_time(std::int64_t bytes, const LinkParams& link) {
  TransferTime t;
  t.phase1 = link.metadata_ns;
  const double wire = std::ceil(static_cast<double>(bytes) * 1e9 / link.bandwidth_bytes_per_s);
  t.phase2 = link.propagation_ns + static_cast<SimTime>(wire);
  return t;
}

std::int64_t batch_payload_bytes(std::int64_t tokens, const ModelConfig& model) {
  return tokens * model.hidden_dim * model.bytes_per_element;
}

}  // namespace amoesim
