#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "amoesim/core.hpp"
#include "amoesim/engine.hpp"
#include "amoesim/perf_model.hpp"
#include "amoesim/trace.hpp"
#include "amoesim/workload.hpp"

namespace amoesim {

/// Everything one simulation run needs.
struct SimConfig {
  ModelConfig model;
  ClusterConfig cluster;
  WorkloadSpec workload;
  SkewSpec skew;
  SchedulerPolicy policy;
  PerfParams perf;
  SimMode mode = SimMode::AEP;
  double horizon_s = 0;  // 0: twice the arrival duration
  std::uint64_t seed = 7;  // routing / shuffle stream
  double window_lo = 0.2;
  double window_hi = 0.9;
  bool record_queue_depth = true;

  SimTime horizon_ns() const;
};

/// Parses an INI-style file with sections [model] [cluster] [workload] [skew]
/// [scheduler] [perf] [perf.links] [sim]. Unknown sections or keys raise
/// ConfigError naming the offending key. Missing keys keep their defaults.
SimConfig load_config(const std::string& path);
SimConfig parse_config(const std::string& text);

/// Applies one "section.key=value" override.
void apply_override(SimConfig& cfg, const std::string& assignment);
void set_config_value(SimConfig& cfg, const std::string& section, const std::string& key, const std::string& value);

/// Applies AMOESIM_SEED, if set, to both the workload and routing seeds.
void apply_env_overrides(SimConfig& cfg);

/// Serializes the configuration back to the INI form accepted by parse_config.
std::string dump_config(const SimConfig& cfg);

/// Combined model/cluster/workload/perf/policy validation.
std::vector<std::string> validate_sim_config(const SimConfig& cfg);

}  // namespace amoesim
