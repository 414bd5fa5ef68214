#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "amoesim/config.hpp"
#include "amoesim/trace.hpp"

namespace amoesim {

/// Half-open measurement interval [start, end).
struct Window {
  SimTime start = 0;
  SimTime end = 0;
  double seconds() const { return ns_to_seconds(end - start); }
  bool contains(SimTime t) const { return t >= start && t < end; }
};

Window steady_window(const SimTrace& trace);

struct ItlStats {
  std::size_t samples = 0;
  double mean_ms = 0;
  double median_ms = 0;
  double p99_ms = 0;  // nearest rank
  bool empty() const { return samples == 0; }
};

/// Gaps between consecutive token times of each request; a gap belongs to the
/// window when its later token does.
ItlStats compute_itl(const std::vector<RequestRecord>& ledger, const Window& window);
ItlStats itl_from_samples(std::vector<SimTime> gaps_ns);

/// Token emissions inside the window per second. 0 for an empty window.
double compute_throughput(const std::vector<RequestRecord>& ledger, const Window& window);

/// Fraction of the window covered by executions on `gpu`.
double compute_busy_fraction(const SimTrace& trace, int gpu, const Window& window);
/// Fraction of the window with no execution on `gpu`, summed from the gaps
/// between executions.
double compute_stall(const SimTrace& trace, int gpu, const Window& window);

struct RatePoint {
  double t_s = 0;
  double arrival_rate = 0;
  double completion_rate = 0;
};

std::vector<RatePoint> rate_series(const SimTrace& trace, SimTime bin);

struct SummaryStats {
  std::string mode;
  std::string policy;
  int top_k = 1;
  double input_rate = 0;
  double throughput_tokens_per_s = 0;
  ItlStats itl;
  std::vector<double> busy_fraction;   // per GPU
  std::vector<double> stall_fraction;  // per GPU
  double mean_batch_attention = 0;
  double mean_batch_expert = 0;
  double mean_batch_sampler = 0;
  double expert_stall_mean = 0;     // expert or colocated GPUs
  double attention_stall_mean = 0;  // attention or colocated GPUs
  double arrival_rate_window = 0;
  double completion_rate_window = 0;
  std::int64_t arrived = 0;
  std::int64_t completed = 0;
};

SummaryStats summarize(const SimTrace& trace);

/// Executed batch-size counts per layer kind over the whole run.
std::map<std::pair<LayerKind, std::int64_t>, std::int64_t> batch_histogram(const SimTrace& trace);

struct QueueDelayCheck {
  std::int64_t integrated_ns = 0;  // area under the queue_depth step functions
  std::int64_t reported_ns = 0;    // sum of per-execution queue delays
  std::vector<std::string> mismatches;  // per queue
  bool consistent() const { return integrated_ns == reported_ns && mismatches.empty(); }
};

/// Integrates each (gpu, layer) depth series up to the trace end and compares
/// it with the delays the engine charged to that queue's executions. Exact for
/// runs that end with every queue empty.
QueueDelayCheck check_queue_delays(const SimTrace& trace);

std::string summary_header();
std::string summary_row(const SummaryStats& s);

/// Writes executions.csv, transfers.csv, requests.csv, tokens.csv,
/// queue_depth.csv, gpus.csv, audit.csv, run.csv, rates.csv, batch_hist.csv
/// and summary.csv into `dir`, creating it if needed.
void emit_csv(const SimTrace& trace, const std::filesystem::path& dir);

/// Reads back a directory written by emit_csv.
SimTrace load_trace(const std::filesystem::path& dir);

struct SweepPoint {
  double rate = 0;
  SummaryStats stats;
  std::filesystem::path dir;
};

/// One run per rate, each emitted to dir/rate_<r>; results follow `rates`
/// order regardless of the worker count.
std::vector<SweepPoint> run_sweep(const SimConfig& base, const std::vector<double>& rates,
                                  const std::filesystem::path& dir, unsigned threads);

std::string format_double(double v);

}  // namespace amoesim
