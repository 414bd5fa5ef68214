#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "amoesim/core.hpp"

namespace amoesim {

/// Deterministic random source. The engine is specified by the standard;
/// the transforms below are written out so streams do not depend on the
/// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Independent stream derived from a base seed and a stream tag.
  static Rng stream(std::uint64_t seed, std::uint64_t tag);

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform in (0, 1].
  double uniform_open_closed() { return 1.0 - uniform01(); }
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Exponential with the given rate (mean 1/rate).
  double exponential(double rate) { return -std::log(uniform_open_closed()) / rate; }

 private:
  std::mt19937_64 engine_;
};

struct WorkloadSpec {
  double arrival_rate = 100.0;  // requests per second
  int input_min = 50;
  int input_max = 150;
  int output_min = 50;
  int output_max = 250;
  double duration_s = 10.0;
  std::uint64_t seed = 42;

  static WorkloadSpec short_preset();
  static WorkloadSpec medium_preset();
  static WorkloadSpec reasonable_preset();
};

enum class SkewKind { Uniform, Exponential };

struct SkewSpec {
  SkewKind kind = SkewKind::Exponential;
  double lambda = 0.41;
  bool per_block_shuffle = true;
};

struct Arrival {
  SimTime time = 0;
  int input_len = 0;
  int output_len = 0;
};

std::vector<Arrival> gen_arrivals(const WorkloadSpec& spec);

/// p_i proportional to exp(-lambda * i); uniform for SkewKind::Uniform or lambda == 0.
std::vector<double> expert_probs(const SkewSpec& skew, int num_experts);

/// Routing probabilities per block. With per_block_shuffle the expert holding
/// each popularity rank changes from block to block: consecutive runs of
/// num_experts blocks rotate a fresh random permutation, which keeps every
/// expert's load summed over a run equal.
std::vector<std::vector<double>> block_expert_probs(const SkewSpec& skew, int num_experts, int num_blocks,
                                                    Rng& rng);

struct RouteResult {
  std::vector<int> experts;
  std::vector<double> weights;  // sum to 1
};

/// Draws top_k distinct experts without replacement, proportional to probs.
RouteResult route_token(Rng& rng, std::span<const double> probs, int top_k);

/// Index of the rank with the most free KV slots; ties go to the lowest index.
int assign_dp_rank(std::span<const std::int64_t> kv_free);

/// FIFO admission queue for requests that cannot yet be bound to a DP rank.
/// The head blocks later requests until it fits.
class AdmissionQueue {
 public:
  struct Admitted {
    RequestId request_id;
    int dp_rank;
  };

  void push(RequestId id, std::int64_t kv_need) { waiting_.push_back({id, kv_need}); }

  /// Admits from the head while the best rank can hold the head's full
  /// input+output reservation. kv_free is debited for every admission.
  std::vector<Admitted> drain(std::span<std::int64_t> kv_free);

  std::size_t size() const { return waiting_.size(); }
  bool empty() const { return waiting_.empty(); }

 private:
  struct Waiting {
    RequestId id;
    std::int64_t need;
  };
  std::deque<Waiting> waiting_;
};

}  // namespace amoesim
