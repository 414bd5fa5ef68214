#include "amoesim/workload.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace amoesim {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Rng Rng::stream(std::uint64_t seed, std::uint64_t tag) {
  return Rng(splitmix64(seed ^ splitmix64(tag)));
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t x;
  do {
    x = engine_();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x % span);
}

WorkloadSpec WorkloadSpec::short_preset() {
  WorkloadSpec w;
  w.input_min = 30;
  w.input_max = 70;
  w.output_min = 70;
  w.output_max = 130;
  return w;
}

WorkloadSpec WorkloadSpec::medium_preset() { return WorkloadSpec{}; }

WorkloadSpec WorkloadSpec::reasonable_preset() {
  WorkloadSpec w;
  w.input_min = 100;
  w.input_max = 300;
  w.output_min = 100;
  w.output_max = 500;
  return w;
}

std::vector<Arrival> gen_arrivals(const WorkloadSpec& spec) {
  std::vector<Arrival> out;
  if (spec.duration_s <= 0 || spec.arrival_rate <= 0) return out;
  Rng rng = Rng::stream(spec.seed, 0xA001);
  const double horizon = spec.duration_s;
  double t = 0.0;
  for (;;) {
    t += rng.exponential(spec.arrival_rate);
    if (t >= horizon) break;
    Arrival a;
    a.time = static_cast<SimTime>(std::ceil(t * static_cast<double>(kNsPerSec)));
    a.input_len = static_cast<int>(rng.uniform_int(spec.input_min, spec.input_max));
    a.output_len = static_cast<int>(rng.uniform_int(spec.output_min, spec.output_max));
    out.push_back(a);
  }
  return out;
}

std::vector<double> expert_probs(const SkewSpec& skew, int num_experts) {
  std::vector<double> p(static_cast<std::size_t>(std::max(num_experts, 0)));
  if (p.empty()) return p;
  if (skew.kind == SkewKind::Uniform || skew.lambda == 0.0) {
    std::fill(p.begin(), p.end(), 1.0 / num_experts);
    return p;
  }
  for (int i = 0; i < num_experts; ++i) p[static_cast<std::size_t>(i)] = std::exp(-skew.lambda * i);
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= total;
  return p;
}

std::vector<std::vector<double>> block_expert_probs(const SkewSpec& skew, int num_experts, int num_blocks,
                                                    Rng& rng) {
  const auto base = expert_probs(skew, num_experts);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(num_blocks), base);
  if (!skew.per_block_shuffle) return out;
  // Each run of num_experts consecutive blocks rotates one random
  // permutation, so every expert holds every popularity rank once per run.
  const auto n = static_cast<std::size_t>(num_experts);
  std::vector<int> perm(n);
  for (std::size_t b = 0; b < out.size(); ++b) {
    const std::size_t shift = b % n;
    if (shift == 0) {
      std::iota(perm.begin(), perm.end(), 0);
      // Fisher-Yates with the deterministic integer draw.
      for (int i = num_experts - 1; i > 0; --i) {
        auto j = static_cast<std::size_t>(rng.uniform_int(0, i));
        std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
      }
    }
    for (std::size_t rank = 0; rank < n; ++rank) {
      out[b][static_cast<std::size_t>(perm[(rank + shift) % n])] = base[rank];
    }
  }
  return out;
}

RouteResult route_token(Rng& rng, std::span<const double> probs, int top_k) {
  const int n = static_cast<int>(probs.size());
  RouteResult r;
  r.experts.reserve(static_cast<std::size_t>(top_k));
  r.weights.reserve(static_cast<std::size_t>(top_k));

  if (top_k == 1) {
    // Fast path: one categorical draw.
    double u = rng.uniform01();
    int pick = n - 1;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += probs[static_cast<std::size_t>(i)];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    // Never land on a zero-probability tail through rounding.
    while (pick > 0 && probs[static_cast<std::size_t>(pick)] <= 0.0) --pick;
    r.experts.push_back(pick);
    r.weights.push_back(1.0);
    return r;
  }

  std::vector<char> taken(static_cast<std::size_t>(n), 0);
  double remaining = std::accumulate(probs.begin(), probs.end(), 0.0);
  for (int k = 0; k < top_k && k < n; ++k) {
    int pick = -1;
    if (remaining > 1e-15) {
      double u = rng.uniform01() * remaining;
      double acc = 0.0;
      int last_positive = -1;
      for (int i = 0; i < n; ++i) {
        if (taken[static_cast<std::size_t>(i)] || probs[static_cast<std::size_t>(i)] <= 0.0) continue;
        last_positive = i;
        acc += probs[static_cast<std::size_t>(i)];
        if (u < acc) {
          pick = i;
          break;
        }
      }
      if (pick < 0) pick = last_positive;
    }
    if (pick < 0) {
      // Only zero-mass experts remain: pick uniformly among them.
      std::vector<int> rest;
      for (int i = 0; i < n; ++i) {
        if (!taken[static_cast<std::size_t>(i)]) rest.push_back(i);
      }
      pick = rest[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(rest.size()) - 1))];
    }
    taken[static_cast<std::size_t>(pick)] = 1;
    remaining = std::max(0.0, remaining - probs[static_cast<std::size_t>(pick)]);
    r.experts.push_back(pick);
    r.weights.push_back(rng.uniform_open_closed());
  }
  const double wsum = std::accumulate(r.weights.begin(), r.weights.end(), 0.0);
  for (auto& w : r.weights) w /= wsum;
  return r;
}

int assign_dp_rank(std::span<const std::int64_t> kv_free) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(kv_free.size()); ++i) {
    if (kv_free[static_cast<std::size_t>(i)] > kv_free[static_cast<std::size_t>(best)]) best = i;
  }
  return best;
}

std::vector<AdmissionQueue::Admitted> AdmissionQueue::drain(std::span<std::int64_t> kv_free) {
  std::vector<Admitted> out;
  while (!waiting_.empty() && !kv_free.empty()) {
    const auto& head = waiting_.front();
    const int rank = assign_dp_rank(kv_free);
    if (kv_free[static_cast<std::size_t>(rank)] < head.need) break;
    kv_free[static_cast<std::size_t>(rank)] -= head.need;
    out.push_back({head.id, rank});
    waiting_.pop_front();
  }
  return out;
}

}  // namespace amoesim
