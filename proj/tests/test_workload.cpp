#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "amoesim/workload.hpp"

using namespace amoesim;

TEST_CASE("exponential skew probabilities") {
  SkewSpec s;
  s.lambda = 0.41;
  auto p = expert_probs(s, 8);
  REQUIRE(p.size() == 8);
  CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  // closed form for the hottest share: (1 - e^-l) / (1 - e^-8l)
  CHECK(p[0] == doctest::Approx((1 - std::exp(-0.41)) / (1 - std::exp(-8 * 0.41))));
  CHECK(p[0] == doctest::Approx(0.35).epsilon(0.01));
  for (int i = 1; i < 8; ++i) CHECK(p[i] / p[i - 1] == doctest::Approx(std::exp(-0.41)));

  s.kind = SkewKind::Uniform;
  for (double v : expert_probs(s, 5)) CHECK(v == doctest::Approx(0.2));
  s.kind = SkewKind::Exponential;
  s.lambda = 0;
  for (double v : expert_probs(s, 4)) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("per-block shuffle permutes ranks and balances each run of blocks") {
  SkewSpec s;
  s.per_block_shuffle = true;
  Rng rng(11);
  const auto base = expert_probs(s, 8);
  auto rows = block_expert_probs(s, 8, 32, rng);
  REQUIRE(rows.size() == 32);
  std::vector<double> total(8, 0.0);
  std::set<int> hottest;
  for (const auto& row : rows) {
    auto sorted = row;
    std::sort(sorted.rbegin(), sorted.rend());
    for (int i = 0; i < 8; ++i) CHECK(sorted[i] == base[i]);
    hottest.insert(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    for (int e = 0; e < 8; ++e) total[e] += row[e];
  }
  CHECK(hottest.size() == 8);
  for (double t : total) CHECK(t == doctest::Approx(4.0));

  s.per_block_shuffle = false;
  for (const auto& row : block_expert_probs(s, 8, 4, rng)) CHECK(row == base);
}

TEST_CASE("top-1 routing frequencies match the distribution") {
  SkewSpec s;
  auto p = expert_probs(s, 8);
  Rng rng(5);
  const int n = 400'000;
  std::vector<int> count(8, 0);
  for (int i = 0; i < n; ++i) {
    auto r = route_token(rng, p, 1);
    REQUIRE(r.experts.size() == 1);
    CHECK(r.weights[0] == 1.0);
    ++count[r.experts[0]];
  }
  for (int e = 0; e < 8; ++e) CHECK(std::abs(count[e] / double(n) - p[e]) < 0.01);
}

TEST_CASE("top-2 routing draws distinct experts with the sequential-draw marginals") {
  SkewSpec s;
  auto p = expert_probs(s, 8);
  // P(e chosen) = p_e + sum_{j != e} p_j * p_e / (1 - p_j)
  std::vector<double> expect(8);
  for (int e = 0; e < 8; ++e) {
    expect[e] = p[e];
    for (int j = 0; j < 8; ++j) {
      if (j != e) expect[e] += p[j] * p[e] / (1 - p[j]);
    }
  }
  Rng rng(9);
  const int n = 200'000;
  std::vector<int> count(8, 0);
  for (int i = 0; i < n; ++i) {
    auto r = route_token(rng, p, 2);
    REQUIRE(r.experts.size() == 2);
    CHECK(r.experts[0] != r.experts[1]);
    CHECK(r.weights[0] + r.weights[1] == doctest::Approx(1.0));
    CHECK(r.weights[0] > 0);
    for (int e : r.experts) ++count[e];
  }
  for (int e = 0; e < 8; ++e) CHECK(std::abs(count[e] / double(n) - expect[e]) < 0.01);
}

TEST_CASE("zero-probability experts are never drawn while mass remains") {
  std::vector<double> p{0.0, 0.5, 0.0, 0.5};
  Rng rng(1);
  for (int i = 0; i < 2000; ++i) {
    auto r = route_token(rng, p, 2);
    std::set<int> got(r.experts.begin(), r.experts.end());
    CHECK(got == std::set<int>{1, 3});
  }
}

TEST_CASE("arrivals are Poisson with uniform lengths") {
  WorkloadSpec w = WorkloadSpec::short_preset();
  w.arrival_rate = 200;
  w.duration_s = 200;
  auto a = gen_arrivals(w);
  REQUIRE(a.size() > 1000);
  double gaps = 0;
  for (std::size_t i = 1; i < a.size(); ++i) {
    CHECK(a[i].time >= a[i - 1].time);
    gaps += static_cast<double>(a[i].time - a[i - 1].time);
  }
  const double mean_gap_s = gaps / static_cast<double>(a.size() - 1) / 1e9;
  CHECK(std::abs(mean_gap_s - 1.0 / 200) / (1.0 / 200) < 0.02);
  int lo_in = 1000, hi_in = 0, lo_out = 1000, hi_out = 0;
  for (const auto& x : a) {
    CHECK(x.time < seconds_to_ns(200));
    lo_in = std::min(lo_in, x.input_len);
    hi_in = std::max(hi_in, x.input_len);
    lo_out = std::min(lo_out, x.output_len);
    hi_out = std::max(hi_out, x.output_len);
  }
  CHECK(lo_in == 30);
  CHECK(hi_in == 70);
  CHECK(lo_out == 70);
  CHECK(hi_out == 130);
}

TEST_CASE("arrivals are reproducible per seed") {
  WorkloadSpec w;
  w.duration_s = 2;
  auto a = gen_arrivals(w), b = gen_arrivals(w);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].time == b[i].time);
    CHECK(a[i].output_len == b[i].output_len);
  }
  w.seed = 43;
  CHECK(gen_arrivals(w).front().time != a.front().time);
  w.arrival_rate = 0;
  CHECK(gen_arrivals(w).empty());
}

TEST_CASE("uniform_int covers both ends") {
  Rng rng(3);
  std::set<std::int64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    auto v = rng.uniform_int(-2, 2);
    CHECK(v >= -2);
    CHECK(v <= 2);
    seen.insert(v);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("dp rank goes to the most free KV, lowest index on ties") {
  std::vector<std::int64_t> free{10, 40, 40, 5};
  CHECK(assign_dp_rank(free) == 1);
}

TEST_CASE("admission queue is FIFO and blocks on the head") {
  AdmissionQueue q;
  q.push(0, 50);
  q.push(1, 500);
  q.push(2, 10);
  std::vector<std::int64_t> free{100, 80};
  auto got = q.drain(free);
  REQUIRE(got.size() == 1);
  CHECK(got[0].request_id == 0);
  CHECK(got[0].dp_rank == 0);
  CHECK(free[0] == 50);
  CHECK(q.size() == 2);  // request 2 fits but waits behind request 1

  free = {600, 0};
  got = q.drain(free);
  REQUIRE(got.size() == 2);
  CHECK(got[0].request_id == 1);
  CHECK(got[1].request_id == 2);
  CHECK(got[1].dp_rank == 0);
  CHECK(q.empty());
}
