#include "amoesim/sim.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <unordered_map>

namespace amoesim {

const char* to_string(SimMode mode) {
  return mode == SimMode::AEP ? "aep" : "sync_ep";
}

SimTime SimTrace::window_start() const {
  return static_cast<SimTime>(std::llround(window_lo * static_cast<double>(duration)));
}

SimTime SimTrace::window_end() const {
  return static_cast<SimTime>(std::llround(window_hi * static_cast<double>(duration)));
}

namespace {

constexpr std::uint64_t kShuffleTag = 0xB001;
constexpr std::uint64_t kRoutingTag = 0xB002;

void require_valid(const SimConfig& cfg) {
  auto problems = validate_sim_config(cfg);
  if (problems.empty()) return;
  std::string msg = "invalid configuration:";
  for (const auto& p : problems) msg += "\n  " + p;
  throw ConfigError(msg);
}

std::vector<std::vector<double>> make_block_probs(const SimConfig& cfg) {
  Rng shuffle = Rng::stream(cfg.seed, kShuffleTag);
  return block_expert_probs(cfg.skew, cfg.model.num_experts, cfg.model.num_blocks, shuffle);
}

SimTrace trace_header(const SimConfig& cfg, const char* policy) {
  SimTrace t;
  t.mode = cfg.mode;
  t.policy = policy;
  t.num_blocks = cfg.model.num_blocks;
  t.num_experts = cfg.model.num_experts;
  t.top_k = cfg.model.top_k;
  t.arrival_rate = cfg.workload.arrival_rate;
  t.duration = seconds_to_ns(cfg.workload.duration_s);
  t.window_lo = cfg.window_lo;
  t.window_hi = cfg.window_hi;
  return t;
}

RequestRecord make_record(RequestId id, const Arrival& a) {
  RequestRecord r;
  r.id = id;
  r.arrival = a.time;
  r.input_len = a.input_len;
  r.output_len = a.output_len;
  return r;
}

struct PendingTransfer {
  int src = 0;
  int dst = 0;
  SimTime serialization = 0;
  SimTime propagation = 0;
  std::size_t record = 0;
  std::vector<TokenMeta> tokens;
};

class AepSim {
 public:
  AepSim(const SimConfig& cfg, const RunOptions& options)
      : cfg_(cfg),
        options_(options),
        placement_(cfg.cluster.placement ? *cfg.cluster.placement : default_placement(cfg.model, cfg.cluster)),
        arrivals_(gen_arrivals(cfg.workload)),
        dispatcher_(cfg_.model, placement_, make_block_probs(cfg), Rng::stream(cfg.seed, kRoutingTag)),
        token_bytes_(batch_payload_bytes(1, cfg.model)),
        trace_(trace_header(cfg, to_string(cfg.policy.kind))) {
    const int g = cfg.cluster.total_gpus();
    std::vector<std::vector<LayerId>> hosted(static_cast<std::size_t>(g));
    for (const auto& id : placement_.domain()) hosted[static_cast<std::size_t>(placement_.at(id))].push_back(id);

    const int ranks = cfg.cluster.attention_gpus;
    kv_gpu_.resize(static_cast<std::size_t>(ranks));
    std::vector<std::int64_t> capacity(static_cast<std::size_t>(g), 0);
    for (int r = 0; r < ranks; ++r) {
      kv_gpu_[static_cast<std::size_t>(r)] = placement_.at(LayerId::attention(0, r));
      capacity[static_cast<std::size_t>(kv_gpu_[static_cast<std::size_t>(r)])] += cfg.cluster.kv_slots_per_attention_gpu;
    }
    gpus_.reserve(static_cast<std::size_t>(g));
    for (int i = 0; i < g; ++i) {
      gpus_.emplace_back(i, std::move(hosted[static_cast<std::size_t>(i)]), cfg.model,
                         capacity[static_cast<std::size_t>(i)]);
    }
    in_flight_.resize(static_cast<std::size_t>(g));
    busy_ns_.assign(static_cast<std::size_t>(g), 0);
    cpu_free_.assign(static_cast<std::size_t>(g), 0);
    link_free_.assign(static_cast<std::size_t>(g) * static_cast<std::size_t>(g), 0);
  }

  SimTrace run() {
    for (std::size_t i = 0; i < arrivals_.size(); ++i) push(arrivals_[i].time, EventKind::RequestArrival, static_cast<int>(i));
    const SimTime horizon = cfg_.horizon_ns();
    SimTime now = 0;
    bool stopped = false;
    while (!heap_.empty()) {
      const SimEvent ev = heap_.top();
      if (ev.time > horizon) {
        stopped = true;
        break;
      }
      heap_.pop();
      now = ev.time;
      switch (ev.kind) {
        case EventKind::RequestArrival: on_arrival(ev.index, now); break;
        case EventKind::Phase1Arrive: on_phase1(ev.index, now); break;
        case EventKind::Phase2Complete: on_phase2(ev.index, now); break;
        case EventKind::ExecDone: on_exec_done(ev.index, now); break;
      }
    }
    if (!stopped) check_deadlock();
    trace_.end_time = stopped ? horizon : now;
    trace_.drained = !stopped;
    finish();
    return std::move(trace_);
  }

 private:
  void push(SimTime t, EventKind kind, int index) { heap_.push(SimEvent{t, seq_++, kind, index}); }

  void on_arrival(int idx, SimTime now) {
    const Arrival& a = arrivals_[static_cast<std::size_t>(idx)];
    const RequestId id = idx;
    RequestState st;
    st.request_id = id;
    st.input_len = a.input_len;
    st.output_len = a.output_len;
    st.arrival_time = a.time;
    requests_.emplace(id, st);
    records_.push_back(make_record(id, a));
    admission_.push(id, st.kv_need());
    admit(now);
  }

  void admit(SimTime now) {
    if (admission_.empty()) return;
    std::vector<std::int64_t> kv_free;
    kv_free.reserve(kv_gpu_.size());
    for (int gpu : kv_gpu_) kv_free.push_back(gpus_[static_cast<std::size_t>(gpu)].kv_free());
    for (const auto& adm : admission_.drain(kv_free)) {
      RequestState& st = requests_.at(adm.request_id);
      st.dp_rank = adm.dp_rank;
      records_[static_cast<std::size_t>(adm.request_id)].dp_rank = adm.dp_rank;
      const int gpu = kv_gpu_[static_cast<std::size_t>(adm.dp_rank)];
      gpus_[static_cast<std::size_t>(gpu)].kv_admit(adm.request_id, st.input_len, st.kv_need());
      TokenMeta t;
      t.request_id = adm.request_id;
      t.layer_id = LayerId::attention(0, adm.dp_rank);
      t.payload_bytes = token_bytes_;
      t.context_len = st.input_len;
      deliver(placement_.at(t.layer_id), {std::move(t)}, now);
    }
  }

  void deliver(int gpu, std::vector<TokenMeta> tokens, SimTime now) {
    std::vector<LayerId> touched;
    for (const auto& t : tokens) {
      if (touched.empty() || touched.back() != t.layer_id) touched.push_back(t.layer_id);
    }
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    auto& rt = gpus_[static_cast<std::size_t>(gpu)];
    auto res = rt.ingest(std::move(tokens), now);
    for (const auto& [rid, legs] : res.merges) {
      auto& rec = records_[static_cast<std::size_t>(rid)];
      rec.merges += 1;
      rec.merged_legs += legs;
      if (legs != cfg_.model.top_k) rec.bad_merges += 1;
    }
    for (const auto& layer : touched) sample_depth(gpu, layer, now);
    try_schedule(gpu, now);
  }

  void sample_depth(int gpu, const LayerId& layer, SimTime now) {
    if (!cfg_.record_queue_depth) return;
    const auto depth = static_cast<std::int64_t>(gpus_[static_cast<std::size_t>(gpu)].queue_depth(layer));
    trace_.queue_depth.push_back(QueueDepthSample{now, gpu, layer, depth});
  }

  void try_schedule(int gpu, SimTime now) {
    auto& rt = gpus_[static_cast<std::size_t>(gpu)];
    if (rt.busy()) return;
    auto layer = rt.schedule(cfg_.policy);
    if (!layer) return;
    ExecutionBatch batch = rt.form_batch(*layer, now, cfg_.policy.max_batch);
    sample_depth(gpu, *layer, now);
    for (const auto& t : batch.tokens) {
      auto& rec = records_[static_cast<std::size_t>(t.request_id)];
      switch (layer->kind) {
        case LayerKind::Attention:
          rec.attention_visits += 1;
          if (layer->block == 0) rec.kv_allocs += 1;
          break;
        case LayerKind::Expert: rec.expert_legs += 1; break;
        case LayerKind::Sampler: rec.sampler_visits += 1; break;
      }
    }
    const auto n = static_cast<std::int64_t>(batch.tokens.size());
    const std::int64_t ctx = layer->kind == LayerKind::Attention ? batch.total_context : 0;
    const SimTime done = now + exec_time(layer->kind, n, ctx, cfg_.perf);
    rt.mark_busy(done);
    in_flight_[static_cast<std::size_t>(gpu)] = std::move(batch);
    push(done, EventKind::ExecDone, gpu);
  }

  void on_exec_done(int gpu, SimTime now) {
    auto& slot = in_flight_[static_cast<std::size_t>(gpu)];
    ExecutionBatch batch = std::move(*slot);
    slot.reset();
    busy_ns_[static_cast<std::size_t>(gpu)] += now - batch.start;
    trace_.executions.push_back(ExecutionRecord{gpu, batch.layer, static_cast<std::int64_t>(batch.tokens.size()),
                                                batch.start, now, batch.queue_delay_sum});

    DispatchResult dr = dispatcher_.dispatch(batch, requests_, now);
    for (auto& ob : dr.outbound) {
      if (ob.dst_gpu == gpu) {
        deliver(gpu, std::move(ob.tokens), now);
      } else {
        send(gpu, std::move(ob), now);
      }
    }
    for (RequestId id : dr.completed) {
      const RequestState& st = requests_.at(id);
      gpus_[static_cast<std::size_t>(kv_gpu_[static_cast<std::size_t>(st.dp_rank)])].kv_release(id);
      records_[static_cast<std::size_t>(id)].completion = st.completion_time;
    }
    if (!dr.completed.empty()) admit(now);
    gpus_[static_cast<std::size_t>(gpu)].mark_idle();
    try_schedule(gpu, now);
  }

  // Outbound batches of one dispatch leave back-to-back: phase 1 serializes on
  // the sender CPU, phase 2 serializes per directed link.
  void send(int src, Outbound ob, SimTime now) {
    const std::int64_t ordinal = transfer_ordinal_++;
    if (options_.drop_transfer_seq && *options_.drop_transfer_seq == ordinal) return;
    std::int64_t bytes = 0;
    for (const auto& t : ob.tokens) bytes += t.payload_bytes;
    const LinkParams& link = cfg_.cluster.link(src, ob.dst_gpu);
    const TransferTime tt = transfer_time(bytes, link);
    const SimTime start = std::max(now, cpu_free_[static_cast<std::size_t>(src)]);
    const SimTime p1_end = start + tt.phase1;
    cpu_free_[static_cast<std::size_t>(src)] = p1_end;

    TransferRecord rec;
    rec.src = src;
    rec.dst = ob.dst_gpu;
    rec.bytes = bytes;
    rec.tokens = static_cast<std::int64_t>(ob.tokens.size());
    rec.issue = now;
    rec.phase1_end = p1_end;
    trace_.transfers.push_back(rec);

    PendingTransfer pt;
    pt.src = src;
    pt.dst = ob.dst_gpu;
    pt.propagation = link.propagation_ns;
    pt.serialization = tt.phase2 - link.propagation_ns;
    pt.record = trace_.transfers.size() - 1;
    pt.tokens = std::move(ob.tokens);
    transfers_.push_back(std::move(pt));
    push(p1_end, EventKind::Phase1Arrive, static_cast<int>(transfers_.size() - 1));
  }

  void on_phase1(int idx, SimTime now) {
    PendingTransfer& pt = transfers_[static_cast<std::size_t>(idx)];
    const std::size_t g = gpus_.size();
    SimTime& link_free = link_free_[static_cast<std::size_t>(pt.src) * g + static_cast<std::size_t>(pt.dst)];
    const SimTime start = std::max(now, link_free);
    link_free = start + pt.serialization;
    const SimTime end = start + pt.serialization + pt.propagation;
    auto& rec = trace_.transfers[pt.record];
    rec.phase2_start = start;
    rec.phase2_end = end;
    push(end, EventKind::Phase2Complete, idx);
  }

  void on_phase2(int idx, SimTime now) {
    PendingTransfer& pt = transfers_[static_cast<std::size_t>(idx)];
    auto tokens = std::move(pt.tokens);
    pt.tokens = {};
    deliver(pt.dst, std::move(tokens), now);
  }

  void check_deadlock() const {
    std::vector<std::string> stuck;
    for (const auto& rt : gpus_) {
      for (const auto& load : rt.loads()) {
        for (const auto& qt : rt.queue(load.layer).tokens) {
          stuck.push_back("request " + std::to_string(qt.token.request_id) + " queued at " + to_string(load.layer) +
                          " on GPU " + std::to_string(rt.gpu_id()));
        }
      }
      for (const auto& [rid, layer] : rt.pool().keys()) {
        stuck.push_back("request " + std::to_string(rid) + " waiting in token pool for " + to_string(layer) +
                        " on GPU " + std::to_string(rt.gpu_id()));
      }
    }
    if (stuck.empty()) return;
    std::string msg = "deadlock: event queue empty with " + std::to_string(stuck.size()) + " stuck token(s)";
    for (std::size_t i = 0; i < std::min<std::size_t>(stuck.size(), 8); ++i) msg += "\n  " + stuck[i];
    throw DeadlockError(msg, std::move(stuck));
  }

  void finish() {
    for (auto& rec : records_) {
      const RequestState& st = requests_.at(rec.id);
      rec.token_times = st.per_token_times;
      rec.completion = st.completion_time;
    }
    trace_.requests = std::move(records_);
    for (const auto& rt : gpus_) {
      GpuRecord g;
      g.gpu = rt.gpu_id();
      g.role = rt.gpu_id() < cfg_.cluster.attention_gpus ? "attention" : "expert";
      for (std::size_t r = 0; r < kv_gpu_.size(); ++r) {
        if (kv_gpu_[r] == g.gpu) {
          g.dp_rank = static_cast<int>(r);
          break;
        }
      }
      g.busy_ns = busy_ns_[static_cast<std::size_t>(g.gpu)];
      g.pool_pending = static_cast<std::int64_t>(rt.pool().pending());
      g.queued = static_cast<std::int64_t>(rt.queued_tokens());
      g.kv_used = rt.kv_used();
      g.kv_reserved = rt.kv_reserved();
      g.kv_capacity = rt.kv_capacity();
      trace_.gpus.push_back(std::move(g));
    }
  }

  const SimConfig& cfg_;
  RunOptions options_;
  Placement placement_;
  std::vector<Arrival> arrivals_;
  Dispatcher dispatcher_;
  std::int64_t token_bytes_;
  SimTrace trace_;

  std::vector<RuntimeState> gpus_;
  std::vector<int> kv_gpu_;  // DP rank -> GPU holding its KV cache
  std::unordered_map<RequestId, RequestState> requests_;
  std::vector<RequestRecord> records_;  // indexed by request id
  AdmissionQueue admission_;

  std::priority_queue<SimEvent, std::vector<SimEvent>, EventAfter> heap_;
  std::uint64_t seq_ = 0;
  std::vector<std::optional<ExecutionBatch>> in_flight_;
  std::vector<SimTime> busy_ns_;
  std::vector<SimTime> cpu_free_;
  std::vector<SimTime> link_free_;
  std::vector<PendingTransfer> transfers_;
  std::int64_t transfer_ordinal_ = 0;
};

}  // namespace

SimTrace run_aep(const SimConfig& cfg, const RunOptions& options) {
  require_valid(cfg);
  AepSim sim(cfg, options);
  return sim.run();
}

SimTrace run(const SimConfig& cfg, const RunOptions& options) {
  return cfg.mode == SimMode::AEP ? run_aep(cfg, options) : run_sync_baseline(cfg);
}

// ---------------------------------------------------------------------------
// Synchronous baseline

namespace {

struct SyncRank {
  std::vector<RequestId> active;  // admission order
  std::int64_t kv_used = 0;
  std::int64_t kv_reserved = 0;
};

// Max over (src, dst) pairs of the transfer time of their shard; records one
// transfer per pair. Returns the barrier duration.
SimTime all_to_all(const std::vector<std::vector<std::int64_t>>& bytes, const ClusterConfig& cluster,
                   const std::vector<std::vector<std::int64_t>>& tokens, SimTime start,
                   std::vector<TransferRecord>& out) {
  SimTime phase = 0;
  const std::size_t g = bytes.size();
  for (std::size_t s = 0; s < g; ++s) {
    for (std::size_t d = 0; d < g; ++d) {
      if (s == d || bytes[s][d] == 0) continue;
      const TransferTime tt = transfer_time(bytes[s][d], cluster.link(static_cast<int>(s), static_cast<int>(d)));
      TransferRecord r;
      r.src = static_cast<int>(s);
      r.dst = static_cast<int>(d);
      r.bytes = bytes[s][d];
      r.tokens = tokens[s][d];
      r.issue = start;
      r.phase1_end = start + tt.phase1;
      r.phase2_start = r.phase1_end;
      r.phase2_end = start + tt.total();
      out.push_back(r);
      phase = std::max(phase, tt.total());
    }
  }
  return phase;
}

}  // namespace

SimTrace run_sync_baseline(const SimConfig& cfg) {
  require_valid(cfg);
  const ModelConfig& m = cfg.model;
  const int g = cfg.cluster.total_gpus();
  const auto gs = static_cast<std::size_t>(g);
  const std::int64_t cap = cfg.cluster.kv_slots_per_attention_gpu * cfg.cluster.attention_gpus / g;
  const std::int64_t largest = static_cast<std::int64_t>(cfg.workload.input_max) + cfg.workload.output_max;
  if (largest > cap) {
    throw ConfigError("sync_ep: per-rank KV capacity " + std::to_string(cap) + " cannot hold the largest request");
  }

  SimConfig header_cfg = cfg;
  header_cfg.mode = SimMode::SyncEP;
  SimTrace trace = trace_header(header_cfg, "sync_ep");
  const auto block_probs = make_block_probs(cfg);
  Rng routing = Rng::stream(cfg.seed, kRoutingTag);
  const std::int64_t token_bytes = batch_payload_bytes(1, m);
  const auto arrivals = gen_arrivals(cfg.workload);
  const SimTime horizon = cfg.horizon_ns();

  std::vector<RequestRecord> records;
  std::vector<int> generated;
  std::vector<SyncRank> ranks(gs);
  std::vector<SimTime> busy(gs, 0);
  AdmissionQueue admission;
  std::size_t next = 0;
  SimTime t = 0;
  bool drained = false;

  std::vector<std::vector<std::int64_t>> counts(gs, std::vector<std::int64_t>(static_cast<std::size_t>(m.num_experts)));
  std::vector<std::vector<std::int64_t>> bytes(gs, std::vector<std::int64_t>(gs));
  std::vector<std::vector<std::int64_t>> toks(gs, std::vector<std::int64_t>(gs));
  auto clear = [](std::vector<std::vector<std::int64_t>>& v) {
    for (auto& row : v) std::fill(row.begin(), row.end(), 0);
  };

  for (;;) {
    while (next < arrivals.size() && arrivals[next].time <= t) {
      records.push_back(make_record(static_cast<RequestId>(next), arrivals[next]));
      generated.push_back(0);
      admission.push(static_cast<RequestId>(next), records.back().input_len + static_cast<std::int64_t>(records.back().output_len));
      ++next;
    }
    if (!admission.empty()) {
      std::vector<std::int64_t> kv_free(gs);
      for (std::size_t r = 0; r < gs; ++r) kv_free[r] = cap - ranks[r].kv_reserved;
      for (const auto& adm : admission.drain(kv_free)) {
        auto& rec = records[static_cast<std::size_t>(adm.request_id)];
        rec.dp_rank = adm.dp_rank;
        auto& rank = ranks[static_cast<std::size_t>(adm.dp_rank)];
        rank.active.push_back(adm.request_id);
        rank.kv_reserved += rec.input_len + rec.output_len;
        rank.kv_used += rec.input_len;
      }
    }
    const bool idle = std::all_of(ranks.begin(), ranks.end(), [](const SyncRank& r) { return r.active.empty(); });
    if (idle) {
      if (next >= arrivals.size()) {
        drained = admission.empty();
        break;
      }
      t = std::max(t, arrivals[next].time);
      if (t > horizon) break;
      continue;
    }
    if (t >= horizon) break;

    for (int b = 0; b < m.num_blocks; ++b) {
      // Attention on every DP rank.
      SimTime phase = 0;
      for (std::size_t r = 0; r < gs; ++r) {
        const auto& act = ranks[r].active;
        if (act.empty()) continue;
        std::int64_t ctx = 0;
        for (RequestId id : act) ctx += records[static_cast<std::size_t>(id)].input_len + generated[static_cast<std::size_t>(id)];
        const auto n = static_cast<std::int64_t>(act.size());
        const SimTime d = exec_time(LayerKind::Attention, n, ctx, cfg.perf);
        trace.executions.push_back(ExecutionRecord{static_cast<int>(r), LayerId::attention(b, static_cast<int>(r)), n, t, t + d, 0});
        busy[r] += d;
        phase = std::max(phase, d);
        for (RequestId id : act) {
          auto& rec = records[static_cast<std::size_t>(id)];
          rec.attention_visits += 1;
          if (b == 0) rec.kv_allocs += 1;
        }
        if (b == 0) ranks[r].kv_used += n;
      }
      t += phase;

      // Route and exchange token shards.
      clear(counts);
      clear(bytes);
      clear(toks);
      const auto& probs = block_probs[static_cast<std::size_t>(b)];
      for (std::size_t r = 0; r < gs; ++r) {
        for (RequestId id : ranks[r].active) {
          const RouteResult rr = route_token(routing, probs, m.top_k);
          auto& rec = records[static_cast<std::size_t>(id)];
          rec.expert_legs += static_cast<std::int64_t>(rr.experts.size());
          for (int e : rr.experts) {
            counts[r][static_cast<std::size_t>(e)] += 1;
            const auto dst = static_cast<std::size_t>(e % g);
            bytes[r][dst] += token_bytes;
            toks[r][dst] += 1;
          }
        }
      }
      t += all_to_all(bytes, cfg.cluster, toks, t, trace.transfers);

      // Experts: each GPU runs its experts back-to-back from a common start.
      phase = 0;
      for (std::size_t gpu = 0; gpu < gs; ++gpu) {
        SimTime cursor = t;
        for (int e = static_cast<int>(gpu); e < m.num_experts; e += g) {
          std::int64_t n = 0;
          for (std::size_t r = 0; r < gs; ++r) n += counts[r][static_cast<std::size_t>(e)];
          if (n == 0) continue;
          const SimTime d = exec_time(LayerKind::Expert, n, 0, cfg.perf);
          trace.executions.push_back(ExecutionRecord{static_cast<int>(gpu), LayerId::expert(b, e), n, cursor, cursor + d, 0});
          cursor += d;
        }
        busy[gpu] += cursor - t;
        phase = std::max(phase, cursor - t);
      }
      t += phase;

      // Return shards to their ranks.
      for (std::size_t s = 0; s < gs; ++s) {
        for (std::size_t d = s + 1; d < gs; ++d) {
          std::swap(bytes[s][d], bytes[d][s]);
          std::swap(toks[s][d], toks[d][s]);
        }
      }
      t += all_to_all(bytes, cfg.cluster, toks, t, trace.transfers);
      if (m.top_k > 1) {
        for (std::size_t r = 0; r < gs; ++r) {
          for (RequestId id : ranks[r].active) {
            auto& rec = records[static_cast<std::size_t>(id)];
            rec.merges += 1;
            rec.merged_legs += m.top_k;
          }
        }
      }
    }

    // Sampler, then emit one token per active request.
    SimTime phase = 0;
    for (std::size_t r = 0; r < gs; ++r) {
      const auto n = static_cast<std::int64_t>(ranks[r].active.size());
      if (n == 0) continue;
      const SimTime d = exec_time(LayerKind::Sampler, n, 0, cfg.perf);
      trace.executions.push_back(
          ExecutionRecord{static_cast<int>(r), LayerId::sampler(m.num_blocks, static_cast<int>(r)), n, t, t + d, 0});
      busy[r] += d;
      phase = std::max(phase, d);
    }
    t += phase;
    for (auto& rank : ranks) {
      std::vector<RequestId> still;
      still.reserve(rank.active.size());
      for (RequestId id : rank.active) {
        auto& rec = records[static_cast<std::size_t>(id)];
        auto& gen = generated[static_cast<std::size_t>(id)];
        rec.sampler_visits += 1;
        rec.token_times.push_back(t);
        gen += 1;
        if (gen >= rec.output_len) {
          rec.completion = t;
          rank.kv_used -= rec.input_len + rec.kv_allocs;
          rank.kv_reserved -= rec.input_len + rec.output_len;
        } else {
          still.push_back(id);
        }
      }
      rank.active = std::move(still);
    }
  }

  trace.end_time = t;
  trace.drained = drained;
  trace.requests = std::move(records);
  for (std::size_t gpu = 0; gpu < gs; ++gpu) {
    GpuRecord rec;
    rec.gpu = static_cast<int>(gpu);
    rec.role = "colocated";
    rec.dp_rank = static_cast<int>(gpu);
    rec.busy_ns = busy[gpu];
    rec.kv_used = ranks[gpu].kv_used;
    rec.kv_reserved = ranks[gpu].kv_reserved;
    rec.kv_capacity = cap;
    trace.gpus.push_back(std::move(rec));
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Audit

AuditReport drain_check(const SimTrace& trace) {
  AuditReport report;
  auto& v = report.violations;
  const std::int64_t nb = trace.num_blocks;
  const std::int64_t k = trace.top_k;

  for (const auto& r : trace.requests) {
    ++report.requests_checked;
    report.merges_checked += r.merges;
    const std::string who = "request " + std::to_string(r.id);
    const auto gen = static_cast<std::int64_t>(r.token_times.size());
    for (std::size_t i = 1; i < r.token_times.size(); ++i) {
      if (r.token_times[i] <= r.token_times[i - 1]) {
        v.push_back(who + ": token times not strictly increasing at index " + std::to_string(i));
        break;
      }
    }
    if (gen > r.output_len) v.push_back(who + ": emitted " + std::to_string(gen) + " tokens, expected " + std::to_string(r.output_len));
    if (r.bad_merges != 0) v.push_back(who + ": " + std::to_string(r.bad_merges) + " merge(s) without exactly " + std::to_string(k) + " legs");
    if (r.sampler_visits != gen) v.push_back(who + ": sampler visits " + std::to_string(r.sampler_visits) + " != emitted tokens " + std::to_string(gen));
    if (k > 1 && r.merged_legs != k * r.merges) v.push_back(who + ": merged legs " + std::to_string(r.merged_legs) + " != top_k x merges");

    if (r.completion) {
      if (gen != r.output_len) v.push_back(who + ": completed with " + std::to_string(gen) + " of " + std::to_string(r.output_len) + " tokens");
      if (!r.token_times.empty() && r.token_times.back() != *r.completion) v.push_back(who + ": completion time differs from last token time");
      const std::int64_t out = r.output_len;
      if (r.attention_visits != nb * out) v.push_back(who + ": attention visits " + std::to_string(r.attention_visits) + ", expected " + std::to_string(nb * out));
      if (r.expert_legs != k * nb * out) v.push_back(who + ": expert legs " + std::to_string(r.expert_legs) + ", expected " + std::to_string(k * nb * out));
      if (r.kv_allocs != out) v.push_back(who + ": KV allocations " + std::to_string(r.kv_allocs) + ", expected " + std::to_string(out));
      if (k > 1 && r.merges != nb * out) v.push_back(who + ": merges " + std::to_string(r.merges) + ", expected " + std::to_string(nb * out));
    } else {
      if (trace.drained) v.push_back(who + ": incomplete after drain (" + std::to_string(gen) + " of " + std::to_string(r.output_len) + " tokens)");
      if (r.kv_allocs < gen || r.kv_allocs > gen + 1) v.push_back(who + ": KV allocations " + std::to_string(r.kv_allocs) + " inconsistent with " + std::to_string(gen) + " emitted tokens");
      if (r.attention_visits > nb * (gen + 1)) v.push_back(who + ": too many attention visits");
      if (r.expert_legs > k * nb * (gen + 1)) v.push_back(who + ": too many expert legs");
    }
  }

  std::unordered_map<int, std::pair<std::int64_t, std::int64_t>> kv_expected;  // rank -> used, reserved
  for (const auto& r : trace.requests) {
    if (r.dp_rank < 0 || r.completion) continue;
    auto& e = kv_expected[r.dp_rank];
    e.first += r.input_len + r.kv_allocs;
    e.second += r.input_len + r.output_len;
  }
  for (const auto& g : trace.gpus) {
    const std::string who = "GPU " + std::to_string(g.gpu);
    if (trace.drained && g.pool_pending != 0) v.push_back(who + ": " + std::to_string(g.pool_pending) + " token(s) left in pool");
    if (trace.drained && g.queued != 0) v.push_back(who + ": " + std::to_string(g.queued) + " token(s) left in queues");
    if (g.dp_rank < 0) {
      if (g.kv_used != 0 || g.kv_reserved != 0) v.push_back(who + ": KV usage on a GPU without a DP rank");
      continue;
    }
    const auto it = kv_expected.find(g.dp_rank);
    const auto exp = it == kv_expected.end() ? std::pair<std::int64_t, std::int64_t>{0, 0} : it->second;
    if (g.kv_used != exp.first) v.push_back(who + ": kv_used " + std::to_string(g.kv_used) + " but active requests hold " + std::to_string(exp.first));
    if (g.kv_reserved != exp.second) v.push_back(who + ": kv_reserved " + std::to_string(g.kv_reserved) + " but active requests reserve " + std::to_string(exp.second));
    if (g.kv_used > g.kv_capacity) v.push_back(who + ": kv_used exceeds capacity");
  }
  return report;
}

}  // namespace amoesim
