#include "amoesim/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "amoesim/sim.hpp"

namespace amoesim {

namespace fs = std::filesystem;

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

Window steady_window(const SimTrace& trace) {
  return Window{trace.window_start(), trace.window_end()};
}

ItlStats itl_from_samples(std::vector<SimTime> gaps) {
  ItlStats s;
  s.samples = gaps.size();
  if (gaps.empty()) return s;
  std::sort(gaps.begin(), gaps.end());
  double sum = 0;
  for (SimTime g : gaps) sum += static_cast<double>(g);
  const std::size_t n = gaps.size();
  s.mean_ms = sum / static_cast<double>(n) / 1e6;
  s.median_ms = (n % 2 == 1 ? static_cast<double>(gaps[n / 2])
                            : 0.5 * (static_cast<double>(gaps[n / 2 - 1]) + static_cast<double>(gaps[n / 2]))) /
                1e6;
  const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(n)));
  s.p99_ms = static_cast<double>(gaps[std::max<std::size_t>(rank, 1) - 1]) / 1e6;
  return s;
}

ItlStats compute_itl(const std::vector<RequestRecord>& ledger, const Window& window) {
  std::vector<SimTime> gaps;
  for (const auto& r : ledger) {
    for (std::size_t i = 1; i < r.token_times.size(); ++i) {
      if (window.contains(r.token_times[i])) gaps.push_back(r.token_times[i] - r.token_times[i - 1]);
    }
  }
  return itl_from_samples(std::move(gaps));
}

double compute_throughput(const std::vector<RequestRecord>& ledger, const Window& window) {
  if (window.end <= window.start) return 0.0;
  std::int64_t n = 0;
  for (const auto& r : ledger) {
    for (SimTime t : r.token_times) n += window.contains(t) ? 1 : 0;
  }
  return static_cast<double>(n) / window.seconds();
}

namespace {

std::vector<std::pair<SimTime, SimTime>> clipped_intervals(const SimTrace& trace, int gpu, const Window& w) {
  std::vector<std::pair<SimTime, SimTime>> out;
  for (const auto& e : trace.executions) {
    if (e.gpu != gpu) continue;
    const SimTime a = std::max(e.start, w.start);
    const SimTime b = std::min(e.end, w.end);
    if (b > a) out.emplace_back(a, b);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

double compute_busy_fraction(const SimTrace& trace, int gpu, const Window& window) {
  if (window.end <= window.start) return 0.0;
  SimTime busy = 0;
  for (const auto& [a, b] : clipped_intervals(trace, gpu, window)) busy += b - a;
  return static_cast<double>(busy) / static_cast<double>(window.end - window.start);
}

double compute_stall(const SimTrace& trace, int gpu, const Window& window) {
  if (window.end <= window.start) return 0.0;
  SimTime idle = 0;
  SimTime cursor = window.start;
  for (const auto& [a, b] : clipped_intervals(trace, gpu, window)) {
    if (a > cursor) idle += a - cursor;
    cursor = std::max(cursor, b);
  }
  idle += window.end - cursor;
  return static_cast<double>(idle) / static_cast<double>(window.end - window.start);
}

std::vector<RatePoint> rate_series(const SimTrace& trace, SimTime bin) {
  std::vector<RatePoint> out;
  if (bin <= 0) return out;
  const SimTime end = std::max(trace.end_time, trace.duration);
  const auto bins = static_cast<std::size_t>((end + bin - 1) / bin);
  std::vector<std::int64_t> arrivals(bins, 0);
  std::vector<std::int64_t> completions(bins, 0);
  for (const auto& r : trace.requests) {
    if (auto i = static_cast<std::size_t>(r.arrival / bin); i < bins) arrivals[i] += 1;
    if (r.completion) {
      if (auto i = static_cast<std::size_t>(*r.completion / bin); i < bins) completions[i] += 1;
    }
  }
  const double secs = ns_to_seconds(bin);
  for (std::size_t i = 0; i < bins; ++i) {
    out.push_back(RatePoint{ns_to_seconds(static_cast<SimTime>(i) * bin), static_cast<double>(arrivals[i]) / secs,
                            static_cast<double>(completions[i]) / secs});
  }
  return out;
}

SummaryStats summarize(const SimTrace& trace) {
  SummaryStats s;
  s.mode = to_string(trace.mode);
  s.policy = trace.policy;
  s.top_k = trace.top_k;
  s.input_rate = trace.arrival_rate;
  const Window w = steady_window(trace);
  s.throughput_tokens_per_s = compute_throughput(trace.requests, w);
  s.itl = compute_itl(trace.requests, w);

  double expert_sum = 0;
  double attention_sum = 0;
  int expert_n = 0;
  int attention_n = 0;
  for (const auto& g : trace.gpus) {
    const double busy = compute_busy_fraction(trace, g.gpu, w);
    const double stall = compute_stall(trace, g.gpu, w);
    s.busy_fraction.push_back(busy);
    s.stall_fraction.push_back(stall);
    if (g.role == "expert" || g.role == "colocated") {
      expert_sum += stall;
      ++expert_n;
    }
    if (g.role == "attention" || g.role == "colocated") {
      attention_sum += stall;
      ++attention_n;
    }
  }
  s.expert_stall_mean = expert_n ? expert_sum / expert_n : 0.0;
  s.attention_stall_mean = attention_n ? attention_sum / attention_n : 0.0;

  std::int64_t tokens[3] = {0, 0, 0};
  std::int64_t batches[3] = {0, 0, 0};
  for (const auto& e : trace.executions) {
    if (!w.contains(e.start)) continue;
    const auto k = static_cast<std::size_t>(e.layer.kind);
    tokens[k] += e.batch;
    batches[k] += 1;
  }
  auto mean = [&](LayerKind kind) {
    const auto k = static_cast<std::size_t>(kind);
    return batches[k] ? static_cast<double>(tokens[k]) / static_cast<double>(batches[k]) : 0.0;
  };
  s.mean_batch_attention = mean(LayerKind::Attention);
  s.mean_batch_expert = mean(LayerKind::Expert);
  s.mean_batch_sampler = mean(LayerKind::Sampler);

  std::int64_t arrived_w = 0;
  std::int64_t completed_w = 0;
  for (const auto& r : trace.requests) {
    ++s.arrived;
    if (r.completion) ++s.completed;
    if (w.contains(r.arrival)) ++arrived_w;
    if (r.completion && w.contains(*r.completion)) ++completed_w;
  }
  if (w.end > w.start) {
    s.arrival_rate_window = static_cast<double>(arrived_w) / w.seconds();
    s.completion_rate_window = static_cast<double>(completed_w) / w.seconds();
  }
  return s;
}

std::map<std::pair<LayerKind, std::int64_t>, std::int64_t> batch_histogram(const SimTrace& trace) {
  std::map<std::pair<LayerKind, std::int64_t>, std::int64_t> h;
  for (const auto& e : trace.executions) h[{e.layer.kind, e.batch}] += 1;
  return h;
}

QueueDelayCheck check_queue_delays(const SimTrace& trace) {
  QueueDelayCheck c;
  struct Series {
    SimTime last_t = 0;
    std::int64_t depth = 0;
    std::int64_t area = 0;
  };
  std::map<std::pair<int, LayerId>, Series> series;
  for (const auto& s : trace.queue_depth) {
    auto& q = series[{s.gpu, s.layer}];
    q.area += q.depth * (s.time - q.last_t);
    q.depth = s.depth;
    q.last_t = s.time;
  }
  std::map<std::pair<int, LayerId>, std::int64_t> reported;
  for (const auto& e : trace.executions) {
    reported[{e.gpu, e.layer}] += e.queue_delay_sum;
    c.reported_ns += e.queue_delay_sum;
  }
  for (auto& [key, q] : series) {
    q.area += q.depth * (trace.end_time - q.last_t);
    c.integrated_ns += q.area;
    const auto it = reported.find(key);
    const std::int64_t r = it == reported.end() ? 0 : it->second;
    if (r != q.area) {
      c.mismatches.push_back("GPU " + std::to_string(key.first) + " " + to_string(key.second) + ": integrated " +
                             std::to_string(q.area) + " ns, reported " + std::to_string(r) + " ns");
    }
  }
  for (const auto& [key, r] : reported) {
    if (r != 0 && series.count(key) == 0) {
      c.mismatches.push_back("GPU " + std::to_string(key.first) + " " + to_string(key.second) +
                             ": queue delay reported without depth samples");
    }
  }
  return c;
}

std::string summary_header() {
  return "mode,policy,top_k,rate,throughput_tok_s,itl_mean_ms,itl_median_ms,itl_p99_ms,itl_samples,"
         "mean_batch_attention,mean_batch_expert,mean_batch_sampler,expert_stall_mean,attention_stall_mean,"
         "arrival_rate_window,completion_rate_window,arrived,completed";
}

std::string summary_row(const SummaryStats& s) {
  std::ostringstream o;
  auto itl = [&](double v) { return s.itl.empty() ? std::string() : format_double(v); };
  o << s.mode << ',' << s.policy << ',' << s.top_k << ',' << format_double(s.input_rate) << ','
    << format_double(s.throughput_tokens_per_s) << ',' << itl(s.itl.mean_ms) << ',' << itl(s.itl.median_ms) << ','
    << itl(s.itl.p99_ms) << ',' << s.itl.samples << ',' << format_double(s.mean_batch_attention) << ','
    << format_double(s.mean_batch_expert) << ',' << format_double(s.mean_batch_sampler) << ','
    << format_double(s.expert_stall_mean) << ',' << format_double(s.attention_stall_mean) << ','
    << format_double(s.arrival_rate_window) << ',' << format_double(s.completion_rate_window) << ',' << s.arrived
    << ',' << s.completed;
  return o.str();
}

// ---------------------------------------------------------------------------
// CSV output

namespace {

class CsvFile {
 public:
  CsvFile(const fs::path& path, const std::string& header) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    out_ << header << '\n';
  }
  template <typename... Ts>
  void row(const Ts&... fields) {
    bool first = true;
    ((out_ << (first ? "" : ",") << fields, first = false), ...);
    out_ << '\n';
  }
  ~CsvFile() noexcept(false) {
    out_.flush();
    if (!out_ && std::uncaught_exceptions() == 0) throw std::runtime_error("write failed: " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

}  // namespace

void emit_csv(const SimTrace& trace, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());

  {
    CsvFile f(dir / "executions.csv", "gpu,layer,block,slot,kind,batch,start_ns,end_ns,queue_delay_sum_ns");
    for (const auto& e : trace.executions) {
      f.row(e.gpu, to_string(e.layer), e.layer.block, e.layer.slot, to_string(e.layer.kind), e.batch, e.start, e.end,
            e.queue_delay_sum);
    }
  }
  {
    CsvFile f(dir / "transfers.csv", "src,dst,bytes,tokens,issue_ns,phase1_end_ns,phase2_start_ns,phase2_end_ns");
    for (const auto& t : trace.transfers) {
      f.row(t.src, t.dst, t.bytes, t.tokens, t.issue, t.phase1_end, t.phase2_start, t.phase2_end);
    }
  }
  {
    CsvFile f(dir / "requests.csv", "id,arrival_ns,completion_ns,input_len,output_len,dp_rank");
    for (const auto& r : trace.requests) {
      f.row(r.id, r.arrival, r.completion ? std::to_string(*r.completion) : std::string(), r.input_len, r.output_len,
            r.dp_rank);
    }
  }
  {
    CsvFile f(dir / "tokens.csv", "request_id,index,time_ns");
    for (const auto& r : trace.requests) {
      for (std::size_t i = 0; i < r.token_times.size(); ++i) f.row(r.id, i, r.token_times[i]);
    }
  }
  {
    CsvFile f(dir / "queue_depth.csv", "time_ns,gpu,layer,depth");
    for (const auto& s : trace.queue_depth) f.row(s.time, s.gpu, to_string(s.layer), s.depth);
  }
  const SummaryStats stats = summarize(trace);
  {
    CsvFile f(dir / "gpus.csv",
              "gpu,role,dp_rank,busy_ns,busy_fraction,stall_fraction,pool_pending,queued,kv_used,kv_reserved,"
              "kv_capacity");
    for (std::size_t i = 0; i < trace.gpus.size(); ++i) {
      const auto& g = trace.gpus[i];
      f.row(g.gpu, g.role, g.dp_rank, g.busy_ns, format_double(stats.busy_fraction[i]),
            format_double(stats.stall_fraction[i]), g.pool_pending, g.queued, g.kv_used, g.kv_reserved, g.kv_capacity);
    }
  }
  {
    CsvFile f(dir / "audit.csv", "id,attention_visits,kv_allocs,expert_legs,merges,merged_legs,bad_merges,sampler_visits");
    for (const auto& r : trace.requests) {
      f.row(r.id, r.attention_visits, r.kv_allocs, r.expert_legs, r.merges, r.merged_legs, r.bad_merges,
            r.sampler_visits);
    }
  }
  {
    CsvFile f(dir / "run.csv", "key,value");
    f.row("mode", to_string(trace.mode));
    f.row("policy", trace.policy);
    f.row("num_blocks", trace.num_blocks);
    f.row("num_experts", trace.num_experts);
    f.row("top_k", trace.top_k);
    f.row("arrival_rate", format_double(trace.arrival_rate));
    f.row("duration_ns", trace.duration);
    f.row("end_time_ns", trace.end_time);
    f.row("drained", trace.drained ? 1 : 0);
    f.row("window_lo", format_double(trace.window_lo));
    f.row("window_hi", format_double(trace.window_hi));
  }
  {
    CsvFile f(dir / "rates.csv", "t_s,arrival_rate,completion_rate");
    for (const auto& p : rate_series(trace, kNsPerSec / 2)) {
      f.row(format_double(p.t_s), format_double(p.arrival_rate), format_double(p.completion_rate));
    }
  }
  {
    CsvFile f(dir / "batch_hist.csv", "kind,batch,count");
    for (const auto& [key, n] : batch_histogram(trace)) f.row(to_string(key.first), key.second, n);
  }
  {
    CsvFile f(dir / "summary.csv", summary_header());
    f.row(summary_row(stats));
  }
}

// ---------------------------------------------------------------------------
// CSV input

namespace {

std::vector<std::vector<std::string>> read_csv(const fs::path& path, const std::string& expected_header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != expected_header) {
    throw std::runtime_error(path.string() + ": unexpected header");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    rows.push_back(std::move(fields));
  }
  return rows;
}

std::int64_t as_int(const std::string& s, const fs::path& path) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw std::runtime_error(path.string() + ": bad integer '" + s + "'");
}

LayerId as_layer(const std::string& s, const fs::path& path) {
  auto id = parse_layer_id(s);
  if (!id) throw std::runtime_error(path.string() + ": bad layer '" + s + "'");
  return *id;
}

void need_fields(const std::vector<std::string>& row, std::size_t n, const fs::path& path) {
  if (row.size() != n) throw std::runtime_error(path.string() + ": expected " + std::to_string(n) + " fields");
}

}  // namespace

SimTrace load_trace(const fs::path& dir) {
  SimTrace t;
  {
    const auto p = dir / "run.csv";
    std::map<std::string, std::string> kv;
    for (const auto& row : read_csv(p, "key,value")) {
      need_fields(row, 2, p);
      kv[row[0]] = row[1];
    }
    auto get = [&](const std::string& k) {
      auto it = kv.find(k);
      if (it == kv.end()) throw std::runtime_error(p.string() + ": missing key " + k);
      return it->second;
    };
    t.mode = get("mode") == "sync_ep" ? SimMode::SyncEP : SimMode::AEP;
    t.policy = get("policy");
    t.num_blocks = static_cast<int>(as_int(get("num_blocks"), p));
    t.num_experts = static_cast<int>(as_int(get("num_experts"), p));
    t.top_k = static_cast<int>(as_int(get("top_k"), p));
    t.arrival_rate = std::stod(get("arrival_rate"));
    t.duration = as_int(get("duration_ns"), p);
    t.end_time = as_int(get("end_time_ns"), p);
    t.drained = get("drained") == "1";
    t.window_lo = std::stod(get("window_lo"));
    t.window_hi = std::stod(get("window_hi"));
  }
  {
    const auto p = dir / "executions.csv";
    for (const auto& r : read_csv(p, "gpu,layer,block,slot,kind,batch,start_ns,end_ns,queue_delay_sum_ns")) {
      need_fields(r, 9, p);
      t.executions.push_back(ExecutionRecord{static_cast<int>(as_int(r[0], p)), as_layer(r[1], p), as_int(r[5], p),
                                             as_int(r[6], p), as_int(r[7], p), as_int(r[8], p)});
    }
  }
  {
    const auto p = dir / "transfers.csv";
    for (const auto& r : read_csv(p, "src,dst,bytes,tokens,issue_ns,phase1_end_ns,phase2_start_ns,phase2_end_ns")) {
      need_fields(r, 8, p);
      t.transfers.push_back(TransferRecord{static_cast<int>(as_int(r[0], p)), static_cast<int>(as_int(r[1], p)),
                                           as_int(r[2], p), as_int(r[3], p), as_int(r[4], p), as_int(r[5], p),
                                           as_int(r[6], p), as_int(r[7], p)});
    }
  }
  {
    const auto p = dir / "requests.csv";
    for (const auto& r : read_csv(p, "id,arrival_ns,completion_ns,input_len,output_len,dp_rank")) {
      need_fields(r, 6, p);
      RequestRecord rec;
      rec.id = as_int(r[0], p);
      if (rec.id != static_cast<RequestId>(t.requests.size())) throw std::runtime_error(p.string() + ": ids out of order");
      rec.arrival = as_int(r[1], p);
      if (!r[2].empty()) rec.completion = as_int(r[2], p);
      rec.input_len = static_cast<int>(as_int(r[3], p));
      rec.output_len = static_cast<int>(as_int(r[4], p));
      rec.dp_rank = static_cast<int>(as_int(r[5], p));
      t.requests.push_back(std::move(rec));
    }
  }
  auto request = [&](std::int64_t id, const fs::path& p) -> RequestRecord& {
    if (id < 0 || id >= static_cast<std::int64_t>(t.requests.size())) {
      throw std::runtime_error(p.string() + ": unknown request " + std::to_string(id));
    }
    return t.requests[static_cast<std::size_t>(id)];
  };
  {
    const auto p = dir / "tokens.csv";
    for (const auto& r : read_csv(p, "request_id,index,time_ns")) {
      need_fields(r, 3, p);
      auto& rec = request(as_int(r[0], p), p);
      if (as_int(r[1], p) != static_cast<std::int64_t>(rec.token_times.size())) {
        throw std::runtime_error(p.string() + ": token index gap for request " + r[0]);
      }
      rec.token_times.push_back(as_int(r[2], p));
    }
  }
  {
    const auto p = dir / "audit.csv";
    for (const auto& r :
         read_csv(p, "id,attention_visits,kv_allocs,expert_legs,merges,merged_legs,bad_merges,sampler_visits")) {
      need_fields(r, 8, p);
      auto& rec = request(as_int(r[0], p), p);
      rec.attention_visits = as_int(r[1], p);
      rec.kv_allocs = as_int(r[2], p);
      rec.expert_legs = as_int(r[3], p);
      rec.merges = as_int(r[4], p);
      rec.merged_legs = as_int(r[5], p);
      rec.bad_merges = as_int(r[6], p);
      rec.sampler_visits = as_int(r[7], p);
    }
  }
  {
    const auto p = dir / "queue_depth.csv";
    for (const auto& r : read_csv(p, "time_ns,gpu,layer,depth")) {
      need_fields(r, 4, p);
      t.queue_depth.push_back(
          QueueDepthSample{as_int(r[0], p), static_cast<int>(as_int(r[1], p)), as_layer(r[2], p), as_int(r[3], p)});
    }
  }
  {
    const auto p = dir / "gpus.csv";
    for (const auto& r : read_csv(p,
                                  "gpu,role,dp_rank,busy_ns,busy_fraction,stall_fraction,pool_pending,queued,kv_used,"
                                  "kv_reserved,kv_capacity")) {
      need_fields(r, 11, p);
      GpuRecord g;
      g.gpu = static_cast<int>(as_int(r[0], p));
      g.role = r[1];
      g.dp_rank = static_cast<int>(as_int(r[2], p));
      g.busy_ns = as_int(r[3], p);
      g.pool_pending = as_int(r[6], p);
      g.queued = as_int(r[7], p);
      g.kv_used = as_int(r[8], p);
      g.kv_reserved = as_int(r[9], p);
      g.kv_capacity = as_int(r[10], p);
      t.gpus.push_back(std::move(g));
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<SweepPoint> run_sweep(const SimConfig& base, const std::vector<double>& rates, const fs::path& dir,
                                  unsigned threads) {
  std::vector<SweepPoint> points(rates.size());
  std::vector<std::exception_ptr> errors(rates.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&]() {
    for (std::size_t i = next++; i < rates.size(); i = next++) {
      try {
        SimConfig cfg = base;
        cfg.workload.arrival_rate = rates[i];
        const fs::path out = dir / ("rate_" + format_double(rates[i]));
        SimTrace trace = run(cfg);
        emit_csv(trace, out);
        {
          std::ofstream ini(out / "config.ini", std::ios::binary);
          ini << dump_config(cfg);
        }
        points[i] = SweepPoint{rates[i], summarize(trace), out};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(rates.size())));
  std::vector<std::thread> pool;
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return points;
}

}  // namespace amoesim
