#include "amoesim/engine.hpp"

#include <algorithm>
#include <cmath>

namespace amoesim {

const char* to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::MTFS: return "mtfs";
    case PolicyKind::FLFS: return "flfs";
    case PolicyKind::Defrag: return "defrag";
  }
  return "?";
}

std::vector<std::string> validate_policy(const SchedulerPolicy& policy) {
  std::vector<std::string> out;
  if (policy.lookahead_depth < 0) out.emplace_back("lookahead_depth must be >= 0");
  if (!(policy.weight_decay > 0.0 && policy.weight_decay < 1.0)) out.emplace_back("weight_decay must be in (0, 1)");
  if (policy.lookahead_divisor < 0) out.emplace_back("lookahead_divisor must be >= 0");
  return out;
}

// ---------------------------------------------------------------------------
// TokenPool

std::optional<TokenPool::Merge> TokenPool::add(TokenMeta leg, int expected) {
  auto key = std::make_pair(leg.request_id, leg.layer_id);
  auto it = pending_.find(key);
  if (it == pending_.end()) {
    if (expected <= 1) return Merge{std::move(leg), 1};
    Partial p;
    p.received = 1;
    p.token = std::move(leg);
    pending_.emplace(key, std::move(p));
    return std::nullopt;
  }
  Partial& p = it->second;
  p.received += 1;
  p.token.payload_tensors += leg.payload_tensors;
  p.token.payload_bytes += leg.payload_bytes;
  p.token.topk_weights.insert(p.token.topk_weights.end(), leg.topk_weights.begin(), leg.topk_weights.end());
  if (p.received < expected) return std::nullopt;
  Merge m{std::move(p.token), p.received};
  pending_.erase(it);
  return m;
}

std::vector<std::pair<RequestId, LayerId>> TokenPool::keys() const {
  std::vector<std::pair<RequestId, LayerId>> out;
  out.reserve(pending_.size());
  for (const auto& [k, _] : pending_) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------
// Scheduling

std::optional<LayerId> defrag_select(std::span<const QueueLoad> loads, int num_stages, double divisor,
                                     int lookahead_depth, double weight_decay) {
  if (num_stages <= 0) return std::nullopt;
  thread_local std::vector<double> stage_tokens;
  thread_local std::vector<double> lookahead;
  thread_local std::vector<char> computed;
  thread_local std::vector<double> decay;
  stage_tokens.assign(static_cast<std::size_t>(num_stages), 0.0);
  bool any = false;
  for (const auto& q : loads) {
    stage_tokens[static_cast<std::size_t>(q.layer.block % num_stages)] += static_cast<double>(q.depth);
    any = any || q.depth > 0;
  }
  if (!any) return std::nullopt;

  decay.resize(static_cast<std::size_t>(std::max(lookahead_depth, 0)) + 1);
  for (int k = 1; k <= lookahead_depth; ++k) decay[static_cast<std::size_t>(k)] = std::pow(weight_decay, k);
  lookahead.assign(static_cast<std::size_t>(num_stages), 0.0);
  computed.assign(static_cast<std::size_t>(num_stages), 0);

  std::optional<LayerId> best;
  double best_score = 0.0;
  for (const auto& q : loads) {
    if (q.depth == 0) continue;
    const int b = q.layer.block % num_stages;
    if (!computed[static_cast<std::size_t>(b)]) {
      double score = 0.0;
      for (int k = 1; k <= lookahead_depth; ++k) {
        const int next = (b + k) % num_stages;
        score += (stage_tokens[static_cast<std::size_t>(next)] / divisor) * decay[static_cast<std::size_t>(k)];
      }
      lookahead[static_cast<std::size_t>(b)] = score;
      computed[static_cast<std::size_t>(b)] = 1;
    }
    const double score = lookahead[static_cast<std::size_t>(b)] + static_cast<double>(q.depth);
    // loads are sorted, so strict > keeps the smallest LayerId on ties.
    if (!best || score > best_score) {
      best = q.layer;
      best_score = score;
    }
  }
  return best;
}

RuntimeState::RuntimeState(int gpu_id, std::vector<LayerId> hosted, const ModelConfig& model,
                           std::int64_t kv_capacity)
    : gpu_id_(gpu_id),
      num_blocks_(model.num_blocks),
      num_experts_(model.num_experts),
      top_k_(model.top_k),
      hosted_(std::move(hosted)),
      kv_capacity_(kv_capacity) {
  std::sort(hosted_.begin(), hosted_.end());
  hosted_.erase(std::unique(hosted_.begin(), hosted_.end()), hosted_.end());
  queues_.reserve(hosted_.size());
  for (std::size_t i = 0; i < hosted_.size(); ++i) {
    index_.emplace(hosted_[i], i);
    queues_.push_back(MicroQueue{hosted_[i], {}});
    if (hosted_[i].kind == LayerKind::Sampler) hosts_sampler_ = true;
  }
}

const MicroQueue& RuntimeState::queue(const LayerId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    throw RoutingFault("GPU " + std::to_string(gpu_id_) + " does not host layer " + to_string(id));
  }
  return queues_[it->second];
}

MicroQueue& RuntimeState::queue_mut(const LayerId& id) {
  return const_cast<MicroQueue&>(std::as_const(*this).queue(id));
}

RuntimeState::IngestResult RuntimeState::ingest(std::vector<TokenMeta> batch, SimTime now) {
  IngestResult result;
  for (auto& token : batch) {
    MicroQueue& q = queue_mut(token.layer_id);
    const bool needs_merge =
        top_k_ > 1 && ((token.layer_id.kind == LayerKind::Attention && token.layer_id.block > 0) ||
                       token.layer_id.kind == LayerKind::Sampler);
    if (needs_merge) {
      const RequestId rid = token.request_id;
      auto merged = pool_.add(std::move(token), top_k_);
      if (!merged) continue;
      result.merges.emplace_back(rid, merged->legs);
      q.tokens.push_back(QueuedToken{std::move(merged->token), now});
    } else {
      q.tokens.push_back(QueuedToken{std::move(token), now});
    }
    ++queued_total_;
    ++result.enqueued;
  }
  return result;
}

std::vector<QueueLoad> RuntimeState::loads() const {
  std::vector<QueueLoad> out;
  out.reserve(queues_.size());
  for (const auto& q : queues_) out.push_back({q.layer_id, q.depth()});
  return out;
}

std::optional<LayerId> RuntimeState::schedule(const SchedulerPolicy& policy) const {
  switch (policy.kind) {
    case PolicyKind::MTFS: return schedule_mtfs();
    case PolicyKind::FLFS: return schedule_flfs();
    case PolicyKind::Defrag: return schedule_defrag(policy);
  }
  return std::nullopt;
}

std::optional<LayerId> RuntimeState::schedule_mtfs() const {
  const MicroQueue* best = nullptr;
  for (const auto& q : queues_) {
    if (q.depth() == 0) continue;
    if (best == nullptr || q.depth() > best->depth()) best = &q;
  }
  if (best == nullptr) return std::nullopt;
  return best->layer_id;
}

std::optional<LayerId> RuntimeState::schedule_flfs() const {
  for (const auto& q : queues_) {
    if (q.depth() > 0) return q.layer_id;
  }
  return std::nullopt;
}

std::optional<LayerId> RuntimeState::schedule_defrag(const SchedulerPolicy& policy) const {
  if (queued_total_ == 0) return std::nullopt;
  const int stages = num_blocks_ + (hosts_sampler_ ? 1 : 0);
  // Default divisor: queues this GPU hosts per stage, i.e. the column count of
  // its local queue matrix.
  const double divisor = policy.lookahead_divisor > 0
                             ? policy.lookahead_divisor
                             : std::max(1.0, static_cast<double>(hosted_.size()) / stages);
  thread_local std::vector<QueueLoad> l;
  l.clear();
  for (const auto& q : queues_) l.push_back({q.layer_id, q.depth()});
  return defrag_select(l, stages, divisor, policy.lookahead_depth, policy.weight_decay);
}

ExecutionBatch RuntimeState::form_batch(const LayerId& layer, SimTime now, std::size_t max_batch) {
  MicroQueue& q = queue_mut(layer);
  if (q.tokens.empty()) throw std::logic_error("form_batch on empty queue " + to_string(layer));
  const std::size_t n = max_batch == 0 ? q.tokens.size() : std::min(max_batch, q.tokens.size());

  ExecutionBatch batch;
  batch.gpu = gpu_id_;
  batch.layer = layer;
  batch.start = now;
  batch.tokens.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    QueuedToken& qt = q.tokens.front();
    batch.queue_delay_sum += now - qt.enqueued;
    batch.total_context += qt.token.context_len;
    batch.tokens.push_back(std::move(qt.token));
    q.tokens.pop_front();
  }
  queued_total_ -= n;

  // One KV slot per request per decode step, charged on entry to block 0 and
  // shared by every block through the GPU's single page table.
  if (layer.kind == LayerKind::Attention && layer.block == 0) {
    for (const auto& t : batch.tokens) {
      auto it = block_table_.find(t.request_id);
      if (it == block_table_.end()) {
        throw std::logic_error("KV allocation for unadmitted request " + std::to_string(t.request_id));
      }
      if (kv_used_ + 1 > kv_capacity_) {
        throw std::logic_error("KV overflow on GPU " + std::to_string(gpu_id_));
      }
      it->second += 1;
      kv_used_ += 1;
      batch.kv_allocated += 1;
    }
  }
  return batch;
}

void RuntimeState::kv_admit(RequestId id, std::int64_t prompt_slots, std::int64_t reservation) {
  if (kv_reserved_ + reservation > kv_capacity_) {
    throw std::logic_error("KV reservation exceeds capacity on GPU " + std::to_string(gpu_id_));
  }
  kv_reserved_ += reservation;
  reservations_[id] = reservation;
  block_table_[id] = prompt_slots;
  kv_used_ += prompt_slots;
}

void RuntimeState::kv_release(RequestId id) {
  if (auto it = block_table_.find(id); it != block_table_.end()) {
    kv_used_ -= it->second;
    block_table_.erase(it);
  }
  if (auto it = reservations_.find(id); it != reservations_.end()) {
    kv_reserved_ -= it->second;
    reservations_.erase(it);
  }
}

void RuntimeState::mark_busy(SimTime until) {
  if (until < busy_until_) throw std::logic_error("busy_until must not decrease");
  busy_ = true;
  busy_until_ = until;
}

// ---------------------------------------------------------------------------
// Dispatcher

Dispatcher::Dispatcher(const ModelConfig& model, const Placement& placement,
                       std::vector<std::vector<double>> block_probs, Rng routing_rng)
    : model_(model),
      placement_(placement),
      block_probs_(std::move(block_probs)),
      rng_(routing_rng),
      token_bytes_(batch_payload_bytes(1, model)) {}

namespace {

// Groups (destination, token) pairs into per-destination batches, ordered by
// destination GPU; tokens keep their relative order within a destination.
std::vector<Outbound> group_by_destination(std::vector<std::pair<int, TokenMeta>>& routed) {
  std::stable_sort(routed.begin(), routed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Outbound> out;
  for (auto& [dst, token] : routed) {
    if (out.empty() || out.back().dst_gpu != dst) out.push_back(Outbound{dst, {}});
    out.back().tokens.push_back(std::move(token));
  }
  return out;
}

}  // namespace

DispatchResult Dispatcher::dispatch(const ExecutionBatch& batch, std::unordered_map<RequestId, RequestState>& requests,
                                    SimTime now) {
  DispatchResult result;
  const LayerId& layer = batch.layer;
  std::vector<std::pair<int, TokenMeta>> routed;

  auto lookup = [&requests](RequestId id) -> RequestState& {
    auto it = requests.find(id);
    if (it == requests.end()) throw std::logic_error("dispatch: unknown request " + std::to_string(id));
    return it->second;
  };

  switch (layer.kind) {
    case LayerKind::Attention: {
      routed.reserve(batch.tokens.size() * static_cast<std::size_t>(model_.top_k));
      // Permute by expert id so each destination receives contiguous groups.
      std::vector<std::pair<int, TokenMeta>> by_expert;
      by_expert.reserve(routed.capacity());
      const auto& probs = block_probs_[static_cast<std::size_t>(layer.block)];
      for (const auto& t : batch.tokens) {
        lookup(t.request_id);
        RouteResult r = route_token(rng_, probs, model_.top_k);
        for (std::size_t k = 0; k < r.experts.size(); ++k) {
          TokenMeta leg;
          leg.request_id = t.request_id;
          leg.layer_id = LayerId::expert(layer.block, r.experts[k]);
          leg.payload_tensors = 1;
          leg.payload_bytes = token_bytes_;
          leg.context_len = t.context_len;
          leg.topk_weights = {r.weights[k]};
          by_expert.emplace_back(r.experts[k], std::move(leg));
        }
      }
      std::stable_sort(by_expert.begin(), by_expert.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      for (auto& [e, leg] : by_expert) routed.emplace_back(placement_.at(leg.layer_id), std::move(leg));
      break;
    }
    case LayerKind::Expert: {
      routed.reserve(batch.tokens.size());
      const bool last = layer.block + 1 >= model_.num_blocks;
      for (const auto& t : batch.tokens) {
        const RequestState& req = lookup(t.request_id);
        TokenMeta out = t;
        out.layer_id = last ? LayerId::sampler(model_.num_blocks, req.dp_rank)
                            : LayerId::attention(layer.block + 1, req.dp_rank);
        out.payload_bytes = token_bytes_;
        routed.emplace_back(placement_.at(out.layer_id), std::move(out));
      }
      break;
    }
    case LayerKind::Sampler: {
      for (const auto& t : batch.tokens) {
        RequestState& req = lookup(t.request_id);
        req.generated += 1;
        req.per_token_times.push_back(now);
        ++result.emitted;
        if (req.generated >= req.output_len) {
          req.completion_time = now;
          result.completed.push_back(req.request_id);
          continue;
        }
        TokenMeta next;
        next.request_id = t.request_id;
        next.layer_id = LayerId::attention(0, req.dp_rank);
        next.payload_tensors = 1;
        next.payload_bytes = token_bytes_;
        next.context_len = t.context_len + 1;
        routed.emplace_back(placement_.at(next.layer_id), std::move(next));
      }
      break;
    }
  }
  result.outbound = group_by_destination(routed);
  return result;
}

}  // namespace amoesim
