#include "amoesim/core.hpp"

#include <charconv>
#include <utility>

namespace amoesim {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Attention: return "attention";
    case LayerKind::Expert: return "expert";
    case LayerKind::Sampler: return "sampler";
  }
  return "?";
}

std::string to_string(const LayerId& id) {
  char tag = id.kind == LayerKind::Attention ? 'A' : id.kind == LayerKind::Expert ? 'E' : 'S';
  return tag + std::to_string(id.block) + "." + std::to_string(id.slot);
}

std::optional<LayerId> parse_layer_id(const std::string& text) {
  if (text.size() < 4) return std::nullopt;
  LayerId id;
  switch (text[0]) {
    case 'A': id.kind = LayerKind::Attention; break;
    case 'E': id.kind = LayerKind::Expert; break;
    case 'S': id.kind = LayerKind::Sampler; break;
    default: return std::nullopt;
  }
  const char* first = text.data() + 1;
  const char* last = text.data() + text.size();
  auto [p, ec] = std::from_chars(first, last, id.block);
  if (ec != std::errc{} || p == last || *p != '.') return std::nullopt;
  auto [q, ec2] = std::from_chars(p + 1, last, id.slot);
  if (ec2 != std::errc{} || q != last) return std::nullopt;
  return id;
}

Placement::Placement(const ModelConfig& model, int dp_degree)
    : num_blocks_(model.num_blocks),
      num_experts_(model.num_experts),
      dp_degree_(dp_degree),
      attention_(static_cast<std::size_t>(model.num_blocks) * dp_degree, -1),
      expert_(static_cast<std::size_t>(model.num_blocks) * model.num_experts, -1),
      sampler_(static_cast<std::size_t>(dp_degree), -1) {}

const int* Placement::slot_ptr(const LayerId& id) const {
  switch (id.kind) {
    case LayerKind::Attention:
      if (id.block < 0 || id.block >= num_blocks_ || id.slot < 0 || id.slot >= dp_degree_) return nullptr;
      return &attention_[static_cast<std::size_t>(id.block) * dp_degree_ + id.slot];
    case LayerKind::Expert:
      if (id.block < 0 || id.block >= num_blocks_ || id.slot < 0 || id.slot >= num_experts_) return nullptr;
      return &expert_[static_cast<std::size_t>(id.block) * num_experts_ + id.slot];
    case LayerKind::Sampler:
      if (id.block != num_blocks_ || id.slot < 0 || id.slot >= dp_degree_) return nullptr;
      return &sampler_[static_cast<std::size_t>(id.slot)];
  }
  return nullptr;
}

int* Placement::slot_ptr(const LayerId& id) {
  return const_cast<int*>(std::as_const(*this).slot_ptr(id));
}

void Placement::assign(const LayerId& id, int gpu) {
  int* p = slot_ptr(id);
  if (p == nullptr) throw ConfigError("layer " + to_string(id) + " is outside the model's layer space");
  *p = gpu;
}

std::optional<int> Placement::find(const LayerId& id) const {
  const int* p = slot_ptr(id);
  if (p == nullptr || *p < 0) return std::nullopt;
  return *p;
}

int Placement::at(const LayerId& id) const {
  auto gpu = find(id);
  if (!gpu) throw std::logic_error("no GPU hosts layer " + to_string(id));
  return *gpu;
}

std::vector<LayerId> Placement::domain() const {
  std::vector<LayerId> out;
  out.reserve(attention_.size() + expert_.size() + sampler_.size());
  for (int b = 0; b < num_blocks_; ++b) {
    for (int r = 0; r < dp_degree_; ++r) out.push_back(LayerId::attention(b, r));
    for (int e = 0; e < num_experts_; ++e) out.push_back(LayerId::expert(b, e));
  }
  for (int r = 0; r < dp_degree_; ++r) out.push_back(LayerId::sampler(num_blocks_, r));
  return out;
}

std::vector<LayerId> Placement::unmapped() const {
  std::vector<LayerId> out;
  for (const auto& id : domain()) {
    if (!find(id)) out.push_back(id);
  }
  return out;
}

std::size_t Placement::size() const {
  return attention_.size() + expert_.size() + sampler_.size();
}

int ClusterConfig::node(int gpu) const {
  if (gpu < 0 || static_cast<std::size_t>(gpu) >= node_of.size()) return 0;
  return node_of[static_cast<std::size_t>(gpu)];
}

const LinkParams& ClusterConfig::link(int src, int dst) const {
  return node(src) == node(dst) ? intra_node : inter_node;
}

Placement default_placement(const ModelConfig& model, const ClusterConfig& cluster) {
  if (cluster.attention_gpus <= 0) throw ConfigError("default placement needs at least one attention GPU");
  if (cluster.expert_gpus <= 0) throw ConfigError("default placement needs at least one expert GPU");
  Placement p(model, cluster.attention_gpus);
  for (int b = 0; b < model.num_blocks; ++b) {
    for (int r = 0; r < cluster.attention_gpus; ++r) p.assign(LayerId::attention(b, r), r);
    for (int e = 0; e < model.num_experts; ++e) {
      p.assign(LayerId::expert(b, e), cluster.expert_gpu_index(e % cluster.expert_gpus));
    }
  }
  for (int r = 0; r < cluster.attention_gpus; ++r) p.assign(LayerId::sampler(model.num_blocks, r), r);
  return p;
}

ValidationReport validate_config(const ModelConfig& model, const ClusterConfig& cluster) {
  ValidationReport report;
  auto bad = [&report](std::string msg) { report.violations.push_back(std::move(msg)); };

  if (model.num_blocks < 1) bad("num_blocks must be >= 1");
  if (model.num_experts < 1) bad("num_experts must be >= 1");
  if (model.top_k < 1) bad("top_k must be >= 1");
  if (model.top_k > model.num_experts) bad("top_k exceeds num_experts");
  if (model.hidden_dim < 1) bad("hidden_dim must be >= 1");
  if (model.bytes_per_element < 1) bad("bytes_per_element must be >= 1");
  if (cluster.attention_gpus < 1) bad("attention_gpus must be >= 1");
  if (cluster.expert_gpus < 1) bad("expert_gpus must be >= 1");
  if (cluster.kv_slots_per_attention_gpu < 1) bad("kv_slots_per_attention_gpu must be positive");
  for (const auto* link : {&cluster.intra_node, &cluster.inter_node}) {
    if (!(link->bandwidth_bytes_per_s > 0)) bad("link bandwidth must be positive");
    if (link->propagation_ns < 0 || link->metadata_ns < 0) bad("link latencies must be non-negative");
  }
  if (!cluster.node_of.empty() && static_cast<int>(cluster.node_of.size()) != cluster.total_gpus()) {
    bad("node_of has " + std::to_string(cluster.node_of.size()) + " entries for " +
        std::to_string(cluster.total_gpus()) + " GPUs");
  }
  if (!report.ok()) return report;

  if (cluster.placement) {
    const Placement& p = *cluster.placement;
    if (p.num_blocks() != model.num_blocks || p.num_experts() != model.num_experts ||
        p.dp_degree() != cluster.attention_gpus) {
      bad("placement shape does not match model/cluster");
      return report;
    }
    for (const auto& id : p.unmapped()) bad("unmapped layer " + to_string(id));
    for (const auto& id : p.domain()) {
      auto gpu = p.find(id);
      if (gpu && (*gpu < 0 || *gpu >= cluster.total_gpus())) {
        bad("layer " + to_string(id) + " placed on nonexistent GPU " + std::to_string(*gpu));
      }
    }
  }
  return report;
}

}  // namespace amoesim
