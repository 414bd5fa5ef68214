#include "amoesim/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace amoesim {

namespace pt = boost::property_tree;

SimTime SimConfig::horizon_ns() const {
  const double h = horizon_s > 0 ? horizon_s : 2.0 * workload.duration_s;
  return seconds_to_ns(h);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  throw ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) bad_value(key, value, "a number");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, value, "a number");
  }
}

std::int64_t to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(value, &pos);
    if (pos != value.size()) bad_value(key, value, "an integer");
    return v;
  } catch (const std::logic_error&) {
    bad_value(key, value, "an integer");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  bad_value(key, value, "a boolean");
}

std::vector<double> to_doubles(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const auto& part : split(value, ',')) out.push_back(to_double(key, part));
  return out;
}

[[noreturn]] void unknown_key(const std::string& section, const std::string& key) {
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

void set_layer_cost(LayerCostParams& p, const std::string& full, const std::string& field, const std::string& value) {
  if (field == "fixed_ns") {
    p.fixed_ns = to_double(full, value);
  } else if (field == "per_token_ns") {
    p.per_token_ns = to_double(full, value);
  } else if (field == "per_context_ns") {
    p.per_context_ns = to_double(full, value);
  } else if (field == "stage_split") {
    auto v = to_doubles(full, value);
    if (v.size() != kNumStages) throw ConfigError("config key '" + full + "': expected 5 stage fractions");
    std::copy(v.begin(), v.end(), p.stage_split.begin());
  } else if (field == "table") {
    // batch:ns pairs, comma separated
    p.table.clear();
    for (const auto& point : split(value, ',')) {
      auto colon = point.find(':');
      if (colon == std::string::npos) bad_value(full, point, "batch:ns");
      p.table.emplace_back(to_int(full, trim(point.substr(0, colon))), to_double(full, trim(point.substr(colon + 1))));
    }
  } else {
    throw ConfigError("unknown config key '" + full + "'");
  }
}

void set_link(LinkParams& l, const std::string& full, const std::string& field, const std::string& value) {
  if (field == "bandwidth") {
    l.bandwidth_bytes_per_s = to_double(full, value);
  } else if (field == "propagation_ns") {
    l.propagation_ns = to_int(full, value);
  } else if (field == "metadata_ns") {
    l.metadata_ns = to_int(full, value);
  } else {
    throw ConfigError("unknown config key '" + full + "'");
  }
}

std::pair<std::string, std::string> split_dotted(const std::string& key) {
  auto dot = key.find('.');
  if (dot == std::string::npos) return {key, {}};
  return {key.substr(0, dot), key.substr(dot + 1)};
}

}  // namespace

void set_config_value(SimConfig& cfg, const std::string& section, const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  const std::string full = section + "." + key;
  if (section == "model") {
    auto& m = cfg.model;
    if (key == "num_blocks") m.num_blocks = static_cast<int>(to_int(full, value));
    else if (key == "num_experts") m.num_experts = static_cast<int>(to_int(full, value));
    else if (key == "top_k") m.top_k = static_cast<int>(to_int(full, value));
    else if (key == "hidden_dim") m.hidden_dim = static_cast<int>(to_int(full, value));
    else if (key == "bytes_per_element") m.bytes_per_element = static_cast<int>(to_int(full, value));
    else unknown_key(section, key);
  } else if (section == "cluster") {
    auto& c = cfg.cluster;
    if (key == "attention_gpus") c.attention_gpus = static_cast<int>(to_int(full, value));
    else if (key == "expert_gpus") c.expert_gpus = static_cast<int>(to_int(full, value));
    else if (key == "kv_slots_per_attention_gpu") c.kv_slots_per_attention_gpu = to_int(full, value);
    else if (key == "node_of") {
      c.node_of.clear();
      if (!value.empty()) {
        for (const auto& part : split(value, ',')) c.node_of.push_back(static_cast<int>(to_int(full, part)));
      }
    } else unknown_key(section, key);
  } else if (section == "workload") {
    auto& w = cfg.workload;
    if (key == "preset") {
      WorkloadSpec p;
      if (value == "short") p = WorkloadSpec::short_preset();
      else if (value == "medium") p = WorkloadSpec::medium_preset();
      else if (value == "reasonable") p = WorkloadSpec::reasonable_preset();
      else bad_value(full, value, "short|medium|reasonable");
      w.input_min = p.input_min;
      w.input_max = p.input_max;
      w.output_min = p.output_min;
      w.output_max = p.output_max;
    } else if (key == "rate") w.arrival_rate = to_double(full, value);
    else if (key == "input_min") w.input_min = static_cast<int>(to_int(full, value));
    else if (key == "input_max") w.input_max = static_cast<int>(to_int(full, value));
    else if (key == "output_min") w.output_min = static_cast<int>(to_int(full, value));
    else if (key == "output_max") w.output_max = static_cast<int>(to_int(full, value));
    else if (key == "duration_s") w.duration_s = to_double(full, value);
    else if (key == "seed") w.seed = static_cast<std::uint64_t>(to_int(full, value));
    else unknown_key(section, key);
  } else if (section == "skew") {
    auto& s = cfg.skew;
    if (key == "kind") {
      if (value == "uniform") s.kind = SkewKind::Uniform;
      else if (value == "exponential") s.kind = SkewKind::Exponential;
      else bad_value(full, value, "uniform|exponential");
    } else if (key == "lambda") s.lambda = to_double(full, value);
    else if (key == "per_block_shuffle") s.per_block_shuffle = to_bool(full, value);
    else unknown_key(section, key);
  } else if (section == "scheduler") {
    auto& p = cfg.policy;
    if (key == "policy") {
      if (value == "mtfs") p.kind = PolicyKind::MTFS;
      else if (value == "flfs") p.kind = PolicyKind::FLFS;
      else if (value == "defrag") p.kind = PolicyKind::Defrag;
      else bad_value(full, value, "mtfs|flfs|defrag");
    } else if (key == "lookahead_depth") p.lookahead_depth = static_cast<int>(to_int(full, value));
    else if (key == "weight_decay") p.weight_decay = to_double(full, value);
    else if (key == "lookahead_divisor") p.lookahead_divisor = static_cast<int>(to_int(full, value));
    else if (key == "max_batch") {
      auto v = to_int(full, value);
      if (v < 0) bad_value(full, value, "a non-negative integer");
      p.max_batch = static_cast<std::size_t>(v);
    } else unknown_key(section, key);
  } else if (section == "perf") {
    auto [kind, field] = split_dotted(key);
    if (kind == "attention") set_layer_cost(cfg.perf.attention, full, field, value);
    else if (kind == "expert") set_layer_cost(cfg.perf.expert, full, field, value);
    else if (kind == "sampler") set_layer_cost(cfg.perf.sampler, full, field, value);
    else unknown_key(section, key);
  } else if (section == "perf.links") {
    auto [which, field] = split_dotted(key);
    if (which == "intra_node") set_link(cfg.cluster.intra_node, full, field, value);
    else if (which == "inter_node") set_link(cfg.cluster.inter_node, full, field, value);
    else unknown_key(section, key);
  } else if (section == "sim") {
    if (key == "mode") {
      if (value == "aep") cfg.mode = SimMode::AEP;
      else if (value == "sync_ep") cfg.mode = SimMode::SyncEP;
      else bad_value(full, value, "aep|sync_ep");
    } else if (key == "horizon_s") cfg.horizon_s = to_double(full, value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(to_int(full, value));
    else if (key == "steady_window") {
      auto v = to_doubles(full, value);
      if (v.size() != 2) throw ConfigError("config key '" + full + "': expected two fractions t0,t1");
      cfg.window_lo = v[0];
      cfg.window_hi = v[1];
    } else if (key == "record_queue_depth") cfg.record_queue_depth = to_bool(full, value);
    else unknown_key(section, key);
  } else {
    throw ConfigError("unknown config section '[" + section + "]'");
  }
}

SimConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  SimConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config key '" + section + "' appears outside any section");
    }
    static const char* const kSections[] = {"model", "cluster", "workload", "skew", "scheduler", "perf", "perf.links", "sim"};
    if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections)) {
      throw ConfigError("unknown config section '[" + section + "]'");
    }
    // Presets first so explicit ranges override them regardless of order.
    if (section == "workload") {
      if (auto preset = body.get_optional<std::string>(pt::ptree::path_type("preset", '\0'))) {
        set_config_value(cfg, section, "preset", *preset);
      }
    }
    for (const auto& [key, value] : body) {
      if (section == "workload" && key == "preset") continue;
      set_config_value(cfg, section, key, value.data());
    }
  }
  return cfg;
}

SimConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void apply_override(SimConfig& cfg, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
  const std::string lhs = trim(assignment.substr(0, eq));
  const std::string value = trim(assignment.substr(eq + 1));
  // Section names may themselves contain a dot ("perf.links").
  for (const char* two_part : {"perf.links."}) {
    const std::string prefix = two_part;
    if (lhs.rfind(prefix, 0) == 0) {
      set_config_value(cfg, prefix.substr(0, prefix.size() - 1), lhs.substr(prefix.size()), value);
      return;
    }
  }
  auto dot = lhs.find('.');
  if (dot == std::string::npos) throw ConfigError("override '" + assignment + "' must look like section.key=value");
  set_config_value(cfg, lhs.substr(0, dot), lhs.substr(dot + 1), value);
}

void apply_env_overrides(SimConfig& cfg) {
  if (const char* env = std::getenv("AMOESIM_SEED"); env != nullptr && *env != '\0') {
    const auto seed = static_cast<std::uint64_t>(to_int("AMOESIM_SEED", trim(env)));
    cfg.workload.seed = seed;
    cfg.seed = seed;
  }
}

std::string dump_config(const SimConfig& cfg) {
  std::ostringstream out;
  out << std::setprecision(17);
  const auto& m = cfg.model;
  out << "[model]\nnum_blocks = " << m.num_blocks << "\nnum_experts = " << m.num_experts << "\ntop_k = " << m.top_k
      << "\nhidden_dim = " << m.hidden_dim << "\nbytes_per_element = " << m.bytes_per_element << "\n\n";
  const auto& c = cfg.cluster;
  out << "[cluster]\nattention_gpus = " << c.attention_gpus << "\nexpert_gpus = " << c.expert_gpus
      << "\nkv_slots_per_attention_gpu = " << c.kv_slots_per_attention_gpu << "\nnode_of = ";
  for (std::size_t i = 0; i < c.node_of.size(); ++i) out << (i ? "," : "") << c.node_of[i];
  out << "\n\n";
  const auto& w = cfg.workload;
  out << "[workload]\nrate = " << w.arrival_rate << "\ninput_min = " << w.input_min << "\ninput_max = " << w.input_max
      << "\noutput_min = " << w.output_min << "\noutput_max = " << w.output_max << "\nduration_s = " << w.duration_s
      << "\nseed = " << w.seed << "\n\n";
  out << "[skew]\nkind = " << (cfg.skew.kind == SkewKind::Uniform ? "uniform" : "exponential")
      << "\nlambda = " << cfg.skew.lambda << "\nper_block_shuffle = " << (cfg.skew.per_block_shuffle ? "true" : "false")
      << "\n\n";
  const auto& p = cfg.policy;
  out << "[scheduler]\npolicy = " << to_string(p.kind) << "\nlookahead_depth = " << p.lookahead_depth
      << "\nweight_decay = " << p.weight_decay << "\nlookahead_divisor = " << p.lookahead_divisor
      << "\nmax_batch = " << p.max_batch << "\n\n";
  out << "[perf]\n";
  for (auto kind : {LayerKind::Attention, LayerKind::Expert, LayerKind::Sampler}) {
    const auto& lc = cfg.perf.of(kind);
    const std::string k = to_string(kind);
    out << k << ".fixed_ns = " << lc.fixed_ns << "\n" << k << ".per_token_ns = " << lc.per_token_ns << "\n"
        << k << ".per_context_ns = " << lc.per_context_ns << "\n" << k << ".stage_split = ";
    for (std::size_t i = 0; i < kNumStages; ++i) out << (i ? "," : "") << lc.stage_split[i];
    out << "\n";
    if (!lc.table.empty()) {
      out << k << ".table = ";
      for (std::size_t i = 0; i < lc.table.size(); ++i) {
        out << (i ? "," : "") << lc.table[i].first << ":" << lc.table[i].second;
      }
      out << "\n";
    }
  }
  out << "\n[perf.links]\n";
  for (const auto& [name, l] : {std::pair<const char*, const LinkParams*>{"intra_node", &c.intra_node},
                                {"inter_node", &c.inter_node}}) {
    out << name << ".bandwidth = " << l->bandwidth_bytes_per_s << "\n" << name << ".propagation_ns = "
        << l->propagation_ns << "\n" << name << ".metadata_ns = " << l->metadata_ns << "\n";
  }
  out << "\n[sim]\nmode = " << (cfg.mode == SimMode::AEP ? "aep" : "sync_ep") << "\nhorizon_s = " << cfg.horizon_s
      << "\nseed = " << cfg.seed << "\nsteady_window = " << cfg.window_lo << "," << cfg.window_hi
      << "\nrecord_queue_depth = " << (cfg.record_queue_depth ? "true" : "false") << "\n";
  return out.str();
}

std::vector<std::string> validate_sim_config(const SimConfig& cfg) {
  std::vector<std::string> out = validate_config(cfg.model, cfg.cluster).violations;
  const auto& w = cfg.workload;
  if (!(w.arrival_rate > 0)) out.emplace_back("workload.rate must be positive");
  if (w.input_min < 1 || w.input_min > w.input_max) out.emplace_back("workload input range must satisfy 1 <= min <= max");
  if (w.output_min < 1 || w.output_min > w.output_max) {
    out.emplace_back("workload output range must satisfy 1 <= min <= max");
  }
  if (w.duration_s < 0) out.emplace_back("workload.duration_s must be >= 0");
  if (cfg.skew.kind == SkewKind::Exponential && cfg.skew.lambda < 0) out.emplace_back("skew.lambda must be >= 0");
  for (auto& v : validate_perf(cfg.perf)) out.push_back(std::move(v));
  for (auto& v : validate_policy(cfg.policy)) out.push_back(std::move(v));
  if (!(cfg.window_lo >= 0 && cfg.window_lo < cfg.window_hi && cfg.window_hi <= 1.0)) {
    out.emplace_back("sim.steady_window must satisfy 0 <= t0 < t1 <= 1");
  }
  const std::int64_t need = static_cast<std::int64_t>(w.input_max) + w.output_max;
  if (cfg.cluster.kv_slots_per_attention_gpu > 0 && need > cfg.cluster.kv_slots_per_attention_gpu) {
    out.emplace_back("kv_slots_per_attention_gpu cannot hold the largest request (" + std::to_string(need) + " slots)");
  }
  return out;
}

}  // namespace amoesim
