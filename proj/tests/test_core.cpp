#include <doctest.h>

#include <algorithm>
#include <set>

#include "amoesim/core.hpp"

using namespace amoesim;

TEST_CASE("layer ids order block-major, attention before experts before sampler") {
  const LayerId a0 = LayerId::attention(0, 3);
  const LayerId e0 = LayerId::expert(0, 0);
  const LayerId e0b = LayerId::expert(0, 5);
  const LayerId a1 = LayerId::attention(1, 0);
  const LayerId s = LayerId::sampler(32, 0);
  CHECK(a0 < e0);
  CHECK(e0 < e0b);
  CHECK(e0b < a1);
  CHECK(LayerId::expert(31, 7) < s);
  CHECK(LayerId::attention(0, 0) < a0);
}

TEST_CASE("layer id text round trip") {
  for (const LayerId& id : {LayerId::attention(3, 0), LayerId::expert(3, 5), LayerId::sampler(32, 1)}) {
    const auto text = to_string(id);
    CHECK(text.find(',') == std::string::npos);
    auto back = parse_layer_id(text);
    REQUIRE(back);
    CHECK(*back == id);
  }
  CHECK(to_string(LayerId::expert(3, 5)) == "E3.5");
  CHECK(to_string(LayerId::sampler(32, 1)) == "S32.1");
  CHECK_FALSE(parse_layer_id("X1.2"));
  CHECK_FALSE(parse_layer_id("A1"));
  CHECK_FALSE(parse_layer_id(""));
}

TEST_CASE("default placement puts expert e on expert GPU e mod E") {
  ModelConfig model;
  model.num_blocks = 4;
  model.num_experts = 16;
  ClusterConfig cluster;
  cluster.attention_gpus = 8;
  cluster.expert_gpus = 8;
  const Placement p = default_placement(model, cluster);
  CHECK(p.unmapped().empty());
  CHECK(p.size() == static_cast<std::size_t>(4 * 8 + 4 * 16 + 8));
  for (int b = 0; b < 4; ++b) {
    for (int e = 0; e < 16; ++e) CHECK(p.at(LayerId::expert(b, e)) == 8 + e % 8);
    for (int r = 0; r < 8; ++r) CHECK(p.at(LayerId::attention(b, r)) == r);
  }
  for (int r = 0; r < 8; ++r) CHECK(p.at(LayerId::sampler(4, r)) == r);

  // every GPU hosts something, experts of one GPU span all blocks
  std::set<int> used;
  for (const auto& id : p.domain()) used.insert(p.at(id));
  CHECK(used.size() == 16);
}

TEST_CASE("placement domain is sorted and complete") {
  ModelConfig model;
  model.num_blocks = 2;
  model.num_experts = 3;
  Placement p(model, 2);
  auto dom = p.domain();
  CHECK(std::is_sorted(dom.begin(), dom.end()));
  CHECK(dom.size() == p.size());
  CHECK(p.unmapped().size() == dom.size());
  p.assign(LayerId::expert(1, 2), 4);
  CHECK(p.find(LayerId::expert(1, 2)) == 4);
  CHECK_THROWS_AS(p.assign(LayerId::expert(2, 0), 0), ConfigError);
  CHECK_THROWS_AS(p.assign(LayerId::attention(0, 2), 0), ConfigError);
}

TEST_CASE("validate_config flags bad shapes") {
  ModelConfig model;
  ClusterConfig cluster;
  CHECK(validate_config(model, cluster).ok());

  model.top_k = 9;
  CHECK_FALSE(validate_config(model, cluster).ok());
  model.top_k = 2;

  cluster.node_of = {0, 0, 1};
  auto r = validate_config(model, cluster);
  REQUIRE_FALSE(r.ok());
  CHECK(r.violations[0].find("node_of") != std::string::npos);
  cluster.node_of.clear();

  Placement partial(model, cluster.attention_gpus);
  cluster.placement = partial;
  r = validate_config(model, cluster);
  CHECK_FALSE(r.ok());
  CHECK(r.violations.front().find("unmapped") != std::string::npos);

  cluster.placement = default_placement(model, cluster);
  cluster.placement->assign(LayerId::expert(0, 0), 99);
  r = validate_config(model, cluster);
  REQUIRE(r.violations.size() == 1);
  CHECK(r.violations[0].find("nonexistent GPU 99") != std::string::npos);
}

TEST_CASE("links follow node assignment") {
  ClusterConfig cluster;
  CHECK(cluster.link(0, 5).bandwidth_bytes_per_s == doctest::Approx(600e9));
  cluster.node_of = {0, 0, 1, 1, 0, 0, 1, 1};
  CHECK(cluster.link(0, 4).bandwidth_bytes_per_s == doctest::Approx(600e9));
  CHECK(cluster.link(0, 6).bandwidth_bytes_per_s == doctest::Approx(12.5e9));
  CHECK(cluster.node(7) == 1);
}

TEST_CASE("request kv need is input plus output") {
  RequestState r;
  r.input_len = 70;
  r.output_len = 130;
  CHECK(r.kv_need() == 200);
  CHECK_FALSE(r.admitted());
  CHECK_FALSE(r.done());
}
