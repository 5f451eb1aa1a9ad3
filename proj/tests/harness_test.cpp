#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

#include "deltasync/codec/delta.hpp"
#include "deltasync/harness/payload_model.hpp"
#include "deltasync/harness/runner.hpp"
#include "deltasync/harness/scenario.hpp"
#include "deltasync/roles/synthetic.hpp"

using namespace deltasync;
using namespace deltasync::harness;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& tag) {
  static int counter = 0;
  auto p = fs::temp_directory_path() /
           ("harness_test_" + std::to_string(::getpid()) + "_" + tag + "_" + std::to_string(counter++));
  fs::remove_all(p);
  return p;
}

json small_scenario() {
  return json::parse(R"({
    "name": "small",
    "seed": 3,
    "steps": 3,
    "mode": "delta",
    "model": {"elements": 300000, "layers": 2, "rho": 0.01},
    "batch_size": 4,
    "group_size": 2,
    "tokens_per_rollout": 50,
    "transport": {"streams": 2, "segment_size": 16384},
    "lease": {"min_s": 2, "initial_median_s": 0.5},
    "training_delay_s": 0.1,
    "heartbeat_s": 0.2,
    "stall_timeout_s": 30,
    "regions": [
      {"name": "r1", "link": {"rate_gbps": 1, "latency_ms": 2},
       "actors": [{"name": "a", "tau": 20000}, {"name": "b", "tau": 20000}]}
    ]
  })");
}

void expect_invalid(const json& j, const std::string& needle) {
  try {
    parse_scenario(j);
    ADD_FAILURE() << "accepted invalid scenario, expected: " << needle;
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_scenario);
    EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
  }
}

}  // namespace

TEST(Scenario, ParsesAndRoundTrips) {
  auto s = parse_scenario(small_scenario());
  EXPECT_EQ(s.actor_count(), 2u);
  EXPECT_EQ(s.effective_streams(), 1u);
  s.mode = RunMode::delta_multistream;
  EXPECT_EQ(s.effective_streams(), 2u);
  auto again = parse_scenario(to_json(s));
  EXPECT_EQ(to_json(again), to_json(s));
  EXPECT_DOUBLE_EQ(again.regions[0].link.rate_bps, 1e9);
}

TEST(Scenario, RejectsInvalidFields) {
  auto j = small_scenario();
  j["modle"] = 1;
  expect_invalid(j, "unknown key");
  j = small_scenario();
  j["model"]["rho"] = 0;
  expect_invalid(j, "rho");
  j = small_scenario();
  j["model"]["elements"] = 0;
  expect_invalid(j, "elements");
  j = small_scenario();
  j["steps"] = 0;
  expect_invalid(j, "steps");
  j = small_scenario();
  j["mode"] = "sparse";
  expect_invalid(j, "mode");
  j = small_scenario();
  j["regions"][0]["actors"][1]["name"] = "a";
  expect_invalid(j, "duplicate actor");
  j = small_scenario();
  j["regions"][0]["link"]["loss"] = 1.5;
  expect_invalid(j, "loss");
  j = small_scenario();
  j["regions"] = json::array();
  expect_invalid(j, "region");
}

TEST(Scenario, FaultTargetsMustExist) {
  auto j = small_scenario();
  j["faults"] = json::array({{{"kind", "kill_actor"}, {"target", "zzz"}, {"step", 2}}});
  expect_invalid(j, "not an actor");
  j["faults"] = json::array({{{"kind", "partition_region"}, {"target", "a"}, {"step", 2}}});
  expect_invalid(j, "not a region");
  j["faults"] = json::array({{{"kind", "kill_relay"}, {"target", "a"}, {"step", 2}}});
  expect_invalid(j, "not a relay");
  j["relay_enabled"] = true;
  EXPECT_NO_THROW(parse_scenario(j));
  j["faults"] = json::array({{{"kind", "kill_actor"}, {"target", "a"}, {"step", 9}}});
  expect_invalid(j, "step out of range");
  j["faults"] = json::array({{{"kind", "kill_actor"}, {"target", "a"}}});
  expect_invalid(j, "exactly one");
}

TEST(Scenario, RelayDefaultsToFirstActorOfMultiActorRegion) {
  auto j = small_scenario();
  j["relay_enabled"] = true;
  auto s = parse_scenario(j);
  ASSERT_TRUE(s.relay_of(s.regions[0]).has_value());
  EXPECT_EQ(*s.relay_of(s.regions[0]), 0u);
  j["regions"][0]["actors"][1]["relay"] = true;
  s = parse_scenario(j);
  EXPECT_EQ(*s.relay_of(s.regions[0]), 1u);
  j["regions"][0]["actors"] = json::array({{{"name", "solo"}}});
  s = parse_scenario(j);
  EXPECT_FALSE(s.relay_of(s.regions[0]).has_value());
}

TEST(PayloadModel, LayoutMatchesSyntheticModel) {
  for (auto [n, layers] : {std::pair<std::uint64_t, std::uint32_t>{1'000'000, 4}, {123'457, 3}, {500, 8}}) {
    auto m = roles::make_model(n, codec::ElementType::f16, layers, 1);
    auto items = codec::inference_layout(m.params, m.fusion);
    auto layout = synthetic_layout(n, layers);
    ASSERT_EQ(items.size(), layout.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      EXPECT_EQ(items[i].name, layout[i].first);
      EXPECT_EQ(items[i].element_count, layout[i].second);
    }
  }
}

TEST(PayloadModel, GapFormulaMatchesMonteCarlo) {
  for (double rho : {0.001, 0.01, 0.03, 0.2}) {
    const std::uint64_t n = 2'000'000;
    const auto nnz = static_cast<std::uint64_t>(rho * n);
    const double sampled = sampled_varint_bytes(n, nnz, 11);
    EXPECT_NEAR(expected_varint_bytes(rho), sampled, 0.01 * sampled) << rho;
  }
  EXPECT_NEAR(expected_varint_bytes(0.01), 1.2787, 0.001);
}

TEST(PayloadModel, ZeroRhoIsHeadersOnly) {
  auto e = payload_model({.elements = 1'000'000, .layers = 4, .rho = 0.0, .width = 2});
  EXPECT_EQ(e.nnz, 0);
  double headers = codec::kCheckpointHeaderSize;
  for (const auto& [name, n] : synthetic_layout(1'000'000, 4)) headers += tensor_record_overhead(name);
  EXPECT_DOUBLE_EQ(e.total, headers);
}

TEST(PayloadModel, NaiveInt32RatioIsBracketed) {
  auto e = payload_model({.elements = 10'000'000, .layers = 4, .rho = 0.01, .width = 2});
  EXPECT_GE(e.naive_ratio(), 1.4);
  EXPECT_LE(e.naive_ratio(), 2.1);
}

TEST(PayloadModel, PredictsCodecOutput) {
  for (double cluster : {0.0, 0.5}) {
    const std::uint64_t n = 2'000'000;
    auto m = roles::make_model(n, codec::ElementType::f16, 4, 5);
    roles::UpdateGenerator gen{0.01, cluster, 16.0, 9};
    auto next = m.params;
    gen.apply(next, 1);
    auto bytes = codec::extract_delta(m.params, next, m.fusion, codec::DeltaMode::replace, 1, 0).serialize();
    auto view = codec::parse_checkpoint(bytes);
    std::uint64_t index_bytes = 0, nnz = 0;
    for (const auto& t : view.tensors) {
      index_bytes += t.index_stream.size();
      nnz += t.nnz;
    }
    auto e = payload_model({.elements = n, .layers = 4, .rho = 0.01, .width = 2, .cluster_fraction = cluster});
    EXPECT_NEAR(static_cast<double>(bytes.size()), e.total, 0.05 * e.total) << cluster;
    EXPECT_NEAR(static_cast<double>(index_bytes) / nnz, e.mean_index_bytes, 0.05 * e.mean_index_bytes) << cluster;
  }
}

TEST(Runner, SmallRunIsLosslessAndAccounted) {
  auto s = parse_scenario(small_scenario());
  const auto dir = scratch("small");
  auto r = run_scenario(s, dir);
  ASSERT_TRUE(r.ok) << r.error;
  ASSERT_EQ(r.steps.size(), 3u);
  for (const auto& st : r.steps) {
    EXPECT_EQ(st.record.accepted, 4u);
    EXPECT_EQ(st.record.tokens, 4u * 2 * 50);
  }
  EXPECT_TRUE(r.lossless());
  EXPECT_TRUE(r.accounting_consistent());
  EXPECT_EQ(r.lag_violations(), 0u);
  for (const char* f : {"steps.csv", "summary.json", "events.jsonl", "scenario.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(fs::exists(dir / "ckpt"), true);
  auto summary = load_summary(dir);
  EXPECT_EQ(summary["status"], "ok");
  EXPECT_EQ(summary["steps"].size(), 3u);
  EXPECT_NE(render_report(summary).find("lossless=yes"), std::string::npos);
  std::ifstream csv(dir / "steps.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, kStepsCsvHeader);
  fs::remove_all(dir);
}

TEST(Runner, RefusesToOverwriteARun) {
  auto s = parse_scenario(small_scenario());
  s.steps = 1;
  const auto dir = scratch("twice");
  ASSERT_TRUE(run_scenario(s, dir).ok);
  EXPECT_THROW(run_scenario(s, dir), Error);
  fs::remove_all(dir);
}

TEST(Runner, SameSeedGivesSamePayloadColumn) {
  auto s = parse_scenario(small_scenario());
  const auto d1 = scratch("det1"), d2 = scratch("det2");
  auto a = run_scenario(s, d1);
  auto b = run_scenario(s, d2);
  ASSERT_TRUE(a.ok && b.ok);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(a.steps[i].record.payload_bytes, b.steps[i].record.payload_bytes);
  EXPECT_EQ(a.version_digests, b.version_digests);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Runner, DeltaAndFullModesReachIdenticalStates) {
  auto s = parse_scenario(small_scenario());
  const auto d1 = scratch("delta"), d2 = scratch("full");
  auto delta = run_scenario(s, d1);
  s.mode = RunMode::full_multistream;
  auto full = run_scenario(s, d2);
  ASSERT_TRUE(delta.ok && full.ok);
  EXPECT_EQ(delta.version_digests, full.version_digests);
  EXPECT_TRUE(delta.lossless());
  EXPECT_TRUE(full.lossless());
  for (std::size_t i = 0; i < delta.steps.size(); ++i)
    EXPECT_LT(delta.steps[i].record.payload_bytes * 20, full.steps[i].record.payload_bytes);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(Runner, KilledRelayFallsBackToHub) {
  auto j = small_scenario();
  j["relay_enabled"] = true;
  j["steps"] = 5;
  j["regions"][0]["actors"].push_back({{"name", "c"}, {"tau", 20000}});
  j["faults"] = json::array({{{"kind", "kill_relay"}, {"target", "a"}, {"step", 3}, {"delay_s", 0.3}}});
  auto s = parse_scenario(j);
  const auto dir = scratch("relay");
  auto r = run_scenario(s, dir);
  ASSERT_TRUE(r.ok) << r.error;
  EXPECT_TRUE(r.lossless());
  EXPECT_EQ(r.lag_violations(), 0u);
  EXPECT_EQ(r.counters.duplicate_settlements, 0u);
  for (const auto& a : r.actors) {
    if (a.name == "a") {
      EXPECT_TRUE(a.killed);
    } else {
      EXPECT_EQ(a.active_version, 5u) << a.name;
      EXPECT_FALSE(a.via_relay) << a.name;
    }
  }
  // Before the kill the peers were fed by the relay, afterwards by the hub.
  EXPECT_GT(r.steps[0].relay_egress_bytes, 0u);
  EXPECT_EQ(r.steps.back().relay_egress_bytes, 0u);
  fs::remove_all(dir);
}

TEST(Runner, PartitionedRegionIsExcludedWithDecayThenRejoins) {
  auto j = small_scenario();
  j["steps"] = 14;
  j["heartbeat_s"] = 0.1;
  j["lease"]["min_s"] = 1;
  j["regions"] = json::array(
      {{{"name", "r1"}, {"link", {{"rate_gbps", 1}, {"latency_ms", 2}}}, {"actors", {{{"name", "a"}, {"tau", 1000}}}}},
       {{"name", "r2"}, {"link", {{"rate_gbps", 1}, {"latency_ms", 2}}}, {"actors", {{{"name", "b"}, {"tau", 1000}}}}}});
  j["faults"] = json::array({{{"kind", "partition_region"}, {"target", "r2"}, {"step", 2}, {"duration_s", 4}}});
  auto s = parse_scenario(j);
  const auto dir = scratch("partition");
  auto r = run_scenario(s, dir);
  ASSERT_TRUE(r.ok) << r.error;
  EXPECT_TRUE(r.lossless());
  EXPECT_EQ(r.lag_violations(), 0u);
  std::uint64_t b = 0;
  for (const auto& a : r.actors) {
    if (a.name == "b") b = a.id;
  }
  const double alpha = s.scheduler.alpha;
  int consecutive = 0;
  bool excluded_once = false, rejoined = false;
  for (std::size_t i = 1; i < r.steps.size(); ++i) {
    const auto& prev = r.steps[i - 1].record;
    const auto& cur = r.steps[i].record;
    const bool ex_prev = std::count(prev.excluded.begin(), prev.excluded.end(), b) > 0;
    const bool ex_cur = std::count(cur.excluded.begin(), cur.excluded.end(), b) > 0;
    excluded_once = excluded_once || ex_cur;
    if (ex_prev && ex_cur) {
      EXPECT_DOUBLE_EQ(cur.tau.at(b), std::max(s.scheduler.min_tau, prev.tau.at(b) * alpha)) << "step " << cur.step;
      ++consecutive;
    }
    // Eligible again: the decayed estimate is kept, not decayed further.
    if (ex_prev && !ex_cur) {
      rejoined = true;
      EXPECT_DOUBLE_EQ(cur.tau.at(b), prev.tau.at(b)) << "step " << cur.step;
    }
  }
  EXPECT_TRUE(excluded_once);
  EXPECT_GT(consecutive, 0);
  EXPECT_TRUE(rejoined);
  for (const auto& a : r.actors) EXPECT_EQ(a.active_version, s.steps) << a.name;
  fs::remove_all(dir);
}

#ifdef DELTASYNC_CLI
namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string(DELTASYNC_CLI) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Cli, ExitCodes) {
  const auto dir = scratch("cli");
  fs::create_directories(dir);
  auto write = [&](const std::string& name, const json& j) {
    std::ofstream(dir / name) << j.dump();
    return (dir / name).string();
  };
  auto good = small_scenario();
  good["steps"] = 1;
  const auto good_path = write("good.json", good);
  auto bad = good;
  bad["bogus"] = true;
  const auto bad_path = write("bad.json", bad);
  auto doomed = good;
  doomed["stall_timeout_s"] = 1.5;
  doomed["faults"] = json::array({{{"kind", "kill_actor"}, {"target", "a"}, {"step", 1}},
                                  {{"kind", "kill_actor"}, {"target", "b"}, {"step", 1}}});
  const auto doomed_path = write("doomed.json", doomed);

  EXPECT_EQ(cli("run " + bad_path + " --out " + (dir / "r0").string()), 2);
  EXPECT_EQ(cli("run " + (dir / "missing.json").string()), 2);
  EXPECT_EQ(cli("run " + good_path + " --mode nonsense --out " + (dir / "r1").string()), 2);
  EXPECT_EQ(cli("run " + good_path + " --steps 2 --seed 5 --mode full --out " + (dir / "r2").string()), 0);
  EXPECT_EQ(load_summary(dir / "r2")["steps"].size(), 2u);
  EXPECT_EQ(load_summary(dir / "r2")["mode"], "full");
  EXPECT_EQ(cli("run " + doomed_path + " --out " + (dir / "r3").string()), 3);
  EXPECT_EQ(load_summary(dir / "r3")["status"], "failed");
  EXPECT_EQ(cli("report " + (dir / "r2").string()), 0);
  EXPECT_EQ(cli("report " + (dir / "nowhere").string()), 3);
  EXPECT_EQ(cli("model-payload --elements 1000000 --rho 0.01"), 0);
  EXPECT_EQ(cli("no-such-command"), 2);
  fs::remove_all(dir);
}

TEST(Cli, CodecToolRoundTrip) {
  const auto dir = scratch("codec");
  fs::create_directories(dir);
  const auto p = [&](const char* n) { return (dir / n).string(); };
  ASSERT_EQ(cli("codec synth -o " + p("v0.spps") + " --elements 200000 --layers 2 --seed 4"), 0);
  ASSERT_EQ(cli("codec synth -o " + p("v1.spps") + " --elements 200000 --layers 2 --seed 4 --steps 1 --rho 0.02"), 0);
  ASSERT_EQ(cli("codec encode " + p("v0.spps") + " " + p("v1.spps") + " -o " + p("d1.spdc")), 0);
  ASSERT_EQ(cli("codec encode " + p("v0.spps") + " " + p("v1.spps") + " --dense -o " + p("full.spdc")), 0);
  ASSERT_EQ(cli("codec inspect " + p("d1.spdc")), 0);
  ASSERT_EQ(cli("codec decode " + p("d1.spdc") + " --base " + p("v0.spps") + " -o " + p("out.spps")), 0);
  ASSERT_EQ(cli("codec decode " + p("full.spdc") + " --base " + p("v0.spps") + " -o " + p("out2.spps")), 0);
  const auto a = codec::parse_parameter_set(codec::read_file(p("out.spps")));
  const auto b = codec::parse_parameter_set(codec::read_file(p("out2.spps")));
  const auto v1 = codec::parse_parameter_set(codec::read_file(p("v1.spps")));
  EXPECT_EQ(codec::layout_digest(a), codec::layout_digest(b));
  EXPECT_EQ(codec::layout_digest(a), codec::layout_digest(v1, codec::standard_fusion(v1)));
  auto bytes = codec::read_file(p("d1.spdc"));
  bytes.back() ^= 1;
  codec::write_file(p("bad.spdc"), bytes);
  EXPECT_EQ(cli("codec inspect " + p("bad.spdc")), 3);
  fs::remove_all(dir);
}
#endif
