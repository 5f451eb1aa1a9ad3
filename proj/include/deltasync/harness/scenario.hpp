#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/codec/parameter_set.hpp"
#include "deltasync/common.hpp"
#include "deltasync/control/scheduler.hpp"
#include "deltasync/transport/link.hpp"
#include "deltasync/transport/segment.hpp"

namespace deltasync::harness {

using json = nlohmann::json;

enum class RunMode { delta, full, delta_multistream, full_multistream };

inline const char* to_string(RunMode m) {
  switch (m) {
    case RunMode::delta: return "delta";
    case RunMode::full: return "full";
    case RunMode::delta_multistream: return "delta_multistream";
    case RunMode::full_multistream: return "full_multistream";
  }
  return "?";
}

inline RunMode parse_run_mode(const std::string& s) {
  if (s == "delta") return RunMode::delta;
  if (s == "full") return RunMode::full;
  if (s == "delta_multistream") return RunMode::delta_multistream;
  if (s == "full_multistream") return RunMode::full_multistream;
  throw Error(ErrorCode::invalid_scenario, "unknown mode '" + s + "'");
}

inline bool is_full(RunMode m) { return m == RunMode::full || m == RunMode::full_multistream; }
inline bool is_multistream(RunMode m) { return m == RunMode::delta_multistream || m == RunMode::full_multistream; }

enum class FaultKind { kill_actor, partition_region, kill_relay };

inline const char* to_string(FaultKind k) {
  switch (k) {
    case FaultKind::kill_actor: return "kill_actor";
    case FaultKind::partition_region: return "partition_region";
    case FaultKind::kill_relay: return "kill_relay";
  }
  return "?";
}

struct ModelSpec {
  std::uint64_t elements = 1'000'000;
  codec::ElementType element_type = codec::ElementType::f16;
  std::uint32_t layers = 4;
  double rho = 0.01;
  double cluster_fraction = 0.0;
  double mean_run = 16.0;
  codec::DeltaMode delta_mode = codec::DeltaMode::replace;
};

struct ActorSpec {
  std::string name;
  double tau = 1000.0;  // true tokens/s
  double jitter = 0.0;
  bool relay = false;
};

struct RegionSpec {
  std::string name;
  transport::LinkShape link;        // hub -> region
  transport::LinkShape relay_link;  // relay -> regional peers
  std::vector<ActorSpec> actors;
};

struct FaultSpec {
  FaultKind kind = FaultKind::kill_actor;
  std::string target;
  std::optional<std::uint64_t> step;  // fire after this step's jobs are issued...
  std::optional<double> at_s;         // ...or this long after the run starts
  double delay_s = 0.0;               // extra delay after the step trigger
  double duration_s = 10.0;           // partitions only
};

struct Scenario {
  std::string name = "scenario";
  std::uint64_t seed = 1;
  std::uint64_t steps = 3;
  RunMode mode = RunMode::delta;
  ModelSpec model;
  std::uint64_t batch_size = 8;  // B
  std::uint64_t group_size = 1;  // G, prompts per job
  std::uint64_t tokens_per_rollout = 100;
  std::size_t streams = transport::kDefaultStreams;
  std::size_t segment_size = 256 * 1024;
  bool relay_enabled = false;
  control::SchedulerMode scheduler_mode = control::SchedulerMode::heterogeneity_aware;
  control::SchedulerParams scheduler;
  double initial_tau = 1000.0;
  double lease_multiplier = 2.5;
  double lease_min_s = 5.0;
  double lease_max_s = 120.0;
  double lease_initial_median_s = 4.0;
  double training_delay_s = 4.0;
  double heartbeat_s = 1.0;
  double stall_timeout_s = 120.0;
  double commit_wait_s = 60.0;
  double staging_grace_s = 30.0;
  bool verify_state = true;
  std::vector<RegionSpec> regions;
  std::vector<FaultSpec> faults;

  // Streams per session for the configured mode.
  std::size_t effective_streams() const { return is_multistream(mode) ? streams : 1; }
  std::size_t actor_count() const {
    std::size_t n = 0;
    for (const auto& r : regions) n += r.actors.size();
    return n;
  }
  // Index of the relay actor in `r`, if relaying applies to it.
  std::optional<std::size_t> relay_of(const RegionSpec& r) const {
    if (!relay_enabled || r.actors.size() < 2) return std::nullopt;
    for (std::size_t i = 0; i < r.actors.size(); ++i) {
      if (r.actors[i].relay) return i;
    }
    return 0;
  }

  void validate() const;
};

namespace detail {

[[noreturn]] inline void bad(const std::string& what) { throw Error(ErrorCode::invalid_scenario, what); }

// Rejects keys the schema does not know, so typos fail loudly.
inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) bad(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) bad("unknown key '" + k + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    bad(where + "." + key + " has the wrong type");
  }
}

inline Duration ms(double v) { return from_seconds(v / 1000.0); }

inline transport::LinkShape parse_link(const json& j, const std::string& where, std::uint64_t seed) {
  check_keys(j, where, {"rate_gbps", "latency_ms", "jitter_ms", "loss", "corrupt", "burst_bytes"});
  transport::LinkShape s;
  double rate_gbps = 0, latency = 0, jitter = 0;
  read(j, "rate_gbps", rate_gbps, where);
  read(j, "latency_ms", latency, where);
  read(j, "jitter_ms", jitter, where);
  read(j, "loss", s.loss, where);
  read(j, "corrupt", s.corrupt, where);
  read(j, "burst_bytes", s.burst_bytes, where);
  if (rate_gbps < 0) bad(where + ".rate_gbps must be >= 0");
  s.rate_bps = rate_gbps > 0 ? rate_gbps * 1e9 : std::numeric_limits<double>::infinity();
  if (latency < 0 || jitter < 0) bad(where + " latency and jitter must be >= 0");
  s.latency = ms(latency);
  s.jitter = ms(jitter);
  s.seed = seed;
  try {
    s.validate();
  } catch (const Error& e) {
    bad(where + ": " + e.what());
  }
  return s;
}

inline json link_to_json(const transport::LinkShape& s) {
  return {{"rate_gbps", s.shaped() ? s.rate_bps / 1e9 : 0.0},
          {"latency_ms", std::chrono::duration<double, std::milli>(s.latency).count()},
          {"jitter_ms", std::chrono::duration<double, std::milli>(s.jitter).count()},
          {"loss", s.loss},
          {"corrupt", s.corrupt},
          {"burst_bytes", s.burst_bytes}};
}

}  // namespace detail

inline void Scenario::validate() const {
  using detail::bad;
  if (model.elements < 1) bad("model.elements must be >= 1");
  if (!(model.rho > 0 && model.rho <= 1)) bad("model.rho must lie in (0, 1]");
  if (model.cluster_fraction < 0 || model.cluster_fraction > 1) bad("model.cluster_fraction must lie in [0, 1]");
  if (!(model.mean_run >= 1)) bad("model.mean_run must be >= 1");
  if (model.layers < 1) bad("model.layers must be >= 1");
  if (steps < 1) bad("steps must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (group_size < 1) bad("group_size must be >= 1");
  if (tokens_per_rollout < 1) bad("tokens_per_rollout must be >= 1");
  if (streams < 1 || streams > 64) bad("transport.streams must lie in [1, 64]");
  if (segment_size < transport::kMinSegmentSize) bad("transport.segment_size must be >= 1024");
  if (training_delay_s < 0 || heartbeat_s <= 0 || stall_timeout_s <= 0 || commit_wait_s <= 0)
    bad("timing fields must be positive");
  if (staging_grace_s < 0) bad("staging_grace_s must be >= 0");
  if (!(initial_tau > 0)) bad("scheduler.initial_tau must be positive");
  if (lease_min_s <= 0 || lease_max_s < lease_min_s || lease_multiplier <= 0) bad("invalid lease policy");
  try {
    scheduler.validate();
  } catch (const Error& e) {
    bad(std::string("scheduler: ") + e.what());
  }
  if (regions.empty()) bad("at least one region is required");
  std::set<std::string> region_names, actor_names, relay_names;
  for (const auto& r : regions) {
    if (r.name.empty()) bad("region without a name");
    if (!region_names.insert(r.name).second) bad("duplicate region '" + r.name + "'");
    if (r.actors.empty()) bad("region '" + r.name + "' has no actors");
    std::size_t marked = 0;
    for (const auto& a : r.actors) {
      if (a.name.empty()) bad("actor without a name in region '" + r.name + "'");
      if (a.name == "hub") bad("'hub' is reserved");
      if (!actor_names.insert(a.name).second) bad("duplicate actor '" + a.name + "'");
      if (!(a.tau > 0)) bad("actor '" + a.name + "' needs tau > 0");
      if (a.jitter < 0 || a.jitter >= 1) bad("actor '" + a.name + "' jitter must lie in [0, 1)");
      marked += a.relay;
    }
    if (marked > 1) bad("region '" + r.name + "' marks more than one relay");
    if (auto i = relay_of(r)) relay_names.insert(r.actors[*i].name);
  }
  for (const auto& f : faults) {
    if (f.step.has_value() == f.at_s.has_value()) bad("fault needs exactly one of step or at_s");
    if (f.step && (*f.step < 1 || *f.step > steps)) bad("fault step out of range");
    if (f.at_s && *f.at_s < 0) bad("fault at_s must be >= 0");
    if (f.delay_s < 0 || f.duration_s < 0) bad("fault delays must be >= 0");
    switch (f.kind) {
      case FaultKind::kill_actor:
        if (!actor_names.count(f.target)) bad("kill_actor target '" + f.target + "' is not an actor");
        break;
      case FaultKind::partition_region:
        if (!region_names.count(f.target)) bad("partition_region target '" + f.target + "' is not a region");
        break;
      case FaultKind::kill_relay:
        if (!relay_names.count(f.target)) bad("kill_relay target '" + f.target + "' is not a relay");
        break;
    }
  }
}

inline Scenario parse_scenario(const json& j) {
  using detail::bad;
  using detail::check_keys;
  using detail::read;
  Scenario s;
  check_keys(j, "scenario",
             {"name", "seed", "steps", "mode", "model", "batch_size", "group_size", "tokens_per_rollout", "transport",
              "relay_enabled", "scheduler", "lease", "training_delay_s", "heartbeat_s", "stall_timeout_s",
              "commit_wait_s", "staging_grace_s", "verify_state", "regions", "faults"});
  read(j, "name", s.name, "scenario");
  read(j, "seed", s.seed, "scenario");
  read(j, "steps", s.steps, "scenario");
  if (j.contains("mode")) {
    std::string mode;
    read(j, "mode", mode, "scenario");
    s.mode = parse_run_mode(mode);
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, "model", {"elements", "element_type", "layers", "rho", "cluster_fraction", "mean_run", "delta_mode"});
    read(m, "elements", s.model.elements, "model");
    read(m, "layers", s.model.layers, "model");
    read(m, "rho", s.model.rho, "model");
    read(m, "cluster_fraction", s.model.cluster_fraction, "model");
    read(m, "mean_run", s.model.mean_run, "model");
    std::string type = "f16", dm = "replace";
    read(m, "element_type", type, "model");
    read(m, "delta_mode", dm, "model");
    if (type == "f16") {
      s.model.element_type = codec::ElementType::f16;
    } else if (type == "f32") {
      s.model.element_type = codec::ElementType::f32;
    } else {
      bad("model.element_type must be f16 or f32");
    }
    if (dm == "replace") {
      s.model.delta_mode = codec::DeltaMode::replace;
    } else if (dm == "additive") {
      s.model.delta_mode = codec::DeltaMode::additive;
    } else {
      bad("model.delta_mode must be replace or additive");
    }
  }
  read(j, "batch_size", s.batch_size, "scenario");
  read(j, "group_size", s.group_size, "scenario");
  read(j, "tokens_per_rollout", s.tokens_per_rollout, "scenario");
  if (j.contains("transport")) {
    const auto& t = j["transport"];
    check_keys(t, "transport", {"streams", "segment_size"});
    read(t, "streams", s.streams, "transport");
    read(t, "segment_size", s.segment_size, "transport");
  }
  read(j, "relay_enabled", s.relay_enabled, "scenario");
  if (j.contains("scheduler")) {
    const auto& sc = j["scheduler"];
    check_keys(sc, "scheduler", {"mode", "alpha", "beta", "min_tau", "initial_tau"});
    std::string mode = "heterogeneity_aware";
    read(sc, "mode", mode, "scheduler");
    if (mode == "heterogeneity_aware") {
      s.scheduler_mode = control::SchedulerMode::heterogeneity_aware;
    } else if (mode == "uniform") {
      s.scheduler_mode = control::SchedulerMode::uniform;
    } else {
      bad("scheduler.mode must be heterogeneity_aware or uniform");
    }
    read(sc, "alpha", s.scheduler.alpha, "scheduler");
    read(sc, "beta", s.scheduler.beta, "scheduler");
    read(sc, "min_tau", s.scheduler.min_tau, "scheduler");
    read(sc, "initial_tau", s.initial_tau, "scheduler");
  }
  if (j.contains("lease")) {
    const auto& l = j["lease"];
    check_keys(l, "lease", {"multiplier", "min_s", "max_s", "initial_median_s"});
    read(l, "multiplier", s.lease_multiplier, "lease");
    read(l, "min_s", s.lease_min_s, "lease");
    read(l, "max_s", s.lease_max_s, "lease");
    read(l, "initial_median_s", s.lease_initial_median_s, "lease");
  }
  read(j, "training_delay_s", s.training_delay_s, "scenario");
  read(j, "heartbeat_s", s.heartbeat_s, "scenario");
  read(j, "stall_timeout_s", s.stall_timeout_s, "scenario");
  read(j, "commit_wait_s", s.commit_wait_s, "scenario");
  read(j, "staging_grace_s", s.staging_grace_s, "scenario");
  read(j, "verify_state", s.verify_state, "scenario");
  if (!j.contains("regions") || !j["regions"].is_array()) bad("scenario.regions must be an array");
  std::uint64_t link_seed = 0;
  for (const auto& r : j["regions"]) {
    check_keys(r, "region", {"name", "link", "relay_link", "actors"});
    RegionSpec rs;
    read(r, "name", rs.name, "region");
    const auto where = "region '" + rs.name + "'";
    ++link_seed;
    if (r.contains("link")) rs.link = detail::parse_link(r["link"], where + ".link", s.seed * 1000 + link_seed);
    rs.link.seed = s.seed * 1000 + link_seed;
    if (r.contains("relay_link"))
      rs.relay_link = detail::parse_link(r["relay_link"], where + ".relay_link", s.seed * 1000 + 500 + link_seed);
    rs.relay_link.seed = s.seed * 1000 + 500 + link_seed;
    if (!r.contains("actors") || !r["actors"].is_array()) bad(where + ".actors must be an array");
    for (const auto& a : r["actors"]) {
      check_keys(a, "actor", {"name", "tau", "jitter", "relay"});
      ActorSpec as;
      read(a, "name", as.name, where);
      read(a, "tau", as.tau, where);
      read(a, "jitter", as.jitter, where);
      read(a, "relay", as.relay, where);
      rs.actors.push_back(std::move(as));
    }
    s.regions.push_back(std::move(rs));
  }
  if (j.contains("faults")) {
    if (!j["faults"].is_array()) bad("scenario.faults must be an array");
    for (const auto& f : j["faults"]) {
      check_keys(f, "fault", {"kind", "target", "step", "at_s", "delay_s", "duration_s"});
      FaultSpec fs;
      std::string kind;
      read(f, "kind", kind, "fault");
      if (kind == "kill_actor") {
        fs.kind = FaultKind::kill_actor;
      } else if (kind == "partition_region") {
        fs.kind = FaultKind::partition_region;
      } else if (kind == "kill_relay") {
        fs.kind = FaultKind::kill_relay;
      } else {
        bad("unknown fault kind '" + kind + "'");
      }
      read(f, "target", fs.target, "fault");
      if (f.contains("step")) {
        const auto& st = f["step"];
        if (!st.is_number_integer() || st.get<std::int64_t>() < 1) bad("fault step must be a positive integer");
        fs.step = st.get<std::uint64_t>();
      }
      if (f.contains("at_s")) {
        double at = 0;
        read(f, "at_s", at, "fault");
        fs.at_s = at;
      }
      read(f, "delay_s", fs.delay_s, "fault");
      read(f, "duration_s", fs.duration_s, "fault");
      s.faults.push_back(std::move(fs));
    }
  }
  s.validate();
  return s;
}

inline Scenario load_scenario(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(codec::read_file(path.string()));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::invalid_scenario, path.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::invalid_scenario, path.string() + ": " + e.what());
  }
  return parse_scenario(j);
}

inline json to_json(const Scenario& s) {
  json regions = json::array();
  for (const auto& r : s.regions) {
    json actors = json::array();
    for (const auto& a : r.actors) actors.push_back({{"name", a.name}, {"tau", a.tau}, {"jitter", a.jitter}, {"relay", a.relay}});
    regions.push_back({{"name", r.name},
                       {"link", detail::link_to_json(r.link)},
                       {"relay_link", detail::link_to_json(r.relay_link)},
                       {"actors", actors}});
  }
  json faults = json::array();
  for (const auto& f : s.faults) {
    json fj{{"kind", to_string(f.kind)}, {"target", f.target}, {"delay_s", f.delay_s}, {"duration_s", f.duration_s}};
    if (f.step) fj["step"] = *f.step;
    if (f.at_s) fj["at_s"] = *f.at_s;
    faults.push_back(fj);
  }
  return {
      {"name", s.name},
      {"seed", s.seed},
      {"steps", s.steps},
      {"mode", to_string(s.mode)},
      {"model",
       {{"elements", s.model.elements},
        {"element_type", codec::to_string(s.model.element_type)},
        {"layers", s.model.layers},
        {"rho", s.model.rho},
        {"cluster_fraction", s.model.cluster_fraction},
        {"mean_run", s.model.mean_run},
        {"delta_mode", codec::to_string(s.model.delta_mode)}}},
      {"batch_size", s.batch_size},
      {"group_size", s.group_size},
      {"tokens_per_rollout", s.tokens_per_rollout},
      {"transport", {{"streams", s.streams}, {"segment_size", s.segment_size}}},
      {"relay_enabled", s.relay_enabled},
      {"scheduler",
       {{"mode", s.scheduler_mode == control::SchedulerMode::uniform ? "uniform" : "heterogeneity_aware"},
        {"alpha", s.scheduler.alpha},
        {"beta", s.scheduler.beta},
        {"min_tau", s.scheduler.min_tau},
        {"initial_tau", s.initial_tau}}},
      {"lease",
       {{"multiplier", s.lease_multiplier},
        {"min_s", s.lease_min_s},
        {"max_s", s.lease_max_s},
        {"initial_median_s", s.lease_initial_median_s}}},
      {"training_delay_s", s.training_delay_s},
      {"heartbeat_s", s.heartbeat_s},
      {"stall_timeout_s", s.stall_timeout_s},
      {"commit_wait_s", s.commit_wait_s},
      {"staging_grace_s", s.staging_grace_s},
      {"verify_state", s.verify_state},
      {"regions", regions},
      {"faults", faults},
  };
}

}  // namespace deltasync::harness
