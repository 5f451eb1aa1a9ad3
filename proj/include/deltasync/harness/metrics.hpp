#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deltasync/common.hpp"
#include "deltasync/harness/scenario.hpp"
#include "deltasync/roles/hub.hpp"

namespace deltasync::harness {

namespace fs = std::filesystem;

struct ActorOutcome {
  std::string name;
  std::uint64_t id = 0;
  std::string region;
  bool relay = false;
  bool killed = false;
  std::uint64_t active_version = 0;
  bool state_matches = false;  // parameters bitwise equal to the hub's at active_version
  bool via_relay = false;
  std::uint64_t relay_bytes_sent = 0;
};

struct StepMetrics {
  roles::StepRecord record;
  std::map<std::string, std::uint64_t> link_bytes;  // frame bytes of this step's version per link
  std::uint64_t hub_egress_bytes = 0;
  std::uint64_t relay_egress_bytes = 0;
  std::map<std::string, double> transfer_seconds;  // per receiving actor
  double tokens_per_s() const { return record.wall_seconds > 0 ? record.tokens / record.wall_seconds : 0.0; }
};

struct RunResult {
  fs::path dir;
  Scenario scenario;
  bool ok = false;
  std::string error;
  std::vector<StepMetrics> steps;
  std::vector<roles::TransferRecord> transfers;
  roles::HubCounters counters;
  std::vector<ActorOutcome> actors;
  std::map<std::string, std::uint64_t> transport_link_bytes;  // as counted by the link emulators
  std::map<std::string, std::uint64_t> metrics_link_bytes;    // summed from transfer reports
  std::uint64_t hub_egress_bytes = 0;                         // data server total
  std::uint64_t genesis_bytes = 0;
  std::map<std::uint64_t, Digest> version_digests;  // hub parameters per version, inference layout
  double total_wall_s = 0;
  std::uint64_t total_tokens = 0;

  double tokens_per_s() const { return total_wall_s > 0 ? total_tokens / total_wall_s : 0.0; }
  bool accounting_consistent() const { return transport_link_bytes == metrics_link_bytes; }
  bool lossless() const {
    for (const auto& a : actors) {
      if (!a.killed && !a.state_matches) return false;
    }
    return counters.state_mismatches == 0;
  }
  // Work issued below v-1, or a rollout accepted at another version.
  std::uint64_t lag_violations() const { return counters.lag_violations + counters.stale_accepts; }
};

namespace detail {

inline std::string kv_list(const std::map<std::string, double>& m, int precision = 4) {
  std::ostringstream o;
  o << std::setprecision(precision);
  bool first = true;
  for (const auto& [k, v] : m) {
    if (!first) o << ';';
    o << k << '=' << v;
    first = false;
  }
  return o.str();
}

template <typename T>
std::string kv_list_int(const std::map<std::string, T>& m) {
  std::ostringstream o;
  bool first = true;
  for (const auto& [k, v] : m) {
    if (!first) o << ';';
    o << k << '=' << v;
    first = false;
  }
  return o.str();
}

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

}  // namespace detail

inline const char* kStepsCsvHeader =
    "step,version,collect_version,wall_s,collect_s,train_s,payload_bytes,hub_egress_bytes,relay_egress_bytes,"
    "tokens,tokens_per_s,accepted,rejected,reissued_jobs,link_bytes,transfer_s,shares,tau,excluded";

inline void write_steps_csv(const fs::path& path, const RunResult& r, const std::map<std::uint64_t, std::string>& names) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::storage_failure, "cannot write " + path.string());
  out << kStepsCsvHeader << '\n';
  auto name_of = [&](std::uint64_t id) {
    auto it = names.find(id);
    return it == names.end() ? std::to_string(id) : it->second;
  };
  for (const auto& s : r.steps) {
    const auto& rec = s.record;
    std::map<std::string, std::uint64_t> shares;
    for (const auto& [id, n] : rec.shares) shares[name_of(id)] = n;
    std::map<std::string, double> tau;
    for (const auto& [id, t] : rec.tau) tau[name_of(id)] = t;
    std::string excluded;
    for (auto id : rec.excluded) excluded += (excluded.empty() ? "" : ";") + name_of(id);
    out << rec.step << ',' << rec.version << ',' << rec.collect_version << ',' << detail::fixed(rec.wall_seconds)
        << ',' << detail::fixed(rec.collect_seconds) << ',' << detail::fixed(rec.train_seconds) << ','
        << rec.payload_bytes << ',' << s.hub_egress_bytes << ',' << s.relay_egress_bytes << ',' << rec.tokens << ','
        << detail::fixed(s.tokens_per_s(), 2) << ',' << rec.accepted << ',' << rec.rejected << ','
        << rec.reissued_jobs << ',' << detail::kv_list_int(s.link_bytes) << ','
        << detail::kv_list(s.transfer_seconds) << ',' << detail::kv_list_int(shares) << ','
        << detail::kv_list(tau, 6) << ',' << excluded << '\n';
  }
}

inline nlohmann::json summary_json(const RunResult& r, const std::map<std::uint64_t, std::string>& names) {
  using nlohmann::json;
  auto name_of = [&](std::uint64_t id) {
    auto it = names.find(id);
    return it == names.end() ? std::to_string(id) : it->second;
  };
  json steps = json::array();
  double payload_sum = 0;
  for (const auto& s : r.steps) {
    const auto& rec = s.record;
    json shares = json::object(), tau = json::object(), reasons = json::object();
    for (const auto& [id, n] : rec.shares) shares[name_of(id)] = n;
    for (const auto& [id, t] : rec.tau) tau[name_of(id)] = t;
    for (const auto& [k, n] : rec.rejected_by_reason) reasons[k] = n;
    json excluded = json::array();
    for (auto id : rec.excluded) excluded.push_back(name_of(id));
    steps.push_back({{"step", rec.step},
                     {"version", rec.version},
                     {"collect_version", rec.collect_version},
                     {"issue_at_s", rec.issue_at},
                     {"stored_at_s", rec.stored_at},
                     {"wall_s", rec.wall_seconds},
                     {"collect_s", rec.collect_seconds},
                     {"train_s", rec.train_seconds},
                     {"payload_bytes", rec.payload_bytes},
                     {"hub_egress_bytes", s.hub_egress_bytes},
                     {"relay_egress_bytes", s.relay_egress_bytes},
                     {"link_bytes", s.link_bytes},
                     {"transfer_s", s.transfer_seconds},
                     {"tokens", rec.tokens},
                     {"tokens_per_s", s.tokens_per_s()},
                     {"accepted", rec.accepted},
                     {"rejected", rec.rejected},
                     {"rejected_by_reason", reasons},
                     {"reissued_jobs", rec.reissued_jobs},
                     {"shares", shares},
                     {"tau", tau},
                     {"excluded", excluded}});
    payload_sum += static_cast<double>(rec.payload_bytes);
  }
  json actors = json::array();
  for (const auto& a : r.actors) {
    actors.push_back({{"name", a.name},
                      {"id", a.id},
                      {"region", a.region},
                      {"relay", a.relay},
                      {"killed", a.killed},
                      {"active_version", a.active_version},
                      {"state_matches", a.state_matches},
                      {"via_relay", a.via_relay},
                      {"relay_bytes_sent", a.relay_bytes_sent}});
  }
  json digests = json::object();
  for (const auto& [v, d] : r.version_digests) digests[std::to_string(v)] = to_hex(d);
  const auto& c = r.counters;
  return {
      {"name", r.scenario.name},
      {"mode", to_string(r.scenario.mode)},
      {"seed", r.scenario.seed},
      {"steps_requested", r.scenario.steps},
      {"streams", r.scenario.effective_streams()},
      {"status", r.ok ? "ok" : "failed"},
      {"error", r.error},
      {"total_wall_s", r.total_wall_s},
      {"total_tokens", r.total_tokens},
      {"tokens_per_s", r.tokens_per_s()},
      {"mean_payload_bytes", r.steps.empty() ? 0.0 : payload_sum / static_cast<double>(r.steps.size())},
      {"genesis_bytes", r.genesis_bytes},
      {"hub_egress_bytes", r.hub_egress_bytes},
      {"accounting",
       {{"transport_link_bytes", r.transport_link_bytes},
        {"metrics_link_bytes", r.metrics_link_bytes},
        {"consistent", r.accounting_consistent()}}},
      {"lossless", r.lossless()},
      {"version_digests", digests},
      {"counters",
       {{"lag_violations", c.lag_violations},
        {"stale_accepts", c.stale_accepts},
        {"duplicate_settlements", c.duplicate_settlements},
        {"late_accepts", c.late_accepts},
        {"state_checks", c.state_checks},
        {"state_mismatches", c.state_mismatches},
        {"commit_retries", c.commit_retries},
        {"lease_expiries", c.lease_expiries},
        {"unreachable_marks", c.unreachable_marks},
        {"results_rejected", c.results_rejected},
        {"final_sync_complete", c.final_sync_complete}}},
      {"actors", actors},
      {"steps", steps},
  };
}

inline nlohmann::json load_summary(const fs::path& run_dir) {
  const auto path = run_dir / "summary.json";
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::not_found, "no summary.json in " + run_dir.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::malformed, path.string() + ": " + e.what());
  }
}

inline double geometric_mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double log_sum = 0;
  for (double x : xs) {
    if (!(x > 0)) return 0.0;
    log_sum += std::log(x);
  }
  return std::exp(log_sum / static_cast<double>(xs.size()));
}

// Human-readable digest of one summary.
inline std::string render_report(const nlohmann::json& s) {
  std::ostringstream o;
  o << "run " << s.value("name", "?") << "  mode=" << s.value("mode", "?") << "  streams=" << s.value("streams", 0)
    << "  status=" << s.value("status", "?") << '\n';
  if (!s.value("error", std::string()).empty()) o << "  error: " << s["error"].get<std::string>() << '\n';
  o << "  total wall " << detail::fixed(s.value("total_wall_s", 0.0), 3) << " s, " << s.value("total_tokens", 0ull)
    << " tokens, " << detail::fixed(s.value("tokens_per_s", 0.0), 1) << " tokens/s\n";
  o << "  mean payload " << detail::fixed(s.value("mean_payload_bytes", 0.0), 0) << " B/step, hub egress "
    << s.value("hub_egress_bytes", 0ull) << " B\n";
  o << "  step  wall_s    collect_s train_s  payload_B    hub_egress_B  tokens   acc  rej\n";
  for (const auto& st : s["steps"]) {
    o << "  " << std::setw(4) << st["step"].get<std::uint64_t>() << "  " << std::setw(8)
      << detail::fixed(st["wall_s"].get<double>(), 3) << "  " << std::setw(8)
      << detail::fixed(st["collect_s"].get<double>(), 3) << "  " << std::setw(7)
      << detail::fixed(st["train_s"].get<double>(), 3) << "  " << std::setw(11) << st["payload_bytes"].get<std::uint64_t>()
      << "  " << std::setw(12) << st["hub_egress_bytes"].get<std::uint64_t>() << "  " << std::setw(7)
      << st["tokens"].get<std::uint64_t>() << "  " << std::setw(3) << st["accepted"].get<std::uint64_t>() << "  "
      << std::setw(3) << st["rejected"].get<std::uint64_t>() << '\n';
  }
  const auto& c = s["counters"];
  o << "  lossless=" << (s.value("lossless", false) ? "yes" : "no")
    << "  accounting=" << (s["accounting"].value("consistent", false) ? "consistent" : "MISMATCH")
    << "  lag_violations=" << c.value("lag_violations", 0ull) << "  stale_accepts=" << c.value("stale_accepts", 0ull)
    << "  duplicate_settlements=" << c.value("duplicate_settlements", 0ull) << '\n';
  return o.str();
}

}  // namespace deltasync::harness
