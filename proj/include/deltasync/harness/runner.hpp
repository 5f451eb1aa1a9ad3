#pragma once

#include <condition_variable>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "deltasync/harness/metrics.hpp"
#include "deltasync/harness/scenario.hpp"
#include "deltasync/roles/actor.hpp"
#include "deltasync/roles/event_log.hpp"
#include "deltasync/roles/hub.hpp"

namespace deltasync::harness {

inline roles::HubConfig hub_config(const Scenario& s, const fs::path& dir) {
  roles::HubConfig c;
  c.run_dir = dir;
  c.elements = s.model.elements;
  c.element_type = s.model.element_type;
  c.layers = s.model.layers;
  c.model_seed = s.seed;
  c.updates.rho = s.model.rho;
  c.updates.cluster_fraction = s.model.cluster_fraction;
  c.updates.mean_run = s.model.mean_run;
  c.updates.seed = s.seed + 1;
  c.delta_mode = s.model.delta_mode;
  c.full_broadcast = is_full(s.mode);
  c.segment_size = s.segment_size;
  for (const auto& r : s.regions) c.region_links[r.name] = r.link;
  c.ledger.scheduler = s.scheduler;
  c.ledger.scheduler.batch_size = s.batch_size;
  c.ledger.lease.multiplier = s.lease_multiplier;
  c.ledger.lease.min_lease = from_seconds(s.lease_min_s);
  c.ledger.lease.max_lease = from_seconds(s.lease_max_s);
  c.ledger.lease.initial_median = from_seconds(s.lease_initial_median_s);
  c.ledger.initial_tau = s.initial_tau;
  c.ledger.prompts_per_job = s.group_size;
  c.scheduler_mode = s.scheduler_mode;
  c.tokens_per_rollout = s.tokens_per_rollout;
  c.training_delay = from_seconds(s.training_delay_s);
  c.staging_grace = from_seconds(s.staging_grace_s);
  c.expected_actors = s.actor_count();
  c.heartbeat = from_seconds(s.heartbeat_s);
  c.stall_timeout = from_seconds(s.stall_timeout_s);
  c.final_sync_timeout = std::max<Duration>(std::chrono::seconds(30), from_seconds(s.stall_timeout_s / 2));
  c.verify_state = s.verify_state;
  return c;
}

// Step metrics, transfers and accounting from a stopped hub. `extra_links`
// adds link counters the hub does not own (relay fan-out links).
inline void fill_from_hub(const roles::Hub& hub, const std::map<std::uint64_t, std::string>& names,
                          const std::map<std::string, std::uint64_t>& extra_links, RunResult& r) {
  r.counters = hub.counters();
  r.transfers = hub.transfers();
  r.hub_egress_bytes = hub.data_bytes_sent();
  r.version_digests = hub.version_digests();
  r.transport_link_bytes = hub.link_bytes();
  for (const auto& [link, b] : extra_links) r.transport_link_bytes[link] = b;
  for (const auto& t : r.transfers) r.metrics_link_bytes[t.link] += t.frame_bytes;
  for (const auto& [link, b] : r.transport_link_bytes) r.metrics_link_bytes.try_emplace(link, 0);
  for (const auto& t : r.transfers) {
    if (t.version == 0 && t.source == "hub") r.genesis_bytes += t.frame_bytes;
  }
  for (const auto& rec : hub.steps()) {
    if (rec.stored_at == 0) continue;  // never trained (failed run)
    StepMetrics m;
    m.record = rec;
    for (const auto& t : r.transfers) {
      if (t.version != rec.version) continue;
      m.link_bytes[t.link] += t.frame_bytes;
      if (t.source == "hub") {
        m.hub_egress_bytes += t.frame_bytes;
      } else {
        m.relay_egress_bytes += t.frame_bytes;
      }
      auto nm = names.find(t.node_id);
      if (!t.aborted && nm != names.end()) m.transfer_seconds[nm->second] = t.seconds;
    }
    r.total_wall_s += rec.wall_seconds;
    r.total_tokens += rec.tokens;
    r.steps.push_back(std::move(m));
  }
  if (r.ok && r.steps.size() != r.scenario.steps) {
    r.ok = false;
    r.error = "run ended with " + std::to_string(r.steps.size()) + " of " + std::to_string(r.scenario.steps) + " steps";
  }
}

inline void write_outputs(const RunResult& r, const std::map<std::uint64_t, std::string>& names) {
  write_steps_csv(r.dir / "steps.csv", r, names);
  std::ofstream f(r.dir / "summary.json");
  f << summary_json(r, names).dump(2) << '\n';
}

// One in-process topology: hub, relays and actors on loopback, each hub ->
// region path shaped by its own link emulator.
class Runner {
 public:
  Runner(Scenario scenario, fs::path out) : s_(std::move(scenario)), out_(std::move(out)) { s_.validate(); }
  ~Runner() { teardown(); }

  Runner(const Runner&) = delete;
  Runner& operator=(const Runner&) = delete;

  RunResult run() {
    prepare_dir();
    {
      std::ofstream f(out_ / "scenario.json");
      f << to_json(s_).dump(2) << '\n';
    }
    log_ = std::make_unique<roles::EventLog>(out_ / "events.jsonl");
    RunResult result;
    result.dir = out_;
    result.scenario = s_;
    try {
      bring_up();
      schedule_timed_faults();
      hub_->run(s_.steps);
      result.ok = true;
    } catch (const Error& e) {
      result.error = e.what();
      log::error("run failed: ", e.what());
    }
    stop_faults();
    collect_actor_outcomes(result);
    teardown();
    finish(result);
    return result;
  }

 private:
  struct Node {
    std::unique_ptr<roles::Actor> actor;
    std::string region;
    bool relay = false;
    bool killed = false;
  };

  void prepare_dir() {
    std::error_code ec;
    if (fs::exists(out_ / "ckpt") && !fs::is_empty(out_ / "ckpt", ec))
      throw Error(ErrorCode::invalid_argument, "output directory " + out_.string() + " already holds a run");
    fs::create_directories(out_, ec);
    if (ec) throw Error(ErrorCode::storage_failure, "cannot create " + out_.string());
  }

  void bring_up() {
    hub_ = std::make_unique<roles::Hub>(hub_config(s_, out_), log_.get());
    hub_->set_step_hook([this](std::uint64_t step) { on_step(step); });
    hub_->start();
    std::uint64_t next_id = 1;
    for (const auto& r : s_.regions) {
      const auto relay_idx = s_.relay_of(r);
      std::optional<transport::Endpoint> relay_ep;
      // Relay first so its peers can subscribe through it.
      std::vector<std::size_t> order;
      if (relay_idx) order.push_back(*relay_idx);
      for (std::size_t i = 0; i < r.actors.size(); ++i) {
        if (!relay_idx || i != *relay_idx) order.push_back(i);
      }
      for (auto i : order) {
        const auto& a = r.actors[i];
        const bool is_relay = relay_idx && i == *relay_idx;
        roles::ActorConfig c;
        c.id = next_id++;
        c.name = a.name;
        c.region = r.name;
        c.is_relay = is_relay;
        c.hub_control = hub_->control_endpoint();
        c.hub_data = hub_->data_endpoint();
        if (!is_relay) c.relay_data = relay_ep;
        c.streams = s_.effective_streams();
        c.tau_true = a.tau;
        c.jitter = a.jitter;
        c.seed = s_.seed;
        c.verify_state = s_.verify_state;
        c.heartbeat = from_seconds(s_.heartbeat_s);
        c.commit_wait = from_seconds(s_.commit_wait_s);
        c.relay_link = r.relay_link;
        names_[c.id] = a.name;
        auto node = std::make_unique<Node>();
        node->actor = std::make_unique<roles::Actor>(c, log_.get());
        node->region = r.name;
        node->relay = is_relay;
        if (is_relay) {
          node->actor->set_relay_report_sink(
              [hub = hub_.get(), name = a.name](const transport::TransferReport& rep) { hub->add_transfer(rep, name); });
        }
        node->actor->start();
        if (is_relay) relay_ep = node->actor->relay_endpoint();
        nodes_[a.name] = std::move(node);
      }
    }
  }

  // Step-triggered faults fire after the step's jobs are issued (plus delay).
  void on_step(std::uint64_t step) {
    for (const auto& f : s_.faults) {
      if (f.step && *f.step == step) launch_fault(f, f.delay_s);
    }
  }

  void schedule_timed_faults() {
    for (const auto& f : s_.faults) {
      if (f.at_s) launch_fault(f, *f.at_s);
    }
  }

  void launch_fault(const FaultSpec& f, double delay_s) {
    std::lock_guard lock(fault_mu_);
    fault_threads_.emplace_back([this, f, delay_s] {
      if (!sleep_unless_stopped(from_seconds(delay_s))) return;
      apply_fault(f);
    });
  }

  bool sleep_unless_stopped(Duration d) {
    std::unique_lock lock(fault_mu_);
    return !fault_cv_.wait_for(lock, d, [this] { return faults_stopped_; });
  }

  void apply_fault(const FaultSpec& f) {
    log::info("fault ", to_string(f.kind), " on ", f.target);
    roles::emit(log_.get(), "harness", "fault", {{"fault", to_string(f.kind)}, {"target", f.target}});
    switch (f.kind) {
      case FaultKind::kill_actor:
      case FaultKind::kill_relay: {
        auto& n = *nodes_.at(f.target);
        n.killed = true;
        n.actor->stop();
        break;
      }
      case FaultKind::partition_region:
        hub_->set_partition(f.target, true);
        sleep_unless_stopped(from_seconds(f.duration_s));
        hub_->set_partition(f.target, false);
        break;
    }
  }

  void stop_faults() {
    {
      std::lock_guard lock(fault_mu_);
      faults_stopped_ = true;
    }
    fault_cv_.notify_all();
    std::vector<std::thread> threads;
    {
      std::lock_guard lock(fault_mu_);
      threads.swap(fault_threads_);
    }
    for (auto& t : threads) t.join();
  }

  void collect_actor_outcomes(RunResult& result) {
    if (!hub_) return;
    auto digests = hub_->version_digests();
    // Without per-version digests, still check the final state once, off the clock.
    std::uint64_t last = 0;
    for (const auto& rec : hub_->steps()) {
      if (rec.stored_at > 0) last = std::max(last, rec.version);
    }
    if (!digests.count(last)) digests[last] = codec::layout_digest(hub_->model().params, hub_->model().fusion);
    for (const auto& [id, name] : names_) {
      const auto& n = *nodes_.at(name);
      ActorOutcome o;
      o.name = name;
      o.id = id;
      o.region = n.region;
      o.relay = n.relay;
      o.killed = n.killed;
      o.active_version = n.actor->active_version();
      o.via_relay = n.actor->via_relay();
      o.relay_bytes_sent = n.relay ? n.actor->relay_bytes_sent() : 0;
      auto d = digests.find(o.active_version);
      o.state_matches = d != digests.end() && n.actor->state_digest() == d->second;
      result.actors.push_back(o);
    }
  }

  void teardown() {
    stop_faults();
    for (auto& [name, n] : nodes_) n->actor->stop();
    if (hub_) hub_->stop();
  }

  void finish(RunResult& r) {
    if (!hub_) return;
    std::map<std::string, std::uint64_t> relay_links;
    for (const auto& [name, n] : nodes_) {
      if (n->relay) relay_links[name + "->peers"] = n->actor->relay_link_bytes();
    }
    fill_from_hub(*hub_, names_, relay_links, r);
    write_outputs(r, names_);
  }

  Scenario s_;
  fs::path out_;
  std::unique_ptr<roles::EventLog> log_;
  std::unique_ptr<roles::Hub> hub_;
  std::map<std::string, std::unique_ptr<Node>> nodes_;
  std::map<std::uint64_t, std::string> names_;
  std::mutex fault_mu_;
  std::condition_variable fault_cv_;
  bool faults_stopped_ = false;
  std::vector<std::thread> fault_threads_;
};

inline RunResult run_scenario(const Scenario& s, const fs::path& out) {
  Runner r(s, out);
  return r.run();
}

}  // namespace deltasync::harness
