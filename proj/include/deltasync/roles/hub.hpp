#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/codec/delta.hpp"
#include "deltasync/control/job_ledger.hpp"
#include "deltasync/control/messages.hpp"
#include "deltasync/roles/event_log.hpp"
#include "deltasync/roles/synthetic.hpp"
#include "deltasync/store/checkpoint_store.hpp"
#include "deltasync/transport/data_server.hpp"
#include "deltasync/transport/feed.hpp"
#include "deltasync/transport/link.hpp"
#include "deltasync/transport/socket.hpp"
#include "deltasync/transport/wire.hpp"

namespace deltasync::roles {

using control::version_after;

struct HubConfig {
  std::string name = "hub";
  transport::Endpoint control_listen{"127.0.0.1", 0};
  transport::Endpoint data_listen{"127.0.0.1", 0};
  std::filesystem::path run_dir;
  // Synthetic model and per-step update.
  std::uint64_t elements = 1'000'000;
  codec::ElementType element_type = codec::ElementType::f16;
  std::uint32_t layers = 4;
  std::uint64_t model_seed = 1;
  UpdateGenerator updates;
  codec::DeltaMode delta_mode = codec::DeltaMode::replace;
  bool full_broadcast = false;  // dense snapshot every step instead of a sparse delta
  // Transport.
  std::size_t segment_size = transport::kDefaultSegmentSize;
  std::size_t feed_retain = 2;  // versions kept in memory; older ones reload from the store
  std::map<std::string, transport::LinkShape> region_links;  // hub -> region
  // Control.
  control::LedgerConfig ledger;
  control::SchedulerMode scheduler_mode = control::SchedulerMode::heterogeneity_aware;
  std::uint64_t tokens_per_rollout = 100;
  Duration training_delay = std::chrono::seconds(4);
  // Longest wait before planning for reachable actors one version behind to
  // finish staging the collection version.
  Duration staging_grace = std::chrono::seconds(30);
  std::size_t expected_actors = 1;
  Duration register_timeout = std::chrono::seconds(30);
  Duration heartbeat = std::chrono::seconds(1);
  Duration stall_timeout = std::chrono::seconds(120);
  Duration final_sync_timeout = std::chrono::seconds(60);
  bool verify_state = true;
  bool durable_store = false;
};

struct StepRecord {
  std::uint64_t step = 0;
  std::uint64_t version = 0;          // produced by this step's training
  std::uint64_t collect_version = 0;  // behavior version of the rollouts it trained on
  double issue_at = 0;                // seconds since the hub origin
  double collect_end_at = 0;
  double train_start_at = 0;
  double stored_at = 0;
  double wall_seconds = 0;     // stored(k) - stored(k-1); step 1 counts from its issue
  double collect_seconds = 0;  // issue -> B-th accepted result
  double train_seconds = 0;
  std::uint64_t payload_bytes = 0;  // serialized checkpoint of `version`
  std::uint64_t tokens = 0;
  std::uint64_t accepted = 0;
  std::uint64_t rejected = 0;
  std::map<std::string, std::uint64_t> rejected_by_reason;
  std::uint64_t reissued_jobs = 0;
  std::map<control::ActorId, std::uint64_t> shares;
  std::map<control::ActorId, double> tau;
  std::vector<control::ActorId> excluded;
};

struct TransferRecord {
  std::uint64_t version = 0;
  std::uint64_t node_id = 0;
  std::string source;  // hub or relay name
  std::string link;
  std::uint64_t frame_bytes = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t retransmits = 0;
  double seconds = 0;
  bool verified = false;
  bool aborted = false;
};

struct HubCounters {
  std::uint64_t lag_violations = 0;  // work issued to an actor more than one version behind
  std::uint64_t stale_accepts = 0;   // accepted rollout at a version other than the collection version
  std::uint64_t duplicate_settlements = 0;
  std::uint64_t late_accepts = 0;
  std::uint64_t state_checks = 0;
  std::uint64_t state_mismatches = 0;
  std::uint64_t commit_retries = 0;
  std::uint64_t lease_expiries = 0;
  std::uint64_t unreachable_marks = 0;
  std::uint64_t results_rejected = 0;
  bool final_sync_complete = false;
};

// Trainer hub: job ledger owner, simulated trainer, checkpoint store and the
// data server that streams every version to subscribers.
class Hub {
 public:
  using StepHook = std::function<void(std::uint64_t step)>;

  explicit Hub(HubConfig cfg, EventLog* log = nullptr)
      : cfg_(std::move(cfg)), log_(log), ledger_(cfg_.ledger), origin_(log ? log->origin() : Clock::now()) {
    if (cfg_.run_dir.empty()) throw Error(ErrorCode::invalid_argument, "hub needs a run directory");
    ledger_.set_accept_sink([this](const control::Job& j, const control::Result& r) { on_accept_locked(j, r); });
  }
  ~Hub() { stop(); }

  Hub(const Hub&) = delete;
  Hub& operator=(const Hub&) = delete;

  void set_step_hook(StepHook hook) { step_hook_ = std::move(hook); }

  // Builds the model, opens the store, starts both servers and publishes genesis.
  void start() {
    store_ = std::make_unique<store::CheckpointStore>(cfg_.run_dir,
                                                      store::CheckpointStore::Options{cfg_.durable_store});
    if (store_->latest()) throw Error(ErrorCode::version_conflict, "run directory already holds checkpoints");
    model_ = make_model(cfg_.elements, cfg_.element_type, cfg_.layers, cfg_.model_seed);
    feed_ = std::make_unique<transport::VersionFeed>(cfg_.segment_size, cfg_.feed_retain);
    feed_->set_loader([this](std::uint64_t v) -> std::shared_ptr<const Bytes> {
      try {
        return std::make_shared<const Bytes>(store_->get(v));
      } catch (const Error& e) {
        log::warn("hub: cannot reload version ", v, ": ", e.what());
        return nullptr;
      }
    });
    for (const auto& [region, shape] : cfg_.region_links)
      links_[region] = std::make_shared<transport::LinkEmulator>(shape, "hub->" + region);
    transport::DataServerOptions opts;
    opts.listen = cfg_.data_listen;
    opts.role = transport::Role::hub;
    opts.link_for = [this](std::uint64_t node) { return link_for(node); };
    data_ = std::make_unique<transport::DataServer>(*feed_, opts);
    data_->set_report_sink([this](const transport::TransferReport& r) { add_transfer(r, cfg_.name); });
    data_->start();
    listener_ = transport::Listener(cfg_.control_listen);
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    maintenance_thread_ = std::thread([this] { maintenance_loop(); });
    produce_version(0, nullptr);
  }

  void stop() {
    {
      std::lock_guard lock(mu_);
      if (!running_) return;
      running_ = false;
      for (auto& [id, c] : conns_) c.channel->shutdown();
    }
    cv_.notify_all();
    {
      std::lock_guard l(link_mu_);
    }
    link_cv_.notify_all();
    if (accept_thread_.joinable()) accept_thread_.join();
    if (maintenance_thread_.joinable()) maintenance_thread_.join();
    listener_.close();
    std::list<std::thread> readers;
    {
      std::lock_guard lock(mu_);
      readers.swap(readers_);
    }
    for (auto& t : readers) {
      if (t.joinable()) t.join();
    }
    if (data_) data_->stop();
    if (feed_) feed_->close();
  }

  transport::Endpoint control_endpoint() const { return listener_.endpoint(); }
  transport::Endpoint data_endpoint() const { return data_->endpoint(); }

  // Fault injection: holds segments and drops control traffic for a region.
  void set_partition(const std::string& region, bool on) {
    {
      std::lock_guard lock(mu_);
      if (on) {
        partitioned_.insert(region);
      } else {
        partitioned_.erase(region);
      }
    }
    if (auto it = links_.find(region); it != links_.end()) it->second->set_partitioned(on);
    event(on ? "partition_start" : "partition_end", {{"region", region}});
  }

  // Blocking: waits for the expected actors, then runs `steps` training steps.
  void run(std::uint64_t steps) {
    if (steps == 0) throw Error(ErrorCode::invalid_argument, "steps must be >= 1");
    wait_for_actors();
    genesis_barrier();
    collect(1, 0);
    for (std::uint64_t k = 1; k <= steps; ++k) {
      auto trainer = std::async(std::launch::async, [this, k] { train(k); });
      try {
        if (k < steps) collect(k + 1, k - 1);
      } catch (...) {
        trainer.wait();
        throw;
      }
      trainer.get();
    }
    final_sync(steps);
  }

  // Reports from relay data servers join the hub's own.
  void add_transfer(const transport::TransferReport& r, const std::string& source) {
    TransferRecord t;
    t.version = r.version;
    t.node_id = r.node_id;
    t.source = source;
    t.link = r.link;
    t.frame_bytes = r.frame_bytes;
    t.payload_bytes = r.payload_bytes;
    t.retransmits = r.retransmits;
    t.seconds = r.wall_seconds();
    t.verified = r.verified;
    t.aborted = r.aborted;
    std::lock_guard lock(transfer_mu_);
    transfers_.push_back(std::move(t));
  }

  std::vector<StepRecord> steps() const {
    std::lock_guard lock(mu_);
    std::vector<StepRecord> out;
    for (const auto& [k, s] : steps_) out.push_back(s);
    return out;
  }
  std::vector<TransferRecord> transfers() const {
    std::lock_guard lock(transfer_mu_);
    return transfers_;
  }
  HubCounters counters() const {
    std::lock_guard lock(mu_);
    return counters_;
  }
  std::map<control::ActorId, std::string> actor_names() const {
    std::lock_guard lock(mu_);
    return names_;
  }
  std::map<control::ActorId, control::ActorRecord> actor_records() const {
    std::lock_guard lock(mu_);
    return ledger_.actors();
  }
  std::map<std::uint64_t, Digest> version_digests() const {
    std::lock_guard lock(mu_);
    return version_digest_;
  }
  const store::CheckpointStore& store() const { return *store_; }
  const SyntheticModel& model() const { return model_; }
  std::uint64_t data_bytes_sent() const { return data_ ? data_->bytes_sent() : 0; }
  std::map<std::string, std::uint64_t> link_bytes() const {
    std::map<std::string, std::uint64_t> out;
    for (const auto& [r, l] : links_) out[l->name()] = l->bytes_sent();
    return out;
  }
  double since_origin(TimePoint t) const { return seconds_between(origin_, t); }

 private:
  struct Conn {
    control::ChannelPtr channel;
    std::string region;
    bool is_relay = false;
  };
  struct Collecting {
    std::uint64_t step = 0;
    std::uint64_t version = 0;
    Digest hash{};
    std::uint64_t target = 0;
    std::uint64_t accepted = 0;
    TimePoint last_accept{};
    TimePoint last_progress{};
  };

  void event(const std::string& kind, nlohmann::json fields = nlohmann::json::object()) {
    emit(log_, cfg_.name, kind, std::move(fields));
  }

  // A data session may open before its control REGISTER is processed; give
  // the registration a moment so the session binds to the right link.
  transport::LinkPtr link_for(std::uint64_t node) {
    std::unique_lock lock(link_mu_);
    link_cv_.wait_for(lock, std::chrono::seconds(2), [&] { return node_region_.count(node) > 0 || !running_; });
    auto it = node_region_.find(node);
    if (it != node_region_.end()) {
      auto l = links_.find(it->second);
      if (l != links_.end()) return l->second;
    }
    return nullptr;
  }

  // ---- control connections ----

  void accept_loop() {
    while (running_) {
      auto sock = listener_.accept(std::chrono::milliseconds(100));
      if (!sock.valid()) continue;
      std::lock_guard lock(mu_);
      if (!running_) break;
      readers_.emplace_back([this, s = std::make_shared<transport::Socket>(std::move(sock))]() mutable {
        conn_loop(std::move(*s));
      });
    }
  }

  void conn_loop(transport::Socket sock) {
    control::ChannelPtr ch;
    control::ActorId id = 0;
    std::string region;
    try {
      transport::read_hello(sock);
      ch = std::make_shared<control::ControlChannel>(std::move(sock));
      auto first = ch->receive();
      if (!first || !std::holds_alternative<control::RegisterMsg>(*first))
        throw Error(ErrorCode::malformed, "expected REGISTER first");
      const auto reg = std::get<control::RegisterMsg>(*first);
      id = reg.actor_id;
      region = reg.region;
      {
        std::lock_guard lock(mu_);
        if (!running_) return;
        ledger_.register_actor({reg.actor_id, reg.region, reg.is_relay}, Clock::now());
        conns_[id] = Conn{ch, reg.region, reg.is_relay};
        if (reg.is_relay) relays_[reg.region] = id;
        if (!names_.count(id)) names_[id] = "actor" + std::to_string(id);
        {
          std::lock_guard l(link_mu_);
          node_region_[id] = reg.region;
        }
        link_cv_.notify_all();
        event("registered", {{"actor", id}, {"region", reg.region}, {"relay", reg.is_relay}});
      }
      cv_.notify_all();
    } catch (const Error& e) {
      log::warn("hub: rejected control connection: ", e.what());
      return;
    }
    try {
      while (true) {
        auto msg = ch->receive();
        if (!msg) break;
        std::lock_guard lock(mu_);
        if (partitioned_.count(region)) continue;
        handle_locked(id, *msg);
      }
    } catch (const Error& e) {
      log::debug("hub: control connection of actor ", id, " ended: ", e.what());
    }
    {
      std::lock_guard lock(mu_);
      auto it = conns_.find(id);
      if (it != conns_.end() && it->second.channel == ch) {
        conns_.erase(it);
        ledger_.unregister_actor(id);
        if (auto r = relays_.find(region); r != relays_.end() && r->second == id) relays_.erase(r);
        event("actor_lost", {{"actor", id}});
      }
    }
    cv_.notify_all();
  }

  void handle_locked(control::ActorId id, const control::Message& msg) {
    const auto now = Clock::now();
    if (!ledger_.has_actor(id)) return;
    if (auto* hb = std::get_if<control::HeartbeatMsg>(&msg)) {
      const bool was_unreachable = !ledger_.actor(id).reachable;
      ledger_.heartbeat(id, hb->active_version, {hb->staged.begin(), hb->staged.end()}, hb->generating, now);
      if (was_unreachable) event("reachable", {{"actor", id}, {"tau", ledger_.actor(id).tau}});
      cv_.notify_all();
    } else if (auto* m = std::get_if<control::SubmitResultMsg>(&msg)) {
      control::Result r;
      r.job_id = m->job_id;
      r.actor_id = id;
      r.behavior_version = m->behavior_version;
      r.reported_hash = m->reported_hash;
      r.arrival_time = now;
      r.token_count = m->token_count;
      r.generation_seconds = static_cast<double>(m->generation_us) / 1e6;
      r.payload = m->payload;
      control::Verdict v;
      try {
        v = ledger_.accept_result(r);
      } catch (const Error& e) {
        log::warn("hub: ", e.what());
        return;
      }
      if (!v.accepted) {
        ++counters_.results_rejected;
        auto st = job_step_.find(m->job_id);
        if (st != job_step_.end()) {
          auto& rec = steps_[st->second];
          ++rec.rejected;
          ++rec.rejected_by_reason[control::to_string(v.reason)];
        }
        event("result_rejected", {{"job", m->job_id}, {"actor", id}, {"reason", control::to_string(v.reason)}});
      }
      cv_.notify_all();
    } else if (auto* m = std::get_if<control::CommitAckMsg>(&msg)) {
      ledger_.commit_acked(id, m->version);
      if (m->state_digest != Digest{}) {
        ++counters_.state_checks;
        auto d = version_digest_.find(m->version);
        if (d != version_digest_.end() && d->second != m->state_digest) {
          ++counters_.state_mismatches;
          event("state_mismatch", {{"actor", id}, {"version", m->version}});
        }
      }
      event("commit_ack", {{"actor", id}, {"version", m->version}});
      cv_.notify_all();
    }
  }

  void send_locked(control::ActorId id, const control::Message& m) {
    auto it = conns_.find(id);
    if (it == conns_.end() || partitioned_.count(it->second.region)) return;
    try {
      it->second.channel->send(m);
    } catch (const Error& e) {
      log::debug("hub: send to actor ", id, " failed: ", e.what());
    }
  }

  // ---- ledger owner ----

  void on_accept_locked(const control::Job& j, const control::Result& r) {
    store::RolloutBatch b{j.job_id, r.actor_id, r.behavior_version, r.payload, r.token_count, wall_clock_us()};
    store_->append_rollouts(b);
    for (auto p : j.prompt_ids) {
      if (!settled_prompts_.insert(p).second) ++counters_.duplicate_settlements;
    }
    auto st = job_step_.find(j.job_id);
    event("result_accepted", {{"job", j.job_id},
                              {"actor", r.actor_id},
                              {"step", st != job_step_.end() ? st->second : 0},
                              {"behavior_version", r.behavior_version},
                              {"target_version", j.target_version},
                              {"prompts", j.prompt_ids}});
    if (collecting_ && st != job_step_.end() && st->second == collecting_->step) {
      if (r.behavior_version != collecting_->version) ++counters_.stale_accepts;
      auto& rec = steps_[collecting_->step];
      ++rec.accepted;
      rec.tokens += r.token_count;
      ++collecting_->accepted;
      collecting_->last_accept = collecting_->last_progress = r.arrival_time;
    } else {
      ++counters_.late_accepts;
    }
  }

  Duration commit_timeout() const {
    Duration rtt{};
    for (const auto& [r, l] : links_) rtt = std::max(rtt, l->shape().rtt());
    return std::max<Duration>(std::chrono::seconds(1), 3 * rtt);
  }

  // Commits go through the region's live relay when there is one; the relay
  // fans them out to its peers. Direct delivery otherwise.
  void route_commit_locked(control::ActorId id, std::uint64_t v, const Digest& hash) {
    const auto& a = ledger_.actor(id);
    auto rel = relays_.find(a.region);
    const bool via_relay = rel != relays_.end() && rel->second != id && conns_.count(rel->second);
    if (via_relay) {
      if (relay_commits_.insert({rel->second, v}).second) send_locked(rel->second, control::CommitMsg{v, hash});
    } else {
      send_locked(id, control::CommitMsg{v, hash});
      if (conns_.count(id) && conns_.at(id).is_relay) relay_commits_.insert({id, v});
    }
    ledger_.commit_sent(id, v, Clock::now(), commit_timeout());
    event("commit_sent", {{"actor", id}, {"version", v}, {"via", via_relay ? "relay" : "direct"}});
  }

  // COMMIT(c) to every reachable actor behind c whose staged chain reaches c.
  void send_commits_locked(std::uint64_t c, const Digest& hash) {
    for (const auto& [id, a] : ledger_.actors()) {
      if (!a.reachable || !version_after(c, a.active_version)) continue;
      bool chain = true;
      for (std::uint64_t u = a.active_version + 1;; ++u) {
        if (!a.staged_versions.count(u)) {
          chain = false;
          break;
        }
        if (u == c) break;
      }
      if (!chain) continue;
      auto pc = ledger_.pending_commits().find(id);
      if (pc != ledger_.pending_commits().end() && pc->second.version == c) continue;
      route_commit_locked(id, c, hash);
    }
  }

  void check_lag_locked(std::uint64_t v, const std::map<control::ActorId, std::uint64_t>& shares) {
    for (const auto& [id, n] : shares) {
      if (n == 0) continue;
      const auto active = ledger_.actor(id).active_version;
      if (active != v && active != v - 1) {
        ++counters_.lag_violations;
        event("lag_violation", {{"actor", id}, {"version", v}, {"active", active}});
      }
    }
  }

  void dispatch_locked(std::uint64_t step, const std::vector<control::Job>& jobs) {
    std::map<control::ActorId, control::IssueJobsMsg> per_actor;
    const auto lease_ms = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(ledger_.lease_duration()).count());
    for (const auto& j : jobs) {
      job_step_[j.job_id] = step;
      per_actor[j.actor_id].jobs.push_back(control::JobSpec{j.job_id, j.target_version, j.expected_hash, lease_ms,
                                                            j.prompt_ids.size() * cfg_.tokens_per_rollout,
                                                            j.prompt_ids});
    }
    for (auto& [id, m] : per_actor) send_locked(id, m);
  }

  void wait_for_actors() {
    std::unique_lock lock(mu_);
    const auto deadline = Clock::now() + cfg_.register_timeout;
    while (ledger_.actors().size() < cfg_.expected_actors) {
      if (!running_) throw Error(ErrorCode::transfer_aborted, "hub stopped");
      if (cv_.wait_until(lock, deadline) == std::cv_status::timeout &&
          ledger_.actors().size() < cfg_.expected_actors)
        throw Error(ErrorCode::peer_unreachable, "only " + std::to_string(ledger_.actors().size()) + " of " +
                                                     std::to_string(cfg_.expected_actors) + " actors registered");
    }
  }

  // Step 1 starts once every registered actor holds genesis, so startup
  // staging order does not decay anyone.
  void genesis_barrier() {
    std::unique_lock lock(mu_);
    const auto hash = version_hash_.at(0);
    const auto deadline = Clock::now() + cfg_.register_timeout;
    while (running_ && Clock::now() < deadline) {
      bool all = true;
      for (const auto& [id, a] : ledger_.actors()) {
        if (a.active_version != 0) all = false;
      }
      if (all) return;
      send_commits_locked(0, hash);
      cv_.wait_for(lock, std::chrono::milliseconds(20));
    }
    log::warn("hub: not every actor activated genesis before step 1");
  }

  // True while some reachable actor sits one version behind c without c staged.
  bool awaiting_stage_locked(std::uint64_t c) const {
    for (const auto& [id, a] : ledger_.actors()) {
      if (a.reachable && a.active_version + 1 == c && a.staged_versions.count(c) == 0) return true;
    }
    return false;
  }

  // Issues B jobs at version c and blocks until B results are accepted.
  void collect(std::uint64_t step, std::uint64_t c) {
    std::unique_lock lock(mu_);
    const auto hash = version_hash_.at(c);
    auto& rec = steps_[step];
    rec.step = step;
    rec.version = step;
    rec.collect_version = c;
    const auto grace_end = Clock::now() + cfg_.staging_grace;
    while (running_ && Clock::now() < grace_end && awaiting_stage_locked(c)) {
      send_commits_locked(c, hash);
      cv_.wait_for(lock, std::chrono::milliseconds(20));
    }
    auto deadline = Clock::now() + cfg_.stall_timeout;
    control::AllocationResult plan;
    while (true) {
      if (!running_) throw Error(ErrorCode::transfer_aborted, "hub stopped");
      send_commits_locked(c, hash);
      try {
        plan = ledger_.plan(c, cfg_.scheduler_mode);
        break;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::schedule_stall) throw;
      }
      if (Clock::now() > deadline)
        throw Error(ErrorCode::schedule_stall, "no eligible actor for version " + std::to_string(c));
      cv_.wait_for(lock, std::chrono::milliseconds(50));
    }
    const auto now = Clock::now();
    rec.issue_at = since_origin(now);
    rec.shares = plan.allocation.shares;
    for (const auto& [id, a] : ledger_.actors()) rec.tau[id] = a.tau;
    rec.excluded = plan.excluded;
    for (auto id : plan.excluded) {
      send_locked(id, control::ExcludedNoticeMsg{c, ledger_.actor(id).tau});
      event("excluded", {{"actor", id}, {"version", c}, {"tau", ledger_.actor(id).tau}});
    }
    check_lag_locked(c, plan.allocation.shares);
    auto jobs = ledger_.issue_jobs(c, hash, plan.allocation.shares, now);
    collecting_ = Collecting{step, c, hash, jobs.size(), 0, now, now};
    dispatch_locked(step, jobs);
    nlohmann::json shares = nlohmann::json::object();
    for (const auto& [id, n] : plan.allocation.shares) shares[std::to_string(id)] = n;
    event("step_issue", {{"step", step}, {"version", c}, {"jobs", jobs.size()}, {"shares", shares}});
    if (step_hook_) {
      lock.unlock();
      step_hook_(step);
      lock.lock();
    }
    while (collecting_->accepted < collecting_->target) {
      if (!running_) throw Error(ErrorCode::transfer_aborted, "hub stopped");
      if (Clock::now() - collecting_->last_progress > cfg_.stall_timeout)
        throw Error(ErrorCode::schedule_stall, "step " + std::to_string(step) + " made no progress");
      cv_.wait_for(lock, std::chrono::milliseconds(50));
    }
    auto& done = steps_[step];
    done.collect_end_at = since_origin(collecting_->last_accept);
    done.collect_seconds = seconds_between(now, collecting_->last_accept);
    event("step_collected", {{"step", step}, {"version", c}, {"seconds", done.collect_seconds}});
    collecting_.reset();
  }

  // Simulated optimizer step, then delta extraction streamed straight into the
  // feed (cut-through) and persisted.
  void train(std::uint64_t k) {
    const auto start = Clock::now();
    event("train_start", {{"step", k}});
    {
      std::unique_lock lock(mu_);
      steps_[k].train_start_at = since_origin(start);
      cv_.wait_for(lock, cfg_.training_delay, [&] { return !running_; });
      if (!running_) throw Error(ErrorCode::transfer_aborted, "hub stopped");
    }
    auto next = model_.params;
    cfg_.updates.apply(next, k);
    const auto bytes = produce_version(k, &next);
    model_.params = std::move(next);
    const auto stored = Clock::now();
    std::lock_guard lock(mu_);
    auto& rec = steps_[k];
    rec.stored_at = since_origin(stored);
    rec.train_seconds = seconds_between(start, stored);
    rec.payload_bytes = bytes;
    const double prev = k == 1 ? steps_[1].issue_at : steps_[k - 1].stored_at;
    rec.wall_seconds = rec.stored_at - prev;
    event("delta_stored", {{"step", k}, {"version", k}, {"bytes", bytes}});
  }

  // Serializes version v (genesis when `next` is null) into the feed and the store.
  std::uint64_t produce_version(std::uint64_t v, const codec::ParameterSet* next) {
    const auto& src = next ? *next : model_.params;
    const bool dense = !next || cfg_.full_broadcast;
    const auto layout = codec::inference_layout(src, model_.fusion);
    Bytes bytes(codec::kCheckpointHeaderSize);
    auto producer = feed_->produce(v);
    codec::CheckpointWriter writer(v, v - 1, src.element_type(), static_cast<std::uint32_t>(layout.size()),
                                   [&](ByteSpan b) {
                                     bytes.insert(bytes.end(), b.begin(), b.end());
                                     producer.append(b);
                                   });
    auto add = [&](codec::TensorDelta td) { writer.add(td); };
    if (dense) {
      codec::dense_tensors(src, model_.fusion, add);
    } else {
      codec::extract_tensors(model_.params, src, model_.fusion, cfg_.delta_mode, add);
    }
    const auto header = writer.finish();
    producer.finish(header);
    codec::write_header(header, bytes.data());
    store_->put(bytes);
    Digest digest{};
    if (cfg_.verify_state) digest = codec::layout_digest(src, model_.fusion);
    std::lock_guard lock(mu_);
    version_hash_[v] = header.body_hash;
    if (cfg_.verify_state) version_digest_[v] = digest;
    cv_.notify_all();
    return bytes.size();
  }

  // After the last step: bring every connected actor onto the final version,
  // including ones that are temporarily unreachable.
  void final_sync(std::uint64_t v) {
    std::unique_lock lock(mu_);
    const auto hash = version_hash_.at(v);
    const auto deadline = Clock::now() + cfg_.final_sync_timeout;
    while (running_ && Clock::now() < deadline) {
      bool all = true;
      for (const auto& [id, a] : ledger_.actors()) {
        if (a.active_version != v) all = false;
      }
      if (all) {
        counters_.final_sync_complete = true;
        break;
      }
      send_commits_locked(v, hash);
      cv_.wait_for(lock, std::chrono::milliseconds(50));
    }
    event("final_sync", {{"version", v}, {"complete", counters_.final_sync_complete}});
  }

  void maintenance_loop() {
    std::unique_lock lock(mu_);
    while (running_) {
      cv_.wait_for(lock, std::chrono::milliseconds(50));
      if (!running_) break;
      const auto now = Clock::now();
      for (const auto& [jid, job] : ledger_.jobs()) {
        if (job.state == control::JobState::issued && job.lease_expiry < now) {
          ++counters_.lease_expiries;
          event("lease_expired", {{"job", jid}, {"actor", job.actor_id}, {"prompts", job.prompt_ids}});
        }
      }
      ledger_.expire_leases(now);
      for (auto id : ledger_.mark_unreachable(now, 3 * cfg_.heartbeat)) {
        ++counters_.unreachable_marks;
        event("unreachable", {{"actor", id}});
      }
      for (const auto& [id, v] : ledger_.commit_timeouts(now)) {
        if (!ledger_.has_actor(id) || ledger_.actor(id).active_version == v) continue;
        ++counters_.commit_retries;
        auto h = version_hash_.find(v);
        if (h == version_hash_.end()) continue;
        send_locked(id, control::CommitMsg{v, h->second});
        ledger_.commit_sent(id, v, now, commit_timeout());
        event("commit_retry", {{"actor", id}, {"version", v}});
      }
      reissue_locked(now);
    }
  }

  // Recycled prompts go back out to whoever is eligible now, split by the
  // same rule without decaying anyone a second time this step.
  void reissue_locked(TimePoint now) {
    if (!collecting_ || ledger_.pool_size() == 0) return;
    const auto c = collecting_->version;
    send_commits_locked(c, collecting_->hash);
    const auto g = ledger_.config().prompts_per_job;
    auto params = ledger_.config().scheduler;
    params.batch_size = (ledger_.pool_size() + g - 1) / g;
    std::vector<control::ActorRecord> snapshot;
    for (const auto& [id, a] : ledger_.actors()) snapshot.push_back(a);
    control::AllocationResult res;
    try {
      res = control::allocate(c, snapshot, params, cfg_.scheduler_mode);
    } catch (const Error&) {
      return;
    }
    check_lag_locked(c, res.allocation.shares);
    auto jobs = ledger_.issue_jobs(c, collecting_->hash, res.allocation.shares, now);
    steps_[collecting_->step].reissued_jobs += jobs.size();
    collecting_->last_progress = now;
    dispatch_locked(collecting_->step, jobs);
    nlohmann::json shares = nlohmann::json::object();
    for (const auto& [id, n] : res.allocation.shares) shares[std::to_string(id)] = n;
    event("reissue", {{"step", collecting_->step}, {"version", c}, {"jobs", jobs.size()}, {"shares", shares}});
  }

  HubConfig cfg_;
  EventLog* log_;
  control::JobLedger ledger_;
  TimePoint origin_;
  StepHook step_hook_;
  SyntheticModel model_;
  std::unique_ptr<store::CheckpointStore> store_;
  std::unique_ptr<transport::VersionFeed> feed_;
  std::unique_ptr<transport::DataServer> data_;
  std::map<std::string, transport::LinkPtr> links_;  // fixed after start()
  transport::Listener listener_;
  std::thread accept_thread_;
  std::thread maintenance_thread_;

  std::mutex link_mu_;
  std::condition_variable link_cv_;
  std::map<std::uint64_t, std::string> node_region_;

  mutable std::mutex transfer_mu_;
  std::vector<TransferRecord> transfers_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::atomic<bool> running_{false};
  std::list<std::thread> readers_;
  std::map<control::ActorId, Conn> conns_;
  std::map<std::string, control::ActorId> relays_;
  std::map<control::ActorId, std::string> names_;
  std::set<std::string> partitioned_;
  std::set<std::pair<control::ActorId, std::uint64_t>> relay_commits_;
  std::map<std::uint64_t, Digest> version_hash_;
  std::map<std::uint64_t, Digest> version_digest_;
  std::map<std::uint64_t, std::uint64_t> job_step_;
  std::set<std::uint64_t> settled_prompts_;
  std::map<std::uint64_t, StepRecord> steps_;
  std::optional<Collecting> collecting_;
  HubCounters counters_;
};

}  // namespace deltasync::roles
