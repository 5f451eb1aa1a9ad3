#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/codec/delta.hpp"
#include "deltasync/control/actor_record.hpp"
#include "deltasync/control/messages.hpp"
#include "deltasync/roles/event_log.hpp"
#include "deltasync/transport/data_server.hpp"
#include "deltasync/transport/feed.hpp"
#include "deltasync/transport/link.hpp"
#include "deltasync/transport/subscriber.hpp"

namespace deltasync::roles {

using control::kNoVersion;
using control::version_after;

struct ActorConfig {
  std::uint64_t id = 0;
  std::string name;
  std::string region;
  bool is_relay = false;
  transport::Endpoint hub_control;
  transport::Endpoint hub_data;
  std::optional<transport::Endpoint> relay_data;  // regional relay to stage through
  std::size_t streams = transport::kDefaultStreams;
  double tau_true = 1000.0;  // tokens per second
  double jitter = 0.0;       // generation time scaled by 1 + U(-jitter, jitter)
  std::uint64_t seed = 1;
  bool verify_state = true;
  Duration heartbeat = std::chrono::seconds(1);
  Duration commit_wait = std::chrono::seconds(60);  // a job waits this long for its version
  std::size_t rollout_payload_bytes = 64;
  // Relay only.
  transport::Endpoint relay_listen{"127.0.0.1", 0};
  transport::LinkShape relay_link;  // relay -> regional peers
};

// Rebuilds a fused-layout parameter set from a dense genesis snapshot.
inline codec::ParameterSet params_from_snapshot(const codec::CheckpointView& view) {
  codec::ParameterSet ps(view.header.element_type);
  for (const auto& t : view.tensors) {
    if (!t.dense()) throw Error(ErrorCode::malformed, "genesis tensor " + std::string(t.name) + " is not dense");
    ps.add(std::string(t.name), {t.element_count}, Bytes(t.values.begin(), t.values.end()));
  }
  return ps;
}


// Rollout actor; with `is_relay` it also forwards every segment it receives
// to its regional peers and fans commits out to them.
class Actor {
 public:
  explicit Actor(ActorConfig cfg, EventLog* log = nullptr)
      : cfg_(std::move(cfg)), log_(log), rng_(cfg_.seed * 0x9E3779B97F4A7C15ull + cfg_.id) {
    if (cfg_.name.empty()) cfg_.name = "actor" + std::to_string(cfg_.id);
    if (!(cfg_.tau_true > 0)) throw Error(ErrorCode::invalid_argument, "tau_true must be positive");
    if (cfg_.jitter < 0 || cfg_.jitter >= 1) throw Error(ErrorCode::invalid_argument, "jitter must be in [0, 1)");
  }
  ~Actor() { stop(); }

  Actor(const Actor&) = delete;
  Actor& operator=(const Actor&) = delete;

  const ActorConfig& config() const { return cfg_; }
  const std::string& name() const { return cfg_.name; }

  void start() {
    if (cfg_.is_relay) {
      relay_feed_ = std::make_unique<transport::VersionFeed>(transport::kMinSegmentSize);
      relay_link_ = std::make_shared<transport::LinkEmulator>(cfg_.relay_link, cfg_.name + "->peers");
      transport::DataServerOptions opts;
      opts.listen = cfg_.relay_listen;
      opts.node_id = cfg_.id;
      opts.role = transport::Role::relay;
      opts.link_for = [link = relay_link_](std::uint64_t) { return link; };
      relay_server_ = std::make_unique<transport::DataServer>(*relay_feed_, opts);
      if (report_sink_) relay_server_->set_report_sink(report_sink_);
      relay_server_->start();
    }
    channel_ = control::ControlChannel::dial(cfg_.hub_control, cfg_.is_relay ? transport::Role::relay
                                                                              : transport::Role::actor,
                                             cfg_.id);
    control::RegisterMsg reg{cfg_.id, cfg_.region, cfg_.is_relay,
                             relay_server_ ? relay_server_->endpoint().str() : std::string()};
    channel_->send(reg);
    running_ = true;
    need_connect_ = true;
    threads_.emplace_back([this] { control_loop(); });
    threads_.emplace_back([this] { heartbeat_loop(); });
    threads_.emplace_back([this] { generation_loop(); });
    threads_.emplace_back([this] { data_loop(); });
  }

  // Abrupt stop: used for shutdown and for kill faults alike.
  void stop() {
    {
      std::lock_guard lock(mu_);
      if (!running_ && threads_.empty()) return;
      running_ = false;
    }
    cv_.notify_all();
    if (channel_) channel_->shutdown();
    if (relay_server_) relay_server_->stop();
    if (relay_feed_) relay_feed_->close();
    for (auto& t : threads_) {
      if (t.joinable()) t.join();
    }
    threads_.clear();
    std::unique_ptr<transport::Subscriber> sub;
    {
      std::lock_guard lock(mu_);
      sub = std::move(sub_);
    }
    sub.reset();
  }

  bool running() const {
    std::lock_guard lock(mu_);
    return running_;
  }

  // Relay sessions report transfers to their peers here. Set before start().
  void set_relay_report_sink(transport::DataServer::ReportSink sink) { report_sink_ = std::move(sink); }

  std::uint64_t active_version() const {
    std::lock_guard lock(mu_);
    return active_;
  }
  std::set<std::uint64_t> staged_versions() const {
    std::lock_guard lock(mu_);
    std::set<std::uint64_t> out;
    for (const auto& [v, s] : staged_) out.insert(v);
    return out;
  }
  // Layout digest of the current parameters (computed on demand).
  Digest state_digest() const {
    std::lock_guard lock(params_mu_);
    return params_ ? codec::layout_digest(*params_) : Digest{};
  }
  std::optional<codec::ParameterSet> params_copy() const {
    std::lock_guard lock(params_mu_);
    return params_;
  }
  bool via_relay() const {
    std::lock_guard lock(mu_);
    return source_is_relay_;
  }
  // Data endpoint a relay serves its peers on. Valid after start().
  transport::Endpoint relay_endpoint() const {
    if (!relay_server_) throw Error(ErrorCode::invalid_argument, name() + " is not a relay");
    return relay_server_->endpoint();
  }
  std::uint64_t relay_link_bytes() const { return relay_link_ ? relay_link_->bytes_sent() : 0; }
  std::uint64_t relay_bytes_sent() const { return relay_server_ ? relay_server_->bytes_sent() : 0; }

 private:
  struct StagedVersion {
    std::shared_ptr<const Bytes> bytes;
    codec::CheckpointHeader header;
  };
  struct QueuedJob {
    control::JobSpec spec;
    TimePoint received;
  };

  void event(const std::string& kind, nlohmann::json fields = nlohmann::json::object()) {
    emit(log_, cfg_.name, kind, std::move(fields));
  }

  // ---- control ----

  void control_loop() {
    try {
      while (true) {
        auto msg = channel_->receive();
        if (!msg) break;
        if (auto* m = std::get_if<control::IssueJobsMsg>(&*msg)) {
          std::lock_guard lock(mu_);
          for (auto& j : m->jobs) jobs_.push_back({j, Clock::now()});
          cv_.notify_all();
        } else if (auto* m = std::get_if<control::CommitMsg>(&*msg)) {
          event("commit_received", {{"version", m->version}, {"via", "hub"}});
          if (relay_server_) relay_server_->broadcast_commit(m->version);
          note_commit(m->version);
        } else if (auto* m = std::get_if<control::ExcludedNoticeMsg>(&*msg)) {
          event("excluded", {{"version", m->version}, {"tau", m->tau}});
        }
      }
    } catch (const Error& e) {
      log::debug(cfg_.name, ": control channel ended: ", e.what());
    }
    std::lock_guard lock(mu_);
    if (running_) log::info(cfg_.name, ": hub closed the control channel");
    running_ = false;
    cv_.notify_all();
  }

  void send(const control::Message& m) {
    try {
      channel_->send(m);
    } catch (const Error& e) {
      log::debug(cfg_.name, ": send failed: ", e.what());
    }
  }

  void heartbeat_loop() {
    std::unique_lock lock(mu_);
    while (running_) {
      control::HeartbeatMsg hb;
      hb.actor_id = cfg_.id;
      hb.active_version = active_;
      hb.generating = generating_;
      for (const auto& [v, s] : staged_) hb.staged.push_back(v);
      lock.unlock();
      send(hb);
      lock.lock();
      cv_.wait_for(lock, cfg_.heartbeat, [&] { return !running_ || heartbeat_now_; });
      heartbeat_now_ = false;
    }
  }

  void note_commit(std::uint64_t v) {
    std::lock_guard lock(mu_);
    if (!commit_target_ || version_after(v, *commit_target_)) commit_target_ = v;
    cv_.notify_all();
  }

  // ---- data ----

  std::uint64_t resume_from_locked() const {
    std::uint64_t top = active_;
    for (const auto& [v, s] : staged_) {
      if (version_after(v, top)) top = v;
    }
    return top + 1;  // wraps to 0 when nothing is held
  }

  transport::SubscriberCallbacks callbacks() {
    transport::SubscriberCallbacks cb;
    if (relay_feed_) {
      cb.on_segment = [this](const transport::Segment& s) {
        if (!relay_feed_->add_segment(s)) return;
        std::lock_guard lock(fwd_mu_);
        if (forwarded_.insert(s.header.version).second) event("relay_forward_first", {{"version", s.header.version}});
      };
    }
    cb.admit = [this](std::uint64_t v) { return admit(v); };
    cb.on_complete = [this](std::uint64_t v, std::shared_ptr<const Bytes> bytes, bool ok) {
      on_complete(v, std::move(bytes), ok);
    };
    cb.on_commit = [this](std::uint64_t v) {
      event("commit_received", {{"version", v}, {"via", "relay"}});
      note_commit(v);
    };
    cb.on_disconnect = [this] {
      std::lock_guard lock(mu_);
      need_connect_ = true;
      cv_.notify_all();
    };
    return cb;
  }

  // Base-version acceptance: v must extend the active version or a version
  // already staged or being staged.
  bool admit(std::uint64_t v) {
    std::lock_guard lock(mu_);
    const auto base = v - 1;
    const bool ok = base == active_ || staged_.count(base) || admitted_.count(base);
    if (!ok || !version_after(v, active_) || staged_.count(v)) {
      event("stage_refused", {{"version", v}, {"active", active_}});
      return false;
    }
    admitted_.insert(v);
    event("stage_start", {{"version", v}});
    return true;
  }

  void on_complete(std::uint64_t v, std::shared_ptr<const Bytes> bytes, bool ok) {
    std::lock_guard lock(mu_);
    admitted_.erase(v);
    if (!ok) {
      event("stage_failed", {{"version", v}, {"reason", "hash_mismatch"}});
      need_connect_ = true;  // re-request from this version
      cv_.notify_all();
      return;
    }
    try {
      auto header = codec::parse_header(*bytes);
      if (header.version != v || header.base_version != v - 1)
        throw Error(ErrorCode::version_conflict, "checkpoint does not extend its predecessor");
      staged_[v] = StagedVersion{std::move(bytes), header};
      event("staged", {{"version", v}});
      heartbeat_now_ = true;
    } catch (const Error& e) {
      event("stage_failed", {{"version", v}, {"reason", e.what()}});
    }
    cv_.notify_all();
  }

  // Keeps one subscription alive. A relay that refuses a reconnect is
  // abandoned for the hub for the rest of the run.
  void data_loop() {
    std::unique_lock lock(mu_);
    while (running_) {
      cv_.wait(lock, [&] { return !running_ || need_connect_; });
      if (!running_) break;
      need_connect_ = false;
      const auto from = resume_from_locked();
      const bool try_relay = cfg_.relay_data && !relay_dead_;
      auto old = std::move(sub_);
      lock.unlock();
      old.reset();
      auto sub = std::make_unique<transport::Subscriber>(cfg_.id, cfg_.is_relay ? transport::Role::relay
                                                                                : transport::Role::actor,
                                                         cfg_.streams, callbacks());
      bool connected = false;
      bool used_relay = false;
      if (try_relay) {
        try {
          sub->connect(*cfg_.relay_data, from, std::chrono::seconds(1));
          connected = used_relay = true;
        } catch (const Error& e) {
          event("relay_unreachable", {{"error", e.what()}});
        }
      }
      if (!connected) {
        try {
          sub->connect(cfg_.hub_data, from);
          connected = true;
        } catch (const Error& e) {
          log::debug(cfg_.name, ": data connect failed: ", e.what());
        }
      }
      lock.lock();
      if (try_relay && !used_relay) relay_dead_ = true;
      if (connected) {
        sub_ = std::move(sub);
        if (source_is_relay_ && !used_relay) event("fallback_to_hub", {{"from_version", from}});
        source_is_relay_ = used_relay;
        event("subscribed", {{"from_version", from}, {"source", used_relay ? "relay" : "hub"}});
      } else {
        lock.unlock();
        sub.reset();
        lock.lock();
        need_connect_ = true;
        cv_.wait_for(lock, std::chrono::milliseconds(200), [&] { return !running_; });
      }
    }
  }

  // ---- generation and activation ----

  // Safe point: applies the staged chain up to the committed version.
  void activate_pending(std::unique_lock<std::mutex>& lock) {
    while (commit_target_ && version_after(*commit_target_, active_)) {
      const auto next = active_ + 1;
      auto it = staged_.find(next);
      if (it == staged_.end()) return;  // deferred until staging completes
      auto staged = it->second;
      lock.unlock();
      bool applied = false;
      try {
        auto view = codec::parse_checkpoint(*staged.bytes, {.verify_hash = false, .validate_indices = false});
        std::lock_guard plock(params_mu_);
        if (!params_) {
          params_ = params_from_snapshot(view);
        } else {
          codec::apply_delta(*params_, view);
        }
        applied = true;
      } catch (const Error& e) {
        log::error(cfg_.name, ": applying version ", next, " failed: ", e.what());
      }
      lock.lock();
      staged_.erase(next);
      if (!applied) {
        commit_target_.reset();
        return;
      }
      active_ = next;
      active_hash_ = staged.header.body_hash;
      const bool last = !version_after(*commit_target_, active_);
      Digest digest{};
      if (last && cfg_.verify_state) {
        lock.unlock();
        digest = state_digest();
        lock.lock();
      }
      event("activated", {{"version", next}});
      heartbeat_now_ = true;
      cv_.notify_all();
      lock.unlock();
      send(control::CommitAckMsg{cfg_.id, next, digest});
      lock.lock();
    }
    if (commit_target_ && !version_after(*commit_target_, active_)) commit_target_.reset();
  }

  void generation_loop() {
    std::unique_lock lock(mu_);
    while (running_) {
      activate_pending(lock);
      if (jobs_.empty()) {
        cv_.wait_for(lock, std::chrono::milliseconds(50));
        continue;
      }
      auto& front = jobs_.front();
      const auto target = front.spec.target_version;
      if (version_after(active_, target)) {
        event("job_dropped", {{"job", front.spec.job_id}, {"target", target}, {"active", active_}});
        jobs_.pop_front();
        continue;
      }
      if (target != active_) {
        if (Clock::now() - front.received > cfg_.commit_wait) {
          event("job_dropped", {{"job", front.spec.job_id}, {"target", target}, {"active", active_}});
          jobs_.pop_front();
        } else {
          cv_.wait_for(lock, std::chrono::milliseconds(20));
        }
        continue;
      }
      auto job = std::move(front.spec);
      jobs_.pop_front();
      const auto version = active_;
      const auto hash = active_hash_;
      generating_ = true;
      event("generation_start", {{"job", job.job_id}, {"version", version}});
      std::uniform_real_distribution<double> u(-cfg_.jitter, cfg_.jitter);
      const double seconds = static_cast<double>(job.tokens) / cfg_.tau_true * (1.0 + u(rng_));
      const auto begin = Clock::now();
      const bool finished = !cv_.wait_until(lock, begin + from_seconds(seconds), [&] { return !running_; });
      generating_ = false;
      if (!finished) break;
      const auto elapsed = Clock::now() - begin;
      event("generation_end", {{"job", job.job_id}, {"version", version}});
      control::SubmitResultMsg r;
      r.job_id = job.job_id;
      r.actor_id = cfg_.id;
      r.behavior_version = version;
      r.reported_hash = hash;
      r.token_count = job.tokens;
      r.generation_us = static_cast<std::uint64_t>(
          std::chrono::duration_cast<std::chrono::microseconds>(elapsed).count());
      ByteWriter w(r.payload);
      for (auto p : job.prompt_ids) w.u64(p);
      while (r.payload.size() < cfg_.rollout_payload_bytes) w.u8(static_cast<std::uint8_t>(rng_()));
      lock.unlock();
      send(r);
      lock.lock();
    }
  }

  ActorConfig cfg_;
  EventLog* log_;
  std::mt19937_64 rng_;
  control::ChannelPtr channel_;
  std::unique_ptr<transport::VersionFeed> relay_feed_;
  std::unique_ptr<transport::DataServer> relay_server_;
  transport::LinkPtr relay_link_;
  transport::DataServer::ReportSink report_sink_;
  std::mutex fwd_mu_;
  std::set<std::uint64_t> forwarded_;

  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool running_ = false;
  bool heartbeat_now_ = false;
  bool need_connect_ = false;
  bool relay_dead_ = false;
  bool source_is_relay_ = false;
  bool generating_ = false;
  std::uint64_t active_ = kNoVersion;
  Digest active_hash_{};
  std::map<std::uint64_t, StagedVersion> staged_;
  std::set<std::uint64_t> admitted_;
  std::optional<std::uint64_t> commit_target_;
  std::deque<QueuedJob> jobs_;
  std::unique_ptr<transport::Subscriber> sub_;
  std::vector<std::thread> threads_;

  mutable std::mutex params_mu_;
  std::optional<codec::ParameterSet> params_;
};

}  // namespace deltasync::roles
