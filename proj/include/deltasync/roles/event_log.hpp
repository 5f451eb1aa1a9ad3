#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "deltasync/common.hpp"

namespace deltasync::roles {

// Append-only timeline shared by every node of a run. Each event is one JSON
// object with `t` (seconds since the log was opened), `node` and `kind`.
class EventLog {
 public:
  using json = nlohmann::json;

  EventLog() : origin_(Clock::now()) {}
  explicit EventLog(const std::filesystem::path& path) : origin_(Clock::now()) {
    file_ = std::fopen(path.c_str(), "w");
    if (!file_) throw Error(ErrorCode::storage_failure, "cannot open event log " + path.string());
  }
  ~EventLog() {
    if (file_) std::fclose(file_);
  }
  EventLog(const EventLog&) = delete;
  EventLog& operator=(const EventLog&) = delete;

  TimePoint origin() const { return origin_; }
  double since_origin(TimePoint t) const { return seconds_between(origin_, t); }

  void emit(const std::string& node, const std::string& kind, json fields = json::object()) {
    const auto now = Clock::now();
    fields["t"] = seconds_between(origin_, now);
    fields["node"] = node;
    fields["kind"] = kind;
    std::lock_guard lock(mu_);
    if (file_) {
      const auto line = fields.dump();
      std::fwrite(line.data(), 1, line.size(), file_);
      std::fputc('\n', file_);
      std::fflush(file_);
    }
    events_.push_back(std::move(fields));
  }

  std::vector<json> snapshot() const {
    std::lock_guard lock(mu_);
    return events_;
  }

  std::vector<json> select(const std::string& kind) const {
    std::lock_guard lock(mu_);
    std::vector<json> out;
    for (const auto& e : events_) {
      if (e["kind"] == kind) out.push_back(e);
    }
    return out;
  }

 private:
  TimePoint origin_;
  std::FILE* file_ = nullptr;
  mutable std::mutex mu_;
  std::vector<json> events_;
};

// Null-safe emit helper for nodes that may run without a log.
inline void emit(EventLog* log, const std::string& node, const std::string& kind,
                 nlohmann::json fields = nlohmann::json::object()) {
  if (log) log->emit(node, kind, std::move(fields));
}

}  // namespace deltasync::roles
