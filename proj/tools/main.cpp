#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "deltasync/codec/checkpoint.hpp"
#include "deltasync/codec/delta.hpp"
#include "deltasync/harness/metrics.hpp"
#include "deltasync/harness/payload_model.hpp"
#include "deltasync/harness/runner.hpp"
#include "deltasync/harness/scenario.hpp"
#include "deltasync/roles/actor.hpp"
#include "deltasync/roles/hub.hpp"
#include "deltasync/roles/synthetic.hpp"

namespace fs = std::filesystem;
using namespace deltasync;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitFailure = 3;

std::atomic<bool> g_interrupted{false};

void on_signal(int) { g_interrupted = true; }

codec::ElementType parse_type(const std::string& s) {
  if (s == "f16") return codec::ElementType::f16;
  if (s == "f32") return codec::ElementType::f32;
  throw Error(ErrorCode::invalid_argument, "element type must be f16 or f32");
}

// ---- run ----

struct RunArgs {
  std::string scenario;
  std::optional<std::string> mode;
  std::optional<std::uint64_t> steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

int cmd_run(const RunArgs& a) {
  harness::Scenario s;
  try {
    s = harness::load_scenario(a.scenario);
    if (a.mode) s.mode = harness::parse_run_mode(*a.mode);
    if (a.steps) s.steps = *a.steps;
    if (a.seed) s.seed = *a.seed;
    s.validate();
  } catch (const Error& e) {
    std::cerr << "invalid scenario: " << e.what() << '\n';
    return kExitInvalid;
  }
  const fs::path out = a.out ? fs::path(*a.out)
                             : fs::path("runs") / (s.name + "-" + harness::to_string(s.mode) + "-" +
                                                   std::to_string(std::time(nullptr)));
  try {
    auto result = harness::run_scenario(s, out);
    std::cout << harness::render_report(harness::load_summary(out));
    std::cout << "run directory: " << out.string() << '\n';
    return result.ok ? kExitOk : kExitFailure;
  } catch (const Error& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return kExitFailure;
  }
}

// ---- codec ----

codec::ParameterSet load_params(const std::string& path) {
  return codec::parse_parameter_set(codec::read_file(path));
}

json inspect_json(const codec::CheckpointView& v, bool hash_ok) {
  json tensors = json::array();
  for (const auto& t : v.tensors) {
    tensors.push_back({{"name", std::string(t.name)},
                       {"element_count", t.element_count},
                       {"nnz", t.nnz},
                       {"dense", t.dense()},
                       {"index_bytes", t.index_stream.size()},
                       {"value_bytes", t.values.size()},
                       {"mode", codec::to_string(t.mode)}});
  }
  const auto sp = codec::checkpoint_sparsity(v);
  const auto& h = v.header;
  return {{"version", h.version},
          {"base_version", h.base_version == codec::kNoBaseVersion ? json(nullptr) : json(h.base_version)},
          {"element_type", codec::to_string(h.element_type)},
          {"tensor_count", h.tensor_count},
          {"body_length", h.body_length},
          {"body_hash", to_hex(h.body_hash)},
          {"hash_verified", hash_ok},
          {"nnz", sp.total_nonzeros},
          {"total_elements", sp.total_elements},
          {"rho", sp.rho},
          {"tensors", tensors}};
}

int cmd_codec_inspect(const std::string& file) {
  const auto bytes = codec::read_file(file);
  bool hash_ok = true;
  codec::CheckpointView view;
  try {
    view = codec::parse_checkpoint(bytes, {.verify_hash = true, .validate_indices = true});
  } catch (const Error& e) {
    if (e.code() != ErrorCode::hash_mismatch) throw;
    hash_ok = false;
    view = codec::parse_checkpoint(bytes, {.verify_hash = false, .validate_indices = true});
  }
  std::cout << inspect_json(view, hash_ok).dump(2) << '\n';
  return hash_ok ? kExitOk : kExitFailure;
}

int cmd_codec_encode(const std::string& old_path, const std::string& new_path, const std::string& out,
                     std::uint64_t version, bool additive, bool dense, bool no_fuse) {
  const auto newer = load_params(new_path);
  const auto fusion = no_fuse ? codec::FusionMap{} : codec::standard_fusion(newer);
  codec::DeltaCheckpoint ckpt;
  if (dense) {
    ckpt = codec::dense_snapshot(newer, fusion, version, version - 1);
  } else {
    const auto older = load_params(old_path);
    ckpt = codec::extract_delta(older, newer, fusion,
                                additive ? codec::DeltaMode::additive : codec::DeltaMode::replace, version,
                                version - 1);
  }
  const auto bytes = ckpt.serialize();
  codec::write_file(out, bytes);
  const auto view = codec::parse_checkpoint(bytes);
  const auto sp = codec::checkpoint_sparsity(view);
  std::cout << json{{"out", out}, {"bytes", bytes.size()}, {"nnz", sp.total_nonzeros}, {"rho", sp.rho},
                    {"body_hash", to_hex(view.header.body_hash)}}
                   .dump()
            << '\n';
  return kExitOk;
}

int cmd_codec_decode(const std::string& delta_path, const std::optional<std::string>& base_path,
                     const std::string& out, bool no_fuse) {
  const auto bytes = codec::read_file(delta_path);
  const auto view = codec::parse_checkpoint(bytes);
  codec::ParameterSet params;
  if (base_path) {
    const auto base = load_params(*base_path);
    params = no_fuse ? base : codec::fuse(base, codec::standard_fusion(base));
    codec::apply_delta(params, view);
  } else {
    params = roles::params_from_snapshot(view);
  }
  codec::write_file(out, codec::serialize_parameter_set(params));
  std::cout << json{{"out", out}, {"version", view.header.version}, {"tensors", params.size()},
                    {"state_digest", to_hex(codec::layout_digest(params))}}
                   .dump()
            << '\n';
  return kExitOk;
}

int cmd_codec_synth(const std::string& out, std::uint64_t elements, std::uint32_t layers, const std::string& type,
                    std::uint64_t seed, std::uint64_t steps, double rho, double cluster) {
  auto model = roles::make_model(elements, parse_type(type), layers, seed);
  roles::UpdateGenerator gen;
  gen.rho = rho;
  gen.cluster_fraction = cluster;
  gen.seed = seed + 1;
  for (std::uint64_t k = 1; k <= steps; ++k) gen.apply(model.params, k);
  codec::write_file(out, codec::serialize_parameter_set(model.params));
  std::cout << json{{"out", out}, {"elements", model.params.total_elements()}, {"tensors", model.params.size()},
                    {"steps_applied", steps}}
                   .dump()
            << '\n';
  return kExitOk;
}

// ---- model-payload ----

int cmd_model_payload(const harness::PayloadParams& p, std::uint64_t samples_n) {
  const auto e = harness::payload_model(p);
  json j{{"elements", p.elements},
         {"rho", p.rho},
         {"width", p.width},
         {"cluster_fraction", p.cluster_fraction},
         {"layers", p.layers},
         {"nnz", e.nnz},
         {"mean_index_bytes", e.mean_index_bytes},
         {"index_bytes", e.index_bytes},
         {"value_bytes", e.value_bytes},
         {"record_overhead", e.record_overhead},
         {"header_bytes", e.header_bytes},
         {"total_bytes", e.total},
         {"naive_int32_bytes", e.naive_int32_bytes},
         {"naive_ratio", e.naive_ratio()},
         {"full_bytes", e.full_bytes},
         {"reduction", e.reduction()}};
  if (samples_n > 0 && p.rho > 0) {
    const auto nnz = static_cast<std::uint64_t>(std::ceil(p.rho * static_cast<double>(samples_n)));
    j["monte_carlo"] = {{"n", samples_n}, {"mean_index_bytes", harness::sampled_varint_bytes(samples_n, nnz, 1)}};
  }
  std::cout << j.dump(2) << '\n';
  return kExitOk;
}

// ---- report ----

int cmd_report(const std::vector<std::string>& dirs) {
  std::vector<double> throughputs;
  int rc = kExitOk;
  for (const auto& d : dirs) {
    try {
      const auto s = harness::load_summary(d);
      std::cout << harness::render_report(s);
      throughputs.push_back(s.value("tokens_per_s", 0.0));
      if (s.value("status", "") != "ok") rc = kExitFailure;
    } catch (const Error& e) {
      std::cerr << e.what() << '\n';
      rc = kExitFailure;
    }
  }
  if (throughputs.size() > 1)
    std::cout << "geometric-mean throughput over " << throughputs.size()
              << " runs: " << harness::geometric_mean(throughputs) << " tokens/s\n";
  return rc;
}

// ---- node ----

template <typename T>
T field(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

int run_hub_node(const json& cfg) {
  auto s = harness::load_scenario(cfg.at("scenario").get<std::string>());
  const fs::path out = field<std::string>(cfg, "out", "runs/" + s.name + "-hub");
  fs::create_directories(out);
  auto hc = harness::hub_config(s, out);
  hc.control_listen = transport::Endpoint::parse(field<std::string>(cfg, "control_listen", "0.0.0.0:7400"));
  hc.data_listen = transport::Endpoint::parse(field<std::string>(cfg, "data_listen", "0.0.0.0:7401"));
  hc.expected_actors = field<std::size_t>(cfg, "expected_actors", s.actor_count());
  hc.register_timeout = from_seconds(field<double>(cfg, "register_timeout_s", 300.0));
  roles::EventLog log(out / "events.jsonl");
  roles::Hub hub(hc, &log);
  hub.start();
  std::cout << "hub control " << hub.control_endpoint().str() << " data " << hub.data_endpoint().str() << std::endl;
  harness::RunResult r;
  r.dir = out;
  r.scenario = s;
  try {
    hub.run(s.steps);
    r.ok = true;
  } catch (const Error& e) {
    r.error = e.what();
  }
  hub.stop();
  const auto names = hub.actor_names();
  harness::fill_from_hub(hub, names, {}, r);
  harness::write_outputs(r, names);
  std::cout << harness::render_report(harness::load_summary(out));
  return r.ok ? kExitOk : kExitFailure;
}

int run_actor_node(const json& cfg, bool relay) {
  roles::ActorConfig c;
  c.id = cfg.at("id").get<std::uint64_t>();
  c.name = field<std::string>(cfg, "name", "");
  c.region = cfg.at("region").get<std::string>();
  c.is_relay = relay;
  c.hub_control = transport::Endpoint::parse(cfg.at("hub_control").get<std::string>());
  c.hub_data = transport::Endpoint::parse(cfg.at("hub_data").get<std::string>());
  if (cfg.contains("relay_data")) c.relay_data = transport::Endpoint::parse(cfg["relay_data"].get<std::string>());
  c.streams = field<std::size_t>(cfg, "streams", transport::kDefaultStreams);
  c.tau_true = field<double>(cfg, "tau", 1000.0);
  c.jitter = field<double>(cfg, "jitter", 0.0);
  c.seed = field<std::uint64_t>(cfg, "seed", 1);
  c.heartbeat = from_seconds(field<double>(cfg, "heartbeat_s", 1.0));
  c.commit_wait = from_seconds(field<double>(cfg, "commit_wait_s", 60.0));
  if (relay) {
    c.relay_listen = transport::Endpoint::parse(field<std::string>(cfg, "relay_listen", "0.0.0.0:7402"));
    if (cfg.contains("relay_link")) c.relay_link = harness::detail::parse_link(cfg["relay_link"], "relay_link", c.seed);
  }
  roles::Actor actor(c);
  actor.start();
  if (relay) std::cout << "relay serving on " << actor.relay_endpoint().str() << std::endl;
  while (actor.running() && !g_interrupted) std::this_thread::sleep_for(std::chrono::milliseconds(200));
  std::cout << actor.name() << " finished at version " << actor.active_version() << std::endl;
  actor.stop();
  return kExitOk;
}

int cmd_node(const std::string& path) {
  json cfg;
  try {
    cfg = json::parse(codec::read_file(path));
  } catch (const std::exception& e) {
    std::cerr << "invalid node config: " << e.what() << '\n';
    return kExitInvalid;
  }
  const auto role = field<std::string>(cfg, "role", "");
  try {
    if (role == "hub") return run_hub_node(cfg);
    if (role == "actor") return run_actor_node(cfg, false);
    if (role == "relay") return run_actor_node(cfg, true);
  } catch (const json::exception& e) {
    std::cerr << "invalid node config: " << e.what() << '\n';
    return kExitInvalid;
  }
  std::cerr << "invalid node config: role must be hub, relay or actor\n";
  return kExitInvalid;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::signal(SIGPIPE, SIG_IGN);

  CLI::App app{"deltasync: sparse delta weight synchronization for geo-distributed rollout actors"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run a scenario in-process and write a run directory");
  run_cmd->add_option("scenario", run.scenario, "Scenario JSON file")->required();
  run_cmd->add_option("--mode", run.mode, "delta | full | delta_multistream | full_multistream");
  run_cmd->add_option("--steps", run.steps, "Override the number of steps");
  run_cmd->add_option("--seed", run.seed, "Override the seed");
  run_cmd->add_option("--out", run.out, "Run directory (default runs/<name>-<mode>-<time>)");

  auto* codec_cmd = app.add_subcommand("codec", "Offline delta checkpoint tool");
  codec_cmd->require_subcommand(1);
  std::string enc_old, enc_new, enc_out;
  std::uint64_t enc_version = 1;
  bool enc_additive = false, enc_dense = false, no_fuse = false;
  auto* enc = codec_cmd->add_subcommand("encode", "Extract a delta between two parameter-set files");
  enc->add_option("old", enc_old, "Parameter set at the base version (SPPS)")->required();
  enc->add_option("new", enc_new, "Parameter set at the new version (SPPS)")->required();
  enc->add_option("-o,--out", enc_out, "Output checkpoint (SPDC)")->required();
  enc->add_option("--version", enc_version, "Version of the new parameters");
  enc->add_flag("--additive", enc_additive, "Additive values instead of replacement");
  enc->add_flag("--dense", enc_dense, "Dense snapshot of the new parameters");
  enc->add_flag("--no-fuse", no_fuse, "Do not fuse qkv / gate_up tensors");

  std::string dec_in, dec_out;
  std::optional<std::string> dec_base;
  auto* dec = codec_cmd->add_subcommand("decode", "Apply a checkpoint to a base parameter set");
  dec->add_option("checkpoint", dec_in, "Checkpoint (SPDC)")->required();
  dec->add_option("--base", dec_base, "Base parameter set (omit for a dense snapshot)");
  dec->add_option("-o,--out", dec_out, "Output parameter set (SPPS, inference layout)")->required();
  dec->add_flag("--no-fuse", no_fuse, "Base is already in inference layout");

  std::string insp_in;
  auto* insp = codec_cmd->add_subcommand("inspect", "Print a checkpoint's header and tensors as JSON");
  insp->add_option("checkpoint", insp_in, "Checkpoint (SPDC)")->required();

  std::string syn_out, syn_type = "f16";
  std::uint64_t syn_elements = 1'000'000, syn_seed = 1, syn_steps = 0;
  std::uint32_t syn_layers = 4;
  double syn_rho = 0.01, syn_cluster = 0.0;
  auto* syn = codec_cmd->add_subcommand("synth", "Write a synthetic parameter set, optionally after k updates");
  syn->add_option("-o,--out", syn_out, "Output parameter set (SPPS)")->required();
  syn->add_option("--elements", syn_elements, "Total scalar count");
  syn->add_option("--layers", syn_layers, "Transformer layers");
  syn->add_option("--type", syn_type, "f16 | f32");
  syn->add_option("--seed", syn_seed, "Seed");
  syn->add_option("--steps", syn_steps, "Sparse updates applied after initialization");
  syn->add_option("--rho", syn_rho, "Changed fraction per update");
  syn->add_option("--cluster-fraction", syn_cluster, "Share of changes in contiguous runs");

  harness::PayloadParams pp;
  std::string pp_type = "f16";
  std::uint64_t pp_samples = 0;
  auto* mp = app.add_subcommand("model-payload", "Analytic delta payload size");
  mp->add_option("--elements", pp.elements, "Total scalar count N")->required();
  mp->add_option("--rho", pp.rho, "Changed fraction");
  mp->add_option("--type", pp_type, "f16 | f32");
  mp->add_option("--layers", pp.layers, "Transformer layers");
  mp->add_option("--cluster-fraction", pp.cluster_fraction, "Share of changes in contiguous runs");
  mp->add_option("--mean-run", pp.mean_run, "Mean run length of clustered changes");
  mp->add_option("--monte-carlo", pp_samples, "Also sample gaps over this many positions");

  std::vector<std::string> report_dirs;
  auto* rep = app.add_subcommand("report", "Summarize run directories");
  rep->add_option("run_dir", report_dirs, "Run directories")->required();

  std::string node_cfg;
  auto* node = app.add_subcommand("node", "Run one hub, relay or actor process from a node config");
  node->add_option("config", node_cfg, "Node config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*enc) return cmd_codec_encode(enc_old, enc_new, enc_out, enc_version, enc_additive, enc_dense, no_fuse);
    if (*dec) return cmd_codec_decode(dec_in, dec_base, dec_out, no_fuse);
    if (*insp) return cmd_codec_inspect(insp_in);
    if (*syn) return cmd_codec_synth(syn_out, syn_elements, syn_layers, syn_type, syn_seed, syn_steps, syn_rho, syn_cluster);
    if (*mp) {
      pp.width = codec::element_width(parse_type(pp_type));
      if (pp.rho < 0 || pp.rho > 1 || pp.elements < 1) {
        std::cerr << "invalid payload parameters\n";
        return kExitInvalid;
      }
      return cmd_model_payload(pp, pp_samples);
    }
    if (*rep) return cmd_report(report_dirs);
    if (*node) return cmd_node(node_cfg);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::invalid_scenario ? kExitInvalid : kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}
