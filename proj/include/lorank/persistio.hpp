#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lorank/config.hpp"
#include "lorank/harness.hpp"
#include "lorank/rankselect.hpp"

namespace lorank {

// --- checkpoints ---------------------------------------------------------------
//
// Little-endian throughout:
//   "ALRA" | u32 version | u64 seed | str spec | str config
//   u32 n_tensors, n × (str name | u64 rows | u64 cols | rows*cols × f64)
//   u32 n_betas,   n × (str layer | u64 k | k × f64)
// where str is u32 length followed by the bytes.

inline constexpr char kCheckpointMagic[4] = {'A', 'L', 'R', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t seed = 0;
  std::string spec;    // model.* lines
  std::string config;  // full config echo
  std::map<std::string, Tensor<double>> tensors;
  std::map<std::string, std::vector<double>> betas;  // keyed by layer

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t x) { put(x, 4); }
  void u64(std::uint64_t x) { put(x, 8); }
  void f64(double x) { put(std::bit_cast<std::uint64_t>(x), 8); }
  void str(const std::string& s) {
    if (s.size() > std::numeric_limits<std::uint32_t>::max()) throw FormatError("string too long for checkpoint");
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }
  void raw(const char* p, std::size_t n) { bytes_.append(p, n); }
  const std::string& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t x, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
  }
  std::string bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::size_t n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(path_ + ": truncated checkpoint (needed " + std::to_string(n) + " bytes at offset " +
                        std::to_string(pos_) + ", file has " + std::to_string(bytes_.size()) + ")");
  }

 private:
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t x = 0;
    for (int i = 0; i < n; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return x;
  }
  const std::string& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

/// Writes to a sibling temp file, then renames over the target.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      f.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw IoError("write failed for " + path);
    }
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path);
  }
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(c.seed);
  w.str(c.spec);
  w.str(c.config);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.str(name);
    w.u64(t.rows());
    w.u64(t.cols());
    for (double x : t.vec()) w.f64(x);
  }
  w.u32(static_cast<std::uint32_t>(c.betas.size()));
  for (const auto& [layer, b] : c.betas) {
    w.str(layer);
    w.u64(b.size());
    for (double x : b) w.f64(x);
  }
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
  detail::ByteReader r(bytes, path);
  if (bytes.size() < 4 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0)
    throw FormatError(path + ": not a checkpoint (expected magic \"ALRA\")");
  r.raw(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  Checkpoint c;
  c.seed = r.u64();
  c.spec = r.str();
  c.config = r.str();
  const auto n_tensors = r.u32();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.str();
    const auto rows = r.u64();
    const auto cols = r.u64();
    if (cols != 0 && rows > std::numeric_limits<std::uint64_t>::max() / 8 / cols)
      throw FormatError(path + ": implausible shape for " + name);
    r.need(rows * cols * 8);
    std::vector<double> data(rows * cols);
    for (auto& x : data) x = r.f64();
    c.tensors.emplace(std::move(name), Tensor<double>(rows, cols, std::move(data)));
  }
  const auto n_betas = r.u32();
  for (std::uint32_t i = 0; i < n_betas; ++i) {
    auto layer = r.str();
    const auto k = r.u64();
    r.need(k * 8);
    std::vector<double> b(k);
    for (auto& x : b) x = r.f64();
    c.betas.emplace(std::move(layer), std::move(b));
  }
  if (!r.at_end()) throw FormatError(path + ": trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  detail::write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path), path); }

inline Checkpoint make_checkpoint(const Network& net, const RunConfig& config, std::uint64_t seed) {
  Checkpoint c;
  c.seed = seed;
  c.spec = spec_text(net.spec);
  RunConfig echo = config;
  echo.search.constraint_mode = net.mode;
  c.config = config_text(echo);
  for (const auto& [name, t] : net.params) {
    if (Network::is_selection(name)) {
      c.betas[name.substr(0, name.size() - std::string(".lora_beta").size())] = t.vec();
    } else {
      c.tensors.emplace(name, t);
    }
  }
  return c;
}

/// Scope follows the content: logits mean a search network, bare factors a
/// fixed-rank one, neither a plain network.
inline Network network_from(const Checkpoint& c) {
  Network net;
  net.spec = parse_spec_text(c.spec);
  net.spec.validate();
  net.mode = parse_config(c.config).search.constraint_mode;
  net.params = c.tensors;
  for (const auto& [layer, b] : c.betas) net.params[layer + ".lora_beta"] = Tensor<double>::row_vector(b);
  for (const auto& l : net.spec.linears())
    if (!net.params.count(l.name + ".w")) throw FormatError("checkpoint lacks " + l.name + ".w");
  if (!net.params.count("head.w")) throw FormatError("checkpoint lacks head.w");
  net.scope = !c.betas.empty()               ? TrainScope::lora_search
              : !net.lora_layers().empty() ? TrainScope::lora_fixed
                                           : TrainScope::full;
  return net;
}

// --- run reports ------------------------------------------------------------------

inline constexpr int kReportSchemaVersion = 1;

struct GridTrialSummary {
  std::size_t rank = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  std::size_t grad_evals = 0;
  bool failed = false;
  std::string error;
};

struct RunReport {
  int schema_version = kReportSchemaVersion;
  std::string command;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
  SearchTrajectory trajectory;
  bool aborted = false;
  std::string abort_reason;
  std::vector<RankDecision> decisions;
  std::vector<std::size_t> planted_ranks;
  std::map<std::string, double> metrics;  // NaN is written as null
  CostLedger ledger;
  std::map<std::string, std::size_t> param_counts;
  std::vector<GridTrialSummary> grid;
  std::size_t grid_best_rank = 0;
  std::map<std::string, std::string> timestamps;
  nlohmann::json extras = nlohmann::json::object();

  RunConfig run_config() const {
    RunConfig c;
    for (const auto& [k, v] : config) set_config_value(c, k, v);
    return c;
  }
  std::vector<std::size_t> ranks() const {
    std::vector<std::size_t> out;
    for (const auto& d : decisions) out.push_back(d.rank());
    return out;
  }
};

inline std::map<std::string, std::string> config_echo(const RunConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& k : config_keys()) out[k.key] = k.get(c);
  return out;
}

namespace detail {

inline nlohmann::json number_or_null(double x) {
  return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}

inline double number_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline const std::vector<std::string>& report_keys() {
  static const std::vector<std::string> keys{
      "schema_version", "command",  "seed",   "config",       "trajectory", "aborted",    "abort_reason",
      "decisions",      "ranks",    "planted_ranks", "metrics", "ledger",   "param_counts", "grid", "timestamps"};
  return keys;
}

}  // namespace detail

inline nlohmann::json to_json(const RunReport& r) {
  using nlohmann::json;
  json j = r.extras.is_object() ? r.extras : json::object();
  j["schema_version"] = r.schema_version;
  j["command"] = r.command;
  j["seed"] = r.seed;
  j["config"] = r.config;

  json epochs = json::array();
  for (const auto& e : r.trajectory.epochs) {
    json alphas = json::object();
    for (const auto& [layer, a] : e.alphas) alphas[layer] = a;
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", detail::number_or_null(e.train_loss)},
                      {"val_loss", detail::number_or_null(e.val_loss)},
                      {"wall_ms", e.wall_ms},
                      {"alpha", alphas}});
  }
  j["trajectory"] = {{"initial_val_loss", detail::number_or_null(r.trajectory.initial_val_loss)}, {"epochs", epochs}};
  j["aborted"] = r.aborted;
  j["abort_reason"] = r.abort_reason;

  json decisions = json::array();
  for (const auto& d : r.decisions)
    decisions.push_back({{"layer", d.layer},
                         {"rank", d.rank()},
                         {"mode", to_string(d.mode)},
                         {"threshold", d.threshold},
                         {"kept", d.kept},
                         {"alpha", d.alpha}});
  j["decisions"] = decisions;
  j["ranks"] = r.ranks();
  j["planted_ranks"] = r.planted_ranks;

  json metrics = json::object();
  for (const auto& [k, v] : r.metrics) metrics[k] = detail::number_or_null(v);
  j["metrics"] = metrics;

  json entries = json::array();
  for (const auto& e : r.ledger.entries)
    entries.push_back({{"phase", e.phase}, {"grad_evals", e.grad_evals}, {"wall_ms", e.wall_ms}, {"failed", e.failed}});
  j["ledger"] = {{"entries", entries}, {"total_grad_evals", r.ledger.total_grad_evals()}};
  j["param_counts"] = r.param_counts;

  json trials = json::array();
  for (const auto& t : r.grid)
    trials.push_back({{"rank", t.rank},
                      {"train_loss", detail::number_or_null(t.train_loss)},
                      {"test_loss", detail::number_or_null(t.test_loss)},
                      {"grad_evals", t.grad_evals},
                      {"failed", t.failed},
                      {"error", t.error}});
  j["grid"] = {{"best_rank", r.grid_best_rank}, {"trials", trials}};
  j["timestamps"] = r.timestamps;
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  try {
    RunReport r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != kReportSchemaVersion)
      throw FormatError("report schema_version " + std::to_string(r.schema_version) + ", expected " +
                        std::to_string(kReportSchemaVersion));
    r.command = j.at("command").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config = j.at("config").get<std::map<std::string, std::string>>();

    const auto& t = j.at("trajectory");
    r.trajectory.initial_val_loss = detail::number_from(t.at("initial_val_loss"));
    for (const auto& e : t.at("epochs")) {
      EpochRecord rec;
      rec.epoch = e.at("epoch").get<std::size_t>();
      rec.train_loss = detail::number_from(e.at("train_loss"));
      rec.val_loss = detail::number_from(e.at("val_loss"));
      rec.wall_ms = e.at("wall_ms").get<double>();
      rec.alphas = e.at("alpha").get<std::map<std::string, AlphaVector>>();
      r.trajectory.epochs.push_back(std::move(rec));
    }
    r.aborted = j.at("aborted").get<bool>();
    r.abort_reason = j.at("abort_reason").get<std::string>();

    for (const auto& d : j.at("decisions")) {
      RankDecision rd;
      rd.layer = d.at("layer").get<std::string>();
      rd.mode = parse_constraint_mode(d.at("mode").get<std::string>());
      rd.threshold = d.at("threshold").get<double>();
      rd.kept = d.at("kept").get<std::vector<std::size_t>>();
      rd.alpha = d.at("alpha").get<AlphaVector>();
      if (d.at("rank").get<std::size_t>() != rd.kept.size())
        throw FormatError("decision for " + rd.layer + " has rank inconsistent with kept");
      r.decisions.push_back(std::move(rd));
    }
    r.planted_ranks = j.at("planted_ranks").get<std::vector<std::size_t>>();
    for (const auto& [k, v] : j.at("metrics").items()) r.metrics[k] = detail::number_from(v);
    for (const auto& e : j.at("ledger").at("entries"))
      r.ledger.add(e.at("phase").get<std::string>(), e.at("grad_evals").get<std::size_t>(),
                   e.at("wall_ms").get<double>(), e.at("failed").get<bool>());
    r.param_counts = j.at("param_counts").get<std::map<std::string, std::size_t>>();
    const auto& g = j.at("grid");
    r.grid_best_rank = g.at("best_rank").get<std::size_t>();
    for (const auto& tr : g.at("trials")) {
      GridTrialSummary s;
      s.rank = tr.at("rank").get<std::size_t>();
      s.train_loss = detail::number_from(tr.at("train_loss"));
      s.test_loss = detail::number_from(tr.at("test_loss"));
      s.grad_evals = tr.at("grad_evals").get<std::size_t>();
      s.failed = tr.at("failed").get<bool>();
      s.error = tr.at("error").get<std::string>();
      r.grid.push_back(std::move(s));
    }
    r.timestamps = j.at("timestamps").get<std::map<std::string, std::string>>();

    r.extras = nlohmann::json::object();
    for (const auto& [k, v] : j.items())
      if (std::find(detail::report_keys().begin(), detail::report_keys().end(), k) == detail::report_keys().end())
        r.extras[k] = v;
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

inline std::string report_text(const RunReport& r) { return to_json(r).dump(2) + "\n"; }

inline RunReport parse_report(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("report is not valid JSON: ") + e.what());
  }
  return report_from_json(j);
}

inline RunReport load_report(const std::string& path) {
  try {
    return parse_report(detail::read_file(path));
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void emit_report(const RunReport& r, const std::string& path) { detail::write_file_atomic(path, report_text(r)); }

/// epoch, train_loss, val_loss, wall_ms, then alpha_<layer>_<j> per component.
inline std::string trajectory_csv(const SearchTrajectory& t) {
  std::vector<std::pair<std::string, std::size_t>> columns;
  if (!t.epochs.empty())
    for (const auto& [layer, a] : t.epochs.front().alphas) columns.emplace_back(layer, a.size());
  std::string out = "epoch,train_loss,val_loss,wall_ms";
  for (const auto& [layer, k] : columns)
    for (std::size_t j = 0; j < k; ++j) out += ",alpha_" + layer + "_" + std::to_string(j);
  out += "\n";
  char buf[32];
  auto num = [&buf](double x) {
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return std::string(buf);
  };
  for (const auto& e : t.epochs) {
    out += std::to_string(e.epoch) + "," + num(e.train_loss) + "," + num(e.val_loss) + "," + num(e.wall_ms);
    for (const auto& [layer, k] : columns) {
      const auto it = e.alphas.find(layer);
      for (std::size_t j = 0; j < k; ++j)
        out += "," + (it != e.alphas.end() && j < it->second.size() ? num(it->second[j]) : std::string());
    }
    out += "\n";
  }
  return out;
}

inline void emit_trajectory_csv(const SearchTrajectory& t, const std::string& path) {
  detail::write_file_atomic(path, trajectory_csv(t));
}

}  // namespace lorank
