#include "strada/datahub.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "strada/error.hpp"
#include "strada/rng.hpp"
#include "strada/textio.hpp"

namespace strada {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

Timestamp DatasetBundle::time_at(std::size_t t) const {
  if (t < timestamps.size()) return timestamps[t];
  if (timestamps.empty()) throw DataError("dataset has no timestamps");
  return timestamps.back() + frequency * static_cast<long>(t - timestamps.size() + 1);
}

std::vector<Timestamp> DatasetBundle::extended_timestamps(std::size_t extra) const {
  std::vector<Timestamp> out = timestamps;
  for (std::size_t i = 0; i < extra; ++i) out.push_back(time_at(timestamps.size() + i));
  return out;
}

namespace {

std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

}  // namespace

DatasetBundle load_dataset(const std::filesystem::path& series_path,
                           const std::filesystem::path& edges_path,
                           std::optional<std::chrono::seconds> frequency) {
  std::ifstream in(series_path);
  if (!in) throw DataError("cannot open series file " + series_path.string());
  std::string line;
  std::size_t lineno = 0;
  std::size_t nodes = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    const auto cols = text::split(line, ',');
    if (cols.size() < 2 || cols[0] != "timestamp") {
      throw DataError(where(series_path, lineno) + ": header must be timestamp,node_0,...");
    }
    for (std::size_t i = 1; i < cols.size(); ++i) {
      if (cols[i] != "node_" + std::to_string(i - 1)) {
        throw DataError(where(series_path, lineno) + ": expected column node_" +
                        std::to_string(i - 1) + ", found '" + std::string(cols[i]) + "'");
      }
    }
    nodes = cols.size() - 1;
    break;
  }
  if (nodes == 0) throw DataError(series_path.string() + ": missing header");

  DatasetBundle b;
  b.name = series_path.parent_path().filename().string();
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    const auto cols = text::split(line, ',');
    if (cols.size() != nodes + 1) {
      throw DataError(where(series_path, lineno) + ": expected " + std::to_string(nodes + 1) +
                      " columns, found " + std::to_string(cols.size()));
    }
    Timestamp ts;
    try {
      ts = parse_timestamp(cols[0]);
    } catch (const InputError& e) {
      throw DataError(where(series_path, lineno) + ": " + e.what());
    }
    if (!b.timestamps.empty()) {
      if (ts <= b.timestamps.back()) {
        throw DataError(where(series_path, lineno) + ": timestamp " + std::string(cols[0]) +
                        " is not after the previous row");
      }
      const auto step = std::chrono::duration_cast<std::chrono::seconds>(ts - b.timestamps.back());
      if (b.timestamps.size() == 1 && !frequency) frequency = step;
      if (frequency && step != *frequency) {
        throw DataError(where(series_path, lineno) + ": irregular spacing of " +
                        std::to_string(step.count()) + "s (expected " +
                        std::to_string(frequency->count()) + "s)");
      }
    }
    b.timestamps.push_back(ts);
    for (std::size_t i = 1; i <= nodes; ++i) {
      double v;
      if (!text::parse_double(cols[i], v) || !std::isfinite(v)) {
        throw DataError(where(series_path, lineno) + ": bad value '" + std::string(cols[i]) +
                        "' for node_" + std::to_string(i - 1));
      }
      values.push_back(v);
    }
  }
  if (b.timestamps.empty()) throw DataError(series_path.string() + ": no data rows");
  b.frequency = frequency.value_or(std::chrono::seconds(300));
  b.series = Series(b.timestamps.size(), nodes, 1, std::move(values));
  b.graph = load_edge_list(edges_path, nodes);
  return b;
}

void save_series_csv(const DatasetBundle& b, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "timestamp";
  for (std::size_t n = 0; n < b.nodes(); ++n) out << ",node_" << n;
  out << '\n';
  for (std::size_t t = 0; t < b.steps(); ++t) {
    out << format_timestamp(b.timestamps[t]);
    for (std::size_t n = 0; n < b.nodes(); ++n) out << ',' << text::format_double(b.series.at(t, n));
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

void save_dataset_dir(const DatasetBundle& b, const std::filesystem::path& dir,
                      const std::string& manifest_extra_json) {
  std::filesystem::create_directories(dir);
  save_series_csv(b, dir / "series.csv");
  save_edge_list(b.graph, dir / "edges.csv");
  nlohmann::json m = nlohmann::json::parse(manifest_extra_json);
  m["name"] = b.name;
  m["nodes"] = b.nodes();
  m["steps"] = b.steps();
  m["frequency_seconds"] = b.frequency.count();
  const double t = static_cast<double>(b.steps());
  m["splits"] = {{"train", static_cast<double>(b.splits.train.size()) / t},
                 {"val", static_cast<double>(b.splits.val.size()) / t},
                 {"test", static_cast<double>(b.splits.test.size()) / t}};
  m["split_bounds"] = {b.splits.train.end, b.splits.val.end};
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  out << m.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + (dir / "manifest.json").string());
}

DatasetBundle load_dataset_dir(const std::filesystem::path& dir) {
  std::optional<std::chrono::seconds> freq;
  nlohmann::json m = nlohmann::json::object();
  const auto manifest = dir / "manifest.json";
  if (std::filesystem::exists(manifest)) {
    std::ifstream in(manifest);
    try {
      m = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(manifest.string() + ": " + e.what());
    }
    if (m.contains("frequency_seconds")) freq = std::chrono::seconds(m["frequency_seconds"].get<long>());
  }
  DatasetBundle b = load_dataset(dir / "series.csv", dir / "edges.csv", freq);
  if (m.contains("name")) b.name = m["name"].get<std::string>();
  if (m.contains("split_bounds")) {
    const std::size_t a = m["split_bounds"][0].get<std::size_t>();
    const std::size_t c = m["split_bounds"][1].get<std::size_t>();
    if (!(0 < a && a < c && c < b.steps())) throw DataError(manifest.string() + ": bad split_bounds");
    b.splits = {{0, a}, {a, c}, {c, b.steps()}};
  } else {
    apply_split(b);
  }
  return b;
}

Splits chronological_split(std::size_t steps, double train, double val, double test,
                           std::size_t min_points) {
  if (!(train > 0 && val > 0 && test > 0)) throw InputError("split ratios must all be positive");
  if (std::abs(train + val + test - 1.0) > 1e-9) throw InputError("split ratios must sum to 1");
  // The small slack keeps products such as 0.9·100 = 89.999… on the intended side.
  const auto bound = [&](double r) {
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(steps) + 1e-9));
  };
  const std::size_t a = bound(train);
  const std::size_t c = bound(train + val);
  Splits s{{0, a}, {a, c}, {c, steps}};
  for (const auto& [name, r] : {std::pair{"train", s.train}, {"val", s.val}, {"test", s.test}}) {
    if (r.size() == 0 || r.size() < min_points) {
      throw DataError(std::string(name) + " split has " + std::to_string(r.size()) +
                      " steps; at least " + std::to_string(std::max<std::size_t>(min_points, 1)) +
                      " required (series of " + std::to_string(steps) + " steps)");
    }
  }
  return s;
}

void apply_split(DatasetBundle& b, double train, double val, double test, std::size_t min_points) {
  b.splits = chronological_split(b.steps(), train, val, test, min_points);
}

void SynthParams::validate() const {
  if (std::abs(alpha) + std::abs(beta) > 1.0) {
    throw ConfigError("synthetic dynamics unstable: |alpha| + |beta| = " +
                      std::to_string(std::abs(alpha) + std::abs(beta)) + " exceeds 1");
  }
  if (period == 0) throw ConfigError("synthetic period must be positive");
  if (!(noise_nu > 0) || noise_sigma < 0) throw ConfigError("bad synthetic noise parameters");
  if (radius < 0 || step_seconds <= 0) throw ConfigError("bad synthetic graph/time parameters");
  parse_timestamp(start);
}

DatasetBundle synth_generate(std::uint64_t seed, std::size_t nodes, std::size_t steps,
                             const SynthParams& params) {
  params.validate();
  if (nodes < 2) throw InputError("synth_generate: need at least 2 nodes");
  if (steps < 500) throw InputError("synth_generate: need at least 500 steps");

  // Graph: points in the unit square joined when closer than the radius.
  const double n = static_cast<double>(nodes);
  const double radius =
      params.radius > 0 ? params.radius : 1.5 * std::sqrt(std::log(n) / (std::numbers::pi * n)) + 0.1;
  std::optional<RoadGraph> graph;
  for (std::size_t draw = 0; draw < params.max_graph_draws && !graph; ++draw) {
    RngStream gs(seed, 1000 + draw);
    std::vector<double> x(nodes), y(nodes);
    for (std::size_t i = 0; i < nodes; ++i) {
      x[i] = gs.uniform();
      y[i] = gs.uniform();
    }
    std::vector<Edge> edges;
    for (std::size_t i = 0; i < nodes; ++i) {
      for (std::size_t j = i + 1; j < nodes; ++j) {
        if (std::hypot(x[i] - x[j], y[i] - y[j]) < radius) edges.push_back({i, j, 1.0});
      }
    }
    RoadGraph g = RoadGraph::from_edges(nodes, edges);
    if (g.connected()) graph = std::move(g);
  }
  if (!graph) {
    throw DataError("synth_generate: no connected graph after " +
                    std::to_string(params.max_graph_draws) + " draws (radius " +
                    std::to_string(radius) + ")");
  }

  // Row-normalized adjacency as neighbor lists with weights.
  std::vector<std::vector<std::pair<std::size_t, double>>> rows(nodes);
  for (std::size_t v = 0; v < nodes; ++v) {
    const double deg = graph->degrees()(static_cast<Eigen::Index>(v));
    for (std::size_t u : graph->neighbors(v)) {
      rows[v].emplace_back(u, graph->adjacency()(static_cast<Eigen::Index>(v),
                                                 static_cast<Eigen::Index>(u)) / deg);
    }
  }

  RngStream ps(seed, 1);
  std::vector<double> phase(nodes);
  for (auto& p : phase) p = 2.0 * std::numbers::pi * ps.uniform();

  RngStream noise(seed, 2);
  const double w = 2.0 * std::numbers::pi / static_cast<double>(params.period);
  std::vector<double> cur(nodes, 0.0), next(nodes);
  std::vector<double> out;
  out.reserve(steps * nodes);
  const std::size_t total = params.burn_in + steps;
  for (std::size_t t = 0; t < total; ++t) {
    if (t >= params.burn_in) out.insert(out.end(), cur.begin(), cur.end());
    // Forcing phase is tied to the recorded clock so that t = 0 is midnight.
    const double clock = static_cast<double>(t) - static_cast<double>(params.burn_in);
    for (std::size_t v = 0; v < nodes; ++v) {
      double mix = 0.0;
      for (const auto& [u, a] : rows[v]) mix += a * cur[u];
      double eps = 0.0;
      if (params.noise_sigma > 0) {
        const double z = noise.normal();
        eps = z / std::sqrt(noise.chi_square(params.noise_nu) / params.noise_nu);
      }
      next[v] = params.alpha * cur[v] + params.beta * mix +
                params.amplitude * std::sin(w * clock + phase[v]) + params.noise_sigma * eps;
    }
    std::swap(cur, next);
  }
  const double lo = *std::min_element(out.begin(), out.end());
  for (double& v : out) v += params.level - lo;

  DatasetBundle b;
  b.name = "synth-" + std::to_string(seed);
  b.graph = std::move(*graph);
  b.series = Series(steps, nodes, 1, std::move(out));
  b.frequency = std::chrono::seconds(params.step_seconds);
  const Timestamp start = parse_timestamp(params.start);
  b.timestamps.resize(steps);
  for (std::size_t t = 0; t < steps; ++t) b.timestamps[t] = start + b.frequency * static_cast<long>(t);
  b.splits = chronological_split(steps);
  return b;
}

// ---- Checkpoints ----------------------------------------------------------

namespace {

enum : std::uint32_t { kTagEnd = 0, kTagConfig = 1, kTagTensor = 2, kTagAdapter = 3 };
constexpr char kMagic[4] = {'S', 'T', 'R', '1'};

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

std::string tensor_body(const NamedTensor& nt) {
  std::string body;
  put<std::uint32_t>(body, static_cast<std::uint32_t>(nt.name.size()));
  body += nt.name;
  put<std::uint8_t>(body, 1);  // dtype: float32
  put<std::uint32_t>(body, static_cast<std::uint32_t>(nt.tensor.rank()));
  for (std::size_t d : nt.tensor.shape()) put<std::uint64_t>(body, d);
  const auto data = nt.tensor.data();
  body.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  return body;
}

void append_record(std::string& file, std::uint32_t tag, const std::string& body) {
  std::string rec;
  put<std::uint32_t>(rec, tag);
  put<std::uint64_t>(rec, body.size());
  rec += body;
  const auto crc = static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(rec.data()), static_cast<uInt>(rec.size())));
  put<std::uint32_t>(rec, crc);
  file += rec;
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::filesystem::path& path) : b_(bytes), path_(path) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == b_.size(); }

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw IntegrityError(path_.string() + ": " + msg + " at byte offset " + std::to_string(at));
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (n > b_.size() - pos_) fail(std::string("truncated while reading ") + what, pos_);
  }

  const std::string& b_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

NamedTensor parse_tensor(const std::string& body, std::size_t base, const std::filesystem::path& path) {
  Reader r(body, path);
  NamedTensor nt;
  {
    const auto len = r.get<std::uint32_t>("tensor name length");
    nt.name = r.bytes(len, "tensor name");
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype != 1) r.fail("unsupported dtype " + std::to_string(dtype), base + r.offset());
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) r.fail("implausible tensor rank", base + r.offset());
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>("shape");
    const std::size_t count = shape_size(shape);
    if (count > (body.size() - r.offset()) / sizeof(float)) {
      r.fail("tensor '" + nt.name + "' payload shorter than its shape", base + r.offset());
    }
    std::vector<float> data(count);
    const std::string raw = r.bytes(count * sizeof(float), "tensor payload");
    std::memcpy(data.data(), raw.data(), raw.size());
    if (!r.at_end()) r.fail("trailing bytes after tensor '" + nt.name + "'", base + r.offset());
    nt.tensor = Tensor<float>(std::move(shape), std::move(data));
  }
  return nt;
}

}  // namespace

void save_checkpoint(const CheckpointData& data, const std::filesystem::path& path) {
  std::string file(kMagic, 4);
  put<std::uint32_t>(file, kCheckpointVersion);
  append_record(file, kTagConfig, data.config);
  for (const auto& t : data.tensors) append_record(file, kTagTensor, tensor_body(t));
  for (const auto& t : data.adapters) append_record(file, kTagAdapter, tensor_body(t));
  std::string end;
  put<std::uint64_t>(end, 1 + data.tensors.size() + data.adapters.size());
  append_record(file, kTagEnd, end);

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    out.write(file.data(), static_cast<std::streamsize>(file.size()));
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();

  Reader r(bytes, path);
  const std::string magic = r.bytes(4, "magic");
  if (magic != std::string(kMagic, 4)) r.fail("not a checkpoint (bad magic)", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw IntegrityError(path.string() + ": unsupported checkpoint format version " +
                         std::to_string(version) + " (this build reads version " +
                         std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointData data;
  bool have_config = false;
  std::uint64_t records = 0;
  for (;;) {
    const std::size_t start = r.offset();
    const auto tag = r.get<std::uint32_t>("record tag");
    const auto len = r.get<std::uint64_t>("record length");
    if (len > bytes.size()) r.fail("record length exceeds file size", start);
    const std::size_t body_at = r.offset();
    const std::string body = r.bytes(static_cast<std::size_t>(len), "record body");
    const auto stored = r.get<std::uint32_t>("record checksum");
    const auto crc = static_cast<std::uint32_t>(crc32(
        0L, reinterpret_cast<const Bytef*>(bytes.data() + start), static_cast<uInt>(body_at + len - start)));
    if (crc != stored) r.fail("checksum mismatch in record", start);
    if (tag == kTagEnd) {
      if (body.size() != 8) r.fail("malformed end record", start);
      std::uint64_t expected;
      std::memcpy(&expected, body.data(), 8);
      if (expected != records) r.fail("record count mismatch", start);
      break;
    }
    ++records;
    switch (tag) {
      case kTagConfig:
        data.config = body;
        have_config = true;
        break;
      case kTagTensor:
        data.tensors.push_back(parse_tensor(body, body_at, path));
        break;
      case kTagAdapter:
        data.adapters.push_back(parse_tensor(body, body_at, path));
        break;
      default:
        r.fail("unknown record tag " + std::to_string(tag), start);
    }
  }
  if (!r.at_end()) r.fail("trailing bytes after end record", r.offset());
  if (!have_config) r.fail("checkpoint has no config record", 8);
  return data;
}

std::string config_digest(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace strada
