#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "ucil/trainer.hpp"

namespace ucil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Binary section payloads are little-endian host dumps, like the feature files.
class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.append(p, sizeof(T));
  }
  void put_doubles(const double* data, std::size_t n) {
    if (n == 0) return;
    bytes_.append(reinterpret_cast<const char*>(data), n * sizeof(double));
  }
  template <typename Derived>
  void put_dense(const Eigen::DenseBase<Derived>& m) {
    put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    put_doubles(m.derived().data(), static_cast<std::size_t>(m.size()));
  }
  void put_vector(const std::vector<double>& v) {
    put<std::uint64_t>(v.size());
    put_doubles(v.data(), v.size());
  }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string section) : bytes_(bytes), section_(std::move(section)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_doubles(double* out, std::size_t n) {
    if (n == 0) return;
    need(n * sizeof(double));
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  Matrix get_matrix() {
    const auto rows = get<std::uint64_t>();
    const auto cols = get<std::uint64_t>();
    need_doubles(rows, cols);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    get_doubles(m.data(), static_cast<std::size_t>(rows * cols));
    return m;
  }
  Vector get_column() {
    const auto rows = get<std::uint64_t>();
    const auto cols = get<std::uint64_t>();
    if (cols != 1 && rows != 0) fail("expected a vector");
    need_doubles(rows, 1);
    Vector v(static_cast<Eigen::Index>(rows));
    get_doubles(v.data(), static_cast<std::size_t>(rows));
    return v;
  }
  std::vector<double> get_vector() {
    const auto n = get<std::uint64_t>();
    need_doubles(n, 1);
    std::vector<double> v(static_cast<std::size_t>(n));
    get_doubles(v.data(), v.size());
    return v;
  }
  void finish() const {
    if (pos_ != bytes_.size()) fail("trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated");
  }
  void need_doubles(std::uint64_t rows, std::uint64_t cols) const {
    const std::uint64_t left = (bytes_.size() - pos_) / sizeof(double);
    if (cols != 0 && rows > left / cols) fail("truncated");
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(FormatError::Kind::BadSection, "checkpoint section '" + section_ + "': " + what);
  }

  const std::string& bytes_;
  std::string section_;
  std::size_t pos_ = 0;
};

void put_moments(Writer& w, const AdamMoments& m) {
  w.put<std::int64_t>(m.step);
  w.put_vector(m.first);
  w.put_vector(m.second);
}

AdamMoments get_moments(Reader& r) {
  AdamMoments m;
  m.step = r.get<std::int64_t>();
  m.first = r.get_vector();
  m.second = r.get_vector();
  if (m.first.size() != m.second.size())
    throw FormatError(FormatError::Kind::BadSection, "checkpoint: moment size mismatch");
  return m;
}

std::string memory_section(const PrototypeMemory& memory) {
  Writer w;
  w.put<std::uint64_t>(memory.stats().size());
  for (const auto& s : memory.stats()) {
    w.put<std::int32_t>(s.task_id);
    w.put<std::int32_t>(s.class_id);
    w.put<std::int64_t>(s.count);
    w.put<double>(s.purity);
    w.put_dense(s.mean);
    w.put_dense(s.var);
  }
  w.put<std::uint64_t>(memory.exemplars().size());
  for (const auto& e : memory.exemplars()) {
    w.put<std::int32_t>(e.task_id);
    w.put<std::int32_t>(e.class_id);
    w.put_dense(e.feature);
  }
  return w.take();
}

PrototypeMemory parse_memory(const std::string& bytes) {
  Reader r(bytes, "memory");
  std::vector<ProtoStat> stats(r.get<std::uint64_t>());
  for (auto& s : stats) {
    s.task_id = r.get<std::int32_t>();
    s.class_id = r.get<std::int32_t>();
    s.count = r.get<std::int64_t>();
    s.purity = r.get<double>();
    s.mean = r.get_column();
    s.var = r.get_column();
  }
  std::vector<Exemplar> exemplars(r.get<std::uint64_t>());
  for (auto& e : exemplars) {
    e.task_id = r.get<std::int32_t>();
    e.class_id = r.get<std::int32_t>();
    e.feature = r.get_column();
  }
  r.finish();
  PrototypeMemory memory;
  memory.add(std::move(stats));
  memory.add(std::move(exemplars));
  return memory;
}

std::string jsonl(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + '\n';
  return out;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& path, const EngineState& state) {
  std::vector<std::pair<std::string, std::string>> sections;
  sections.emplace_back("config", state.config.to_json());

  json meta{{"dim", state.dim},
            {"tasks_done", state.tasks_done},
            {"temperature", state.centers.temperature},
            {"task_offsets", state.centers.task_offsets},
            {"identity_projector", state.projector.identity},
            // Every random stream is derived from (seed, task, epoch, batch), so
            // the seed and the next task index fully describe the generator state.
            {"rng", {{"seed", state.config.seed}, {"next_task", state.tasks_done}}}};
  sections.emplace_back("state", meta.dump());

  Writer proj;
  proj.put_dense(state.projector.w1);
  proj.put_dense(state.projector.b1);
  proj.put_dense(state.projector.w2);
  proj.put_dense(state.projector.b2);
  sections.emplace_back("projector", proj.take());

  Writer centers;
  centers.put_dense(state.centers.centers);
  sections.emplace_back("centers", centers.take());

  Writer protos;
  protos.put_dense(state.last_prototypes.means);
  protos.put_dense(state.last_prototypes.log_sigma);
  sections.emplace_back("prototypes", protos.take());

  sections.emplace_back("memory", memory_section(state.memory));

  Writer moments;
  for (const auto* m : {&state.w1_moments, &state.b1_moments, &state.w2_moments, &state.b2_moments,
                        &state.center_moments})
    put_moments(moments, *m);
  sections.emplace_back("moments", moments.take());

  std::vector<std::string> history;
  for (const auto& r : state.reports) history.push_back(report_json(r));
  sections.emplace_back("history", jsonl(history));
  std::vector<std::string> metrics;
  for (const auto& m : state.metrics) metrics.push_back(epoch_record_json(m));
  sections.emplace_back("metrics", jsonl(metrics));

  // Write to a sibling file and rename so a crash never leaves a half checkpoint.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string(), "cannot open checkpoint for writing");
    out.write(kCheckpointMagic, 4);
    const std::uint32_t version = kCheckpointVersion;
    const auto count = static_cast<std::uint32_t>(sections.size());
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&count), 4);
    for (const auto& [name, payload] : sections) {
      const auto name_len = static_cast<std::uint32_t>(name.size());
      const auto size = static_cast<std::uint64_t>(payload.size());
      out.write(reinterpret_cast<const char*>(&name_len), 4);
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      out.write(reinterpret_cast<const char*>(&size), 8);
      out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    }
    if (!out) throw IoError(tmp.string(), "checkpoint write failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError(path.string(), "cannot move checkpoint into place: " + ec.message());
}

EngineState load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open checkpoint");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [&path](FormatError::Kind kind, const std::string& what) {
    throw FormatError(kind, path.string() + ": " + what);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    fail(FormatError::Kind::BadMagic, "not a checkpoint (bad magic)");
  std::uint32_t version = 0, count = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&count, bytes.data() + 8, 4);
  if (version != kCheckpointVersion)
    fail(FormatError::Kind::VersionMismatch, "unsupported checkpoint version " + std::to_string(version));

  std::map<std::string, std::string> sections;
  std::size_t pos = 12;
  for (std::uint32_t s = 0; s < count; ++s) {
    std::uint32_t name_len = 0;
    std::uint64_t size = 0;
    if (pos + 4 > bytes.size()) fail(FormatError::Kind::Truncated, "truncated section table");
    std::memcpy(&name_len, bytes.data() + pos, 4);
    pos += 4;
    if (pos + name_len + 8 > bytes.size()) fail(FormatError::Kind::Truncated, "truncated section header");
    std::string name(bytes.data() + pos, name_len);
    pos += name_len;
    std::memcpy(&size, bytes.data() + pos, 8);
    pos += 8;
    if (pos + size > bytes.size()) fail(FormatError::Kind::Truncated, "section '" + name + "' is truncated");
    sections[name] = bytes.substr(pos, size);
    pos += size;
  }
  if (pos != bytes.size()) fail(FormatError::Kind::BadSection, "trailing bytes after sections");
  for (const char* required : {"config", "state", "projector", "centers", "prototypes", "memory", "moments",
                               "history", "metrics"})
    if (!sections.count(required)) fail(FormatError::Kind::BadSection, std::string("missing section '") + required + "'");

  EngineState state;
  try {
    state.config = TrainConfig::from_json(sections["config"]);
    const auto meta = json::parse(sections["state"]);
    state.dim = meta.at("dim").get<int>();
    state.tasks_done = meta.at("tasks_done").get<int>();
    state.centers.temperature = meta.at("temperature").get<double>();
    state.centers.task_offsets = meta.at("task_offsets").get<std::vector<Eigen::Index>>();
    state.projector.identity = meta.at("identity_projector").get<bool>();
  } catch (const json::exception& e) {
    fail(FormatError::Kind::BadSection, std::string("bad state section: ") + e.what());
  } catch (const ValidationError& e) {
    fail(FormatError::Kind::BadSection, std::string("bad config section: ") + e.what());
  }

  Reader proj(sections["projector"], "projector");
  state.projector.w1 = proj.get_matrix();
  state.projector.b1 = proj.get_column();
  state.projector.w2 = proj.get_matrix();
  state.projector.b2 = proj.get_column();
  proj.finish();
  state.projector.in_dim = state.dim;

  Reader centers(sections["centers"], "centers");
  state.centers.centers = centers.get_matrix();
  centers.finish();
  if (state.centers.task_offsets.empty() || state.centers.task_offsets.back() != state.centers.size())
    fail(FormatError::Kind::BadSection, "center boundaries do not match the stored centers");

  Reader protos(sections["prototypes"], "prototypes");
  state.last_prototypes.means = protos.get_matrix();
  state.last_prototypes.log_sigma = protos.get_column();
  protos.finish();

  state.memory = parse_memory(sections["memory"]);

  Reader moments(sections["moments"], "moments");
  for (auto* m : {&state.w1_moments, &state.b1_moments, &state.w2_moments, &state.b2_moments, &state.center_moments})
    *m = get_moments(moments);
  moments.finish();

  for (const auto& line : split_lines(sections["history"])) state.reports.push_back(report_from_json(line));
  for (const auto& line : split_lines(sections["metrics"])) state.metrics.push_back(epoch_record_from_json(line));
  return state;
}

}  // namespace ucil
