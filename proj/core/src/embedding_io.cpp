#include "ucil/embedding_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace ucil {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian; big-endian hosts need byte swapping");

namespace {

template <typename T>
void put(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(const unsigned char* p) {
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

std::vector<unsigned char> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    throw IoError(path.string(), "read failed");
  return bytes;
}

FeatureHeader parse_header(const unsigned char* bytes, std::size_t size, const std::string& name) {
  if (size < 4 || std::memcmp(bytes, kFeatureMagic, 4) != 0) {
    std::string got;
    for (std::size_t i = 0; i < std::min<std::size_t>(size, 4); ++i) {
      const char c = static_cast<char>(bytes[i]);
      got += std::isprint(static_cast<unsigned char>(c)) ? c : '?';
    }
    throw FormatError(FormatError::Kind::BadMagic,
                      name + ": bad magic '" + got + "', expected 'UCFV'");
  }
  if (size < kFeatureHeaderBytes)
    throw FormatError(FormatError::Kind::Truncated, name + ": truncated header");
  FeatureHeader h;
  h.version = get<std::uint32_t>(bytes + 4);
  if (h.version != kFeatureVersion)
    throw FormatError(FormatError::Kind::VersionMismatch,
                      name + ": unsupported version " + std::to_string(h.version) + " (expected " +
                          std::to_string(kFeatureVersion) + ")");
  h.count = get<std::uint32_t>(bytes + 8);
  h.dim = get<std::uint32_t>(bytes + 12);
  h.flags = bytes[16];
  if (h.flags & ~(kFlagNormalized | kFlagLabels))
    throw FormatError(FormatError::Kind::BadHeader, name + ": unknown flag bits");
  if (h.count == 0 || h.dim == 0)
    throw FormatError(FormatError::Kind::BadHeader, name + ": empty matrix in header");
  return h;
}

std::uint64_t expected_size(const FeatureHeader& h) {
  std::uint64_t bytes = kFeatureHeaderBytes + std::uint64_t{h.count} * h.dim * sizeof(float);
  if (h.flags & kFlagLabels) bytes += std::uint64_t{h.count} * sizeof(std::uint32_t);
  return bytes;
}

}  // namespace

bool rows_unit_norm(const FloatMatrix& vectors, double tolerance) {
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    const double norm = vectors.row(i).cast<double>().norm();
    if (std::abs(norm - 1.0) > tolerance) return false;
  }
  return true;
}

void normalize_rows(FloatMatrix& vectors) {
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) {
    const double norm = vectors.row(i).cast<double>().norm();
    if (norm > 0.0) vectors.row(i) = (vectors.row(i).cast<double>() / norm).cast<float>();
  }
}

void write_features(const fs::path& path, const FloatMatrix& vectors, const std::optional<Labels>& labels) {
  if (vectors.rows() == 0 || vectors.cols() == 0)
    throw ValidationError("write_features: empty matrix (" + std::to_string(vectors.rows()) + "x" +
                          std::to_string(vectors.cols()) + ")");
  if (!vectors.allFinite()) throw ValidationError("write_features: non-finite entries");
  if (labels && static_cast<Eigen::Index>(labels->size()) != vectors.rows())
    throw ValidationError("write_features: " + std::to_string(labels->size()) + " labels for " +
                          std::to_string(vectors.rows()) + " rows");

  std::uint8_t flags = 0;
  if (rows_unit_norm(vectors)) flags |= kFlagNormalized;
  if (labels) flags |= kFlagLabels;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out.write(kFeatureMagic, 4);
  put(out, kFeatureVersion);
  put(out, static_cast<std::uint32_t>(vectors.rows()));
  put(out, static_cast<std::uint32_t>(vectors.cols()));
  put(out, flags);
  const char pad[3] = {0, 0, 0};
  out.write(pad, 3);
  out.write(reinterpret_cast<const char*>(vectors.data()),
            static_cast<std::streamsize>(vectors.size() * sizeof(float)));
  if (labels)
    out.write(reinterpret_cast<const char*>(labels->data()),
              static_cast<std::streamsize>(labels->size() * sizeof(std::uint32_t)));
  out.flush();
  if (!out) throw IoError(path.string(), "write failed");
}

FeatureHeader read_feature_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string(), "cannot open for reading");
  unsigned char buf[kFeatureHeaderBytes] = {};
  in.read(reinterpret_cast<char*>(buf), kFeatureHeaderBytes);
  return parse_header(buf, static_cast<std::size_t>(in.gcount()), path.string());
}

FeatureFile read_features(const fs::path& path) {
  const auto bytes = slurp(path);
  const auto header = parse_header(bytes.data(), bytes.size(), path.string());
  const auto want = expected_size(header);
  if (bytes.size() < want)
    throw FormatError(FormatError::Kind::Truncated,
                      path.string() + ": truncated payload (" + std::to_string(bytes.size()) + " of " +
                          std::to_string(want) + " bytes)");
  if (bytes.size() > want)
    throw FormatError(FormatError::Kind::BadHeader, path.string() + ": trailing bytes after payload");

  FeatureFile file;
  file.vectors.resize(header.count, header.dim);
  std::memcpy(file.vectors.data(), bytes.data() + kFeatureHeaderBytes,
              std::size_t{header.count} * header.dim * sizeof(float));
  if (!file.vectors.allFinite())
    throw FormatError(FormatError::Kind::BadHeader, path.string() + ": non-finite entries");
  file.normalized = header.flags & kFlagNormalized;
  if (file.normalized && !rows_unit_norm(file.vectors))
    throw FormatError(FormatError::Kind::BadHeader,
                      path.string() + ": normalized flag set but a row is not unit-norm");
  if (header.flags & kFlagLabels) {
    Labels labels(header.count);
    std::memcpy(labels.data(), bytes.data() + kFeatureHeaderBytes + std::size_t{header.count} * header.dim * sizeof(float),
                labels.size() * sizeof(std::uint32_t));
    file.labels = std::move(labels);
  }
  return file;
}

Matrix load_unlabeled(const fs::path& path) {
  auto file = read_features(path);
  if (!file.normalized)
    throw ValidationError(path.string() + ": rows are not L2-normalized");
  return file.vectors.cast<double>().rowwise().normalized();
}

LabeledSet load_labeled(const fs::path& path) {
  auto file = read_features(path);
  if (!file.normalized)
    throw ValidationError(path.string() + ": rows are not L2-normalized");
  if (!file.labels) throw ValidationError(path.string() + ": no labels stored");
  return {file.vectors.cast<double>().rowwise().normalized(), std::move(*file.labels)};
}

// ---------------------------------------------------------------------------

fs::path StreamManifest::resolve(const fs::path& p) const {
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

int StreamManifest::total_classes(int through_task) const {
  int total = 0;
  for (int t = 0; t <= through_task && t < static_cast<int>(tasks.size()); ++t) total += tasks[t].num_classes;
  return total;
}

StreamManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "cannot open manifest");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": manifest is not valid JSON: " + e.what());
  }
  for (const auto& [key, _] : doc.items())
    if (key != "dim" && key != "tasks")
      throw ValidationError(path.string() + ": unknown manifest key '" + key + "'");

  StreamManifest m;
  m.base_dir = path.parent_path();
  try {
    m.dim = doc.at("dim").get<int>();
    for (const auto& task : doc.at("tasks")) {
      for (const auto& [key, _] : task.items())
        if (key != "train" && key != "test" && key != "classes")
          throw ValidationError(path.string() + ": unknown task key '" + key + "'");
      TaskEntry e;
      e.train = task.at("train").get<std::string>();
      e.test = task.at("test").get<std::string>();
      e.num_classes = task.at("classes").get<int>();
      m.tasks.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": malformed manifest: " + e.what());
  }
  if (m.dim <= 0) throw ValidationError(path.string() + ": dim must be positive");
  if (m.tasks.empty()) throw ValidationError(path.string() + ": no tasks");
  for (std::size_t t = 0; t < m.tasks.size(); ++t)
    if (m.tasks[t].num_classes <= 0)
      throw ValidationError(path.string() + ": task " + std::to_string(t) + " has non-positive class count");
  return m;
}

void write_manifest(const fs::path& path, const StreamManifest& manifest) {
  json doc;
  doc["dim"] = manifest.dim;
  doc["tasks"] = json::array();
  for (const auto& t : manifest.tasks)
    doc["tasks"].push_back({{"train", t.train.generic_string()},
                            {"test", t.test.generic_string()},
                            {"classes", t.num_classes}});
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open manifest for writing");
  out << doc.dump(2) << '\n';
  if (!out) throw IoError(path.string(), "write failed");
}

void validate_manifest_files(const StreamManifest& manifest) {
  for (std::size_t t = 0; t < manifest.tasks.size(); ++t) {
    for (const auto& rel : {manifest.tasks[t].train, manifest.tasks[t].test}) {
      const auto p = manifest.resolve(rel);
      if (!fs::exists(p)) throw ValidationError("missing feature file " + p.string());
      const auto h = read_feature_header(p);
      if (static_cast<int>(h.dim) != manifest.dim)
        throw ValidationError(p.string() + ": dimension " + std::to_string(h.dim) +
                              " does not match manifest dim " + std::to_string(manifest.dim));
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

void check_synth_spec(const SynthSpec& s) {
  if (s.tasks <= 0 || s.classes_per_task <= 0 || s.dim <= 1 || s.train_per_class <= 0 ||
      s.test_per_class <= 0)
    throw ValidationError("synth: counts must be positive and dim >= 2");
  if (!(s.spread > 0.0)) throw ValidationError("synth: spread must be > 0");
}

Vector random_unit(std::mt19937_64& rng, int dim) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  do {
    for (int j = 0; j < dim; ++j) v[j] = normal(rng);
  } while (v.norm() < 1e-12);
  return v / v.norm();
}

FloatMatrix draw_samples(std::mt19937_64& rng, const Vector& mean, int count, double spread) {
  std::normal_distribution<double> noise(0.0, spread);
  const auto dim = mean.size();
  FloatMatrix out(count, dim);
  Vector z(dim);
  for (int i = 0; i < count; ++i) {
    for (Eigen::Index j = 0; j < dim; ++j) z[j] = mean[j] + noise(rng);
    z /= z.norm();
    out.row(i) = z.transpose().cast<float>();
  }
  return out;
}

}  // namespace

Matrix synth_class_means(const SynthSpec& spec) {
  check_synth_spec(spec);
  const int total = spec.tasks * spec.classes_per_task;
  std::mt19937_64 rng(mix_seed(spec.seed, 0x6d65616e));
  Matrix means(total, spec.dim);
  for (int c = 0; c < total; ++c) {
    int attempts = 0;
    for (;;) {
      if (++attempts > spec.max_attempts)
        throw GenerationError("synth: could not place " + std::to_string(total) +
                              " class means with pairwise cosine <= " + std::to_string(spec.max_mean_cosine) +
                              " in dim " + std::to_string(spec.dim) + "; use a larger dim");
      const Vector v = random_unit(rng, spec.dim);
      bool ok = true;
      for (int p = 0; p < c && ok; ++p) ok = means.row(p).dot(v) <= spec.max_mean_cosine;
      if (ok) {
        means.row(c) = v.transpose();
        break;
      }
    }
  }
  return means;
}

SynthResult synth_stream(const SynthSpec& spec, const fs::path& out_dir) {
  SynthResult result;
  result.class_means = synth_class_means(spec);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string(), "cannot create directory: " + ec.message());

  result.manifest.dim = spec.dim;
  result.manifest.base_dir = out_dir;
  for (int t = 0; t < spec.tasks; ++t) {
    TaskEntry entry;
    entry.train = "task" + std::to_string(t) + "_train.ucfv";
    entry.test = "task" + std::to_string(t) + "_test.ucfv";
    entry.num_classes = spec.classes_per_task;
    for (const bool train : {true, false}) {
      const int per_class = train ? spec.train_per_class : spec.test_per_class;
      FloatMatrix block(per_class * spec.classes_per_task, spec.dim);
      Labels labels;
      labels.reserve(block.rows());
      for (int k = 0; k < spec.classes_per_task; ++k) {
        const int cls = t * spec.classes_per_task + k;
        std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(cls), train ? 1 : 2));
        block.middleRows(k * per_class, per_class) =
            draw_samples(rng, result.class_means.row(cls).transpose(), per_class, spec.spread);
        labels.insert(labels.end(), per_class, static_cast<std::uint32_t>(cls));
      }
      write_features(out_dir / (train ? entry.train : entry.test), block, labels);
    }
    result.manifest.tasks.push_back(std::move(entry));
  }
  result.manifest_path = out_dir / "manifest.json";
  write_manifest(result.manifest_path, result.manifest);
  return result;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size == 0) throw ValidationError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, epoch, 0x62617463));
  // Fisher-Yates with our own index draw: std::shuffle's sequence is
  // library-specific and would make batch order depend on the toolchain.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

BatchIterator::BatchIterator(const Matrix& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch)
    : data_(&data), batches_(batch_indices(static_cast<std::size_t>(data.rows()), batch_size, seed, epoch)) {}

FeatureBatch BatchIterator::next() {
  if (done()) throw ValidationError("BatchIterator exhausted");
  FeatureBatch batch;
  batch.indices = batches_[next_++];
  batch.features.resize(static_cast<Eigen::Index>(batch.indices.size()), data_->cols());
  for (std::size_t i = 0; i < batch.indices.size(); ++i)
    batch.features.row(static_cast<Eigen::Index>(i)) = data_->row(static_cast<Eigen::Index>(batch.indices[i]));
  return batch;
}

}  // namespace ucil
