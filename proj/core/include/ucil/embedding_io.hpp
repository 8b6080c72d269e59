#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ucil/common.hpp"

namespace ucil {

// On-disk feature file ("UCFV", little-endian):
//   0  char[4]  magic "UCFV"
//   4  u32      version (1)
//   8  u32      n
//  12  u32      d
//  16  u8       flags  bit0 = rows normalized, bit1 = labels present
//  17  u8[3]    padding (zero)
//  20  f32[n*d] row-major vectors
//   .. u32[n]   labels, if bit1 set
inline constexpr char kFeatureMagic[4] = {'U', 'C', 'F', 'V'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 20;
inline constexpr std::uint8_t kFlagNormalized = 0x1;
inline constexpr std::uint8_t kFlagLabels = 0x2;
inline constexpr double kUnitNormTolerance = 1e-4;

using Labels = std::vector<std::uint32_t>;

struct FeatureFile {
  FloatMatrix vectors;
  std::optional<Labels> labels;
  bool normalized = false;
};

/// Writes `vectors` verbatim. The normalized flag is set when every row is
/// unit-norm within kUnitNormTolerance; producers call normalize_rows first.
void write_features(const std::filesystem::path& path, const FloatMatrix& vectors,
                    const std::optional<Labels>& labels = std::nullopt);

FeatureFile read_features(const std::filesystem::path& path);

/// Reads only the header; cheap validation for manifests and the CLI.
struct FeatureHeader {
  std::uint32_t version = 0;
  std::uint32_t count = 0;
  std::uint32_t dim = 0;
  std::uint8_t flags = 0;
};
FeatureHeader read_feature_header(const std::filesystem::path& path);

void normalize_rows(FloatMatrix& vectors);
bool rows_unit_norm(const FloatMatrix& vectors, double tolerance = kUnitNormTolerance);

/// Loads the vectors of a normalized feature file as doubles. Labels are not
/// part of the return value: the training path never sees them.
Matrix load_unlabeled(const std::filesystem::path& path);

struct LabeledSet {
  Matrix features;
  Labels labels;
};
/// Evaluation-side loader; throws if the file carries no labels.
LabeledSet load_labeled(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Stream manifest

struct TaskEntry {
  std::filesystem::path train;
  std::filesystem::path test;
  int num_classes = 0;
};

struct StreamManifest {
  int dim = 0;
  std::vector<TaskEntry> tasks;
  /// Directory relative paths resolve against; empty means the working directory.
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  int total_classes(int through_task) const;
};

/// JSON document: {"dim": d, "tasks": [{"train": ..., "test": ..., "classes": k}, ...]}.
/// Relative file paths are resolved against the manifest's directory.
StreamManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const StreamManifest& manifest);
/// Checks that every referenced file exists with the declared dimension.
void validate_manifest_files(const StreamManifest& manifest);

// ---------------------------------------------------------------------------
// Synthetic spherical-Gaussian streams

struct SynthSpec {
  int tasks = 1;
  int classes_per_task = 5;
  int dim = 128;
  int train_per_class = 200;
  int test_per_class = 50;
  double spread = 0.03;
  std::uint64_t seed = 0;
  double max_mean_cosine = 0.95;
  int max_attempts = 10000;
};

struct SynthResult {
  StreamManifest manifest;
  std::filesystem::path manifest_path;
  /// Generator means, one row per global class id.
  Matrix class_means;
};

/// Writes task{t}_train.ucfv / task{t}_test.ucfv and manifest.json into `out_dir`.
SynthResult synth_stream(const SynthSpec& spec, const std::filesystem::path& out_dir);

/// The means synth_stream would use, without touching the filesystem.
Matrix synth_class_means(const SynthSpec& spec);

// ---------------------------------------------------------------------------
// Mini-batches

/// Index partition of 0..n-1 for one epoch. The shuffle is keyed by
/// (seed, epoch); the last batch may be short; batch_size > n yields one batch.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::uint64_t epoch);

struct FeatureBatch {
  Matrix features;
  std::vector<std::size_t> indices;
};

/// Single-consumer iterator over the batches of one epoch.
class BatchIterator {
 public:
  BatchIterator(const Matrix& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch);

  bool done() const { return next_ >= batches_.size(); }
  std::size_t size() const { return batches_.size(); }
  FeatureBatch next();

 private:
  const Matrix* data_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t next_ = 0;
};

}  // namespace ucil
