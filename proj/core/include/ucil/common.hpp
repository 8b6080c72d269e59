#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace ucil {

// Row-major so that one sample / one prototype / one center is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments, shapes, or configuration values.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Malformed on-disk data. `kind()` distinguishes the failure so callers
/// can react to truncation differently from a foreign file.
class FormatError : public Error {
 public:
  enum class Kind { BadMagic, VersionMismatch, Truncated, BadHeader, BadSection };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// A non-finite value appeared where the math should have kept it finite.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Worker threads for the dense linear algebra (1 unless the library was
/// built with OpenMP). Results do not depend on the count.
void set_num_threads(int threads);
int num_threads();

/// Mixes a list of integers into a 64-bit seed (splitmix64 finalizer chain).
/// Every random stream in the engine is keyed this way so that a run can be
/// resumed from a checkpoint without carrying generator state.
inline std::uint64_t mix_seed(std::uint64_t seed) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename... Rest>
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t next, Rest... rest) {
  return mix_seed(mix_seed(seed) ^ (next + 0x632be59bd9b4e019ULL), static_cast<std::uint64_t>(rest)...);
}

}  // namespace ucil
