#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace invnet3d {

using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& dims);
std::string shape_string(const Shape& dims);

/// Dense row-major N-D array. Dims are outermost-first; every dim is >= 1 and
/// the element count always equals the product of dims.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() : dims_{1}, data_(1, T{0}) {}
  explicit BasicTensor(Shape dims, T fill = T{0});
  BasicTensor(Shape dims, std::vector<T> data);

  const Shape& dims() const { return dims_; }
  std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
  std::size_t rank() const { return dims_.size(); }
  std::size_t size() const { return data_.size(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Same data, new dims of equal volume.
  BasicTensor reshaped(Shape dims) const;

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(dims_, std::move(out));
  }

  void fill(T value);

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  Shape dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Elementwise helpers used throughout the layers. Shapes must match exactly.
template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src);
template <typename T>
void sub_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src);
template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T>
double max_abs(const BasicTensor<T>& a);

/// Splits along `axis` into channels [0, at) and [at, C).
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> channel_split(const BasicTensor<T>& x, std::size_t at,
                                                        std::size_t axis = 0);

/// Concatenates along `axis`; a's channels precede b's.
template <typename T>
BasicTensor<T> channel_concat(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t axis = 0);

/// 64-bit generator: std::mt19937_64 (fully specified by the C++ standard) with
/// hand-written uniform and Box-Muller transforms so that the value stream is
/// identical on every platform and standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Derives an independent seed from a master seed and stream indices.
  static std::uint64_t derive(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

template <typename T>
BasicTensor<T> randn(Rng& rng, Shape dims, double mean, double std);

template <typename T>
BasicTensor<T> rand_uniform(Rng& rng, Shape dims, double lo, double hi);

// RVT1 persistence: "RVT1", u8 dtype (0 = f32, 1 = f64), u8 rank,
// rank x u64 LE dims, then raw LE element data.
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename T>
void save_rvt1(const std::filesystem::path& path, const BasicTensor<T>& t);

/// Loads and converts to T regardless of the stored dtype.
template <typename T>
BasicTensor<T> load_rvt1(const std::filesystem::path& path);

DType rvt1_dtype(const std::filesystem::path& path);

}  // namespace invnet3d
