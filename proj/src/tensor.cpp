#include "invnet3d/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "invnet3d/errors.hpp"

namespace invnet3d {

std::size_t shape_volume(const Shape& dims) {
  std::size_t v = 1;
  for (auto d : dims) v *= d;
  return v;
}

std::string shape_string(const Shape& dims) {
  std::ostringstream os;
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  return os.str();
}

namespace {

void check_dims(const Shape& dims) {
  if (dims.empty()) throw ShapeError("tensor dims must be non-empty");
  for (auto d : dims)
    if (d == 0) throw ShapeError("tensor dim must be >= 1, got shape " + shape_string(dims));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.dims() != b.dims())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.dims()) + " vs " +
                     shape_string(b.dims()));
}

// Dims split around `axis` into (outer, channels, inner).
struct AxisView {
  std::size_t outer = 1, channels = 1, inner = 1;
};

AxisView view_around(const Shape& dims, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= dims[i];
  v.channels = dims[axis];
  for (std::size_t i = axis + 1; i < dims.size(); ++i) v.inner *= dims[i];
  return v;
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, T fill) : dims_(std::move(dims)) {
  check_dims(dims_);
  data_.assign(shape_volume(dims_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
  check_dims(dims_);
  if (data_.size() != shape_volume(dims_))
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(dims_));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape dims) const {
  return BasicTensor<T>(std::move(dims), data_);
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
void add_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  require_same_shape(dst, src, "add");
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

template <typename T>
void sub_inplace(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  require_same_shape(dst, src, "sub");
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] -= s[i];
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> out = a;
  add_inplace(out, b);
  return out;
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  BasicTensor<T> out = a;
  sub_inplace(out, b);
  return out;
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
double max_abs(const BasicTensor<T>& a) {
  double m = 0.0;
  for (auto v : a.values()) m = std::max(m, std::abs(static_cast<double>(v)));
  return m;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> channel_split(const BasicTensor<T>& x, std::size_t at,
                                                        std::size_t axis) {
  if (axis >= x.rank()) throw RangeError("channel_split: axis " + std::to_string(axis) + " out of range");
  const auto v = view_around(x.dims(), axis);
  if (at < 1 || at >= v.channels)
    throw RangeError("channel_split: split point " + std::to_string(at) + " outside [1, " +
                     std::to_string(v.channels) + ") on axis " + std::to_string(axis));
  Shape da = x.dims(), db = x.dims();
  da[axis] = at;
  db[axis] = v.channels - at;
  BasicTensor<T> a(da), b(db);
  const std::size_t na = at * v.inner, nb = (v.channels - at) * v.inner;
  for (std::size_t o = 0; o < v.outer; ++o) {
    const T* src = x.data() + o * v.channels * v.inner;
    std::copy_n(src, na, a.data() + o * na);
    std::copy_n(src + na, nb, b.data() + o * nb);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
BasicTensor<T> channel_concat(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t axis) {
  bool ok = a.rank() == b.rank() && axis < a.rank();
  for (std::size_t i = 0; ok && i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i)) ok = false;
  if (!ok)
    throw ShapeError("channel_concat: incompatible shapes " + shape_string(a.dims()) + " and " +
                     shape_string(b.dims()) + " on axis " + std::to_string(axis));
  const auto va = view_around(a.dims(), axis);
  const auto vb = view_around(b.dims(), axis);
  Shape d = a.dims();
  d[axis] = va.channels + vb.channels;
  BasicTensor<T> out(d);
  const std::size_t na = va.channels * va.inner, nb = vb.channels * vb.inner;
  for (std::size_t o = 0; o < va.outer; ++o) {
    T* dst = out.data() + o * (na + nb);
    std::copy_n(a.data() + o * na, na, dst);
    std::copy_n(b.data() + o * nb, nb, dst + na);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rng

Rng::Rng(std::uint64_t seed) : engine_(seed) {}

std::uint64_t Rng::next_u64() { return engine_(); }

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ArgumentError("Rng::below: n must be positive");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return v % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::derive(std::uint64_t master, std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a simple combination of the inputs.
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(master) ^ a) ^ (b * 0xd1b54a32d192ed03ULL));
}

template <typename T>
BasicTensor<T> randn(Rng& rng, Shape dims, double mean, double std) {
  if (!(std >= 0.0)) throw ArgumentError("randn: std must be >= 0, got " + std::to_string(std));
  BasicTensor<T> out(std::move(dims));
  for (auto& v : out.values()) v = static_cast<T>(mean + std * rng.normal());
  return out;
}

template <typename T>
BasicTensor<T> rand_uniform(Rng& rng, Shape dims, double lo, double hi) {
  BasicTensor<T> out(std::move(dims));
  for (auto& v : out.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return out;
}

// ---------------------------------------------------------------------------
// RVT1

namespace {

constexpr char kMagic[4] = {'R', 'V', 'T', '1'};

template <typename U>
void write_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("RVT1: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

struct Rvt1Header {
  DType dtype;
  Shape dims;
};

Rvt1Header read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("RVT1: bad magic in " + path.string());
  const auto tag = read_le<std::uint8_t>(is);
  if (tag > 1) throw FormatError("RVT1: unknown dtype tag " + std::to_string(tag) + " in " + path.string());
  const auto rank = read_le<std::uint8_t>(is);
  if (rank == 0) throw FormatError("RVT1: rank 0 in " + path.string());
  Rvt1Header h{static_cast<DType>(tag), {}};
  for (int i = 0; i < rank; ++i) h.dims.push_back(static_cast<std::size_t>(read_le<std::uint64_t>(is)));
  return h;
}

}  // namespace

template <typename T>
void save_rvt1(const std::filesystem::path& path, const BasicTensor<T>& t) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if (t.rank() > 255) throw FormatError("RVT1: rank exceeds 255");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("RVT1: cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  write_le<std::uint8_t>(os, std::is_same_v<T, float> ? 0 : 1);
  write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.dims()) write_le<std::uint64_t>(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  } else {
    for (auto v : t.values()) write_le<T>(os, v);
  }
  if (!os) throw FormatError("RVT1: write failed for " + path.string());
}

template <typename T>
BasicTensor<T> load_rvt1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("RVT1: cannot open " + path.string());
  const auto h = read_header(is, path);
  const std::size_t n = shape_volume(h.dims);
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (h.dtype == DType::F32)
      data[i] = static_cast<T>(read_le<float>(is));
    else
      data[i] = static_cast<T>(read_le<double>(is));
  }
  return BasicTensor<T>(h.dims, std::move(data));
}

DType rvt1_dtype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("RVT1: cannot open " + path.string());
  return read_header(is, path).dtype;
}

#define INVNET3D_INSTANTIATE(T)                                                                        \
  template class BasicTensor<T>;                                                                       \
  template void add_inplace(BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template void sub_inplace(BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                           \
  template double max_abs_diff(const BasicTensor<T>&, const BasicTensor<T>&);                          \
  template double max_abs(const BasicTensor<T>&);                                                      \
  template std::pair<BasicTensor<T>, BasicTensor<T>> channel_split(const BasicTensor<T>&, std::size_t, \
                                                                   std::size_t);                       \
  template BasicTensor<T> channel_concat(const BasicTensor<T>&, const BasicTensor<T>&, std::size_t);   \
  template BasicTensor<T> randn(Rng&, Shape, double, double);                                          \
  template BasicTensor<T> rand_uniform(Rng&, Shape, double, double);                                   \
  template void save_rvt1(const std::filesystem::path&, const BasicTensor<T>&);                        \
  template BasicTensor<T> load_rvt1(const std::filesystem::path&);

INVNET3D_INSTANTIATE(float)
INVNET3D_INSTANTIATE(double)

#undef INVNET3D_INSTANTIATE

}  // namespace invnet3d
