#include "invnet3d/layers.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "invnet3d/errors.hpp"

namespace invnet3d {

std::string triple_string(const Triple& t) {
  std::ostringstream os;
  os << t[0] << 'x' << t[1] << 'x' << t[2];
  return os.str();
}

std::string dims3_string(const Dims3& d) {
  std::ostringstream os;
  os << d[0] << 'x' << d[1] << 'x' << d[2];
  return os.str();
}

Dims3 spatial_dims(const Shape& dims) {
  if (dims.size() != 5) throw ShapeError("expected N x C x D x H x W, got " + shape_string(dims));
  return {dims[2], dims[3], dims[4]};
}

// ---------------------------------------------------------------------------
// ConvSpec

void ConvSpec::validate() const {
  auto fail = [&](const std::string& what) {
    throw SpecError("invalid conv spec (" + std::to_string(in_channels) + "->" + std::to_string(out_channels) +
                    ", k=" + triple_string(kernel) + ", s=" + triple_string(stride) +
                    ", G=" + std::to_string(groups) + "): " + what);
  };
  if (in_channels < 1 || out_channels < 1) fail("channel counts must be >= 1");
  if (groups < 1) fail("groups must be >= 1");
  if (in_channels % groups != 0 || out_channels % groups != 0) fail("channels not divisible by groups");
  for (int i = 0; i < 3; ++i) {
    if (kernel[i] < 1 || stride[i] < 1) fail("kernel and stride entries must be >= 1");
    if (transposed) {
      const int diff = kernel[i] - stride[i];
      if (diff < 0 || diff % 2 != 0) fail("transposed conv needs (kernel - stride) even and >= 0");
    } else if (kernel[i] % 2 == 0) {
      fail("convolution kernel entries must be odd");
    }
  }
}

Triple ConvSpec::padding() const {
  Triple p{};
  for (int i = 0; i < 3; ++i) p[i] = transposed ? (kernel[i] - stride[i]) / 2 : (kernel[i] - 1) / 2;
  return p;
}

Dims3 ConvSpec::output_extent(const Dims3& in) const {
  Dims3 out{};
  for (int i = 0; i < 3; ++i) {
    const auto s = static_cast<std::size_t>(stride[i]);
    out[i] = transposed ? in[i] * s : (in[i] + s - 1) / s;
  }
  return out;
}

Shape ConvSpec::weight_shape() const {
  const auto k = kernel;
  if (transposed)
    return {static_cast<std::size_t>(in_channels), static_cast<std::size_t>(out_channels / groups),
            static_cast<std::size_t>(k[0]), static_cast<std::size_t>(k[1]), static_cast<std::size_t>(k[2])};
  return {static_cast<std::size_t>(out_channels), static_cast<std::size_t>(in_channels / groups),
          static_cast<std::size_t>(k[0]), static_cast<std::size_t>(k[1]), static_cast<std::size_t>(k[2])};
}

std::size_t ConvSpec::kernel_volume() const {
  return static_cast<std::size_t>(kernel[0]) * kernel[1] * kernel[2];
}

std::size_t ConvSpec::fan_in() const { return static_cast<std::size_t>(in_channels / groups) * kernel_volume(); }

// ---------------------------------------------------------------------------
// Direct convolution kernels. A transposed convolution is the adjoint of a
// strided convolution, so all six passes reduce to these three loops over a
// "conv geometry" in which `big` is the convolution input and `small` its
// output.

namespace {

struct Geometry {
  std::size_t batch = 1;
  std::size_t c_big = 1, c_small = 1;  // conv input / output channels
  std::size_t groups = 1;
  Dims3 big{}, small{};
  Triple k{}, s{}, p{};

  std::size_t big_volume() const { return big[0] * big[1] * big[2]; }
  std::size_t small_volume() const { return small[0] * small[1] * small[2]; }
};

// Output positions o in [lo, hi) such that o*s - p + tap lies in [0, in).
inline void tap_range(std::size_t in, std::size_t out, int s, int p, int tap, std::ptrdiff_t& lo,
                      std::ptrdiff_t& hi) {
  const std::ptrdiff_t off = tap - p;
  // o*s + off >= 0  =>  o >= ceil(-off / s)
  lo = off >= 0 ? 0 : (-off + s - 1) / s;
  // o*s + off <= in - 1  =>  o <= floor((in - 1 - off) / s)
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(in) - 1 - off;
  hi = top < 0 ? 0 : top / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out));
  if (hi < lo) hi = lo;
}

enum class Pass { Forward, BackwardData, BackwardWeight };

// Forward:        small[co] += w * big[ci]
// BackwardData:   big[ci]   += w * small[co]
// BackwardWeight: w         += small[co] * big[ci]
template <Pass P, typename T>
void run_conv(const Geometry& g, T* big, T* small, T* weight) {
  const std::size_t cin_g = g.c_big / g.groups;
  const std::size_t cout_g = g.c_small / g.groups;
  const std::size_t kvol = static_cast<std::size_t>(g.k[0]) * g.k[1] * g.k[2];
  const std::size_t bvol = g.big_volume(), svol = g.small_volume();
  const std::size_t bhw = g.big[1] * g.big[2], shw = g.small[1] * g.small[2];

  // Precompute valid output ranges per tap and axis.
  std::vector<std::ptrdiff_t> lo[3], hi[3];
  for (int a = 0; a < 3; ++a) {
    lo[a].resize(g.k[a]);
    hi[a].resize(g.k[a]);
    for (int t = 0; t < g.k[a]; ++t) tap_range(g.big[a], g.small[a], g.s[a], g.p[a], t, lo[a][t], hi[a][t]);
  }
  const std::ptrdiff_t sd = g.s[0], sh = g.s[1], sw = g.s[2];

  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t co = 0; co < g.c_small; ++co) {
      const std::size_t grp = co / cout_g;
      T* sm = small + (n * g.c_small + co) * svol;
      for (std::size_t cig = 0; cig < cin_g; ++cig) {
        const std::size_t ci = grp * cin_g + cig;
        T* bg = big + (n * g.c_big + ci) * bvol;
        T* wk = weight + (co * cin_g + cig) * kvol;
        for (int kd = 0; kd < g.k[0]; ++kd) {
          for (int kh = 0; kh < g.k[1]; ++kh) {
            for (int kw = 0; kw < g.k[2]; ++kw) {
              T& wref = wk[(static_cast<std::size_t>(kd) * g.k[1] + kh) * g.k[2] + kw];
              const T wv = wref;
              T acc = T(0);
              const std::ptrdiff_t w_lo = lo[2][kw], w_hi = hi[2][kw];
              if (w_hi <= w_lo) continue;
              const std::ptrdiff_t w_off = kw - g.p[2];
              for (std::ptrdiff_t od = lo[0][kd]; od < hi[0][kd]; ++od) {
                const std::ptrdiff_t id = od * sd + kd - g.p[0];
                for (std::ptrdiff_t oh = lo[1][kh]; oh < hi[1][kh]; ++oh) {
                  const std::ptrdiff_t ih = oh * sh + kh - g.p[1];
                  T* srow = sm + static_cast<std::size_t>(od) * shw + static_cast<std::size_t>(oh) * g.small[2];
                  T* brow = bg + static_cast<std::size_t>(id) * bhw + static_cast<std::size_t>(ih) * g.big[2] + w_off;
                  if constexpr (P == Pass::Forward) {
                    if (sw == 1) {
                      for (std::ptrdiff_t ow = w_lo; ow < w_hi; ++ow) srow[ow] += wv * brow[ow];
                    } else {
                      for (std::ptrdiff_t ow = w_lo; ow < w_hi; ++ow) srow[ow] += wv * brow[ow * sw];
                    }
                  } else if constexpr (P == Pass::BackwardData) {
                    if (sw == 1) {
                      for (std::ptrdiff_t ow = w_lo; ow < w_hi; ++ow) brow[ow] += wv * srow[ow];
                    } else {
                      for (std::ptrdiff_t ow = w_lo; ow < w_hi; ++ow) brow[ow * sw] += wv * srow[ow];
                    }
                  } else {
                    if (sw == 1) {
                      for (std::ptrdiff_t ow = w_lo; ow < w_hi; ++ow) acc += srow[ow] * brow[ow];
                    } else {
                      for (std::ptrdiff_t ow = w_lo; ow < w_hi; ++ow) acc += srow[ow] * brow[ow * sw];
                    }
                  }
                }
              }
              if constexpr (P == Pass::BackwardWeight) wref += acc;
            }
          }
        }
      }
    }
  }
}

template <typename T>
void check_input(const BasicTensor<T>& x, int channels, const char* op) {
  if (x.rank() != 5)
    throw ShapeError(std::string(op) + ": expected N x C x D x H x W input, got " + shape_string(x.dims()));
  if (static_cast<int>(x.dim(1)) != channels)
    throw ShapeError(std::string(op) + ": input has " + std::to_string(x.dim(1)) + " channels, spec expects " +
                     std::to_string(channels));
}

template <typename T>
void check_weight(const BasicTensor<T>& w, const ConvSpec& spec, const char* op) {
  if (w.dims() != spec.weight_shape())
    throw ShapeError(std::string(op) + ": weight shape " + shape_string(w.dims()) + " does not match spec " +
                     shape_string(spec.weight_shape()));
}

Geometry conv_geometry(std::size_t batch, const ConvSpec& spec, const Dims3& in) {
  Geometry g;
  g.batch = batch;
  g.c_big = spec.in_channels;
  g.c_small = spec.out_channels;
  g.groups = spec.groups;
  g.big = in;
  g.small = spec.output_extent(in);
  g.k = spec.kernel;
  g.s = spec.stride;
  g.p = spec.padding();
  return g;
}

// The transposed conv's adjoint convolution maps its output (big) back to its input (small).
Geometry deconv_geometry(std::size_t batch, const ConvSpec& spec, const Dims3& in) {
  Geometry g;
  g.batch = batch;
  g.c_big = spec.out_channels;
  g.c_small = spec.in_channels;
  g.groups = spec.groups;
  g.big = spec.output_extent(in);
  g.small = in;
  g.k = spec.kernel;
  g.s = spec.stride;
  g.p = spec.padding();
  return g;
}

template <typename T>
void add_bias(BasicTensor<T>& y, const BasicTensor<T>& bias) {
  const std::size_t n = y.dim(0), c = y.dim(1), vol = y.size() / (n * c);
  if (bias.size() != c) throw ShapeError("bias length " + std::to_string(bias.size()) + " != channels " + std::to_string(c));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = y.data() + (b * c + ch) * vol;
      const T v = bias[ch];
      for (std::size_t i = 0; i < vol; ++i) p[i] += v;
    }
}

template <typename T>
BasicTensor<T> bias_grad(const BasicTensor<T>& grad_out) {
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1), vol = grad_out.size() / (n * c);
  BasicTensor<T> gb({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* p = grad_out.data() + (b * c + ch) * vol;
      for (std::size_t i = 0; i < vol; ++i) s += p[i];
    }
    gb[ch] = static_cast<T>(s);
  }
  return gb;
}

}  // namespace

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias) {
  spec.validate();
  if (spec.transposed) throw SpecError("conv3d called with a transposed spec");
  check_input(x, spec.in_channels, "conv3d");
  check_weight(weight, spec, "conv3d");
  const auto g = conv_geometry(x.dim(0), spec, spatial_dims(x.dims()));
  BasicTensor<T> y({g.batch, g.c_small, g.small[0], g.small[1], g.small[2]});
  run_conv<Pass::Forward>(g, const_cast<T*>(x.data()), y.data(), const_cast<T*>(weight.data()));
  if (bias) add_bias(y, *bias);
  return y;
}

template <typename T>
ConvGrads<T> conv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& saved_input,
                             const ConvSpec& spec, const BasicTensor<T>& weight) {
  spec.validate();
  check_input(saved_input, spec.in_channels, "conv3d_backward");
  check_weight(weight, spec, "conv3d_backward");
  const auto g = conv_geometry(saved_input.dim(0), spec, spatial_dims(saved_input.dims()));
  const Shape expect{g.batch, g.c_small, g.small[0], g.small[1], g.small[2]};
  if (grad_out.dims() != expect)
    throw ShapeError("conv3d_backward: grad_out shape " + shape_string(grad_out.dims()) + ", expected " +
                     shape_string(expect));
  ConvGrads<T> out{BasicTensor<T>(saved_input.dims()), BasicTensor<T>(weight.dims()), std::nullopt};
  auto* go = const_cast<T*>(grad_out.data());
  run_conv<Pass::BackwardData>(g, out.input.data(), go, const_cast<T*>(weight.data()));
  run_conv<Pass::BackwardWeight>(g, const_cast<T*>(saved_input.data()), go, out.weight.data());
  if (spec.has_bias) out.bias = bias_grad(grad_out);
  return out;
}

template <typename T>
BasicTensor<T> deconv3d(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weight,
                        const BasicTensor<T>* bias) {
  spec.validate();
  if (!spec.transposed) throw SpecError("deconv3d called with a non-transposed spec");
  check_input(x, spec.in_channels, "deconv3d");
  check_weight(weight, spec, "deconv3d");
  const auto g = deconv_geometry(x.dim(0), spec, spatial_dims(x.dims()));
  BasicTensor<T> y({g.batch, g.c_big, g.big[0], g.big[1], g.big[2]});
  run_conv<Pass::BackwardData>(g, y.data(), const_cast<T*>(x.data()), const_cast<T*>(weight.data()));
  if (bias) add_bias(y, *bias);
  return y;
}

template <typename T>
ConvGrads<T> deconv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& saved_input,
                               const ConvSpec& spec, const BasicTensor<T>& weight) {
  spec.validate();
  check_input(saved_input, spec.in_channels, "deconv3d_backward");
  check_weight(weight, spec, "deconv3d_backward");
  const auto g = deconv_geometry(saved_input.dim(0), spec, spatial_dims(saved_input.dims()));
  const Shape expect{g.batch, g.c_big, g.big[0], g.big[1], g.big[2]};
  if (grad_out.dims() != expect)
    throw ShapeError("deconv3d_backward: grad_out shape " + shape_string(grad_out.dims()) + ", expected " +
                     shape_string(expect));
  ConvGrads<T> out{BasicTensor<T>(saved_input.dims()), BasicTensor<T>(weight.dims()), std::nullopt};
  auto* go = const_cast<T*>(grad_out.data());
  run_conv<Pass::Forward>(g, go, out.input.data(), const_cast<T*>(weight.data()));
  run_conv<Pass::BackwardWeight>(g, go, const_cast<T*>(saved_input.data()), out.weight.data());
  if (spec.has_bias) out.bias = bias_grad(grad_out);
  return out;
}

// ---------------------------------------------------------------------------
// Batch norm

template <typename T>
BatchNormParams<T>::BatchNormParams(std::size_t channels, BatchNormConfig cfg)
    : gamma({channels}, T(1)),
      beta({channels}, T(0)),
      running_mean({channels}, T(0)),
      running_var({channels}, T(1)),
      config(cfg) {}

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, BatchNormParams<T>& params, bool training, bool update_running,
                         BatchNormCache<T>* cache) {
  if (x.rank() < 2) throw ShapeError("batchnorm: expected N x C x ..., got " + shape_string(x.dims()));
  const std::size_t n = x.dim(0), c = x.dim(1), vol = x.size() / (n * c);
  if (params.gamma.size() != c)
    throw ShapeError("batchnorm: " + std::to_string(c) + " channels but params hold " +
                     std::to_string(params.gamma.size()));
  const std::size_t population = n * vol;
  if (training && population < 2)
    throw StateError("batchnorm: training mode needs >= 2 values per channel, got " + std::to_string(population));

  BasicTensor<T> y(x.dims());
  if (cache) {
    cache->normalized = BasicTensor<T>(x.dims());
    cache->inv_std.assign(c, 0.0);
  }
  const double eps = params.config.epsilon;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * c + ch) * vol;
        for (std::size_t i = 0; i < vol; ++i) s += p[i];
      }
      mean = s / population;
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * c + ch) * vol;
        for (std::size_t i = 0; i < vol; ++i) {
          const double d = p[i] - mean;
          ss += d * d;
        }
      }
      var = ss / population;
      if (update_running) {
        const double m = params.config.momentum;
        const double unbiased = ss / (population - 1);
        params.running_mean[ch] = static_cast<T>((1 - m) * params.running_mean[ch] + m * mean);
        params.running_var[ch] = static_cast<T>((1 - m) * params.running_var[ch] + m * unbiased);
      }
    } else {
      mean = params.running_mean[ch];
      var = params.running_var[ch];
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    const double gm = params.gamma[ch], bt = params.beta[ch];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * vol;
      const T* p = x.data() + off;
      T* q = y.data() + off;
      T* nrm = cache ? cache->normalized.data() + off : nullptr;
      for (std::size_t i = 0; i < vol; ++i) {
        const double xh = (p[i] - mean) * inv_std;
        if (nrm) nrm[i] = static_cast<T>(xh);
        q[i] = static_cast<T>(gm * xh + bt);
      }
    }
    if (cache) cache->inv_std[ch] = inv_std;
  }
  return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BatchNormCache<T>& cache,
                                     const BasicTensor<T>& gamma) {
  if (grad_out.dims() != cache.normalized.dims())
    throw ShapeError("batchnorm_backward: grad shape " + shape_string(grad_out.dims()) + " vs cached " +
                     shape_string(cache.normalized.dims()));
  const std::size_t n = grad_out.dim(0), c = grad_out.dim(1), vol = grad_out.size() / (n * c);
  const double m = static_cast<double>(n * vol);
  BatchNormGrads<T> out{BasicTensor<T>(grad_out.dims()), BasicTensor<T>({c}), BasicTensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * vol;
      const T* dy = grad_out.data() + off;
      const T* xh = cache.normalized.data() + off;
      for (std::size_t i = 0; i < vol; ++i) {
        sum_dy += dy[i];
        sum_dy_xh += static_cast<double>(dy[i]) * xh[i];
      }
    }
    out.gamma[ch] = static_cast<T>(sum_dy_xh);
    out.beta[ch] = static_cast<T>(sum_dy);
    const double scale = gamma[ch] * cache.inv_std[ch] / m;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * vol;
      const T* dy = grad_out.data() + off;
      const T* xh = cache.normalized.data() + off;
      T* dx = out.input.data() + off;
      for (std::size_t i = 0; i < vol; ++i)
        dx[i] = static_cast<T>(scale * (m * dy[i] - sum_dy - xh[i] * sum_dy_xh));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, double negative_slope) {
  BasicTensor<T> y(x.dims());
  const T s = static_cast<T>(negative_slope);
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= T(0) ? x[i] : s * x[i];
  return y;
}

template <typename T>
BasicTensor<T> leaky_relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                                   double negative_slope) {
  if (grad_out.dims() != input.dims()) throw ShapeError("leaky_relu_backward: shape mismatch");
  BasicTensor<T> g(input.dims());
  const T s = static_cast<T>(negative_slope);
  for (std::size_t i = 0; i < input.size(); ++i) g[i] = input[i] >= T(0) ? grad_out[i] : s * grad_out[i];
  return g;
}

template <typename T>
BasicTensor<T> tanh_act(const BasicTensor<T>& x) {
  BasicTensor<T> y(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  return y;
}

template <typename T>
BasicTensor<T> tanh_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output) {
  if (grad_out.dims() != output.dims()) throw ShapeError("tanh_backward: shape mismatch");
  BasicTensor<T> g(output.dims());
  for (std::size_t i = 0; i < output.size(); ++i) g[i] = grad_out[i] * (T(1) - output[i] * output[i]);
  return g;
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::LeakyRelu:
      return "leaky";
    case Activation::Tanh:
      return "tanh";
    case Activation::None:
      return "none";
  }
  return "none";
}

Activation parse_activation(const std::string& s) {
  if (s == "leaky") return Activation::LeakyRelu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "none") return Activation::None;
  throw ArgumentError("unknown activation '" + s + "' (expected leaky, tanh, none)");
}

// ---------------------------------------------------------------------------
// GAP, shuffle, crop

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  if (x.rank() != 5) throw ShapeError("global_avg_pool: expected N x C x D x H x W, got " + shape_string(x.dims()));
  const std::size_t n = x.dim(0), c = x.dim(1), vol = x.size() / (n * c);
  BasicTensor<T> y({n, c, 1, 1, 1});
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const T* p = x.data() + i * vol;
    for (std::size_t j = 0; j < vol; ++j) s += p[j];
    y[i] = static_cast<T>(s / static_cast<double>(vol));
  }
  return y;
}

template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_dims) {
  const std::size_t n = input_dims.at(0), c = input_dims.at(1), vol = shape_volume(input_dims) / (n * c);
  if (grad_out.size() != n * c) throw ShapeError("global_avg_pool_backward: grad has wrong size");
  BasicTensor<T> g(input_dims);
  for (std::size_t i = 0; i < n * c; ++i) {
    const T v = static_cast<T>(grad_out[i] / static_cast<double>(vol));
    std::fill_n(g.data() + i * vol, vol, v);
  }
  return g;
}

namespace {

template <typename T>
BasicTensor<T> permute_channels(const BasicTensor<T>& x, int groups, const char* op) {
  if (x.rank() < 2) throw ShapeError(std::string(op) + ": expected N x C x ...");
  const std::size_t n = x.dim(0), c = x.dim(1), vol = x.size() / (n * c);
  if (groups < 1 || c % static_cast<std::size_t>(groups) != 0)
    throw SpecError(std::string(op) + ": " + std::to_string(c) + " channels not divisible by " +
                    std::to_string(groups) + " groups");
  const std::size_t per = c / groups;
  BasicTensor<T> y(x.dims());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t src = (j % groups) * per + j / groups;
      std::copy_n(x.data() + (b * c + src) * vol, vol, y.data() + (b * c + j) * vol);
    }
  return y;
}

}  // namespace

template <typename T>
BasicTensor<T> channel_shuffle(const BasicTensor<T>& x, int groups) {
  return permute_channels(x, groups, "channel_shuffle");
}

template <typename T>
BasicTensor<T> channel_shuffle_backward(const BasicTensor<T>& grad_out, int groups) {
  // The inverse of shuffling by G is shuffling by C/G.
  const auto c = static_cast<int>(grad_out.dim(1));
  if (groups < 1 || c % groups != 0)
    throw SpecError("channel_shuffle_backward: channels not divisible by groups");
  return permute_channels(grad_out, c / groups, "channel_shuffle_backward");
}

template <typename T>
BasicTensor<T> center_crop(const BasicTensor<T>& x, const Dims3& target) {
  const auto in = spatial_dims(x.dims());
  for (int a = 0; a < 3; ++a)
    if (target[a] > in[a] || target[a] == 0)
      throw ShapeError("center_crop: target " + dims3_string(target) + " exceeds input " + dims3_string(in));
  Dims3 lead{};
  for (int a = 0; a < 3; ++a) lead[a] = (in[a] - target[a]) / 2;
  const std::size_t nc = x.dim(0) * x.dim(1);
  BasicTensor<T> y({x.dim(0), x.dim(1), target[0], target[1], target[2]});
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t d = 0; d < target[0]; ++d)
      for (std::size_t h = 0; h < target[1]; ++h) {
        const T* src = x.data() + ((i * in[0] + d + lead[0]) * in[1] + h + lead[1]) * in[2] + lead[2];
        T* dst = y.data() + ((i * target[0] + d) * target[1] + h) * target[2];
        std::copy_n(src, target[2], dst);
      }
  return y;
}

template <typename T>
BasicTensor<T> center_crop_backward(const BasicTensor<T>& grad_out, const Shape& input_dims) {
  const auto in = spatial_dims(input_dims);
  const auto target = spatial_dims(grad_out.dims());
  Dims3 lead{};
  for (int a = 0; a < 3; ++a) lead[a] = (in[a] - target[a]) / 2;
  const std::size_t nc = input_dims[0] * input_dims[1];
  BasicTensor<T> g(input_dims);
  for (std::size_t i = 0; i < nc; ++i)
    for (std::size_t d = 0; d < target[0]; ++d)
      for (std::size_t h = 0; h < target[1]; ++h) {
        const T* src = grad_out.data() + ((i * target[0] + d) * target[1] + h) * target[2];
        T* dst = g.data() + ((i * in[0] + d + lead[0]) * in[1] + h + lead[1]) * in[2] + lead[2];
        std::copy_n(src, target[2], dst);
      }
  return g;
}

std::size_t ActivationLedger::total_elements() const {
  std::size_t s = 0;
  for (const auto& e : events) s += e.elements;
  return s;
}

// ---------------------------------------------------------------------------
// ConvBlock

template <typename T>
ConvBlock<T>::ConvBlock(std::string name, ConvSpec spec, bool batch_norm, Activation act, Rng& rng,
                        BatchNormConfig bn)
    : Layer<T>(std::move(name)),
      spec_(spec),
      act_(act),
      weight_(this->name() + ".weight",
              (spec.validate(), randn<T>(rng, spec.weight_shape(), 0.0,
                                         std::sqrt(2.0 / static_cast<double>(spec.fan_in()))))) {
  if (spec_.has_bias) bias_.emplace(this->name() + ".bias", BasicTensor<T>({static_cast<std::size_t>(spec_.out_channels)}), false);
  if (batch_norm) {
    const auto c = static_cast<std::size_t>(spec_.out_channels);
    bn_.emplace(c, bn);
    gamma_.emplace(this->name() + ".bn.gamma", BasicTensor<T>({c}, T(1)), false);
    beta_.emplace(this->name() + ".bn.beta", BasicTensor<T>({c}, T(0)), false);
  }
}

template <typename T>
BasicTensor<T> ConvBlock<T>::forward(const BasicTensor<T>& x, const ForwardContext& ctx) {
  const BasicTensor<T>* b = bias_ ? &bias_->value : nullptr;
  BasicTensor<T> z = spec_.transposed ? deconv3d(x, spec_, weight_.value, b) : conv3d(x, spec_, weight_.value, b);

  const bool keep = ctx.training && ctx.store;
  std::optional<BatchNormCache<T>> bn_cache;
  if (bn_) {
    bn_->gamma = gamma_->value;
    bn_->beta = beta_->value;
    if (keep) bn_cache.emplace();
    z = batchnorm(z, *bn_, ctx.training, ctx.update_running_stats, keep ? &*bn_cache : nullptr);
  }
  BasicTensor<T> y;
  switch (act_) {
    case Activation::LeakyRelu:
      y = leaky_relu(z);
      break;
    case Activation::Tanh:
      y = tanh_act(z);
      break;
    case Activation::None:
      y = z;
      break;
  }
  if (keep) {
    if (ctx.ledger) ctx.ledger->record(this->name(), x.size());
    Cache c{x, std::move(bn_cache), act_ == Activation::LeakyRelu ? std::move(z) : BasicTensor<T>(),
            act_ == Activation::Tanh ? y : BasicTensor<T>()};
    cache_ = std::move(c);
  } else {
    cache_.reset();
  }
  return y;
}

template <typename T>
BasicTensor<T> ConvBlock<T>::backward(const BasicTensor<T>& grad_out) {
  if (!cache_) throw StateError(this->name() + ": backward without a stored training forward");
  BasicTensor<T> g;
  switch (act_) {
    case Activation::LeakyRelu:
      g = leaky_relu_backward(grad_out, cache_->pre_activation);
      break;
    case Activation::Tanh:
      g = tanh_backward(grad_out, cache_->output);
      break;
    case Activation::None:
      g = grad_out;
      break;
  }
  if (bn_) {
    auto bg = batchnorm_backward(g, *cache_->bn, gamma_->value);
    add_inplace(gamma_->grad, bg.gamma);
    add_inplace(beta_->grad, bg.beta);
    g = std::move(bg.input);
  }
  auto cg = spec_.transposed ? deconv3d_backward(g, cache_->input, spec_, weight_.value)
                             : conv3d_backward(g, cache_->input, spec_, weight_.value);
  add_inplace(weight_.grad, cg.weight);
  if (bias_ && cg.bias) add_inplace(bias_->grad, *cg.bias);
  cache_.reset();
  return std::move(cg.input);
}

template <typename T>
std::vector<Param<T>*> ConvBlock<T>::params() {
  std::vector<Param<T>*> out{&weight_};
  if (bias_) out.push_back(&*bias_);
  if (gamma_) out.push_back(&*gamma_);
  if (beta_) out.push_back(&*beta_);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> ConvBlock<T>::buffers() {
  if (!bn_) return {};
  return {{this->name() + ".bn.running_mean", &bn_->running_mean}, {this->name() + ".bn.running_var", &bn_->running_var}};
}

template <typename T>
void ConvBlock<T>::release() {
  cache_.reset();
}

template <typename T>
BasicTensor<T> GapLayer<T>::forward(const BasicTensor<T>& x, const ForwardContext&) {
  input_dims_ = x.dims();
  return global_avg_pool(x);
}

template <typename T>
BasicTensor<T> GapLayer<T>::backward(const BasicTensor<T>& g) {
  return global_avg_pool_backward(g, input_dims_);
}

template <typename T>
BasicTensor<T> CropLayer<T>::forward(const BasicTensor<T>& x, const ForwardContext&) {
  input_dims_ = x.dims();
  return center_crop(x, target_);
}

template <typename T>
BasicTensor<T> CropLayer<T>::backward(const BasicTensor<T>& g) {
  return center_crop_backward(g, input_dims_);
}

#define INVNET3D_INSTANTIATE(T)                                                                                   \
  template BasicTensor<T> conv3d(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,                   \
                                 const BasicTensor<T>*);                                                          \
  template ConvGrads<T> conv3d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const ConvSpec&,            \
                                        const BasicTensor<T>&);                                                   \
  template BasicTensor<T> deconv3d(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,                 \
                                   const BasicTensor<T>*);                                                        \
  template ConvGrads<T> deconv3d_backward(const BasicTensor<T>&, const BasicTensor<T>&, const ConvSpec&,          \
                                          const BasicTensor<T>&);                                                 \
  template struct BatchNormParams<T>;                                                                             \
  template BasicTensor<T> batchnorm(const BasicTensor<T>&, BatchNormParams<T>&, bool, bool, BatchNormCache<T>*);  \
  template BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>&, const BatchNormCache<T>&,                  \
                                                const BasicTensor<T>&);                                           \
  template BasicTensor<T> leaky_relu(const BasicTensor<T>&, double);                                              \
  template BasicTensor<T> leaky_relu_backward(const BasicTensor<T>&, const BasicTensor<T>&, double);              \
  template BasicTensor<T> tanh_act(const BasicTensor<T>&);                                                        \
  template BasicTensor<T> tanh_backward(const BasicTensor<T>&, const BasicTensor<T>&);                            \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>&, const Shape&);                          \
  template BasicTensor<T> channel_shuffle(const BasicTensor<T>&, int);                                            \
  template BasicTensor<T> channel_shuffle_backward(const BasicTensor<T>&, int);                                   \
  template BasicTensor<T> center_crop(const BasicTensor<T>&, const Dims3&);                                       \
  template BasicTensor<T> center_crop_backward(const BasicTensor<T>&, const Shape&);                              \
  template class ConvBlock<T>;                                                                                    \
  template class GapLayer<T>;                                                                                     \
  template class CropLayer<T>;

INVNET3D_INSTANTIATE(float)
INVNET3D_INSTANTIATE(double)

#undef INVNET3D_INSTANTIATE

}  // namespace invnet3d
