#include "invnet3d/seismic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "invnet3d/errors.hpp"

namespace invnet3d {

double VelocityVolume::min() const { return *std::min_element(values.values().begin(), values.values().end()); }
double VelocityVolume::max() const { return *std::max_element(values.values().begin(), values.values().end()); }

void VelocityConfig::validate() const {
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw ArgumentError("velocity dims must be positive");
  if (!(spacing > 0)) throw ArgumentError("velocity spacing must be positive");
  if (!(v_min > 0) || !(v_max > v_min))
    throw ArgumentError("velocity range needs 0 < v_min < v_max, got [" + std::to_string(v_min) + ", " +
                        std::to_string(v_max) + "]");
  if (!(lens_reduction >= 0 && lens_reduction < 1)) throw ArgumentError("lens_reduction must be in [0, 1)");
  if (!(lens_probability >= 0 && lens_probability <= 1)) throw ArgumentError("lens_probability must be in [0, 1]");
  if (!(v_min / (1 - lens_reduction) < v_max))
    throw ArgumentError("v_min / (1 - lens_reduction) must stay below v_max");
  if (!boundaries.empty()) {
    std::size_t prev = 0;
    for (auto b : boundaries) {
      if (b <= prev || b >= dims[0])
        throw ArgumentError("layer boundaries must be ascending within (0, " + std::to_string(dims[0]) + ")");
      prev = b;
    }
    return;
  }
  if (min_layers < 2 || max_layers < min_layers) throw ArgumentError("need 2 <= min_layers <= max_layers");
  if (min_thickness == 0 || dims[0] < static_cast<std::size_t>(max_layers) * min_thickness)
    throw ArgumentError("depth " + std::to_string(dims[0]) + " cannot hold " + std::to_string(max_layers) +
                        " layers of " + std::to_string(min_thickness) + " cells");
}

VelocityVolume gen_layered_velocity(Rng& rng, const VelocityConfig& cfg) {
  cfg.validate();
  const auto [D, H, W] = cfg.dims;

  std::vector<std::size_t> tops = cfg.boundaries;
  if (tops.empty()) {
    const auto n = static_cast<std::size_t>(cfg.min_layers) + rng.below(cfg.max_layers - cfg.min_layers + 1);
    const std::size_t free = D - n * cfg.min_thickness;
    std::vector<std::size_t> cuts(n - 1);
    for (auto& c : cuts) c = rng.below(free + 1);
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t k = 0; k < cuts.size(); ++k) tops.push_back((k + 1) * cfg.min_thickness + cuts[k]);
  }
  std::vector<double> speeds(tops.size() + 1);
  const double lo = cfg.v_min / (1 - cfg.lens_reduction);
  for (auto& s : speeds) s = rng.uniform(lo, cfg.v_max);
  std::sort(speeds.begin(), speeds.end());

  VelocityVolume vol{TensorD({D, H, W}), cfg.spacing};
  std::size_t layer = 0;
  for (std::size_t z = 0; z < D; ++z) {
    while (layer < tops.size() && z >= tops[layer]) ++layer;
    std::fill_n(vol.values.data() + z * H * W, H * W, speeds[layer]);
  }

  if (rng.uniform() < cfg.lens_probability) {
    const double cz = rng.uniform(0.3, 0.8) * D, ch = rng.uniform(0.25, 0.75) * H, cw = rng.uniform(0.25, 0.75) * W;
    const double rz = rng.uniform(1.5, std::max(2.0, D / 6.0));
    const double rh = rng.uniform(2.0, std::max(3.0, H / 4.0)), rw = rng.uniform(2.0, std::max(3.0, W / 4.0));
    const double v_lens = (1 - cfg.lens_reduction) * speeds.front();
    vol.has_lens = true;
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          const double a = (z + 0.5 - cz) / rz, b = (h + 0.5 - ch) / rh, c = (w + 0.5 - cw) / rw;
          if (a * a + b * b + c * c <= 1) vol.values[(z * H + h) * W + w] = v_lens;
        }
  }
  return vol;
}

std::vector<double> ricker(double f0, double dt, std::size_t nt, double t0) {
  if (!(f0 > 0) || !(dt > 0)) throw ArgumentError("ricker needs f0 > 0 and dt > 0");
  std::vector<double> w(nt);
  const double pf2 = std::numbers::pi * std::numbers::pi * f0 * f0;
  for (std::size_t i = 0; i < nt; ++i) {
    const double tau = i * dt - t0;
    w[i] = (1 - 2 * pf2 * tau * tau) * std::exp(-pf2 * tau * tau);
  }
  return w;
}

std::vector<std::size_t> even_positions(std::size_t count, std::size_t extent) {
  if (count == 0 || count > extent)
    throw ArgumentError("cannot place " + std::to_string(count) + " positions on " + std::to_string(extent) + " cells");
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<std::size_t>((i + 0.5) * extent / count);
  return out;
}

std::vector<Cell2> source_grid(std::size_t count, std::size_t height, std::size_t width) {
  const auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(count))));
  if (n * n != count) throw ArgumentError("source count " + std::to_string(count) + " is not a perfect square");
  std::vector<Cell2> out;
  for (auto h : even_positions(n, height))
    for (auto w : even_positions(n, width)) out.push_back({h, w});
  return out;
}

double cfl_limit(double spacing, double v_max) { return spacing / (v_max * std::sqrt(3.0)); }

SeismicCube fd_simulate(const VelocityVolume& vel, const AcquisitionGeometry& geom) {
  const auto [D, H, W] = vel.dims();
  const double dx = vel.spacing;
  const double vmax = vel.max();
  if (!(vel.min() > 0)) throw ArgumentError("velocities must be positive");
  if (!(geom.dt > 0) || geom.nt == 0) throw ArgumentError("simulation needs dt > 0 and nt > 0");
  if (geom.dt > cfl_limit(dx, vmax))
    throw StabilityError("dt = " + std::to_string(geom.dt) + " s exceeds the CFL limit " +
                         std::to_string(cfl_limit(dx, vmax)) + " s for v_max = " + std::to_string(vmax) +
                         " m/s at spacing " + std::to_string(dx) + " m");
  if (geom.sources.empty() || geom.receiver_rows.empty() || geom.receiver_cols.empty())
    throw ArgumentError("simulation needs at least one source and one receiver");
  if (geom.depth >= D) throw ArgumentError("source/receiver depth outside the model");
  if (geom.free_surface && geom.depth == 0) throw ArgumentError("sources on the free-surface row radiate nothing");
  for (const auto& s : geom.sources)
    if (s.h >= H || s.w >= W) throw ArgumentError("source outside the surface grid");
  for (auto r : geom.receiver_rows)
    if (r >= H) throw ArgumentError("receiver row outside the surface grid");
  for (auto c : geom.receiver_cols)
    if (c >= W) throw ArgumentError("receiver column outside the surface grid");

  // Padded grid with one extra ghost cell of zeros on every side.
  const std::size_t sw = geom.sponge_width;
  const std::size_t top = geom.free_surface ? 0 : sw;
  const std::size_t nd = top + D + sw, nh = H + 2 * sw, nw = W + 2 * sw;
  const std::size_t gd = nd + 2, gh = nh + 2, gw = nw + 2;
  auto gidx = [&](std::size_t z, std::size_t h, std::size_t w) { return ((z + 1) * gh + (h + 1)) * gw + (w + 1); };

  std::vector<double> coef(gd * gh * gw, 0.0), damp_a(gd * gh * gw, 1.0), damp_b(gd * gh * gw, 1.0);
  const double r2 = geom.dt * geom.dt / (dx * dx);
  auto outside = [](std::size_t i, std::size_t lo, std::size_t n) -> double {
    if (i < lo) return static_cast<double>(lo - i);
    if (i >= lo + n) return static_cast<double>(i - (lo + n - 1));
    return 0.0;
  };
  for (std::size_t z = 0; z < nd; ++z)
    for (std::size_t h = 0; h < nh; ++h)
      for (std::size_t w = 0; w < nw; ++w) {
        const std::size_t vz = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(z) - std::ptrdiff_t(top), 0, D - 1);
        const std::size_t vh = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(h) - std::ptrdiff_t(sw), 0, H - 1);
        const std::size_t vw = std::clamp<std::ptrdiff_t>(std::ptrdiff_t(w) - std::ptrdiff_t(sw), 0, W - 1);
        const double v = vel.values[(vz * H + vh) * W + vw];
        const double d = std::max({outside(z, top, D), outside(h, sw, H), outside(w, sw, W)});
        const double x = sw > 0 ? geom.sponge_strength * d / sw : 0.0;
        const double gamma = 1 - std::exp(-x * x);
        const auto i = gidx(z, h, w);
        coef[i] = v * v * r2;
        damp_a[i] = 1 / (1 + gamma);
        damp_b[i] = 1 - gamma;
      }

  const auto wavelet = ricker(geom.f0, geom.dt, geom.nt, geom.wavelet_delay());
  const std::size_t Hr = geom.receiver_rows.size(), Wr = geom.receiver_cols.size();
  SeismicCube cube{TensorD({geom.sources.size(), geom.nt, Hr, Wr}), geom.dt, {}};
  const std::size_t rz = top + geom.depth;

  std::vector<double> prev(gd * gh * gw), cur(gd * gh * gw), next(gd * gh * gw);
  const auto sz = static_cast<std::ptrdiff_t>(gh * gw), gwi = static_cast<std::ptrdiff_t>(gw);
  for (std::size_t s = 0; s < geom.sources.size(); ++s) {
    cube.sources.push_back(s);
    std::fill(prev.begin(), prev.end(), 0.0);
    std::fill(cur.begin(), cur.end(), 0.0);
    std::fill(next.begin(), next.end(), 0.0);
    const auto src = gidx(rz, geom.sources[s].h + sw, geom.sources[s].w + sw);
    // Point source density w / dx^3 scaled by v^2 dt^2, so p ~ w(t - r/v) / (4 pi r).
    const double src_gain = geom.amplitude * coef[src] / dx;
    double* out = cube.data.data() + s * geom.nt * Hr * Wr;
    for (std::size_t n = 0; n < geom.nt; ++n) {
      for (std::size_t a = 0; a < Hr; ++a)
        for (std::size_t b = 0; b < Wr; ++b)
          out[(n * Hr + a) * Wr + b] = cur[gidx(rz, geom.receiver_rows[a] + sw, geom.receiver_cols[b] + sw)];
      const std::size_t z0 = geom.free_surface ? 1 : 0;
      for (std::size_t z = z0; z < nd; ++z)
        for (std::size_t h = 0; h < nh; ++h) {
          const std::size_t row = gidx(z, h, 0);
          const double* c = cur.data() + row;
          const double* p = prev.data() + row;
          const double* k = coef.data() + row;
          const double* da = damp_a.data() + row;
          const double* db = damp_b.data() + row;
          double* o = next.data() + row;
          for (std::ptrdiff_t w = 0; w < std::ptrdiff_t(nw); ++w) {
            const double lap = c[w - 1] + c[w + 1] + c[w - gwi] + c[w + gwi] + c[w - sz] + c[w + sz] - 6 * c[w];
            o[w] = (2 * c[w] - db[w] * p[w] + k[w] * lap) * da[w];
          }
        }
      next[src] += src_gain * wavelet[n] * damp_a[src];
      std::swap(prev, cur);
      std::swap(cur, next);
    }
    for (std::size_t i = 0; i < geom.nt * Hr * Wr; ++i)
      if (!std::isfinite(out[i])) throw NumericError("wavefield became non-finite for source " + std::to_string(s));
  }
  return cube;
}

std::vector<std::size_t> subsample_indices(std::size_t t, std::size_t t_target) {
  if (t_target < 1 || t_target > t)
    throw ArgumentError("target length " + std::to_string(t_target) + " must be in [1, " + std::to_string(t) + "]");
  if (t_target == 1) return {0};
  std::vector<std::size_t> idx(t_target);
  const std::size_t den = t_target - 1;
  for (std::size_t i = 0; i < t_target; ++i) idx[i] = (2 * i * (t - 1) + den) / (2 * den);
  return idx;
}

SeismicCube temporal_subsample(const SeismicCube& cube, std::size_t t_target) {
  const auto idx = subsample_indices(cube.time(), t_target);
  Shape dims = cube.data.dims();
  const std::size_t C = dims[0], T = dims[1], inner = cube.data.size() / (C * T);
  dims[1] = t_target;
  SeismicCube out{TensorD(dims), cube.dt, cube.sources};
  if (t_target > 1) out.dt = cube.dt * static_cast<double>(T - 1) / static_cast<double>(t_target - 1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < t_target; ++i)
      std::copy_n(cube.data.data() + (c * T + idx[i]) * inner, inner, out.data.data() + (c * t_target + i) * inner);
  return out;
}

SeismicCube select_sources(const SeismicCube& cube, const std::vector<std::size_t>& indices) {
  const std::size_t C = cube.channels();
  if (indices.empty()) throw ArgumentError("source selection is empty");
  std::vector<bool> seen(C, false);
  for (auto i : indices) {
    if (i >= C) throw ArgumentError("source index " + std::to_string(i) + " outside [0, " + std::to_string(C) + ")");
    if (seen[i]) throw ArgumentError("source index " + std::to_string(i) + " selected twice");
    seen[i] = true;
  }
  Shape dims = cube.data.dims();
  const std::size_t per = cube.data.size() / C;
  dims[0] = indices.size();
  SeismicCube out{TensorD(dims), cube.dt, {}};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    std::copy_n(cube.data.data() + indices[k] * per, per, out.data.data() + k * per);
    out.sources.push_back(cube.sources.empty() ? indices[k] : cube.sources.at(indices[k]));
  }
  return out;
}

template <typename T>
BasicTensor<T> minmax_normalize(const BasicTensor<T>& x, MinMax range) {
  if (!(range.max > range.min))
    throw ArgumentError("degenerate normalization range [" + std::to_string(range.min) + ", " +
                        std::to_string(range.max) + "]");
  BasicTensor<T> out(x.dims());
  const double scale = 2.0 / (range.max - range.min);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>((x[i] - range.min) * scale - 1.0);
  return out;
}

template <typename T>
std::pair<BasicTensor<T>, MinMax> minmax_normalize(const BasicTensor<T>& x) {
  const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
  MinMax r{static_cast<double>(*lo), static_cast<double>(*hi)};
  return {minmax_normalize(x, r), r};
}

template <typename T>
BasicTensor<T> minmax_denormalize(const BasicTensor<T>& x, MinMax range) {
  BasicTensor<T> out(x.dims());
  const double half = 0.5 * (range.max - range.min);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>((x[i] + 1.0) * half + range.min);
  return out;
}

template <typename T>
BasicTensor<T> add_gaussian_noise(const BasicTensor<T>& x, Rng& rng, double snr_db) {
  if (std::isnan(snr_db) || snr_db == -std::numeric_limits<double>::infinity())
    throw ArgumentError("SNR must be a number or +inf");
  if (snr_db == kNoNoise) return x;
  double power = 0;
  for (auto v : x.values()) power += static_cast<double>(v) * v;
  power /= static_cast<double>(x.size());
  if (!(power > 0)) throw ArgumentError("cannot set an SNR on an all-zero signal");
  const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
  BasicTensor<T> out = x;
  for (auto& v : out.values()) v = static_cast<T>(v + sigma * rng.normal());
  return out;
}

Biquad butterworth_highpass(double cutoff_hz, double dt) {
  if (!(dt > 0)) throw ArgumentError("dt must be positive");
  const double nyquist = 0.5 / dt;
  if (!(cutoff_hz > 0 && cutoff_hz < nyquist))
    throw ArgumentError("cutoff " + std::to_string(cutoff_hz) + " Hz outside (0, " + std::to_string(nyquist) + ") Hz");
  const double k = std::tan(std::numbers::pi * cutoff_hz * dt);
  const double norm = 1 / (1 + std::numbers::sqrt2 * k + k * k);
  return {norm, -2 * norm, norm, 2 * (k * k - 1) * norm, (1 - std::numbers::sqrt2 * k + k * k) * norm};
}

template <typename T>
BasicTensor<T> highpass_filter(const BasicTensor<T>& x, double dt, double cutoff_hz) {
  if (x.rank() < 2) throw ShapeError("high-pass expects C x T x ... data, got " + shape_string(x.dims()));
  const auto q = butterworth_highpass(cutoff_hz, dt);
  const std::size_t C = x.dim(0), nt = x.dim(1), inner = x.size() / (C * nt);
  BasicTensor<T> out(x.dims());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t j = 0; j < inner; ++j) {
      double s1 = 0, s2 = 0;  // transposed direct form II state
      for (std::size_t t = 0; t < nt; ++t) {
        const std::size_t i = (c * nt + t) * inner + j;
        const double in = x[i];
        const double y = q.b0 * in + s1;
        s1 = q.b1 * in - q.a1 * y + s2;
        s2 = q.b2 * in - q.a2 * y;
        out[i] = static_cast<T>(y);
      }
    }
  return out;
}

#define INSTANTIATE(T)                                                                          \
  template BasicTensor<T> minmax_normalize(const BasicTensor<T>&, MinMax);                      \
  template std::pair<BasicTensor<T>, MinMax> minmax_normalize(const BasicTensor<T>&);           \
  template BasicTensor<T> minmax_denormalize(const BasicTensor<T>&, MinMax);                    \
  template BasicTensor<T> add_gaussian_noise(const BasicTensor<T>&, Rng&, double);              \
  template BasicTensor<T> highpass_filter(const BasicTensor<T>&, double, double);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace invnet3d
