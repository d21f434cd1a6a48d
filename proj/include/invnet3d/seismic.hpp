#pragma once

#include <array>
#include <cstddef>
#include <limits>
#include <vector>

#include "invnet3d/layers.hpp"
#include "invnet3d/tensor.hpp"

namespace invnet3d {

// ---------------------------------------------------------------------------
// Velocity models

/// D x H x W grid of wave speeds in m/s, depth first, uniform spacing.
struct VelocityVolume {
  TensorD values{Shape{1, 1, 1}};
  double spacing = 10.0;
  bool has_lens = false;

  Dims3 dims() const { return {values.dim(0), values.dim(1), values.dim(2)}; }
  double min() const;
  double max() const;
};

struct VelocityConfig {
  Dims3 dims{24, 24, 24};
  double spacing = 10.0;
  int min_layers = 3;
  int max_layers = 5;
  double v_min = 1500.0;
  double v_max = 4000.0;
  // Layer tops (depth cells, ascending, first > 0). When empty, boundaries are
  // drawn at random with at least `min_thickness` cells per layer.
  std::vector<std::size_t> boundaries;
  std::size_t min_thickness = 2;
  // Chance that a sample carries a low-velocity ellipsoidal lens. The lens
  // speed is the slowest background speed reduced by `lens_reduction`, so
  // background layers are drawn from [v_min / (1 - lens_reduction), v_max].
  double lens_probability = 0.5;
  double lens_reduction = 0.15;

  void validate() const;
};

/// Horizontal layers with speeds increasing with depth, plus an optional lens.
VelocityVolume gen_layered_velocity(Rng& rng, const VelocityConfig& cfg);

// ---------------------------------------------------------------------------
// Wave simulation

/// w(t) = (1 - 2 pi^2 f0^2 (t - t0)^2) exp(-pi^2 f0^2 (t - t0)^2), t = i * dt.
std::vector<double> ricker(double f0, double dt, std::size_t nt, double t0);

struct Cell2 {
  std::size_t h = 0;
  std::size_t w = 0;
  friend bool operator==(const Cell2&, const Cell2&) = default;
};

struct AcquisitionGeometry {
  std::vector<Cell2> sources;
  // Receivers sit on the Cartesian product of these rows and columns, which
  // gives the H_r x W_r trace layout of the cube.
  std::vector<std::size_t> receiver_rows;
  std::vector<std::size_t> receiver_cols;
  std::size_t depth = 1;  // depth cell of sources and receivers
  double dt = 1e-3;
  std::size_t nt = 512;
  double f0 = 15.0;
  double t0 = -1.0;  // wavelet delay; negative means 1.2 / f0
  double amplitude = 1.0;  // wavelet scale
  std::size_t sponge_width = 8;
  double sponge_strength = 0.6;
  // p = 0 on the top row. When false the top is absorbing like the other
  // five faces, which leaves a free-space Green's function for testing.
  bool free_surface = true;

  double wavelet_delay() const { return t0 < 0 ? 1.2 / f0 : t0; }
};

/// `count` positions evenly spread over an n x n surface grid per axis (the
/// count must be a perfect square), inset from the edges.
std::vector<Cell2> source_grid(std::size_t count, std::size_t height, std::size_t width);
/// `count` evenly spaced indices in [0, extent).
std::vector<std::size_t> even_positions(std::size_t count, std::size_t extent);

/// Largest stable step for the 7-point scheme: spacing / (v_max * sqrt(3)).
double cfl_limit(double spacing, double v_max);

/// Seismic data C x T x H_r x W_r; channel c came from simulated source
/// `sources[c]`.
struct SeismicCube {
  TensorD data{Shape{1, 1, 1, 1}};
  double dt = 1e-3;
  std::vector<std::size_t> sources;

  std::size_t channels() const { return data.dim(0); }
  std::size_t time() const { return data.dim(1); }
};

/// Second-order acoustic finite differences, one run per source. Throws
/// StabilityError before stepping when dt exceeds the CFL limit and
/// NumericError if the wavefield turns non-finite.
SeismicCube fd_simulate(const VelocityVolume& vel, const AcquisitionGeometry& geom);

// ---------------------------------------------------------------------------
// Input transforms

/// Keeps frames round(i * (T - 1) / (T_target - 1)); dt scales accordingly.
SeismicCube temporal_subsample(const SeismicCube& cube, std::size_t t_target);
std::vector<std::size_t> subsample_indices(std::size_t t, std::size_t t_target);

SeismicCube select_sources(const SeismicCube& cube, const std::vector<std::size_t>& indices);

struct MinMax {
  double min = 0;
  double max = 0;
};

/// Maps [min, max] onto [-1, 1]. The one-argument form uses the data range.
template <typename T>
BasicTensor<T> minmax_normalize(const BasicTensor<T>& x, MinMax range);
template <typename T>
std::pair<BasicTensor<T>, MinMax> minmax_normalize(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> minmax_denormalize(const BasicTensor<T>& x, MinMax range);

inline constexpr double kNoNoise = std::numeric_limits<double>::infinity();

/// Adds i.i.d. Gaussian noise with variance mean(x^2) / 10^(snr_db / 10).
/// snr_db = +inf returns x unchanged.
template <typename T>
BasicTensor<T> add_gaussian_noise(const BasicTensor<T>& x, Rng& rng, double snr_db);

/// Biquad coefficients of a 2nd-order Butterworth high-pass (bilinear
/// transform with prewarping), normalized so a0 = 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};
Biquad butterworth_highpass(double cutoff_hz, double dt);

/// Filters every trace of a C x T x ... tensor along T.
template <typename T>
BasicTensor<T> highpass_filter(const BasicTensor<T>& x, double dt, double cutoff_hz);

inline SeismicCube add_gaussian_noise(const SeismicCube& c, Rng& rng, double snr_db) {
  return {add_gaussian_noise(c.data, rng, snr_db), c.dt, c.sources};
}
inline SeismicCube highpass_filter(const SeismicCube& c, double cutoff_hz) {
  return {highpass_filter(c.data, c.dt, cutoff_hz), c.dt, c.sources};
}

}  // namespace invnet3d
