#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "invnet3d/dataset.hpp"
#include "invnet3d/model.hpp"

namespace invnet3d {

// ---------------------------------------------------------------------------
// Loss and optimizer

/// mean |pred - target|
template <typename T>
double l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

/// sign(pred - target) / N, with 0 at ties.
template <typename T>
BasicTensor<T> l1_loss_backward(const BasicTensor<T>& pred, const BasicTensor<T>& target);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
};

/// Adam moments with decoupled weight decay (theta -= lr * wd * theta, then
/// the bias-corrected Adam step). Moments are keyed by parameter position.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// Throws NumericError naming the first parameter with a non-finite grad;
  /// nothing is updated in that case.
  void step(const std::vector<Param<T>*>& params, double lr);

  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  void save(const std::filesystem::path& dir, const std::vector<Param<T>*>& params) const;
  void load(const std::filesystem::path& dir, const std::vector<Param<T>*>& params);

 private:
  AdamWConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<BasicTensor<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Schedule and training

struct TrainConfig {
  double base_lr = 1e-4;
  double weight_decay = 5e-4;
  int warmup_epochs = 10;
  std::vector<int> decay_epochs{40, 60, 70};
  int total_epochs = 80;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);

/// Linear warmup base * (epoch + 1) / warmup, then base / 10^k where k counts
/// decay epochs <= epoch.
double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_l1 = 0;
  std::optional<double> val_l1;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  double best_val_l1 = 0;
};

/// Seeded shuffled mini-batches, one AdamW step per batch. When `out_dir` is
/// set, writes history.jsonl as epochs finish and keeps the best-validation
/// (or, without validation data, the last) weights under out_dir/checkpoint.
TrainResult train(Network<float>& net, const ArchProfile& profile, const Dataset& train_set, const Dataset* val_set,
                  const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Throws ShapeError when the network cannot map the dataset inputs onto its
/// targets.
void check_geometry(const Network<float>& net, const Dataset& ds);

// ---------------------------------------------------------------------------
// Checkpoints

/// Writes the network weights, its plan description and profile.
void save_checkpoint(const std::filesystem::path& dir, Network<float>& net, const ArchProfile& profile);

struct LoadedModel {
  ArchProfile profile;
  std::unique_ptr<Network<float>> net;
};
LoadedModel load_checkpoint(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Metrics

template <typename T>
double mae(const BasicTensor<T>& pred, const BasicTensor<T>& target);
template <typename T>
double rmse(const BasicTensor<T>& pred, const BasicTensor<T>& target);

/// Mean over depth slices of 2-D SSIM (11 x 11 Gaussian window, sigma 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 2, valid windows only). Inputs are
/// D x H x W volumes or any stack of them (leading dims are flattened into
/// extra slices). Slices smaller than the window use the whole slice.
template <typename T>
double ssim_volume(const BasicTensor<T>& pred, const BasicTensor<T>& target);

struct EvalTransform {
  double snr_db = kNoNoise;
  std::optional<double> cutoff_hz;
  std::uint64_t noise_seed = 0;
};

struct SampleMetrics {
  std::size_t index = 0;
  double mae = 0;
  double rmse = 0;
  double ssim = 0;
};

struct EvalReport {
  double mae = 0;   // m/s
  double rmse = 0;  // m/s
  double ssim = 0;
  std::vector<SampleMetrics> samples;
};

void to_json(nlohmann::json& j, const EvalReport& r);

/// Applies the high-pass (if any) then noise to each input in recorded units
/// (undoing and then reapplying the sample's stored normalization), predicts
/// in inference mode, and scores MAE/RMSE on denormalized velocity and SSIM
/// on the normalized scale. Noise for sample i is drawn from
/// Rng::derive(noise_seed, i), so sweeps over SNR share their noise pattern.
EvalReport evaluate(Network<float>& net, const Dataset& ds, const EvalTransform& transform = {},
                    std::size_t batch_size = 8);

}  // namespace invnet3d
