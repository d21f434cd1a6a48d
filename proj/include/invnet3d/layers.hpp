#pragma once

#include <array>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "invnet3d/tensor.hpp"

namespace invnet3d {

using Triple = std::array<int, 3>;
using Dims3 = std::array<std::size_t, 3>;

std::string triple_string(const Triple& t);
std::string dims3_string(const Dims3& d);

/// Convolution / transposed convolution description. Activations are laid out
/// N x C x D x H x W (batch leading); D is the temporal axis in the encoder and
/// the depth axis in the decoder.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  int groups = 1;
  bool has_bias = true;
  bool transposed = false;

  /// Throws SpecError on any violated invariant.
  void validate() const;

  /// Symmetric per-side zero padding: (k-1)/2 for convolutions, (k-s)/2 for
  /// transposed convolutions.
  Triple padding() const;

  /// ceil(in/stride) for convolutions, in*stride for transposed ones.
  Dims3 output_extent(const Dims3& in) const;

  /// Weight layout: convolution C_out x C_in/G x k; transposed C_in x C_out/G x k.
  Shape weight_shape() const;
  std::size_t kernel_volume() const;
  std::size_t fan_in() const;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  std::optional<BasicTensor<T>> bias;
};

template <typename T>
BasicTensor<T> conv3d(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weight,
                      const BasicTensor<T>* bias);

template <typename T>
ConvGrads<T> conv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& saved_input,
                             const ConvSpec& spec, const BasicTensor<T>& weight);

template <typename T>
BasicTensor<T> deconv3d(const BasicTensor<T>& x, const ConvSpec& spec, const BasicTensor<T>& weight,
                        const BasicTensor<T>* bias);

template <typename T>
ConvGrads<T> deconv3d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& saved_input,
                               const ConvSpec& spec, const BasicTensor<T>& weight);

// ---------------------------------------------------------------------------
// Batch normalization over N x spatial per channel.

struct BatchNormConfig {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

template <typename T>
struct BatchNormParams {
  BasicTensor<T> gamma, beta, running_mean, running_var;
  BatchNormConfig config;

  explicit BatchNormParams(std::size_t channels, BatchNormConfig cfg = {});
};

template <typename T>
struct BatchNormCache {
  BasicTensor<T> normalized;
  std::vector<double> inv_std;
};

/// Training mode normalizes with batch statistics and, if `update_running`,
/// folds them into the running estimates. Eval mode uses the running stats.
/// `cache` (training only) receives what backward needs.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, BatchNormParams<T>& params, bool training,
                         bool update_running = true, BatchNormCache<T>* cache = nullptr);

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input, gamma, beta;
};

template <typename T>
BatchNormGrads<T> batchnorm_backward(const BasicTensor<T>& grad_out, const BatchNormCache<T>& cache,
                                     const BasicTensor<T>& gamma);

// ---------------------------------------------------------------------------
// Elementwise activations.

inline constexpr double kLeakySlope = 0.1;

template <typename T>
BasicTensor<T> leaky_relu(const BasicTensor<T>& x, double negative_slope = kLeakySlope);
template <typename T>
BasicTensor<T> leaky_relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                                   double negative_slope = kLeakySlope);
template <typename T>
BasicTensor<T> tanh_act(const BasicTensor<T>& x);
/// Takes the forward output, not the input.
template <typename T>
BasicTensor<T> tanh_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& output);

// ---------------------------------------------------------------------------
// Shape-manipulating layers (N x C x D x H x W).

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);
template <typename T>
BasicTensor<T> global_avg_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_dims);

/// Output channel j takes input channel (j mod G)*(C/G) + j/G.
template <typename T>
BasicTensor<T> channel_shuffle(const BasicTensor<T>& x, int groups);
template <typename T>
BasicTensor<T> channel_shuffle_backward(const BasicTensor<T>& grad_out, int groups);

/// Removes floor((in-target)/2) leading elements per spatial dim; any odd
/// remainder is dropped from the trailing side.
template <typename T>
BasicTensor<T> center_crop(const BasicTensor<T>& x, const Dims3& target);
template <typename T>
BasicTensor<T> center_crop_backward(const BasicTensor<T>& grad_out, const Shape& input_dims);

Dims3 spatial_dims(const Shape& dims);

// ---------------------------------------------------------------------------
// Stateful layers used by models.

template <typename T>
struct Param {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  bool decay = true;

  Param(std::string n, BasicTensor<T> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.dims()), decay(wd) {}
};

/// Records tensors retained by a training-mode forward pass for use in backward.
struct ActivationLedger {
  struct Event {
    std::string layer;
    std::size_t elements;
  };
  std::vector<Event> events;

  void record(const std::string& layer, std::size_t elements) { events.push_back({layer, elements}); }
  std::size_t total_elements() const;
};

struct ForwardContext {
  bool training = false;
  /// Keep what backward needs. Off inside invertible modules' forward.
  bool store = true;
  bool update_running_stats = true;
  ActivationLedger* ledger = nullptr;
};

enum class Activation { LeakyRelu, Tanh, None };
std::string activation_name(Activation a);
Activation parse_activation(const std::string& s);

template <typename T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  const std::string& name() const { return name_; }

  virtual BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext& ctx) = 0;
  /// Consumes what the last storing forward retained; accumulates parameter grads.
  virtual BasicTensor<T> backward(const BasicTensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  /// Non-trainable state that must be checkpointed (BN running statistics).
  virtual std::vector<std::pair<std::string, BasicTensor<T>*>> buffers() { return {}; }
  virtual void release() {}

 private:
  std::string name_;
};

/// conv | deconv, then optional batch norm, then activation.
template <typename T>
class ConvBlock final : public Layer<T> {
 public:
  ConvBlock(std::string name, ConvSpec spec, bool batch_norm, Activation act, Rng& rng,
            BatchNormConfig bn = {});

  BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext& ctx) override;
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<Param<T>*> params() override;
  std::vector<std::pair<std::string, BasicTensor<T>*>> buffers() override;
  void release() override;

  const ConvSpec& spec() const { return spec_; }
  Param<T>& weight() { return weight_; }
  std::optional<Param<T>>& bias() { return bias_; }
  std::optional<BatchNormParams<T>>& bn() { return bn_; }
  Activation activation() const { return act_; }

 private:
  struct Cache {
    BasicTensor<T> input;
    std::optional<BatchNormCache<T>> bn;
    BasicTensor<T> pre_activation;
    BasicTensor<T> output;
  };

  ConvSpec spec_;
  Activation act_;
  Param<T> weight_;
  std::optional<Param<T>> bias_;
  std::optional<BatchNormParams<T>> bn_;
  std::optional<Param<T>> gamma_, beta_;
  std::optional<Cache> cache_;
};

template <typename T>
class ShuffleLayer final : public Layer<T> {
 public:
  ShuffleLayer(std::string name, int groups) : Layer<T>(std::move(name)), groups_(groups) {}
  BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext&) override {
    return channel_shuffle(x, groups_);
  }
  BasicTensor<T> backward(const BasicTensor<T>& g) override { return channel_shuffle_backward(g, groups_); }
  int groups() const { return groups_; }

 private:
  int groups_;
};

template <typename T>
class GapLayer final : public Layer<T> {
 public:
  explicit GapLayer(std::string name) : Layer<T>(std::move(name)) {}
  BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext& ctx) override;
  BasicTensor<T> backward(const BasicTensor<T>& g) override;

 private:
  Shape input_dims_;
};

template <typename T>
class CropLayer final : public Layer<T> {
 public:
  CropLayer(std::string name, Dims3 target) : Layer<T>(std::move(name)), target_(target) {}
  BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext& ctx) override;
  BasicTensor<T> backward(const BasicTensor<T>& g) override;

 private:
  Dims3 target_;
  Shape input_dims_;
};

}  // namespace invnet3d
