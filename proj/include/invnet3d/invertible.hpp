#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "invnet3d/layers.hpp"

namespace invnet3d {

/// Additive coupling on channel halves:
///   y1 = x1 + f(x2),  y2 = x2 + g(y1)
/// inverted by
///   x2 = y2 - g(y1),  x1 = y1 - f(x2).
/// f and g are shape-preserving stride-1 ConvBlocks mapping C/2 -> C/2 channels.
template <typename T>
class CouplingLayer final : public Layer<T> {
 public:
  /// `sub` describes f and g; it must be stride 1 with in == out channels.
  CouplingLayer(std::string name, ConvSpec sub, bool batch_norm, Activation act, Rng& rng,
                BatchNormConfig bn = {});

  int channels() const { return 2 * sub_.in_channels; }
  const ConvSpec& sub_spec() const { return sub_; }

  /// When ctx stores, f and g keep their inputs for a later backward().
  BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext& ctx) override;

  /// Reconstructs x from y. When ctx stores, f and g keep exactly the inputs
  /// (x2 and y1) a subsequent backward() needs, so inverse + backward together
  /// cost one extra forward evaluation of f and g.
  BasicTensor<T> inverse(const BasicTensor<T>& y, const ForwardContext& ctx);

  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;
  std::vector<Param<T>*> params() override;
  std::vector<std::pair<std::string, BasicTensor<T>*>> buffers() override;
  void release() override;

  ConvBlock<T>& f() { return *f_; }
  ConvBlock<T>& g() { return *g_; }

 private:
  ConvSpec sub_;
  std::unique_ptr<ConvBlock<T>> f_, g_;
};

/// Stack of coupling layers. In the default recompute mode a training forward
/// retains only the module output; backward walks the layers in reverse,
/// rebuilding each layer's input from its output. With recompute disabled the
/// module behaves like a plain stack and stores every layer input.
template <typename T>
class InvertibleModule final : public Layer<T> {
 public:
  InvertibleModule(std::string name, int channels, int n_layers, int sub_groups, bool batch_norm, Activation act,
                   Rng& rng, BatchNormConfig bn = {});

  std::size_t depth() const { return layers_.size(); }
  CouplingLayer<T>& layer(std::size_t i) { return *layers_.at(i); }

  void set_recompute(bool on) { recompute_ = on; }
  bool recompute() const { return recompute_; }

  BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext& ctx) override;
  BasicTensor<T> inverse(const BasicTensor<T>& y, const ForwardContext& ctx);
  BasicTensor<T> backward(const BasicTensor<T>& grad_out) override;

  /// Recompute-based backward given the module output explicitly.
  BasicTensor<T> backward_from_output(const BasicTensor<T>& y_out, const BasicTensor<T>& grad_out);

  std::vector<Param<T>*> params() override;
  std::vector<std::pair<std::string, BasicTensor<T>*>> buffers() override;
  void release() override;

 private:
  std::vector<std::unique_ptr<CouplingLayer<T>>> layers_;
  bool recompute_ = true;
  std::optional<BasicTensor<T>> output_;
  bool stored_path_ = false;
};

template <typename T>
BasicTensor<T> coupling_forward(const BasicTensor<T>& x, CouplingLayer<T>& layer, bool training = true);

template <typename T>
BasicTensor<T> coupling_inverse(const BasicTensor<T>& y, CouplingLayer<T>& layer, bool training = true);

template <typename T>
struct ModuleGrads {
  BasicTensor<T> input;
  std::vector<std::pair<std::string, BasicTensor<T>>> params;
};

/// Zeroes the module's parameter grads, runs the recompute backward from
/// (y_out, grad_out), and returns grad_in together with the parameter grads.
template <typename T>
ModuleGrads<T> invertible_module_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& y_out,
                                          InvertibleModule<T>& module);

}  // namespace invnet3d
