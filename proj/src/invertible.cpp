#include "invnet3d/invertible.hpp"

#include "invnet3d/errors.hpp"

namespace invnet3d {

namespace {

ConvSpec checked_sub_spec(ConvSpec sub) {
  sub.validate();
  if (sub.transposed) throw SpecError("coupling sub-layers must be plain convolutions");
  if (sub.stride != Triple{1, 1, 1})
    throw SpecError("coupling sub-layers must have stride 1, got " + triple_string(sub.stride));
  if (sub.in_channels != sub.out_channels)
    throw SpecError("coupling sub-layers must map C/2 -> C/2 channels, got " + std::to_string(sub.in_channels) +
                    " -> " + std::to_string(sub.out_channels));
  return sub;
}

template <typename T>
void check_even_channels(const BasicTensor<T>& x, int expected, const std::string& who) {
  if (x.rank() != 5) throw ShapeError(who + ": expected N x C x D x H x W, got " + shape_string(x.dims()));
  if (x.dim(1) % 2 != 0) throw SpecError(who + ": channel count " + std::to_string(x.dim(1)) + " is odd");
  if (static_cast<int>(x.dim(1)) != expected)
    throw ShapeError(who + ": expected " + std::to_string(expected) + " channels, got " + std::to_string(x.dim(1)));
}

}  // namespace

template <typename T>
CouplingLayer<T>::CouplingLayer(std::string name, ConvSpec sub, bool batch_norm, Activation act, Rng& rng,
                                BatchNormConfig bn)
    : Layer<T>(std::move(name)), sub_(checked_sub_spec(sub)) {
  f_ = std::make_unique<ConvBlock<T>>(this->name() + ".f", sub_, batch_norm, act, rng, bn);
  g_ = std::make_unique<ConvBlock<T>>(this->name() + ".g", sub_, batch_norm, act, rng, bn);
}

template <typename T>
BasicTensor<T> CouplingLayer<T>::forward(const BasicTensor<T>& x, const ForwardContext& ctx) {
  check_even_channels(x, channels(), this->name());
  ForwardContext inner = ctx;
  inner.ledger = nullptr;
  auto [x1, x2] = channel_split(x, x.dim(1) / 2, 1);
  add_inplace(x1, f_->forward(x2, inner));  // x1 now holds y1
  add_inplace(x2, g_->forward(x1, inner));  // x2 now holds y2
  if (ctx.training && ctx.store && ctx.ledger) ctx.ledger->record(this->name(), x.size());
  return channel_concat(x1, x2, 1);
}

template <typename T>
BasicTensor<T> CouplingLayer<T>::inverse(const BasicTensor<T>& y, const ForwardContext& ctx) {
  check_even_channels(y, channels(), this->name());
  ForwardContext inner = ctx;
  inner.ledger = nullptr;
  auto [y1, y2] = channel_split(y, y.dim(1) / 2, 1);
  sub_inplace(y2, g_->forward(y1, inner));  // y2 now holds x2
  sub_inplace(y1, f_->forward(y2, inner));  // y1 now holds x1
  return channel_concat(y1, y2, 1);
}

template <typename T>
BasicTensor<T> CouplingLayer<T>::backward(const BasicTensor<T>& grad_out) {
  check_even_channels(grad_out, channels(), this->name());
  auto [gy1, gy2] = channel_split(grad_out, grad_out.dim(1) / 2, 1);
  // y2 = x2 + g(y1): gy2 flows to x2 directly and to y1 through g.
  add_inplace(gy1, g_->backward(gy2));
  // y1 = x1 + f(x2): total gy1 flows to x1 directly and to x2 through f.
  add_inplace(gy2, f_->backward(gy1));
  return channel_concat(gy1, gy2, 1);
}

template <typename T>
std::vector<Param<T>*> CouplingLayer<T>::params() {
  auto out = f_->params();
  for (auto* p : g_->params()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> CouplingLayer<T>::buffers() {
  auto out = f_->buffers();
  for (auto& b : g_->buffers()) out.push_back(b);
  return out;
}

template <typename T>
void CouplingLayer<T>::release() {
  f_->release();
  g_->release();
}

// ---------------------------------------------------------------------------

template <typename T>
InvertibleModule<T>::InvertibleModule(std::string name, int channels, int n_layers, int sub_groups, bool batch_norm,
                                      Activation act, Rng& rng, BatchNormConfig bn)
    : Layer<T>(std::move(name)) {
  if (n_layers < 1) throw SpecError(this->name() + ": an invertible module needs at least one layer");
  if (channels % 2 != 0) throw SpecError(this->name() + ": channel count " + std::to_string(channels) + " is odd");
  ConvSpec sub;
  sub.in_channels = sub.out_channels = channels / 2;
  sub.kernel = {3, 3, 3};
  sub.groups = sub_groups;
  for (int i = 0; i < n_layers; ++i)
    layers_.push_back(std::make_unique<CouplingLayer<T>>(this->name() + "." + std::to_string(i), sub, batch_norm,
                                                         act, rng, bn));
}

template <typename T>
BasicTensor<T> InvertibleModule<T>::forward(const BasicTensor<T>& x, const ForwardContext& ctx) {
  const bool keep = ctx.training && ctx.store;
  stored_path_ = keep && !recompute_;
  ForwardContext inner = ctx;
  if (keep && recompute_) {
    inner.store = false;
    inner.ledger = nullptr;
  }
  BasicTensor<T> y = x;
  for (auto& l : layers_) y = l->forward(y, inner);
  if (keep && recompute_) {
    if (ctx.ledger) ctx.ledger->record(this->name(), y.size());
    output_ = y;
  } else {
    output_.reset();
  }
  return y;
}

template <typename T>
BasicTensor<T> InvertibleModule<T>::inverse(const BasicTensor<T>& y, const ForwardContext& ctx) {
  BasicTensor<T> x = y;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) x = (*it)->inverse(x, ctx);
  return x;
}

template <typename T>
BasicTensor<T> InvertibleModule<T>::backward(const BasicTensor<T>& grad_out) {
  if (stored_path_) {
    BasicTensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    stored_path_ = false;
    return g;
  }
  if (!output_) throw StateError(this->name() + ": backward without a stored training forward");
  auto y = std::move(*output_);
  output_.reset();
  return backward_from_output(y, grad_out);
}

template <typename T>
BasicTensor<T> InvertibleModule<T>::backward_from_output(const BasicTensor<T>& y_out, const BasicTensor<T>& grad_out) {
  if (y_out.dims() != grad_out.dims())
    throw ShapeError(this->name() + ": grad_out shape " + shape_string(grad_out.dims()) + " != output shape " +
                     shape_string(y_out.dims()));
  // Batch statistics, no running-stat updates: the original forward already did those.
  ForwardContext recompute;
  recompute.training = true;
  recompute.store = true;
  recompute.update_running_stats = false;
  BasicTensor<T> y = y_out;
  BasicTensor<T> g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    y = (*it)->inverse(y, recompute);  // y is now this layer's input
    g = (*it)->backward(g);
  }
  return g;
}

template <typename T>
std::vector<Param<T>*> InvertibleModule<T>::params() {
  std::vector<Param<T>*> out;
  for (auto& l : layers_)
    for (auto* p : l->params()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> InvertibleModule<T>::buffers() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  for (auto& l : layers_)
    for (auto& b : l->buffers()) out.push_back(b);
  return out;
}

template <typename T>
void InvertibleModule<T>::release() {
  for (auto& l : layers_) l->release();
  output_.reset();
  stored_path_ = false;
}

// ---------------------------------------------------------------------------

template <typename T>
BasicTensor<T> coupling_forward(const BasicTensor<T>& x, CouplingLayer<T>& layer, bool training) {
  ForwardContext ctx;
  ctx.training = training;
  ctx.store = false;
  ctx.update_running_stats = false;
  return layer.forward(x, ctx);
}

template <typename T>
BasicTensor<T> coupling_inverse(const BasicTensor<T>& y, CouplingLayer<T>& layer, bool training) {
  ForwardContext ctx;
  ctx.training = training;
  ctx.store = false;
  ctx.update_running_stats = false;
  return layer.inverse(y, ctx);
}

template <typename T>
ModuleGrads<T> invertible_module_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& y_out,
                                          InvertibleModule<T>& module) {
  for (auto* p : module.params()) p->grad.fill(T(0));
  ModuleGrads<T> out{module.backward_from_output(y_out, grad_out), {}};
  for (auto* p : module.params()) out.params.emplace_back(p->name, p->grad);
  return out;
}

#define INVNET3D_INSTANTIATE(T)                                                                                   \
  template class CouplingLayer<T>;                                                                                \
  template class InvertibleModule<T>;                                                                             \
  template BasicTensor<T> coupling_forward(const BasicTensor<T>&, CouplingLayer<T>&, bool);                       \
  template BasicTensor<T> coupling_inverse(const BasicTensor<T>&, CouplingLayer<T>&, bool);                       \
  template ModuleGrads<T> invertible_module_backward(const BasicTensor<T>&, const BasicTensor<T>&,                \
                                                     InvertibleModule<T>&);

INVNET3D_INSTANTIATE(float)
INVNET3D_INSTANTIATE(double)

#undef INVNET3D_INSTANTIATE

}  // namespace invnet3d
