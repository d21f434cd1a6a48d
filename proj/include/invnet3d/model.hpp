#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "invnet3d/arch.hpp"
#include "invnet3d/invertible.hpp"

namespace invnet3d {

/// Runtime network instantiated from a ModelPlan. Inputs are N x C x T x H x W,
/// outputs N x 1 x D x H x W.
template <typename T>
class Network {
 public:
  Network(ModelPlan plan, Rng& rng, BatchNormConfig bn = {});

  BasicTensor<T> forward(const BasicTensor<T>& x, const ForwardContext& ctx);
  BasicTensor<T> backward(const BasicTensor<T>& grad_out);

  std::vector<Param<T>*> params();
  std::vector<std::pair<std::string, BasicTensor<T>*>> buffers();
  void zero_grad();
  void release();

  const ModelPlan& plan() const { return plan_; }
  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  std::size_t parameter_count();

  /// Parameters and buffers as RVT1 files plus a plain-text manifest
  /// (`params.manifest`: one "<kind> <name> <file>" line per tensor, in order).
  void save(const std::filesystem::path& dir);
  void load(const std::filesystem::path& dir);

 private:
  ModelPlan plan_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

}  // namespace invnet3d
