#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "invnet3d/arch.hpp"

namespace invnet3d {

/// Weight elements of a (grouped) convolution: C_in * C_out * t*h*w / G.
std::uint64_t count_params(const ConvSpec& spec);

/// 2 * C_in * C_out * t*h*w * (output volume) / G. A multiply-add counts as two
/// operations; the volume is the OUTPUT extent under the shape laws, which for
/// a transposed convolution is the upsampled extent.
std::uint64_t count_flops(const ConvSpec& spec, const Dims3& input);

// Conventions for everything that is not a convolution: batch norm and the
// activation each cost one op per output element, GAP one per input element,
// shuffle and crop one per output element, each coupling addition one per
// element of the half it updates. Biases, BN affine parameters and elementwise
// ops are reported as separate line items.
struct LayerCost {
  std::string name;
  std::string kind;
  Shape output;  // C x D x H x W
  std::uint64_t weights = 0;
  std::uint64_t biases = 0;
  std::uint64_t bn_affine = 0;
  std::uint64_t conv_flops = 0;
  std::uint64_t elementwise_flops = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::uint64_t weights = 0;
  std::uint64_t biases = 0;
  std::uint64_t bn_affine = 0;
  std::uint64_t conv_flops = 0;
  std::uint64_t elementwise_flops = 0;

  /// Weight total, optionally folding biases and BN affine parameters in.
  std::uint64_t params(bool fold_extras = false) const;
  std::uint64_t flops() const { return conv_flops + elementwise_flops; }

  /// One JSON object per layer, then a totals record.
  void write_json_lines(std::ostream& os) const;
  void write_text(std::ostream& os) const;
};

/// Inference cost for batch size 1.
CostReport model_cost(const ModelPlan& plan, const InputGeometry& input);

/// Stored activations of one training step. Each plain conv block retains its
/// input; an invertible module retains only its output, whatever its depth.
/// Shuffle, GAP and crop retain nothing. `peak_elements` follows the live set
/// through the forward pass and the backward pass, including the transient
/// reconstruction inside each invertible module.
struct MemoryLedger {
  struct Event {
    std::string layer;
    std::uint64_t elements;
  };
  std::vector<Event> events;
  std::uint64_t peak_elements = 0;
  std::uint64_t total_elements = 0;

  void write_json_lines(std::ostream& os) const;
};

MemoryLedger memory_ledger(const ModelPlan& plan, const InputGeometry& input, std::size_t batch = 1);

}  // namespace invnet3d
