#include "invnet3d/accounting.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

#include <json.hpp>

#include "invnet3d/errors.hpp"

namespace invnet3d {

std::uint64_t count_params(const ConvSpec& spec) {
  spec.validate();
  return static_cast<std::uint64_t>(spec.in_channels) * static_cast<std::uint64_t>(spec.out_channels) *
         spec.kernel_volume() / static_cast<std::uint64_t>(spec.groups);
}

std::uint64_t count_flops(const ConvSpec& spec, const Dims3& input) {
  const auto out = spec.output_extent(input);
  return 2 * count_params(spec) * (out[0] * out[1] * out[2]);
}

namespace {

std::uint64_t volume(const Shape& s) { return shape_volume(s); }

Dims3 extent(const Shape& s) { return {s[1], s[2], s[3]}; }

// Conv + BN + activation at a given input shape; returns the output shape.
Shape add_conv_block(LayerCost& c, const ConvSpec& spec, bool batch_norm, Activation act, const Shape& in) {
  const auto out_ext = spec.output_extent(extent(in));
  const Shape out{static_cast<std::size_t>(spec.out_channels), out_ext[0], out_ext[1], out_ext[2]};
  c.weights += count_params(spec);
  c.conv_flops += count_flops(spec, extent(in));
  if (spec.has_bias) c.biases += static_cast<std::uint64_t>(spec.out_channels);
  if (batch_norm) {
    c.bn_affine += 2 * static_cast<std::uint64_t>(spec.out_channels);
    c.elementwise_flops += volume(out);
  }
  if (act != Activation::None) c.elementwise_flops += volume(out);
  return out;
}

}  // namespace

std::uint64_t CostReport::params(bool fold_extras) const {
  return weights + (fold_extras ? biases + bn_affine : 0);
}

CostReport model_cost(const ModelPlan& plan, const InputGeometry& input) {
  const auto shapes = infer_plan_shapes(plan, input);
  CostReport r;
  Shape cur{static_cast<std::size_t>(input.channels), input.time, input.height, input.width};
  for (std::size_t i = 0; i < plan.nodes.size(); ++i) {
    const auto& node = plan.nodes[i];
    LayerCost c;
    c.name = node.name;
    switch (node.kind) {
      case NodeKind::ConvBlock:
        c.kind = node.conv.transposed ? "deconv" : "conv";
        add_conv_block(c, node.conv, node.batch_norm, node.activation, cur);
        break;
      case NodeKind::Invertible: {
        c.kind = "invertible";
        const auto sub = node.coupling_sub_spec();
        Shape half = cur;
        half[0] /= 2;
        for (int l = 0; l < node.n_layers; ++l) {
          add_conv_block(c, sub, node.batch_norm, node.activation, half);  // f
          add_conv_block(c, sub, node.batch_norm, node.activation, half);  // g
          c.elementwise_flops += 2 * volume(half);                        // two additions
        }
        break;
      }
      case NodeKind::Shuffle:
        c.kind = "shuffle";
        c.elementwise_flops = volume(cur);
        break;
      case NodeKind::Gap:
        c.kind = "gap";
        c.elementwise_flops = volume(cur);
        break;
      case NodeKind::Crop:
        c.kind = "crop";
        c.elementwise_flops = volume(shapes[i].shape);
        break;
    }
    c.output = shapes[i].shape;
    cur = shapes[i].shape;
    r.weights += c.weights;
    r.biases += c.biases;
    r.bn_affine += c.bn_affine;
    r.conv_flops += c.conv_flops;
    r.elementwise_flops += c.elementwise_flops;
    r.layers.push_back(std::move(c));
  }
  return r;
}

void CostReport::write_json_lines(std::ostream& os) const {
  for (const auto& l : layers) {
    nlohmann::json j{{"record", "layer"},
                     {"name", l.name},
                     {"kind", l.kind},
                     {"output", l.output},
                     {"weights", l.weights},
                     {"biases", l.biases},
                     {"bn_affine", l.bn_affine},
                     {"conv_flops", l.conv_flops},
                     {"elementwise_flops", l.elementwise_flops}};
    os << j.dump() << '\n';
  }
  nlohmann::json t{{"record", "totals"},
                   {"weights", weights},
                   {"biases", biases},
                   {"bn_affine", bn_affine},
                   {"params_folded", params(true)},
                   {"conv_flops", conv_flops},
                   {"elementwise_flops", elementwise_flops},
                   {"flops", flops()},
                   {"gflops", static_cast<double>(flops()) / 1e9}};
  os << t.dump() << '\n';
}

void CostReport::write_text(std::ostream& os) const {
  os << std::left << std::setw(24) << "layer" << std::setw(12) << "kind" << std::setw(20) << "output" << std::right
     << std::setw(14) << "weights" << std::setw(18) << "flops" << '\n';
  for (const auto& l : layers)
    os << std::left << std::setw(24) << l.name << std::setw(12) << l.kind << std::setw(20) << shape_string(l.output)
       << std::right << std::setw(14) << l.weights << std::setw(18) << (l.conv_flops + l.elementwise_flops) << '\n';
  os << "weights " << weights << "  biases " << biases << "  bn_affine " << bn_affine << '\n';
  os << std::fixed << std::setprecision(2) << "params " << static_cast<double>(weights) / 1e6 << "M  GFLOPs "
     << static_cast<double>(flops()) / 1e9 << '\n';
}

MemoryLedger memory_ledger(const ModelPlan& plan, const InputGeometry& input, std::size_t batch) {
  const auto shapes = infer_plan_shapes(plan, input);
  MemoryLedger ledger;
  Shape cur{static_cast<std::size_t>(input.channels), input.time, input.height, input.width};
  // Per node: elements retained through backward, and transient extra while
  // that node runs its backward.
  std::vector<std::uint64_t> retained(plan.nodes.size(), 0), transient(plan.nodes.size(), 0);
  std::uint64_t live = 0;
  for (std::size_t i = 0; i < plan.nodes.size(); ++i) {
    const auto& node = plan.nodes[i];
    const std::uint64_t in_elems = volume(cur) * batch;
    const std::uint64_t out_elems = volume(shapes[i].shape) * batch;
    if (node.kind == NodeKind::ConvBlock) {
      retained[i] = in_elems;
    } else if (node.kind == NodeKind::Invertible) {
      retained[i] = out_elems;
      // Reconstructed layer input plus the two half-size inputs f and g keep.
      transient[i] = out_elems + out_elems;
    }
    if (retained[i] > 0) {
      ledger.events.push_back({node.name, retained[i]});
      live += retained[i];
      ledger.peak_elements = std::max(ledger.peak_elements, live);
    }
    cur = shapes[i].shape;
  }
  ledger.total_elements = live;
  for (std::size_t i = plan.nodes.size(); i-- > 0;) {
    ledger.peak_elements = std::max(ledger.peak_elements, live + transient[i]);
    live -= retained[i];
  }
  return ledger;
}

void MemoryLedger::write_json_lines(std::ostream& os) const {
  for (const auto& e : events) os << nlohmann::json{{"record", "stored"}, {"layer", e.layer}, {"elements", e.elements}}.dump() << '\n';
  os << nlohmann::json{{"record", "totals"}, {"total_elements", total_elements}, {"peak_elements", peak_elements}}.dump()
     << '\n';
}

}  // namespace invnet3d
