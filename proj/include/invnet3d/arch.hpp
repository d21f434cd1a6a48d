#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "invnet3d/layers.hpp"

namespace invnet3d {

// ---------------------------------------------------------------------------
// Declarative architecture profile (the plain, ungrouped topology).

enum class LayerKind { Conv, Deconv, Gap, Shuffle, Crop };
std::string layer_kind_name(LayerKind k);
LayerKind parse_layer_kind(const std::string& s);

struct LayerSpec {
  std::string block;  // layers sharing a block name form one conv/deconv block
  LayerKind kind = LayerKind::Conv;
  Triple kernel{1, 1, 1};
  Triple stride{1, 1, 1};
  int out_channels = 0;
  int groups = 1;
  Activation activation = Activation::LeakyRelu;
  Dims3 crop{};  // Crop only
  bool encoder = true;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Input is C x T x H x W seismic data; output is a D x H x W velocity volume.
struct InputGeometry {
  int channels = 8;
  std::size_t time = 896;
  std::size_t height = 40;
  std::size_t width = 40;

  friend bool operator==(const InputGeometry&, const InputGeometry&) = default;
};

struct ArchProfile {
  std::vector<LayerSpec> layers;  // encoder layers then decoder layers
  InputGeometry input;
  Dims3 output{};
  int channel_divisor = 1;

  /// Throws SpecError naming the first layer whose input is illegal.
  void validate() const;

  friend bool operator==(const ArchProfile&, const ArchProfile&) = default;
};

/// The full-scale plain network (13 encoder + 13 decoder layers, GAP
/// bottleneck, tanh head, center crop to 350 x 400 x 400).
ArchProfile paper_profile(InputGeometry input = {});

/// Same topology with channel widths divided by `channel_divisor`. Widths
/// that would drop below 2 (the smallest width a coupling layer can split)
/// are clamped to 2, except the 1-channel output layer. The last three
/// upsampling strides are reduced, per axis, to the smallest values that still
/// reach `output`; kernels keep the full-scale (kernel - stride) margin.
ArchProfile desk_profile(int channel_divisor, InputGeometry input, Dims3 output);

struct NamedShape {
  std::string name;
  Shape shape;  // C x D x H x W (no batch axis)
};

/// Symbolic shape chain over the plain topology.
std::vector<NamedShape> infer_shapes(const ArchProfile& profile, const InputGeometry& input);

void save_profile(std::ostream& os, const ArchProfile& profile);
ArchProfile load_profile(std::istream& is);
void save_profile(const std::filesystem::path& path, const ArchProfile& profile);
ArchProfile load_profile(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Model variants and plans.

enum class Variant { S, I, G, Full };
std::string variant_name(Variant v);
/// Accepts invnet3ds | invnet3di | invnet3dg | invnet3d (case-insensitive).
Variant parse_variant(const std::string& s);
bool has_group_encoder(Variant v);
bool has_invertible(Variant v);

enum class NodeKind { ConvBlock, Invertible, Shuffle, Gap, Crop };

struct PlanNode {
  std::string name;
  std::string block;
  NodeKind kind = NodeKind::ConvBlock;
  bool encoder = true;
  ConvSpec conv;  // ConvBlock only
  bool batch_norm = true;
  Activation activation = Activation::LeakyRelu;
  // Invertible only
  int channels = 0;
  int n_layers = 0;
  int sub_groups = 1;
  // Shuffle only
  int shuffle_groups = 1;
  // Crop only
  Dims3 crop{};
  // Marks the stride-1 second layer of a block (the invertible slot).
  bool block_second = false;

  /// f and g of each coupling layer in an Invertible node.
  ConvSpec coupling_sub_spec() const;
};

struct ModelOptions {
  int n_blocks = 1;
  bool has_bias = true;
};

struct ModelPlan {
  Variant variant = Variant::S;
  int n_blocks = 1;
  int in_channels = 8;
  std::vector<PlanNode> nodes;

  /// Convolution-like layers; a coupling layer counts as one.
  std::size_t layer_count() const;
};

/// S: plain convs. G: encoder convs grouped with group size = in_channels,
/// channel shuffle after each grouped conv but the last, final encoder conv
/// depthwise. I: S with invertible modules in every block's second slot.
/// Full: G with invertible modules whose f/g use group size in_channels/2 in
/// the encoder. With n_blocks > 1, S and G stack n plain layers in that slot.
ModelPlan build_model(Variant variant, const ArchProfile& profile, int in_channels, ModelOptions options = {});

/// Replaces each block-second ConvBlock in the plan by an invertible module of
/// n_blocks coupling layers. Encoder modules following grouped convs use
/// half the encoder group size for f and g.
ModelPlan insert_invertible_modules(const ModelPlan& plan, int n_blocks);

/// Per-node output shapes (C x D x H x W) for a plan.
std::vector<NamedShape> infer_plan_shapes(const ModelPlan& plan, const InputGeometry& input);

}  // namespace invnet3d
