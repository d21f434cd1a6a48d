#include "invnet3d/arch.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "invnet3d/errors.hpp"

namespace invnet3d {

std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv:
      return "conv";
    case LayerKind::Deconv:
      return "deconv";
    case LayerKind::Gap:
      return "gap";
    case LayerKind::Shuffle:
      return "shuffle";
    case LayerKind::Crop:
      return "crop";
  }
  return "conv";
}

LayerKind parse_layer_kind(const std::string& s) {
  if (s == "conv") return LayerKind::Conv;
  if (s == "deconv") return LayerKind::Deconv;
  if (s == "gap") return LayerKind::Gap;
  if (s == "shuffle") return LayerKind::Shuffle;
  if (s == "crop") return LayerKind::Crop;
  throw FormatError("unknown layer kind '" + s + "'");
}

namespace {

LayerSpec conv_layer(const std::string& block, Triple k, Triple s, int c, bool encoder,
                     Activation act = Activation::LeakyRelu) {
  LayerSpec l;
  l.block = block;
  l.kind = LayerKind::Conv;
  l.kernel = k;
  l.stride = s;
  l.out_channels = c;
  l.activation = act;
  l.encoder = encoder;
  return l;
}

LayerSpec deconv_layer(const std::string& block, Triple k, Triple s, int c) {
  LayerSpec l = conv_layer(block, k, s, c, false);
  l.kind = LayerKind::Deconv;
  return l;
}

bool is_conv_like(LayerKind k) { return k == LayerKind::Conv || k == LayerKind::Deconv; }

// Names follow the block_index convention: enc.conv1_1, enc.conv1_2, enc.conv7.
std::vector<std::string> layer_names(const std::vector<LayerSpec>& layers) {
  std::vector<std::string> names(layers.size());
  for (std::size_t i = 0; i < layers.size();) {
    std::size_t j = i;
    while (j < layers.size() && layers[j].block == layers[i].block && layers[j].encoder == layers[i].encoder) ++j;
    const std::string prefix = layers[i].encoder ? "enc." : "dec.";
    for (std::size_t k = i; k < j; ++k)
      names[k] = prefix + layers[k].block + (j - i > 1 ? "_" + std::to_string(k - i + 1) : "");
    i = j;
  }
  return names;
}

// Position of each layer inside its block.
std::vector<std::size_t> block_positions(const std::vector<LayerSpec>& layers) {
  std::vector<std::size_t> pos(layers.size(), 0);
  for (std::size_t i = 1; i < layers.size(); ++i)
    if (layers[i].block == layers[i - 1].block && layers[i].encoder == layers[i - 1].encoder) pos[i] = pos[i - 1] + 1;
  return pos;
}

ConvSpec spec_for(const LayerSpec& l, int in_channels, bool has_bias = true) {
  ConvSpec s;
  s.in_channels = in_channels;
  s.out_channels = l.out_channels;
  s.kernel = l.kernel;
  s.stride = l.stride;
  s.groups = l.groups;
  s.has_bias = has_bias;
  s.transposed = l.kind == LayerKind::Deconv;
  return s;
}

Dims3 extent_of(const Shape& s) { return {s[1], s[2], s[3]}; }

Shape apply_conv(const std::string& name, const ConvSpec& spec, const Shape& in) {
  try {
    spec.validate();
  } catch (const SpecError& e) {
    throw SpecError("layer " + name + ": " + e.what());
  }
  if (static_cast<int>(in[0]) != spec.in_channels)
    throw ShapeError("layer " + name + ": expects " + std::to_string(spec.in_channels) + " input channels, got " +
                     std::to_string(in[0]));
  const auto out = spec.output_extent(extent_of(in));
  return {static_cast<std::size_t>(spec.out_channels), out[0], out[1], out[2]};
}

Shape apply_crop(const std::string& name, const Dims3& target, const Shape& in) {
  static const char* axis[] = {"depth", "height", "width"};
  for (int a = 0; a < 3; ++a)
    if (target[a] == 0 || target[a] > in[a + 1])
      throw ShapeError("layer " + name + ": crop target " + std::to_string(target[a]) + " exceeds input " +
                       axis[a] + " " + std::to_string(in[a + 1]));
  return {in[0], target[0], target[1], target[2]};
}

Shape apply_shuffle(const std::string& name, int groups, const Shape& in) {
  if (groups < 1 || in[0] % static_cast<std::size_t>(groups) != 0)
    throw SpecError("layer " + name + ": " + std::to_string(in[0]) + " channels not divisible by shuffle groups " +
                    std::to_string(groups));
  return in;
}

Triple parse_triple(const std::string& s) {
  Triple t{};
  char x1 = 0, x2 = 0;
  std::istringstream is(s);
  if (!(is >> t[0] >> x1 >> t[1] >> x2 >> t[2]) || x1 != 'x' || x2 != 'x')
    throw FormatError("expected AxBxC, got '" + s + "'");
  return t;
}

Dims3 to_dims3(const Triple& t) {
  for (int v : t)
    if (v < 1) throw FormatError("dims must be positive");
  return {static_cast<std::size_t>(t[0]), static_cast<std::size_t>(t[1]), static_cast<std::size_t>(t[2])};
}

}  // namespace

// ---------------------------------------------------------------------------
// Profiles

ArchProfile paper_profile(InputGeometry input) {
  ArchProfile p;
  p.input = input;
  p.output = {350, 400, 400};
  const Triple k3{3, 3, 3}, s1{1, 1, 1};
  auto& L = p.layers;
  L.push_back(conv_layer("conv1", {7, 3, 3}, {3, 1, 1}, 64, true));
  L.push_back(conv_layer("conv1", k3, s1, 64, true));
  L.push_back(conv_layer("conv2", k3, {2, 1, 1}, 64, true));
  L.push_back(conv_layer("conv2", k3, s1, 64, true));
  L.push_back(conv_layer("conv3", k3, {2, 2, 2}, 128, true));
  L.push_back(conv_layer("conv3", k3, s1, 128, true));
  L.push_back(conv_layer("conv4", k3, {2, 1, 1}, 128, true));
  L.push_back(conv_layer("conv4", k3, s1, 128, true));
  L.push_back(conv_layer("conv5", k3, {2, 2, 2}, 256, true));
  L.push_back(conv_layer("conv5", k3, s1, 256, true));
  L.push_back(conv_layer("conv6", k3, {2, 1, 1}, 512, true));
  L.push_back(conv_layer("conv6", k3, s1, 512, true));
  L.push_back(conv_layer("conv7", k3, {2, 2, 2}, 512, true));
  LayerSpec gap;
  gap.block = "gap";
  gap.kind = LayerKind::Gap;
  gap.activation = Activation::None;
  L.push_back(gap);
  L.push_back(deconv_layer("conv1", {4, 4, 4}, {2, 2, 2}, 256));
  L.push_back(conv_layer("conv1", k3, s1, 256, false));
  L.push_back(deconv_layer("conv2", {4, 4, 4}, {2, 2, 2}, 128));
  L.push_back(conv_layer("conv2", k3, s1, 128, false));
  L.push_back(deconv_layer("conv3", {4, 4, 4}, {2, 2, 2}, 64));
  L.push_back(conv_layer("conv3", k3, s1, 64, false));
  L.push_back(deconv_layer("conv4", {5, 4, 4}, {3, 2, 2}, 32));
  L.push_back(conv_layer("conv4", k3, s1, 32, false));
  L.push_back(deconv_layer("conv5", {5, 7, 7}, {3, 5, 5}, 16));
  L.push_back(conv_layer("conv5", k3, s1, 16, false));
  L.push_back(deconv_layer("conv6", {7, 7, 7}, {5, 5, 5}, 4));
  L.push_back(conv_layer("conv6", k3, s1, 4, false));
  L.push_back(conv_layer("conv7", k3, s1, 1, false, Activation::Tanh));
  LayerSpec crop;
  crop.block = "crop";
  crop.kind = LayerKind::Crop;
  crop.crop = p.output;
  crop.encoder = false;
  crop.activation = Activation::None;
  L.push_back(crop);
  return p;
}

ArchProfile desk_profile(int channel_divisor, InputGeometry input, Dims3 output) {
  if (channel_divisor < 1) throw SpecError("channel divisor must be >= 1");
  ArchProfile p = paper_profile(input);
  p.channel_divisor = channel_divisor;
  if (channel_divisor == 1 && output == p.output) {
    p.validate();
    return p;
  }
  const std::size_t last = p.layers.size() - 2;  // the 1-channel head
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    if (!is_conv_like(l.kind)) continue;
    if (i == last) continue;
    if (l.out_channels % channel_divisor == 0) {
      l.out_channels = std::max(2, l.out_channels / channel_divisor);
    } else if (l.out_channels < channel_divisor) {
      l.out_channels = 2;
    } else {
      throw SpecError("channel divisor " + std::to_string(channel_divisor) + " does not divide width " +
                      std::to_string(l.out_channels) + " of " + (l.encoder ? "encoder " : "decoder ") + l.block);
    }
  }
  // The last three deconvs set the output volume. Reduce their strides from the
  // back so the decoder reaches `output` with the least upsampling.
  std::vector<std::size_t> ups;
  for (std::size_t i = 0; i < p.layers.size(); ++i)
    if (p.layers[i].kind == LayerKind::Deconv) ups.push_back(i);
  if (ups.size() < 3) throw SpecError("desk_profile: expected at least three deconv layers");
  const std::vector<std::size_t> tail(ups.end() - 3, ups.end());
  // Extent entering the first reducible deconv: decoder starts from 1x1x1.
  Dims3 base{1, 1, 1};
  for (std::size_t idx : ups) {
    if (idx == tail.front()) break;
    for (int a = 0; a < 3; ++a) base[a] *= static_cast<std::size_t>(p.layers[idx].stride[a]);
  }
  for (int a = 0; a < 3; ++a) {
    for (auto it = tail.rbegin(); it != tail.rend(); ++it) {
      auto& l = p.layers[*it];
      const int margin = l.kernel[a] - l.stride[a];
      std::size_t others = base[a];
      for (std::size_t j : tail)
        if (j != *it) others *= static_cast<std::size_t>(p.layers[j].stride[a]);
      int s = 1;
      while (s < l.stride[a] && others * static_cast<std::size_t>(s) < output[a]) ++s;
      l.stride[a] = s;
      l.kernel[a] = s + margin;
    }
    std::size_t reach = base[a];
    for (std::size_t j : tail) reach *= static_cast<std::size_t>(p.layers[j].stride[a]);
    if (reach < output[a])
      throw SpecError("desk_profile: decoder cannot reach output extent " + std::to_string(output[a]));
  }
  p.output = output;
  p.layers.back().crop = output;
  p.validate();
  return p;
}

void ArchProfile::validate() const { (void)infer_shapes(*this, input); }

std::vector<NamedShape> infer_shapes(const ArchProfile& profile, const InputGeometry& input) {
  if (input.channels < 1 || input.time < 1 || input.height < 1 || input.width < 1)
    throw ShapeError("input geometry must be positive");
  const auto names = layer_names(profile.layers);
  std::vector<NamedShape> out;
  Shape cur{static_cast<std::size_t>(input.channels), input.time, input.height, input.width};
  for (std::size_t i = 0; i < profile.layers.size(); ++i) {
    const auto& l = profile.layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Deconv:
        cur = apply_conv(names[i], spec_for(l, static_cast<int>(cur[0])), cur);
        break;
      case LayerKind::Gap:
        cur = {cur[0], 1, 1, 1};
        break;
      case LayerKind::Shuffle:
        cur = apply_shuffle(names[i], l.groups, cur);
        break;
      case LayerKind::Crop:
        cur = apply_crop(names[i], l.crop, cur);
        break;
    }
    out.push_back({names[i], cur});
  }
  return out;
}

void save_profile(std::ostream& os, const ArchProfile& p) {
  os << "# invnet3d architecture profile\n";
  os << "# section block kind kernel stride channels groups activation\n";
  os << "input " << p.input.channels << ' ' << p.input.time << ' ' << p.input.height << ' ' << p.input.width << '\n';
  os << "output " << p.output[0] << ' ' << p.output[1] << ' ' << p.output[2] << '\n';
  os << "divisor " << p.channel_divisor << '\n';
  for (const auto& l : p.layers) {
    os << (l.encoder ? "encoder" : "decoder") << ' ' << l.block << ' ' << layer_kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
      case LayerKind::Deconv:
        os << ' ' << triple_string(l.kernel) << ' ' << triple_string(l.stride) << ' ' << l.out_channels << ' '
           << l.groups << ' ' << activation_name(l.activation);
        break;
      case LayerKind::Shuffle:
        os << ' ' << l.groups;
        break;
      case LayerKind::Crop:
        os << ' ' << dims3_string(l.crop);
        break;
      case LayerKind::Gap:
        break;
    }
    os << '\n';
  }
}

ArchProfile load_profile(std::istream& is) {
  ArchProfile p;
  p.layers.clear();
  std::string line;
  int lineno = 0;
  bool have_input = false, have_output = false;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string head;
    if (!(ls >> head)) continue;
    auto fail = [&](const std::string& why) {
      throw FormatError("profile line " + std::to_string(lineno) + ": " + why);
    };
    try {
      if (head == "input") {
        if (!(ls >> p.input.channels >> p.input.time >> p.input.height >> p.input.width)) fail("bad input line");
        have_input = true;
      } else if (head == "output") {
        if (!(ls >> p.output[0] >> p.output[1] >> p.output[2])) fail("bad output line");
        have_output = true;
      } else if (head == "divisor") {
        if (!(ls >> p.channel_divisor)) fail("bad divisor line");
      } else if (head == "encoder" || head == "decoder") {
        LayerSpec l;
        l.encoder = head == "encoder";
        std::string kind;
        if (!(ls >> l.block >> kind)) fail("missing block or kind");
        l.kind = parse_layer_kind(kind);
        l.activation = Activation::None;
        if (is_conv_like(l.kind)) {
          std::string k, s, act;
          if (!(ls >> k >> s >> l.out_channels >> l.groups >> act)) fail("conv layers need kernel stride channels groups activation");
          l.kernel = parse_triple(k);
          l.stride = parse_triple(s);
          l.activation = parse_activation(act);
        } else if (l.kind == LayerKind::Shuffle) {
          if (!(ls >> l.groups)) fail("shuffle needs a group count");
        } else if (l.kind == LayerKind::Crop) {
          std::string t;
          if (!(ls >> t)) fail("crop needs a target DxHxW");
          l.crop = to_dims3(parse_triple(t));
        }
        p.layers.push_back(l);
      } else {
        fail("unknown directive '" + head + "'");
      }
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }
  if (!have_input || !have_output) throw FormatError("profile needs both input and output lines");
  p.validate();
  return p;
}

void save_profile(const std::filesystem::path& path, const ArchProfile& profile) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write profile " + path.string());
  save_profile(os, profile);
}

ArchProfile load_profile(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read profile " + path.string());
  return load_profile(is);
}

// ---------------------------------------------------------------------------
// Variants

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::S:
      return "invnet3ds";
    case Variant::I:
      return "invnet3di";
    case Variant::G:
      return "invnet3dg";
    case Variant::Full:
      return "invnet3d";
  }
  return "invnet3ds";
}

Variant parse_variant(const std::string& s) {
  std::string l = s;
  std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
  if (l == "invnet3ds") return Variant::S;
  if (l == "invnet3di") return Variant::I;
  if (l == "invnet3dg") return Variant::G;
  if (l == "invnet3d") return Variant::Full;
  throw ArgumentError("unknown variant '" + s + "' (expected one of invnet3ds, invnet3di, invnet3dg, invnet3d)");
}

bool has_group_encoder(Variant v) { return v == Variant::G || v == Variant::Full; }
bool has_invertible(Variant v) { return v == Variant::I || v == Variant::Full; }

ConvSpec PlanNode::coupling_sub_spec() const {
  ConvSpec s;
  s.in_channels = s.out_channels = channels / 2;
  s.kernel = {3, 3, 3};
  s.groups = sub_groups;
  s.has_bias = conv.has_bias;
  return s;
}

std::size_t ModelPlan::layer_count() const {
  std::size_t n = 0;
  for (const auto& node : nodes) {
    if (node.kind == NodeKind::ConvBlock) n += 1;
    if (node.kind == NodeKind::Invertible) n += static_cast<std::size_t>(node.n_layers);
  }
  return n;
}

ModelPlan build_model(Variant variant, const ArchProfile& profile, int in_channels, ModelOptions options) {
  if (options.n_blocks < 1) throw ArgumentError("n_blocks must be >= 1");
  if (in_channels < 1) throw ArgumentError("in_channels must be >= 1");
  const bool grouped = has_group_encoder(variant);
  const bool invertible = has_invertible(variant);
  if (variant == Variant::Full && in_channels % 2 != 0)
    throw SpecError("invnet3d needs an even encoder group size, got " + std::to_string(in_channels));

  const auto names = layer_names(profile.layers);
  const auto pos = block_positions(profile.layers);
  std::size_t last_encoder_conv = profile.layers.size();
  for (std::size_t i = 0; i < profile.layers.size(); ++i)
    if (profile.layers[i].encoder && is_conv_like(profile.layers[i].kind)) last_encoder_conv = i;

  ModelPlan plan;
  plan.variant = grouped ? Variant::G : Variant::S;
  plan.n_blocks = invertible ? 1 : options.n_blocks;
  plan.in_channels = in_channels;
  int channels = in_channels;

  for (std::size_t i = 0; i < profile.layers.size(); ++i) {
    const auto& l = profile.layers[i];
    PlanNode node;
    node.name = names[i];
    node.block = (l.encoder ? "enc." : "dec.") + l.block;
    node.encoder = l.encoder;
    switch (l.kind) {
      case LayerKind::Gap:
        node.kind = NodeKind::Gap;
        plan.nodes.push_back(node);
        continue;
      case LayerKind::Crop:
        node.kind = NodeKind::Crop;
        node.crop = l.crop;
        plan.nodes.push_back(node);
        continue;
      case LayerKind::Shuffle:
        node.kind = NodeKind::Shuffle;
        node.shuffle_groups = l.groups;
        plan.nodes.push_back(node);
        continue;
      case LayerKind::Conv:
      case LayerKind::Deconv:
        break;
    }
    node.kind = NodeKind::ConvBlock;
    node.activation = l.activation;
    node.conv = spec_for(l, channels, options.has_bias);
    const bool group_this = grouped && l.encoder;
    const bool depthwise = group_this && i == last_encoder_conv;
    if (depthwise) {
      node.conv.groups = channels;
    } else if (group_this) {
      node.conv.groups = in_channels;
    }
    try {
      node.conv.validate();
    } catch (const SpecError& e) {
      throw SpecError("layer " + node.name + ": " + e.what());
    }
    node.block_second = pos[i] == 1;
    const int repeats = node.block_second && !invertible ? options.n_blocks : 1;
    for (int r = 0; r < repeats; ++r) {
      PlanNode copy = node;
      if (repeats > 1) copy.name += "." + std::to_string(r);
      plan.nodes.push_back(copy);
      if (group_this && !depthwise) {
        PlanNode sh;
        sh.kind = NodeKind::Shuffle;
        sh.name = copy.name + ".shuffle";
        sh.block = node.block;
        sh.encoder = true;
        sh.shuffle_groups = in_channels;
        sh.block_second = node.block_second;
        plan.nodes.push_back(sh);
      }
    }
    channels = l.out_channels;
  }
  if (invertible) return insert_invertible_modules(plan, options.n_blocks);
  plan.variant = variant;
  return plan;
}

ModelPlan insert_invertible_modules(const ModelPlan& plan, int n_blocks) {
  if (n_blocks < 1) throw ArgumentError("n_blocks must be >= 1");
  ModelPlan out;
  out.in_channels = plan.in_channels;
  out.n_blocks = n_blocks;
  out.variant = has_group_encoder(plan.variant) ? Variant::Full : Variant::I;
  for (std::size_t i = 0; i < plan.nodes.size();) {
    const auto& node = plan.nodes[i];
    if (!(node.block_second && node.kind == NodeKind::ConvBlock)) {
      out.nodes.push_back(node);
      ++i;
      continue;
    }
    const auto& c = node.conv;
    if (c.transposed || c.stride != Triple{1, 1, 1} || c.in_channels != c.out_channels)
      throw SpecError("structural error: layer " + node.name + " changes shape and cannot host an invertible module");
    if (c.in_channels % 2 != 0)
      throw SpecError("layer " + node.name + ": odd channel count " + std::to_string(c.in_channels) +
                      " cannot be split for coupling");
    // Swallow the whole slot: consecutive second-layer convs and their shuffles.
    std::size_t j = i;
    bool trailing_shuffle = false;
    int shuffle_groups = 1;
    while (j < plan.nodes.size() && plan.nodes[j].block == node.block && plan.nodes[j].block_second) {
      if (plan.nodes[j].kind == NodeKind::Shuffle) {
        trailing_shuffle = true;
        shuffle_groups = plan.nodes[j].shuffle_groups;
      }
      ++j;
    }
    PlanNode inv;
    inv.kind = NodeKind::Invertible;
    inv.name = node.block + "_2";
    inv.block = node.block;
    inv.encoder = node.encoder;
    inv.block_second = true;
    inv.channels = c.in_channels;
    inv.n_layers = n_blocks;
    inv.activation = node.activation;
    inv.batch_norm = node.batch_norm;
    inv.conv = c;
    if (c.groups == 1) {
      inv.sub_groups = 1;
    } else if (c.groups % 2 == 0) {
      inv.sub_groups = c.groups / 2;
    } else {
      throw SpecError("layer " + node.name + ": odd group size " + std::to_string(c.groups) +
                      " cannot be halved for coupling sub-layers");
    }
    try {
      inv.coupling_sub_spec().validate();
    } catch (const SpecError& e) {
      throw SpecError("layer " + inv.name + ": " + e.what());
    }
    out.nodes.push_back(inv);
    if (trailing_shuffle) {
      PlanNode sh;
      sh.kind = NodeKind::Shuffle;
      sh.name = inv.name + ".shuffle";
      sh.block = node.block;
      sh.encoder = node.encoder;
      sh.shuffle_groups = shuffle_groups;
      out.nodes.push_back(sh);
    }
    i = j;
  }
  return out;
}

std::vector<NamedShape> infer_plan_shapes(const ModelPlan& plan, const InputGeometry& input) {
  std::vector<NamedShape> out;
  Shape cur{static_cast<std::size_t>(input.channels), input.time, input.height, input.width};
  for (const auto& node : plan.nodes) {
    switch (node.kind) {
      case NodeKind::ConvBlock:
        cur = apply_conv(node.name, node.conv, cur);
        break;
      case NodeKind::Invertible:
        if (static_cast<int>(cur[0]) != node.channels)
          throw ShapeError("layer " + node.name + ": expects " + std::to_string(node.channels) + " channels, got " +
                           std::to_string(cur[0]));
        break;
      case NodeKind::Shuffle:
        cur = apply_shuffle(node.name, node.shuffle_groups, cur);
        break;
      case NodeKind::Gap:
        cur = {cur[0], 1, 1, 1};
        break;
      case NodeKind::Crop:
        cur = apply_crop(node.name, node.crop, cur);
        break;
    }
    out.push_back({node.name, cur});
  }
  return out;
}

}  // namespace invnet3d
