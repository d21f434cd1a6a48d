#include "invnet3d/model.hpp"

#include <fstream>
#include <map>

#include "invnet3d/errors.hpp"

namespace invnet3d {

template <typename T>
Network<T>::Network(ModelPlan plan, Rng& rng, BatchNormConfig bn) : plan_(std::move(plan)) {
  for (const auto& node : plan_.nodes) {
    switch (node.kind) {
      case NodeKind::ConvBlock:
        layers_.push_back(std::make_unique<ConvBlock<T>>(node.name, node.conv, node.batch_norm, node.activation, rng, bn));
        break;
      case NodeKind::Invertible:
        layers_.push_back(std::make_unique<InvertibleModule<T>>(node.name, node.channels, node.n_layers, node.sub_groups,
                                                                node.batch_norm, node.activation, rng, bn));
        break;
      case NodeKind::Shuffle:
        layers_.push_back(std::make_unique<ShuffleLayer<T>>(node.name, node.shuffle_groups));
        break;
      case NodeKind::Gap:
        layers_.push_back(std::make_unique<GapLayer<T>>(node.name));
        break;
      case NodeKind::Crop:
        layers_.push_back(std::make_unique<CropLayer<T>>(node.name, node.crop));
        break;
    }
  }
}

template <typename T>
BasicTensor<T> Network<T>::forward(const BasicTensor<T>& x, const ForwardContext& ctx) {
  if (x.rank() != 5 || static_cast<int>(x.dim(1)) != plan_.in_channels)
    throw ShapeError("network expects N x " + std::to_string(plan_.in_channels) + " x T x H x W input, got " +
                     shape_string(x.dims()));
  BasicTensor<T> y = x;
  for (auto& l : layers_) y = l->forward(y, ctx);
  return y;
}

template <typename T>
BasicTensor<T> Network<T>::backward(const BasicTensor<T>& grad_out) {
  BasicTensor<T> g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <typename T>
std::vector<Param<T>*> Network<T>::params() {
  std::vector<Param<T>*> out;
  for (auto& l : layers_)
    for (auto* p : l->params()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> Network<T>::buffers() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> out;
  for (auto& l : layers_)
    for (auto& b : l->buffers()) out.push_back(b);
  return out;
}

template <typename T>
void Network<T>::zero_grad() {
  for (auto* p : params()) p->grad.fill(T(0));
}

template <typename T>
void Network<T>::release() {
  for (auto& l : layers_) l->release();
}

template <typename T>
std::size_t Network<T>::parameter_count() {
  std::size_t n = 0;
  for (auto* p : params()) n += p->value.size();
  return n;
}

template <typename T>
void Network<T>::save(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "params.manifest", std::ios::trunc);
  if (!manifest) throw FormatError("cannot write " + (dir / "params.manifest").string());
  std::size_t index = 0;
  auto next_file = [&] { return "t" + std::to_string(index++) + ".rvt"; };
  for (auto* p : params()) {
    const auto f = next_file();
    save_rvt1(dir / f, p->value);
    manifest << "param " << p->name << ' ' << f << '\n';
  }
  for (auto& [name, t] : buffers()) {
    const auto f = next_file();
    save_rvt1(dir / f, *t);
    manifest << "buffer " << name << ' ' << f << '\n';
  }
}

template <typename T>
void Network<T>::load(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "params.manifest");
  if (!manifest) throw FormatError("cannot read " + (dir / "params.manifest").string());
  std::map<std::string, std::string> files;
  std::string kind, name, file;
  while (manifest >> kind >> name >> file) files[kind + ":" + name] = file;
  auto fetch = [&](const std::string& key, BasicTensor<T>& dst) {
    auto it = files.find(key);
    if (it == files.end()) throw FormatError("checkpoint is missing " + key);
    auto t = load_rvt1<T>(dir / it->second);
    if (t.dims() != dst.dims())
      throw ShapeError("checkpoint tensor " + key + " has shape " + shape_string(t.dims()) + ", model expects " +
                       shape_string(dst.dims()));
    dst = std::move(t);
  };
  for (auto* p : params()) fetch("param:" + p->name, p->value);
  for (auto& [n, t] : buffers()) fetch("buffer:" + n, *t);
}

template class Network<float>;
template class Network<double>;

}  // namespace invnet3d
