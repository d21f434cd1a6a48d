#include "invnet3d/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "invnet3d/errors.hpp"

namespace invnet3d {

namespace {

template <typename T>
void require_same(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* what) {
  if (a.dims() != b.dims())
    throw ShapeError(std::string(what) + ": shapes " + shape_string(a.dims()) + " and " + shape_string(b.dims()) +
                     " differ");
}

}  // namespace

template <typename T>
double l1_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same(pred, target, "l1_loss");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(static_cast<double>(pred[i]) - target[i]);
  return s / static_cast<double>(pred.size());
}

template <typename T>
BasicTensor<T> l1_loss_backward(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same(pred, target, "l1_loss");
  BasicTensor<T> g(pred.dims());
  const T inv = T(1) / static_cast<T>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    g[i] = pred[i] > target[i] ? inv : (pred[i] < target[i] ? -inv : T(0));
  return g;
}

template <typename T>
void AdamW<T>::step(const std::vector<Param<T>*>& params, double lr) {
  for (auto* p : params)
    for (auto g : p->grad.values())
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in parameter " + p->name);
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->value.dims());
      v_.emplace_back(p->value.dims());
    }
  }
  if (m_.size() != params.size()) throw StateError("optimizer was built for a different parameter list");
  ++t_;
  const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.dims() != p.value.dims()) throw StateError("optimizer state shape mismatch for " + p.name);
    const double decay = p.decay ? 1 - lr * cfg_.weight_decay : 1.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g;
      const double mh = m[i] / c1, vh = v[i] / c2;
      p.value[i] = static_cast<T>(p.value[i] * decay - lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
  }
}

template <typename T>
void AdamW<T>::save(const std::filesystem::path& dir, const std::vector<Param<T>*>& params) const {
  std::filesystem::create_directories(dir);
  nlohmann::json j{{"step", t_},
                   {"beta1", cfg_.beta1},
                   {"beta2", cfg_.beta2},
                   {"eps", cfg_.eps},
                   {"weight_decay", cfg_.weight_decay},
                   {"params", nlohmann::json::array()}};
  for (std::size_t k = 0; k < m_.size(); ++k) {
    const auto mf = "m" + std::to_string(k) + ".rvt", vf = "v" + std::to_string(k) + ".rvt";
    save_rvt1(dir / mf, m_[k]);
    save_rvt1(dir / vf, v_[k]);
    j["params"].push_back({{"name", k < params.size() ? params[k]->name : ""}, {"m", mf}, {"v", vf}});
  }
  std::ofstream os(dir / "optimizer.json", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "optimizer.json").string());
  os << j.dump(1) << '\n';
}

template <typename T>
void AdamW<T>::load(const std::filesystem::path& dir, const std::vector<Param<T>*>& params) {
  std::ifstream is(dir / "optimizer.json");
  if (!is) throw FormatError("cannot read " + (dir / "optimizer.json").string());
  const auto j = nlohmann::json::parse(is);
  t_ = j.at("step").get<std::uint64_t>();
  m_.clear();
  v_.clear();
  const auto& entries = j.at("params");
  if (!entries.empty() && entries.size() != params.size())
    throw FormatError("optimizer state holds " + std::to_string(entries.size()) + " tensors, model has " +
                      std::to_string(params.size()));
  for (std::size_t k = 0; k < entries.size(); ++k) {
    m_.push_back(load_rvt1<double>(dir / entries[k].at("m").get<std::string>()));
    v_.push_back(load_rvt1<double>(dir / entries[k].at("v").get<std::string>()));
    if (m_.back().dims() != params[k]->value.dims())
      throw ShapeError("optimizer state for " + params[k]->name + " has the wrong shape");
  }
}

template class AdamW<float>;
template class AdamW<double>;

void TrainConfig::validate() const {
  if (!(base_lr >= 0) || !std::isfinite(base_lr)) throw ArgumentError("base_lr must be finite and >= 0");
  if (!(weight_decay >= 0)) throw ArgumentError("weight_decay must be >= 0");
  if (total_epochs < 1) throw ArgumentError("total_epochs must be >= 1");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (warmup_epochs < 0) throw ArgumentError("warmup_epochs must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ArgumentError("betas must be in [0, 1)");
  if (!(eps > 0)) throw ArgumentError("eps must be positive");
  if (!std::is_sorted(decay_epochs.begin(), decay_epochs.end()))
    throw ArgumentError("decay epochs must be ascending");
  const int first = decay_epochs.empty() ? total_epochs : decay_epochs.front();
  if (!(warmup_epochs < first && first <= total_epochs))
    throw ArgumentError("need warmup_epochs < min(decay_epochs) <= total_epochs, got " +
                        std::to_string(warmup_epochs) + ", " + std::to_string(first) + ", " +
                        std::to_string(total_epochs));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"base_lr", c.base_lr},           {"weight_decay", c.weight_decay}, {"warmup_epochs", c.warmup_epochs},
       {"decay_epochs", c.decay_epochs}, {"total_epochs", c.total_epochs}, {"batch_size", c.batch_size},
       {"seed", c.seed},                 {"beta1", c.beta1},               {"beta2", c.beta2},
       {"eps", c.eps}};
}

double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.total_epochs)
    throw ArgumentError("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.total_epochs) + ")");
  if (epoch < cfg.warmup_epochs) return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs;
  const auto k = std::count_if(cfg.decay_epochs.begin(), cfg.decay_epochs.end(), [&](int d) { return d <= epoch; });
  return cfg.base_lr * std::pow(10.0, -static_cast<double>(k));
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"epoch", r.epoch}, {"lr", r.lr}, {"train_l1", r.train_l1}};
  j["val_l1"] = r.val_l1 ? nlohmann::json(*r.val_l1) : nlohmann::json(nullptr);
}

void check_geometry(const Network<float>& net, const Dataset& ds) {
  const auto in = ds.input_shape();
  const auto target = ds.target_shape();
  const auto& plan = net.plan();
  if (in.size() != 4 || static_cast<int>(in[0]) != plan.in_channels)
    throw ShapeError("dataset inputs are " + shape_string(in) + " but the model expects " +
                     std::to_string(plan.in_channels) + " x T x H x W");
  const auto shapes = infer_plan_shapes(plan, {plan.in_channels, in[1], in[2], in[3]});
  if (shapes.empty() || shapes.back().shape != target)
    throw ShapeError("model maps " + shape_string(in) + " to " +
                     (shapes.empty() ? std::string("nothing") : shape_string(shapes.back().shape)) +
                     " but dataset targets are " + shape_string(target));
}

namespace {

Tensor stack(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t begin, std::size_t end,
             bool targets) {
  const auto& first = targets ? ds.samples[order[begin]].target : ds.samples[order[begin]].input;
  Shape dims{end - begin};
  dims.insert(dims.end(), first.dims().begin(), first.dims().end());
  Tensor out(dims);
  const std::size_t per = first.size();
  for (std::size_t k = begin; k < end; ++k) {
    const auto& s = ds.samples[order[k]];
    std::copy_n((targets ? s.target : s.input).data(), per, out.data() + (k - begin) * per);
  }
  return out;
}

double validation_l1(Network<float>& net, const Dataset& ds, std::size_t batch) {
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  ForwardContext ctx;
  ctx.training = false;
  ctx.store = false;
  double total = 0;
  for (std::size_t b = 0; b < order.size(); b += batch) {
    const std::size_t e = std::min(order.size(), b + batch);
    const auto pred = net.forward(stack(ds, order, b, e, false), ctx);
    total += l1_loss(pred, stack(ds, order, b, e, true)) * static_cast<double>(e - b);
  }
  return total / static_cast<double>(order.size());
}

}  // namespace

TrainResult train(Network<float>& net, const ArchProfile& profile, const Dataset& train_set, const Dataset* val_set,
                  const TrainConfig& cfg, const std::optional<std::filesystem::path>& out_dir,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  check_geometry(net, train_set);
  if (val_set) check_geometry(net, *val_set);

  AdamW<float> opt({cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
  Rng rng(Rng::derive(cfg.seed, 0x7261696eULL));
  const auto params = net.params();
  std::ofstream history;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    history.open(*out_dir / "history.jsonl", std::ios::trunc);
    if (!history) throw FormatError("cannot write " + (*out_dir / "history.jsonl").string());
  }

  TrainResult result;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    ForwardContext ctx;
    ctx.training = true;
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const auto x = stack(train_set, order, b, e, false);
      const auto y = stack(train_set, order, b, e, true);
      const auto pred = net.forward(x, ctx);
      total += l1_loss(pred, y) * static_cast<double>(e - b);
      net.zero_grad();
      net.backward(l1_loss_backward(pred, y));
      net.release();
      opt.step(params, lr);
    }

    EpochRecord rec{epoch, lr, total / static_cast<double>(order.size()), std::nullopt};
    if (val_set) rec.val_l1 = validation_l1(net, *val_set, cfg.batch_size);
    result.history.push_back(rec);

    const double score = rec.val_l1 ? *rec.val_l1 : rec.train_l1;
    const bool best = result.best_epoch < 0 || score < result.best_val_l1 || !val_set;
    if (best) {
      result.best_epoch = epoch;
      result.best_val_l1 = score;
    }
    if (out_dir) {
      history << nlohmann::json(rec).dump() << '\n' << std::flush;
      if (best) {
        save_checkpoint(*out_dir / "checkpoint", net, profile);
        opt.save(*out_dir / "checkpoint" / "optimizer", params);
      }
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& dir, Network<float>& net, const ArchProfile& profile) {
  std::filesystem::create_directories(dir);
  const auto& plan = net.plan();
  bool has_bias = true;
  for (const auto& n : plan.nodes)
    if (n.kind == NodeKind::ConvBlock) {
      has_bias = n.conv.has_bias;
      break;
    }
  nlohmann::json j{{"variant", variant_name(plan.variant)},
                   {"n_blocks", plan.n_blocks},
                   {"in_channels", plan.in_channels},
                   {"has_bias", has_bias}};
  std::ofstream os(dir / "model.json", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "model.json").string());
  os << j.dump(1) << '\n';
  save_profile(dir / "profile.txt", profile);
  net.save(dir / "weights");
}

LoadedModel load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "model.json");
  if (!is) throw FormatError("cannot read " + (dir / "model.json").string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad " + (dir / "model.json").string() + ": " + e.what());
  }
  LoadedModel m;
  m.profile = load_profile(dir / "profile.txt");
  const auto plan = build_model(parse_variant(j.at("variant").get<std::string>()), m.profile,
                                j.at("in_channels").get<int>(),
                                {j.at("n_blocks").get<int>(), j.value("has_bias", true)});
  Rng rng(0);
  m.net = std::make_unique<Network<float>>(plan, rng);
  m.net->load(dir / "weights");
  return m;
}

template <typename T>
double mae(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same(pred, target, "mae");
  return l1_loss(pred, target);
}

template <typename T>
double rmse(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same(pred, target, "rmse");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - target[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(pred.size()));
}

namespace {

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kSsimC1 = (0.01 * 2) * (0.01 * 2);
constexpr double kSsimC2 = (0.03 * 2) * (0.03 * 2);

std::vector<double> gaussian_window(std::size_t n) {
  std::vector<double> w(n);
  const double c = (static_cast<double>(n) - 1) / 2;
  for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(-(i - c) * (i - c) / (2 * kSsimSigma * kSsimSigma));
  return w;
}

template <typename T>
double ssim_slice(const T* x, const T* y, std::size_t H, std::size_t W) {
  const std::size_t wh = std::min<std::size_t>(kSsimWindow, H), ww = std::min<std::size_t>(kSsimWindow, W);
  const auto gh = gaussian_window(wh), gw = gaussian_window(ww);
  double norm = 0;
  for (auto a : gh)
    for (auto b : gw) norm += a * b;
  double total = 0;
  for (std::size_t i = 0; i + wh <= H; ++i)
    for (std::size_t j = 0; j + ww <= W; ++j) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (std::size_t a = 0; a < wh; ++a)
        for (std::size_t b = 0; b < ww; ++b) {
          const double wt = gh[a] * gw[b] / norm;
          const double u = x[(i + a) * W + j + b], v = y[(i + a) * W + j + b];
          mx += wt * u;
          my += wt * v;
          xx += wt * u * u;
          yy += wt * v * v;
          xy += wt * u * v;
        }
      const double sx = xx - mx * mx, sy = yy - my * my, sxy = xy - mx * my;
      total += ((2 * mx * my + kSsimC1) * (2 * sxy + kSsimC2)) /
               ((mx * mx + my * my + kSsimC1) * (sx + sy + kSsimC2));
    }
  return total / static_cast<double>((H - wh + 1) * (W - ww + 1));
}

}  // namespace

template <typename T>
double ssim_volume(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  require_same(pred, target, "ssim");
  if (pred.rank() < 2) throw ShapeError("ssim needs at least 2-D data, got " + shape_string(pred.dims()));
  const std::size_t H = pred.dim(pred.rank() - 2), W = pred.dim(pred.rank() - 1);
  const std::size_t slices = pred.size() / (H * W);
  double s = 0;
  for (std::size_t k = 0; k < slices; ++k) s += ssim_slice(pred.data() + k * H * W, target.data() + k * H * W, H, W);
  return s / static_cast<double>(slices);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"mae", r.mae}, {"rmse", r.rmse}, {"ssim", r.ssim}, {"samples", nlohmann::json::array()}};
  for (const auto& s : r.samples)
    j["samples"].push_back({{"index", s.index}, {"mae", s.mae}, {"rmse", s.rmse}, {"ssim", s.ssim}});
}

EvalReport evaluate(Network<float>& net, const Dataset& ds, const EvalTransform& transform, std::size_t batch_size) {
  check_geometry(net, ds);
  if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  ForwardContext ctx;
  ctx.training = false;
  ctx.store = false;
  EvalReport report;
  double abs_sum = 0, sq_sum = 0, ssim_sum = 0;
  std::size_t voxels = 0;
  const auto in_dims = ds.input_shape();
  for (std::size_t b = 0; b < ds.size(); b += batch_size) {
    const std::size_t e = std::min(ds.size(), b + batch_size);
    Shape dims{e - b};
    dims.insert(dims.end(), in_dims.begin(), in_dims.end());
    Tensor x(dims);
    const std::size_t per = ds.samples[b].input.size();
    for (std::size_t k = b; k < e; ++k) {
      const auto& s = ds.samples[k];
      Tensor in = s.input;
      if (transform.cutoff_hz || transform.snr_db != kNoNoise) {
        auto raw = minmax_denormalize(s.input.cast<double>(), s.record.seismic);
        if (transform.cutoff_hz) raw = highpass_filter(raw, s.record.dt, *transform.cutoff_hz);
        if (transform.snr_db != kNoNoise) {
          Rng rng(Rng::derive(transform.noise_seed, s.record.index));
          raw = add_gaussian_noise(raw, rng, transform.snr_db);
        }
        in = minmax_normalize(raw, s.record.seismic).cast<float>();
      }
      std::copy_n(in.data(), per, x.data() + (k - b) * per);
    }
    const auto pred = net.forward(x, ctx);
    const std::size_t out_per = pred.size() / (e - b);
    for (std::size_t k = b; k < e; ++k) {
      const auto& s = ds.samples[k];
      std::vector<float> slice(pred.data() + (k - b) * out_per, pred.data() + (k - b + 1) * out_per);
      const Tensor p(s.target.dims(), std::move(slice));
      const auto pv = minmax_denormalize(p, s.record.velocity);
      const auto tv = minmax_denormalize(s.target, s.record.velocity);
      SampleMetrics m{s.record.index, mae(pv, tv), rmse(pv, tv), ssim_volume(p, s.target)};
      abs_sum += m.mae * static_cast<double>(out_per);
      sq_sum += m.rmse * m.rmse * static_cast<double>(out_per);
      ssim_sum += m.ssim;
      voxels += out_per;
      report.samples.push_back(m);
    }
  }
  report.mae = abs_sum / static_cast<double>(voxels);
  report.rmse = std::sqrt(sq_sum / static_cast<double>(voxels));
  report.ssim = ssim_sum / static_cast<double>(ds.size());
  return report;
}

#define INSTANTIATE(T)                                                                    \
  template double l1_loss(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> l1_loss_backward(const BasicTensor<T>&, const BasicTensor<T>&); \
  template double mae(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template double rmse(const BasicTensor<T>&, const BasicTensor<T>&);                     \
  template double ssim_volume(const BasicTensor<T>&, const BasicTensor<T>&);

INSTANTIATE(float)
INSTANTIATE(double)
#undef INSTANTIATE

}  // namespace invnet3d
