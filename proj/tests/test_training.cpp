#include <doctest.h>

#include <fstream>

#include "invnet3d/errors.hpp"
#include "invnet3d/training.hpp"
#include "oracles.hpp"

using namespace invnet3d;

namespace {

namespace fs = std::filesystem;

// 4^3 velocity, 4 sources, 4 x 4 receivers, 24 time samples; matches tiny_profile().
DatasetConfig tiny_data() {
  DatasetConfig c;
  c.velocity.dims = {4, 4, 4};
  c.velocity.min_layers = c.velocity.max_layers = 2;
  c.velocity.min_thickness = 1;
  c.receivers = 4;
  c.nt = 96;
  c.time_samples = 24;
  c.sponge_width = 4;
  return c;
}

ArchProfile tiny_profile() { return desk_profile(16, {4, 24, 4, 4}, {4, 4, 4}); }

const Dataset& tiny_set(bool validation) {
  static const auto make = [](const char* name, std::size_t n, std::uint64_t seed) {
    const auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    generate_dataset(dir, tiny_data(), n, seed, 1);
    auto ds = load_dataset(dir);
    fs::remove_all(dir);
    return ds;
  };
  static const Dataset train = make("invnet3d_test_train", 6, 1);
  static const Dataset val = make("invnet3d_test_val", 3, 2);
  return validation ? val : train;
}

std::unique_ptr<Network<float>> tiny_net(Variant v = Variant::Full, std::uint64_t seed = 5) {
  Rng rng(seed);
  return std::make_unique<Network<float>>(build_model(v, tiny_profile(), 4, {2, true}), rng);
}

TrainConfig short_run() {
  TrainConfig c;
  c.base_lr = 1e-3;
  c.warmup_epochs = 1;
  c.decay_epochs = {3};
  c.total_epochs = 4;
  c.batch_size = 4;
  c.seed = 9;
  return c;
}

}  // namespace

TEST_CASE("l1 loss values and gradient") {
  Rng rng(1);
  auto a = randn<double>(rng, {2, 3, 4}, 0, 1);
  CHECK(l1_loss(a, a) == 0);
  TensorD b = a;
  for (auto& v : b.values()) v -= 0.25;
  CHECK(l1_loss(a, b) == doctest::Approx(0.25));
  const auto g = l1_loss_backward(a, b);
  for (auto v : g.values()) CHECK(v == doctest::Approx(1.0 / 24));
  CHECK(max_abs(l1_loss_backward(a, a)) == 0);
  auto t = randn<double>(rng, a.dims(), 0, 1);
  auto loss = [&] { return l1_loss(a, t); };
  CHECK(oracle::rel_err(l1_loss_backward(a, t), oracle::numeric_grad(a, loss)) < 1e-3);
  CHECK_THROWS_AS(l1_loss(a, TensorD({24})), ShapeError);
}

TEST_CASE("AdamW single steps") {
  Param<double> p("theta", TensorD({1}, 1.0));
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  p.grad[0] = 1;
  opt.step({&p}, 0.1);
  CHECK(p.value[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(opt.steps() == 1);

  Param<double> z("z", TensorD({3}, std::vector<double>{1, -2, 3}));
  AdamW<double> still({0.9, 0.999, 1e-8, 0.0});
  still.step({&z}, 0.5);
  CHECK(z.value == TensorD({3}, std::vector<double>{1, -2, 3}));

  AdamW<double> decay({0.9, 0.999, 1e-8, 0.1});
  for (int k = 1; k <= 5; ++k) {
    decay.step({&z}, 1.0);
    CHECK(z.value[1] == doctest::Approx(-2 * std::pow(0.9, k)));
  }
}

TEST_CASE("AdamW rejects non-finite gradients without touching anything") {
  Param<float> a("a", Tensor({2}, 1.0f)), b("b.weight", Tensor({2}, 1.0f));
  a.grad[0] = 1;
  b.grad[1] = std::numeric_limits<float>::quiet_NaN();
  AdamW<float> opt;
  try {
    opt.step({&a, &b}, 0.1);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("b.weight") != std::string::npos);
  }
  CHECK(a.value[0] == 1.0f);
  CHECK(opt.steps() == 0);
}

TEST_CASE("AdamW state save and load continues identically") {
  Rng rng(2);
  Param<float> p1("w", randn<float>(rng, {5}, 0, 1)), p2("w", p1.value);
  AdamW<float> o1, o2;
  const auto dir = fs::temp_directory_path() / "invnet3d_test_opt";
  fs::remove_all(dir);
  for (int k = 0; k < 3; ++k) {
    p1.grad = randn<float>(rng, {5}, 0, 1);
    o1.step({&p1}, 0.01);
  }
  o1.save(dir, {&p1});
  p2.value = p1.value;
  o2.load(dir, {&p2});
  CHECK(o2.steps() == 3);
  p1.grad = p2.grad = randn<float>(rng, {5}, 0, 1);
  o1.step({&p1}, 0.01);
  o2.step({&p2}, 0.01);
  CHECK(p1.value == p2.value);
  fs::remove_all(dir);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_at_epoch(c, 4) == doctest::Approx(0.5 * c.base_lr));
  CHECK(lr_at_epoch(c, 9) == doctest::Approx(c.base_lr));
  CHECK(lr_at_epoch(c, 45) == doctest::Approx(c.base_lr / 10));
  CHECK(lr_at_epoch(c, 75) == doctest::Approx(c.base_lr / 1000));
  CHECK_THROWS_AS(lr_at_epoch(c, 80), ArgumentError);
  CHECK_THROWS_AS(lr_at_epoch(c, -1), ArgumentError);
  for (int e = c.warmup_epochs + 1; e < c.total_epochs; ++e) CHECK(lr_at_epoch(c, e) <= lr_at_epoch(c, e - 1));
  c.decay_epochs = {5};
  CHECK_THROWS_AS(c.validate(), ArgumentError);
}

TEST_CASE("metrics") {
  Rng rng(3);
  const auto a = randn<double>(rng, {5, 16, 20}, 0, 0.4);
  CHECK(mae(a, a) == 0);
  CHECK(rmse(a, a) == 0);
  CHECK(ssim_volume(a, a) == 1.0);
  TensorD b = a;
  for (auto& v : b.values()) v += 3;
  CHECK(mae(a, b) == doctest::Approx(3));
  CHECK(rmse(a, b) == doctest::Approx(3));
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = randn<double>(rng, {5, 16, 20}, 0, 0.4);
    CHECK(rmse(a, x) >= mae(a, x));
    CHECK(std::abs(ssim_volume(a, x) - ssim_volume(x, a)) <= 1e-9);
  }
  CHECK_THROWS_AS(mae(a, TensorD({5, 16, 21})), ShapeError);
  CHECK_THROWS_AS(ssim_volume(a, TensorD({5, 16, 21})), ShapeError);
}

TEST_CASE("ssim agrees with a direct per-window reference") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = randn<double>(rng, {3, 14, 17}, 0, 0.5);
    auto y = x;
    for (auto& v : y.values()) v = 0.7 * v + 0.1 + 0.3 * rng.normal();
    double ref = 0;
    for (std::size_t d = 0; d < 3; ++d) ref += oracle::ssim2d(x.data() + d * 238, y.data() + d * 238, 14, 17);
    CHECK(ssim_volume(x, y) == doctest::Approx(ref / 3).epsilon(1e-6));
  }
}

TEST_CASE("train: geometry mismatch is rejected before any epoch") {
  Rng rng(6);
  Network<float> wrong(build_model(Variant::S, desk_profile(16, {2, 24, 4, 4}, {4, 4, 4}), 2), rng);
  int epochs = 0;
  CHECK_THROWS_AS(train(wrong, tiny_profile(), tiny_set(false), nullptr, short_run(), std::nullopt,
                        [&](const EpochRecord&) { ++epochs; }),
                  ShapeError);
  CHECK(epochs == 0);
}

TEST_CASE("train: zero learning rate leaves weights and loss unchanged") {
  auto net = tiny_net();
  std::vector<Tensor> before;
  for (auto* p : net->params()) before.push_back(p->value);
  auto cfg = short_run();
  cfg.base_lr = 0;
  cfg.batch_size = 6;  // one batch, so batch statistics never change
  const auto r = train(*net, tiny_profile(), tiny_set(false), nullptr, cfg);
  const auto params = net->params();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->value == before[i]);
  for (const auto& e : r.history) CHECK(e.train_l1 == doctest::Approx(r.history[0].train_l1).epsilon(1e-6));
}

TEST_CASE("train: equal seeds give bit-identical histories") {
  auto a = tiny_net(), b = tiny_net(), c = tiny_net();
  const auto cfg = short_run();
  const auto ra = train(*a, tiny_profile(), tiny_set(false), &tiny_set(true), cfg);
  const auto rb = train(*b, tiny_profile(), tiny_set(false), &tiny_set(true), cfg);
  REQUIRE(ra.history.size() == 4);
  for (std::size_t e = 0; e < 4; ++e) {
    CHECK(ra.history[e].train_l1 == rb.history[e].train_l1);
    CHECK(*ra.history[e].val_l1 == *rb.history[e].val_l1);
  }
  auto other = cfg;
  other.seed = 10;
  const auto rc = train(*c, tiny_profile(), tiny_set(false), &tiny_set(true), other);
  CHECK(rc.history[1].train_l1 != ra.history[1].train_l1);
}

TEST_CASE("train writes history and a loadable best checkpoint") {
  auto net = tiny_net(Variant::G);
  const auto dir = fs::temp_directory_path() / "invnet3d_test_run";
  fs::remove_all(dir);
  const auto r = train(*net, tiny_profile(), tiny_set(false), &tiny_set(true), short_run(), dir);
  std::ifstream hist(dir / "history.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(hist, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch") == n);
    CHECK(j.at("train_l1").get<double>() == r.history[n].train_l1);
    ++n;
  }
  CHECK(n == 4);
  CHECK(r.best_val_l1 == *r.history[r.best_epoch].val_l1);
  for (const auto& e : r.history) CHECK(*e.val_l1 >= r.best_val_l1);

  auto loaded = load_checkpoint(dir / "checkpoint");
  CHECK(loaded.profile == tiny_profile());
  CHECK(loaded.net->plan().variant == Variant::G);
  CHECK(fs::exists(dir / "checkpoint" / "optimizer" / "optimizer.json"));
  CHECK(evaluate(*loaded.net, tiny_set(true)).samples.size() == 3);
  fs::remove_all(dir);
}

TEST_CASE("evaluate: metric invariants and deterministic transforms") {
  auto net = tiny_net();
  const auto& ds = tiny_set(true);
  const auto clean = evaluate(*net, ds);
  CHECK(clean.rmse >= clean.mae);
  CHECK(clean.mae > 0);
  for (const auto& s : clean.samples) CHECK(s.rmse >= s.mae);
  const auto inf = evaluate(*net, ds, {kNoNoise, std::nullopt, 3});
  CHECK(inf.mae == clean.mae);
  const auto n1 = evaluate(*net, ds, {0.0, 2.0, 3});
  const auto n2 = evaluate(*net, ds, {0.0, 2.0, 3});
  CHECK(n1.mae == n2.mae);
  CHECK(n1.ssim == n2.ssim);
  CHECK(n1.mae != clean.mae);
  const auto j = nlohmann::json(clean);
  CHECK(j.at("samples").size() == 3);
  CHECK_THROWS_AS(evaluate(*net, ds, {std::nan(""), std::nullopt, 0}), ArgumentError);
}
