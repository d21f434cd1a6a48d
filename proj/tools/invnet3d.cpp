// Command-line entry point: gen-data, train, eval, cost, verify-invert.
//
// Exit codes: 0 success, 1 runtime failure ("ERROR: ..." on stderr), 2 usage
// error (bad flags, bad config values). Every value is checked before any
// file is written.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "invnet3d/accounting.hpp"
#include "invnet3d/arch.hpp"
#include "invnet3d/dataset.hpp"
#include "invnet3d/errors.hpp"
#include "invnet3d/invertible.hpp"
#include "invnet3d/model.hpp"
#include "invnet3d/training.hpp"

using namespace invnet3d;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

// Raised for semantic flag problems found after parsing.
struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

const std::vector<std::string> kVariants{"invnet3ds", "invnet3di", "invnet3dg", "invnet3d"};

CLI::Option* add_variant(CLI::App* app, std::string& variant) {
  return app->add_option("--variant", variant, "Model variant")
      ->check(CLI::IsMember(kVariants, CLI::ignore_case))
      ->capture_default_str();
}

// ---------------------------------------------------------------------------
// gen-data

struct GenArgs {
  std::string out;
  std::size_t samples = 64;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::vector<std::size_t> dims{24, 24, 24};
  DatasetConfig cfg;
};

void add_gen_data(CLI::App& app, GenArgs& a) {
  auto* c = app.add_subcommand("gen-data", "Simulate a layered-earth dataset");
  auto& v = a.cfg.velocity;
  c->add_option("--out", a.out, "Output dataset directory")->required();
  c->add_option("--samples", a.samples, "Number of samples")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 20))
      ->capture_default_str();
  c->add_option("--seed", a.seed, "Master seed")->required();
  c->add_option("--workers", a.workers, "Generator threads")->check(CLI::Range(1, 256))->capture_default_str();
  c->add_option("--dims", a.dims, "Velocity grid D H W")->expected(3)->capture_default_str();
  c->add_option("--spacing", v.spacing, "Grid spacing (m)")->check(CLI::PositiveNumber)->capture_default_str();
  c->add_option("--min-layers", v.min_layers)->capture_default_str();
  c->add_option("--max-layers", v.max_layers)->capture_default_str();
  c->add_option("--min-thickness", v.min_thickness, "Minimum layer thickness (cells)")->capture_default_str();
  c->add_option("--v-min", v.v_min, "Slowest velocity (m/s)")->capture_default_str();
  c->add_option("--v-max", v.v_max, "Fastest velocity (m/s)")->capture_default_str();
  c->add_option("--lens-probability", v.lens_probability)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  c->add_option("--lens-reduction", v.lens_reduction)->check(CLI::Range(0.0, 0.99))->capture_default_str();
  c->add_option("--sources", a.cfg.sources, "Simulated sources")->capture_default_str();
  c->add_option("--receivers", a.cfg.receivers, "Receivers per surface axis")->capture_default_str();
  c->add_option("--nt", a.cfg.nt, "Simulated time steps")->capture_default_str();
  c->add_option("--f0", a.cfg.f0, "Ricker peak frequency (Hz)")->capture_default_str();
  c->add_option("--cfl-safety", a.cfg.cfl_safety)->capture_default_str();
  c->add_option("--sponge", a.cfg.sponge_width, "Absorbing sponge width (cells)")->capture_default_str();
  c->add_option("--time", a.cfg.time_samples, "Time samples kept after subsampling")->capture_default_str();
  c->add_option("--select", a.cfg.selected, "Source indices kept as input channels (default: all)");
}

int run_gen_data(const GenArgs& a) {
  generate_dataset(a.out, a.cfg, a.samples, a.seed, a.workers);
  nlohmann::json j = {{"dataset", a.out}, {"samples", a.samples}, {"seed", a.seed}};
  std::cout << j.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, val, out;
  std::string variant = "invnet3d";
  int blocks = 1;
  int divisor = 8;
  TrainConfig cfg;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* c = app.add_subcommand("train", "Train a network on a generated dataset");
  c->add_option("--data", a.data, "Training dataset directory")->required()->check(CLI::ExistingDirectory);
  c->add_option("--val", a.val, "Validation dataset directory")->check(CLI::ExistingDirectory);
  c->add_option("--out", a.out, "Run directory (history.jsonl, checkpoint/)")->required();
  add_variant(c, a.variant);
  c->add_option("--blocks", a.blocks, "Coupling layers per invertible module")->check(CLI::Range(1, 64))
      ->capture_default_str();
  c->add_option("--divisor", a.divisor, "Channel-width divisor of the profile")->check(CLI::Range(1, 64))
      ->capture_default_str();
  c->add_option("--epochs", a.cfg.total_epochs)->capture_default_str();
  c->add_option("--lr", a.cfg.base_lr, "Base learning rate")->capture_default_str();
  c->add_option("--warmup", a.cfg.warmup_epochs, "Linear warmup epochs")->capture_default_str();
  c->add_option("--decay", a.cfg.decay_epochs, "Epochs at which the rate drops by 10x")->capture_default_str();
  c->add_option("--weight-decay", a.cfg.weight_decay)->capture_default_str();
  c->add_option("--batch", a.cfg.batch_size)->capture_default_str();
  c->add_option("--seed", a.cfg.seed, "Initialization and shuffling seed")->required();
}

int run_train(const TrainArgs& a) {
  const auto train_set = load_dataset(a.data);
  std::optional<Dataset> val_set;
  if (!a.val.empty()) val_set = load_dataset(a.val);

  const auto in = train_set.input_shape();
  const auto tgt = train_set.target_shape();
  const InputGeometry geom{int(in[0]), in[1], in[2], in[3]};
  const auto profile = desk_profile(a.divisor, geom, {tgt[1], tgt[2], tgt[3]});
  const auto plan = build_model(parse_variant(a.variant), profile, geom.channels, {a.blocks, true});
  Rng rng(a.cfg.seed);
  Network<float> net(plan, rng);
  check_geometry(net, train_set);
  if (val_set) check_geometry(net, *val_set);

  const auto result = train(net, profile, train_set, val_set ? &*val_set : nullptr, a.cfg, a.out,
                            [](const EpochRecord& r) { std::cout << nlohmann::json(r).dump() << std::endl; });
  nlohmann::json j = {{"record", "summary"}, {"best_epoch", result.best_epoch}};
  if (val_set) j["best_val_l1"] = result.best_val_l1;
  std::cout << j.dump() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint, data;
  std::vector<double> snr;
  std::vector<double> cutoff;
  std::optional<std::uint64_t> seed;
  std::size_t batch = 8;
  bool per_sample = false;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* c = app.add_subcommand("eval", "Score a checkpoint, optionally under noise or high-pass sweeps");
  c->add_option("--checkpoint", a.checkpoint, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  c->add_option("--data", a.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  c->add_option("--snr", a.snr, "Noise levels in dB (one report per value; inf = clean)");
  c->add_option("--cutoff", a.cutoff, "High-pass cutoffs in Hz (one report per value)")
      ->check(CLI::PositiveNumber);
  c->add_option("--seed", a.seed, "Noise seed (required with --snr)");
  c->add_option("--batch", a.batch)->check(CLI::Range(std::size_t{1}, std::size_t{4096}))->capture_default_str();
  c->add_flag("--per-sample", a.per_sample, "Include per-sample metrics");
}

void check_eval(const EvalArgs& a) {
  bool noisy = false;
  for (double s : a.snr) {
    if (std::isnan(s)) throw UsageError("--snr must be a number or inf");
    if (std::isfinite(s)) noisy = true;
  }
  if (noisy && !a.seed) throw UsageError("--seed is required when --snr adds noise");
}

int run_eval(const EvalArgs& a) {
  auto model = load_checkpoint(a.checkpoint);
  const auto ds = load_dataset(a.data);
  check_geometry(*model.net, ds);

  std::vector<double> snrs = a.snr.empty() ? std::vector<double>{kNoNoise} : a.snr;
  std::vector<std::optional<double>> cutoffs;
  if (a.cutoff.empty()) cutoffs.push_back(std::nullopt);
  for (double c : a.cutoff) cutoffs.push_back(c);

  for (const auto& cutoff : cutoffs)
    for (double snr : snrs) {
      EvalTransform t;
      t.snr_db = snr;
      t.cutoff_hz = cutoff;
      t.noise_seed = a.seed.value_or(0);
      const auto report = evaluate(*model.net, ds, t, a.batch);
      nlohmann::json j = report;
      if (!a.per_sample) j.erase("samples");
      j["snr_db"] = std::isfinite(snr) ? nlohmann::json(snr) : nlohmann::json("inf");
      j["cutoff_hz"] = cutoff ? nlohmann::json(*cutoff) : nlohmann::json(nullptr);
      std::cout << j.dump() << '\n';
    }
  return kOk;
}

// ---------------------------------------------------------------------------
// cost

struct CostArgs {
  std::string variant = "invnet3d";
  std::string scale = "paper";
  std::size_t time = 896;
  int channels = 8;
  std::size_t height = 40, width = 40;
  int blocks = 1;
  int divisor = 8;
  std::vector<std::size_t> output{24, 24, 24};
  std::size_t batch = 1;
  bool memory = false;
  bool text = false;
};

void add_cost(CLI::App& app, CostArgs& a) {
  auto* c = app.add_subcommand("cost", "Symbolic parameter, FLOP and stored-activation accounting");
  add_variant(c, a.variant);
  c->add_option("--scale", a.scale, "paper | desk")->check(CLI::IsMember({"paper", "desk"}, CLI::ignore_case))
      ->capture_default_str();
  c->add_option("--time", a.time, "Input time samples")->check(CLI::Range(std::size_t{1}, std::size_t{1} << 24))
      ->capture_default_str();
  c->add_option("--channels", a.channels, "Input channels (sources)")->check(CLI::Range(1, 4096))
      ->capture_default_str();
  c->add_option("--height", a.height)->check(CLI::Range(std::size_t{1}, std::size_t{1} << 16))->capture_default_str();
  c->add_option("--width", a.width)->check(CLI::Range(std::size_t{1}, std::size_t{1} << 16))->capture_default_str();
  c->add_option("--blocks", a.blocks, "Coupling layers per invertible module (plain layers for S/G)")
      ->check(CLI::Range(1, 64))
      ->capture_default_str();
  c->add_option("--divisor", a.divisor, "Channel-width divisor (desk scale)")->check(CLI::Range(1, 64))
      ->capture_default_str();
  c->add_option("--output", a.output, "Output volume D H W (desk scale)")->expected(3)->capture_default_str();
  c->add_option("--batch", a.batch, "Batch size for the memory ledger")
      ->check(CLI::Range(std::size_t{1}, std::size_t{4096}))
      ->capture_default_str();
  c->add_flag("--memory", a.memory, "Also print the stored-activation ledger");
  c->add_flag("--text", a.text, "Human-readable table instead of JSON lines");
}

int run_cost(const CostArgs& a) {
  const InputGeometry geom{a.channels, a.time, a.height, a.width};
  const bool paper = CLI::detail::to_lower(a.scale) == "paper";
  const auto profile = paper ? paper_profile(geom) : desk_profile(a.divisor, geom, {a.output[0], a.output[1], a.output[2]});
  const auto plan = build_model(parse_variant(a.variant), profile, a.channels, {a.blocks, true});
  const auto report = model_cost(plan, geom);
  if (a.text)
    report.write_text(std::cout);
  else
    report.write_json_lines(std::cout);
  if (a.memory) {
    const auto ledger = memory_ledger(plan, geom, a.batch);
    if (a.text)
      std::cout << "stored elements " << ledger.total_elements << ", peak " << ledger.peak_elements << '\n';
    else
      ledger.write_json_lines(std::cout);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// verify-invert

struct VerifyArgs {
  int blocks = 2;
  int channels = 8;
  std::size_t size = 6;
  std::uint64_t seed = 0;
};

void add_verify(CLI::App& app, VerifyArgs& a) {
  auto* c = app.add_subcommand("verify-invert", "Round-trip and gradient checks on a random invertible module");
  c->add_option("--blocks", a.blocks, "Coupling layers")->check(CLI::Range(1, 64))->capture_default_str();
  c->add_option("--channels", a.channels, "Module width (even)")->check(CLI::Range(2, 1024))->capture_default_str();
  c->add_option("--size", a.size, "Spatial edge length")->check(CLI::Range(std::size_t{1}, std::size_t{64}))
      ->capture_default_str();
  c->add_option("--seed", a.seed)->required();
}

template <typename T>
double flat_rel_err(const std::vector<const BasicTensor<T>*>& a, const std::vector<const BasicTensor<T>*>& b) {
  double num = 0, den = 0;
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k]->size(); ++i) {
      const double d = double((*a[k])[i]) - double((*b[k])[i]);
      num += d * d;
      den += double((*b[k])[i]) * double((*b[k])[i]);
    }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

struct VerifyResult {
  double round_trip = 0;
  double grad_rel = 0;
};

template <typename T>
VerifyResult verify_module(const VerifyArgs& a, std::uint64_t stream) {
  Rng rng(Rng::derive(a.seed, stream));
  InvertibleModule<T> m("verify", a.channels, a.blocks, 1, true, Activation::LeakyRelu, rng);
  const auto x = randn<T>(rng, {2, std::size_t(a.channels), a.size, a.size, a.size}, 0, 1);
  ForwardContext ctx;
  ctx.training = true;
  ctx.update_running_stats = false;

  VerifyResult r;
  ForwardContext probe = ctx;
  probe.store = false;
  r.round_trip = max_abs_diff(m.inverse(m.forward(x, probe), probe), x);

  const auto y = m.forward(x, ctx);
  const auto upstream = randn<T>(rng, y.dims(), 0, 1);
  const auto rec = invertible_module_backward(upstream, y, m);

  m.set_recompute(false);
  for (auto* p : m.params()) p->grad.fill(0);
  m.forward(x, ctx);
  const auto stored_in = m.backward(upstream);
  std::vector<const BasicTensor<T>*> got{&rec.input}, want{&stored_in};
  auto params = m.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    got.push_back(&rec.params[i].second);
    want.push_back(&params[i]->grad);
  }
  r.grad_rel = flat_rel_err(got, want);
  return r;
}

int run_verify(const VerifyArgs& a) {
  const double tol_round_trip = 1e-5, tol_grad = 1e-4;
  const auto f32 = verify_module<float>(a, 32);
  const auto f64 = verify_module<double>(a, 64);
  const double rt = std::max(f32.round_trip, f64.round_trip);
  const double gr = std::max(f32.grad_rel, f64.grad_rel);
  std::printf("blocks %d channels %d size %zu seed %llu\n", a.blocks, a.channels, a.size,
              static_cast<unsigned long long>(a.seed));
  std::printf("round-trip max abs err: f32 %.3e  f64 %.3e  (tol %.0e)\n", f32.round_trip, f64.round_trip,
              tol_round_trip);
  std::printf("grad rel err:           f32 %.3e  f64 %.3e  (tol %.0e)\n", f32.grad_rel, f64.grad_rel, tol_grad);
  const bool ok = rt <= tol_round_trip && gr <= tol_grad;
  std::printf("%s\n", ok ? "OK" : "FAILED");
  if (!ok) {
    std::fflush(stdout);
    std::cerr << "ERROR: invertibility tolerances exceeded\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reversible group-convolutional encoder-decoder for 3-D seismic inversion"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML/INI file of option values; command-line flags win");
  app.allow_config_extras(CLI::config_extras_mode::error);

  GenArgs gen;
  TrainArgs tr;
  EvalArgs ev;
  CostArgs cost;
  VerifyArgs ver;
  add_gen_data(app, gen);
  add_train(app, tr);
  add_eval(app, ev);
  add_cost(app, cost);
  add_verify(app, ver);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const auto* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();

  // Semantic validation: everything that can be checked without touching disk.
  try {
    if (name == "gen-data") {
      std::copy(gen.dims.begin(), gen.dims.end(), gen.cfg.velocity.dims.begin());
      gen.cfg.validate();
    } else if (name == "train") {
      tr.cfg.validate();
    } else if (name == "eval") {
      check_eval(ev);
    } else if (name == "cost") {
      if (CLI::detail::to_lower(cost.scale) == "desk") {
        const InputGeometry geom{cost.channels, cost.time, cost.height, cost.width};
        desk_profile(cost.divisor, geom, {cost.output[0], cost.output[1], cost.output[2]});
      }
    } else if (name == "verify-invert") {
      if (ver.channels % 2 != 0) throw UsageError("--channels must be even");
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << name << ": " << e.what() << "\nRun with --help for more information.\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << name << ": " << e.what() << "\nRun with --help for more information.\n";
    return kUsage;
  }

  try {
    if (name == "gen-data") return run_gen_data(gen);
    if (name == "train") return run_train(tr);
    if (name == "eval") return run_eval(ev);
    if (name == "cost") return run_cost(cost);
    return run_verify(ver);
  } catch (const std::exception& e) {
    std::cout.flush();
    std::cerr << "ERROR: " << name << ": " << e.what() << '\n';
    return kRuntime;
  }
}
