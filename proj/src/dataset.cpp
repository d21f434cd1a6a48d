#include "invnet3d/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <thread>

#include "invnet3d/errors.hpp"

namespace invnet3d {

void DatasetConfig::validate() const {
  velocity.validate();
  if (receivers == 0 || receivers > velocity.dims[1] || receivers > velocity.dims[2])
    throw ArgumentError("receiver count per axis must be in [1, surface extent]");
  if (!(f0 > 0)) throw ArgumentError("wavelet frequency must be positive");
  if (!(cfl_safety > 0 && cfl_safety <= 1)) throw ArgumentError("cfl_safety must be in (0, 1]");
  if (time_samples < 1 || time_samples > nt) throw ArgumentError("time_samples must be in [1, nt]");
  source_grid(sources, velocity.dims[1], velocity.dims[2]);
  for (auto s : selected)
    if (s >= sources) throw ArgumentError("selected source " + std::to_string(s) + " does not exist");
}

AcquisitionGeometry DatasetConfig::geometry() const {
  AcquisitionGeometry g;
  g.sources = source_grid(sources, velocity.dims[1], velocity.dims[2]);
  g.receiver_rows = even_positions(receivers, velocity.dims[1]);
  g.receiver_cols = even_positions(receivers, velocity.dims[2]);
  g.dt = cfl_safety * cfl_limit(velocity.spacing, velocity.v_max);
  g.nt = nt;
  g.f0 = f0;
  g.sponge_width = sponge_width;
  return g;
}

std::vector<std::size_t> DatasetConfig::selection() const {
  if (!selected.empty()) return selected;
  std::vector<std::size_t> all(sources);
  for (std::size_t i = 0; i < sources; ++i) all[i] = i;
  return all;
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  const auto& v = c.velocity;
  j = {{"velocity",
        {{"dims", v.dims},
         {"spacing", v.spacing},
         {"min_layers", v.min_layers},
         {"max_layers", v.max_layers},
         {"v_min", v.v_min},
         {"v_max", v.v_max},
         {"boundaries", v.boundaries},
         {"min_thickness", v.min_thickness},
         {"lens_probability", v.lens_probability},
         {"lens_reduction", v.lens_reduction}}},
       {"sources", c.sources},
       {"receivers", c.receivers},
       {"nt", c.nt},
       {"f0", c.f0},
       {"cfl_safety", c.cfl_safety},
       {"sponge_width", c.sponge_width},
       {"time_samples", c.time_samples},
       {"selected", c.selected}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c = DatasetConfig{};
  if (j.contains("velocity")) {
    const auto& v = j.at("velocity");
    auto& o = c.velocity;
    o.dims = v.value("dims", o.dims);
    o.spacing = v.value("spacing", o.spacing);
    o.min_layers = v.value("min_layers", o.min_layers);
    o.max_layers = v.value("max_layers", o.max_layers);
    o.v_min = v.value("v_min", o.v_min);
    o.v_max = v.value("v_max", o.v_max);
    o.boundaries = v.value("boundaries", o.boundaries);
    o.min_thickness = v.value("min_thickness", o.min_thickness);
    o.lens_probability = v.value("lens_probability", o.lens_probability);
    o.lens_reduction = v.value("lens_reduction", o.lens_reduction);
  }
  c.sources = j.value("sources", c.sources);
  c.receivers = j.value("receivers", c.receivers);
  c.nt = j.value("nt", c.nt);
  c.f0 = j.value("f0", c.f0);
  c.cfl_safety = j.value("cfl_safety", c.cfl_safety);
  c.sponge_width = j.value("sponge_width", c.sponge_width);
  c.time_samples = j.value("time_samples", c.time_samples);
  c.selected = j.value("selected", c.selected);
}

void to_json(nlohmann::json& j, const SampleRecord& r) {
  j = {{"index", r.index},
       {"seed", r.seed},
       {"input", r.input},
       {"target", r.target},
       {"input_shape", r.input_shape},
       {"target_shape", r.target_shape},
       {"dt", r.dt},
       {"spacing", r.spacing},
       {"seismic_min", r.seismic.min},
       {"seismic_max", r.seismic.max},
       {"velocity_min", r.velocity.min},
       {"velocity_max", r.velocity.max},
       {"sources", r.sources},
       {"lens", r.lens}};
}

void from_json(const nlohmann::json& j, SampleRecord& r) {
  j.at("index").get_to(r.index);
  j.at("seed").get_to(r.seed);
  j.at("input").get_to(r.input);
  j.at("target").get_to(r.target);
  j.at("input_shape").get_to(r.input_shape);
  j.at("target_shape").get_to(r.target_shape);
  j.at("dt").get_to(r.dt);
  j.at("spacing").get_to(r.spacing);
  j.at("seismic_min").get_to(r.seismic.min);
  j.at("seismic_max").get_to(r.seismic.max);
  j.at("velocity_min").get_to(r.velocity.min);
  j.at("velocity_max").get_to(r.velocity.max);
  j.at("sources").get_to(r.sources);
  r.lens = j.value("lens", false);
}

namespace {

std::string numbered(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%05zu.rvt", prefix, i);
  return buf;
}

}  // namespace

Sample generate_sample(const DatasetConfig& cfg, std::uint64_t master_seed, std::size_t index) {
  cfg.validate();
  const auto seed = Rng::derive(master_seed, index);
  Rng rng(seed);
  const auto vel = gen_layered_velocity(rng, cfg.velocity);
  const auto geom = cfg.geometry();
  auto cube = fd_simulate(vel, geom);
  cube = temporal_subsample(cube, cfg.time_samples);
  cube = select_sources(cube, cfg.selection());

  Sample s;
  auto [x, xr] = minmax_normalize(cube.data);
  const MinMax vr{cfg.velocity.v_min, cfg.velocity.v_max};
  const auto [D, H, W] = vel.dims();
  s.input = x.cast<float>();
  s.target = minmax_normalize(vel.values, vr).cast<float>().reshaped({1, D, H, W});

  auto& r = s.record;
  r.index = index;
  r.seed = seed;
  r.input = numbered("x_", index);
  r.target = numbered("y_", index);
  r.input_shape = s.input.dims();
  r.target_shape = s.target.dims();
  r.dt = cube.dt;
  r.spacing = vel.spacing;
  r.seismic = xr;
  r.velocity = vr;
  r.sources = cube.sources;
  r.lens = vel.has_lens;
  return s;
}

void generate_dataset(const std::filesystem::path& dir, const DatasetConfig& cfg, std::size_t samples,
                      std::uint64_t master_seed, std::size_t workers) {
  cfg.validate();
  if (samples == 0) throw ArgumentError("dataset needs at least one sample");
  std::filesystem::create_directories(dir);
  std::vector<SampleRecord> records(samples);
  std::vector<std::exception_ptr> errors(samples);
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < samples; i += stride) {
      try {
        auto s = generate_sample(cfg, master_seed, i);
        save_rvt1(dir / s.record.input, s.input);
        save_rvt1(dir / s.record.target, s.target);
        records[i] = std::move(s.record);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, samples));
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::ofstream conf(dir / "config.json", std::ios::trunc);
  nlohmann::json jc = cfg;
  jc["seed"] = master_seed;
  jc["samples"] = samples;
  conf << jc.dump(2) << '\n';
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw FormatError("cannot write " + (dir / "manifest.jsonl").string());
  for (const auto& r : records) manifest << nlohmann::json(r).dump() << '\n';
}

Shape Dataset::input_shape() const {
  if (samples.empty()) throw StateError("dataset " + dir.string() + " is empty");
  return samples.front().input.dims();
}

Shape Dataset::target_shape() const {
  if (samples.empty()) throw StateError("dataset " + dir.string() + " is empty");
  return samples.front().target.dims();
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.dir = dir;
  std::ifstream conf(dir / "config.json");
  if (!conf) throw FormatError("cannot read " + (dir / "config.json").string());
  try {
    ds.config = nlohmann::json::parse(conf).get<DatasetConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad " + (dir / "config.json").string() + ": " + e.what());
  }
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw FormatError("cannot read " + (dir / "manifest.jsonl").string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    Sample s;
    try {
      s.record = nlohmann::json::parse(line).get<SampleRecord>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    s.input = load_rvt1<float>(dir / s.record.input);
    s.target = load_rvt1<float>(dir / s.record.target);
    if (s.input.dims() != s.record.input_shape || s.target.dims() != s.record.target_shape)
      throw FormatError("sample " + std::to_string(s.record.index) + " does not match its manifest shapes");
    if (!ds.samples.empty() && (s.input.dims() != ds.samples.front().input.dims() ||
                                s.target.dims() != ds.samples.front().target.dims()))
      throw ShapeError("sample " + std::to_string(s.record.index) + " shape differs from the rest of the dataset");
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw FormatError("manifest " + (dir / "manifest.jsonl").string() + " has no samples");
  return ds;
}

}  // namespace invnet3d
