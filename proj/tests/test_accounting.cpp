#include <doctest.h>

#include <json.hpp>
#include <sstream>

#include "invnet3d/accounting.hpp"
#include "invnet3d/model.hpp"

using namespace invnet3d;

namespace {

// Enumerates weight elements: one per (output channel, input channel within
// the output's group, kernel tap).
std::uint64_t enumerate_weights(const ConvSpec& s) {
  std::uint64_t n = 0;
  const int cin_g = s.in_channels / s.groups;
  for (int o = 0; o < s.out_channels; ++o)
    for (int c = 0; c < cin_g; ++c)
      for (int a = 0; a < s.kernel[0]; ++a)
        for (int b = 0; b < s.kernel[1]; ++b)
          for (int d = 0; d < s.kernel[2]; ++d) ++n;
  return n;
}

// Walks the naive loop nest over output voxels and counts a multiply and an add
// for every kernel tap, padded taps included.
std::uint64_t enumerate_flops(const ConvSpec& s, const Dims3& in) {
  const auto out = s.output_extent(in);
  std::uint64_t n = 0;
  for (std::size_t z = 0; z < out[0]; ++z)
    for (std::size_t y = 0; y < out[1]; ++y)
      for (std::size_t x = 0; x < out[2]; ++x)
        for (int o = 0; o < s.out_channels; ++o)
          for (int c = 0; c < s.in_channels / s.groups; ++c)
            for (int k = 0; k < s.kernel[0] * s.kernel[1] * s.kernel[2]; ++k) n += 2;
  return n;
}

ConvSpec random_spec(Rng& rng) {
  ConvSpec s;
  const int g = 1 + static_cast<int>(rng.below(4));
  s.groups = g;
  s.in_channels = g * (1 + static_cast<int>(rng.below(4)));
  s.out_channels = g * (1 + static_cast<int>(rng.below(4)));
  s.transposed = rng.below(2) == 1;
  for (int a = 0; a < 3; ++a) {
    s.stride[a] = 1 + static_cast<int>(rng.below(3));
    s.kernel[a] = s.transposed ? s.stride[a] + 2 * static_cast<int>(rng.below(2))
                               : 1 + 2 * static_cast<int>(rng.below(3));
  }
  return s;
}

std::uint64_t coupling_weights(const ModelPlan& plan) {
  std::uint64_t w = 0;
  for (const auto& n : plan.nodes)
    if (n.kind == NodeKind::Invertible) w += 2 * count_params(n.coupling_sub_spec());
  return w;
}

}  // namespace

TEST_CASE("count_params examples") {
  CHECK(count_params(ConvSpec{2, 2, {1, 1, 1}, {1, 1, 1}, 1}) == 4);
  CHECK(count_params(ConvSpec{4, 8, {3, 3, 3}, {1, 1, 1}, 1}) == 864);
  CHECK(count_params(ConvSpec{4, 8, {3, 3, 3}, {1, 1, 1}, 4}) == 216);
}

TEST_CASE("count_flops examples") {
  CHECK(count_flops(ConvSpec{1, 1, {1, 1, 1}, {1, 1, 1}, 1}, {1, 1, 1}) == 2);
  const ConvSpec s{4, 8, {3, 3, 3}, {1, 1, 1}, 1};
  CHECK(count_flops(s, {4, 4, 4}) == 110592);
  ConvSpec s2 = s;
  s2.stride = {2, 2, 2};
  CHECK(count_flops(s2, {4, 4, 4}) * 8 == count_flops(s, {4, 4, 4}));
}

TEST_CASE("cost formulas equal brute-force enumeration and scale by 1/G") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_spec(rng);
    const Dims3 in{1 + rng.below(6), 1 + rng.below(6), 1 + rng.below(6)};
    CHECK(count_params(s) == enumerate_weights(s));
    CHECK(count_flops(s, in) == enumerate_flops(s, in));
    ConvSpec plain = s;
    plain.groups = 1;
    CHECK(count_params(plain) == s.groups * count_params(s));
    CHECK(count_flops(plain, in) == s.groups * count_flops(s, in));
    CHECK(plain.output_extent(in) == s.output_extent(in));
  }
}

TEST_CASE("full-scale totals") {
  const auto p = paper_profile();
  const auto s = model_cost(build_model(Variant::S, p, 8), p.input);
  const auto g = model_cost(build_model(Variant::G, p, 8), p.input);
  CHECK(s.weights == doctest::Approx(35.95e6).epsilon(0.10));
  CHECK(g.weights == doctest::Approx(15.60e6).epsilon(0.10));
  const double ratio = double(g.weights) / double(s.weights);
  CHECK(ratio >= 0.40);
  CHECK(ratio <= 0.47);
  CHECK(s.flops() / 1e9 == doctest::Approx(3062.90).epsilon(0.10));
  CHECK(g.flops() / 1e9 == doctest::Approx(2760.88).epsilon(0.10));
}

TEST_CASE("report totals equal the sum of the layers") {
  const auto p = paper_profile();
  for (auto v : {Variant::S, Variant::I, Variant::G, Variant::Full}) {
    const auto c = model_cost(build_model(v, p, 8, {2, true}), p.input);
    std::uint64_t w = 0, b = 0, a = 0, cf = 0, ef = 0;
    for (const auto& l : c.layers) {
      w += l.weights;
      b += l.biases;
      a += l.bn_affine;
      cf += l.conv_flops;
      ef += l.elementwise_flops;
    }
    CHECK(w == c.weights);
    CHECK(b == c.biases);
    CHECK(a == c.bn_affine);
    CHECK(cf == c.conv_flops);
    CHECK(ef == c.elementwise_flops);
    CHECK(c.params(true) == w + b + a);

    std::stringstream ss;
    c.write_json_lines(ss);
    std::string line, last;
    std::size_t n = 0;
    while (std::getline(ss, line)) {
      last = line;
      ++n;
    }
    CHECK(n == c.layers.size() + 1);
    const auto j = nlohmann::json::parse(last);
    CHECK(j.at("record") == "totals");
    CHECK(j.at("weights").get<std::uint64_t>() == c.weights);
    CHECK(j.at("flops").get<std::uint64_t>() == c.flops());
  }
}

TEST_CASE("invertible depth adds exactly the extra coupling layers") {
  const auto p = paper_profile();
  for (auto v : {Variant::I, Variant::Full}) {
    const auto base_plan = build_model(v, p, 8);
    const auto base = model_cost(base_plan, p.input).weights;
    const auto per_depth = coupling_weights(base_plan);
    for (int n = 2; n <= 4; ++n)
      CHECK(model_cost(build_model(v, p, 8, {n, true}), p.input).weights - base == (n - 1) * per_depth);
  }
}

TEST_CASE("memory ledger: plain blocks versus an invertible module") {
  ModelPlan plain, inv;
  PlanNode c;
  c.kind = NodeKind::ConvBlock;
  c.conv = ConvSpec{4, 4, {3, 3, 3}, {1, 1, 1}, 1};
  for (int i = 0; i < 3; ++i) {
    c.name = "c" + std::to_string(i);
    plain.nodes.push_back(c);
  }
  PlanNode m;
  m.kind = NodeKind::Invertible;
  m.name = "m";
  m.channels = 4;
  m.n_layers = 3;
  inv.nodes.push_back(m);
  const InputGeometry in{4, 4, 4, 4};
  const auto a = memory_ledger(plain, in);
  const auto b = memory_ledger(inv, in);
  CHECK(a.events.size() == 3);
  CHECK(a.total_elements == 3 * 256);
  CHECK(b.events.size() == 1);
  CHECK(b.total_elements == 256);

  const auto e = memory_ledger(ModelPlan{}, in);
  CHECK(e.events.empty());
  CHECK(e.peak_elements == 0);
  CHECK(e.total_elements == 0);
  CHECK(model_cost(ModelPlan{}, in).flops() == 0);
}

TEST_CASE("memory ledger trends across block depth") {
  const auto p = paper_profile();
  std::vector<std::uint64_t> full, grouped;
  for (int n = 1; n <= 4; ++n) {
    full.push_back(memory_ledger(build_model(Variant::Full, p, 8, {n, true}), p.input).total_elements);
    grouped.push_back(memory_ledger(build_model(Variant::G, p, 8, {n, true}), p.input).total_elements);
  }
  for (int n = 1; n < 4; ++n) {
    CHECK(full[n] == full[0]);
    CHECK(grouped[n] > grouped[n - 1]);
    CHECK(grouped[n] - grouped[n - 1] == grouped[1] - grouped[0]);
  }
}

TEST_CASE("symbolic ledger agrees with a real training forward") {
  const auto p = desk_profile(16, {4, 24, 4, 4}, {4, 4, 4});
  for (auto v : {Variant::S, Variant::I, Variant::G, Variant::Full}) {
    for (int n : {1, 3}) {
      Rng rng(2);
      const auto plan = build_model(v, p, 4, {n, true});
      Network<float> net(plan, rng);
      ActivationLedger real;
      ForwardContext ctx;
      ctx.training = true;
      ctx.ledger = &real;
      net.forward(randn<float>(rng, {2, 4, 24, 4, 4}, 0, 1), ctx);
      const auto sym = memory_ledger(plan, p.input, 2);
      INFO(variant_name(v), " n=", n);
      REQUIRE(real.events.size() == sym.events.size());
      for (std::size_t i = 0; i < sym.events.size(); ++i) {
        CHECK(real.events[i].layer == sym.events[i].layer);
        CHECK(real.events[i].elements == sym.events[i].elements);
      }
      net.release();
    }
  }
}
