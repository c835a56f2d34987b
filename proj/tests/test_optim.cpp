#include <doctest.h>

#include <cmath>
#include <random>

#include "optim.hpp"

using namespace xs;

namespace {

ParameterSet scalar_set(float x0) {
  ParameterSet ps("P");
  ps.add("x", {1, 1, 1, 1});
  ps.get("x").mutable_data()[0] = x0;
  return ps;
}

void set_grad(ParameterSet& ps, const std::string& name, std::vector<float> g) {
  auto& t = ps.get(name);
  t.clear_grad();
  t.impl()->accumulate_grad(g);
}

}  // namespace

TEST_CASE("first step moves by about lr against the gradient") {
  AdamSettings s;
  for (float g : {0.3f, -7.f, 1e-3f}) {
    auto ps = scalar_set(1.f);
    set_grad(ps, "x", {g});
    adam_update(ps, s);
    const double moved = 1.0 - ps.get("x").data()[0];
    // Bias-corrected first step: lr * g / (|g| + eps).
    const double expect = s.learning_rate * g / (std::abs(g) + s.eps);
    CHECK(moved == doctest::Approx(expect).epsilon(1e-4));
  }
}

TEST_CASE("zero gradient from a fresh state leaves the parameter alone") {
  auto ps = scalar_set(0.25f);
  set_grad(ps, "x", {0.f});
  adam_update(ps, AdamSettings{});
  CHECK(ps.get("x").data()[0] == 0.25f);
}

TEST_CASE("zero gradient decays the moments") {
  AdamSettings s;
  auto ps = scalar_set(0.25f);
  set_grad(ps, "x", {2.f});
  adam_update(ps, s);
  const float m = ps.parameters()[0].moments.m[0], v = ps.parameters()[0].moments.v[0];
  set_grad(ps, "x", {0.f});
  adam_update(ps, s);
  CHECK(ps.parameters()[0].moments.m[0] == doctest::Approx(m * s.beta1).epsilon(1e-6));
  CHECK(ps.parameters()[0].moments.v[0] == doctest::Approx(v * s.beta2).epsilon(1e-6));
  CHECK(ps.parameters()[0].moments.step == 2);
}

TEST_CASE("descends x^2 from 1") {
  AdamSettings s;
  s.learning_rate = 0.1;
  auto ps = scalar_set(1.f);
  for (int i = 0; i < 100; ++i) {
    const float x = ps.get("x").data()[0];
    set_grad(ps, "x", {2 * x});
    adam_update(ps, s);
  }
  CHECK(std::abs(ps.get("x").data()[0]) < 0.05f);
}

TEST_CASE("matches a double-precision reference over many steps") {
  AdamSettings s;
  s.learning_rate = 0.01;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0, 1);
  ParameterSet ps("P");
  ps.add("w", {1, 1, 1, 5});
  std::vector<double> w(5, 0.0), m(5, 0.0), v(5, 0.0);
  for (int t = 1; t <= 50; ++t) {
    std::vector<float> g(5);
    for (float& x : g) x = static_cast<float>(nd(rng));
    set_grad(ps, "w", g);
    adam_update(ps, s);
    for (int i = 0; i < 5; ++i) {
      m[i] = s.beta1 * m[i] + (1 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1 - s.beta2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(s.beta1, t)), vh = v[i] / (1 - std::pow(s.beta2, t));
      w[i] -= s.learning_rate * mh / (std::sqrt(vh) + s.eps);
    }
  }
  for (int i = 0; i < 5; ++i) CHECK(ps.get("w").data()[i] == doctest::Approx(w[i]).epsilon(1e-4));
}

TEST_CASE("parameters without gradient are skipped and gradients cleared") {
  ParameterSet ps("P");
  ps.add("a", {1, 1, 1, 2});
  ps.add("b", {1, 1, 1, 2});
  set_grad(ps, "a", {1.f, -1.f});
  const auto report = adam_update(ps, AdamSettings{});
  CHECK(report.updated == 1);
  REQUIRE(report.skipped.size() == 1);
  CHECK(report.skipped[0] == "b");
  CHECK(ps.get("a").data()[0] < 0.f);
  CHECK(ps.get("b").data()[0] == 0.f);
  CHECK_FALSE(ps.get("a").has_grad());
  CHECK(ps.update_counter() == 1);

  const auto none = adam_update(ps, AdamSettings{});
  CHECK(none.updated == 0);
  CHECK(ps.update_counter() == 1);
}
