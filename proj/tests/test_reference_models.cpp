// Reference architecture walker: every pinned per-category count must be
// reproduced exactly, plus structural sanity on the walked graphs and a
// couple of resolution-scaling checks.

#include <catch2/catch_amalgamated.hpp>
#include <chrono>

#include "mixquant/reference_models.hpp"

using namespace mixquant;

TEST_CASE("all five architectures reproduce the pinned counts exactly",
          "[reference]") {
  auto rows = verify_reference_counts();
  REQUIRE(rows.size() == 5);
  for (const auto& r : rows) {
    INFO("architecture " << r.arch);
    for (int i = 0; i < 7; ++i) {
      INFO("category " << i << " got " << r.got[i] << " want " << r.want[i]);
      CHECK(r.got[i] == r.want[i]);
    }
    REQUIRE(r.pass);
  }
}

TEST_CASE("category identities hold on every graph", "[reference]") {
  for (const auto& name : reference_architectures()) {
    const auto g = build_reference_graph(name, 224);
    INFO("architecture " << name);
    REQUIRE(g.total_params() == g.mvm_params() + g.bn_params);
    REQUIRE(g.first_params() > 0);
    REQUIRE(g.last_params() > 0);
    REQUIRE(g.first_params() + g.last_params() <= g.mvm_params());
    REQUIRE(g.act_sum() > 0);
    REQUIRE(g.last_act > 0);
  }
}

TEST_CASE("weights and activations carry positive extents and names",
          "[reference]") {
  for (const auto& name : reference_architectures()) {
    const auto g = build_reference_graph(name, 224);
    REQUIRE_FALSE(g.weights.empty());
    REQUIRE_FALSE(g.acts.empty());
    for (const auto& w : g.weights) {
      REQUIRE_FALSE(w.name.empty());
      REQUIRE(w.weight_elems > 0);
    }
    for (const auto& a : g.acts) {
      REQUIRE_FALSE(a.name.empty());
      REQUIRE(a.elems > 0);
    }
  }
}

TEST_CASE("exactly one first and one last stage per architecture",
          "[reference]") {
  for (const auto& name : reference_architectures()) {
    const auto g = build_reference_graph(name, 224);
    int first = 0, last = 0;
    for (const auto& w : g.weights) {
      if (w.role == RefRole::first) ++first;
      if (w.role == RefRole::last) ++last;
    }
    INFO("architecture " << name);
    REQUIRE(first == 1);
    REQUIRE(last == 1);
  }
}

TEST_CASE("parameter counts are resolution-independent, activations are not",
          "[reference]") {
  const auto a = build_reference_graph("resnet18", 224);
  const auto b = build_reference_graph("resnet18", 192);
  REQUIRE(a.total_params() == b.total_params());
  REQUIRE(a.act_sum() > b.act_sum());
}

TEST_CASE("unknown architecture names are rejected", "[reference]") {
  REQUIRE_THROWS_AS(build_reference_graph("vgg16", 224), error);
}

TEST_CASE("walker runtime stays far under the bound", "[reference]") {
  // The acceptance bound is 5 seconds for all five; a single rebuild loop
  // here guards against accidental quadratic blowups.
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 20; ++i)
    for (const auto& name : reference_architectures())
      (void)build_reference_graph(name, 224);
  const double ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
  REQUIRE(ms < 5000.0);
}
