#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "hgvt/analysis.hpp"
#include "hgvt/model.hpp"

using namespace hgvt;

namespace {

ModelConfig nano() { return preset("nano"); }

Checkpoint nano_checkpoint(std::uint64_t seed = 5) {
  Checkpoint ck;
  ck.config = nano();
  ck.weights = init_weights(ck.config, seed);
  return ck;
}

Tensor noise_image(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor img({cfg.channels, cfg.image_size, cfg.image_size});
  for (double& v : img.data()) v = nd(rng);
  return img;
}

int run_cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream cap_out, cap_err;
  std::streambuf* old_out = std::cout.rdbuf(cap_out.rdbuf());
  std::streambuf* old_err = std::cerr.rdbuf(cap_err.rdbuf());
  int rc = cli_dispatch(args);
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  if (out) *out = cap_out.str();
  return rc;
}

}  // namespace

TEST_CASE("graph slice export: structure and thresholds") {
  Checkpoint ck = nano_checkpoint();
  const GraphDims& d = ck.config.dims;
  GraphSliceExport s = export_graph_slices(ck, noise_image(ck.config, 1), 3);

  CHECK(s.root_expert < d.n_virtual_edges);
  CHECK(s.confidence > 0.0);
  CHECK(s.confidence <= 1.0);

  std::set<std::size_t> direct_vs;
  for (const SliceVertex& sv : s.direct) {
    CHECK(sv.vertex >= d.n_image_vertices);
    CHECK(sv.vertex < d.vertices());
    CHECK(sv.contribution > 0.1);
    CHECK(sv.edges.size() <= 3);
    direct_vs.insert(sv.vertex);
    for (std::size_t i = 0; i + 1 < sv.edges.size(); ++i) {
      // intensities are soft memberships, so top edges must be sorted
      // by the exporting vertex's own membership; verify edge ids are primary
      CHECK(sv.edges[i].edge < d.n_primary_edges);
    }
    for (const SliceEdge& se : sv.edges) {
      CHECK(se.intensity.size() == d.n_image_vertices);
      for (double v : se.intensity) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }

  // markers: shared per edge id, duplicated iff the edge appears twice+
  std::map<std::size_t, std::set<std::size_t>> markers_of_edge;
  std::map<std::size_t, std::size_t> count_of_edge;
  for (const SliceVertex& sv : s.direct)
    for (const SliceEdge& se : sv.edges) {
      markers_of_edge[se.edge].insert(se.marker);
      ++count_of_edge[se.edge];
    }
  for (const SliceVertex& sv : s.direct)
    for (const SliceEdge& se : sv.edges) {
      CHECK(markers_of_edge[se.edge].size() == 1);
      CHECK(se.duplicated == (count_of_edge[se.edge] > 1));
    }
  // marker ids are dense 0..n-1
  std::set<std::size_t> all_markers;
  for (auto& [e, ms] : markers_of_edge) all_markers.insert(*ms.begin());
  std::size_t expect = 0;
  for (std::size_t m : all_markers) CHECK(m == expect++);

  // indirect: sorted virtual vertices, disjoint from the direct set
  for (std::size_t i = 0; i + 1 < s.indirect.size(); ++i)
    CHECK(s.indirect[i] < s.indirect[i + 1]);
  for (std::size_t v : s.indirect) {
    CHECK(v >= d.n_image_vertices);
    CHECK(!direct_vs.count(v));
  }
}

TEST_CASE("graph slice export: requires expert pooling") {
  Checkpoint ck = nano_checkpoint();
  ck.config.pooling = Pooling::average;
  ck.weights = init_weights(ck.config, 5);
  CHECK_THROWS_AS(export_graph_slices(ck, noise_image(ck.config, 1), 3),
                  TensorError);
}

TEST_CASE("graph slice JSON round-trip is byte identical") {
  GraphSliceExport s;
  s.root_expert = 2;
  s.confidence = 0.8125;
  SliceVertex v1;
  v1.vertex = 4;
  v1.contribution = 0.5;
  v1.edges = {{1, 0, true, {0.25, 0.75}}, {3, 1, false, {1.0, 0.0}}};
  SliceVertex v2;
  v2.vertex = 6;
  v2.contribution = 1.0 / 3.0;  // non-terminating binary fraction
  v2.edges = {{1, 0, true, {0.1, 0.2}}};
  s.direct = {v1, v2};
  s.indirect = {5, 7};

  std::string j1 = slices_to_json(s);
  GraphSliceExport r = slices_from_json(j1);
  std::string j2 = slices_to_json(r);
  CHECK(j1 == j2);
  CHECK(r.root_expert == 2);
  CHECK(r.confidence == doctest::Approx(0.8125));
  REQUIRE(r.direct.size() == 2);
  CHECK(r.direct[0].edges[0].duplicated);
  CHECK(r.direct[1].contribution == s.direct[1].contribution);  // exact
  CHECK(r.indirect == std::vector<std::size_t>{5, 7});

  // a live export must round-trip too
  Checkpoint ck = nano_checkpoint();
  GraphSliceExport live = export_graph_slices(ck, noise_image(ck.config, 2), 4);
  std::string a = slices_to_json(live);
  CHECK(a == slices_to_json(slices_from_json(a)));
}

TEST_CASE("expert assignment: worked examples") {
  ExpertAssignment a = assign_classes_to_experts({{0.54, 0.28, 0.12, 0.06},
                                                  {0.46, 0.24, 0.22, 0.08},
                                                  {1.0, 0.0, 0.0}});
  REQUIRE(a.per_class.size() == 3);
  CHECK(a.per_class[0].size() == 2);
  CHECK(a.per_class[0][0].first == 0);
  CHECK(a.per_class[0][1].first == 1);
  CHECK(a.per_class[1].size() == 3);
  CHECK(a.per_class[1][2].first == 2);
  CHECK(a.per_class[1][2].second == doctest::Approx(0.22));
  CHECK(a.per_class[2].size() == 1);
  CHECK(a.per_class[2][0].first == 0);
}

TEST_CASE("expert assignment: dominance rule can stop below 80%") {
  // first expert holds 70%: 0.7 >= (2/3)(0.7 + 0.3), so nothing else is taken
  ExpertAssignment a = assign_classes_to_experts({{0.7, 0.1, 0.1, 0.1}});
  REQUIRE(a.per_class.size() == 1);
  CHECK(a.per_class[0].size() == 1);
  CHECK(a.per_class[0][0].first == 0);
}

TEST_CASE("expert assignment: unsorted input and ties") {
  // same masses, shuffled: rule must operate on the sorted order
  ExpertAssignment a = assign_classes_to_experts({{0.12, 0.54, 0.06, 0.28}});
  REQUIRE(a.per_class[0].size() == 2);
  CHECK(a.per_class[0][0].first == 1);
  CHECK(a.per_class[0][1].first == 3);

  CHECK_THROWS_AS(assign_classes_to_experts({}), TensorError);
  CHECK_THROWS_AS(assign_classes_to_experts({{}}), TensorError);
}

TEST_CASE("bench: component sum bounded by total, single iter has zero std") {
  ModelConfig cfg = nano();
  BenchResult r = bench(cfg, 1, 2, 0, 3);
  CHECK(r.total.mean_ms > 0.0);
  CHECK(r.component_sum_ms() <= r.total.mean_ms + 1e-9);
  CHECK(r.images_per_s > 0.0);
  CHECK(r.iters == 2);

  BenchResult one = bench(cfg, 1, 1, 0, 3);
  CHECK(one.total.std_ms == 0.0);
  CHECK(one.patch.std_ms == 0.0);
  CHECK(one.ffn.std_ms == 0.0);
}

TEST_CASE("cli: bad invocations return usage status 2") {
  CHECK(run_cli({"no-such-command"}) == 2);
  CHECK(run_cli({"bench", "--no-such-flag"}) == 2);
  CHECK(run_cli({}) == 2);
  // missing required option
  CHECK(run_cli({"bench"}) == 2);
}

TEST_CASE("cli: count smoke test with JSON output") {
  std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "hgvt_cli_test";
  std::filesystem::create_directories(dir);
  std::string cfg_path = (dir / "nano.json").string();
  std::ofstream(cfg_path) << config_to_json(nano());

  std::string out;
  CHECK(run_cli({"--json", "count", "--config", cfg_path}, &out) == 0);
  CHECK(out.find("\"params\"") != std::string::npos);
  CHECK(out.find("\"flops\"") != std::string::npos);

  // plain output path
  CHECK(run_cli({"count", "--config", cfg_path}, &out) == 0);
  CHECK(out.find("params") != std::string::npos);

  // assign-experts from a histogram file
  std::string hist_path = (dir / "hist.json").string();
  std::ofstream(hist_path) << "[[0.54, 0.28, 0.12, 0.06]]";
  CHECK(run_cli({"assign-experts", "--histograms", hist_path}, &out) == 0);
  CHECK(out.find("\"expert\"") != std::string::npos);

  // runtime failure (missing file) is status 1, not a crash
  CHECK(run_cli({"count", "--config", (dir / "missing.json").string()}) == 1);
  std::filesystem::remove_all(dir);
}
