#pragma once

// Analysis and tooling surface: hypergraph slice export for visualization,
// the class-to-expert taxonomy assignment rule, a per-component timing bench,
// and the command-line dispatcher.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hgvt/model.hpp"

namespace hgvt {

struct SliceEdge {
  std::size_t edge = 0;           // primary-hyperedge column
  std::size_t marker = 0;         // shared across duplicate appearances
  bool duplicated = false;        // appears under more than one vertex
  std::vector<double> intensity;  // soft membership per image vertex, |iV|
};

struct SliceVertex {
  std::size_t vertex = 0;     // virtual-vertex row
  double contribution = 0;    // soft membership to the root expert edge
  std::vector<SliceEdge> edges;  // top-H by membership
};

struct GraphSliceExport {
  std::size_t root_expert = 0;  // virtual-edge index (0-based among experts)
  double confidence = 0;
  std::vector<SliceVertex> direct;    // contribution > 0.1
  std::vector<std::size_t> indirect;  // 1-hop virtual vertices
};

// Runs an inference forward pass and slices the final-layer adjacency around
// the routed expert. Throws for checkpoints without expert pooling.
GraphSliceExport export_graph_slices(const Checkpoint& ckpt, const Tensor& image,
                                     std::size_t H = 5);

// Stable JSON round-trip (parse -> re-emit is byte-identical).
std::string slices_to_json(const GraphSliceExport& s);
GraphSliceExport slices_from_json(const std::string& text);

struct ExpertAssignment {
  // per class: (expert index, probability), in descending probability order
  std::vector<std::vector<std::pair<std::size_t, double>>> per_class;
};

// Per class: sort experts by probability descending, always take the first;
// after taking an expert with mass p (remaining untaken mass r) take the next
// iff p < (2/3)(p + r); stop once the cumulative mass reaches 0.80.
ExpertAssignment assign_classes_to_experts(
    const std::vector<std::vector<double>>& histograms);

struct BenchStat {
  double mean_ms = 0;
  double std_ms = 0;  // 0 when iters == 1
};

struct BenchResult {
  BenchStat patch, cluster, spatial, aggregate, distribute, ffn, total;
  double images_per_s = 0;
  std::size_t iters = 0, warmup = 0, batch = 1;

  double component_sum_ms() const {
    return patch.mean_ms + cluster.mean_ms + spatial.mean_ms +
           aggregate.mean_ms + distribute.mean_ms + ffn.mean_ms;
  }
};

// Instrumented forward pass (section timers nested inside the total timer, so
// the component sum never exceeds the total).
BenchResult bench(const ModelConfig& cfg, std::size_t batch = 1,
                  std::size_t iters = 100, std::size_t warmup = 10,
                  std::uint64_t seed = 0);

// argv-style entry point (program name excluded). Returns the exit status:
// 0 success, 2 usage error, 1 runtime failure.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace hgvt
