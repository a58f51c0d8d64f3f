#pragma once

// Whole-model assembly: patch embedding (conv stem or flat projection),
// learned virtual-element embeddings, the block stack, pooling heads,
// classifier, analytic parameter/FLOP accounting, and checkpoint I/O.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hgvt/attention.hpp"
#include "hgvt/hypergraph.hpp"
#include "hgvt/tensor.hpp"

namespace hgvt {

enum class Stem { conv_stem, patch_projection };
enum class Pooling { average, image, expert, expert_image };

struct ModelConfig {
  std::string name = "custom";
  GraphDims dims;
  std::size_t d_f = 64, d_a = 64;
  std::size_t depth = 10, heads = 2;
  std::size_t patch_size = 4, image_size = 32, channels = 3;
  std::size_t classes = 10;
  Stem stem = Stem::conv_stem;
  Pooling pooling = Pooling::expert;
  bool drop_image_at_head = false;  // "DI": classifier sees the expert half only
  std::size_t expert_top_k = 1;

  double alpha = kDefaultAlpha;
  double beta = 10.0, gamma = 0.5;
  double lambda_pop = 1.0, lambda_div = 1.0, lambda_exp = 1.0, lambda_ce = 0.1;
  double expert_noise_sigma = 0.1, expert_dropout = 0.1;
  double class_dropout = 0.0;
  double path_drop = 0.1;
  bool drop_decay = true;

  bool joint_ffn = true;
  Modulation modulation = Modulation::modified;
  bool scale_logits = false;
  // Gated-FFN hidden width; 0 means the default 3*(d_f+d_a).
  std::size_t ffn_hidden_override = 0;

  std::size_t ffn_hidden() const {
    return ffn_hidden_override ? ffn_hidden_override : 3 * (d_f + d_a);
  }
  std::size_t pooled_width() const {
    return pooling == Pooling::expert_image ? 2 * d_f : d_f;
  }
  std::size_t head_width() const {
    return (pooling == Pooling::expert_image && drop_image_at_head) ? d_f
                                                                    : pooled_width();
  }
  void validate() const;  // throws TensorError on inconsistent fields
};

// Named presets: "mu", "lt", "ti", "s" plus the test-scale "nano".
ModelConfig preset(const std::string& name);

// Flat learned-tensor store in canonical order; the single source of truth
// for parameter shapes, counting, checkpoints, and optimizer state.
struct ModelWeights {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;

  std::size_t index_of(const std::string& name) const;  // throws if missing
  Tensor& operator[](const std::string& name) { return tensors[index_of(name)]; }
  const Tensor& operator[](const std::string& name) const {
    return tensors[index_of(name)];
  }
  std::size_t total_params() const;
};

// Canonical (name, shape) listing for a config; init fills values.
std::vector<std::pair<std::string, std::vector<std::size_t>>> weight_shapes(
    const ModelConfig& cfg);
ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);

// Tape-bound handles, one per stored tensor, in the same order.
struct ModelParams {
  std::vector<Var> vars;
  const ModelWeights* weights = nullptr;
  Var at(const std::string& name) const;
};
ModelParams bind_params(Tape& t, const ModelWeights& w);

// Fixed sinusoidal position table, |iV| x d_f.
Tensor sinusoidal_positions(std::size_t n, std::size_t dim);

// Image -> |iV| x d_f rows (position embeddings included).
Var patch_embed(Tape& t, const Tensor& image, const ModelParams& p,
                const ModelConfig& cfg);

// Compose the layer-0 feature state from the image and learned embeddings.
FeatureState init_state(Tape& t, const Tensor& image, const ModelParams& p,
                        const ModelConfig& cfg);

struct ExpertPool {
  Var pooled;      // {1, d_f}
  Var gate_probs;  // {1, |vE|}
};

// Softmax gate over virtual hyperedges. Training: noisy logits + logit
// dropout, full weighted average. Inference: renormalized top-k average.
ExpertPool expert_pool(Tape& t, Var xe_virtual, Var gate_w, Var gate_b,
                       bool training, std::size_t top_k, double noise_sigma,
                       double dropout, std::mt19937_64* rng);

Var image_pool(Tape& t, Var xv_image);

struct ForwardResult {
  Var logits;  // {1, classes}
  std::vector<Adjacency> per_layer;
  FeatureState final_state;
  Var gate_probs;   // invalid Var unless expert pooling is active
  Var pooled;       // classifier input
  Var image_half;   // valid for image / expert_image pooling
  Var expert_half;  // valid for expert / expert_image pooling
  std::vector<Var> layer_soft;           // per-layer soft adjacency handles
  std::vector<FeatureState> layer_states;  // per-layer INPUT feature states
};

ForwardResult forward_classify(Tape& t, const Tensor& image, const ModelParams& p,
                               const ModelConfig& cfg, bool training = false,
                               std::mt19937_64* rng = nullptr);

std::size_t count_params(const ModelConfig& cfg);
// Analytic forward multiply-accumulate count at the given input resolution,
// dense attention (training-mode cost).
std::size_t count_flops(const ModelConfig& cfg, std::size_t resolution);

// Checkpoint: binary tensor file + "<path>.json" config sidecar.
void save_checkpoint(const std::string& path, const ModelWeights& w,
                     const ModelConfig& cfg);
struct Checkpoint {
  ModelWeights weights;
  ModelConfig config;
};
Checkpoint load_checkpoint(const std::string& path);

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace hgvt
