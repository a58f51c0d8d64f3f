#pragma once

// Loss assembly (smoothed cross-entropy, structural regularizers, expert
// routing losses), AdamW with decoupled decay and global-norm clipping, a
// warmup+cosine schedule, a deterministic training loop over a synthetic
// dataset, and the population-limit sweep.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hgvt/model.hpp"

namespace hgvt {

struct TrainConfig {
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip = 1.0;
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 10;
  std::size_t total_steps = 200;
  std::size_t batch_size = 8;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;

  void validate() const;  // throws TensorError if warmup >= total
};

// Class-conditioned colored blobs: each class owns a base color and a blob
// center; samples perturb both. Fully reproducible from the seed.
struct SyntheticDataset {
  std::size_t n_classes = 0;
  std::size_t image_side = 0;
  std::size_t channels = 3;
  std::vector<Tensor> images;  // each {C, H, W}
  std::vector<std::size_t> labels;

  std::size_t size() const { return images.size(); }
};
SyntheticDataset make_synthetic_dataset(std::size_t n_samples,
                                        std::size_t n_classes,
                                        std::size_t image_side,
                                        std::uint64_t seed,
                                        std::size_t channels = 3);

// -log sum_c q_c softmax(logits)_c with q = smoothed one-hot.
Var smoothed_cross_entropy(Tape& t, Var logits, std::size_t label,
                           double smoothing);

// Batch-level load balancing over experts: |vE| * sum_e f_e * mean_prob_e,
// where f_e is the (non-differentiable) fraction of the batch routed to
// expert e by argmax and mean_prob_e the batch-mean gate probability.
Var expert_density_loss(Tape& t, const std::vector<Var>& gate_probs);

// -log p_argmax, pushing the gate toward confident routing (argmax target is
// gradient-stopped by construction).
Var expert_confidence_loss(Tape& t, Var gate_probs);

struct LossBreakdown {
  double total = 0;
  double ce = 0;          // un-weighted component values
  double population = 0;
  double diversity = 0;
  double expert_density = 0;
  double expert_confidence = 0;
};

struct TotalLoss {
  Var loss;
  LossBreakdown parts;
};

// Batch loss over forward results sharing one tape:
// mean CE + lambda_pop*mean-over-layers(L_POP) + lambda_div*mean(L_DIV)
// + lambda_exp*(density + lambda_ce*confidence).
TotalLoss total_loss(Tape& t, const std::vector<ForwardResult>& results,
                     const std::vector<std::size_t>& labels,
                     const ModelConfig& cfg, const TrainConfig& tc);

// Linear warmup to peak, then cosine decay to 0. lr(warmup_steps) == peak;
// lr(total_steps) == 0.
double cosine_lr(std::size_t step, std::size_t warmup_steps,
                 std::size_t total_steps, double peak);

// Scales all gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

struct AdamWState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
};

// One decoupled-weight-decay Adam step. Norm scales and biases are excluded
// from decay.
void adamw_step(ModelWeights& w, const std::vector<Tensor>& grads,
                AdamWState& state, const TrainConfig& tc, double lr);

struct TrainResult {
  ModelWeights weights;
  std::vector<std::string> log_lines;  // newline-delimited JSON records
  LossBreakdown last_loss;
  double last_accuracy = 0;
};

// Deterministic loop: per step, draw a batch, forward on one tape, backward,
// clip, AdamW. Logs {step, loss components, sparsity, acc} per step. Throws
// TensorError naming the step and breakdown on non-finite loss. Saves a
// checkpoint to checkpoint_path if non-empty.
TrainResult train(const SyntheticDataset& ds, const ModelConfig& cfg,
                  const TrainConfig& tc,
                  const std::string& checkpoint_path = "",
                  std::ostream* log_stream = nullptr);

struct SweepRow {
  double beta = 0, gamma = 0;
  bool regularized = true;  // false = population penalty disabled
  double top1 = 0, he = 0, sil = 0, ics = 0, icd = 0, sparsity = 0;
};

// Trains one model per (beta, gamma) grid cell (beta <= 0 disables the
// population penalty) and evaluates quality metrics on the dataset.
std::vector<SweepRow> population_sweep(
    const SyntheticDataset& ds, ModelConfig cfg, TrainConfig tc,
    const std::vector<std::pair<double, double>>& grid);

}  // namespace hgvt
