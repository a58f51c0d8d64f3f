#include "hgvt/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "hgvt/metrics.hpp"

namespace hgvt {

using nlohmann::json;

void TrainConfig::validate() const {
  if (warmup_steps >= total_steps && total_steps > 0)
    throw TensorError("train config: warmup_steps must be < total_steps");
  if (batch_size == 0) throw TensorError("train config: batch_size must be > 0");
}

SyntheticDataset make_synthetic_dataset(std::size_t n_samples,
                                        std::size_t n_classes,
                                        std::size_t image_side,
                                        std::uint64_t seed,
                                        std::size_t channels) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> jitter(0.0, 0.08);

  // Per-class signature: a base color, a blob center, and a stripe frequency.
  struct ClassSig {
    std::vector<double> color;
    double cx, cy, freq, angle;
  };
  std::vector<ClassSig> sig(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    sig[c].color.resize(channels);
    for (std::size_t k = 0; k < channels; ++k) sig[c].color[k] = u01(rng);
    sig[c].cx = 0.2 + 0.6 * u01(rng);
    sig[c].cy = 0.2 + 0.6 * u01(rng);
    sig[c].freq = 2.0 + 3.0 * u01(rng);
    sig[c].angle = 3.14159265358979 * u01(rng);
  }

  SyntheticDataset ds;
  ds.n_classes = n_classes;
  ds.image_side = image_side;
  ds.channels = channels;
  const double sigma = 0.22;
  for (std::size_t n = 0; n < n_samples; ++n) {
    std::size_t label = n % n_classes;  // balanced, order fixed by index
    const ClassSig& s = sig[label];
    double cx = s.cx + jitter(rng), cy = s.cy + jitter(rng);
    Tensor img({channels, image_side, image_side});
    for (std::size_t k = 0; k < channels; ++k)
      for (std::size_t y = 0; y < image_side; ++y)
        for (std::size_t x = 0; x < image_side; ++x) {
          double fx = (double(x) + 0.5) / double(image_side);
          double fy = (double(y) + 0.5) / double(image_side);
          double d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
          double blob = std::exp(-d2 / (2.0 * sigma * sigma));
          double stripe =
              0.5 + 0.5 * std::sin(s.freq * 6.2831853 *
                                   (fx * std::cos(s.angle) + fy * std::sin(s.angle)));
          double v = s.color[k] * blob * stripe + 0.05 * jitter(rng);
          img.data()[(k * image_side + y) * image_side + x] = v;
        }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
  }
  return ds;
}

Var smoothed_cross_entropy(Tape& t, Var logits, std::size_t label,
                           double smoothing) {
  const std::size_t classes = t.value(logits).cols();
  if (label >= classes) throw TensorError("cross_entropy: label out of range");
  Tensor q({1, classes});
  for (std::size_t c = 0; c < classes; ++c)
    q.at(0, c) = smoothing / double(classes) + (c == label ? 1.0 - smoothing : 0.0);
  Var logp = log_row_softmax(t, logits);
  return scalar_mul(t, sum_all(t, mul(t, logp, t.constant(q, "ce_target"))), -1.0);
}

Var expert_density_loss(Tape& t, const std::vector<Var>& gate_probs) {
  if (gate_probs.empty()) throw TensorError("density loss: empty batch");
  const std::size_t n_experts = t.value(gate_probs[0]).cols();
  const std::size_t batch = gate_probs.size();

  // routed fraction per expert (argmax; no gradient by construction)
  Tensor f({1, n_experts});
  for (Var g : gate_probs) {
    const Tensor& p = t.value(g);
    std::size_t best = 0;
    for (std::size_t e = 1; e < n_experts; ++e)
      if (p.at(0, e) > p.at(0, best)) best = e;
    f.at(0, best) += 1.0 / double(batch);
  }

  Var mean_p = gate_probs[0];
  for (std::size_t b = 1; b < batch; ++b) mean_p = add(t, mean_p, gate_probs[b]);
  mean_p = scalar_mul(t, mean_p, 1.0 / double(batch));
  return scalar_mul(t, sum_all(t, mul(t, mean_p, t.constant(f, "routed_frac"))),
                    double(n_experts));
}

Var expert_confidence_loss(Tape& t, Var gate_probs) {
  const Tensor& p = t.value(gate_probs);
  std::size_t best = 0;
  for (std::size_t e = 1; e < p.cols(); ++e)
    if (p.at(0, e) > p.at(0, best)) best = e;
  Var picked = slice_cols(t, gate_probs, best, best + 1);
  return scalar_mul(t, sum_all(t, log_op(t, picked)), -1.0);
}

namespace {

double scalar_value(const Tape& t, Var v) { return t.value(v)[0]; }

bool uses_expert_pool(const ModelConfig& cfg) {
  return cfg.pooling == Pooling::expert || cfg.pooling == Pooling::expert_image;
}

}  // namespace

TotalLoss total_loss(Tape& t, const std::vector<ForwardResult>& results,
                     const std::vector<std::size_t>& labels,
                     const ModelConfig& cfg, const TrainConfig& tc) {
  if (results.empty() || results.size() != labels.size())
    throw TensorError("total_loss: batch/label size mismatch");
  const double batch = double(results.size());

  Var ce, pop, div;
  std::size_t n_layers = 0;
  for (std::size_t b = 0; b < results.size(); ++b) {
    Var sample_ce =
        smoothed_cross_entropy(t, results[b].logits, labels[b], tc.label_smoothing);
    ce = b == 0 ? sample_ce : add(t, ce, sample_ce);
    n_layers = results[b].layer_soft.size();
    for (std::size_t l = 0; l < n_layers; ++l) {
      Var lp = population_loss(t, results[b].layer_soft[l], cfg.beta, cfg.gamma);
      Var ld = diversity_loss(t, results[b].layer_states[l], cfg.dims);
      pop = pop.valid() ? add(t, pop, lp) : lp;
      div = div.valid() ? add(t, div, ld) : ld;
    }
  }
  ce = scalar_mul(t, ce, 1.0 / batch);
  double layer_scale = n_layers ? 1.0 / (batch * double(n_layers)) : 0.0;
  if (!pop.valid()) pop = t.constant(Tensor::scalar(0.0));
  if (!div.valid()) div = t.constant(Tensor::scalar(0.0));
  pop = scalar_mul(t, pop, layer_scale);
  div = scalar_mul(t, div, layer_scale);

  Var density = t.constant(Tensor::scalar(0.0));
  Var confidence = t.constant(Tensor::scalar(0.0));
  if (uses_expert_pool(cfg) && results[0].gate_probs.valid()) {
    std::vector<Var> gates;
    Var conf_sum;
    for (const ForwardResult& r : results) {
      gates.push_back(r.gate_probs);
      Var c = expert_confidence_loss(t, r.gate_probs);
      conf_sum = conf_sum.valid() ? add(t, conf_sum, c) : c;
    }
    density = expert_density_loss(t, gates);
    confidence = scalar_mul(t, conf_sum, 1.0 / batch);
  }

  Var total = ce;
  if (cfg.lambda_pop != 0.0)
    total = add(t, total, scalar_mul(t, pop, cfg.lambda_pop));
  if (cfg.lambda_div != 0.0)
    total = add(t, total, scalar_mul(t, div, cfg.lambda_div));
  if (cfg.lambda_exp != 0.0) {
    Var expert = add(t, density, scalar_mul(t, confidence, cfg.lambda_ce));
    total = add(t, total, scalar_mul(t, expert, cfg.lambda_exp));
  }

  TotalLoss out;
  out.loss = total;
  out.parts.total = scalar_value(t, total);
  out.parts.ce = scalar_value(t, ce);
  out.parts.population = scalar_value(t, pop);
  out.parts.diversity = scalar_value(t, div);
  out.parts.expert_density = scalar_value(t, density);
  out.parts.expert_confidence = scalar_value(t, confidence);
  return out;
}

double cosine_lr(std::size_t step, std::size_t warmup_steps,
                 std::size_t total_steps, double peak) {
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * double(step) / double(warmup_steps);
  if (step >= total_steps) return 0.0;
  double progress =
      double(step - warmup_steps) / double(total_steps - warmup_steps);
  return 0.5 * peak * (1.0 + std::cos(3.14159265358979323846 * progress));
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
  double sq = 0;
  for (const Tensor& g : grads)
    for (double v : g.data()) sq += v * v;
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    double scale = max_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.data()) v *= scale;
  }
  return norm;
}

namespace {

bool decay_excluded(const std::string& name) {
  bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
  is_bias = is_bias || name.find(".b_") != std::string::npos;
  return is_bias || name.find(".ns") != std::string::npos;
}

}  // namespace

void adamw_step(ModelWeights& w, const std::vector<Tensor>& grads,
                AdamWState& state, const TrainConfig& tc, double lr) {
  if (grads.size() != w.tensors.size())
    throw TensorError("adamw: gradient count mismatch");
  if (state.m.empty()) {
    for (const Tensor& t : w.tensors) {
      state.m.push_back(Tensor(t.shape()));
      state.v.push_back(Tensor(t.shape()));
    }
  }
  ++state.step;
  double bc1 = 1.0 - std::pow(tc.beta1, double(state.step));
  double bc2 = 1.0 - std::pow(tc.beta2, double(state.step));
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    double wd = decay_excluded(w.names[i]) ? 0.0 : tc.weight_decay;
    auto& p = w.tensors[i].data();
    auto& m = state.m[i].data();
    auto& v = state.v[i].data();
    const auto& g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = tc.beta1 * m[k] + (1.0 - tc.beta1) * g[k];
      v[k] = tc.beta2 * v[k] + (1.0 - tc.beta2) * g[k] * g[k];
      double mhat = m[k] / bc1, vhat = v[k] / bc2;
      p[k] -= lr * (mhat / (std::sqrt(vhat) + tc.adam_eps) + wd * p[k]);
    }
  }
}

TrainResult train(const SyntheticDataset& ds, const ModelConfig& cfg,
                  const TrainConfig& tc, const std::string& checkpoint_path,
                  std::ostream* log_stream) {
  cfg.validate();
  tc.validate();
  if (ds.size() == 0) throw TensorError("train: empty dataset");

  TrainResult out;
  out.weights = init_weights(cfg, tc.seed);
  AdamWState opt;
  std::mt19937_64 rng(tc.seed + 1);
  std::uniform_int_distribution<std::size_t> pick(0, ds.size() - 1);

  for (std::size_t step = 0; step < tc.total_steps; ++step) {
    Tape t;
    ModelParams params = bind_params(t, out.weights);
    std::vector<ForwardResult> results;
    std::vector<std::size_t> labels;
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      std::size_t idx = pick(rng);
      results.push_back(
          forward_classify(t, ds.images[idx], params, cfg, true, &rng));
      labels.push_back(ds.labels[idx]);
    }
    TotalLoss loss = total_loss(t, results, labels, cfg, tc);

    const LossBreakdown& lb = loss.parts;
    if (!std::isfinite(lb.total)) {
      std::ostringstream msg;
      msg << "train: non-finite loss at step " << step << " (ce=" << lb.ce
          << " pop=" << lb.population << " div=" << lb.diversity
          << " exp_density=" << lb.expert_density
          << " exp_conf=" << lb.expert_confidence << ")";
      throw TensorError(msg.str());
    }

    t.backward(loss.loss);
    std::vector<Tensor> grads;
    for (Var v : params.vars) grads.push_back(t.grad(v));
    clip_global_norm(grads, tc.grad_clip);
    adamw_step(out.weights, grads, opt, tc,
               cosine_lr(step, tc.warmup_steps, tc.total_steps, tc.peak_lr));

    std::size_t correct = 0;
    double sp = 0;
    for (std::size_t b = 0; b < results.size(); ++b) {
      const Tensor& lg = t.value(results[b].logits);
      std::size_t best = 0;
      for (std::size_t c = 1; c < lg.cols(); ++c)
        if (lg.at(0, c) > lg.at(0, best)) best = c;
      correct += best == labels[b];
      sp += sparsity(results[b].per_layer.back().hard, SparsityScope::all);
    }
    out.last_loss = lb;
    out.last_accuracy = double(correct) / double(results.size());

    json rec = {{"step", step},
                {"loss", lb.total},
                {"ce", lb.ce},
                {"pop", lb.population},
                {"div", lb.diversity},
                {"exp_density", lb.expert_density},
                {"exp_conf", lb.expert_confidence},
                {"sparsity", sp / double(results.size())},
                {"acc", out.last_accuracy}};
    out.log_lines.push_back(rec.dump());
    if (log_stream) (*log_stream) << out.log_lines.back() << "\n";
  }

  if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, out.weights, cfg);
  return out;
}

std::vector<SweepRow> population_sweep(
    const SyntheticDataset& ds, ModelConfig cfg, TrainConfig tc,
    const std::vector<std::pair<double, double>>& grid) {
  std::vector<SweepRow> rows;
  for (auto [beta, gamma] : grid) {
    ModelConfig run_cfg = cfg;
    SweepRow row;
    row.beta = beta;
    row.gamma = gamma;
    if (beta <= 0.0) {
      row.regularized = false;
      run_cfg.lambda_pop = 0.0;
    } else {
      if (beta <= gamma)
        throw TensorError("population sweep: beta must exceed gamma");
      run_cfg.beta = beta;
      run_cfg.gamma = gamma;
    }

    TrainResult r = train(ds, run_cfg, tc);

    std::size_t eval_n = std::min<std::size_t>(ds.size(), 32);
    std::size_t correct = 0, metric_n = 0;
    for (std::size_t i = 0; i < eval_n; ++i) {
      Tape t;
      ModelParams p = bind_params(t, r.weights);
      ForwardResult fr = forward_classify(t, ds.images[i], p, run_cfg, false);
      const Tensor& lg = t.value(fr.logits);
      std::size_t best = 0;
      for (std::size_t c = 1; c < lg.cols(); ++c)
        if (lg.at(0, c) > lg.at(0, best)) best = c;
      correct += best == ds.labels[i];

      ClusterView view;
      view.soft = fr.per_layer.back().soft;
      view.hard = fr.per_layer.back().hard;
      view.features = t.value(fr.final_state.xv);
      view.n_image_vertices = run_cfg.dims.n_image_vertices;
      view.n_primary_edges = run_cfg.dims.n_primary_edges;
      view.scope = VertexScope::image_only;
      row.he += hyperedge_entropy(view).mean;
      row.sil += silhouette(view).global;
      row.ics += intra_cluster_similarity(view).mean;
      row.icd += inter_cluster_distance(view);
      row.sparsity += sparsity(view.hard, SparsityScope::all);
      ++metric_n;
    }
    row.top1 = double(correct) / double(eval_n);
    if (metric_n) {
      row.he /= double(metric_n);
      row.sil /= double(metric_n);
      row.ics /= double(metric_n);
      row.icd /= double(metric_n);
      row.sparsity /= double(metric_n);
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace hgvt
