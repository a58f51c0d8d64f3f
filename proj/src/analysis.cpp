#include "hgvt/analysis.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "hgvt/metrics.hpp"
#include "hgvt/retrieval.hpp"
#include "hgvt/training.hpp"

namespace hgvt {

using ordered_json = nlohmann::ordered_json;

namespace {

bool expert_pooled(const ModelConfig& cfg) {
  return cfg.pooling == Pooling::expert || cfg.pooling == Pooling::expert_image;
}

}  // namespace

// ---- graph slice export -------------------------------------------------------

GraphSliceExport export_graph_slices(const Checkpoint& ckpt, const Tensor& image,
                                     std::size_t H) {
  const ModelConfig& cfg = ckpt.config;
  if (!expert_pooled(cfg))
    throw TensorError("export_graph_slices: checkpoint has no expert pooling");

  Tape t;
  ModelParams p = bind_params(t, ckpt.weights);
  ForwardResult fr = forward_classify(t, image, p, cfg, false);
  const Tensor& soft = fr.per_layer.back().soft;
  const Tensor& gate = t.value(fr.gate_probs);

  GraphSliceExport out;
  for (std::size_t e = 1; e < gate.cols(); ++e)
    if (gate.at(0, e) > gate.at(0, out.root_expert)) out.root_expert = e;
  out.confidence = gate.at(0, out.root_expert);
  const std::size_t root_col = cfg.dims.n_primary_edges + out.root_expert;

  // direct virtual vertices above the 0.1 contribution threshold
  for (std::size_t v = cfg.dims.n_image_vertices; v < cfg.dims.vertices(); ++v) {
    double contrib = soft.at(v, root_col);
    if (contrib <= 0.1) continue;
    SliceVertex sv;
    sv.vertex = v;
    sv.contribution = contrib;
    std::vector<std::size_t> order(cfg.dims.n_primary_edges);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return soft.at(v, a) > soft.at(v, b);
    });
    for (std::size_t i = 0; i < std::min(H, order.size()); ++i) {
      SliceEdge se;
      se.edge = order[i];
      se.intensity.resize(cfg.dims.n_image_vertices);
      for (std::size_t iv = 0; iv < cfg.dims.n_image_vertices; ++iv)
        se.intensity[iv] = soft.at(iv, se.edge);
      sv.edges.push_back(std::move(se));
    }
    out.direct.push_back(std::move(sv));
  }

  // shared markers, assigned in first-appearance order
  std::vector<std::size_t> appearances;
  std::unordered_map<std::size_t, std::size_t> marker_of, count_of;
  for (const SliceVertex& sv : out.direct)
    for (const SliceEdge& se : sv.edges) {
      if (!marker_of.count(se.edge)) marker_of[se.edge] = marker_of.size();
      ++count_of[se.edge];
    }
  for (SliceVertex& sv : out.direct)
    for (SliceEdge& se : sv.edges) {
      se.marker = marker_of[se.edge];
      se.duplicated = count_of[se.edge] > 1;
    }

  // 1-hop virtual vertices: share an exported edge above the threshold
  std::vector<char> is_direct(cfg.dims.vertices(), 0);
  for (const SliceVertex& sv : out.direct) is_direct[sv.vertex] = 1;
  for (std::size_t v = cfg.dims.n_image_vertices; v < cfg.dims.vertices(); ++v) {
    if (is_direct[v]) continue;
    for (const auto& [edge, marker] : marker_of) {
      (void)marker;
      if (soft.at(v, edge) > 0.1) {
        out.indirect.push_back(v);
        break;
      }
    }
  }
  std::sort(out.indirect.begin(), out.indirect.end());
  return out;
}

std::string slices_to_json(const GraphSliceExport& s) {
  ordered_json j;
  j["root_expert"] = s.root_expert;
  j["confidence"] = s.confidence;
  j["direct"] = ordered_json::array();
  for (const SliceVertex& sv : s.direct) {
    ordered_json jv;
    jv["vertex"] = sv.vertex;
    jv["contribution"] = sv.contribution;
    jv["edges"] = ordered_json::array();
    for (const SliceEdge& se : sv.edges) {
      ordered_json je;
      je["edge"] = se.edge;
      je["marker"] = se.marker;
      je["duplicated"] = se.duplicated;
      je["intensity"] = se.intensity;
      jv["edges"].push_back(std::move(je));
    }
    j["direct"].push_back(std::move(jv));
  }
  j["indirect"] = s.indirect;
  return j.dump(2);
}

GraphSliceExport slices_from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text);
  GraphSliceExport s;
  s.root_expert = j.at("root_expert").get<std::size_t>();
  s.confidence = j.at("confidence").get<double>();
  for (const auto& jv : j.at("direct")) {
    SliceVertex sv;
    sv.vertex = jv.at("vertex").get<std::size_t>();
    sv.contribution = jv.at("contribution").get<double>();
    for (const auto& je : jv.at("edges")) {
      SliceEdge se;
      se.edge = je.at("edge").get<std::size_t>();
      se.marker = je.at("marker").get<std::size_t>();
      se.duplicated = je.at("duplicated").get<bool>();
      se.intensity = je.at("intensity").get<std::vector<double>>();
      sv.edges.push_back(std::move(se));
    }
    s.direct.push_back(std::move(sv));
  }
  s.indirect = j.at("indirect").get<std::vector<std::size_t>>();
  return s;
}

// ---- expert taxonomy ------------------------------------------------------------

ExpertAssignment assign_classes_to_experts(
    const std::vector<std::vector<double>>& histograms) {
  if (histograms.empty()) throw TensorError("assign_classes_to_experts: empty");
  ExpertAssignment out;
  for (const std::vector<double>& row : histograms) {
    if (row.empty()) throw TensorError("assign_classes_to_experts: empty row");
    std::vector<std::size_t> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    std::vector<std::pair<std::size_t, double>> taken;
    double cumulative = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      double p = row[order[i]];
      if (i > 0) {
        // previous expert's mass vs what remained when it was taken
        double prev = row[order[i - 1]];
        double remaining = 0;
        for (std::size_t k = i; k < order.size(); ++k) remaining += row[order[k]];
        if (!(prev < (2.0 / 3.0) * (prev + remaining))) break;
      }
      taken.emplace_back(order[i], p);
      cumulative += p;
      if (cumulative >= 0.80) break;
    }
    out.per_class.push_back(std::move(taken));
  }
  return out;
}

// ---- bench ----------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

BlockParams assemble_block(const ModelParams& p, const ModelConfig& cfg,
                           std::size_t i) {
  std::string b = "block" + std::to_string(i) + ".";
  auto attn = [&](const std::string& path) {
    AttentionParams a;
    a.wq = p.at(b + path + "wq");
    a.wk = p.at(b + path + "wk");
    a.wv = p.at(b + path + "wv");
    a.wo = p.at(b + path + "wo");
    return a;
  };
  auto ffn = [&](const std::string& path) {
    FfnParams f;
    f.w_gate = p.at(b + path + "w_gate");
    f.b_gate = p.at(b + path + "b_gate");
    f.w_value = p.at(b + path + "w_value");
    f.b_value = p.at(b + path + "b_value");
    f.w_out_f = p.at(b + path + "w_out_f");
    f.b_out_f = p.at(b + path + "b_out_f");
    f.w_out_a = p.at(b + path + "w_out_a");
    f.b_out_a = p.at(b + path + "b_out_a");
    return f;
  };
  BlockParams bp;
  bp.self_attn = attn("self.");
  bp.aggregate = attn("agg.");
  bp.distribute = attn("dist.");
  if (cfg.joint_ffn) {
    bp.ffn_vertex = ffn("ffn.");
    bp.ffn_edge = bp.ffn_vertex;
  } else {
    bp.ffn_vertex = ffn("ffn_v.");
    bp.ffn_edge = ffn("ffn_e.");
  }
  return bp;
}

struct Accum {
  std::vector<double> samples;
  BenchStat stat() const {
    BenchStat s;
    if (samples.empty()) return s;
    for (double v : samples) s.mean_ms += v;
    s.mean_ms /= double(samples.size());
    if (samples.size() > 1) {
      double var = 0;
      for (double v : samples) var += (v - s.mean_ms) * (v - s.mean_ms);
      s.std_ms = std::sqrt(var / double(samples.size()));
    }
    return s;
  }
};

}  // namespace

BenchResult bench(const ModelConfig& cfg, std::size_t batch, std::size_t iters,
                  std::size_t warmup, std::uint64_t seed) {
  cfg.validate();
  ModelWeights w = init_weights(cfg, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<Tensor> images;
  for (std::size_t b = 0; b < batch; ++b) {
    Tensor img({cfg.channels, cfg.image_size, cfg.image_size});
    for (double& v : img.data()) v = nd(rng);
    images.push_back(std::move(img));
  }

  BlockConfig bc;
  bc.heads = cfg.heads;
  bc.alpha = cfg.alpha;
  bc.modulation = cfg.modulation;
  bc.scale_logits = cfg.scale_logits;
  const Tensor hier = hierarchy_mask_additive(cfg.dims);

  Accum a_patch, a_cluster, a_spatial, a_agg, a_dist, a_ffn, a_total;
  for (std::size_t it = 0; it < warmup + iters; ++it) {
    double tp = 0, tc = 0, ts = 0, ta = 0, td = 0, tf = 0;
    auto t_total = Clock::now();
    for (const Tensor& img : images) {
      Tape t;
      ModelParams p = bind_params(t, w);

      auto t0 = Clock::now();
      FeatureState s = init_state(t, img, p, cfg);
      tp += ms_since(t0);

      for (std::size_t l = 0; l < cfg.depth; ++l) {
        BlockParams bp = assemble_block(p, cfg, l);

        t0 = Clock::now();
        Var soft = form_soft_adjacency(t, s.xv_adj, s.xe_adj, cfg.alpha);
        Tensor hard = harden(t.value(soft));
        Tensor pair_mask = vertex_pair_mask(hard);
        tc += ms_since(t0);

        t0 = Clock::now();
        s.xv = add(t, s.xv,
                   vertex_self_attention(t, s.xv, pair_mask, bp.self_attn,
                                         cfg.heads, cfg.scale_logits));
        ts += ms_since(t0);

        t0 = Clock::now();
        s.xe = add(t, s.xe, edge_aggregate_attention(t, s.xe, s.xv, soft, hier,
                                                     bp.aggregate, bc));
        ta += ms_since(t0);

        t0 = Clock::now();
        s.xv = add(t, s.xv, edge_distribute_attention(t, s.xv, s.xe, soft, hier,
                                                      bp.distribute, bc));
        td += ms_since(t0);

        t0 = Clock::now();
        FfnDelta dv = dual_ffn(t, s.xv, s.xv_adj, bp.ffn_vertex);
        FfnDelta de = dual_ffn(t, s.xe, s.xe_adj, bp.ffn_edge);
        s.xv = add(t, s.xv, dv.d_feature);
        s.xv_adj = add(t, s.xv_adj, dv.d_adjacency);
        s.xe = add(t, s.xe, de.d_feature);
        s.xe_adj = add(t, s.xe_adj, de.d_adjacency);
        tf += ms_since(t0);
      }
      // untimed tail (pooling/classifier) stays inside the total timer
      Var pooled = image_pool(t, slice_rows(t, s.xv, 0, cfg.dims.n_image_vertices));
      (void)pooled;
    }
    double total = ms_since(t_total);
    if (it < warmup) continue;
    a_patch.samples.push_back(tp);
    a_cluster.samples.push_back(tc);
    a_spatial.samples.push_back(ts);
    a_agg.samples.push_back(ta);
    a_dist.samples.push_back(td);
    a_ffn.samples.push_back(tf);
    a_total.samples.push_back(total);
  }

  BenchResult r;
  r.patch = a_patch.stat();
  r.cluster = a_cluster.stat();
  r.spatial = a_spatial.stat();
  r.aggregate = a_agg.stat();
  r.distribute = a_dist.stat();
  r.ffn = a_ffn.stat();
  r.total = a_total.stat();
  r.iters = iters;
  r.warmup = warmup;
  r.batch = batch;
  if (r.total.mean_ms > 0) r.images_per_s = 1000.0 * double(batch) / r.total.mean_ms;
  return r;
}

// ---- CLI ------------------------------------------------------------------------

namespace {

using nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw TensorError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ModelConfig load_config(const std::string& path) {
  return config_from_json(read_file(path));
}

Tensor random_image(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor img({cfg.channels, cfg.image_size, cfg.image_size});
  for (double& v : img.data()) v = nd(rng);
  return img;
}

void save_hasher(const std::string& path, const CentroidHasher& h) {
  json j = {{"h", h.centroids.rows()},
            {"d", h.centroids.cols()},
            {"centroids", h.centroids.data()}};
  std::ofstream(path) << j.dump(2) << "\n";
}

CentroidHasher load_hasher(const std::string& path) {
  json j = json::parse(read_file(path));
  CentroidHasher h;
  h.centroids = Tensor({j.at("h").get<std::size_t>(), j.at("d").get<std::size_t>()},
                       j.at("centroids").get<std::vector<double>>());
  return h;
}

VsOrder parse_order(const std::string& s) {
  if (s == "pointwise") return VsOrder::pointwise;
  if (s == "0") return VsOrder::order0;
  if (s == "1") return VsOrder::order1;
  if (s == "2") return VsOrder::order2;
  if (s == "full") return VsOrder::full;
  throw TensorError("unknown order '" + s + "'");
}

Tensor db_edge_features(const EmbeddingDB& db) {
  std::size_t rows = 0;
  for (const DbRecord& r : db.records) rows += r.edges.size();
  if (rows == 0) throw TensorError("database has no pruned edges");
  Tensor f({rows, db.edge_width});
  std::size_t row = 0;
  for (const DbRecord& r : db.records)
    for (const auto& e : r.edges) {
      for (std::size_t k = 0; k < db.edge_width; ++k) f.at(row, k) = e[k];
      ++row;
    }
  return f;
}

// embed the dataset into a retrieval DB with pruned graphs per image
EmbeddingDB build_db(const Checkpoint& ckpt, const SyntheticDataset& ds) {
  const ModelConfig& cfg = ckpt.config;
  if (!expert_pooled(cfg))
    throw TensorError("embed: checkpoint has no expert pooling");
  EmbeddingDB db;
  db.centroid_width = cfg.pooled_width();
  db.edge_width = cfg.d_f;
  db.max_edges = 12;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tape t;
    ModelParams p = bind_params(t, ckpt.weights);
    ForwardResult fr = forward_classify(t, ds.images[i], p, cfg, false);
    PrunedGraph g =
        prune_graph(fr.per_layer.back().soft, t.value(fr.final_state.xe),
                    t.value(fr.gate_probs), cfg.dims);
    const Tensor& pooled = t.value(fr.pooled);
    std::vector<double> centroid(pooled.data());
    std::vector<std::vector<double>> edges;
    for (const PrunedEdge& e : g.edges) edges.push_back(e.features);
    db.records.push_back(
        make_record(i, std::int64_t(ds.labels[i]), std::move(centroid), edges));
  }
  return db;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::size_t steps, std::size_t batch, double lr, std::size_t data_n,
              std::uint64_t seed, bool as_json) {
  ModelConfig cfg = load_config(config_path);
  TrainConfig tc;
  tc.total_steps = steps;
  tc.warmup_steps = std::min<std::size_t>(10, steps ? (steps + 1) / 2 - 1 : 0);
  tc.batch_size = batch;
  tc.peak_lr = lr;
  tc.seed = seed;
  SyntheticDataset ds =
      make_synthetic_dataset(data_n, cfg.classes, cfg.image_size, seed);
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir + "/metrics.ndjson");
  TrainResult r = train(ds, cfg, tc, out_dir + "/model.ckpt", &log);
  json summary = {{"steps", steps},
                  {"final_loss", r.last_loss.total},
                  {"final_acc", r.last_accuracy},
                  {"checkpoint", out_dir + "/model.ckpt"}};
  if (as_json)
    std::cout << summary.dump(2) << "\n";
  else
    std::cout << "trained " << steps << " steps; final loss " << r.last_loss.total
              << ", acc " << r.last_accuracy << "\n";
  return 0;
}

int cmd_eval_graph(const std::string& ckpt_path, std::size_t n,
                   std::uint64_t seed, bool as_json) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  SyntheticDataset ds =
      make_synthetic_dataset(n, ck.config.classes, ck.config.image_size, seed);
  double he = 0, ics = 0, icd = 0, sil = 0, sp = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tape t;
    ModelParams p = bind_params(t, ck.weights);
    ForwardResult fr = forward_classify(t, ds.images[i], p, ck.config, false);
    ClusterView v;
    v.soft = fr.per_layer.back().soft;
    v.hard = fr.per_layer.back().hard;
    v.features = t.value(fr.final_state.xv);
    v.n_image_vertices = ck.config.dims.n_image_vertices;
    v.n_primary_edges = ck.config.dims.n_primary_edges;
    he += hyperedge_entropy(v).mean;
    ics += intra_cluster_similarity(v).mean;
    icd += inter_cluster_distance(v);
    sil += silhouette(v).global;
    sp += sparsity(v.hard, SparsityScope::all);
  }
  double d = double(ds.size());
  json out = {{"images", ds.size()}, {"he", he / d},       {"ics", ics / d},
              {"icd", icd / d},      {"sil", sil / d},     {"sparsity", sp / d}};
  if (as_json)
    std::cout << out.dump(2) << "\n";
  else
    std::cout << "HE " << he / d << "  ICS " << ics / d << "  ICD " << icd / d
              << "  SIL " << sil / d << "  sparsity " << sp / d << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& config_path, bool as_json) {
  ModelConfig cfg = load_config(config_path);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto randm = [&](std::size_t r, std::size_t c) {
    Tensor x({r, c});
    for (double& v : x.data()) v = nd(rng);
    return x;
  };

  std::vector<std::pair<std::string, bool>> results;
  results.emplace_back(
      "cross_entropy",
      finite_diff_check(
          [](Tape& t, const std::vector<Var>& in) {
            return smoothed_cross_entropy(t, in[0], 1, 0.1);
          },
          {randm(1, 4)})
          .pass);
  results.emplace_back(
      "diversity",
      finite_diff_check(
          [](Tape& t, const std::vector<Var>& in) {
            return diversity_penalty(t, in[0]);
          },
          {randm(5, 6)})
          .pass);
  results.emplace_back(
      "population",
      finite_diff_check(
          [](Tape& t, const std::vector<Var>& in) {
            return population_loss(t, form_soft_adjacency(t, in[0], in[1]), 2.0,
                                   0.5);
          },
          {randm(6, 4), randm(3, 4)})
          .pass);
  results.emplace_back(
      "expert_density",
      finite_diff_check(
          [](Tape& t, const std::vector<Var>& in) {
            return expert_density_loss(
                t, {row_softmax(t, in[0]), row_softmax(t, in[1])});
          },
          {randm(1, 3), randm(1, 3)})
          .pass);
  results.emplace_back(
      "expert_confidence",
      finite_diff_check(
          [](Tape& t, const std::vector<Var>& in) {
            return expert_confidence_loss(t, row_softmax(t, in[0]));
          },
          {randm(1, 3)})
          .pass);

  ModelConfig fd_cfg = cfg;
  fd_cfg.path_drop = 0.0;
  fd_cfg.expert_noise_sigma = 0.0;
  fd_cfg.expert_dropout = 0.0;
  fd_cfg.class_dropout = 0.0;
  fd_cfg.modulation = Modulation::standard;
  ModelWeights w = init_weights(fd_cfg, 2);
  SyntheticDataset ds =
      make_synthetic_dataset(1, fd_cfg.classes, fd_cfg.image_size, 3);
  TrainConfig tc;
  results.emplace_back(
      "full_model",
      finite_diff_check_sampled(
          [&](Tape& t, const std::vector<Var>& in) {
            ModelParams p;
            p.vars = in;
            p.weights = &w;
            std::vector<ForwardResult> rs = {
                forward_classify(t, ds.images[0], p, fd_cfg, true, nullptr)};
            return total_loss(t, rs, {ds.labels[0]}, fd_cfg, tc).loss;
          },
          w.tensors, 2, 11)
          .pass);

  bool all = true;
  json out = json::object();
  for (auto& [name, pass] : results) {
    all = all && pass;
    out[name] = pass ? "pass" : "FAIL";
    if (!as_json)
      std::cout << name << ": " << (pass ? "pass" : "FAIL") << "\n";
  }
  if (as_json) std::cout << out.dump(2) << "\n";
  return all ? 0 : 1;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"hypergraph vision transformer toolkit"};
  app.require_subcommand(1);

  bool as_json = false;
  std::uint64_t seed = 0;
  app.add_flag("--json", as_json, "machine-readable JSON output");
  app.add_option("--seed", seed, "RNG seed");

  // train
  auto* train_cmd = app.add_subcommand("train", "train on synthetic data");
  std::string config_path, out_dir = "out";
  std::size_t steps = 200, batch = 8, data_n = 64;
  double lr = 1e-3;
  train_cmd->add_option("--config", config_path)->required();
  train_cmd->add_option("--out", out_dir);
  train_cmd->add_option("--steps", steps);
  train_cmd->add_option("--batch", batch);
  train_cmd->add_option("--lr", lr);
  train_cmd->add_option("--data", data_n);

  // eval-graph
  auto* eval_cmd = app.add_subcommand("eval-graph", "hypergraph quality metrics");
  std::string ckpt_path;
  std::size_t eval_n = 8;
  eval_cmd->add_option("--checkpoint", ckpt_path)->required();
  eval_cmd->add_option("--images", eval_n);

  // embed
  auto* embed_cmd = app.add_subcommand("embed", "build a retrieval database");
  std::string embed_ckpt, db_path = "db.bin";
  std::size_t embed_n = 32;
  embed_cmd->add_option("--checkpoint", embed_ckpt)->required();
  embed_cmd->add_option("--out", db_path);
  embed_cmd->add_option("--data", embed_n);

  // retrieve
  auto* retr_cmd = app.add_subcommand("retrieve", "run retrieval evaluation");
  std::string retr_db, method = "ps", order_s = "0", hasher_path, reference_path;
  std::size_t k = 10, n_queries = 8;
  retr_cmd->add_option("--db", retr_db)->required();
  retr_cmd->add_option("--method", method)->check(CLI::IsMember({"ps", "vs", "aps", "avs"}));
  retr_cmd->add_option("--order", order_s)->check(CLI::IsMember({"pointwise", "0", "1", "2", "full"}));
  retr_cmd->add_option("--k", k);
  retr_cmd->add_option("--queries", n_queries);
  retr_cmd->add_option("--hasher", hasher_path);
  retr_cmd->add_option("--reference", reference_path);

  // train-centroids
  auto* cent_cmd = app.add_subcommand("train-centroids", "fit the hash centroids");
  std::string cent_db, cent_out = "hasher.json";
  std::size_t hash_h = 10, cent_epochs = 8;
  cent_cmd->add_option("--db", cent_db)->required();
  cent_cmd->add_option("--out", cent_out);
  cent_cmd->add_option("--bins", hash_h);
  cent_cmd->add_option("--epochs", cent_epochs);

  // rerank-eval
  auto* rer_cmd = app.add_subcommand("rerank-eval", "adaptive rerank evaluation");
  std::string rer_db, rer_hasher, rer_method = "aps", rer_reference;
  std::size_t rer_k = 10, rer_r = 100, rer_c = 4, rer_queries = 8;
  rer_cmd->add_option("--db", rer_db)->required();
  rer_cmd->add_option("--hasher", rer_hasher)->required();
  rer_cmd->add_option("--method", rer_method)->check(CLI::IsMember({"aps", "avs"}));
  rer_cmd->add_option("--k", rer_k);
  rer_cmd->add_option("--shortlist", rer_r);
  rer_cmd->add_option("--c", rer_c);
  rer_cmd->add_option("--queries", rer_queries);
  rer_cmd->add_option("--reference", rer_reference);

  // export-graph
  auto* exp_cmd = app.add_subcommand("export-graph", "export hypergraph slices");
  std::string exp_ckpt, exp_out = "slices.json";
  std::size_t exp_h = 5;
  exp_cmd->add_option("--checkpoint", exp_ckpt)->required();
  exp_cmd->add_option("--out", exp_out);
  exp_cmd->add_option("--top", exp_h);

  // assign-experts
  auto* asg_cmd = app.add_subcommand("assign-experts", "class-to-expert taxonomy");
  std::string asg_hist;
  asg_cmd->add_option("--histograms", asg_hist)->required();

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "per-component timings");
  std::string bench_config;
  std::size_t bench_batch = 1, bench_iters = 100, bench_warmup = 10;
  bench_cmd->add_option("--config", bench_config)->required();
  bench_cmd->add_option("--batch", bench_batch);
  bench_cmd->add_option("--iters", bench_iters);
  bench_cmd->add_option("--warmup", bench_warmup);

  // gradcheck
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference checks");
  std::string grad_config;
  grad_cmd->add_option("--config", grad_config)->required();

  // count
  auto* count_cmd = app.add_subcommand("count", "parameter and FLOP counts");
  std::string count_config;
  std::size_t resolution = 0;
  count_cmd->add_option("--config", count_config)->required();
  count_cmd->add_option("--resolution", resolution);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    if (*train_cmd)
      return cmd_train(config_path, out_dir, steps, batch, lr, data_n, seed,
                       as_json);
    if (*eval_cmd) return cmd_eval_graph(ckpt_path, eval_n, seed, as_json);
    if (*embed_cmd) {
      Checkpoint ck = load_checkpoint(embed_ckpt);
      SyntheticDataset ds =
          make_synthetic_dataset(embed_n, ck.config.classes, ck.config.image_size, seed);
      EmbeddingDB db = build_db(ck, ds);
      save_db(db_path, db);
      json out = {{"records", db.records.size()}, {"db", db_path}};
      std::cout << (as_json ? out.dump(2) : "wrote " + db_path) << "\n";
      return 0;
    }
    if (*retr_cmd) {
      EmbeddingDB db = load_db(retr_db);
      std::vector<DbRecord> queries(
          db.records.begin(),
          db.records.begin() + std::min<std::size_t>(n_queries, db.records.size()));
      CentroidHasher hasher;
      bool rerank = method == "aps" || method == "avs";
      if (rerank) {
        if (hasher_path.empty())
          throw TensorError("retrieve: --hasher required for " + method);
        hasher = load_hasher(hasher_path);
      }
      std::unordered_map<std::uint64_t, std::uint64_t> ref;
      if (!reference_path.empty()) {
        json j = json::parse(read_file(reference_path));
        for (auto& [key, val] : j.items())
          ref[std::stoull(key)] = val.get<std::uint64_t>();
      }
      EvalResult r = evaluate_retrieval(db, queries, method, k, parse_order(order_s),
                                        rerank ? &hasher : nullptr,
                                        reference_path.empty() ? nullptr : &ref);
      json out = {{"method", method}, {"k", k}, {"map", r.map_at_k},
                  {"hit_rate", r.hit_rate_at_k}};
      std::cout << (as_json ? out.dump(2)
                            : method + " mAP@" + std::to_string(k) + " = " +
                                  std::to_string(r.map_at_k))
                << "\n";
      return 0;
    }
    if (*cent_cmd) {
      EmbeddingDB db = load_db(cent_db);
      CentroidTrainOptions opts;
      opts.epochs = cent_epochs;
      opts.seed = seed;
      CentroidHasher h = train_centroids(db_edge_features(db), hash_h, opts);
      save_hasher(cent_out, h);
      json out = {{"h", hash_h}, {"out", cent_out}};
      std::cout << (as_json ? out.dump(2) : "wrote " + cent_out) << "\n";
      return 0;
    }
    if (*rer_cmd) {
      EmbeddingDB db = load_db(rer_db);
      CentroidHasher hasher = load_hasher(rer_hasher);
      std::vector<DbRecord> queries(
          db.records.begin(),
          db.records.begin() + std::min<std::size_t>(rer_queries, db.records.size()));
      std::unordered_map<std::uint64_t, std::uint64_t> ref;
      if (!rer_reference.empty()) {
        json j = json::parse(read_file(rer_reference));
        for (auto& [key, val] : j.items())
          ref[std::stoull(key)] = val.get<std::uint64_t>();
      }
      EvalResult r = evaluate_retrieval(
          db, queries, rer_method, rer_k,
          rer_method == "avs" ? VsOrder::order1 : VsOrder::order0, &hasher,
          rer_reference.empty() ? nullptr : &ref, rer_r, rer_c);
      json out = {{"method", rer_method}, {"k", rer_k}, {"map", r.map_at_k},
                  {"hit_rate", r.hit_rate_at_k}, {"shortlist", rer_r}, {"c", rer_c}};
      std::cout << (as_json ? out.dump(2)
                            : rer_method + " mAP@" + std::to_string(rer_k) + " = " +
                                  std::to_string(r.map_at_k))
                << "\n";
      return 0;
    }
    if (*exp_cmd) {
      Checkpoint ck = load_checkpoint(exp_ckpt);
      GraphSliceExport s =
          export_graph_slices(ck, random_image(ck.config, seed), exp_h);
      std::ofstream(exp_out) << slices_to_json(s) << "\n";
      json out = {{"root_expert", s.root_expert},
                  {"direct", s.direct.size()},
                  {"out", exp_out}};
      std::cout << (as_json ? out.dump(2) : "wrote " + exp_out) << "\n";
      return 0;
    }
    if (*asg_cmd) {
      json j = json::parse(read_file(asg_hist));
      std::vector<std::vector<double>> rows =
          j.get<std::vector<std::vector<double>>>();
      ExpertAssignment a = assign_classes_to_experts(rows);
      json out = json::array();
      for (auto& cls : a.per_class) {
        json row = json::array();
        for (auto& [e, p] : cls) row.push_back({{"expert", e}, {"p", p}});
        out.push_back(row);
      }
      std::cout << out.dump(2) << "\n";
      return 0;
    }
    if (*bench_cmd) {
      BenchResult r = bench(load_config(bench_config), bench_batch, bench_iters,
                            bench_warmup, seed);
      json out = {
          {"patch_ms", r.patch.mean_ms},         {"patch_std", r.patch.std_ms},
          {"cluster_ms", r.cluster.mean_ms},     {"cluster_std", r.cluster.std_ms},
          {"spatial_ms", r.spatial.mean_ms},     {"spatial_std", r.spatial.std_ms},
          {"aggregate_ms", r.aggregate.mean_ms}, {"aggregate_std", r.aggregate.std_ms},
          {"distribute_ms", r.distribute.mean_ms}, {"distribute_std", r.distribute.std_ms},
          {"ffn_ms", r.ffn.mean_ms},             {"ffn_std", r.ffn.std_ms},
          {"total_ms", r.total.mean_ms},         {"total_std", r.total.std_ms},
          {"images_per_s", r.images_per_s},      {"iters", r.iters}};
      if (as_json)
        std::cout << out.dump(2) << "\n";
      else
        std::cout << "total " << r.total.mean_ms << " ms ("
                  << r.images_per_s << " img/s); components "
                  << r.component_sum_ms() << " ms\n";
      return 0;
    }
    if (*grad_cmd) return cmd_gradcheck(grad_config, as_json);
    if (*count_cmd) {
      ModelConfig cfg = load_config(count_config);
      std::size_t res = resolution ? resolution : cfg.image_size;
      json out = {{"params", count_params(cfg)}, {"flops", count_flops(cfg, res)},
                  {"resolution", res}};
      if (as_json)
        std::cout << out.dump(2) << "\n";
      else
        std::cout << "params " << count_params(cfg) << ", flops "
                  << count_flops(cfg, res) << " @" << res << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace hgvt
