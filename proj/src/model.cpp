#include "hgvt/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

namespace hgvt {

using nlohmann::json;

void ModelConfig::validate() const {
  if (d_f % heads != 0)
    throw TensorError("config: d_f=" + std::to_string(d_f) +
                      " not divisible by heads=" + std::to_string(heads));
  if (image_size % patch_size != 0)
    throw TensorError("config: image size not divisible by patch size");
  std::size_t side = image_size / patch_size;
  if (dims.n_image_vertices != side * side)
    throw TensorError("config: |iV|=" + std::to_string(dims.n_image_vertices) +
                      " does not match (image/patch)^2=" + std::to_string(side * side));
  if (beta <= gamma) throw TensorError("config: beta must exceed gamma");
  if (expert_top_k == 0 || expert_top_k > dims.n_virtual_edges)
    throw TensorError("config: expert_top_k out of range");
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.name = name;
  if (name == "mu") {
    c.dims = {64, 5, 8, 4};
    c.d_f = 64; c.d_a = 64; c.depth = 10; c.heads = 2;
    c.patch_size = 4; c.image_size = 32; c.classes = 100;
    c.stem = Stem::conv_stem;
    c.pooling = Pooling::expert;
    c.beta = 10.05;
    c.class_dropout = 0.1;
    c.drop_decay = false;
  } else if (name == "lt") {
    c.dims = {100, 12, 32, 6};
    c.d_f = 128; c.d_a = 64; c.depth = 12; c.heads = 4;
    c.patch_size = 16; c.image_size = 160; c.classes = 100;
    c.stem = Stem::conv_stem;
    c.pooling = Pooling::expert_image;
    c.beta = 20.7;
  } else if (name == "ti") {
    c.dims = {196, 16, 50, 8};
    c.d_f = 128; c.d_a = 64; c.depth = 12; c.heads = 4;
    c.patch_size = 16; c.image_size = 224; c.classes = 1000;
    c.stem = Stem::conv_stem;
    c.pooling = Pooling::expert_image;
    c.beta = 36.04;
  } else if (name == "s") {
    c.dims = {196, 16, 50, 8};
    c.d_f = 224; c.d_a = 96; c.depth = 14; c.heads = 7;
    c.patch_size = 16; c.image_size = 224; c.classes = 1000;
    c.stem = Stem::conv_stem;
    c.pooling = Pooling::expert_image;
    c.beta = 36.04;
  } else if (name == "nano") {
    c.dims = {16, 3, 4, 2};
    c.d_f = 16; c.d_a = 8; c.depth = 2; c.heads = 2;
    c.patch_size = 4; c.image_size = 16; c.classes = 4;
    c.stem = Stem::patch_projection;
    c.pooling = Pooling::expert_image;
    c.beta = 19.0 / 6.0;  // |V|/6
  } else {
    throw TensorError("unknown preset '" + name + "'");
  }
  c.validate();
  return c;
}

namespace {

std::vector<std::size_t> conv_channels(const ModelConfig& cfg) {
  // Stride-2 stages reaching the patch stride; channels double per stage up
  // to d_f: [d_f/2^(n-1), ..., d_f/2, d_f].
  std::size_t stages = 0;
  for (std::size_t s = cfg.patch_size; s > 1; s /= 2) ++stages;
  std::vector<std::size_t> ch(stages);
  for (std::size_t i = 0; i < stages; ++i) ch[i] = cfg.d_f >> (stages - 1 - i);
  return ch;
}

bool uses_expert(const ModelConfig& cfg) {
  return cfg.pooling == Pooling::expert || cfg.pooling == Pooling::expert_image;
}

}  // namespace

std::vector<std::pair<std::string, std::vector<std::size_t>>> weight_shapes(
    const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  auto add = [&](std::string n, std::vector<std::size_t> s) {
    out.emplace_back(std::move(n), std::move(s));
  };

  if (cfg.stem == Stem::conv_stem) {
    std::vector<std::size_t> ch = conv_channels(cfg);
    std::size_t ci = cfg.channels;
    for (std::size_t k = 0; k < ch.size(); ++k) {
      std::string p = "stem.conv" + std::to_string(k) + ".";
      add(p + "w", {ch[k], ci, 3, 3});
      add(p + "b", {1, ch[k]});
      add(p + "ns", {1, ch[k]});
      ci = ch[k];
    }
    add("stem.proj.w", {cfg.d_f, cfg.d_f});
    add("stem.proj.b", {1, cfg.d_f});
  } else {
    add("stem.proj.w", {cfg.channels * cfg.patch_size * cfg.patch_size, cfg.d_f});
    add("stem.proj.b", {1, cfg.d_f});
  }

  add("embed.vv", {cfg.dims.n_virtual_vertices, cfg.d_f});
  add("embed.e", {cfg.dims.edges(), cfg.d_f});
  add("embed.v_adj", {cfg.dims.vertices(), cfg.d_a});
  add("embed.e_adj", {cfg.dims.edges(), cfg.d_a});

  const std::size_t hidden = cfg.ffn_hidden();
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    std::string b = "block" + std::to_string(i) + ".";
    for (const char* path : {"self.", "agg.", "dist."})
      for (const char* m : {"wq", "wk", "wv", "wo"})
        add(b + path + m, {cfg.d_f, cfg.d_f});
    auto ffn = [&](const std::string& p) {
      add(b + p + "w_gate", {cfg.d_a + cfg.d_f, hidden});
      add(b + p + "b_gate", {1, hidden});
      add(b + p + "w_value", {cfg.d_a + cfg.d_f, hidden});
      add(b + p + "b_value", {1, hidden});
      add(b + p + "w_out_f", {hidden, cfg.d_f});
      add(b + p + "b_out_f", {1, cfg.d_f});
      add(b + p + "w_out_a", {hidden, cfg.d_a});
      add(b + p + "b_out_a", {1, cfg.d_a});
    };
    if (cfg.joint_ffn) {
      ffn("ffn.");
    } else {
      ffn("ffn_v.");
      ffn("ffn_e.");
    }
    add(b + "ns_adj_v", {1, cfg.d_a});
    add(b + "ns_adj_e", {1, cfg.d_a});
    add(b + "ns_self", {1, cfg.d_f});
    add(b + "ns_agg_q", {1, cfg.d_f});
    add(b + "ns_agg_kv", {1, cfg.d_f});
    add(b + "ns_dist_q", {1, cfg.d_f});
    add(b + "ns_dist_kv", {1, cfg.d_f});
    add(b + "ns_ffn_v_f", {1, cfg.d_f});
    add(b + "ns_ffn_v_a", {1, cfg.d_a});
    add(b + "ns_ffn_e_f", {1, cfg.d_f});
    add(b + "ns_ffn_e_a", {1, cfg.d_a});
  }

  if (uses_expert(cfg)) {
    add("gate.w", {cfg.d_f, 1});
    add("gate.b", {1, 1});
  }
  add("head.w", {cfg.head_width(), cfg.classes});
  add("head.b", {1, cfg.classes});
  return out;
}

std::size_t ModelWeights::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  throw TensorError("no weight named '" + name + "'");
}

std::size_t ModelWeights::total_params() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors) n += t.size();
  return n;
}

ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  ModelWeights w;
  for (auto& [name, shape] : weight_shapes(cfg)) {
    Tensor t(shape);
    bool is_bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    is_bias = is_bias || name.find(".b_") != std::string::npos ||
              name == "gate.b" || name == "head.b";
    bool is_norm = name.find(".ns") != std::string::npos;
    if (is_norm)
      for (double& v : t.data()) v = 1.0;
    else if (!is_bias)
      for (double& v : t.data()) v = dist(rng);
    w.names.push_back(name);
    w.tensors.push_back(std::move(t));
  }
  return w;
}

Var ModelParams::at(const std::string& name) const {
  return vars[weights->index_of(name)];
}

ModelParams bind_params(Tape& t, const ModelWeights& w) {
  ModelParams p;
  p.weights = &w;
  p.vars.reserve(w.tensors.size());
  for (std::size_t i = 0; i < w.tensors.size(); ++i)
    p.vars.push_back(t.input(w.tensors[i], w.names[i]));
  return p;
}

Tensor sinusoidal_positions(std::size_t n, std::size_t dim) {
  Tensor pe({n, dim});
  for (std::size_t pos = 0; pos < n; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      double freq = std::pow(10000.0, -double(2 * (i / 2)) / double(dim));
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  return pe;
}

namespace {

Var concat_rows(Tape& t, Var a, Var b) {
  return transpose(t, concat_cols(t, transpose(t, a), transpose(t, b)));
}

BlockParams block_params(const ModelParams& p, const ModelConfig& cfg,
                         std::size_t i) {
  std::string b = "block" + std::to_string(i) + ".";
  auto attn = [&](const std::string& path) {
    return AttentionParams{p.at(b + path + "wq"), p.at(b + path + "wk"),
                           p.at(b + path + "wv"), p.at(b + path + "wo")};
  };
  auto ffn = [&](const std::string& path) {
    return FfnParams{p.at(b + path + "w_gate"),  p.at(b + path + "b_gate"),
                     p.at(b + path + "w_value"), p.at(b + path + "b_value"),
                     p.at(b + path + "w_out_f"), p.at(b + path + "b_out_f"),
                     p.at(b + path + "w_out_a"), p.at(b + path + "b_out_a")};
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
  bp.ns_adj_v = p.at(b + "ns_adj_v");
  bp.ns_adj_e = p.at(b + "ns_adj_e");
  bp.ns_self = p.at(b + "ns_self");
  bp.ns_agg_q = p.at(b + "ns_agg_q");
  bp.ns_agg_kv = p.at(b + "ns_agg_kv");
  bp.ns_dist_q = p.at(b + "ns_dist_q");
  bp.ns_dist_kv = p.at(b + "ns_dist_kv");
  bp.ns_ffn_v_f = p.at(b + "ns_ffn_v_f");
  bp.ns_ffn_v_a = p.at(b + "ns_ffn_v_a");
  bp.ns_ffn_e_f = p.at(b + "ns_ffn_e_f");
  bp.ns_ffn_e_a = p.at(b + "ns_ffn_e_a");
  return bp;
}

// {n_patches, C*p*p} rows in patch raster order, each row (c, y, x) flat.
Tensor patchify(const Tensor& image, std::size_t patch) {
  std::size_t c = image.shape()[0], h = image.shape()[1], w = image.shape()[2];
  std::size_t gh = h / patch, gw = w / patch;
  Tensor rows({gh * gw, c * patch * patch});
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      std::size_t r = py * gw + px;
      std::size_t col = 0;
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            rows.at(r, col++) =
                image.data()[(ch * h + py * patch + y) * w + px * patch + x];
    }
  return rows;
}

}  // namespace

Var patch_embed(Tape& t, const Tensor& image, const ModelParams& p,
                const ModelConfig& cfg) {
  if (image.ndim() != 3 || image.shape()[0] != cfg.channels)
    throw TensorError("patch_embed: image must be {C,H,W}");
  std::size_t h = image.shape()[1], w = image.shape()[2];
  if (h % cfg.patch_size != 0 || w % cfg.patch_size != 0)
    throw TensorError("patch_embed: resolution not divisible by patch size");

  Var rows;
  if (cfg.stem == Stem::conv_stem) {
    Var x = t.constant(image, "image");
    std::vector<std::size_t> ch = conv_channels(cfg);
    std::size_t side_h = h, side_w = w;
    for (std::size_t k = 0; k < ch.size(); ++k) {
      std::string pre = "stem.conv" + std::to_string(k) + ".";
      x = conv2d(t, x, p.at(pre + "w"), 2, 1);
      side_h = (side_h + 2 - 3) / 2 + 1;
      side_w = (side_w + 2 - 3) / 2 + 1;
      Var r = add_rowvec(t, chw_to_rows(t, x), p.at(pre + "b"));
      r = gelu(t, rms_norm(t, r, p.at(pre + "ns")));
      x = rows_to_chw(t, r, side_h, side_w);
    }
    rows = chw_to_rows(t, x);
  } else {
    rows = t.constant(patchify(image, cfg.patch_size), "patches");
  }
  rows = add_rowvec(t, matmul(t, rows, p.at("stem.proj.w")), p.at("stem.proj.b"));
  std::size_t n = t.value(rows).rows();
  Var pos = t.constant(sinusoidal_positions(n, cfg.d_f), "positions");
  return add(t, rows, pos);
}

FeatureState init_state(Tape& t, const Tensor& image, const ModelParams& p,
                        const ModelConfig& cfg) {
  Var xv_img = patch_embed(t, image, p, cfg);
  FeatureState s;
  s.xv = concat_rows(t, xv_img, p.at("embed.vv"));
  s.xe = p.at("embed.e");
  s.xv_adj = p.at("embed.v_adj");
  s.xe_adj = p.at("embed.e_adj");
  if (t.value(s.xv).rows() != cfg.dims.vertices())
    throw TensorError("init_state: vertex count mismatch");
  return s;
}

ExpertPool expert_pool(Tape& t, Var xe_virtual, Var gate_w, Var gate_b,
                       bool training, std::size_t top_k, double noise_sigma,
                       double dropout, std::mt19937_64* rng) {
  const std::size_t n = t.value(xe_virtual).rows();
  if (top_k > n) throw TensorError("expert_pool: top_k exceeds expert count");
  Var logits =
      transpose(t, add_rowvec(t, matmul(t, xe_virtual, gate_w), gate_b));
  if (training && rng) {
    if (noise_sigma > 0.0) {
      std::normal_distribution<double> g(0.0, noise_sigma);
      Tensor noise({1, n});
      for (double& v : noise.data()) v = g(*rng);
      logits = add(t, logits, t.constant(noise, "gate_noise"));
    }
    if (dropout > 0.0) {
      std::bernoulli_distribution keep(1.0 - dropout);
      Tensor mask({1, n});
      for (double& v : mask.data()) v = keep(*rng) ? 1.0 / (1.0 - dropout) : 0.0;
      logits = mul(t, logits, t.constant(mask, "gate_dropout"));
    }
  }
  Var probs = row_softmax(t, logits);
  if (training || top_k == n)
    return {matmul(t, probs, xe_virtual), probs};

  // Inference: renormalized top-k = softmax restricted to the top-k logits.
  const Tensor& pv = t.value(probs);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pv[a] != pv[b] ? pv[a] > pv[b] : a < b;
  });
  Tensor mask({1, n});
  for (double& v : mask.data()) v = kMaskNegInf;
  for (std::size_t k = 0; k < top_k; ++k) mask[order[k]] = 0.0;
  Var sel = row_softmax_masked(t, logits, mask);
  return {matmul(t, sel, xe_virtual), probs};
}

Var image_pool(Tape& t, Var xv_image) { return mean_rows(t, xv_image); }

ForwardResult forward_classify(Tape& t, const Tensor& image, const ModelParams& p,
                               const ModelConfig& cfg, bool training,
                               std::mt19937_64* rng) {
  ForwardResult r;
  FeatureState s = init_state(t, image, p, cfg);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    BlockConfig bc;
    bc.heads = cfg.heads;
    bc.alpha = cfg.alpha;
    bc.modulation = cfg.modulation;
    bc.scale_logits = cfg.scale_logits;
    bc.training = training;
    bc.sparse_inference = false;
    bc.path_drop = cfg.path_drop;
    if (cfg.drop_decay && cfg.depth > 1)
      bc.path_drop = cfg.path_drop * double(i) / double(cfg.depth - 1);
    BlockOutput out = hgvt_block_forward(t, s, block_params(p, cfg, i),
                                         cfg.dims, bc, training ? rng : nullptr);
    r.layer_states.push_back(s);
    r.layer_soft.push_back(out.soft_a);
    s = out.state;
    r.per_layer.push_back(std::move(out.adjacency));
  }
  r.final_state = s;

  Var xv_img = slice_rows(t, s.xv, 0, cfg.dims.n_image_vertices);
  if (cfg.pooling == Pooling::image || cfg.pooling == Pooling::expert_image)
    r.image_half = image_pool(t, xv_img);
  if (uses_expert(cfg)) {
    Var xe_virt = slice_rows(t, s.xe, cfg.dims.n_primary_edges, cfg.dims.edges());
    ExpertPool ep = expert_pool(t, xe_virt, p.at("gate.w"), p.at("gate.b"),
                                training, cfg.expert_top_k,
                                cfg.expert_noise_sigma, cfg.expert_dropout, rng);
    r.expert_half = ep.pooled;
    r.gate_probs = ep.gate_probs;
  }

  Var cls_in;
  switch (cfg.pooling) {
    case Pooling::average: cls_in = mean_rows(t, s.xe); break;
    case Pooling::image: cls_in = r.image_half; break;
    case Pooling::expert: cls_in = r.expert_half; break;
    case Pooling::expert_image:
      r.pooled = concat_cols(t, r.image_half, r.expert_half);
      cls_in = cfg.drop_image_at_head ? r.expert_half : r.pooled;
      break;
  }
  if (cfg.pooling != Pooling::expert_image) r.pooled = cls_in;

  if (training && rng && cfg.class_dropout > 0.0) {
    std::bernoulli_distribution keep(1.0 - cfg.class_dropout);
    Tensor mask(t.value(cls_in).shape());
    for (double& v : mask.data())
      v = keep(*rng) ? 1.0 / (1.0 - cfg.class_dropout) : 0.0;
    cls_in = mul(t, cls_in, t.constant(mask, "class_dropout"));
  }
  r.logits = add_rowvec(t, matmul(t, cls_in, p.at("head.w")), p.at("head.b"));
  return r;
}

std::size_t count_params(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (auto& [name, shape] : weight_shapes(cfg)) {
    std::size_t sz = 1;
    for (std::size_t d : shape) sz *= d;
    n += sz;
  }
  return n;
}

std::size_t count_flops(const ModelConfig& cfg, std::size_t resolution) {
  // Multiply-accumulate count for one dense forward pass.
  std::size_t iv = (resolution / cfg.patch_size) * (resolution / cfg.patch_size);
  std::size_t V = iv + cfg.dims.n_virtual_vertices;
  std::size_t E = cfg.dims.edges();
  std::size_t df = cfg.d_f, da = cfg.d_a, hid = cfg.ffn_hidden();
  std::size_t macs = 0;

  if (cfg.stem == Stem::conv_stem) {
    std::vector<std::size_t> ch = conv_channels(cfg);
    std::size_t ci = cfg.channels, side = resolution;
    for (std::size_t co : ch) {
      side = (side + 2 - 3) / 2 + 1;
      macs += co * side * side * ci * 9;
      ci = co;
    }
    macs += iv * df * df;  // 1x1 projection
  } else {
    macs += iv * cfg.channels * cfg.patch_size * cfg.patch_size * df;
  }

  std::size_t per_block = 0;
  per_block += V * da * E;                             // adjacency cosines
  per_block += 4 * V * df * df + 2 * V * V * df;       // self-attention
  per_block += (E + 2 * V + E) * df * df + 2 * E * V * df;  // aggregate
  per_block += (V + 2 * E + V) * df * df + 2 * V * E * df;  // distribute
  per_block += (V + E) * ((da + df) * hid * 2 + hid * (df + da));  // FFNs
  macs += cfg.depth * per_block;

  if (uses_expert(cfg)) macs += cfg.dims.n_virtual_edges * df;
  macs += cfg.head_width() * cfg.classes;
  return macs;
}

// ---- serialization ---------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'H', 'G', 'V', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ofstream& f, std::uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), 4);
}
void write_u64(std::ofstream& f, std::uint64_t v) {
  f.write(reinterpret_cast<const char*>(&v), 8);
}
std::uint32_t read_u32(std::ifstream& f) {
  std::uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::uint64_t read_u64(std::ifstream& f) {
  std::uint64_t v = 0;
  f.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

std::string stem_name(Stem s) {
  return s == Stem::conv_stem ? "conv_stem" : "patch_projection";
}
std::string pooling_name(Pooling p) {
  switch (p) {
    case Pooling::average: return "average";
    case Pooling::image: return "image";
    case Pooling::expert: return "expert";
    case Pooling::expert_image: return "expert_image";
  }
  return "expert";
}

}  // namespace

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["name"] = c.name;
  j["dims"] = {{"image_vertices", c.dims.n_image_vertices},
               {"virtual_vertices", c.dims.n_virtual_vertices},
               {"primary_edges", c.dims.n_primary_edges},
               {"virtual_edges", c.dims.n_virtual_edges}};
  j["d_f"] = c.d_f;
  j["d_a"] = c.d_a;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["patch_size"] = c.patch_size;
  j["image_size"] = c.image_size;
  j["channels"] = c.channels;
  j["classes"] = c.classes;
  j["stem"] = stem_name(c.stem);
  j["pooling"] = pooling_name(c.pooling);
  j["drop_image_at_head"] = c.drop_image_at_head;
  j["expert_top_k"] = c.expert_top_k;
  j["alpha"] = c.alpha;
  j["beta"] = c.beta;
  j["gamma"] = c.gamma;
  j["lambda_pop"] = c.lambda_pop;
  j["lambda_div"] = c.lambda_div;
  j["lambda_exp"] = c.lambda_exp;
  j["lambda_ce"] = c.lambda_ce;
  j["expert_noise_sigma"] = c.expert_noise_sigma;
  j["expert_dropout"] = c.expert_dropout;
  j["class_dropout"] = c.class_dropout;
  j["path_drop"] = c.path_drop;
  j["drop_decay"] = c.drop_decay;
  j["joint_ffn"] = c.joint_ffn;
  j["modulation"] = c.modulation == Modulation::modified ? "modified" : "standard";
  j["scale_logits"] = c.scale_logits;
  j["ffn_hidden_override"] = c.ffn_hidden_override;
  return j.dump(2);
}

ModelConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  if (j.contains("preset") && j.size() <= 2) {
    c = preset(j.at("preset").get<std::string>());
    if (j.contains("classes")) c.classes = j.at("classes").get<std::size_t>();
    return c;
  }
  c.name = j.value("name", "custom");
  const json& d = j.at("dims");
  c.dims = {d.at("image_vertices").get<std::size_t>(),
            d.at("virtual_vertices").get<std::size_t>(),
            d.at("primary_edges").get<std::size_t>(),
            d.at("virtual_edges").get<std::size_t>()};
  c.d_f = j.at("d_f");
  c.d_a = j.at("d_a");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.patch_size = j.at("patch_size");
  c.image_size = j.at("image_size");
  c.channels = j.value("channels", std::size_t(3));
  c.classes = j.at("classes");
  std::string stem = j.value("stem", "conv_stem");
  c.stem = stem == "patch_projection" ? Stem::patch_projection : Stem::conv_stem;
  std::string pool = j.value("pooling", "expert");
  c.pooling = pool == "average" ? Pooling::average
              : pool == "image" ? Pooling::image
              : pool == "expert_image" ? Pooling::expert_image
                                       : Pooling::expert;
  c.drop_image_at_head = j.value("drop_image_at_head", false);
  c.expert_top_k = j.value("expert_top_k", std::size_t(1));
  c.alpha = j.value("alpha", kDefaultAlpha);
  c.beta = j.value("beta", 10.0);
  c.gamma = j.value("gamma", 0.5);
  c.lambda_pop = j.value("lambda_pop", 1.0);
  c.lambda_div = j.value("lambda_div", 1.0);
  c.lambda_exp = j.value("lambda_exp", 1.0);
  c.lambda_ce = j.value("lambda_ce", 0.1);
  c.expert_noise_sigma = j.value("expert_noise_sigma", 0.1);
  c.expert_dropout = j.value("expert_dropout", 0.1);
  c.class_dropout = j.value("class_dropout", 0.0);
  c.path_drop = j.value("path_drop", 0.1);
  c.drop_decay = j.value("drop_decay", true);
  c.joint_ffn = j.value("joint_ffn", true);
  c.modulation = j.value("modulation", std::string("modified")) == "standard"
                     ? Modulation::standard
                     : Modulation::modified;
  c.scale_logits = j.value("scale_logits", false);
  c.ffn_hidden_override = j.value("ffn_hidden_override", std::size_t(0));
  c.validate();
  return c;
}

void save_checkpoint(const std::string& path, const ModelWeights& w,
                     const ModelConfig& cfg) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw TensorError("cannot open checkpoint for writing: " + path);
  f.write(kMagic, 4);
  write_u32(f, kVersion);
  write_u32(f, static_cast<std::uint32_t>(w.tensors.size()));
  for (std::size_t i = 0; i < w.tensors.size(); ++i) {
    const std::string& n = w.names[i];
    write_u32(f, static_cast<std::uint32_t>(n.size()));
    f.write(n.data(), static_cast<std::streamsize>(n.size()));
    const Tensor& t = w.tensors[i];
    write_u32(f, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) write_u64(f, d);
    f.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!f) throw TensorError("checkpoint write failed: " + path);

  std::ofstream cj(path + ".json");
  cj << config_to_json(cfg) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != std::string(kMagic, 4))
    throw TensorError("not a checkpoint file: " + path);
  std::uint32_t version = read_u32(f);
  if (version != kVersion)
    throw TensorError("unsupported checkpoint version " + std::to_string(version));
  std::uint32_t count = read_u32(f);
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t nl = read_u32(f);
    std::string name(nl, '\0');
    f.read(name.data(), nl);
    std::uint32_t nd = read_u32(f);
    std::vector<std::size_t> shape(nd);
    for (auto& d : shape) d = static_cast<std::size_t>(read_u64(f));
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!f) throw TensorError("truncated checkpoint: " + path);
    ck.weights.names.push_back(std::move(name));
    ck.weights.tensors.push_back(std::move(t));
  }
  std::ifstream cj(path + ".json");
  if (!cj) throw TensorError("missing config sidecar: " + path + ".json");
  std::string text((std::istreambuf_iterator<char>(cj)),
                   std::istreambuf_iterator<char>());
  ck.config = config_from_json(text);
  return ck;
}

}  // namespace hgvt
