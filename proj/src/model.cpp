#include "aapp/model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "aapp/rng.hpp"

namespace aapp {

namespace {

constexpr float kLnEps = 1e-6f;

void fill_uniform(Matrix& m, Rng rng, double limit) {
  for (auto& f : m.a) f = float(rng.uniform(-limit, limit));
}

Matrix init_matrix(const Rng& parent, const std::string& label, int rows, int cols) {
  Matrix m(rows, cols);
  // scaled uniform (Xavier) from the tensor's own stream
  const double limit = std::sqrt(6.0 / double(rows + cols));
  fill_uniform(m, parent.derive(label), limit);
  return m;
}

uint64_t fnv_bytes(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

const char* target_kind_name(TargetKind k) {
  return k == TargetKind::AttnOProj ? "o_proj" : "down_proj";
}

ModelConfig ModelConfig::resolved() const {
  ModelConfig c = *this;
  if (c.num_layers < 1 || c.num_heads < 1 || c.d_model < 1 || c.d_ff < 1 ||
      c.vocab_size < 1) {
    throw std::invalid_argument("ModelConfig: all counts must be >= 1");
  }
  if (c.head_dim == 0) {
    if (c.d_model % c.num_heads != 0) {
      throw std::invalid_argument("ModelConfig: d_model not divisible by num_heads");
    }
    c.head_dim = c.d_model / c.num_heads;
  }
  if (c.num_heads * c.head_dim != c.d_model) {
    throw std::invalid_argument("ModelConfig: num_heads * head_dim != d_model");
  }
  return c;
}

uint64_t ModelConfig::hash() const {
  uint64_t h = 1469598103934665603ull;
  const int fields[6] = {num_layers, num_heads, d_model, head_dim, d_ff, vocab_size};
  h = fnv_bytes(fields, sizeof(fields), h);
  h = fnv_bytes(&seed, sizeof(seed), h);
  return h;
}

std::vector<PrunableTarget> Model::prunable_targets() const {
  std::vector<PrunableTarget> out;
  out.reserve(size_t(cfg.num_layers) * 2);
  for (int l = 0; l < cfg.num_layers; ++l) {
    out.push_back({l, TargetKind::AttnOProj});
    out.push_back({l, TargetKind::MlpDownProj});
  }
  return out;
}

int Model::channel_count(PrunableTarget t) const {
  return t.kind == TargetKind::AttnOProj ? cfg.d_model : cfg.d_ff;
}

const Matrix& Model::final_weight(PrunableTarget t) const {
  if (t.layer < 0 || t.layer >= cfg.num_layers) {
    throw std::invalid_argument("final_weight: layer out of range");
  }
  return t.kind == TargetKind::AttnOProj ? layers[size_t(t.layer)].wo
                                         : layers[size_t(t.layer)].w_down;
}

Matrix& Model::final_weight(PrunableTarget t) {
  return const_cast<Matrix&>(static_cast<const Model*>(this)->final_weight(t));
}

uint64_t Model::weight_fingerprint() const {
  uint64_t h = 1469598103934665603ull;
  auto fold = [&h](const std::vector<float>& v) {
    h = fnv_bytes(v.data(), v.size() * sizeof(float), h);
  };
  fold(embed.a);
  for (const auto& lw : layers) {
    fold(lw.wq.a);
    fold(lw.wk.a);
    fold(lw.wv.a);
    fold(lw.wo.a);
    fold(lw.w_up.a);
    fold(lw.w_down.a);
    fold(lw.ln1_g);
    fold(lw.ln2_g);
  }
  fold(lnf_g);
  fold(head.a);
  return h;
}

Model synthesize_model(const ModelConfig& cfg_in) {
  const ModelConfig cfg = cfg_in.resolved();
  const Rng root(cfg.seed);

  Model m;
  m.cfg = cfg;
  m.embed = Matrix(cfg.vocab_size, cfg.d_model);
  fill_uniform(m.embed, root.derive("embed"), 1.0);

  m.layers.resize(static_cast<size_t>(cfg.num_layers));
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + "/";
    LayerWeights& lw = m.layers[size_t(l)];
    lw.wq = init_matrix(root, p + "wq", cfg.d_model, cfg.d_model);
    lw.wk = init_matrix(root, p + "wk", cfg.d_model, cfg.d_model);
    lw.wv = init_matrix(root, p + "wv", cfg.d_model, cfg.d_model);
    lw.wo = init_matrix(root, p + "wo", cfg.d_model, cfg.d_model);
    lw.w_up = init_matrix(root, p + "w_up", cfg.d_ff, cfg.d_model);
    lw.w_down = init_matrix(root, p + "w_down", cfg.d_model, cfg.d_ff);
    lw.ln1_g.assign(size_t(cfg.d_model), 1.0f);
    lw.ln2_g.assign(size_t(cfg.d_model), 1.0f);
  }
  m.lnf_g.assign(size_t(cfg.d_model), 1.0f);
  m.head = init_matrix(root, "head", cfg.vocab_size, cfg.d_model);
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace {

std::vector<int> iota_vec(int n) {
  std::vector<int> v(static_cast<size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void check_mask(const MaterializedTarget& mt, int channels, const char* where) {
  if (mt.mask.kept.empty()) {
    throw std::invalid_argument(std::string(where) + ": empty kept set");
  }
  if (mt.mask.kept.back() >= channels || mt.w_final_compact.cols != int(mt.mask.kept.size())) {
    throw std::invalid_argument(std::string(where) + ": mask channel count mismatch");
  }
}

// ln(h)·g for one row
inline void norm_row(std::span<const float> x, std::span<float> out,
                     const std::vector<float>& gain) {
  layer_norm(x, out, kLnEps);
  for (size_t j = 0; j < out.size(); ++j) out[j] *= gain[j];
}

}  // namespace

Tensor3 embed_tokens(const Model& m, const TokenBatch& tokens) {
  const int d = m.cfg.d_model;
  Tensor3 h(tokens.b, tokens.s, d);
  for (int b = 0; b < tokens.b; ++b) {
    for (int t = 0; t < tokens.s; ++t) {
      const int id = tokens.at(b, t);
      if (id < 0 || id >= m.cfg.vocab_size) {
        throw std::invalid_argument("embed_tokens: token id out of range");
      }
      const float* e = m.embed.row(id);
      float* out = h.row(b, t);
      for (int j = 0; j < d; ++j) out[j] = e[j];
    }
  }
  return h;
}

Tensor3 post_norm_at(const Model& m, const Tensor3& h, int layer) {
  if (layer < 0 || layer >= m.cfg.num_layers) {
    throw std::invalid_argument("post_norm_at: layer out of range");
  }
  Tensor3 out(h.b, h.s, h.c);
  const auto& gain = m.layers[size_t(layer)].ln1_g;
  for (int b = 0; b < h.b; ++b) {
    for (int t = 0; t < h.s; ++t) {
      norm_row(std::span(h.row(b, t), size_t(h.c)), std::span(out.row(b, t), size_t(h.c)),
               gain);
    }
  }
  return out;
}

void run_layers(const Model& m, Tensor3& h, int layer_begin, int layer_end,
                const ForwardOptions& opts, ForwardTrace* trace) {
  const ModelConfig& cfg = m.cfg;
  const int B = h.b, S = h.s, d = cfg.d_model, hd = cfg.head_dim, H = cfg.num_heads;
  if (h.c != d) throw std::invalid_argument("run_layers: hidden width mismatch");
  if (layer_begin < 0 || layer_end > cfg.num_layers || layer_begin > layer_end) {
    throw std::invalid_argument("run_layers: bad layer range");
  }
  MacCounter* mc = opts.macs;
  const float inv_sqrt_hd = float(1.0 / std::sqrt(double(hd)));

  const std::vector<int> all_d = iota_vec(d);
  const std::vector<int> all_ff = iota_vec(cfg.d_ff);

  std::vector<float> scores(static_cast<size_t>(S));
  std::vector<float> delta;
  std::vector<float> gathered;

  for (int l = layer_begin; l < layer_end; ++l) {
    const LayerWeights& W = m.layers[size_t(l)];

    // ---- attention ----
    const MaterializedTarget* mo =
        opts.masks ? opts.masks->find({l, TargetKind::AttnOProj}) : nullptr;
    if (mo) check_mask(*mo, d, "forward(o_proj)");
    // trace wants the unmasked X_int, so the upstream runs dense in that case
    const bool full_up_attn = !mo || opts.trace;
    const std::vector<int>& kept_o = full_up_attn ? all_d : mo->mask.kept;
    const Matrix& wv_eff = full_up_attn ? W.wv : mo->w_upstream_compact;
    const int ko = int(kept_o.size());

    Tensor3 xn(B, S, d);
    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < S; ++t) {
        norm_row(std::span(h.row(b, t), size_t(d)), std::span(xn.row(b, t), size_t(d)),
                 W.ln1_g);
      }
    }
    if (trace) trace->post_norm[l] = xn;

    Tensor3 q(B, S, d), k(B, S, d), v(B, S, ko);
    const int bs = B * S;
    linear_rows(W.wq, xn.v.data(), bs, q.v.data(), mc ? &mc->attn_proj : nullptr);
    linear_rows(W.wk, xn.v.data(), bs, k.v.data(), mc ? &mc->attn_proj : nullptr);
    linear_rows(wv_eff, xn.v.data(), bs, v.v.data(), mc ? &mc->attn_proj : nullptr);

    // causal attention, head by head; ao holds X_int of o_proj over kept dims
    Tensor3 ao(B, S, ko);
    for (int b = 0; b < B; ++b) {
      for (int head = 0; head < H; ++head) {
        const int c0 = head * hd;
        // kept_o is sorted, so this head's dims form a contiguous run
        int p0 = 0;
        while (p0 < ko && kept_o[size_t(p0)] < c0) ++p0;
        int p1 = p0;
        while (p1 < ko && kept_o[size_t(p1)] < c0 + hd) ++p1;

        for (int t = 0; t < S; ++t) {
          const float* qr = q.row(b, t) + c0;
          for (int s2 = 0; s2 <= t; ++s2) {
            const float* kr = k.row(b, s2) + c0;
            double acc = 0.0;
            for (int j = 0; j < hd; ++j) acc += double(qr[j]) * double(kr[j]);
            scores[size_t(s2)] = float(acc) * inv_sqrt_hd;
          }
          if (mc) mc->attn_scores += uint64_t(t + 1) * uint64_t(hd);
          softmax_inplace(std::span(scores.data(), size_t(t + 1)));
          for (int p = p0; p < p1; ++p) {
            double acc = 0.0;
            for (int s2 = 0; s2 <= t; ++s2) {
              acc += double(scores[size_t(s2)]) * double(v.at(b, s2, p));
            }
            ao.row(b, t)[p] = float(acc);
          }
          if (mc) mc->attn_scores += uint64_t(t + 1) * uint64_t(p1 - p0);
        }
      }
    }
    if (trace) trace->x_int[PrunableTarget{l, TargetKind::AttnOProj}.key()] = ao;

    const Matrix& wo_eff = mo ? mo->w_final_compact : W.wo;
    const int ko_in = wo_eff.cols;
    const float* o_src = ao.v.data();
    if (mo && full_up_attn) {
      gathered.resize(size_t(bs) * size_t(ko_in));
      for (int r = 0; r < bs; ++r) {
        const float* row = ao.v.data() + size_t(r) * size_t(ko);
        float* dst = gathered.data() + size_t(r) * size_t(ko_in);
        for (int j = 0; j < ko_in; ++j) dst[j] = row[mo->mask.kept[size_t(j)]];
      }
      o_src = gathered.data();
    }
    delta.resize(size_t(bs) * size_t(d));
    linear_rows(wo_eff, o_src, bs, delta.data(), mc ? &mc->attn_proj : nullptr);
    for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta[i];

    // ---- mlp ----
    const MaterializedTarget* md =
        opts.masks ? opts.masks->find({l, TargetKind::MlpDownProj}) : nullptr;
    if (md) check_mask(*md, cfg.d_ff, "forward(down_proj)");
    const bool full_up_mlp = !md || opts.trace;
    const Matrix& wup_eff = full_up_mlp ? W.w_up : md->w_upstream_compact;
    const int kd = wup_eff.rows;

    for (int b = 0; b < B; ++b) {
      for (int t = 0; t < S; ++t) {
        norm_row(std::span(h.row(b, t), size_t(d)), std::span(xn.row(b, t), size_t(d)),
                 W.ln2_g);
      }
    }
    Tensor3 u(B, S, kd);
    linear_rows(wup_eff, xn.v.data(), bs, u.v.data(), mc ? &mc->mlp : nullptr);
    for (auto& f : u.v) f = silu(f);
    if (trace) trace->x_int[PrunableTarget{l, TargetKind::MlpDownProj}.key()] = u;

    const Matrix& wdown_eff = md ? md->w_final_compact : W.w_down;
    const int kd_in = wdown_eff.cols;
    const float* d_src = u.v.data();
    if (md && full_up_mlp) {
      gathered.resize(size_t(bs) * size_t(kd_in));
      for (int r = 0; r < bs; ++r) {
        const float* row = u.v.data() + size_t(r) * size_t(kd);
        float* dst = gathered.data() + size_t(r) * size_t(kd_in);
        for (int j = 0; j < kd_in; ++j) dst[j] = row[md->mask.kept[size_t(j)]];
      }
      d_src = gathered.data();
    }
    delta.resize(size_t(bs) * size_t(d));
    linear_rows(wdown_eff, d_src, bs, delta.data(), mc ? &mc->mlp : nullptr);
    for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += delta[i];
  }
}

Tensor3 output_logits(const Model& m, const Tensor3& h, MacCounter* macs) {
  const int d = m.cfg.d_model, V = m.cfg.vocab_size;
  Tensor3 logits(h.b, h.s, V);
  Tensor3 xn(h.b, h.s, d);
  for (int b = 0; b < h.b; ++b) {
    for (int t = 0; t < h.s; ++t) {
      norm_row(std::span(h.row(b, t), size_t(d)), std::span(xn.row(b, t), size_t(d)),
               m.lnf_g);
    }
  }
  linear_rows(m.head, xn.v.data(), h.b * h.s, logits.v.data(),
              macs ? &macs->head : nullptr);
  return logits;
}

Tensor3 forward(const Model& m, const TokenBatch& tokens, const ForwardOptions& opts,
                ForwardTrace* trace) {
  if (opts.masks) {
    for (const auto& mt : opts.masks->items) {
      if (mt.mask.target.layer < 0 || mt.mask.target.layer >= m.cfg.num_layers) {
        throw std::invalid_argument("forward: mask for unknown target layer");
      }
    }
  }
  Tensor3 h = embed_tokens(m, tokens);
  run_layers(m, h, 0, m.cfg.num_layers, opts, trace);
  return output_logits(m, h, opts.macs);
}

}  // namespace aapp
