#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psclab/data.hpp"
#include "psclab/lora.hpp"
#include "psclab/numerics.hpp"
#include "psclab/psc.hpp"
#include "psclab/rope.hpp"
#include "psclab/tensor.hpp"

namespace psclab {

struct ContextError : Error {
  using Error::Error;
};
struct VocabError : Error {
  using Error::Error;
};

struct LoraConfig {
  std::size_t rank = 8;
  bool on_q = true;
  bool on_k = true;
  bool on_v = false;
  bool on_o = false;
  double scale = 1.0;
};

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t d_model = 16;
  std::size_t n_heads = 2;
  std::size_t n_kv_heads = 2;
  std::size_t vocab_size = ByteTokenizer::kVocabSize;
  std::size_t max_context = 256;
  FrequencySchedule schedule;  // schedule.dim must equal d_h()
  std::optional<PscPlacement> psc;
  std::optional<LoraConfig> lora;
  PairLayout layout = PairLayout::HalfBlocks;

  std::size_t d_h() const { return d_model / n_heads; }
  std::size_t kv_dim() const { return n_kv_heads * d_h(); }
  std::size_t hidden() const { return 2 * d_model; }
  std::size_t group_size() const { return n_heads / n_kv_heads; }

  void validate() const {
    if (n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("model: d_model must be a multiple of n_heads");
    if (n_kv_heads == 0 || n_heads % n_kv_heads != 0)
      throw ConfigError("model: n_heads must be a multiple of n_kv_heads");
    if (max_context < 2) throw ConfigError("model: max_context must be >= 2");
    if (d_h() % 2 != 0) throw ConfigError("model: head dim must be even");
    if (schedule.dim != d_h()) throw ConfigError("model: schedule dim must equal head dim");
    schedule.validate();
    if (lora) {
      const std::size_t r = lora->rank;
      if (r == 0 || r > std::min(d_model, d_model) / 2)
        throw ConfigError("model: lora rank out of range");
    }
  }
};

struct LayerWeights {
  Tensor attn_norm;  // [d_model]
  Tensor wq;         // [d_model x d_model]
  Tensor wk;         // [kv_dim x d_model]
  Tensor wv;         // [kv_dim x d_model]
  Tensor wo;         // [d_model x d_model]
  Tensor mlp_norm;   // [d_model]
  Tensor w_gate;     // [hidden x d_model]
  Tensor w_up;       // [hidden x d_model]
  Tensor w_down;     // [d_model x hidden]

  std::optional<LoraAdapter> lora_q, lora_k, lora_v, lora_o;
  std::optional<PscModule> psc;
};

// Toy decoder transformer: pre-norm residual blocks, RMS norms, gated
// MLP, RoPE attention with optional GQA. During fine-tuning only PSC
// and LoRA tensors are trainable; everything else stays frozen.
struct ModelState {
  ModelConfig config;
  Tensor embed;       // [vocab x d_model]
  Tensor lm_head;     // [vocab x d_model]
  Tensor final_norm;  // [d_model]
  std::vector<LayerWeights> layers;
  RotaryCache rotary;

  void rebuild_rotary() {
    rotary = build_cache(frequencies(config.schedule), config.max_context, config.layout);
  }
};

inline ModelState init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelState st;
  st.config = config;
  RngState rng(seed);
  auto uni = [&](std::vector<std::size_t> shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rng.uniform_tensor(std::move(shape), -bound, bound);
  };
  const std::size_t d = config.d_model, kv = config.kv_dim(), hid = config.hidden();
  st.embed = uni({config.vocab_size, d}, d);
  st.lm_head = uni({config.vocab_size, d}, d);
  st.final_norm = Tensor::full({d}, 1.0);
  for (std::size_t l = 0; l < config.layers; ++l) {
    LayerWeights lw;
    lw.attn_norm = Tensor::full({d}, 1.0);
    lw.wq = uni({d, d}, d);
    lw.wk = uni({kv, d}, d);
    lw.wv = uni({kv, d}, d);
    lw.wo = uni({d, d}, d);
    lw.mlp_norm = Tensor::full({d}, 1.0);
    lw.w_gate = uni({hid, d}, d);
    lw.w_up = uni({hid, d}, d);
    lw.w_down = uni({d, hid}, hid);
    if (config.lora) {
      const auto& lc = *config.lora;
      if (lc.on_q) lw.lora_q = init_lora(rng, d, d, lc.rank, lc.scale);
      if (lc.on_k) lw.lora_k = init_lora(rng, kv, d, lc.rank, lc.scale);
      if (lc.on_v) lw.lora_v = init_lora(rng, kv, d, lc.rank, lc.scale);
      if (lc.on_o) lw.lora_o = init_lora(rng, d, d, lc.rank, lc.scale);
    }
    if (config.psc)
      lw.psc = init_psc_module(rng, config.n_heads, config.n_kv_heads, config.d_h(), *config.psc);
    st.layers.push_back(std::move(lw));
  }
  st.rebuild_rotary();
  return st;
}

// Named handle on a weight tensor; the trainable registry is the list
// of these for PSC and LoRA.
struct ParamRef {
  std::string name;
  Tensor* tensor;
};

inline std::vector<ParamRef> trainable_params(ModelState& st) {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    auto& lw = st.layers[l];
    const std::string prefix = "psc.layer" + std::to_string(l);
    if (lw.psc) {
      for (std::size_t h = 0; h < lw.psc->q_heads.size(); ++h) {
        out.push_back({prefix + ".q.head" + std::to_string(h) + ".w1", &lw.psc->q_heads[h].w1});
        out.push_back({prefix + ".q.head" + std::to_string(h) + ".w2", &lw.psc->q_heads[h].w2});
      }
      for (std::size_t h = 0; h < lw.psc->k_heads.size(); ++h) {
        out.push_back({prefix + ".k.head" + std::to_string(h) + ".w1", &lw.psc->k_heads[h].w1});
        out.push_back({prefix + ".k.head" + std::to_string(h) + ".w2", &lw.psc->k_heads[h].w2});
      }
    }
    const std::string lp = "lora.layer" + std::to_string(l);
    auto add_lora = [&](std::optional<LoraAdapter>& ad, const char* tag) {
      if (ad) {
        out.push_back({lp + "." + tag + ".a", &ad->a});
        out.push_back({lp + "." + tag + ".b", &ad->b});
      }
    };
    add_lora(lw.lora_q, "q");
    add_lora(lw.lora_k, "k");
    add_lora(lw.lora_v, "v");
    add_lora(lw.lora_o, "o");
  }
  return out;
}

inline std::vector<ParamRef> all_params(ModelState& st) {
  std::vector<ParamRef> out;
  out.push_back({"model.embed", &st.embed});
  out.push_back({"model.lm_head", &st.lm_head});
  out.push_back({"model.final_norm", &st.final_norm});
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    auto& lw = st.layers[l];
    const std::string p = "model.layer" + std::to_string(l);
    out.push_back({p + ".attn_norm", &lw.attn_norm});
    out.push_back({p + ".wq", &lw.wq});
    out.push_back({p + ".wk", &lw.wk});
    out.push_back({p + ".wv", &lw.wv});
    out.push_back({p + ".wo", &lw.wo});
    out.push_back({p + ".mlp_norm", &lw.mlp_norm});
    out.push_back({p + ".w_gate", &lw.w_gate});
    out.push_back({p + ".w_up", &lw.w_up});
    out.push_back({p + ".w_down", &lw.w_down});
  }
  for (auto& pr : trainable_params(st)) out.push_back(pr);
  return out;
}

using GradMap = std::map<std::string, Tensor>;

namespace detail {

constexpr double kRmsEps = 1e-6;

// y[t] = g * x[t] / rms(x[t]); stores 1/rms per row.
inline Tensor rmsnorm(const Tensor& x, const Tensor& g, std::vector<double>& inv_rms) {
  const std::size_t seq = x.rows(), d = x.cols();
  Tensor y(x.shape());
  inv_rms.resize(seq);
  for (std::size_t t = 0; t < seq; ++t) {
    double ms = 0.0;
    for (std::size_t j = 0; j < d; ++j) ms += x.at(t, j) * x.at(t, j);
    const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + kRmsEps);
    inv_rms[t] = inv;
    for (std::size_t j = 0; j < d; ++j) y.at(t, j) = g[j] * x.at(t, j) * inv;
  }
  return y;
}

inline Tensor rmsnorm_backward(const Tensor& x, const Tensor& g,
                               const std::vector<double>& inv_rms, const Tensor& dy) {
  const std::size_t seq = x.rows(), d = x.cols();
  Tensor dx(x.shape());
  for (std::size_t t = 0; t < seq; ++t) {
    const double inv = inv_rms[t];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += dy.at(t, j) * g[j] * x.at(t, j);
    const double c = dot * inv * inv * inv / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx.at(t, j) = dy.at(t, j) * g[j] * inv - x.at(t, j) * c;
  }
  return dx;
}

// y[t] = W x[t] (+ adapter path); x [seq x in], W [out x in] -> [seq x out]
inline Tensor project(const Tensor& x, const Tensor& w, const std::optional<LoraAdapter>& ad) {
  const std::size_t seq = x.rows();
  Tensor y({seq, w.rows()});
  std::vector<double> xin(x.cols());
  for (std::size_t t = 0; t < seq; ++t) {
    for (std::size_t j = 0; j < x.cols(); ++j) xin[j] = x.at(t, j);
    std::vector<double> yt = ad ? lora_forward(w, *ad, xin) : matvec(w, xin);
    for (std::size_t i = 0; i < w.rows(); ++i) y.at(t, i) = yt[i];
  }
  return y;
}

// dx for a projection; accumulates LoRA grads when present.
inline Tensor project_backward(const Tensor& x, const Tensor& w,
                               const std::optional<LoraAdapter>& ad, const Tensor& dy,
                               GradMap* grads, const std::string& lora_name) {
  const std::size_t seq = x.rows();
  Tensor dx(x.shape());
  std::vector<double> xin(x.cols()), up(w.rows());
  Tensor da, db;
  if (ad && grads) {
    da = Tensor(ad->a.shape());
    db = Tensor(ad->b.shape());
  }
  for (std::size_t t = 0; t < seq; ++t) {
    for (std::size_t j = 0; j < x.cols(); ++j) xin[j] = x.at(t, j);
    for (std::size_t i = 0; i < w.rows(); ++i) up[i] = dy.at(t, i);
    std::vector<double> dxt =
        ad ? lora_input_grad(w, *ad, up) : matvec(transpose(w), up);
    for (std::size_t j = 0; j < x.cols(); ++j) dx.at(t, j) = dxt[j];
    if (ad && grads) {
      LoraGrads lg = lora_backward(w, *ad, xin, up);
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += lg.da[i];
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += lg.db[i];
    }
  }
  if (ad && grads) {
    (*grads)[lora_name + ".a"] = std::move(da);
    (*grads)[lora_name + ".b"] = std::move(db);
  }
  return dx;
}

// [seq x (heads*d_h)] -> [1 x heads x seq x d_h]
inline Tensor to_heads(const Tensor& x, std::size_t heads, std::size_t d_h) {
  const std::size_t seq = x.rows();
  Tensor y({1, heads, seq, d_h});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t j = 0; j < d_h; ++j)
        y.data()[(h * seq + t) * d_h + j] = x.at(t, h * d_h + j);
  return y;
}

inline Tensor from_heads(const Tensor& x) {
  const std::size_t heads = x.dim(1), seq = x.dim(2), d_h = x.dim(3);
  Tensor y({seq, heads * d_h});
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < seq; ++t)
      for (std::size_t j = 0; j < d_h; ++j)
        y.at(t, h * d_h + j) = x.data()[(h * seq + t) * d_h + j];
  return y;
}

struct LayerTrace {
  Tensor x_in;  // [seq x d_model]
  std::vector<double> attn_inv_rms;
  Tensor h_attn;
  Tensor q_raw, k_raw, v_raw;  // head-major 4-D
  Tensor q_pre, k_pre;         // inputs to rotary
  Tensor q_rot, k_rot;         // rotary outputs (post-PSC inputs when placement is Post)
  Tensor q_fin, k_fin;         // what attention consumes
  std::vector<Tensor> probs;   // per query head, [seq x seq]
  Tensor attn_concat;          // [seq x d_model]
  Tensor x_mid;
  std::vector<double> mlp_inv_rms;
  Tensor h_mlp;
  Tensor z_gate, z_up;  // [seq x hidden]
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Tensor x_final;
  std::vector<double> final_inv_rms;
  Tensor h_final;
  Tensor logits;  // [seq x vocab]
};

}  // namespace detail

inline Tensor forward_traced(const ModelState& st, const TokenSeq& tokens,
                             detail::ForwardTrace* trace) {
  const auto& cfg = st.config;
  const std::size_t seq = tokens.size();
  if (seq == 0) throw ContextError("forward: empty input");
  if (seq > cfg.max_context) throw ContextError("forward: input longer than max_context");
  for (auto tok : tokens)
    if (tok >= cfg.vocab_size) throw VocabError("forward: token id outside vocabulary");

  const std::size_t d = cfg.d_model, d_h = cfg.d_h(), nh = cfg.n_heads, nkv = cfg.n_kv_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d_h));
  std::vector<std::size_t> positions(seq);
  for (std::size_t t = 0; t < seq; ++t) positions[t] = t;

  Tensor x({seq, d});
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t j = 0; j < d; ++j) x.at(t, j) = st.embed.at(tokens[t], j);

  if (trace) trace->layers.resize(st.layers.size());

  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    const auto& lw = st.layers[l];
    detail::LayerTrace scratch;
    detail::LayerTrace& tr = trace ? trace->layers[l] : scratch;
    tr.x_in = x;

    Tensor h = detail::rmsnorm(x, lw.attn_norm, tr.attn_inv_rms);
    tr.h_attn = h;

    tr.q_raw = detail::to_heads(detail::project(h, lw.wq, lw.lora_q), nh, d_h);
    tr.k_raw = detail::to_heads(detail::project(h, lw.wk, lw.lora_k), nkv, d_h);
    tr.v_raw = detail::to_heads(detail::project(h, lw.wv, lw.lora_v), nkv, d_h);

    const bool pre = lw.psc && lw.psc->placement == PscPlacement::Pre;
    const bool post = lw.psc && lw.psc->placement == PscPlacement::Post;
    tr.q_pre = pre ? apply_pre(tr.q_raw, lw.psc->q_heads) : tr.q_raw;
    tr.k_pre = pre ? apply_pre(tr.k_raw, lw.psc->k_heads) : tr.k_raw;

    tr.q_rot = apply_rotary(tr.q_pre, positions, st.rotary);
    tr.k_rot = apply_rotary(tr.k_pre, positions, st.rotary);

    tr.q_fin = post ? apply_post(tr.q_rot, lw.psc->q_heads) : tr.q_rot;
    tr.k_fin = post ? apply_post(tr.k_rot, lw.psc->k_heads) : tr.k_rot;

    // causal softmax attention; kv heads are shared across query-head
    // groups rather than materialized per query head
    tr.probs.assign(nh, Tensor{});
    Tensor ctx({1, nh, seq, d_h});
    for (std::size_t h2 = 0; h2 < nh; ++h2) {
      const std::size_t kvh = h2 / cfg.group_size();
      Tensor scores({seq, seq});
      for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          const double* qv = tr.q_fin.data().data() + (h2 * seq + t) * d_h;
          const double* kv2 = tr.k_fin.data().data() + (kvh * seq + s) * d_h;
          for (std::size_t j = 0; j < d_h; ++j) dot += qv[j] * kv2[j];
          scores.at(t, s) = dot * inv_sqrt_dh;
        }
        for (std::size_t s = t + 1; s < seq; ++s) scores.at(t, s) = -1e300;
      }
      Tensor p = softmax_rows(scores);
      for (std::size_t t = 0; t < seq; ++t) {
        double* out = ctx.data().data() + (h2 * seq + t) * d_h;
        for (std::size_t s = 0; s <= t; ++s) {
          const double w = p.at(t, s);
          const double* vv = tr.v_raw.data().data() + (kvh * seq + s) * d_h;
          for (std::size_t j = 0; j < d_h; ++j) out[j] += w * vv[j];
        }
      }
      tr.probs[h2] = std::move(p);
    }
    tr.attn_concat = detail::from_heads(ctx);
    Tensor o = detail::project(tr.attn_concat, lw.wo, lw.lora_o);
    Tensor x_mid = x;
    for (std::size_t i = 0; i < x_mid.size(); ++i) x_mid[i] += o[i];
    tr.x_mid = x_mid;

    Tensor h2n = detail::rmsnorm(x_mid, lw.mlp_norm, tr.mlp_inv_rms);
    tr.h_mlp = h2n;
    tr.z_gate = detail::project(h2n, lw.w_gate, std::nullopt);
    tr.z_up = detail::project(h2n, lw.w_up, std::nullopt);
    Tensor act(tr.z_gate.shape());
    for (std::size_t i = 0; i < act.size(); ++i)
      act[i] = silu_scalar(tr.z_gate[i]) * tr.z_up[i];
    Tensor y = detail::project(act, lw.w_down, std::nullopt);
    x = x_mid;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[i];
  }

  detail::ForwardTrace scratch_top;
  detail::ForwardTrace& ft = trace ? *trace : scratch_top;
  ft.x_final = x;
  ft.h_final = detail::rmsnorm(x, st.final_norm, ft.final_inv_rms);
  ft.logits = detail::project(ft.h_final, st.lm_head, std::nullopt);
  ft.logits.require_finite("logits");
  return ft.logits;
}

inline Tensor forward(const ModelState& st, const TokenSeq& tokens) {
  return forward_traced(st, tokens, nullptr);
}

// NLL of tokens[t+1] given logits[t], one entry per target position.
inline std::vector<double> nll_per_target(const Tensor& logits, const TokenSeq& tokens) {
  const std::size_t seq = tokens.size();
  std::vector<double> out(seq - 1);
  const std::size_t vocab = logits.cols();
  for (std::size_t t = 0; t + 1 < seq; ++t) {
    double mx = -1e300;
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, logits.at(t, v));
    double lse = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) lse += std::exp(logits.at(t, v) - mx);
    lse = mx + std::log(lse);
    out[t] = lse - logits.at(t, tokens[t + 1]);
  }
  return out;
}

inline double loss(const ModelState& st, const TokenSeq& tokens) {
  if (tokens.size() < 2) throw ContextError("loss: need at least 2 tokens");
  const Tensor logits = forward(st, tokens);
  const std::vector<double> nll = nll_per_target(logits, tokens);
  double total = 0.0;
  for (double v : nll) total += v;
  return total / static_cast<double>(nll.size());
}

// Gradients of the mean next-token NLL for every registered trainable
// parameter. Frozen tensors get no entry.
inline double loss_and_grads(const ModelState& st, const TokenSeq& tokens, GradMap& grads) {
  if (tokens.size() < 2) throw ContextError("loss: need at least 2 tokens");
  const auto& cfg = st.config;
  const std::size_t seq = tokens.size(), d = cfg.d_model, d_h = cfg.d_h();
  const std::size_t nh = cfg.n_heads, nkv = cfg.n_kv_heads, vocab = cfg.vocab_size;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(d_h));

  detail::ForwardTrace ft;
  forward_traced(st, tokens, &ft);
  const std::size_t ntargets = seq - 1;
  const double inv_n = 1.0 / static_cast<double>(ntargets);

  std::vector<double> nll = nll_per_target(ft.logits, tokens);
  double total = 0.0;
  for (double v : nll) total += v;
  const double loss_value = total * inv_n;

  // d loss / d logits = (softmax - onehot) / ntargets on scored rows
  Tensor dlogits({seq, vocab});
  for (std::size_t t = 0; t < ntargets; ++t) {
    double mx = -1e300;
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, ft.logits.at(t, v));
    double lse = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) lse += std::exp(ft.logits.at(t, v) - mx);
    for (std::size_t v = 0; v < vocab; ++v)
      dlogits.at(t, v) = std::exp(ft.logits.at(t, v) - mx) / lse * inv_n;
    dlogits.at(t, tokens[t + 1]) -= inv_n;
  }

  Tensor dh = detail::project_backward(ft.h_final, st.lm_head, std::nullopt, dlogits, nullptr, "");
  Tensor dx = detail::rmsnorm_backward(ft.x_final, st.final_norm, ft.final_inv_rms, dh);

  std::vector<std::size_t> positions(seq);
  for (std::size_t t = 0; t < seq; ++t) positions[t] = t;

  for (std::size_t l = st.layers.size(); l-- > 0;) {
    const auto& lw = st.layers[l];
    const auto& tr = ft.layers[l];
    const std::string lp = "lora.layer" + std::to_string(l);
    const std::string pp = "psc.layer" + std::to_string(l);

    // MLP block
    Tensor dact(tr.z_gate.shape());
    {
      Tensor dy = dx;  // residual: dx flows to both branches
      Tensor dtmp = detail::project_backward(
          Tensor(tr.z_gate.shape()), lw.w_down, std::nullopt, dy, nullptr, "");
      // project_backward only needs x for LoRA grads; w_down has none,
      // so a zero placeholder is fine for dx computation.
      for (std::size_t i = 0; i < dact.size(); ++i) dact[i] = dtmp[i];
    }
    Tensor dz_gate(tr.z_gate.shape()), dz_up(tr.z_up.shape());
    for (std::size_t i = 0; i < dact.size(); ++i) {
      dz_gate[i] = dact[i] * tr.z_up[i] * silu_deriv(tr.z_gate[i]);
      dz_up[i] = dact[i] * silu_scalar(tr.z_gate[i]);
    }
    Tensor dh_mlp =
        detail::project_backward(tr.h_mlp, lw.w_gate, std::nullopt, dz_gate, nullptr, "");
    {
      Tensor t2 = detail::project_backward(tr.h_mlp, lw.w_up, std::nullopt, dz_up, nullptr, "");
      for (std::size_t i = 0; i < dh_mlp.size(); ++i) dh_mlp[i] += t2[i];
    }
    Tensor dx_mid = detail::rmsnorm_backward(tr.x_mid, lw.mlp_norm, tr.mlp_inv_rms, dh_mlp);
    for (std::size_t i = 0; i < dx_mid.size(); ++i) dx_mid[i] += dx[i];

    // attention output projection
    Tensor dconcat =
        detail::project_backward(tr.attn_concat, lw.wo, lw.lora_o, dx_mid, &grads, lp + ".o");
    Tensor dctx = detail::to_heads(dconcat, nh, d_h);

    // attention core
    Tensor dq_fin({1, nh, seq, d_h});
    Tensor dk_fin({1, nkv, seq, d_h});
    Tensor dv_raw({1, nkv, seq, d_h});
    for (std::size_t h2 = 0; h2 < nh; ++h2) {
      const std::size_t kvh = h2 / cfg.group_size();
      const Tensor& p = tr.probs[h2];
      for (std::size_t t = 0; t < seq; ++t) {
        const double* dout = dctx.data().data() + (h2 * seq + t) * d_h;
        // dP[t][s] = dout . v[s]; softmax jacobian per row
        std::vector<double> dp(t + 1);
        double rowdot = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const double* vv = tr.v_raw.data().data() + (kvh * seq + s) * d_h;
          double acc = 0.0;
          for (std::size_t j = 0; j < d_h; ++j) acc += dout[j] * vv[j];
          dp[s] = acc;
          rowdot += p.at(t, s) * acc;
          double* dvv = dv_raw.data().data() + (kvh * seq + s) * d_h;
          const double w = p.at(t, s);
          for (std::size_t j = 0; j < d_h; ++j) dvv[j] += w * dout[j];
        }
        for (std::size_t s = 0; s <= t; ++s) {
          const double dscore = p.at(t, s) * (dp[s] - rowdot) * inv_sqrt_dh;
          const double* qv = tr.q_fin.data().data() + (h2 * seq + t) * d_h;
          const double* kv2 = tr.k_fin.data().data() + (kvh * seq + s) * d_h;
          double* dq = dq_fin.data().data() + (h2 * seq + t) * d_h;
          double* dk = dk_fin.data().data() + (kvh * seq + s) * d_h;
          for (std::size_t j = 0; j < d_h; ++j) {
            dq[j] += dscore * kv2[j];
            dk[j] += dscore * qv[j];
          }
        }
      }
    }

    const bool pre = lw.psc && lw.psc->placement == PscPlacement::Pre;
    const bool post = lw.psc && lw.psc->placement == PscPlacement::Post;

    Tensor dq_rot = dq_fin, dk_rot = dk_fin;
    if (post) {
      PscGrads gq = backward(tr.q_rot, lw.psc->q_heads, dq_fin);
      PscGrads gk = backward(tr.k_rot, lw.psc->k_heads, dk_fin);
      dq_rot = gq.dx;
      dk_rot = gk.dx;
      for (std::size_t h2 = 0; h2 < nh; ++h2) {
        grads[pp + ".q.head" + std::to_string(h2) + ".w1"] = std::move(gq.dw1[h2]);
        grads[pp + ".q.head" + std::to_string(h2) + ".w2"] = std::move(gq.dw2[h2]);
      }
      for (std::size_t h2 = 0; h2 < nkv; ++h2) {
        grads[pp + ".k.head" + std::to_string(h2) + ".w1"] = std::move(gk.dw1[h2]);
        grads[pp + ".k.head" + std::to_string(h2) + ".w2"] = std::move(gk.dw2[h2]);
      }
    }

    // inverse rotation transports gradients back through RoPE
    Tensor dq_pre = dq_rot, dk_pre = dk_rot;
    const std::size_t half = d_h / 2;
    for (std::size_t h2 = 0; h2 < nh; ++h2)
      for (std::size_t t = 0; t < seq; ++t)
        rotate_inplace_inverse(dq_pre.data().data() + (h2 * seq + t) * d_h, d_h,
                               st.rotary.cos_table.data().data() + positions[t] * half,
                               st.rotary.sin_table.data().data() + positions[t] * half,
                               st.rotary.layout);
    for (std::size_t h2 = 0; h2 < nkv; ++h2)
      for (std::size_t t = 0; t < seq; ++t)
        rotate_inplace_inverse(dk_pre.data().data() + (h2 * seq + t) * d_h, d_h,
                               st.rotary.cos_table.data().data() + positions[t] * half,
                               st.rotary.sin_table.data().data() + positions[t] * half,
                               st.rotary.layout);

    Tensor dq_raw = dq_pre, dk_raw = dk_pre;
    if (pre) {
      PscGrads gq = backward(tr.q_raw, lw.psc->q_heads, dq_pre);
      PscGrads gk = backward(tr.k_raw, lw.psc->k_heads, dk_pre);
      dq_raw = gq.dx;
      dk_raw = gk.dx;
      for (std::size_t h2 = 0; h2 < nh; ++h2) {
        grads[pp + ".q.head" + std::to_string(h2) + ".w1"] = std::move(gq.dw1[h2]);
        grads[pp + ".q.head" + std::to_string(h2) + ".w2"] = std::move(gq.dw2[h2]);
      }
      for (std::size_t h2 = 0; h2 < nkv; ++h2) {
        grads[pp + ".k.head" + std::to_string(h2) + ".w1"] = std::move(gk.dw1[h2]);
        grads[pp + ".k.head" + std::to_string(h2) + ".w2"] = std::move(gk.dw2[h2]);
      }
    }

    Tensor dh_attn =
        detail::project_backward(tr.h_attn, lw.wq, lw.lora_q, detail::from_heads(dq_raw), &grads,
                                 lp + ".q");
    {
      Tensor t2 = detail::project_backward(tr.h_attn, lw.wk, lw.lora_k,
                                           detail::from_heads(dk_raw), &grads, lp + ".k");
      for (std::size_t i = 0; i < dh_attn.size(); ++i) dh_attn[i] += t2[i];
      Tensor t3 = detail::project_backward(tr.h_attn, lw.wv, lw.lora_v,
                                           detail::from_heads(dv_raw), &grads, lp + ".v");
      for (std::size_t i = 0; i < dh_attn.size(); ++i) dh_attn[i] += t3[i];
    }
    Tensor dx_in = detail::rmsnorm_backward(tr.x_in, lw.attn_norm, tr.attn_inv_rms, dh_attn);
    for (std::size_t i = 0; i < dx_in.size(); ++i) dx_in[i] += dx_mid[i];
    dx = std::move(dx_in);
  }

  // prune entries for adapters that are not configured
  for (auto it = grads.begin(); it != grads.end();) {
    if (it->second.size() == 0)
      it = grads.erase(it);
    else
      ++it;
  }
  return loss_value;
}

inline GradMap backward(const ModelState& st, const TokenSeq& tokens) {
  GradMap grads;
  loss_and_grads(st, tokens, grads);
  return grads;
}

// True when perturbing the token at position p leaves all logits at
// positions < p unchanged (within 1e-12).
inline bool causality_probe(const ModelState& st, const TokenSeq& tokens, std::size_t p) {
  if (p >= tokens.size()) throw RangeError("causality_probe: position out of range");
  const Tensor base = forward(st, tokens);
  TokenSeq perturbed = tokens;
  perturbed[p] = (perturbed[p] + 1) % st.config.vocab_size;
  const Tensor alt = forward(st, perturbed);
  for (std::size_t t = 0; t < p; ++t)
    for (std::size_t v = 0; v < st.config.vocab_size; ++v)
      if (std::abs(base.at(t, v) - alt.at(t, v)) > 1e-12) return false;
  return true;
}

}  // namespace psclab
