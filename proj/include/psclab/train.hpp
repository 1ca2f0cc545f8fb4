#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "psclab/data.hpp"
#include "psclab/lora.hpp"
#include "psclab/model.hpp"
#include "psclab/phase_analysis.hpp"
#include "psclab/psc.hpp"
#include "psclab/rope.hpp"
#include "psclab/tensor.hpp"

namespace psclab {

struct TrainError : Error {
  using Error::Error;
};

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double eps = 1e-8;
  std::size_t warmup_steps = 20;
  std::size_t total_steps = 100;
  std::size_t batch_size = 1;
  std::size_t grad_accum = 4;
  std::size_t seq_len = 64;
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // 0 disables
  // stopping criterion: sampled-subset perplexity every eval_every
  // steps once past baseline_steps; stop when relative improvement
  // falls under improve_threshold
  bool early_stop = false;
  std::size_t eval_every = 250;
  std::size_t baseline_steps = 500;
  double improve_threshold = 1e-3;

  void validate() const {
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw ConfigError("train: betas must be in [0,1)");
    if (warmup_steps > total_steps) throw ConfigError("train: warmup exceeds total steps");
    if (batch_size == 0 || grad_accum == 0) throw ConfigError("train: batch/accum must be >= 1");
    if (seq_len < 2) throw ConfigError("train: seq_len must be >= 2");
  }
};

// Linear warmup then constant.
inline double lr_at(const TrainConfig& cfg, std::size_t step) {
  if (step < 1) throw RangeError("lr_at: step must be >= 1");
  if (cfg.warmup_steps == 0) return cfg.lr;
  return cfg.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
}

struct AdamWState {
  struct Moments {
    Tensor m;
    Tensor v;
  };
  std::map<std::string, Moments> moments;
  std::size_t step = 0;
};

// Standard bias-corrected AdamW; with weight_decay = 0 this is Adam.
inline void adamw_step(AdamWState& opt, const std::vector<ParamRef>& params, const GradMap& grads,
                       const TrainConfig& cfg) {
  opt.step += 1;
  const double lr = lr_at(cfg, opt.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  for (const auto& p : params) {
    auto git = grads.find(p.name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (!g.same_shape(*p.tensor)) throw ShapeError("adamw: gradient shape mismatch: " + p.name);
    if (!g.all_finite()) throw TrainError("adamw: non-finite gradient for " + p.name);
    auto& mom = opt.moments[p.name];
    if (mom.m.size() == 0) {
      mom.m = Tensor(g.shape());
      mom.v = Tensor(g.shape());
    }
    Tensor& w = *p.tensor;
    for (std::size_t i = 0; i < g.size(); ++i) {
      mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g[i];
      mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / bc1;
      const double vhat = mom.v[i] / bc2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * w[i]);
    }
  }
}

struct HistoryEntry {
  std::size_t step;
  double loss;
  double lr;
};

using CheckpointCallback =
    std::function<void(const ModelState&, const AdamWState&, std::size_t step)>;
using EvalCallback = std::function<double(const ModelState&)>;

// Deterministic per-step segment selection; resuming from a step
// counter reproduces the exact data order.
inline std::size_t pick_segment(std::uint64_t seed, std::size_t step, std::size_t draw,
                                std::size_t n_segments) {
  RngState rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(step)) ^
               (0xD1B54A32D192ED03ULL * static_cast<std::uint64_t>(draw)));
  return rng.next_below(n_segments);
}

// Fine-tunes the trainable registry (PSC + LoRA) on chunked corpus
// segments; frozen base weights never change.
inline std::vector<HistoryEntry> fine_tune(ModelState& state, const Corpus& corpus,
                                           const TrainConfig& cfg, AdamWState& opt,
                                           const CheckpointCallback& on_checkpoint = nullptr,
                                           const EvalCallback& eval_ppl = nullptr) {
  cfg.validate();
  if (corpus.documents.empty()) throw DataError("fine_tune: empty corpus");
  const std::vector<TokenSeq> segments = chunk(corpus, cfg.seq_len);
  if (segments.empty()) throw DataError("fine_tune: no segment of length >= seq_len");
  std::vector<ParamRef> params = trainable_params(state);
  if (params.empty()) throw ConfigError("fine_tune: trainable registry is empty");

  std::vector<HistoryEntry> history;
  double last_eval = 0.0;
  bool have_eval = false;
  for (std::size_t step = opt.step + 1; step <= cfg.total_steps; ++step) {
    GradMap accum;
    double loss_sum = 0.0;
    std::size_t n_micro = 0;
    for (std::size_t micro = 0; micro < cfg.grad_accum; ++micro) {
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t idx =
            pick_segment(cfg.seed, step, micro * cfg.batch_size + b, segments.size());
        GradMap g;
        loss_sum += loss_and_grads(state, segments[idx], g);
        ++n_micro;
        for (auto& [name, grad] : g) {
          auto it = accum.find(name);
          if (it == accum.end())
            accum.emplace(name, std::move(grad));
          else
            for (std::size_t i = 0; i < grad.size(); ++i) it->second[i] += grad[i];
        }
      }
    }
    // accumulation averages so lr keeps its meaning across settings
    const double inv = 1.0 / static_cast<double>(n_micro);
    for (auto& [name, grad] : accum)
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= inv;

    adamw_step(opt, params, accum, cfg);
    history.push_back({step, loss_sum * inv, lr_at(cfg, step)});

    if (cfg.checkpoint_interval && on_checkpoint && step % cfg.checkpoint_interval == 0)
      on_checkpoint(state, opt, step);

    if (cfg.early_stop && eval_ppl && step >= cfg.baseline_steps && step % cfg.eval_every == 0) {
      const double ppl = eval_ppl(state);
      if (have_eval && (last_eval - ppl) / last_eval < cfg.improve_threshold) break;
      last_eval = ppl;
      have_eval = true;
    }
  }
  return history;
}

struct DiagnosticConfig {
  std::size_t steps = 400;
  std::size_t batch = 32;
  std::size_t eval_samples = 256;
  std::size_t max_position = 32;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

struct DiagnosticResult {
  double mse_lora_only;
  double mse_lora_psc;
};

namespace detail {

struct DiagSample {
  std::vector<double> x;
  std::vector<double> y;
  std::size_t m;
};

inline std::vector<DiagSample> diag_samples(const PhaseShiftSpec& spec, const Tensor& w,
                                            std::size_t n, std::size_t max_pos, RngState& rng) {
  std::vector<DiagSample> out(n);
  const std::size_t d = spec.dim();
  for (auto& s : out) {
    s.x.resize(d);
    for (auto& v : s.x) v = rng.normal();
    s.m = 1 + rng.next_below(max_pos);
    s.y = rotate_vector(matvec(w, s.x), s.m, spec.theta_star, spec.layout);
  }
  return out;
}

inline double diag_mse(const std::vector<DiagSample>& samples, const PhaseShiftSpec& spec,
                       const Tensor& w, const LoraAdapter& ad, const PscHeadWeights* psc) {
  double total = 0.0;
  const std::size_t d = spec.dim();
  std::vector<double> p(d);
  for (const auto& s : samples) {
    std::vector<double> z = lora_forward(w, ad, s.x);
    if (psc) {
      detail::gate_vector(*psc, z.data(), p.data(), nullptr, nullptr);
      for (std::size_t i = 0; i < d; ++i) z[i] *= 1.0 + p[i];
    }
    std::vector<double> yhat = rotate_vector(std::move(z), s.m, spec.theta_hat, spec.layout);
    for (std::size_t i = 0; i < d; ++i) total += (yhat[i] - s.y[i]) * (yhat[i] - s.y[i]);
  }
  return total / static_cast<double>(samples.size() * d);
}

}  // namespace detail

// Desk-scale instantiation of the rank-inconsistency argument: a
// teacher rotates with the optimal frequencies, students see only the
// predefined ones. One student corrects with LoRA alone, the other
// with LoRA plus a PSC gate; both train under the same seed and
// budget, and the returned MSEs are compared by the caller.
inline DiagnosticResult rank_deficiency_diagnostic(const PhaseShiftSpec& spec, std::size_t rank,
                                                   const DiagnosticConfig& cfg) {
  spec.validate();
  const std::size_t d = spec.dim();
  RngState init_rng(cfg.seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  const Tensor w = init_rng.uniform_tensor({d, d}, -bound, bound);
  std::vector<detail::DiagSample> eval_set =
      detail::diag_samples(spec, w, cfg.eval_samples, cfg.max_position, init_rng);

  TrainConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.warmup_steps = 0;
  opt_cfg.total_steps = cfg.steps;

  auto run_variant = [&](bool with_psc) {
    RngState rng(cfg.seed + 1);
    LoraAdapter ad = init_lora(rng, d, d, rank);
    PscHeadWeights psc = init_psc_head(rng, d);
    std::vector<ParamRef> params = {{"diag.a", &ad.a}, {"diag.b", &ad.b}};
    if (with_psc) {
      params.push_back({"diag.w1", &psc.w1});
      params.push_back({"diag.w2", &psc.w2});
    }
    AdamWState opt;
    RngState data_rng(cfg.seed + 2);
    std::vector<double> p(d), z1(d), u(d), dp(d);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      auto batch = detail::diag_samples(spec, w, cfg.batch, cfg.max_position, data_rng);
      GradMap grads;
      grads.emplace("diag.a", Tensor(ad.a.shape()));
      grads.emplace("diag.b", Tensor(ad.b.shape()));
      if (with_psc) {
        grads.emplace("diag.w1", Tensor(psc.w1.shape()));
        grads.emplace("diag.w2", Tensor(psc.w2.shape()));
      }
      const double scale = 2.0 / static_cast<double>(cfg.batch * d);
      for (const auto& s : batch) {
        std::vector<double> z = lora_forward(w, ad, s.x);
        std::vector<double> c = z;
        if (with_psc) {
          detail::gate_vector(psc, z.data(), p.data(), z1.data(), u.data());
          for (std::size_t i = 0; i < d; ++i) c[i] = (1.0 + p[i]) * z[i];
        }
        std::vector<double> yhat = rotate_vector(c, s.m, spec.theta_hat, spec.layout);
        std::vector<double> dyhat(d);
        for (std::size_t i = 0; i < d; ++i) dyhat[i] = scale * (yhat[i] - s.y[i]);
        std::vector<double> cs(d / 2), sn(d / 2);
        for (std::size_t i = 0; i < d / 2; ++i) {
          cs[i] = std::cos(static_cast<double>(s.m) * spec.theta_hat[i]);
          sn[i] = std::sin(static_cast<double>(s.m) * spec.theta_hat[i]);
        }
        rotate_inplace_inverse(dyhat.data(), d, cs.data(), sn.data(), spec.layout);
        std::vector<double> dz(d, 0.0);
        if (with_psc) {
          for (std::size_t i = 0; i < d; ++i) {
            dz[i] += dyhat[i] * (1.0 + p[i]);
            dp[i] = dyhat[i] * z[i];
          }
          detail::gate_backward_vector(psc, z.data(), p.data(), z1.data(), u.data(), dp.data(),
                                       dz.data(), grads.at("diag.w1"), grads.at("diag.w2"));
        } else {
          dz = dyhat;
        }
        LoraGrads lg = lora_backward(w, ad, s.x, dz);
        Tensor& da = grads.at("diag.a");
        Tensor& db = grads.at("diag.b");
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += lg.da[i];
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += lg.db[i];
      }
      adamw_step(opt, params, grads, opt_cfg);
    }
    return detail::diag_mse(eval_set, spec, w, ad, with_psc ? &psc : nullptr);
  };

  DiagnosticResult res{};
  res.mse_lora_only = run_variant(false);
  res.mse_lora_psc = run_variant(true);
  return res;
}

}  // namespace psclab
