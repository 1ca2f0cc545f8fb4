// psclab: command-line driver for the phase-shift-calibration lab.
// Subcommands: schedule, rank, train, ppl, passkey, diagnostic, dist.
// Exit codes: 0 success, 2 usage/config, 3 data, 4 numeric failure.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "psclab/checkpoint.hpp"
#include "psclab/config.hpp"
#include "psclab/data.hpp"
#include "psclab/eval.hpp"
#include "psclab/model.hpp"
#include "psclab/phase_analysis.hpp"
#include "psclab/train.hpp"

namespace fs = std::filesystem;
using namespace psclab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

std::size_t worker_count() {
  if (const char* env = std::getenv("PSCLAB_THREADS")) {
    const long n = std::atol(env);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? hw : 1;
}

RunConfig load_run_config(const std::string& path, std::uint64_t* seed_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("config parse failure: ") + e.what());
  }
  RunConfig cfg = run_from_json(j);
  if (seed_override) {
    cfg.seed = *seed_override;
    cfg.train.seed = *seed_override;
  }
  return cfg;
}

void write_csv(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  checkpoint::write_file_atomic(path, content);
}

Corpus build_corpus(const RunConfig& cfg) {
  if (cfg.data.synthetic_len > 0)
    return synth_repeat_corpus(cfg.data.synthetic_pattern, cfg.data.synthetic_len, cfg.seed,
                               cfg.data.noise_rate);
  return load_corpus(cfg.data.dir, cfg.data.min_len, cfg.seed);
}

ModelState load_model_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  return checkpoint::load(path).state;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

int cmd_schedule(const RunConfig& cfg) {
  const Tensor theta = frequencies(cfg.model.schedule);
  std::cout << "i,theta\n";
  for (std::size_t i = 0; i < theta.size(); ++i)
    std::cout << i << "," << fmt(theta[i]) << "\n";
  return kExitOk;
}

// Sweeps shifted-pair counts 0..d/2 at a fixed set of positions and
// reports rank(R~ - I).
int cmd_rank(const RunConfig& cfg, const fs::path& out_dir) {
  const std::size_t d = cfg.model.schedule.dim;
  const Tensor theta_hat = frequencies(cfg.model.schedule);
  RngState rng(cfg.seed);
  std::ostringstream csv;
  csv << "num_shifted,m,rank\n";
  for (std::size_t shifted = 0; shifted <= d / 2; ++shifted) {
    Tensor theta_star = theta_hat;
    for (std::size_t i = 0; i < shifted; ++i) theta_star[i] += rng.uniform(0.05, 0.5);
    for (std::size_t m : {std::size_t{1}, std::size_t{7}, std::size_t{1024}}) {
      PhaseShiftSpec spec{theta_star, theta_hat, m, cfg.model.layout};
      csv << shifted << "," << m << "," << shift_rank(spec) << "\n";
    }
  }
  write_csv(out_dir / "rank_sweep.csv", csv.str());
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& resume, const fs::path& out_dir) {
  Corpus corpus = build_corpus(cfg);
  ModelState state = resume.empty() ? init_model(cfg.model, cfg.seed)
                                    : load_model_checkpoint(resume);
  AdamWState opt;
  if (!resume.empty()) {
    auto loaded = checkpoint::load(resume);
    opt = std::move(loaded.opt);
  }
  fs::create_directories(out_dir);
  auto on_checkpoint = [&](const ModelState& st, const AdamWState& o, std::size_t step) {
    ModelState copy = st;
    checkpoint::save(out_dir / ("checkpoint_step" + std::to_string(step) + ".ckpt"), copy, &o,
                     step);
  };
  EvalCallback eval_cb = nullptr;
  if (cfg.train.early_stop) {
    const std::vector<TokenSeq> segs = chunk(corpus, cfg.train.seq_len);
    eval_cb = [&, segs](const ModelState& st) {
      NllTotal total;
      const std::size_t n = std::min<std::size_t>(segs.size(), 4);
      for (std::size_t i = 0; i < n; ++i) {
        const NllTotal t = sliding_window_nll(st, segs[i], cfg.train.seq_len, cfg.train.seq_len);
        total.nll += t.nll;
        total.tokens += t.tokens;
      }
      return std::exp(total.nll / static_cast<double>(total.tokens));
    };
  }
  const auto history = fine_tune(state, corpus, cfg.train, opt, on_checkpoint, eval_cb);

  std::ostringstream csv;
  csv << "step,loss,lr\n";
  for (const auto& h : history) csv << h.step << "," << fmt(h.loss) << "," << fmt(h.lr) << "\n";
  write_csv(out_dir / "history.csv", csv.str());
  checkpoint::save(out_dir / "checkpoint.ckpt", state, &opt, opt.step);
  return kExitOk;
}

int cmd_ppl(const RunConfig& cfg, const std::string& ckpt, const fs::path& out_dir) {
  ModelState state = load_model_checkpoint(ckpt);
  Corpus corpus = build_corpus(cfg);

  // parallelize across documents; reduction stays in document order
  const std::size_t nthreads = std::min(worker_count(), corpus.documents.size());
  PplReport report;
  for (std::size_t w : cfg.eval.windows)
    for (std::size_t len : cfg.eval.eval_lengths) {
      std::vector<NllTotal> per_doc(corpus.documents.size());
      std::atomic<std::size_t> next{0};
      auto work = [&]() {
        for (std::size_t i = next.fetch_add(1); i < corpus.documents.size();
             i = next.fetch_add(1)) {
          const auto& doc = corpus.documents[i];
          if (doc.size() < len) continue;
          TokenSeq trunc(doc.begin(), doc.begin() + len);
          per_doc[i] = sliding_window_nll(state, trunc, w, std::min(cfg.eval.stride, w));
        }
      };
      std::vector<std::thread> pool;
      for (std::size_t t = 1; t < nthreads; ++t) pool.emplace_back(work);
      work();
      for (auto& th : pool) th.join();
      NllTotal total;
      for (const auto& t : per_doc) {
        total.nll += t.nll;
        total.tokens += t.tokens;
      }
      if (total.tokens == 0)
        throw DataError("ppl: no document of length >= " + std::to_string(len));
      report.rows.push_back(
          {w, len, std::exp(total.nll / static_cast<double>(total.tokens)), total.tokens});
    }

  std::ostringstream csv;
  csv << "window,eval_length,ppl,tokens_scored\n";
  for (const auto& r : report.rows)
    csv << r.window << "," << r.eval_length << "," << fmt(r.ppl) << "," << r.tokens_scored
        << "\n";
  write_csv(out_dir / "ppl.csv", csv.str());
  return kExitOk;
}

int cmd_passkey(const RunConfig& cfg, const std::string& ckpt, const fs::path& out_dir) {
  Generator gen;
  ModelState state;
  if (cfg.eval.echo_oracle) {
    gen = echo_oracle_generator();
  } else {
    state = load_model_checkpoint(ckpt);
    gen = model_generator(state);
  }
  const auto results = passkey_eval(gen, cfg.eval.passkey_lengths, cfg.eval.passkey_trials,
                                    cfg.seed);
  std::ostringstream csv;
  csv << "length,trials,accuracy\n";
  for (const auto& r : results)
    csv << r.length << "," << r.trials << "," << fmt(r.accuracy) << "\n";
  write_csv(out_dir / "passkey.csv", csv.str());
  return kExitOk;
}

// All-pairs-shifted teacher task over 10 fixed seeds.
int cmd_diagnostic(const RunConfig& cfg, const fs::path& out_dir) {
  const std::size_t d = 16;
  Tensor theta_hat({d / 2}), theta_star({d / 2});
  for (std::size_t i = 0; i < d / 2; ++i) {
    theta_hat[i] = std::pow(1.0e4, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    theta_star[i] = theta_hat[i] * 1.35 + 0.05;
  }
  PhaseShiftSpec spec{theta_star, theta_hat, 1, cfg.model.layout};
  std::ostringstream csv;
  csv << "seed,mse_lora_only,mse_lora_psc\n";
  for (std::uint64_t s = 0; s < 10; ++s) {
    DiagnosticConfig dc;
    dc.seed = cfg.seed + s;
    const DiagnosticResult r = rank_deficiency_diagnostic(spec, 2, dc);
    csv << dc.seed << "," << fmt(r.mse_lora_only) << "," << fmt(r.mse_lora_psc) << "\n";
  }
  write_csv(out_dir / "diagnostic.csv", csv.str());
  return kExitOk;
}

// Phase/norm distribution of the first-head slice of the embedding
// table.
int cmd_dist(const RunConfig& cfg, const std::string& ckpt, const fs::path& out_dir) {
  ModelState state = load_model_checkpoint(ckpt);
  const std::size_t d_h = state.config.d_h();
  Tensor slice({state.embed.rows(), d_h});
  for (std::size_t t = 0; t < slice.rows(); ++t)
    for (std::size_t j = 0; j < d_h; ++j) slice.at(t, j) = state.embed.at(t, j);
  const PhaseNormStats stats = phase_norm_distribution(slice, state.config.layout);
  std::ostringstream csv;
  csv << "pair_index,phase,norm\n";
  for (std::size_t i = 0; i < stats.phases.size(); ++i)
    csv << i % (d_h / 2) << "," << fmt(stats.phases[i]) << "," << fmt(stats.norms[i]) << "\n";
  write_csv(out_dir / "dist.csv", csv.str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phase shift calibration lab"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out_dir = ".";
  std::uint64_t seed = 0;
  bool seed_given = false;
  app.add_option("--config", config_path, "run config JSON")->required();
  app.add_option("--checkpoint", checkpoint_path, "checkpoint container path");
  app.add_option("--out", out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", seed, "override config seed");

  auto* sub_schedule = app.add_subcommand("schedule", "dump (i, theta) CSV to stdout");
  auto* sub_rank = app.add_subcommand("rank", "rank sweep of the shift correction");
  auto* sub_train = app.add_subcommand("train", "fine-tune PSC/LoRA on the configured corpus");
  auto* sub_ppl = app.add_subcommand("ppl", "sliding-window perplexity report");
  auto* sub_passkey = app.add_subcommand("passkey", "passkey retrieval accuracy");
  auto* sub_diag = app.add_subcommand("diagnostic", "LoRA-vs-PSC rank-deficiency diagnostic");
  auto* sub_dist = app.add_subcommand("dist", "phase/norm distribution CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  seed_given = seed_opt->count() > 0;

  try {
    const RunConfig cfg = load_run_config(config_path, seed_given ? &seed : nullptr);
    const fs::path out(out_dir);
    if (sub_schedule->parsed()) return cmd_schedule(cfg);
    if (sub_rank->parsed()) return cmd_rank(cfg, out);
    if (sub_train->parsed()) return cmd_train(cfg, checkpoint_path, out);
    if (sub_ppl->parsed()) return cmd_ppl(cfg, checkpoint_path, out);
    if (sub_passkey->parsed()) return cmd_passkey(cfg, checkpoint_path, out);
    if (sub_diag->parsed()) return cmd_diagnostic(cfg, out);
    if (sub_dist->parsed()) return cmd_dist(cfg, checkpoint_path, out);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const RangeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const LengthError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  }
}
