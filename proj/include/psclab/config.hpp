#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "psclab/eval.hpp"
#include "psclab/model.hpp"
#include "psclab/rope.hpp"
#include "psclab/train.hpp"

namespace psclab {

using Json = nlohmann::json;

namespace detail {

inline void reject_unknown(const Json& obj, const std::set<std::string>& known,
                           const std::string& section) {
  for (const auto& [key, value] : obj.items())
    if (!known.count(key)) throw ConfigError("config: unknown key '" + key + "' in " + section);
}

}  // namespace detail

inline Json schedule_to_json(const FrequencySchedule& s) {
  Json j;
  switch (s.kind) {
    case FrequencySchedule::Kind::Base:
      j["kind"] = "base";
      break;
    case FrequencySchedule::Kind::PI:
      j["kind"] = "pi";
      j["pretrained_context"] = s.pretrained_context;
      j["extended_context"] = s.extended_context;
      break;
    case FrequencySchedule::Kind::NTKAware:
      j["kind"] = "ntk";
      j["scale"] = s.scale;
      break;
    case FrequencySchedule::Kind::YaRN:
      j["kind"] = "yarn";
      j["scale"] = s.scale;
      j["blend"] = s.blend;
      j["ramp"] = s.yarn_ramp;
      break;
    case FrequencySchedule::Kind::Custom:
      j["kind"] = "custom";
      j["factors"] = s.factors;
      break;
  }
  j["base"] = s.base;
  j["dim"] = s.dim;
  return j;
}

inline FrequencySchedule schedule_from_json(const Json& j) {
  detail::reject_unknown(
      j, {"kind", "base", "dim", "pretrained_context", "extended_context", "scale", "blend",
          "ramp", "factors"},
      "schedule");
  FrequencySchedule s;
  const std::string kind = j.at("kind").get<std::string>();
  s.base = j.value("base", 1.0e4);
  s.dim = j.at("dim").get<std::size_t>();
  if (kind == "base") {
    s.kind = FrequencySchedule::Kind::Base;
  } else if (kind == "pi") {
    s.kind = FrequencySchedule::Kind::PI;
    s.pretrained_context = j.at("pretrained_context").get<std::size_t>();
    s.extended_context = j.at("extended_context").get<std::size_t>();
  } else if (kind == "ntk") {
    s.kind = FrequencySchedule::Kind::NTKAware;
    s.scale = j.at("scale").get<double>();
  } else if (kind == "yarn") {
    s.kind = FrequencySchedule::Kind::YaRN;
    s.scale = j.at("scale").get<double>();
    s.blend = j.at("blend").get<double>();
    s.yarn_ramp = j.value("ramp", false);
  } else if (kind == "custom") {
    s.kind = FrequencySchedule::Kind::Custom;
    s.factors = j.at("factors").get<std::vector<double>>();
  } else {
    throw ConfigError("config: unknown schedule kind '" + kind + "'");
  }
  s.validate();
  return s;
}

inline Json model_to_json(const ModelConfig& c) {
  Json j;
  j["layers"] = c.layers;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_kv_heads"] = c.n_kv_heads;
  j["vocab_size"] = c.vocab_size;
  j["max_context"] = c.max_context;
  j["layout"] = c.layout == PairLayout::HalfBlocks ? "half_blocks" : "pair_interleaved";
  j["schedule"] = schedule_to_json(c.schedule);
  if (c.psc) {
    j["psc"] = Json{{"enabled", true},
                    {"placement", *c.psc == PscPlacement::Pre ? "pre" : "post"}};
  }
  if (c.lora) {
    std::vector<std::string> targets;
    if (c.lora->on_q) targets.push_back("q");
    if (c.lora->on_k) targets.push_back("k");
    if (c.lora->on_v) targets.push_back("v");
    if (c.lora->on_o) targets.push_back("o");
    j["lora"] = Json{{"enabled", true},
                     {"rank", c.lora->rank},
                     {"targets", targets},
                     {"scale", c.lora->scale}};
  }
  return j;
}

inline ModelConfig model_from_json(const Json& j) {
  detail::reject_unknown(j,
                         {"layers", "d_model", "n_heads", "n_kv_heads", "vocab_size",
                          "max_context", "layout", "schedule", "psc", "lora"},
                         "model");
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
  c.vocab_size = j.value("vocab_size", ByteTokenizer::kVocabSize);
  c.max_context = j.at("max_context").get<std::size_t>();
  const std::string layout = j.value("layout", std::string("half_blocks"));
  if (layout == "half_blocks")
    c.layout = PairLayout::HalfBlocks;
  else if (layout == "pair_interleaved")
    c.layout = PairLayout::PairInterleaved;
  else
    throw ConfigError("config: unknown layout '" + layout + "'");
  c.schedule = schedule_from_json(j.at("schedule"));
  if (j.contains("psc")) {
    const Json& p = j.at("psc");
    detail::reject_unknown(p, {"enabled", "placement"}, "model.psc");
    if (p.value("enabled", true)) {
      const std::string place = p.value("placement", std::string("pre"));
      if (place == "pre")
        c.psc = PscPlacement::Pre;
      else if (place == "post")
        c.psc = PscPlacement::Post;
      else
        throw ConfigError("config: unknown psc placement '" + place + "'");
    }
  }
  if (j.contains("lora")) {
    const Json& p = j.at("lora");
    detail::reject_unknown(p, {"enabled", "rank", "targets", "scale"}, "model.lora");
    if (p.value("enabled", true)) {
      LoraConfig lc;
      lc.rank = p.at("rank").get<std::size_t>();
      lc.scale = p.value("scale", 1.0);
      if (p.contains("targets")) {
        lc.on_q = lc.on_k = lc.on_v = lc.on_o = false;
        for (const auto& t : p.at("targets")) {
          const std::string s = t.get<std::string>();
          if (s == "q")
            lc.on_q = true;
          else if (s == "k")
            lc.on_k = true;
          else if (s == "v")
            lc.on_v = true;
          else if (s == "o")
            lc.on_o = true;
          else
            throw ConfigError("config: unknown lora target '" + s + "'");
        }
      }
      c.lora = lc;
    }
  }
  c.validate();
  return c;
}

inline Json train_to_json(const TrainConfig& c) {
  return Json{{"lr", c.lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"weight_decay", c.weight_decay},
              {"eps", c.eps},
              {"warmup_steps", c.warmup_steps},
              {"total_steps", c.total_steps},
              {"batch_size", c.batch_size},
              {"grad_accum", c.grad_accum},
              {"seq_len", c.seq_len},
              {"seed", c.seed},
              {"checkpoint_interval", c.checkpoint_interval},
              {"early_stop", c.early_stop},
              {"eval_every", c.eval_every},
              {"baseline_steps", c.baseline_steps},
              {"improve_threshold", c.improve_threshold}};
}

inline TrainConfig train_from_json(const Json& j) {
  detail::reject_unknown(j,
                         {"lr", "beta1", "beta2", "weight_decay", "eps", "warmup_steps",
                          "total_steps", "batch_size", "grad_accum", "seq_len", "seed",
                          "checkpoint_interval", "early_stop", "eval_every", "baseline_steps",
                          "improve_threshold"},
                         "train");
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.eps = j.value("eps", c.eps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.total_steps = j.value("total_steps", c.total_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
  c.early_stop = j.value("early_stop", c.early_stop);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.baseline_steps = j.value("baseline_steps", c.baseline_steps);
  c.improve_threshold = j.value("improve_threshold", c.improve_threshold);
  c.validate();
  return c;
}

struct EvalConfig {
  std::vector<std::size_t> windows = {64};
  std::vector<std::size_t> eval_lengths = {128};
  std::size_t stride = 32;
  std::vector<std::size_t> passkey_lengths = {512};
  std::size_t passkey_trials = 10;
  bool echo_oracle = false;
};

inline Json eval_to_json(const EvalConfig& c) {
  return Json{{"windows", c.windows},
              {"eval_lengths", c.eval_lengths},
              {"stride", c.stride},
              {"passkey_lengths", c.passkey_lengths},
              {"passkey_trials", c.passkey_trials},
              {"echo_oracle", c.echo_oracle}};
}

inline EvalConfig eval_from_json(const Json& j) {
  detail::reject_unknown(j,
                         {"windows", "eval_lengths", "stride", "passkey_lengths",
                          "passkey_trials", "echo_oracle"},
                         "eval");
  EvalConfig c;
  if (j.contains("windows")) c.windows = j.at("windows").get<std::vector<std::size_t>>();
  if (j.contains("eval_lengths"))
    c.eval_lengths = j.at("eval_lengths").get<std::vector<std::size_t>>();
  c.stride = j.value("stride", c.stride);
  if (j.contains("passkey_lengths"))
    c.passkey_lengths = j.at("passkey_lengths").get<std::vector<std::size_t>>();
  c.passkey_trials = j.value("passkey_trials", c.passkey_trials);
  c.echo_oracle = j.value("echo_oracle", c.echo_oracle);
  return c;
}

struct DataConfig {
  std::string dir;
  std::size_t min_len = 2;
  std::string synthetic_pattern;
  std::size_t synthetic_len = 0;
  double noise_rate = 0.0;
};

inline Json data_to_json(const DataConfig& c) {
  return Json{{"dir", c.dir},
              {"min_len", c.min_len},
              {"synthetic_pattern", c.synthetic_pattern},
              {"synthetic_len", c.synthetic_len},
              {"noise_rate", c.noise_rate}};
}

inline DataConfig data_from_json(const Json& j) {
  detail::reject_unknown(
      j, {"dir", "min_len", "synthetic_pattern", "synthetic_len", "noise_rate"}, "data");
  DataConfig c;
  c.dir = j.value("dir", std::string());
  c.min_len = j.value("min_len", c.min_len);
  c.synthetic_pattern = j.value("synthetic_pattern", std::string());
  c.synthetic_len = j.value("synthetic_len", c.synthetic_len);
  c.noise_rate = j.value("noise_rate", c.noise_rate);
  return c;
}

// Whole-run configuration; round-trips losslessly through JSON.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  DataConfig data;
};

inline Json run_to_json(const RunConfig& c) {
  return Json{{"seed", c.seed},
              {"model", model_to_json(c.model)},
              {"train", train_to_json(c.train)},
              {"eval", eval_to_json(c.eval)},
              {"data", data_to_json(c.data)}};
}

inline RunConfig run_from_json(const Json& j) {
  detail::reject_unknown(j, {"seed", "model", "train", "eval", "data"}, "top level");
  RunConfig c;
  c.seed = j.value("seed", std::uint64_t{0});
  c.model = model_from_json(j.at("model"));
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
  if (j.contains("data")) c.data = data_from_json(j.at("data"));
  return c;
}

}  // namespace psclab
