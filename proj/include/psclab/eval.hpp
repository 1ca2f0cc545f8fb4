#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "psclab/data.hpp"
#include "psclab/model.hpp"
#include "psclab/tensor.hpp"

namespace psclab {

struct LengthError : Error {
  using Error::Error;
};

struct NllTotal {
  double nll = 0.0;
  std::size_t tokens = 0;
};

// Strided evaluation: windows end at W, W+S, W+2S, ... (last clamped
// to the document length), each spanning [e - W, e). Every token is
// scored exactly once, by the first window that contains it, which
// gives it maximal left context.
inline NllTotal sliding_window_nll(const ModelState& state, const TokenSeq& tokens,
                                   std::size_t window, std::size_t stride) {
  if (window > state.config.max_context)
    throw ContextError("sliding_window_ppl: window exceeds max_context");
  if (stride == 0 || stride > window)
    throw RangeError("sliding_window_ppl: need 1 <= stride <= window");
  if (tokens.size() < 2) throw DataError("sliding_window_ppl: need at least 2 tokens");

  NllTotal total;
  std::size_t scored = 1;  // first unscored target position
  for (std::size_t e = window; scored < tokens.size(); e += stride) {
    const std::size_t end = std::min(e, tokens.size());
    const std::size_t lo = end > window ? end - window : 0;
    const TokenSeq win(tokens.begin() + lo, tokens.begin() + end);
    const Tensor logits = forward(state, win);
    const std::vector<double> nll = nll_per_target(logits, win);
    for (std::size_t g = std::max(scored, lo + 1); g < end; ++g) {
      total.nll += nll[g - lo - 1];
      total.tokens += 1;
    }
    scored = end;
  }
  return total;
}

inline double sliding_window_ppl(const ModelState& state, const TokenSeq& tokens,
                                 std::size_t window, std::size_t stride) {
  const NllTotal t = sliding_window_nll(state, tokens, window, stride);
  return std::exp(t.nll / static_cast<double>(t.tokens));
}

struct PplRow {
  std::size_t window;
  std::size_t eval_length;
  double ppl;
  std::size_t tokens_scored;
};

struct PplReport {
  std::vector<PplRow> rows;
  std::string schedule;
  bool psc_enabled = false;
  std::size_t lora_rank = 0;
};

// One row per (window, eval_length) pair; documents are truncated to
// eval_length before scoring, per-row PPL aggregates NLL across all
// qualifying documents.
inline PplReport ppl_sweep(const ModelState& state, const std::vector<TokenSeq>& documents,
                           const std::vector<std::size_t>& windows,
                           const std::vector<std::size_t>& eval_lengths, std::size_t stride) {
  PplReport report;
  for (std::size_t w : windows)
    for (std::size_t len : eval_lengths) {
      NllTotal total;
      for (const auto& doc : documents) {
        if (doc.size() < len) continue;
        const TokenSeq trunc(doc.begin(), doc.begin() + len);
        const NllTotal t = sliding_window_nll(state, trunc, w, std::min(stride, w));
        total.nll += t.nll;
        total.tokens += t.tokens;
      }
      if (total.tokens == 0)
        throw DataError("ppl_sweep: no document of length >= " + std::to_string(len));
      report.rows.push_back(
          {w, len, std::exp(total.nll / static_cast<double>(total.tokens)), total.tokens});
    }
  return report;
}

// Passkey template, assembled byte-exactly. M and N control the
// filler padding before and after the key sentence.
struct PasskeyTask {
  std::size_t repeats_before = 0;  // M
  std::size_t repeats_after = 0;   // N
  std::uint32_t key = 1;

  static constexpr const char* kPreamble =
      "There is an important info hidden inside a lot of irrelevant text. Find it and memorize "
      "them. I will quiz you about the important information there.\n";
  static constexpr const char* kFiller =
      "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back "
      "again.\n";
  static constexpr const char* kSuffix = "What is the pass key? The pass key is";
};

inline std::string make_passkey_prompt(const PasskeyTask& task) {
  if (task.key < 1 || task.key > 50000)
    throw RangeError("passkey: key must be in [1, 50000]");
  const std::string key = std::to_string(task.key);
  std::string prompt = PasskeyTask::kPreamble;
  for (std::size_t i = 0; i < task.repeats_before; ++i) prompt += PasskeyTask::kFiller;
  prompt += "The pass key is " + key + ". Remember it. " + key + " is the pass key.\n";
  for (std::size_t i = 0; i < task.repeats_after; ++i) prompt += PasskeyTask::kFiller;
  prompt += PasskeyTask::kSuffix;
  return prompt;
}

// A generator maps a prompt to at most max_chars of continuation.
using Generator = std::function<std::string(const std::string& prompt, std::size_t max_chars)>;

// Greedy byte-level decoding; stops at the first non-digit. Keys have
// at most 5 digits so 8 generated characters always suffice.
inline Generator model_generator(const ModelState& state) {
  return [&state](const std::string& prompt, std::size_t max_chars) {
    TokenSeq tokens = ByteTokenizer::encode(prompt);
    if (tokens.size() >= state.config.max_context)
      throw ContextError("passkey: prompt does not fit in max_context");
    std::string out;
    for (std::size_t i = 0; i < max_chars && tokens.size() < state.config.max_context; ++i) {
      const Tensor logits = forward(state, tokens);
      const std::size_t last = tokens.size() - 1;
      std::size_t best = 0;
      for (std::size_t v = 1; v < state.config.vocab_size; ++v)
        if (logits.at(last, v) > logits.at(last, best)) best = v;
      if (best > 255 || !std::isdigit(static_cast<unsigned char>(best))) break;
      out.push_back(static_cast<char>(best));
      tokens.push_back(static_cast<std::uint32_t>(best));
    }
    return out;
  };
}

// Reads the key straight out of the prompt; the harness oracle.
inline Generator echo_oracle_generator() {
  return [](const std::string& prompt, std::size_t max_chars) {
    const std::string marker = "The pass key is ";
    const std::size_t pos = prompt.find(marker);
    std::string out;
    if (pos == std::string::npos) return out;
    for (std::size_t i = pos + marker.size();
         i < prompt.size() && out.size() < max_chars &&
         std::isdigit(static_cast<unsigned char>(prompt[i]));
         ++i)
      out.push_back(prompt[i]);
    return out;
  };
}

struct PasskeyResult {
  std::size_t length;
  std::size_t trials;
  double accuracy;
};

// Builds `trials` prompts per target byte length with the key sentence
// start uniform over token index, runs the generator, exact-matches
// the key digits.
inline std::vector<PasskeyResult> passkey_eval(const Generator& generate,
                                               const std::vector<std::size_t>& lengths,
                                               std::size_t trials, std::uint64_t seed) {
  if (trials < 1) throw RangeError("passkey_eval: trials must be >= 1");
  const std::size_t filler_len = std::string(PasskeyTask::kFiller).size();
  std::vector<PasskeyResult> results;
  RngState rng(seed);
  for (std::size_t target : lengths) {
    std::size_t hits = 0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      PasskeyTask task;
      task.key = 1 + static_cast<std::uint32_t>(rng.next_below(50000));
      const std::size_t base = make_passkey_prompt(task).size();  // M = N = 0 skeleton
      if (target < base) throw LengthError("passkey_eval: target shorter than minimal prompt");
      const std::size_t fillers = (target - base) / filler_len;
      const std::size_t span = fillers * filler_len;
      const std::size_t offset = span ? rng.next_below(span + 1) : 0;
      task.repeats_before = std::min(offset / filler_len, fillers);
      task.repeats_after = fillers - task.repeats_before;
      const std::string prompt = make_passkey_prompt(task);
      if (generate(prompt, 8) == std::to_string(task.key)) ++hits;
    }
    results.push_back({target, trials, static_cast<double>(hits) / static_cast<double>(trials)});
  }
  return results;
}

}  // namespace psclab
