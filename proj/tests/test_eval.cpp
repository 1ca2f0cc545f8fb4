#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <string>

#include "psclab/eval.hpp"

using namespace psclab;

namespace {

ModelConfig small_config(std::size_t vocab = 11, std::size_t ctx = 64) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 2;
  cfg.vocab_size = vocab;
  cfg.max_context = ctx;
  cfg.schedule = FrequencySchedule::make_base(1.0e4, cfg.d_h());
  return cfg;
}

ModelState uniform_model(std::size_t vocab) {
  ModelState st = init_model(small_config(vocab), 1);
  for (auto& p : all_params(st))
    if (p.name.find("norm") == std::string::npos)
      for (auto& v : p.tensor->data()) v = 0.0;
  return st;
}

TokenSeq random_tokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  RngState rng(seed);
  TokenSeq t(n);
  for (auto& v : t) v = static_cast<std::uint32_t>(rng.next_below(vocab));
  return t;
}

// Token-by-token oracle: target t is scored by the first window
// boundary past it, with that window's left context.
NllTotal brute_force_nll(const ModelState& st, const TokenSeq& tokens, std::size_t window,
                         std::size_t stride) {
  NllTotal total;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    std::size_t e = window;
    while (e < t + 1) e += stride;
    const std::size_t end = std::min(e, tokens.size());
    const std::size_t lo = end > window ? end - window : 0;
    if (lo >= t) continue;  // no left context: the target is a window start and is unscored
    const TokenSeq prefix(tokens.begin() + lo, tokens.begin() + t + 1);
    const Tensor logits = forward(st, prefix);
    const std::vector<double> nll = nll_per_target(logits, prefix);
    total.nll += nll.back();
    total.tokens += 1;
  }
  return total;
}

}  // namespace

TEST_CASE("uniform model perplexity equals vocab size") {
  ModelState st = uniform_model(11);
  TokenSeq doc = random_tokens(200, 11, 5);
  const double ppl = sliding_window_ppl(st, doc, 32, 16);
  REQUIRE_THAT(ppl, Catch::Matchers::WithinRel(11.0, 1e-9));
}

TEST_CASE("strided evaluation matches the token-by-token oracle") {
  ModelState st = init_model(small_config(), 17);
  TokenSeq doc = random_tokens(600, 11, 23);
  const std::vector<std::pair<std::size_t, std::size_t>> cases = {
      {32, 16}, {32, 32}, {64, 16}, {48, 7}};
  for (auto [window, stride] : cases) {
    NllTotal fast = sliding_window_nll(st, doc, window, stride);
    NllTotal slow = brute_force_nll(st, doc, window, stride);
    REQUIRE(fast.tokens == slow.tokens);
    if (stride < window) REQUIRE(fast.tokens == doc.size() - 1);
    REQUIRE_THAT(fast.nll, Catch::Matchers::WithinRel(slow.nll, 1e-10));
  }
}

TEST_CASE("short documents and full-window stride") {
  ModelState st = init_model(small_config(), 3);
  TokenSeq doc = random_tokens(10, 11, 9);  // shorter than the window
  NllTotal t = sliding_window_nll(st, doc, 32, 16);
  REQUIRE(t.tokens == 9);
  // equals a single full forward
  Tensor logits = forward(st, doc);
  std::vector<double> nll = nll_per_target(logits, doc);
  double direct = 0.0;
  for (double v : nll) direct += v;
  REQUIRE_THAT(t.nll, Catch::Matchers::WithinAbs(direct, 1e-12));
}

TEST_CASE("sliding window argument validation") {
  ModelState st = init_model(small_config(), 3);
  TokenSeq doc = random_tokens(50, 11, 1);
  REQUIRE_THROWS_AS(sliding_window_nll(st, doc, 128, 16), ContextError);
  REQUIRE_THROWS_AS(sliding_window_nll(st, doc, 32, 0), RangeError);
  REQUIRE_THROWS_AS(sliding_window_nll(st, doc, 16, 32), RangeError);
  REQUIRE_THROWS_AS(sliding_window_nll(st, TokenSeq{1}, 16, 8), DataError);
}

TEST_CASE("ppl_sweep aggregates per (window, length) cell") {
  ModelState st = uniform_model(11);
  std::vector<TokenSeq> docs = {random_tokens(100, 11, 1), random_tokens(60, 11, 2)};
  // stride 8 < both windows, so every target token is scored
  PplReport rep = ppl_sweep(st, docs, {16, 32}, {50, 100}, 8);
  REQUIRE(rep.rows.size() == 4);
  // length 50: both docs qualify, 49 targets each
  REQUIRE(rep.rows[0].window == 16);
  REQUIRE(rep.rows[0].eval_length == 50);
  REQUIRE(rep.rows[0].tokens_scored == 98);
  // length 100: only the first doc
  REQUIRE(rep.rows[1].tokens_scored == 99);
  for (const auto& row : rep.rows)
    REQUIRE_THAT(row.ppl, Catch::Matchers::WithinRel(11.0, 1e-9));
  REQUIRE_THROWS_AS(ppl_sweep(st, docs, {16}, {500}, 16), DataError);
}

TEST_CASE("passkey prompt is byte-exact against the template") {
  PasskeyTask task;
  task.key = 12345;
  task.repeats_before = 1;
  task.repeats_after = 2;
  const std::string preamble =
      "There is an important info hidden inside a lot of irrelevant text. Find it and memorize "
      "them. I will quiz you about the important information there.\n";
  const std::string filler =
      "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back "
      "again.\n";
  const std::string expected = preamble + filler +
                               "The pass key is 12345. Remember it. 12345 is the pass key.\n" +
                               filler + filler + "What is the pass key? The pass key is";
  REQUIRE(make_passkey_prompt(task) == expected);

  task.key = 0;
  REQUIRE_THROWS_AS(make_passkey_prompt(task), RangeError);
  task.key = 50001;
  REQUIRE_THROWS_AS(make_passkey_prompt(task), RangeError);
}

TEST_CASE("echo oracle scores perfectly; prompts are reproducible") {
  auto results = passkey_eval(echo_oracle_generator(), {400, 700}, 10, 77);
  REQUIRE(results.size() == 2);
  for (const auto& r : results) {
    REQUIRE(r.trials == 10);
    REQUIRE(r.accuracy == 1.0);
  }
  // seed determinism: capture the prompts twice
  std::vector<std::string> p1, p2;
  auto capture1 = [&p1](const std::string& p, std::size_t) {
    p1.push_back(p);
    return std::string();
  };
  auto capture2 = [&p2](const std::string& p, std::size_t) {
    p2.push_back(p);
    return std::string();
  };
  passkey_eval(capture1, {500}, 5, 13);
  passkey_eval(capture2, {500}, 5, 13);
  REQUIRE(p1 == p2);
  for (const auto& p : p1) {
    REQUIRE(p.size() <= 500);
    REQUIRE(p.size() > 400);  // within one filler line of the target
  }
  REQUIRE_THROWS_AS(passkey_eval(echo_oracle_generator(), {10}, 2, 1), LengthError);
  REQUIRE_THROWS_AS(passkey_eval(echo_oracle_generator(), {400}, 0, 1), RangeError);
}

TEST_CASE("model generator stops at the first non-digit prediction") {
  // zero weights: argmax logit is token 0, a non-digit byte
  ModelState st = uniform_model(258);
  st.config.max_context = 64;
  st.rebuild_rotary();
  auto gen = model_generator(st);
  REQUIRE(gen("The pass key is", 8).empty());
  REQUIRE_THROWS_AS(gen(std::string(100, 'a'), 8), ContextError);
}
