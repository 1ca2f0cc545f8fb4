#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "psclab/tensor.hpp"

namespace psclab {

using TokenSeq = std::vector<std::uint32_t>;

// Byte-level tokenizer: ids 0..255 are the raw bytes, then pad and
// bos. decode(encode(s)) == s for arbitrary byte strings.
struct ByteTokenizer {
  static constexpr std::uint32_t kPad = 256;
  static constexpr std::uint32_t kBos = 257;
  static constexpr std::size_t kVocabSize = 258;

  static TokenSeq encode(const std::string& bytes) {
    TokenSeq out;
    out.reserve(bytes.size());
    for (unsigned char c : bytes) out.push_back(c);
    return out;
  }

  static std::string decode(const TokenSeq& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (std::uint32_t t : tokens)
      if (t < 256) out.push_back(static_cast<char>(t));
    return out;
  }
};

struct Corpus {
  std::vector<TokenSeq> documents;
  std::vector<std::string> provenance;
  std::size_t min_length = 0;
};

// Reads every regular file under `dir` (recursively, as raw bytes),
// keeps documents of at least min_len tokens, and shuffles the order
// deterministically from the seed.
inline Corpus load_corpus(const std::filesystem::path& dir, std::size_t min_len,
                          std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("load_corpus: not a directory: " + dir.string());

  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir))
    if (entry.is_regular_file()) files.push_back(entry.path());
  std::sort(files.begin(), files.end());  // directory iteration order is unspecified

  Corpus corpus;
  corpus.min_length = min_len;
  for (const auto& path : files) {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    TokenSeq tokens = ByteTokenizer::encode(bytes);
    if (tokens.size() >= min_len) {
      corpus.documents.push_back(std::move(tokens));
      corpus.provenance.push_back(path.string());
    }
  }
  if (corpus.documents.empty())
    throw DataError("load_corpus: no document of length >= " + std::to_string(min_len) + " in " +
                    dir.string());

  // Fisher-Yates with the pinned RNG.
  RngState rng(seed);
  for (std::size_t i = corpus.documents.size(); i > 1; --i) {
    const std::size_t j = rng.next_below(i);
    std::swap(corpus.documents[i - 1], corpus.documents[j]);
    std::swap(corpus.provenance[i - 1], corpus.provenance[j]);
  }
  return corpus;
}

// Non-overlapping segments of exactly chunk_len tokens; short tails
// are dropped, never padded.
inline std::vector<TokenSeq> chunk(const Corpus& corpus, std::size_t chunk_len) {
  if (chunk_len < 2) throw RangeError("chunk: chunk_len must be >= 2");
  std::vector<TokenSeq> segments;
  for (const auto& doc : corpus.documents)
    for (std::size_t off = 0; off + chunk_len <= doc.size(); off += chunk_len)
      segments.emplace_back(doc.begin() + off, doc.begin() + off + chunk_len);
  return segments;
}

// Repeats `pattern` to total_len tokens, replacing each position with
// a random byte at `noise_rate`. Deterministic from the seed.
inline Corpus synth_repeat_corpus(const std::string& pattern, std::size_t total_len,
                                  std::uint64_t seed, double noise_rate = 0.0) {
  if (pattern.empty()) throw DataError("synth_repeat_corpus: empty pattern");
  RngState rng(seed);
  TokenSeq doc;
  doc.reserve(total_len);
  for (std::size_t i = 0; i < total_len; ++i) {
    std::uint32_t tok = static_cast<unsigned char>(pattern[i % pattern.size()]);
    if (noise_rate > 0.0 && rng.next_double() < noise_rate)
      tok = static_cast<std::uint32_t>(rng.next_below(256));
    doc.push_back(tok);
  }
  Corpus corpus;
  corpus.documents.push_back(std::move(doc));
  corpus.provenance.push_back("<synthetic>");
  return corpus;
}

}  // namespace psclab
