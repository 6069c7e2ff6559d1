#pragma once

// Deterministic synthetic corpora for training demos: interleaved
// text/patch sequences with a unique text prefix per sequence so an
// overfit model can be prompted back to any training item.

#include <random>
#include <vector>

#include "mimt/framing.hpp"
#include "mimt/model.hpp"

namespace mimt::synthetic {

struct CorpusConfig {
  int sequences = 32;
  int text_tokens = 5;
  int patches = 5;
  int ratio_text = 5;
  int ratio_audio = 5;
  uint64_t seed = 1234;
};

struct Corpus {
  std::vector<framing::InterleavedSequence> raw;       // without control tokens
  std::vector<std::vector<framing::Element>> prepared; // with BOS/EOS and run delimiters
};

inline Corpus make_corpus(const model::ModelConfig& cfg, const CorpusConfig& cc = {}) {
  std::mt19937_64 rng(cc.seed);
  std::uniform_int_distribution<int> byte(0, cfg.text_bytes - 1);

  Corpus corpus;
  for (int s = 0; s < cc.sequences; ++s) {
    std::vector<int32_t> text;
    // two-byte sequence id so prompts disambiguate sequences
    text.push_back(static_cast<int32_t>(s % cfg.text_bytes));
    text.push_back(static_cast<int32_t>((s * 37 + 11) % cfg.text_bytes));
    while (static_cast<int>(text.size()) < cc.text_tokens) text.push_back(byte(rng));

    std::vector<framing::Patch> patches;
    for (int p = 0; p < cc.patches; ++p) {
      framing::Patch patch(cfg.group_size, cfg.audio_vocab);
      for (int i = 0; i < cfg.group_size; ++i)
        for (int r = 0; r < cfg.rvq_layers; ++r) {
          std::uniform_int_distribution<int> tok(0, cfg.audio_vocab[static_cast<size_t>(r)] - 1);
          patch.at(i, r) = tok(rng);
        }
      patches.push_back(std::move(patch));
    }

    framing::InterleavedSequence seq =
        framing::interleave_schedule(text, patches, cc.ratio_text, cc.ratio_audio);
    corpus.prepared.push_back(model::with_control_tokens(seq, cfg));
    corpus.raw.push_back(std::move(seq));
  }
  return corpus;
}

// Audio tokens of one sequence in reading order, for decode-accuracy checks.
inline std::vector<int32_t> audio_tokens(const std::vector<framing::Element>& elements) {
  std::vector<int32_t> out;
  for (const auto& e : elements) {
    if (e.is_text()) continue;
    for (int32_t t : e.patch.tokens) out.push_back(t);
  }
  return out;
}

}  // namespace mimt::synthetic
