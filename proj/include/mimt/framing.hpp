#pragma once

// Patch grouping of audio token frames, the layer-delay codec that makes
// inter-codebook dependencies left-to-right, the text/audio interleaving
// scheduler, and the bit-exact token file format.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimt/io.hpp"
#include "mimt/mat.hpp"
#include "mimt/rvq.hpp"

namespace mimt::framing {

inline constexpr uint16_t kEmptyWire = 0xFFFF;

struct Patch {
  int group_size = 0;  // G
  int num_layers = 0;  // R'
  std::vector<int32_t> tokens;  // G x R'
  std::vector<int> codebook_sizes;
  int padded_frames = 0;  // trailing EMPTY frames of a partial final patch

  Patch() = default;
  Patch(int g, std::vector<int> sizes)
      : group_size(g),
        num_layers(static_cast<int>(sizes.size())),
        tokens(static_cast<size_t>(g) * sizes.size(), kEmptyToken),
        codebook_sizes(std::move(sizes)) {}

  int32_t& at(int i, int r) { return tokens[static_cast<size_t>(i) * num_layers + r]; }
  int32_t at(int i, int r) const { return tokens[static_cast<size_t>(i) * num_layers + r]; }
};

struct DelayConfig {
  std::vector<int> delays;  // one per RVQ layer

  static DelayConfig standard(int layers = 8) {
    DelayConfig d;
    for (int r = 0; r < layers; ++r) d.delays.push_back(r);
    return d;
  }
  int max_delay() const {
    int m = 0;
    for (int d : delays) m = std::max(m, d);
    return m;
  }
  int num_layers() const { return static_cast<int>(delays.size()); }
};

struct DelayedPatch {
  int group_size = 0;   // G of the source patch
  int num_layers = 0;
  std::vector<int32_t> tokens;  // (G + max delay) x R'

  int rows() const { return num_layers == 0 ? 0 : static_cast<int>(tokens.size()) / num_layers; }
  int32_t& at(int i, int r) { return tokens[static_cast<size_t>(i) * num_layers + r]; }
  int32_t at(int i, int r) const { return tokens[static_cast<size_t>(i) * num_layers + r]; }
};

// ---------------------------------------------------------------------------

inline std::vector<Patch> patchify(const rvq::AudioTokenMatrix& a, int group_size) {
  if (group_size < 1) throw std::invalid_argument("patchify: group size must be >= 1");
  std::vector<Patch> out;
  if (a.frames == 0) return out;
  const int n = (a.frames + group_size - 1) / group_size;
  for (int p = 0; p < n; ++p) {
    Patch patch(group_size, a.codebook_sizes);
    for (int i = 0; i < group_size; ++i) {
      const int src = p * group_size + i;
      if (src >= a.frames) {
        patch.padded_frames++;
        continue;  // stays EMPTY
      }
      for (int r = 0; r < a.num_layers; ++r) patch.at(i, r) = a.at(src, r);
    }
    out.push_back(std::move(patch));
  }
  return out;
}

inline rvq::AudioTokenMatrix unpatchify(const std::vector<Patch>& patches) {
  if (patches.empty()) return rvq::AudioTokenMatrix(0, {});
  const int g = patches.front().group_size;
  const int layers = patches.front().num_layers;
  for (const auto& p : patches) {
    if (p.group_size != g || p.num_layers != layers)
      throw std::invalid_argument("unpatchify: inconsistent patch shapes");
  }

  int total = g * static_cast<int>(patches.size());
  // strip trailing all-EMPTY padding frames
  auto frame_empty = [&](int f) {
    const Patch& p = patches[static_cast<size_t>(f / g)];
    for (int r = 0; r < layers; ++r)
      if (p.at(f % g, r) != kEmptyToken) return false;
    return true;
  };
  while (total > 0 && frame_empty(total - 1)) --total;

  rvq::AudioTokenMatrix a(total, patches.front().codebook_sizes);
  for (int f = 0; f < total; ++f) {
    const Patch& p = patches[static_cast<size_t>(f / g)];
    for (int r = 0; r < layers; ++r) a.at(f, r) = p.at(f % g, r);
  }
  return a;
}

// ---------------------------------------------------------------------------
// Delay codec. Slot (i, r) of the delayed patch carries frame i - d_r of
// the source when that lands inside the patch, and EMPTY otherwise.

inline DelayedPatch delay_apply(const Patch& p, const DelayConfig& d) {
  if (d.num_layers() != p.num_layers)
    throw std::invalid_argument("delay_apply: delay config layer mismatch");
  const int g = p.group_size;
  const int rows = g + d.max_delay();

  DelayedPatch out;
  out.group_size = g;
  out.num_layers = p.num_layers;
  out.tokens.assign(static_cast<size_t>(rows) * p.num_layers, kEmptyToken);
  for (int i = 0; i < rows; ++i) {
    for (int r = 0; r < p.num_layers; ++r) {
      const int src = i - d.delays[static_cast<size_t>(r)];
      if (src >= 0 && src < g) out.at(i, r) = p.at(src, r);
    }
  }
  return out;
}

inline Patch delay_remove(const DelayedPatch& dp, const DelayConfig& d, int group_size,
                          const std::vector<int>& codebook_sizes = {}) {
  if (d.num_layers() != dp.num_layers)
    throw std::invalid_argument("delay_remove: delay config layer mismatch");
  if (dp.rows() != group_size + d.max_delay())
    throw std::invalid_argument("delay_remove: malformed delayed patch length");

  Patch p(group_size, codebook_sizes.empty() ? std::vector<int>(static_cast<size_t>(dp.num_layers), 0)
                                             : codebook_sizes);
  if (codebook_sizes.empty()) p.codebook_sizes.clear();
  p.num_layers = dp.num_layers;

  for (int i = 0; i < dp.rows(); ++i) {
    for (int r = 0; r < dp.num_layers; ++r) {
      const int src = i - d.delays[static_cast<size_t>(r)];
      if (src >= 0 && src < group_size) {
        p.at(src, r) = dp.at(i, r);
      } else if (dp.at(i, r) != kEmptyToken) {
        throw std::invalid_argument("inconsistent delay pattern");
      }
    }
  }
  p.padded_frames = 0;
  for (int i = group_size - 1; i >= 0; --i) {
    bool empty = true;
    for (int r = 0; r < p.num_layers; ++r)
      if (p.at(i, r) != kEmptyToken) empty = false;
    if (!empty) break;
    p.padded_frames++;
  }
  return p;
}

// ---------------------------------------------------------------------------
// Interleaving scheduler.

struct Element {
  enum class Kind { Text, Audio } kind = Kind::Text;
  int32_t text_id = 0;
  Patch patch;

  static Element text(int32_t id) {
    Element e;
    e.kind = Kind::Text;
    e.text_id = id;
    return e;
  }
  static Element audio(Patch p) {
    Element e;
    e.kind = Kind::Audio;
    e.patch = std::move(p);
    return e;
  }
  bool is_text() const { return kind == Kind::Text; }
};

struct InterleavedSequence {
  std::vector<Element> elements;
  size_t size() const { return elements.size(); }
};

// Alternating runs of `ratio_text` text tokens and `ratio_audio` patches,
// text first; once a stream runs out the other is appended verbatim.
inline InterleavedSequence interleave_schedule(const std::vector<int32_t>& text,
                                               const std::vector<Patch>& patches, int ratio_text,
                                               int ratio_audio) {
  if (ratio_text < 1 || ratio_audio < 1)
    throw std::invalid_argument("interleave_schedule: ratio components must be >= 1");
  InterleavedSequence seq;
  size_t ti = 0, pi = 0;
  while (ti < text.size() || pi < patches.size()) {
    for (int k = 0; k < ratio_text && ti < text.size(); ++k)
      seq.elements.push_back(Element::text(text[ti++]));
    for (int k = 0; k < ratio_audio && pi < patches.size(); ++k)
      seq.elements.push_back(Element::audio(patches[pi++]));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Per-position loss weights: text positions carry text_w, audio slots the
// per-layer weight of their codebook, EMPTY slots zero.

struct SlotWeights {
  double text = 0.0;
  Mat audio;  // G x R' for audio elements
};

struct WeightMask {
  std::vector<SlotWeights> per_element;

  double total() const {
    double acc = 0.0;
    for (const auto& s : per_element) {
      acc += s.text;
      for (double v : s.audio.v) acc += v;
    }
    return acc;
  }
};

inline WeightMask loss_weight_mask(const InterleavedSequence& seq, double text_w,
                                   const std::vector<double>& rvq_w) {
  WeightMask mask;
  for (const auto& e : seq.elements) {
    SlotWeights sw;
    if (e.is_text()) {
      sw.text = text_w;
    } else {
      if (rvq_w.size() != static_cast<size_t>(e.patch.num_layers))
        throw std::invalid_argument("loss_weight_mask: length mismatch");
      sw.audio = Mat(e.patch.group_size, e.patch.num_layers);
      for (int i = 0; i < e.patch.group_size; ++i)
        for (int r = 0; r < e.patch.num_layers; ++r)
          sw.audio.at(i, r) = (e.patch.at(i, r) == kEmptyToken) ? 0.0 : rvq_w[static_cast<size_t>(r)];
    }
    mask.per_element.push_back(std::move(sw));
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Token file format, little-endian:
//   "MIMT" | version u8 | frame_rate num u16, den u16 | R' u8 | G u8 |
//   codebook sizes R' x u16 | M u32 | M x R' indices u16 (EMPTY = 0xFFFF)

struct TokenFile {
  uint16_t frame_rate_num = 25;
  uint16_t frame_rate_den = 1;
  uint8_t group_size = 4;
  rvq::AudioTokenMatrix tokens;
};

inline void save_tokens(const std::string& path, const TokenFile& tf) {
  io::ByteWriter b;
  b.str("MIMT");
  b.u8(1);
  b.u16(tf.frame_rate_num);
  b.u16(tf.frame_rate_den);
  b.u8(static_cast<uint8_t>(tf.tokens.num_layers));
  b.u8(tf.group_size);
  for (int s : tf.tokens.codebook_sizes) b.u16(static_cast<uint16_t>(s));
  b.u32(static_cast<uint32_t>(tf.tokens.frames));
  for (int32_t t : tf.tokens.indices)
    b.u16(t == kEmptyToken ? kEmptyWire : static_cast<uint16_t>(t));
  b.save(path);
}

inline TokenFile load_tokens(const std::string& path) {
  io::ByteReader r = io::ByteReader::from_file(path);
  if (r.remaining() < 4 || r.str(4) != "MIMT")
    throw std::runtime_error("bad magic: not a token file");
  const uint8_t version = r.u8();
  if (version != 1) throw std::runtime_error("unsupported token file version");

  TokenFile tf;
  tf.frame_rate_num = r.u16();
  tf.frame_rate_den = r.u16();
  const int layers = r.u8();
  tf.group_size = r.u8();
  std::vector<int> sizes(static_cast<size_t>(layers));
  for (auto& s : sizes) s = r.u16();
  const uint32_t frames = r.u32();

  tf.tokens = rvq::AudioTokenMatrix(static_cast<int>(frames), sizes);
  for (uint32_t i = 0; i < frames; ++i) {
    for (int l = 0; l < layers; ++l) {
      const uint16_t v = r.u16();
      if (v == kEmptyWire) {
        tf.tokens.at(static_cast<int>(i), l) = kEmptyToken;
      } else if (v >= sizes[static_cast<size_t>(l)]) {
        throw std::runtime_error("index out of range in token file");
      } else {
        tf.tokens.at(static_cast<int>(i), l) = v;
      }
    }
  }
  return tf;
}

}  // namespace mimt::framing
