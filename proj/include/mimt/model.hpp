#pragma once

// Hierarchical LM over interleaved text/audio sequences: patch encoder ->
// causal backbone -> patch decoder with one output head per RVQ codebook.
// The decoder consumes delay-transformed patches and generation keeps the
// delay pattern intact slot by slot.

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimt/framing.hpp"
#include "mimt/nn.hpp"

namespace mimt::model {

using framing::DelayConfig;
using framing::Element;
using framing::InterleavedSequence;
using framing::Patch;

struct ModelConfig {
  int rvq_layers = 8;
  int group_size = 4;
  std::vector<int> audio_vocab = {1024, 1024, 128, 128, 128, 128, 128, 128};
  DelayConfig delays = DelayConfig::standard(8);

  int text_bytes = 256;

  int enc_layers = 2, enc_dim = 64, enc_heads = 4, enc_ffn = 256;
  int backbone_layers = 4, backbone_dim = 128, backbone_heads = 4, backbone_ffn = 512;
  int dec_layers = 2, dec_dim = 64, dec_heads = 4, dec_ffn = 256;
  int context = 64;  // backbone positions (elements)
  double rope_base = 10000.0;

  // reserved control tokens appended after the byte range
  int text_vocab() const { return text_bytes + 5; }
  int bos() const { return text_bytes; }
  int eos() const { return text_bytes + 1; }
  int audio_begin() const { return text_bytes + 2; }
  int audio_end() const { return text_bytes + 3; }
  int patch_marker() const { return text_bytes + 4; }

  int delayed_len() const { return group_size + delays.max_delay(); }

  void validate() const {
    if (static_cast<int>(audio_vocab.size()) != rvq_layers ||
        delays.num_layers() != rvq_layers)
      throw std::invalid_argument("config: audio vocab / delay sizes must match rvq_layers");
    if (enc_dim != dec_dim)
      throw std::invalid_argument("config: shared embedding tables require enc_dim == dec_dim");
    if (enc_dim % enc_heads || backbone_dim % backbone_heads || dec_dim % dec_heads)
      throw std::invalid_argument("config: heads must divide dims");
    if ((enc_dim / enc_heads) % 2 || (backbone_dim / backbone_heads) % 2 ||
        (dec_dim / dec_heads) % 2)
      throw std::invalid_argument("config: head dim must be even for rotary embedding");
  }

  // Shrunk configuration for finite-difference checks (< 50k parameters).
  static ModelConfig gradcheck() {
    ModelConfig c;
    c.audio_vocab = {17, 17, 9, 9, 9, 9, 9, 9};
    c.text_bytes = 16;
    c.enc_layers = 1;
    c.enc_dim = 8;
    c.enc_heads = 2;
    c.enc_ffn = 16;
    c.backbone_layers = 2;
    c.backbone_dim = 12;
    c.backbone_heads = 2;
    c.backbone_ffn = 24;
    c.dec_layers = 1;
    c.dec_dim = 8;
    c.dec_heads = 2;
    c.dec_ffn = 16;
    c.context = 16;
    return c;
  }
};

// Per-position loss weighting presets.
struct StageWeights {
  double text_w = 100.0;
  std::vector<double> rvq_w = {12, 8, 6, 4, 2, 2, 1, 1};

  bool audio_active() const {
    for (double w : rvq_w)
      if (w != 0.0) return true;
    return false;
  }
  static StageWeights understanding(int layers = 8) {
    StageWeights s;
    s.text_w = 1.0;
    s.rvq_w.assign(static_cast<size_t>(layers), 0.0);
    return s;
  }
  static StageWeights joint() { return StageWeights{}; }
};

struct GenerationSettings {
  double temperature = 1.0;
  int top_k = 1;
  int max_elements = 64;
  uint64_t seed = 0;
};

// ---------------------------------------------------------------------------

namespace detail {

struct BlockParams {
  nn::Value wq, wk, wv, wo, ffn_w1, ffn_b1, ffn_w2, ffn_b2, norm1, norm2;
};

inline BlockParams make_block(nn::ParamTree& p, const std::string& prefix, int dim, int ffn) {
  BlockParams b;
  b.wq = p.add(prefix + ".wq", {dim, dim});
  b.wk = p.add(prefix + ".wk", {dim, dim});
  b.wv = p.add(prefix + ".wv", {dim, dim});
  b.wo = p.add(prefix + ".wo", {dim, dim});
  b.ffn_w1 = p.add(prefix + ".ffn_w1", {dim, ffn});
  b.ffn_b1 = p.add(prefix + ".ffn_b1", {1, ffn});
  b.ffn_w2 = p.add(prefix + ".ffn_w2", {ffn, dim});
  b.ffn_b2 = p.add(prefix + ".ffn_b2", {1, dim});
  b.norm1 = p.add(prefix + ".norm1", {1, dim});
  b.norm2 = p.add(prefix + ".norm2", {1, dim});
  return b;
}

inline nn::Value block_forward(nn::Tape& tp, nn::Value x, const BlockParams& b, int heads,
                               bool causal, const std::vector<int>& pos, double rope_base) {
  const int dim = x->shape[1];
  const int head_dim = dim / heads;
  nn::Value h = tp.rms_norm(x, b.norm1);
  nn::Value q = tp.rope_rotate(tp.matmul(h, b.wq), pos, head_dim, rope_base);
  nn::Value k = tp.rope_rotate(tp.matmul(h, b.wk), pos, head_dim, rope_base);
  nn::Value v = tp.matmul(h, b.wv);
  x = tp.add(x, tp.matmul(tp.attention(q, k, v, heads, causal), b.wo));
  nn::Value f = tp.rms_norm(x, b.norm2);
  f = tp.gelu(tp.add(tp.matmul(f, b.ffn_w1), b.ffn_b1));
  f = tp.add(tp.matmul(f, b.ffn_w2), b.ffn_b2);
  return tp.add(x, f);
}

}  // namespace detail

struct SequenceLoss {
  nn::Value total;                 // weighted sum over all positions (on tape)
  double weight_total = 0.0;       // sum of active weights
  std::vector<double> per_element; // plain per-element weighted sums
  std::vector<double> layer_nll_sum;   // unweighted NLL sums per RVQ layer
  std::vector<long> layer_token_count; // non-EMPTY slots per RVQ layer
  double text_nll_sum = 0.0;
  long text_token_count = 0;

  double weighted_sum() const { return total ? total->v[0] : 0.0; }
  double mean() const { return weight_total > 0.0 ? weighted_sum() / weight_total : 0.0; }
};

struct TrainMetrics {
  int step = 0;
  double loss = 0.0;       // weighted mean
  double grad_norm = 0.0;
  double lr_factor = 1.0;
  double text_nll = 0.0;
  std::vector<double> layer_nll;
};

struct GenerateResult {
  InterleavedSequence sequence;  // prompt plus generated elements
  size_t prompt_elements = 0;
  bool truncated = false;
};

class Model {
 public:
  ModelConfig cfg;
  nn::ParamTree params;

  explicit Model(const ModelConfig& config, uint64_t seed = 7) : cfg(config) {
    cfg.validate();
    for (int r = 0; r < cfg.rvq_layers; ++r)
      audio_emb_.push_back(
          params.add("audio_emb_" + std::to_string(r), {cfg.audio_vocab[static_cast<size_t>(r)], cfg.enc_dim}));
    for (int l = 0; l < cfg.enc_layers; ++l)
      enc_blocks_.push_back(detail::make_block(params, "enc." + std::to_string(l), cfg.enc_dim, cfg.enc_ffn));
    enc_out_norm_ = params.add("enc.out_norm", {1, cfg.enc_dim});
    enc_proj_w_ = params.add("enc.proj_w", {cfg.group_size * cfg.enc_dim, cfg.backbone_dim});
    enc_proj_b_ = params.add("enc.proj_b", {1, cfg.backbone_dim});

    text_emb_ = params.add("text_emb", {cfg.text_vocab(), cfg.backbone_dim});
    for (int l = 0; l < cfg.backbone_layers; ++l)
      bb_blocks_.push_back(
          detail::make_block(params, "backbone." + std::to_string(l), cfg.backbone_dim, cfg.backbone_ffn));
    bb_out_norm_ = params.add("backbone.out_norm", {1, cfg.backbone_dim});
    text_head_w_ = params.add("text_head_w", {cfg.backbone_dim, cfg.text_vocab()});
    text_head_b_ = params.add("text_head_b", {1, cfg.text_vocab()});

    dec_in_w_ = params.add("dec.in_w", {cfg.backbone_dim, cfg.dec_dim});
    dec_in_b_ = params.add("dec.in_b", {1, cfg.dec_dim});
    for (int l = 0; l < cfg.dec_layers; ++l)
      dec_blocks_.push_back(detail::make_block(params, "dec." + std::to_string(l), cfg.dec_dim, cfg.dec_ffn));
    dec_out_norm_ = params.add("dec.out_norm", {1, cfg.dec_dim});
    for (int r = 0; r < cfg.rvq_layers; ++r) {
      dec_head_w_.push_back(
          params.add("dec_head_w_" + std::to_string(r), {cfg.dec_dim, cfg.audio_vocab[static_cast<size_t>(r)]}));
      dec_head_b_.push_back(
          params.add("dec_head_b_" + std::to_string(r), {1, cfg.audio_vocab[static_cast<size_t>(r)]}));
    }

    init_weights(seed);
  }

  // Sum of per-codebook embeddings; EMPTY slots contribute nothing.
  nn::Value embed_frame(nn::Tape& tp, const std::vector<int32_t>& frame) {
    if (static_cast<int>(frame.size()) != cfg.rvq_layers)
      throw std::invalid_argument("embed_frame: layer count mismatch");
    return embed_rows(tp, frame.data(), 1);
  }

  nn::Value encode_patch(nn::Tape& tp, const Patch& p) {
    if (p.group_size != cfg.group_size || p.num_layers != cfg.rvq_layers)
      throw std::invalid_argument("encode_patch: patch shape mismatch");
    nn::Value x = embed_rows(tp, p.tokens.data(), p.group_size);
    std::vector<int> pos(static_cast<size_t>(p.group_size));
    for (int i = 0; i < p.group_size; ++i) pos[static_cast<size_t>(i)] = i;
    for (const auto& b : enc_blocks_)
      x = detail::block_forward(tp, x, b, cfg.enc_heads, /*causal=*/false, pos, cfg.rope_base);
    x = tp.rms_norm(x, enc_out_norm_);
    x = tp.reshape(x, {1, cfg.group_size * cfg.enc_dim});
    return tp.add(tp.matmul(x, enc_proj_w_), enc_proj_b_);
  }

  // Causal hidden states, one row per element.
  nn::Value backbone_forward(nn::Tape& tp, const std::vector<Element>& elements) {
    if (elements.empty()) throw std::invalid_argument("backbone_forward: empty sequence");
    if (static_cast<int>(elements.size()) > cfg.context)
      throw std::runtime_error("context exceeded");
    std::vector<nn::Value> rows;
    rows.reserve(elements.size());
    for (const auto& e : elements) {
      if (e.is_text()) {
        rows.push_back(tp.embedding_lookup(text_emb_, {static_cast<int>(e.text_id)}));
      } else {
        rows.push_back(encode_patch(tp, e.patch));
      }
    }
    nn::Value x = tp.concat_rows(rows);
    std::vector<int> pos(elements.size());
    for (size_t i = 0; i < elements.size(); ++i) pos[i] = static_cast<int>(i);
    for (const auto& b : bb_blocks_)
      x = detail::block_forward(tp, x, b, cfg.backbone_heads, /*causal=*/true, pos, cfg.rope_base);
    return tp.rms_norm(x, bb_out_norm_);
  }

  struct PatchNll {
    nn::Value total;  // weighted sum over slots and layers
    std::vector<double> layer_nll_sum;
    std::vector<long> layer_token_count;
  };

  // Cross entropy over the delayed patch, decoder conditioned on h as slot 0.
  PatchNll decode_patch_nll(nn::Tape& tp, const nn::Value& h, const Patch& target,
                            const std::vector<double>& rvq_w) {
    if (static_cast<int>(rvq_w.size()) != cfg.rvq_layers)
      throw std::invalid_argument("decode_patch_nll: weight count mismatch");
    if (target.num_layers != cfg.rvq_layers || target.group_size != cfg.group_size)
      throw std::invalid_argument("decode_patch_nll: delay config mismatch");
    const framing::DelayedPatch dp = framing::delay_apply(target, cfg.delays);
    const int slots = dp.rows();

    nn::Value states = decoder_states(tp, h, dp, slots);

    PatchNll out;
    out.layer_nll_sum.assign(static_cast<size_t>(cfg.rvq_layers), 0.0);
    out.layer_token_count.assign(static_cast<size_t>(cfg.rvq_layers), 0);
    for (int r = 0; r < cfg.rvq_layers; ++r) {
      nn::Value logits = tp.add(tp.matmul(states, dec_head_w_[static_cast<size_t>(r)]),
                                dec_head_b_[static_cast<size_t>(r)]);
      std::vector<int> targets(static_cast<size_t>(slots), -1);
      std::vector<double> weights(static_cast<size_t>(slots), 0.0);
      std::vector<double> unit(static_cast<size_t>(slots), 0.0);
      for (int j = 0; j < slots; ++j) {
        const int32_t tok = dp.at(j, r);
        if (tok == kEmptyToken) continue;
        targets[static_cast<size_t>(j)] = tok;
        weights[static_cast<size_t>(j)] = rvq_w[static_cast<size_t>(r)];
        unit[static_cast<size_t>(j)] = 1.0;
        out.layer_token_count[static_cast<size_t>(r)]++;
      }
      nn::Value weighted = tp.cross_entropy_weighted(logits, targets, weights);
      out.total = out.total ? tp.add(out.total, weighted) : weighted;
      // raw per-layer NLL for metrics, value only
      out.layer_nll_sum[static_cast<size_t>(r)] = unweighted_nll(logits, targets, unit);
    }
    return out;
  }

  // Weighted sum of text-position NLL and per-patch decoder NLL. Audio
  // elements receive a PATCH-marker target on the text head only while
  // audio losses are active, so modality switching is trainable without
  // charging text loss during understanding-only training.
  SequenceLoss sequence_loss(nn::Tape& tp, const std::vector<Element>& elements,
                             const StageWeights& stage) {
    SequenceLoss out;
    out.layer_nll_sum.assign(static_cast<size_t>(cfg.rvq_layers), 0.0);
    out.layer_token_count.assign(static_cast<size_t>(cfg.rvq_layers), 0);
    out.per_element.assign(elements.size(), 0.0);
    if (elements.size() < 2) {
      out.total = nn::scalar_const(0.0);
      return out;
    }

    nn::Value hiddens = backbone_forward(tp, elements);
    const int n = static_cast<int>(elements.size());

    nn::Value text_logits = tp.add(tp.matmul(hiddens, text_head_w_), text_head_b_);
    std::vector<int> targets(static_cast<size_t>(n), -1);
    std::vector<double> weights(static_cast<size_t>(n), 0.0);
    for (int p = 0; p + 1 < n; ++p) {
      const Element& next = elements[static_cast<size_t>(p + 1)];
      if (next.is_text()) {
        targets[static_cast<size_t>(p)] = static_cast<int>(next.text_id);
        weights[static_cast<size_t>(p)] = stage.text_w;
      } else if (stage.audio_active()) {
        targets[static_cast<size_t>(p)] = cfg.patch_marker();
        weights[static_cast<size_t>(p)] = stage.text_w;
      }
    }
    nn::Value total = tp.cross_entropy_weighted(text_logits, targets, weights);
    // contributions are attributed to the element being predicted
    for (int p = 0; p + 1 < n; ++p) {
      if (targets[static_cast<size_t>(p)] < 0) continue;
      const double nll = row_nll(text_logits, p, targets[static_cast<size_t>(p)]);
      out.text_nll_sum += nll;
      out.text_token_count++;
      out.per_element[static_cast<size_t>(p + 1)] += weights[static_cast<size_t>(p)] * nll;
      out.weight_total += weights[static_cast<size_t>(p)];
    }

    for (int p = 0; p + 1 < n; ++p) {
      const Element& next = elements[static_cast<size_t>(p + 1)];
      if (next.is_text()) continue;
      nn::Value h = tp.slice_rows(hiddens, p, p + 1);
      PatchNll pn = decode_patch_nll(tp, h, next.patch, stage.rvq_w);
      total = tp.add(total, pn.total);
      out.per_element[static_cast<size_t>(p + 1)] += pn.total->v[0];
      for (int r = 0; r < cfg.rvq_layers; ++r) {
        out.layer_nll_sum[static_cast<size_t>(r)] += pn.layer_nll_sum[static_cast<size_t>(r)];
        out.layer_token_count[static_cast<size_t>(r)] += pn.layer_token_count[static_cast<size_t>(r)];
        out.weight_total += stage.rvq_w[static_cast<size_t>(r)] *
                            static_cast<double>(pn.layer_token_count[static_cast<size_t>(r)]);
      }
    }
    out.total = total;
    return out;
  }

  // ---------------------------------------------------------------------
  // Training.

  struct Optimizer {
    nn::Adam adam;
    nn::LrSchedule schedule;
    double lr_encoder = 2e-4;
    double lr_backbone = 3e-5;
    double lr_decoder = 2e-4;
    double lr_scale = 1.0;
  };

  std::vector<nn::ParamGroup> param_groups(const Optimizer& opt) const {
    nn::ParamGroup enc, bb, dec;
    enc.lr = opt.lr_encoder * opt.lr_scale;
    bb.lr = opt.lr_backbone * opt.lr_scale;
    dec.lr = opt.lr_decoder * opt.lr_scale;
    for (const auto& [name, v] : params.items) {
      if (name.rfind("audio_emb_", 0) == 0 || name.rfind("enc.", 0) == 0) {
        enc.params.push_back(v);
      } else if (name.rfind("dec", 0) == 0) {
        dec.params.push_back(v);
      } else {
        bb.params.push_back(v);
      }
    }
    return {enc, bb, dec};
  }

  TrainMetrics train_step(const std::vector<std::vector<Element>>& batch, Optimizer& opt,
                          const StageWeights& stage) {
    params.zero_grad();
    nn::Tape tp;
    nn::Value total;
    double weight_total = 0.0;
    std::vector<double> layer_nll(static_cast<size_t>(cfg.rvq_layers), 0.0);
    std::vector<long> layer_cnt(static_cast<size_t>(cfg.rvq_layers), 0);
    double text_nll = 0.0;
    long text_cnt = 0;

    for (const auto& seq : batch) {
      SequenceLoss sl = sequence_loss(tp, seq, stage);
      total = total ? tp.add(total, sl.total) : sl.total;
      weight_total += sl.weight_total;
      for (int r = 0; r < cfg.rvq_layers; ++r) {
        layer_nll[static_cast<size_t>(r)] += sl.layer_nll_sum[static_cast<size_t>(r)];
        layer_cnt[static_cast<size_t>(r)] += sl.layer_token_count[static_cast<size_t>(r)];
      }
      text_nll += sl.text_nll_sum;
      text_cnt += sl.text_token_count;
    }
    if (!total) throw std::invalid_argument("train_step: empty batch");
    if (!std::isfinite(total->v[0]))
      throw std::runtime_error("train_step: non-finite loss, aborting");

    // normalize so the step size does not depend on batch weight mass
    nn::Value loss = weight_total > 0.0 ? tp.scale(total, 1.0 / weight_total) : total;
    tp.backward(loss);

    TrainMetrics m;
    m.loss = weight_total > 0.0 ? total->v[0] / weight_total : 0.0;
    m.grad_norm = params.grad_norm();
    m.lr_factor = opt.schedule.factor(opt.adam.step_count());
    auto groups = param_groups(opt);
    opt.adam.step(groups, m.lr_factor);
    m.step = opt.adam.step_count();
    m.text_nll = text_cnt > 0 ? text_nll / static_cast<double>(text_cnt) : 0.0;
    for (int r = 0; r < cfg.rvq_layers; ++r)
      m.layer_nll.push_back(layer_cnt[static_cast<size_t>(r)] > 0
                                ? layer_nll[static_cast<size_t>(r)] /
                                      static_cast<double>(layer_cnt[static_cast<size_t>(r)])
                                : 0.0);
    return m;
  }

  // ---------------------------------------------------------------------
  // Generation: the text head decides modality (control tokens switch
  // between text and audio runs); patches are sampled slot by slot in
  // delayed order and un-delayed before they enter the sequence.

  GenerateResult generate(const InterleavedSequence& prompt, const GenerationSettings& settings,
                          bool* warned_truncation = nullptr) {
    if (settings.temperature < 0.0) throw std::invalid_argument("generate: temperature must be >= 0");
    if (settings.top_k < 1) throw std::invalid_argument("generate: top_k must be >= 1");
    std::mt19937_64 rng(settings.seed);

    GenerateResult res;
    res.sequence = prompt;
    res.prompt_elements = prompt.elements.size();

    bool audio_mode = false;
    for (const auto& e : prompt.elements) {
      if (e.is_text()) {
        if (e.text_id == cfg.audio_begin()) audio_mode = true;
        if (e.text_id == cfg.audio_end()) audio_mode = false;
      }
    }

    int produced = 0;
    while (produced < settings.max_elements) {
      std::vector<Element> window = res.sequence.elements;
      if (static_cast<int>(window.size()) >= cfg.context) {
        window.erase(window.begin(),
                     window.begin() + (static_cast<long>(window.size()) - cfg.context + 1));
        res.truncated = true;
        if (warned_truncation) *warned_truncation = true;
      }
      nn::Tape tp;
      nn::Value hiddens = backbone_forward(tp, window);
      nn::Value h = tp.slice_rows(hiddens, static_cast<int>(window.size()) - 1,
                                  static_cast<int>(window.size()));
      nn::Value logits = tp.add(tp.matmul(h, text_head_w_), text_head_b_);
      const int tok = sample_row(logits->v, settings, rng);

      if (!audio_mode) {
        res.sequence.elements.push_back(Element::text(tok));
        ++produced;
        if (tok == cfg.audio_begin()) audio_mode = true;
        if (tok == cfg.eos()) break;
      } else if (tok == cfg.audio_end()) {
        res.sequence.elements.push_back(Element::text(tok));
        ++produced;
        audio_mode = false;
      } else {
        res.sequence.elements.push_back(Element::audio(generate_patch(h, settings, rng)));
        ++produced;
      }
    }
    return res;
  }

  Patch generate_patch(const nn::Value& h_const, const GenerationSettings& settings,
                       std::mt19937_64& rng) {
    const int slots = cfg.delayed_len();
    framing::DelayedPatch dp;
    dp.group_size = cfg.group_size;
    dp.num_layers = cfg.rvq_layers;
    dp.tokens.assign(static_cast<size_t>(slots) * cfg.rvq_layers, kEmptyToken);

    // detach h from the generation tape
    Mat h_mat(1, cfg.backbone_dim);
    h_mat.v = h_const->v;

    for (int j = 0; j < slots; ++j) {
      nn::Tape tp;
      nn::Value states = decoder_states(tp, nn::constant(h_mat), dp, j + 1);
      nn::Value last = tp.slice_rows(states, j, j + 1);
      for (int r = 0; r < cfg.rvq_layers; ++r) {
        const int src = j - cfg.delays.delays[static_cast<size_t>(r)];
        if (src < 0 || src >= cfg.group_size) continue;  // stays EMPTY by the delay rule
        nn::Value logits = tp.add(tp.matmul(last, dec_head_w_[static_cast<size_t>(r)]),
                                  dec_head_b_[static_cast<size_t>(r)]);
        dp.at(j, r) = sample_row(logits->v, settings, rng);
      }
    }
    Patch p = framing::delay_remove(dp, cfg.delays, cfg.group_size, cfg.audio_vocab);
    return p;
  }

 private:
  nn::Value embed_rows(nn::Tape& tp, const int32_t* tokens, int rows) {
    nn::Value acc;
    std::vector<int> ids(static_cast<size_t>(rows));
    for (int r = 0; r < cfg.rvq_layers; ++r) {
      for (int i = 0; i < rows; ++i) {
        const int32_t t = tokens[static_cast<size_t>(i) * cfg.rvq_layers + r];
        if (t != kEmptyToken && (t < 0 || t >= cfg.audio_vocab[static_cast<size_t>(r)]))
          throw std::out_of_range("audio token index out of range");
        ids[static_cast<size_t>(i)] = static_cast<int>(t);
      }
      nn::Value e = tp.embedding_lookup(audio_emb_[static_cast<size_t>(r)], ids);
      acc = acc ? tp.add(acc, e) : e;
    }
    return acc;
  }

  // Decoder forward over the first `slots` rows of a delayed patch, with
  // the projected backbone state prepended as slot 0's input.
  nn::Value decoder_states(nn::Tape& tp, const nn::Value& h, const framing::DelayedPatch& dp,
                           int slots) {
    std::vector<nn::Value> rows;
    rows.push_back(tp.add(tp.matmul(h, dec_in_w_), dec_in_b_));
    if (slots > 1) rows.push_back(embed_rows(tp, dp.tokens.data(), slots - 1));
    nn::Value x = tp.concat_rows(rows);
    std::vector<int> pos(static_cast<size_t>(slots));
    for (int i = 0; i < slots; ++i) pos[static_cast<size_t>(i)] = i;
    for (const auto& b : dec_blocks_)
      x = detail::block_forward(tp, x, b, cfg.dec_heads, /*causal=*/true, pos, cfg.rope_base);
    return tp.rms_norm(x, dec_out_norm_);
  }

  static double row_nll(const nn::Value& logits, int row, int target) {
    const int vocab = logits->shape[1];
    const double* x = logits->v.data() + static_cast<size_t>(row) * vocab;
    double mx = x[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < vocab; ++j) z += std::exp(x[j] - mx);
    return -(x[target] - mx - std::log(z));
  }

  static double unweighted_nll(const nn::Value& logits, const std::vector<int>& targets,
                               const std::vector<double>& active) {
    double acc = 0.0;
    for (size_t i = 0; i < targets.size(); ++i)
      if (targets[i] >= 0 && active[i] > 0.0) acc += row_nll(logits, static_cast<int>(i), targets[i]);
    return acc;
  }

  int sample_row(const std::vector<double>& logits, const GenerationSettings& settings,
                 std::mt19937_64& rng) const {
    const int n = static_cast<int>(logits.size());
    // temperature 0 or top_k 1 degrade to argmax
    int best = 0;
    for (int j = 1; j < n; ++j)
      if (logits[static_cast<size_t>(j)] > logits[static_cast<size_t>(best)]) best = j;
    if (settings.temperature <= 1e-12 || settings.top_k == 1) return best;

    std::vector<int> order(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) order[static_cast<size_t>(j)] = j;
    const int k = std::min(settings.top_k, n);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)])
        return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
      return a < b;
    });
    std::vector<double> p(static_cast<size_t>(k));
    double mx = logits[static_cast<size_t>(order[0])];
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
      p[static_cast<size_t>(j)] =
          std::exp((logits[static_cast<size_t>(order[static_cast<size_t>(j)])] - mx) / settings.temperature);
      z += p[static_cast<size_t>(j)];
    }
    std::uniform_real_distribution<double> u(0.0, z);
    double target = u(rng), acc = 0.0;
    for (int j = 0; j < k; ++j) {
      acc += p[static_cast<size_t>(j)];
      if (acc >= target) return order[static_cast<size_t>(j)];
    }
    return order[static_cast<size_t>(k - 1)];
  }

  void init_weights(uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& [name, v] : params.items) {
      const bool is_norm = name.find("norm") != std::string::npos;
      const bool is_bias = name.find("_b") != std::string::npos || name.find(".ffn_b") != std::string::npos ||
                           name.find(".proj_b") != std::string::npos || name.find(".in_b") != std::string::npos;
      const bool is_head = name.rfind("text_head", 0) == 0 || name.rfind("dec_head", 0) == 0;
      if (is_norm) {
        std::fill(v->v.begin(), v->v.end(), 1.0);
      } else if (is_bias || is_head) {
        std::fill(v->v.begin(), v->v.end(), 0.0);  // heads start uniform
      } else {
        nn::init_normal(v, 0.02, rng);
      }
    }
  }

  std::vector<nn::Value> audio_emb_;
  std::vector<detail::BlockParams> enc_blocks_;
  nn::Value enc_out_norm_, enc_proj_w_, enc_proj_b_;
  nn::Value text_emb_;
  std::vector<detail::BlockParams> bb_blocks_;
  nn::Value bb_out_norm_, text_head_w_, text_head_b_;
  nn::Value dec_in_w_, dec_in_b_;
  std::vector<detail::BlockParams> dec_blocks_;
  nn::Value dec_out_norm_;
  std::vector<nn::Value> dec_head_w_, dec_head_b_;
};

// Wraps bare interleaved content with BOS/EOS and audio run delimiters.
inline std::vector<Element> with_control_tokens(const InterleavedSequence& seq,
                                                const ModelConfig& cfg) {
  std::vector<Element> out;
  out.push_back(Element::text(cfg.bos()));
  bool in_audio = false;
  for (const auto& e : seq.elements) {
    if (e.is_text() && in_audio) {
      out.push_back(Element::text(cfg.audio_end()));
      in_audio = false;
    } else if (!e.is_text() && !in_audio) {
      out.push_back(Element::text(cfg.audio_begin()));
      in_audio = true;
    }
    out.push_back(e);
  }
  if (in_audio) out.push_back(Element::text(cfg.audio_end()));
  out.push_back(Element::text(cfg.eos()));
  return out;
}

}  // namespace mimt::model
