#include "flat/model.hpp"

#include <cmath>
#include <cstdlib>
#include <iostream>

namespace flat {

using nn::Tensor;

void ModelConfig::validate() const {
  require(d_model >= 2 && d_model % 2 == 0,
          "config: d_model must be even and >= 2");
  require(n_heads >= 1 && d_model % n_heads == 0,
          "config: d_model must be divisible by n_heads");
  require(ffn_size >= 1, "config: ffn_size must be positive");
  require(n_layers >= 1, "config: n_layers must be positive");
  require(embed_dropout >= 0.0 && embed_dropout < 1.0 &&
              output_dropout >= 0.0 && output_dropout < 1.0,
          "config: dropout rates must be in [0,1)");
  require(mask.threshold >= 0, "config: mask threshold must be >= 0");
  if (n_layers > 1)
    std::cerr << "warning: n_layers=" << n_layers
              << " is experimental; one layer is the supported default\n";
}

AttnMask build_mask(const MaskSpec& spec, const FlatLattice& flat,
                    const DistanceMatrices& dm, int n_real_spans) {
  int s = flat.size();
  require(dm.size == s, "build_mask: distance matrices do not match lattice");
  if (n_real_spans < 0) n_real_spans = s;
  AttnMask mask;
  mask.size = s;
  mask.blocked.assign(static_cast<size_t>(s) * s, 0);

  auto block = [&mask, s](int i, int j) {
    mask.blocked[static_cast<size_t>(i) * s + j] = 1;
    mask.any = true;
  };

  if (n_real_spans < s)
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j)
        if (i >= n_real_spans || j >= n_real_spans) block(i, j);

  switch (spec.kind) {
    case MaskKind::None:
      break;
    case MaskKind::SelfMatched:
      for (int i = 0; i < flat.n_chars && i < n_real_spans; ++i)
        for (int j = flat.n_chars; j < n_real_spans; ++j) {
          const Span& w = flat.spans[j];
          if (w.kind == SpanKind::Word && w.head <= i && i <= w.tail)
            block(i, j);
        }
      break;
    case MaskKind::LongDistance:
      for (int i = 0; i < n_real_spans; ++i)
        for (int j = 0; j < n_real_spans; ++j) {
          size_t k = static_cast<size_t>(i) * s + j;
          int d = 0;
          switch (spec.distance) {
            case MldDistance::HeadHead:
              d = std::abs(dm.hh[k]);
              break;
            case MldDistance::TailTail:
              d = std::abs(dm.tt[k]);
              break;
            case MldDistance::MinOfFour:
              d = std::min(std::min(std::abs(dm.hh[k]), std::abs(dm.ht[k])),
                           std::min(std::abs(dm.th[k]), std::abs(dm.tt[k])));
              break;
          }
          if (d > spec.threshold) block(i, j);
        }
      break;
  }
  return mask;
}

nn::Tensor apply_mask(const nn::Tensor& scores, const AttnMask& mask) {
  return nn::mask_fill(scores, mask.blocked, nn::kMaskedScore);
}

FlatModel::FlatModel(const ModelConfig& config, int char_vocab, int word_vocab,
                     int n_tags, uint64_t seed)
    : config_(config), char_vocab_(char_vocab), word_vocab_(word_vocab) {
  config_.validate();
  require(char_vocab >= 2 && word_vocab >= 2,
          "FlatModel: vocabularies must include the reserved PAD/UNK rows");
  Rng rng(seed);
  int d = config_.d_model;

  char_table_ = params_.create("embed.char_table",
                               {char_vocab, config_.char_dim()},
                               nn::Init::NormalInvSqrt, rng);
  word_table_ = params_.create("embed.word_table",
                               {word_vocab, config_.word_dim()},
                               nn::Init::NormalInvSqrt, rng);
  char_proj_ = params_.create("embed.char_proj", {config_.char_dim(), d},
                              nn::Init::GlorotUniform, rng);
  word_proj_ = params_.create("embed.word_proj", {config_.word_dim(), d},
                              nn::Init::GlorotUniform, rng);
  w_r_ = params_.create("pos.w_r", {d, 4 * d}, nn::Init::GlorotUniform, rng);

  int dh = config_.d_head();
  for (int l = 0; l < config_.n_layers; ++l) {
    LayerParams layer;
    std::string prefix = "enc.l" + std::to_string(l) + ".";
    for (int h = 0; h < config_.n_heads; ++h) {
      std::string hp = prefix + "h" + std::to_string(h) + ".";
      HeadParams head;
      head.w_q = params_.create(hp + "w_q", {d, dh}, nn::Init::GlorotUniform, rng);
      head.w_ke = params_.create(hp + "w_ke", {d, dh}, nn::Init::GlorotUniform, rng);
      head.w_kr = params_.create(hp + "w_kr", {d, dh}, nn::Init::GlorotUniform, rng);
      head.w_v = params_.create(hp + "w_v", {d, dh}, nn::Init::GlorotUniform, rng);
      head.u = params_.create(hp + "u", {dh}, nn::Init::Zeros, rng);
      head.v = params_.create(hp + "v", {dh}, nn::Init::Zeros, rng);
      layer.heads.push_back(std::move(head));
    }
    layer.w_o = params_.create(prefix + "w_o", {d, d}, nn::Init::GlorotUniform, rng);
    layer.ffn_w1 = params_.create(prefix + "ffn.w1", {d, config_.ffn_size},
                                  nn::Init::GlorotUniform, rng);
    layer.ffn_b1 = params_.create(prefix + "ffn.b1", {config_.ffn_size},
                                  nn::Init::Zeros, rng);
    layer.ffn_w2 = params_.create(prefix + "ffn.w2", {config_.ffn_size, d},
                                  nn::Init::GlorotUniform, rng);
    layer.ffn_b2 = params_.create(prefix + "ffn.b2", {d}, nn::Init::Zeros, rng);
    layer.norm_attn_gain =
        params_.create(prefix + "norm_attn.gain", {d}, nn::Init::Ones, rng);
    layer.norm_attn_bias =
        params_.create(prefix + "norm_attn.bias", {d}, nn::Init::Zeros, rng);
    layer.norm_ffn_gain =
        params_.create(prefix + "norm_ffn.gain", {d}, nn::Init::Ones, rng);
    layer.norm_ffn_bias =
        params_.create(prefix + "norm_ffn.bias", {d}, nn::Init::Zeros, rng);
    layers_.push_back(std::move(layer));
  }

  crf_ = make_crf_params(params_, d, n_tags, rng);
}

nn::Tensor FlatModel::embed(const FlatLattice& flat,
                            const nn::Mode& mode) const {
  int n = flat.n_chars;
  int s = flat.size();
  require(n >= 1 && s >= n, "embed: malformed lattice");

  auto clamp_id = [](int id, int vocab) {
    return (id >= 0 && id < vocab) ? id : 1;  // out-of-vocabulary -> UNK row
  };

  std::vector<int> char_ids(n);
  for (int i = 0; i < n; ++i)
    char_ids[i] = clamp_id(flat.spans[i].token_id, char_vocab_);
  Tensor x = nn::matmul(nn::embedding_lookup(char_table_, char_ids), char_proj_);

  if (s > n) {
    std::vector<int> word_ids(s - n);
    for (int i = n; i < s; ++i)
      word_ids[i - n] = clamp_id(flat.spans[i].token_id, word_vocab_);
    Tensor w =
        nn::matmul(nn::embedding_lookup(word_table_, word_ids), word_proj_);
    x = nn::concat_rows({x, w});
  }
  return nn::dropout(x, config_.embed_dropout, mode);
}

nn::Tensor FlatModel::rel_encoding(const FlatLattice& flat) const {
  int s = flat.size();
  int d = config_.d_model;
  DistanceMatrices dm = distances(flat);
  Tensor input =
      Tensor::constant({s * s, 4 * d}, fused_position_input(dm, d));
  Tensor r = nn::relu(nn::matmul(input, nn::transpose(w_r_)));
  return nn::reshape(r, {s, s, d});
}

nn::Tensor FlatModel::attention_scores(const nn::Tensor& e, const nn::Tensor& r,
                                       int layer, int head) const {
  const HeadParams& hp = layers_.at(layer).heads.at(head);
  int s = e.dim(0);
  int dh = config_.d_head();

  Tensor q = nn::matmul(e, hp.w_q);
  Tensor ke = nn::matmul(e, hp.w_ke);
  Tensor kr = nn::reshape(
      nn::matmul(nn::reshape(r, {s * s, config_.d_model}), hp.w_kr),
      {s, s, dh});

  Tensor content = nn::matmul(q, nn::transpose(ke));
  Tensor content_pos = nn::rel_term(q, kr);
  Tensor bias_content = nn::broadcast_row(
      nn::reshape(nn::matmul(ke, nn::reshape(hp.u, {dh, 1})), {s}), s);
  Tensor bias_pos = nn::rel_term(nn::broadcast_row(hp.v, s), kr);

  Tensor scores = nn::add(nn::add(content, content_pos),
                          nn::add(bias_content, bias_pos));
  if (config_.attn_scale)
    scores = nn::scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
  return scores;
}

nn::Tensor FlatModel::encode(const FlatLattice& flat, const nn::Mode& mode,
                             int n_real_spans, EncodeTrace* trace) const {
  int s = flat.size();
  int n = flat.n_chars;
  if (n_real_spans < 0) n_real_spans = s;
  require(n_real_spans >= n && n_real_spans <= s,
          "encode: n_real_spans out of range");

  DistanceMatrices dm = distances(flat);
  AttnMask mask = build_mask(config_.mask, flat, dm, n_real_spans);
  Tensor r = rel_encoding(flat);
  Tensor x = embed(flat, mode);

  for (int l = 0; l < config_.n_layers; ++l) {
    const LayerParams& layer = layers_[l];
    std::vector<Tensor> head_outputs;
    std::vector<Tensor> head_weights;
    for (int h = 0; h < config_.n_heads; ++h) {
      Tensor scores = attention_scores(x, r, l, h);
      Tensor weights;
      if (mask.any) {
        scores = apply_mask(scores, mask);
        weights = nn::masked_softmax_rows(scores, mask.blocked);
      } else {
        weights = nn::softmax_rows(scores);
      }
      if (trace) head_weights.push_back(weights);
      Tensor v = nn::matmul(x, layer.heads[h].w_v);
      head_outputs.push_back(nn::matmul(weights, v));
    }
    if (trace) trace->head_weights.push_back(std::move(head_weights));

    Tensor attn = nn::matmul(nn::concat_cols(head_outputs), layer.w_o);
    x = nn::layer_norm(nn::add(x, attn), layer.norm_attn_gain,
                       layer.norm_attn_bias);
    Tensor hidden = nn::relu(nn::add_row(nn::matmul(x, layer.ffn_w1),
                                         layer.ffn_b1));
    Tensor ffn = nn::add_row(nn::matmul(hidden, layer.ffn_w2), layer.ffn_b2);
    x = nn::layer_norm(nn::add(x, ffn), layer.norm_ffn_gain,
                       layer.norm_ffn_bias);
  }
  // Only the character representations feed the output layer.
  return nn::slice_rows(x, 0, n);
}

nn::Tensor FlatModel::emissions(const nn::Tensor& char_reps,
                                const nn::Mode& mode) const {
  return crf_emissions(char_reps, crf_, config_.output_dropout, mode);
}

nn::Tensor FlatModel::nll(const FlatLattice& flat, const std::vector<int>& gold,
                          const nn::Mode& mode) const {
  Tensor reps = encode(flat, mode);
  Tensor e = emissions(reps, mode);
  return crf_nll(e, gold, crf_);
}

std::vector<int> FlatModel::predict(const FlatLattice& flat,
                                    int n_real_spans) const {
  nn::NoGradGuard no_grad;
  nn::Mode mode = nn::Mode::eval();
  Tensor reps = encode(flat, mode, n_real_spans);
  Tensor e = emissions(reps, mode);
  return crf_viterbi(e, crf_).tags;
}

}  // namespace flat
