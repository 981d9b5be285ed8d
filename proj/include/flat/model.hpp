#pragma once

#include <string>
#include <vector>

#include "flat/crf.hpp"
#include "flat/lattice.hpp"
#include "flat/position.hpp"
#include "flat/tensor.hpp"

namespace flat {

enum class MaskKind { None, SelfMatched, LongDistance };
// Which distance the long-distance mask thresholds on. Head-head is the
// default; the others are available for experiments.
enum class MldDistance { HeadHead, TailTail, MinOfFour };

struct MaskSpec {
  MaskKind kind = MaskKind::None;
  int threshold = 10;
  MldDistance distance = MldDistance::HeadHead;
};

struct ModelConfig {
  int d_model = 160;
  int n_heads = 8;
  int ffn_size = 480;
  int n_layers = 1;
  double embed_dropout = 0.5;
  double output_dropout = 0.3;
  bool attn_scale = true;  // keep the 1/sqrt(d_head) factor on the scores
  MaskSpec mask;
  int d_char = 0;  // 0 means d_model
  int d_word = 0;

  int d_head() const { return d_model / n_heads; }
  int char_dim() const { return d_char > 0 ? d_char : d_model; }
  int word_dim() const { return d_word > 0 ? d_word : d_model; }
  void validate() const;
};

// Attention mask over span pairs; blocked entries get no weight.
struct AttnMask {
  int size = 0;
  std::vector<uint8_t> blocked;
  bool any = false;

  bool at(int i, int j) const {
    return blocked[static_cast<size_t>(i) * size + j] != 0;
  }
};

// Combines the configured ablation mask with padding: rows/columns at and
// beyond n_real_spans are always blocked.
AttnMask build_mask(const MaskSpec& spec, const FlatLattice& flat,
                    const DistanceMatrices& dm, int n_real_spans);

// Writes the large-negative surrogate into blocked score entries.
nn::Tensor apply_mask(const nn::Tensor& scores, const AttnMask& mask);

// Optional probe filled by encode(): per layer, per head post-softmax
// attention weights.
struct EncodeTrace {
  std::vector<std::vector<nn::Tensor>> head_weights;
};

// The one-layer (by default) flat-lattice encoder with relative span
// position attention, plus its CRF head.
class FlatModel {
 public:
  FlatModel(const ModelConfig& config, int char_vocab, int word_vocab,
            int n_tags, uint64_t seed);

  // S x d_model input embeddings: char table + char projection for the
  // character spans, word table + word projection for the rest.
  nn::Tensor embed(const FlatLattice& flat, const nn::Mode& mode) const;

  // Relative position encoding tensor, [S, S, d_model].
  nn::Tensor rel_encoding(const FlatLattice& flat) const;

  // One head's pre-mask attention scores for layer input e, [S, S].
  nn::Tensor attention_scores(const nn::Tensor& e, const nn::Tensor& r,
                              int layer, int head) const;

  // Character representations, n_chars x d_model. When n_real_spans is
  // given, spans at and beyond it are treated as padding.
  nn::Tensor encode(const FlatLattice& flat, const nn::Mode& mode,
                    int n_real_spans = -1, EncodeTrace* trace = nullptr) const;

  nn::Tensor emissions(const nn::Tensor& char_reps,
                       const nn::Mode& mode) const;

  nn::Tensor nll(const FlatLattice& flat, const std::vector<int>& gold,
                 const nn::Mode& mode) const;

  // Viterbi tags for one sentence (eval mode, no graph recording).
  std::vector<int> predict(const FlatLattice& flat,
                           int n_real_spans = -1) const;

  const ModelConfig& config() const { return config_; }
  const CrfParams& crf() const { return crf_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  int char_vocab() const { return char_vocab_; }
  int word_vocab() const { return word_vocab_; }
  int n_tags() const { return crf_.n_tags; }

 private:
  struct HeadParams {
    nn::Tensor w_q, w_ke, w_kr, w_v;  // d_model x d_head
    nn::Tensor u, v;                  // d_head
  };
  struct LayerParams {
    std::vector<HeadParams> heads;
    nn::Tensor w_o;                  // d_model x d_model
    nn::Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    nn::Tensor norm_attn_gain, norm_attn_bias;
    nn::Tensor norm_ffn_gain, norm_ffn_bias;
  };

  ModelConfig config_;
  int char_vocab_ = 0;
  int word_vocab_ = 0;
  nn::ParameterStore params_;
  nn::Tensor char_table_, word_table_, char_proj_, word_proj_;
  nn::Tensor w_r_;  // d_model x 4*d_model, shared across layers
  std::vector<LayerParams> layers_;
  CrfParams crf_;
};

}  // namespace flat
