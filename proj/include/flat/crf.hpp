#pragma once

#include <vector>

#include "flat/tensor.hpp"

namespace flat {

// Linear-chain CRF output layer: emission projection plus transition,
// start and end scores. Transitions start at zero; decoding legality is
// left to the metric side.
struct CrfParams {
  int n_tags = 0;
  nn::Tensor projection;   // d_model x T
  nn::Tensor transitions;  // T x T, [from][to]
  nn::Tensor start;        // T
  nn::Tensor end;          // T
};

CrfParams make_crf_params(nn::ParameterStore& store, int d_model, int n_tags,
                          Rng& rng);

// Per-position tag scores; output dropout is applied before the projection.
nn::Tensor crf_emissions(const nn::Tensor& char_reps, const CrfParams& crf,
                         double output_dropout, const nn::Mode& mode);

// log sum over all tag paths of exp(path score), in log space.
nn::Tensor crf_log_partition(const nn::Tensor& emissions,
                             const CrfParams& crf);

// Negative log likelihood of the gold path: log_partition - gold score.
nn::Tensor crf_nll(const nn::Tensor& emissions, const std::vector<int>& gold,
                   const CrfParams& crf);

struct ViterbiResult {
  std::vector<int> tags;
  double score = 0.0;
};

// Best-scoring path; ties broken toward the lowest tag index.
ViterbiResult crf_viterbi(const nn::Tensor& emissions, const CrfParams& crf);

// Score of one concrete path (used to cross-check viterbi output).
double crf_path_score(const nn::Tensor& emissions,
                      const std::vector<int>& path, const CrfParams& crf);

}  // namespace flat
