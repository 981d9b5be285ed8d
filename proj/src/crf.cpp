#include "flat/crf.hpp"

namespace flat {

using nn::Tensor;

CrfParams make_crf_params(nn::ParameterStore& store, int d_model, int n_tags,
                          Rng& rng) {
  require(n_tags >= 1, "make_crf_params: need at least one tag");
  CrfParams crf;
  crf.n_tags = n_tags;
  crf.projection = store.create("crf.projection", {d_model, n_tags},
                                nn::Init::GlorotUniform, rng);
  crf.transitions =
      store.create("crf.transitions", {n_tags, n_tags}, nn::Init::Zeros, rng);
  crf.start = store.create("crf.start", {n_tags}, nn::Init::Zeros, rng);
  crf.end = store.create("crf.end", {n_tags}, nn::Init::Zeros, rng);
  return crf;
}

nn::Tensor crf_emissions(const nn::Tensor& char_reps, const CrfParams& crf,
                         double output_dropout, const nn::Mode& mode) {
  require(char_reps.rank() == 2 && char_reps.dim(0) >= 1,
          "crf_emissions: need at least one position");
  Tensor x = nn::dropout(char_reps, output_dropout, mode);
  return nn::matmul(x, crf.projection);
}

namespace {

// Forward recursion in log space. alpha[t][j] = log sum over paths ending
// in tag j at position t.
Tensor forward_alpha(const Tensor& emissions, const CrfParams& crf) {
  int n = emissions.dim(0);
  int t_count = emissions.dim(1);
  require(t_count == crf.n_tags, "crf: emission width does not match tags");

  Tensor alpha =
      nn::add(nn::reshape(nn::slice_rows(emissions, 0, 1), {t_count}),
              crf.start);
  for (int t = 1; t < n; ++t) {
    Tensor scores = nn::add_col(crf.transitions, alpha);
    Tensor lse = nn::logsumexp_cols(scores);
    alpha = nn::add(
        lse, nn::reshape(nn::slice_rows(emissions, t, t + 1), {t_count}));
  }
  return alpha;
}

}  // namespace

nn::Tensor crf_log_partition(const nn::Tensor& emissions,
                             const CrfParams& crf) {
  Tensor alpha = forward_alpha(emissions, crf);
  return nn::logsumexp_all(nn::add(alpha, crf.end));
}

nn::Tensor crf_nll(const nn::Tensor& emissions, const std::vector<int>& gold,
                   const CrfParams& crf) {
  int n = emissions.dim(0);
  require(static_cast<int>(gold.size()) == n,
          "crf_nll: gold path length mismatch");
  for (int tag : gold)
    require(0 <= tag && tag < crf.n_tags,
            "crf_nll: tag id " + std::to_string(tag) + " out of range");

  Tensor gold_score = nn::pick_rows_sum(emissions, gold);
  gold_score = nn::add(gold_score, nn::pick(crf.start, gold.front()));
  gold_score = nn::add(gold_score, nn::pick(crf.end, gold.back()));
  if (n > 1) {
    std::vector<std::pair<int, int>> steps;
    steps.reserve(n - 1);
    for (int t = 1; t < n; ++t) steps.emplace_back(gold[t - 1], gold[t]);
    gold_score = nn::add(gold_score, nn::pick_pairs_sum(crf.transitions, steps));
  }
  return nn::sub(crf_log_partition(emissions, crf), gold_score);
}

ViterbiResult crf_viterbi(const nn::Tensor& emissions, const CrfParams& crf) {
  int n = emissions.dim(0);
  int t_count = emissions.dim(1);
  require(t_count == crf.n_tags, "crf_viterbi: emission width mismatch");
  const auto& e = emissions.values();
  const auto& trans = crf.transitions.values();
  const auto& start = crf.start.values();
  const auto& end = crf.end.values();

  std::vector<double> delta(t_count);
  std::vector<std::vector<int>> back(n, std::vector<int>(t_count, 0));
  for (int j = 0; j < t_count; ++j) delta[j] = start[j] + e[j];

  std::vector<double> next(t_count);
  for (int t = 1; t < n; ++t) {
    for (int j = 0; j < t_count; ++j) {
      int best_i = 0;
      double best = delta[0] + trans[static_cast<size_t>(0) * t_count + j];
      for (int i = 1; i < t_count; ++i) {
        double cand = delta[i] + trans[static_cast<size_t>(i) * t_count + j];
        if (cand > best) {
          best = cand;
          best_i = i;
        }
      }
      back[t][j] = best_i;
      next[j] = best + e[static_cast<size_t>(t) * t_count + j];
    }
    delta = next;
  }

  int best_j = 0;
  double best = delta[0] + end[0];
  for (int j = 1; j < t_count; ++j) {
    double cand = delta[j] + end[j];
    if (cand > best) {
      best = cand;
      best_j = j;
    }
  }

  ViterbiResult result;
  result.score = best;
  result.tags.assign(n, 0);
  result.tags[n - 1] = best_j;
  for (int t = n - 1; t > 0; --t)
    result.tags[t - 1] = back[t][result.tags[t]];
  return result;
}

double crf_path_score(const nn::Tensor& emissions,
                      const std::vector<int>& path, const CrfParams& crf) {
  int n = emissions.dim(0);
  int t_count = emissions.dim(1);
  require(static_cast<int>(path.size()) == n, "crf_path_score: length mismatch");
  const auto& e = emissions.values();
  const auto& trans = crf.transitions.values();
  double s = crf.start.values()[path.front()] + crf.end.values()[path.back()];
  for (int t = 0; t < n; ++t)
    s += e[static_cast<size_t>(t) * t_count + path[t]];
  for (int t = 1; t < n; ++t)
    s += trans[static_cast<size_t>(path[t - 1]) * t_count + path[t]];
  return s;
}

}  // namespace flat
