#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flat/crf.hpp"
#include "flat/grad_check.hpp"
#include "test_support.hpp"

using namespace flat;
using nn::Tensor;

namespace {

CrfParams random_crf(nn::ParameterStore& store, int d_model, int n_tags,
                     Rng& rng, bool random_chain = true) {
  CrfParams crf = make_crf_params(store, d_model, n_tags, rng);
  if (random_chain) {
    for (double& v : crf.transitions.values()) v = rng.uniform(-1.0, 1.0);
    for (double& v : crf.start.values()) v = rng.uniform(-1.0, 1.0);
    for (double& v : crf.end.values()) v = rng.uniform(-1.0, 1.0);
  }
  return crf;
}

Tensor random_emissions(Rng& rng, int n, int t) {
  std::vector<double> v(static_cast<size_t>(n) * t);
  for (double& x : v) x = rng.uniform(-2.0, 2.0);
  return Tensor::variable({n, t}, std::move(v));
}

}  // namespace

TEST_CASE("log partition of a single position is a logsumexp") {
  Rng rng(1);
  nn::ParameterStore store;
  CrfParams crf = random_crf(store, 4, 3, rng, /*random_chain=*/false);
  Tensor e = Tensor::constant({1, 3}, {0.2, -1.0, 0.7});
  double want = std::log(std::exp(0.2) + std::exp(-1.0) + std::exp(0.7));
  CHECK(crf_log_partition(e, crf).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("log partition matches exhaustive enumeration") {
  Rng rng(2);
  for (int round = 0; round < 200; ++round) {
    int n = 1 + rng.uniform_int(5);
    int t = 1 + rng.uniform_int(4);
    nn::ParameterStore store;
    CrfParams crf = random_crf(store, 4, t, rng);
    Tensor e = random_emissions(rng, n, t);
    auto want = testing::crf_enumerate(n, t, e.values(),
                                       crf.transitions.values(),
                                       crf.start.values(), crf.end.values());
    CHECK(std::abs(crf_log_partition(e, crf).item() - want.log_partition) <
          1e-8);
  }
}

TEST_CASE("adding a constant to one position shifts the partition by it") {
  Rng rng(3);
  nn::ParameterStore store;
  CrfParams crf = random_crf(store, 4, 3, rng);
  Tensor e = random_emissions(rng, 4, 3);
  double base = crf_log_partition(e, crf).item();

  const double c = 1.375;
  std::vector<double> shifted = e.values();
  for (int j = 0; j < 3; ++j) shifted[2 * 3 + j] += c;
  Tensor e2 = Tensor::constant({4, 3}, shifted);
  CHECK(crf_log_partition(e2, crf).item() ==
        doctest::Approx(base + c).epsilon(1e-12));
}

TEST_CASE("nll of a dominant gold path is almost zero") {
  nn::ParameterStore store;
  Rng rng(4);
  CrfParams crf = random_crf(store, 4, 3, rng, /*random_chain=*/false);
  // Margin of 50 nats or more for the gold path.
  std::vector<double> v(4 * 3, 0.0);
  std::vector<int> gold = {2, 0, 1, 1};
  for (int tpos = 0; tpos < 4; ++tpos) v[tpos * 3 + gold[tpos]] = 60.0;
  Tensor e = Tensor::constant({4, 3}, v);
  CHECK(crf_nll(e, gold, crf).item() < 1e-6);
  CHECK(crf_nll(e, gold, crf).item() >= -1e-9);
}

TEST_CASE("uniform scores give nll of n log T") {
  nn::ParameterStore store;
  Rng rng(5);
  CrfParams crf = random_crf(store, 4, 4, rng, /*random_chain=*/false);
  int n = 5, t = 4;
  Tensor e = Tensor::constant({n, t}, std::vector<double>(n * t, 0.7));
  std::vector<int> gold = {1, 3, 0, 2, 2};
  CHECK(crf_nll(e, gold, crf).item() ==
        doctest::Approx(n * std::log(t)).epsilon(1e-10));

  // Cross-check against the enumeration oracle.
  auto enumed = testing::crf_enumerate(n, t, e.values(),
                                       crf.transitions.values(),
                                       crf.start.values(), crf.end.values());
  double gold_score = crf_path_score(e, gold, crf);
  CHECK(crf_nll(e, gold, crf).item() ==
        doctest::Approx(enumed.log_partition - gold_score).epsilon(1e-10));
}

TEST_CASE("single position with one tag has zero nll") {
  nn::ParameterStore store;
  Rng rng(6);
  CrfParams crf = random_crf(store, 4, 1, rng);
  Tensor e = Tensor::constant({1, 1}, {2.5});
  CHECK(crf_nll(e, {0}, crf).item() == doctest::Approx(0.0));
}

TEST_CASE("nll rejects out-of-range tags") {
  nn::ParameterStore store;
  Rng rng(7);
  CrfParams crf = random_crf(store, 4, 3, rng);
  Tensor e = random_emissions(rng, 2, 3);
  CHECK_THROWS_AS(crf_nll(e, {0, 3}, crf), std::runtime_error);
}

TEST_CASE("viterbi single position picks the argmax with start and end") {
  nn::ParameterStore store;
  Rng rng(8);
  CrfParams crf = random_crf(store, 4, 3, rng);
  Tensor e = random_emissions(rng, 1, 3);
  ViterbiResult got = crf_viterbi(e, crf);
  int best = 0;
  double best_score = e.values()[0] + crf.start.values()[0] + crf.end.values()[0];
  for (int j = 1; j < 3; ++j) {
    double s = e.values()[j] + crf.start.values()[j] + crf.end.values()[j];
    if (s > best_score) {
      best_score = s;
      best = j;
    }
  }
  CHECK(got.tags == std::vector<int>{best});
  CHECK(got.score == doctest::Approx(best_score).epsilon(1e-12));
}

TEST_CASE("viterbi equals exhaustive argmax with the tie rule") {
  Rng rng(9);
  for (int round = 0; round < 200; ++round) {
    int n = 1 + rng.uniform_int(5);
    int t = 1 + rng.uniform_int(4);
    nn::ParameterStore store;
    CrfParams crf = random_crf(store, 4, t, rng);
    Tensor e = random_emissions(rng, n, t);
    auto want = testing::crf_enumerate(n, t, e.values(),
                                       crf.transitions.values(),
                                       crf.start.values(), crf.end.values());
    ViterbiResult got = crf_viterbi(e, crf);
    CHECK(got.tags == want.best_path);
    CHECK(std::abs(got.score - want.best_score) < 1e-9);
    // The returned score equals the path score recomputed independently.
    CHECK(std::abs(crf_path_score(e, got.tags, crf) - got.score) < 1e-9);
    // And never exceeds the log partition.
    CHECK(got.score <= crf_log_partition(e, crf).item() + 1e-9);
  }
}

TEST_CASE("all-equal scores decode to the all-zeros path") {
  nn::ParameterStore store;
  Rng rng(10);
  CrfParams crf = random_crf(store, 4, 3, rng, /*random_chain=*/false);
  Tensor e = Tensor::constant({4, 3}, std::vector<double>(12, 1.0));
  ViterbiResult got = crf_viterbi(e, crf);
  CHECK(got.tags == std::vector<int>{0, 0, 0, 0});
}

TEST_CASE("log partition dominates every single path score") {
  Rng rng(11);
  nn::ParameterStore store;
  CrfParams crf = random_crf(store, 4, 3, rng);
  Tensor e = random_emissions(rng, 4, 3);
  double log_z = crf_log_partition(e, crf).item();
  std::vector<int> path(4, 0);
  while (true) {
    CHECK(crf_path_score(e, path, crf) <= log_z + 1e-12);
    int pos = 3;
    while (pos >= 0 && path[pos] == 2) path[pos--] = 0;
    if (pos < 0) break;
    ++path[pos];
  }
}

TEST_CASE("nll gradients pass finite differences") {
  Rng rng(12);
  nn::ParameterStore store;
  CrfParams crf = random_crf(store, 4, 3, rng);
  Tensor e = random_emissions(rng, 4, 3);
  std::vector<int> gold = {0, 2, 1, 0};
  auto loss_fn = [&] { return crf_nll(e, gold, crf); };
  auto report = nn::grad_check_tensors(
      loss_fn,
      {{"emissions", e},
       {"transitions", crf.transitions},
       {"start", crf.start},
       {"end", crf.end}},
      1e-6);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("emissions apply the projection with dropout off determinism") {
  Rng rng(13);
  nn::ParameterStore store;
  CrfParams crf = make_crf_params(store, 4, 3, rng);
  Tensor reps = Tensor::constant({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});

  // Zero projection gives zero scores.
  for (double& v : crf.projection.values()) v = 0.0;
  Tensor e0 = crf_emissions(reps, crf, 0.3, nn::Mode::eval());
  CHECK(e0.shape() == nn::Shape{2, 3});
  for (double v : e0.values()) CHECK(v == 0.0);

  // Eval mode ignores the dropout rate: two runs agree bit for bit.
  for (double& v : crf.projection.values()) v = rng.uniform(-1.0, 1.0);
  Tensor e1 = crf_emissions(reps, crf, 0.3, nn::Mode::eval());
  Tensor e2 = crf_emissions(reps, crf, 0.3, nn::Mode::eval());
  CHECK(e1.values() == e2.values());
}
