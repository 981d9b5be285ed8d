#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "flat/grad_check.hpp"
#include "flat/tensor.hpp"

using namespace flat;
using nn::Tensor;

namespace {

Tensor random_var(Rng& rng, const nn::Shape& shape) {
  std::vector<double> v(nn::shape_size(shape));
  for (double& x : v) x = rng.uniform(-2.0, 2.0);
  return Tensor::variable(shape, std::move(v));
}

// Finite-difference check of a scalar-valued builder over named inputs.
double fd_max_err(const std::function<Tensor()>& fn,
                  const std::vector<std::pair<std::string, Tensor>>& inputs,
                  double step = 1e-5) {
  return nn::grad_check_tensors(fn, inputs, 1.0, step).max_rel_err;
}

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  Tensor x = Tensor::constant({1, 3}, {0.0, 0.0, 0.0});
  Tensor y = nn::softmax_rows(x);
  for (int j = 0; j < 3; ++j)
    CHECK(y.values()[j] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and are non-negative") {
  Rng rng(2);
  Tensor x = random_var(rng, {5, 7});
  Tensor y = nn::softmax_rows(x);
  for (int i = 0; i < 5; ++i) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) {
      double p = y.values()[i * 7 + j];
      CHECK(p >= 0.0);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("relu backward gates on the sign of the input") {
  Tensor x = Tensor::variable({4}, {-1.0, -0.5, 0.5, 2.0});
  Tensor loss = nn::sum_all(nn::relu(x));
  nn::backward(loss);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[3] == 1.0);
}

TEST_CASE("matmul gradients match finite differences tightly") {
  Rng rng(3);
  Tensor a = random_var(rng, {3, 4});
  Tensor b = random_var(rng, {4, 2});
  double err = fd_max_err([&] { return nn::sum_all(nn::matmul(a, b)); },
                          {{"a", a}, {"b", b}});
  CHECK(err < 1e-7);
}

TEST_CASE("every op backward matches central differences") {
  Rng rng(5);

  SUBCASE("transpose") {
    Tensor a = random_var(rng, {3, 5});
    CHECK(fd_max_err([&] { return nn::sum_all(nn::transpose(a)); },
                     {{"a", a}}) < 1e-4);
  }
  SUBCASE("add and sub and scale") {
    Tensor a = random_var(rng, {2, 3});
    Tensor b = random_var(rng, {2, 3});
    CHECK(fd_max_err(
              [&] {
                return nn::sum_all(
                    nn::scale(nn::sub(nn::add(a, b), nn::scale(b, 0.5)), 1.7));
              },
              {{"a", a}, {"b", b}}) < 1e-6);
  }
  SUBCASE("add_row add_col") {
    Tensor m = random_var(rng, {3, 4});
    Tensor r = random_var(rng, {4});
    Tensor c = random_var(rng, {3});
    CHECK(fd_max_err(
              [&] {
                return nn::sum_all(nn::add_col(nn::add_row(m, r), c));
              },
              {{"m", m}, {"r", r}, {"c", c}}) < 1e-6);
  }
  SUBCASE("softmax through a weighting") {
    Tensor a = random_var(rng, {3, 4});
    Tensor w = random_var(rng, {4, 2});
    CHECK(fd_max_err(
              [&] {
                return nn::sum_all(nn::matmul(nn::softmax_rows(a), w));
              },
              {{"a", a}, {"w", w}}) < 1e-4);
  }
  SUBCASE("masked softmax") {
    Tensor a = random_var(rng, {3, 4});
    std::vector<uint8_t> blocked(12, 0);
    blocked[1] = blocked[6] = blocked[7] = 1;
    // One fully masked row as well.
    blocked[8] = blocked[9] = blocked[10] = blocked[11] = 1;
    Tensor w = random_var(rng, {4, 2});
    CHECK(fd_max_err(
              [&] {
                return nn::sum_all(
                    nn::matmul(nn::masked_softmax_rows(a, blocked), w));
              },
              {{"a", a}, {"w", w}}) < 1e-4);
  }
  SUBCASE("mask_fill") {
    Tensor a = random_var(rng, {2, 3});
    std::vector<uint8_t> blocked = {0, 1, 0, 0, 0, 1};
    CHECK(fd_max_err(
              [&] {
                return nn::sum_all(nn::relu(nn::mask_fill(a, blocked, -5.0)));
              },
              {{"a", a}}) < 1e-4);
  }
  SUBCASE("layer_norm") {
    Tensor a = random_var(rng, {3, 6});
    Tensor g = random_var(rng, {6});
    Tensor b = random_var(rng, {6});
    Tensor w = random_var(rng, {6, 2});
    CHECK(fd_max_err(
              [&] {
                return nn::sum_all(nn::matmul(nn::layer_norm(a, g, b), w));
              },
              {{"a", a}, {"g", g}, {"b", b}}) < 1e-4);
  }
  SUBCASE("embedding_lookup") {
    Tensor table = random_var(rng, {5, 3});
    std::vector<int> ids = {1, 4, 1, 0};
    Tensor w = random_var(rng, {3, 2});
    CHECK(fd_max_err(
              [&] {
                return nn::sum_all(
                    nn::matmul(nn::embedding_lookup(table, ids), w));
              },
              {{"table", table}}) < 1e-4);
  }
  SUBCASE("logsumexp") {
    Tensor m = random_var(rng, {4, 3});
    Tensor v = random_var(rng, {6});
    CHECK(fd_max_err(
              [&] {
                return nn::add(nn::logsumexp_all(v),
                               nn::sum_all(nn::logsumexp_cols(m)));
              },
              {{"m", m}, {"v", v}}) < 1e-4);
  }
  SUBCASE("concat and slice and reshape") {
    Tensor a = random_var(rng, {2, 3});
    Tensor b = random_var(rng, {2, 3});
    Tensor c = random_var(rng, {1, 6});
    CHECK(fd_max_err(
              [&] {
                Tensor rows = nn::concat_rows({a, b});
                Tensor cols = nn::concat_cols({a, b});
                Tensor cut = nn::slice_rows(rows, 1, 3);
                Tensor flat = nn::reshape(cols, {1, 12});
                return nn::add(nn::sum_all(cut),
                               nn::add(nn::sum_all(flat), nn::sum_all(c)));
              },
              {{"a", a}, {"b", b}, {"c", c}}) < 1e-4);
  }
  SUBCASE("broadcast_row and rel_term") {
    Tensor q = random_var(rng, {3, 2});
    Tensor kr = random_var(rng, {3, 3, 2});
    Tensor v = random_var(rng, {2});
    CHECK(fd_max_err(
              [&] {
                Tensor t2 = nn::rel_term(q, kr);
                Tensor t4 = nn::rel_term(nn::broadcast_row(v, 3), kr);
                return nn::sum_all(nn::add(t2, t4));
              },
              {{"q", q}, {"kr", kr}, {"v", v}}) < 1e-4);
  }
  SUBCASE("pick family") {
    Tensor v = random_var(rng, {5});
    Tensor m = random_var(rng, {4, 3});
    CHECK(fd_max_err(
              [&] {
                Tensor s = nn::pick(v, 2);
                s = nn::add(s, nn::pick_rows_sum(m, {0, 2, 1, 2}));
                s = nn::add(s, nn::pick_pairs_sum(m, {{0, 0}, {3, 2}, {0, 0}}));
                return s;
              },
              {{"v", v}, {"m", m}}) < 1e-4);
  }
}

TEST_CASE("masked softmax zeroes masked entries and fully masked rows") {
  Tensor a = Tensor::constant({2, 3}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
  std::vector<uint8_t> blocked = {0, 1, 0, 1, 1, 1};
  Tensor y = nn::masked_softmax_rows(a, blocked);
  CHECK(y.values()[1] == 0.0);
  double sum = y.values()[0] + y.values()[2];
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  for (int j = 0; j < 3; ++j) CHECK(y.values()[3 + j] == 0.0);
}

TEST_CASE("dropout at p=0 is the identity") {
  Rng rng(7);
  Tensor x = random_var(rng, {4, 4});
  nn::Mode mode = nn::Mode::train(rng);
  Tensor y = nn::dropout(x, 0.0, mode);
  CHECK(y.node() == x.node());
}

TEST_CASE("dropout is unbiased under inverted scaling") {
  Rng rng(8);
  const double p = 0.3;
  const int n = 200000;
  Tensor x = Tensor::constant({n}, std::vector<double>(n, 1.0));
  nn::Mode mode = nn::Mode::train(rng);
  Tensor y = nn::dropout(x, p, mode);
  double mean = 0.0;
  for (double v : y.values()) mean += v;
  mean /= n;
  double sigma = std::sqrt(p / (1.0 - p) / n);
  CHECK(std::abs(mean - 1.0) < 3.0 * sigma);
}

TEST_CASE("dropout in eval mode is the identity") {
  Rng rng(9);
  Tensor x = random_var(rng, {3, 3});
  Tensor y = nn::dropout(x, 0.5, nn::Mode::eval());
  CHECK(y.node() == x.node());
}

TEST_CASE("shape mismatches name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 3});
  try {
    nn::add(a, b);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,3]") != std::string::npos);
  }
  CHECK_THROWS_AS(nn::matmul(a, Tensor::zeros({2, 2})), std::runtime_error);
}

TEST_CASE("grad_check passes on a linear model with squared loss") {
  Rng rng(11);
  nn::ParameterStore params;
  Tensor w = params.create("w", {3, 1}, nn::Init::GlorotUniform, rng);
  Tensor x = Tensor::constant({2, 3}, {1.0, -0.5, 0.25, 0.0, 2.0, -1.0});
  Tensor target = Tensor::constant({2, 1}, {0.5, -0.25});
  auto loss_fn = [&] {
    Tensor diff = nn::sub(nn::matmul(x, w), target);
    // Squared loss via matmul with itself.
    return nn::matmul(nn::transpose(diff), diff);
  };
  auto report = nn::grad_check(loss_fn, params, 1e-9);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-9);
}

TEST_CASE("grad_check reports zero gradient for frozen tensors") {
  Tensor frozen = Tensor::constant({2}, {1.0, 2.0});
  Tensor w = Tensor::variable({2}, {3.0, 4.0});
  Tensor loss = nn::sum_all(nn::add(frozen, w));
  nn::backward(loss);
  CHECK(frozen.node()->grad.empty());
  CHECK(w.grad()[0] == 1.0);
}

TEST_CASE("grad_check aborts on a non-deterministic forward") {
  Rng rng(13);
  nn::ParameterStore params;
  Tensor w = params.create("w", {2, 2}, nn::Init::GlorotUniform, rng);
  auto noisy = [&] {
    return nn::scale(nn::sum_all(w), rng.uniform(0.5, 1.5));
  };
  CHECK_THROWS_AS(nn::grad_check(noisy, params, 1e-4), std::runtime_error);
}

TEST_CASE("checkpoint save/load round-trips through 32-bit floats") {
  Rng rng(15);
  nn::ParameterStore a;
  a.create("w1", {3, 2}, nn::Init::GlorotUniform, rng);
  a.create("b1", {2}, nn::Init::NormalInvSqrt, rng);
  a.create("gain", {4}, nn::Init::Ones, rng);

  std::string path = "test_ckpt.tmp";
  a.save(path);

  Rng rng2(99);
  nn::ParameterStore b;
  b.create("w1", {3, 2}, nn::Init::GlorotUniform, rng2);
  b.create("b1", {2}, nn::Init::NormalInvSqrt, rng2);
  b.create("gain", {4}, nn::Init::Ones, rng2);
  b.load(path);

  for (const std::string& name : a.names()) {
    const auto& va = a.get(name).values();
    const auto& vb = b.get(name).values();
    for (size_t i = 0; i < va.size(); ++i)
      CHECK(static_cast<float>(va[i]) == static_cast<float>(vb[i]));
  }

  // Shape mismatch is rejected.
  Rng rng3(5);
  nn::ParameterStore c;
  c.create("w1", {2, 3}, nn::Init::GlorotUniform, rng3);
  c.create("b1", {2}, nn::Init::Zeros, rng3);
  c.create("gain", {4}, nn::Init::Ones, rng3);
  CHECK_THROWS_AS(c.load(path), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("checksum changes with values and restores with snapshot") {
  Rng rng(17);
  nn::ParameterStore params;
  Tensor w = params.create("w", {4}, nn::Init::NormalInvSqrt, rng);
  uint64_t before = params.checksum();
  auto snap = params.snapshot();
  w.values()[0] += 1.0;
  CHECK(params.checksum() != before);
  params.restore(snap);
  CHECK(params.checksum() == before);
}

TEST_CASE("check_finite flags NaN") {
  Tensor x = Tensor::constant({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(nn::check_finite(x, "x"), std::runtime_error);
}

TEST_CASE("no-grad mode skips graph recording") {
  Tensor w = Tensor::variable({2, 2}, {1.0, 2.0, 3.0, 4.0});
  {
    nn::NoGradGuard guard;
    Tensor y = nn::matmul(w, w);
    CHECK(!y.requires_grad());
  }
  Tensor y = nn::matmul(w, w);
  CHECK(y.requires_grad());
}
