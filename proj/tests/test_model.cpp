#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flat/bench.hpp"
#include "flat/grad_check.hpp"
#include "flat/model.hpp"
#include "test_support.hpp"

using namespace flat;
using nn::Tensor;

namespace {

// Figure-style lattice: 6 characters, 4 word spans.
FlatLattice figure_lattice() {
  std::vector<WordMatch> matches = {{2, 0, 1}, {3, 0, 2}, {4, 2, 5}, {5, 4, 5}};
  return flatten(U"重庆人和药店", matches, {2, 3, 4, 5, 6, 7});
}

ModelConfig tiny_config(bool scale = true) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.ffn_size = 16;
  cfg.n_layers = 1;
  cfg.embed_dropout = 0.0;
  cfg.output_dropout = 0.0;
  cfg.attn_scale = scale;
  return cfg;
}

FlatLattice tiny_lattice() {
  std::vector<WordMatch> matches = {{2, 0, 1}, {3, 2, 3}};
  return flatten(U"abcd", matches, {2, 3, 4, 2});
}

void zero_relative_terms(FlatModel& model) {
  for (int h = 0; h < model.config().n_heads; ++h) {
    std::string hp = "enc.l0.h" + std::to_string(h) + ".";
    for (const std::string& name : {hp + "w_kr", hp + "u", hp + "v"})
      for (double& v : model.params().get(name).values()) v = 0.0;
  }
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_config();
  cfg.n_heads = 3;
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
  cfg = tiny_config();
  cfg.d_model = 7;
  CHECK_THROWS_AS(cfg.validate(), std::runtime_error);
  CHECK(tiny_config().d_head() == 4);
  ModelConfig defaults;
  CHECK(defaults.d_model == 160);
  CHECK(defaults.n_heads == 8);
  CHECK(defaults.d_head() == 20);
  CHECK(defaults.ffn_size == 480);
  CHECK(defaults.n_layers == 1);
  CHECK(defaults.embed_dropout == 0.5);
  CHECK(defaults.output_dropout == 0.3);
}

TEST_CASE("embed with zero tables is zero") {
  FlatModel model(tiny_config(), 10, 8, 4, 1);
  for (double& v : model.params().get("embed.char_table").values()) v = 0.0;
  for (double& v : model.params().get("embed.word_table").values()) v = 0.0;
  Tensor x = model.embed(figure_lattice(), nn::Mode::eval());
  for (double v : x.values()) CHECK(v == 0.0);
}

TEST_CASE("embed of the figure lattice has shape 10 x 160 under defaults") {
  ModelConfig defaults;
  defaults.embed_dropout = 0.0;
  defaults.output_dropout = 0.0;
  FlatModel model(defaults, 10, 8, 4, 1);
  Tensor x = model.embed(figure_lattice(), nn::Mode::eval());
  CHECK(x.shape() == nn::Shape{10, 160});
}

TEST_CASE("embed with identity projection returns table rows") {
  ModelConfig cfg = tiny_config();
  cfg.d_model = 4;
  cfg.n_heads = 2;
  cfg.ffn_size = 8;
  FlatModel model(cfg, 5, 4, 3, 1);
  Tensor table = model.params().get("embed.char_table");
  Tensor proj = model.params().get("embed.char_proj");
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      proj.values()[i * 4 + j] = i == j ? 1.0 : 0.0;

  FlatLattice flat = flatten(U"ab", {}, {1, 3});
  Tensor x = model.embed(flat, nn::Mode::eval());
  for (int j = 0; j < 4; ++j) {
    CHECK(x.values()[j] == table.values()[1 * 4 + j]);
    CHECK(x.values()[4 + j] == table.values()[3 * 4 + j]);
  }
}

TEST_CASE("out-of-vocabulary ids map to the UNK row") {
  FlatModel model(tiny_config(), 5, 4, 3, 1);
  FlatLattice flat = flatten(U"ab", {}, {99, -3});
  Tensor got = model.embed(flat, nn::Mode::eval());
  FlatLattice unk = flatten(U"ab", {}, {1, 1});
  Tensor want = model.embed(unk, nn::Mode::eval());
  CHECK(got.values() == want.values());
}

TEST_CASE("all-zero parameters give uniform attention") {
  FlatModel model(tiny_config(), 10, 8, 4, 1);
  for (const std::string& name : model.params().names())
    for (double& v : model.params().get(name).values()) v = 0.0;
  FlatLattice flat = tiny_lattice();
  Tensor e = model.embed(flat, nn::Mode::eval());
  Tensor r = model.rel_encoding(flat);
  Tensor scores = model.attention_scores(e, r, 0, 0);
  for (double v : scores.values()) CHECK(v == 0.0);
  Tensor w = nn::softmax_rows(scores);
  for (double v : w.values())
    CHECK(v == doctest::Approx(1.0 / flat.size()).epsilon(1e-12));
}

TEST_CASE("attention scores match the four-term naive evaluation") {
  Rng rng(5);
  for (int round = 0; round < 10; ++round) {
    FlatModel model(tiny_config(), 12, 10, 4, 100 + round);
    // u, v start at zero; give them random values so all four terms bite.
    for (int h = 0; h < 2; ++h) {
      std::string hp = "enc.l0.h" + std::to_string(h) + ".";
      for (double& v : model.params().get(hp + "u").values())
        v = rng.uniform(-1.0, 1.0);
      for (double& v : model.params().get(hp + "v").values())
        v = rng.uniform(-1.0, 1.0);
    }
    FlatLattice flat = testing::random_lattice(rng, 6, 4);
    REQUIRE(flat.size() <= 8 + flat.n_chars);
    Tensor e = model.embed(flat, nn::Mode::eval());
    Tensor r = model.rel_encoding(flat);
    testing::Mat e_mat = testing::from_tensor(e);
    for (int h = 0; h < 2; ++h) {
      Tensor got = model.attention_scores(e, r, 0, h);
      testing::Mat want = testing::naive_attention_scores(model, flat, e_mat, 0, h);
      for (int i = 0; i < flat.size(); ++i)
        for (int j = 0; j < flat.size(); ++j)
          CHECK(std::abs(got.values()[i * flat.size() + j] - want.at(i, j)) <
                1e-10);
    }
  }
}

TEST_CASE("with zero relative terms the scores reduce to scaled dot product") {
  FlatModel model(tiny_config(), 12, 10, 4, 7);
  zero_relative_terms(model);
  FlatLattice flat = tiny_lattice();
  Tensor e = model.embed(flat, nn::Mode::eval());
  Tensor r = model.rel_encoding(flat);
  Tensor got = model.attention_scores(e, r, 0, 1);

  testing::Mat e_mat = testing::from_tensor(e);
  testing::Mat q = testing::mat_mul(
      e_mat, testing::from_tensor(model.params().get("enc.l0.h1.w_q")));
  testing::Mat k = testing::mat_mul(
      e_mat, testing::from_tensor(model.params().get("enc.l0.h1.w_ke")));
  int dh = model.config().d_head();
  for (int i = 0; i < flat.size(); ++i)
    for (int j = 0; j < flat.size(); ++j) {
      double acc = 0.0;
      for (int t = 0; t < dh; ++t) acc += q.at(i, t) * k.at(j, t);
      acc /= std::sqrt(static_cast<double>(dh));
      CHECK(std::abs(got.values()[i * flat.size() + j] - acc) < 1e-10);
    }
}

TEST_CASE("msm masks exactly the character to self-matched word entries") {
  ModelConfig cfg = tiny_config();
  cfg.mask.kind = MaskKind::SelfMatched;
  FlatLattice flat = figure_lattice();
  DistanceMatrices dm = distances(flat);
  AttnMask mask = build_mask(cfg.mask, flat, dm, flat.size());

  for (int i = 0; i < flat.size(); ++i)
    for (int j = 0; j < flat.size(); ++j) {
      bool expect = false;
      if (i < flat.n_chars && j >= flat.n_chars) {
        const Span& w = flat.spans[j];
        expect = w.head <= i && i <= w.tail;
      }
      CHECK(mask.at(i, j) == expect);
    }

  // Row of 药 (character 4): the two covering words are blocked.
  std::vector<int> covered = self_matched(flat, 4);
  REQUIRE(covered.size() == 2);
  for (int j : covered) CHECK(mask.at(4, j));
}

TEST_CASE("mld(10) on a six-character sentence masks nothing") {
  ModelConfig cfg = tiny_config();
  cfg.mask.kind = MaskKind::LongDistance;
  cfg.mask.threshold = 10;
  FlatLattice flat = figure_lattice();
  AttnMask mask = build_mask(cfg.mask, flat, distances(flat), flat.size());
  CHECK(!mask.any);
}

TEST_CASE("mld masks both directions beyond the threshold") {
  ModelConfig cfg = tiny_config();
  cfg.mask.kind = MaskKind::LongDistance;
  cfg.mask.threshold = 3;
  FlatLattice flat = flatten(U"abcdefgh", {});
  AttnMask mask = build_mask(cfg.mask, flat, distances(flat), flat.size());
  CHECK(mask.at(0, 7));
  CHECK(mask.at(7, 0));
  CHECK(!mask.at(0, 3));
  CHECK(!mask.at(3, 0));
  CHECK(!mask.at(0, 0));
}

TEST_CASE("a fully masked row yields zero weights and no NaN") {
  FlatModel model(tiny_config(), 10, 8, 4, 3);
  FlatLattice flat = tiny_lattice();
  FlatLattice padded = pad_lattice(flat, flat.size() + 2);
  EncodeTrace trace;
  Tensor reps =
      model.encode(padded, nn::Mode::eval(), flat.size(), &trace);
  for (double v : reps.values()) CHECK(std::isfinite(v));
  REQUIRE(trace.head_weights.size() == 1);
  int s = padded.size();
  for (const Tensor& w : trace.head_weights[0]) {
    for (int i = flat.size(); i < s; ++i)
      for (int j = 0; j < s; ++j) CHECK(w.values()[i * s + j] == 0.0);
    for (int i = 0; i < flat.size(); ++i) {
      double sum = 0.0;
      for (int j = 0; j < s; ++j) {
        if (j >= flat.size()) CHECK(w.values()[i * s + j] == 0.0);
        sum += w.values()[i * s + j];
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("attention rows sum to one over unmasked entries") {
  ModelConfig cfg = tiny_config();
  cfg.mask.kind = MaskKind::SelfMatched;
  FlatModel model(cfg, 10, 8, 4, 9);
  FlatLattice flat = figure_lattice();
  EncodeTrace trace;
  model.encode(flat, nn::Mode::eval(), -1, &trace);
  int s = flat.size();
  AttnMask mask = build_mask(cfg.mask, flat, distances(flat), s);
  for (const Tensor& w : trace.head_weights[0])
    for (int i = 0; i < s; ++i) {
      double sum = 0.0;
      for (int j = 0; j < s; ++j) {
        if (mask.at(i, j)) CHECK(w.values()[i * s + j] == 0.0);
        sum += w.values()[i * s + j];
      }
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("encode returns character rows only and is deterministic in eval") {
  FlatModel model(tiny_config(), 10, 8, 4, 11);
  FlatLattice flat = figure_lattice();
  Tensor a = model.encode(flat, nn::Mode::eval());
  Tensor b = model.encode(flat, nn::Mode::eval());
  CHECK(a.shape() == nn::Shape{6, 8});
  CHECK(a.values() == b.values());
}

TEST_CASE("lexicon words that match nothing leave the output unchanged") {
  FlatModel model(tiny_config(), 20, 20, 4, 13);
  std::u32string chars = U"abcab";
  std::vector<std::u32string> lexicon = {U"ab", U"cab"};
  std::vector<std::u32string> extra = {U"zz", U"qq", U"xyz"};

  auto encode_with = [&](const std::vector<std::u32string>& words) {
    Trie trie = build_trie(words);
    FlatLattice flat = flatten(chars, match_words(chars, trie),
                               {2, 3, 4, 2, 3});
    return model.encode(flat, nn::Mode::eval());
  };
  std::vector<std::u32string> both = lexicon;
  both.insert(both.end(), extra.begin(), extra.end());
  CHECK(encode_with(lexicon).values() == encode_with(both).values());
}

TEST_CASE("word span order does not affect character representations") {
  FlatModel model(tiny_config(), 10, 8, 4, 17);
  FlatLattice flat = figure_lattice();
  FlatLattice permuted = flat;
  std::swap(permuted.spans[6], permuted.spans[9]);
  std::swap(permuted.spans[7], permuted.spans[8]);

  Tensor a = model.encode(flat, nn::Mode::eval());
  Tensor b = model.encode(permuted, nn::Mode::eval());
  REQUIRE(a.size() == b.size());
  for (int k = 0; k < a.size(); ++k)
    CHECK(std::abs(a.values()[k] - b.values()[k]) < 1e-10);
}

TEST_CASE("encode is invariant under a global position shift") {
  FlatModel model(tiny_config(), 10, 8, 4, 19);
  FlatLattice flat = figure_lattice();
  Tensor base = model.encode(flat, nn::Mode::eval());
  FlatLattice shifted = flat;
  for (Span& s : shifted.spans) {
    s.head += 7;
    s.tail += 7;
  }
  // distances() is all that reads positions, so this is bit-exact.
  Tensor moved = model.encode(shifted, nn::Mode::eval());
  CHECK(base.values() == moved.values());
}

TEST_CASE("with relative terms zeroed encode matches the vanilla oracle") {
  for (bool scale : {true, false}) {
    ModelConfig cfg = tiny_config(scale);
    FlatModel model(cfg, 10, 8, 4, 23);
    zero_relative_terms(model);
    FlatLattice flat = figure_lattice();
    Tensor got = model.encode(flat, nn::Mode::eval());
    testing::Mat want = testing::oracle_vanilla_encode(model, flat);
    REQUIRE(got.size() == static_cast<int>(want.v.size()));
    for (int k = 0; k < got.size(); ++k)
      CHECK(std::abs(got.values()[k] - want.v[k]) < 1e-10);
  }
}

TEST_CASE("end-to-end gradients pass finite differences on the tiny model") {
  for (bool scale : {true, false}) {
    FlatModel model(tiny_config(scale), 5, 4, 4, 29);
    FlatLattice flat = tiny_lattice();
    std::vector<int> gold = {0, 1, 2, 3};
    auto loss_fn = [&] {
      return model.nll(flat, gold, nn::Mode::eval());
    };
    auto report = nn::grad_check(loss_fn, model.params(), 1e-4);
    if (!report.pass) {
      for (const auto& entry : report.entries)
        if (entry.max_rel_err >= 1e-4)
          MESSAGE(entry.name << " rel err " << entry.max_rel_err);
    }
    CHECK(report.pass);
  }
}

TEST_CASE("batched predictions equal unbatched predictions exactly") {
  Rng rng(31);
  FlatModel model(tiny_config(), 12, 12, 4, 37);
  std::vector<FlatLattice> sentences;
  for (int i = 0; i < 13; ++i) sentences.push_back(testing::random_lattice(rng, 10, 5));

  std::vector<std::vector<int>> unbatched;
  for (const FlatLattice& flat : sentences)
    unbatched.push_back(model.predict(flat));

  for (int batch_size : {1, 4, 16}) {
    for (int workers : {1, 3}) {
      auto batched = predict_batch(model, sentences, batch_size, workers);
      CHECK(batched == unbatched);
    }
  }
}

TEST_CASE("padding spans leave real predictions untouched") {
  FlatModel model(tiny_config(), 12, 12, 4, 41);
  FlatLattice flat = tiny_lattice();
  std::vector<int> want = model.predict(flat);
  for (int extra : {1, 3, 8}) {
    FlatLattice padded = pad_lattice(flat, flat.size() + extra);
    CHECK(model.predict(padded, flat.size()) == want);
  }
}
