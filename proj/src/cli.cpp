#include "flat/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

namespace flat {

using nlohmann::json;

// ---- options ----

void Options::load_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "config: cannot open " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    require(eq != std::string::npos, "config: " + path + " line " +
                                         std::to_string(line_no) +
                                         ": expected 'key = value'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    require(!key.empty(), "config: " + path + " line " +
                              std::to_string(line_no) + ": empty key");
    file_[key] = value;
  }
}

void Options::set_flag(const std::string& key, const std::string& value) {
  flags_[key] = value;
}

std::string Options::env_name(const std::string& key) {
  std::string name = "FLAT_";
  for (char c : key)
    name.push_back(c == '.' || c == '-' ? '_'
                                        : static_cast<char>(std::toupper(c)));
  return name;
}

std::optional<std::string> Options::raw(const std::string& key) const {
  auto it = flags_.find(key);
  if (it != flags_.end()) return it->second;
  if (const char* env = std::getenv(env_name(key).c_str())) return env;
  it = file_.find(key);
  if (it != file_.end()) return it->second;
  return std::nullopt;
}

std::string Options::get(const std::string& key,
                         const std::string& fallback) const {
  return raw(key).value_or(fallback);
}

int Options::get_int(const std::string& key, int fallback) const {
  auto v = raw(key);
  if (!v) return fallback;
  try {
    return std::stoi(*v);
  } catch (const std::exception&) {
    fail("option '" + key + "': expected integer, got '" + *v + "'");
  }
}

double Options::get_double(const std::string& key, double fallback) const {
  auto v = raw(key);
  if (!v) return fallback;
  try {
    return std::stod(*v);
  } catch (const std::exception&) {
    fail("option '" + key + "': expected number, got '" + *v + "'");
  }
}

bool Options::get_bool(const std::string& key, bool fallback) const {
  auto v = raw(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  fail("option '" + key + "': expected boolean, got '" + *v + "'");
}

uint64_t Options::get_u64(const std::string& key, uint64_t fallback) const {
  auto v = raw(key);
  if (!v) return fallback;
  try {
    return std::stoull(*v);
  } catch (const std::exception&) {
    fail("option '" + key + "': expected integer, got '" + *v + "'");
  }
}

namespace {

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "none") return MaskKind::None;
  if (name == "msm") return MaskKind::SelfMatched;
  if (name == "mld") return MaskKind::LongDistance;
  fail("unknown mask '" + name + "' (expected none, msm or mld)");
}

std::string mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::None: return "none";
    case MaskKind::SelfMatched: return "msm";
    case MaskKind::LongDistance: return "mld";
  }
  return "none";
}

MldDistance parse_mld_distance(const std::string& name) {
  if (name == "hh") return MldDistance::HeadHead;
  if (name == "tt") return MldDistance::TailTail;
  if (name == "min") return MldDistance::MinOfFour;
  fail("unknown mld_distance '" + name + "' (expected hh, tt or min)");
}

std::string mld_distance_name(MldDistance d) {
  switch (d) {
    case MldDistance::HeadHead: return "hh";
    case MldDistance::TailTail: return "tt";
    case MldDistance::MinOfFour: return "min";
  }
  return "hh";
}

}  // namespace

ModelConfig model_config_from_options(const Options& opts) {
  ModelConfig base;
  ModelConfig c;
  c.d_model = opts.get_int("d_model", base.d_model);
  c.n_heads = opts.get_int("n_heads", base.n_heads);
  c.ffn_size = opts.get_int("ffn_size", base.ffn_size);
  c.n_layers = opts.get_int("n_layers", base.n_layers);
  c.embed_dropout = opts.get_double("embed_dropout", base.embed_dropout);
  c.output_dropout = opts.get_double("output_dropout", base.output_dropout);
  c.attn_scale = opts.get_bool("attn_scale", base.attn_scale);
  c.mask.kind = parse_mask_kind(opts.get("mask", "none"));
  c.mask.threshold = opts.get_int("mld_threshold", base.mask.threshold);
  c.mask.distance = parse_mld_distance(opts.get("mld_distance", "hh"));
  c.d_char = opts.get_int("d_char", base.d_char);
  c.d_word = opts.get_int("d_word", base.d_word);
  return c;
}

TrainConfig train_config_from_options(const Options& opts) {
  TrainConfig base;
  TrainConfig c;
  c.batch_size = opts.get_int("batch_size", base.batch_size);
  c.lr = opts.get_double("lr", base.lr);
  c.lr_decay = opts.get_double("lr_decay", base.lr_decay);
  c.momentum = opts.get_double("momentum", base.momentum);
  c.warmup_epochs = opts.get_int("warmup_epochs", base.warmup_epochs);
  c.max_epochs = opts.get_int("max_epochs", base.max_epochs);
  c.seed = opts.get_u64("seed", base.seed);
  c.grad_clip = opts.get_double("grad_clip", base.grad_clip);
  return c;
}

// ---- model persistence ----

void save_model_meta(const std::string& path, const ModelConfig& config,
                     const Pipeline& pipeline) {
  json meta;
  meta["format"] = "flat-meta";
  meta["version"] = 1;
  json cfg;
  cfg["d_model"] = config.d_model;
  cfg["n_heads"] = config.n_heads;
  cfg["ffn_size"] = config.ffn_size;
  cfg["n_layers"] = config.n_layers;
  cfg["embed_dropout"] = config.embed_dropout;
  cfg["output_dropout"] = config.output_dropout;
  cfg["attn_scale"] = config.attn_scale;
  cfg["mask"] = mask_kind_name(config.mask.kind);
  cfg["mld_threshold"] = config.mask.threshold;
  cfg["mld_distance"] = mld_distance_name(config.mask.distance);
  cfg["d_char"] = config.d_char;
  cfg["d_word"] = config.d_word;
  meta["config"] = cfg;
  meta["scheme"] = scheme_name(pipeline.scheme);

  const Vocab& vocab = pipeline.vocab;
  json chars = json::array();
  for (int i = Vocab::kUnk + 1; i < vocab.n_chars(); ++i)
    chars.push_back(utf8_encode(vocab.char_symbol(i)));
  json words = json::array();
  for (int i = Vocab::kUnk + 1; i < vocab.n_words(); ++i)
    words.push_back(utf8_encode(vocab.word_symbol(i)));
  json tags = json::array();
  for (int i = 0; i < vocab.n_tags(); ++i) tags.push_back(vocab.tag_name(i));
  meta["chars"] = chars;
  meta["words"] = words;
  meta["tags"] = tags;

  std::ofstream out(path);
  require(out.good(), "save_model_meta: cannot write " + path);
  out << meta.dump(1) << "\n";
  require(out.good(), "save_model_meta: write failed for " + path);
}

LoadedModel load_model(const std::string& prefix) {
  std::string meta_path = prefix + ".meta";
  std::ifstream in(meta_path);
  require(in.good(), "load_model: cannot open " + meta_path);
  json meta;
  try {
    in >> meta;
  } catch (const std::exception& e) {
    fail("load_model: " + meta_path + ": " + e.what());
  }
  require(meta.value("format", "") == "flat-meta",
          "load_model: " + meta_path + " is not a model meta file");

  LoadedModel loaded;
  const json& cfg = meta.at("config");
  loaded.config.d_model = cfg.at("d_model").get<int>();
  loaded.config.n_heads = cfg.at("n_heads").get<int>();
  loaded.config.ffn_size = cfg.at("ffn_size").get<int>();
  loaded.config.n_layers = cfg.at("n_layers").get<int>();
  loaded.config.embed_dropout = cfg.at("embed_dropout").get<double>();
  loaded.config.output_dropout = cfg.at("output_dropout").get<double>();
  loaded.config.attn_scale = cfg.at("attn_scale").get<bool>();
  loaded.config.mask.kind = parse_mask_kind(cfg.at("mask").get<std::string>());
  loaded.config.mask.threshold = cfg.at("mld_threshold").get<int>();
  loaded.config.mask.distance =
      parse_mld_distance(cfg.at("mld_distance").get<std::string>());
  loaded.config.d_char = cfg.at("d_char").get<int>();
  loaded.config.d_word = cfg.at("d_word").get<int>();

  loaded.pipeline.scheme = parse_scheme(meta.at("scheme").get<std::string>());
  Vocab& vocab = loaded.pipeline.vocab;
  for (const auto& c : meta.at("chars")) {
    std::u32string sym = utf8_decode(c.get<std::string>());
    require(sym.size() == 1, "load_model: bad char entry in meta");
    vocab.add_char(sym[0]);
  }
  for (const auto& w : meta.at("words")) {
    std::u32string word = utf8_decode(w.get<std::string>());
    int id = vocab.add_word(word);
    loaded.pipeline.trie.insert(word, id);
  }
  for (const auto& t : meta.at("tags")) vocab.add_tag(t.get<std::string>());

  loaded.model = std::make_unique<FlatModel>(
      loaded.config, vocab.n_chars(), vocab.n_words(), vocab.n_tags(),
      /*seed=*/0);
  loaded.model->params().load(prefix + ".ckpt");
  return loaded;
}

// ---- subcommands ----

namespace {

// Declares a string-valued CLI option whose presence overrides config/env.
void option_into(CLI::App* cmd, Options& opts, const std::string& flag,
                 const std::string& key, const std::string& description) {
  auto value = std::make_shared<std::string>();
  cmd->add_option_function<std::string>(
         flag,
         [&opts, key](const std::string& v) { opts.set_flag(key, v); },
         description)
      ->expected(1);
  (void)value;
}

std::vector<std::u32string> read_sentences(std::istream& in) {
  std::vector<std::u32string> sentences;
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    if (t.empty()) continue;
    sentences.push_back(utf8_decode(t));
  }
  return sentences;
}

std::unique_ptr<std::istream> open_input(const std::string& path,
                                         std::istream& stdin_stream,
                                         std::istream** stream) {
  if (path == "-" || path.empty()) {
    *stream = &stdin_stream;
    return nullptr;
  }
  auto file = std::make_unique<std::ifstream>(path);
  require(file->good(), "cannot open input file " + path);
  *stream = file.get();
  return file;
}

int cmd_lattice(const Options& opts, std::istream& in, std::ostream& out) {
  std::string lexicon_path = opts.get("lexicon", "");
  require(!lexicon_path.empty(), "lattice: --lexicon is required");
  LexiconDiagnostics diag;
  Trie trie = build_trie(load_lexicon(lexicon_path), &diag);

  std::istream* source = nullptr;
  auto holder = open_input(opts.get("input", "-"), in, &source);
  bool first = true;
  for (const std::u32string& sent : read_sentences(*source)) {
    if (!first) out << "\n";
    first = false;
    FlatLattice flat = flatten(sent, match_words(sent, trie));
    for (int i = 0; i < flat.size(); ++i) {
      const Span& s = flat.spans[i];
      std::string token = s.kind == SpanKind::Character
                              ? utf8_encode(flat.chars[s.head])
                              : utf8_encode(trie.word(s.token_id));
      out << token << '\t' << s.head << '\t' << s.tail << "\n";
    }
  }
  return 0;
}

int cmd_train(const Options& opts, std::ostream& out, std::ostream& err) {
  std::string train_path = opts.get("train", "");
  std::string out_prefix = opts.get("out", "");
  std::string lexicon_path = opts.get("lexicon", "");
  require(!train_path.empty(), "train: --train is required");
  require(!out_prefix.empty(), "train: --out is required");
  require(!lexicon_path.empty(), "train: --lexicon is required");

  TagScheme scheme = parse_scheme(opts.get("scheme", "BMES"));
  Corpus train_corpus = read_corpus(train_path, scheme);
  require(!train_corpus.sentences.empty(),
          "train: " + train_path + " contains no sentences");

  Corpus dev_corpus;
  bool has_dev = false;
  std::string dev_path = opts.get("dev", "");
  if (!dev_path.empty()) {
    dev_corpus = read_corpus(dev_path, scheme);
    has_dev = true;
  }

  ModelConfig model_config = model_config_from_options(opts);
  TrainConfig train_config = train_config_from_options(opts);

  EmbeddingFile char_emb, word_emb;
  bool has_char_emb = false, has_word_emb = false;
  std::string char_emb_path = opts.get("char_embeddings", "");
  if (!char_emb_path.empty()) {
    char_emb = load_embeddings(char_emb_path);
    has_char_emb = true;
    if (model_config.d_char == 0) model_config.d_char = char_emb.dim;
    if (char_emb.duplicates)
      err << "warning: " << char_emb_path << ": " << char_emb.duplicates
          << " duplicate tokens, last occurrence wins\n";
  }
  std::string word_emb_path = opts.get("word_embeddings", "");
  if (!word_emb_path.empty()) {
    word_emb = load_embeddings(word_emb_path);
    has_word_emb = true;
    if (model_config.d_word == 0) model_config.d_word = word_emb.dim;
    if (word_emb.duplicates)
      err << "warning: " << word_emb_path << ": " << word_emb.duplicates
          << " duplicate tokens, last occurrence wins\n";
  }

  Pipeline pipeline =
      build_pipeline(train_corpus, load_lexicon(lexicon_path), scheme);
  if (pipeline.lexicon_diag.duplicates || pipeline.lexicon_diag.dropped_short)
    err << "lexicon: kept " << pipeline.lexicon_diag.kept << " words, dropped "
        << pipeline.lexicon_diag.dropped_short << " single-character, "
        << pipeline.lexicon_diag.duplicates << " duplicates\n";

  FlatModel model(model_config, pipeline.vocab.n_chars(),
                  pipeline.vocab.n_words(), pipeline.vocab.n_tags(),
                  train_config.seed);
  if (has_char_emb) {
    auto stats = apply_char_embeddings(model.params().get("embed.char_table"),
                                       pipeline.vocab, char_emb);
    err << "char embeddings: loaded " << stats.loaded << ", dropped "
        << stats.dropped << " out-of-vocabulary tokens\n";
  }
  if (has_word_emb) {
    auto stats = apply_word_embeddings(model.params().get("embed.word_table"),
                                       pipeline.vocab, word_emb);
    err << "word embeddings: loaded " << stats.loaded << ", dropped "
        << stats.dropped << " out-of-vocabulary tokens\n";
  }

  EncodedCorpus train_enc = encode_corpus(pipeline, train_corpus);
  EncodedCorpus dev_enc;
  if (has_dev) dev_enc = encode_corpus(pipeline, dev_corpus);

  save_model_meta(out_prefix + ".meta", model_config, pipeline);
  TrainResult result = train_model(
      model, train_enc, has_dev ? &dev_enc : nullptr, pipeline.vocab, scheme,
      train_config, out_prefix + ".ckpt", &out);

  if (result.diverged) {
    err << "training diverged; last good parameters were kept\n";
    return 2;
  }
  out << "saved " << out_prefix << ".ckpt (best epoch " << result.best_epoch
      << ")\n";
  return 0;
}

int cmd_eval(const Options& opts, std::ostream& out) {
  std::string model_prefix = opts.get("model", "");
  std::string corpus_path = opts.get("corpus", "");
  require(!model_prefix.empty(), "eval: --model is required");
  require(!corpus_path.empty(), "eval: --corpus is required");

  LoadedModel loaded = load_model(model_prefix);
  Corpus corpus = read_corpus(corpus_path, loaded.pipeline.scheme);

  EntityCounts counts;
  for (const TaggedSentence& sent : corpus.sentences) {
    FlatLattice flat = encode_sentence(loaded.pipeline, sent.chars);
    std::vector<int> pred = loaded.model->predict(flat);
    std::vector<std::string> tag_names;
    tag_names.reserve(pred.size());
    for (int id : pred) tag_names.push_back(loaded.pipeline.vocab.tag_name(id));
    counts.add(tags_to_entities(sent.tags, loaded.pipeline.scheme),
               tags_to_entities(tag_names, loaded.pipeline.scheme));
  }

  Prf exact = counts.exact();
  Prf span = counts.span();
  out << std::fixed << std::setprecision(6);
  out << "precision " << exact.precision << "\n";
  out << "recall " << exact.recall << "\n";
  out << "f1 " << exact.f1 << "\n";
  out << "span_f " << span.f1 << "\n";
  out << "type_acc " << counts.type_acc() << "\n";
  return 0;
}

int cmd_predict(const Options& opts, std::istream& in, std::ostream& out) {
  std::string model_prefix = opts.get("model", "");
  require(!model_prefix.empty(), "predict: --model is required");
  LoadedModel loaded = load_model(model_prefix);

  std::istream* source = nullptr;
  auto holder = open_input(opts.get("input", "-"), in, &source);
  bool first = true;
  for (const std::u32string& sent : read_sentences(*source)) {
    if (!first) out << "\n";
    first = false;
    FlatLattice flat = encode_sentence(loaded.pipeline, sent);
    std::vector<int> pred = loaded.model->predict(flat);
    for (size_t i = 0; i < sent.size(); ++i)
      out << utf8_encode(sent[i]) << '\t'
          << loaded.pipeline.vocab.tag_name(pred[i]) << "\n";
  }
  return 0;
}

int cmd_bench(const Options& opts, std::ostream& out) {
  std::string model_prefix = opts.get("model", "");
  std::string corpus_path = opts.get("corpus", "");
  require(!model_prefix.empty(), "bench: --model is required");
  require(!corpus_path.empty(), "bench: --corpus is required");

  LoadedModel loaded = load_model(model_prefix);
  Corpus corpus = read_corpus(corpus_path, loaded.pipeline.scheme);
  std::vector<FlatLattice> sentences;
  for (const TaggedSentence& sent : corpus.sentences)
    sentences.push_back(encode_sentence(loaded.pipeline, sent.chars));

  BenchConfig config;
  config.workers =
      std::max(1u, std::thread::hardware_concurrency());
  config.trials = opts.get_int("trials", config.trials);
  config.workers = opts.get_int("workers", config.workers);
  config.warmup = opts.get_int("warmup", config.warmup);
  std::string sizes = opts.get("batch_sizes", "1,16");
  config.batch_sizes.clear();
  std::istringstream parse(sizes);
  std::string item;
  while (std::getline(parse, item, ','))
    config.batch_sizes.push_back(std::stoi(trim(item)));
  require(!config.batch_sizes.empty(), "bench: empty batch_sizes");

  BenchReport report = run_bench(*loaded.model, sentences, config);
  json rows = json::array();
  for (const BenchRow& row : report.rows)
    rows.push_back({{"batch_size", row.batch_size},
                    {"sentences_per_sec", row.sentences_per_sec},
                    {"median_seconds", row.median_seconds}});
  json j = {{"workers", report.workers},
            {"sentences", report.sentences},
            {"trials", report.trials},
            {"rows", rows},
            {"speedup_16_vs_1", report.speedup_16_vs_1},
            {"reference_ratio", report.reference_ratio},
            {"checksum_ok", report.checksum_ok}};
  out << j.dump() << "\n";
  return report.checksum_ok ? 0 : 3;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::istream& in,
            std::ostream& out, std::ostream& err) {
  CLI::App app{"flat: lexicon-lattice sequence labeling engine"};
  app.require_subcommand(1);

  Options opts;
  std::string config_path;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path,
                    "key = value config file; flags override it");
  };

  CLI::App* train = app.add_subcommand("train", "train a model");
  add_config(train);
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"--train", "train"},
           {"--dev", "dev"},
           {"--lexicon", "lexicon"},
           {"--out", "out"},
           {"--scheme", "scheme"},
           {"--char-embeddings", "char_embeddings"},
           {"--word-embeddings", "word_embeddings"},
           {"--d-model", "d_model"},
           {"--n-heads", "n_heads"},
           {"--ffn-size", "ffn_size"},
           {"--n-layers", "n_layers"},
           {"--embed-dropout", "embed_dropout"},
           {"--output-dropout", "output_dropout"},
           {"--attn-scale", "attn_scale"},
           {"--mask", "mask"},
           {"--mld-threshold", "mld_threshold"},
           {"--mld-distance", "mld_distance"},
           {"--d-char", "d_char"},
           {"--d-word", "d_word"},
           {"--batch-size", "batch_size"},
           {"--lr", "lr"},
           {"--lr-decay", "lr_decay"},
           {"--momentum", "momentum"},
           {"--warmup-epochs", "warmup_epochs"},
           {"--max-epochs", "max_epochs"},
           {"--seed", "seed"},
           {"--grad-clip", "grad_clip"}})
    option_into(train, opts, flag, key, "overrides config key " + key);

  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint");
  add_config(eval);
  option_into(eval, opts, "--model", "model", "model prefix from train --out");
  option_into(eval, opts, "--corpus", "corpus", "corpus to score");

  CLI::App* predict = app.add_subcommand("predict", "tag raw sentences");
  add_config(predict);
  option_into(predict, opts, "--model", "model", "model prefix");
  option_into(predict, opts, "--input", "input",
              "sentences, one per line; - for stdin");

  CLI::App* lattice = app.add_subcommand("lattice", "dump a flat lattice");
  add_config(lattice);
  option_into(lattice, opts, "--lexicon", "lexicon", "lexicon word list");
  option_into(lattice, opts, "--input", "input",
              "sentences, one per line; - for stdin");

  CLI::App* bench = app.add_subcommand("bench", "inference throughput");
  add_config(bench);
  option_into(bench, opts, "--model", "model", "model prefix");
  option_into(bench, opts, "--corpus", "corpus", "sentences to time");
  option_into(bench, opts, "--batch-sizes", "batch_sizes",
              "comma-separated batch sizes");
  option_into(bench, opts, "--trials", "trials", "timed trials per size");
  option_into(bench, opts, "--workers", "workers", "inference worker threads");
  option_into(bench, opts, "--warmup", "warmup", "untimed warmup runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (!config_path.empty()) opts.load_file(config_path);
    if (train->parsed()) return cmd_train(opts, out, err);
    if (eval->parsed()) return cmd_eval(opts, out);
    if (predict->parsed()) return cmd_predict(opts, in, out);
    if (lattice->parsed()) return cmd_lattice(opts, in, out);
    if (bench->parsed()) return cmd_bench(opts, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  err << "no subcommand given\n" << app.help();
  return 1;
}

}  // namespace flat
