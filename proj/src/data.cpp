#include "flat/data.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>

namespace flat {

TagScheme parse_scheme(const std::string& name) {
  if (name == "BIO" || name == "bio") return TagScheme::BIO;
  if (name == "BMES" || name == "bmes") return TagScheme::BMES;
  fail("unknown tag scheme '" + name + "' (expected BIO or BMES)");
}

std::string scheme_name(TagScheme scheme) {
  return scheme == TagScheme::BIO ? "BIO" : "BMES";
}

namespace {

bool legal_prefix(char p, TagScheme scheme) {
  if (scheme == TagScheme::BIO) return p == 'B' || p == 'I';
  return p == 'B' || p == 'M' || p == 'E' || p == 'S';
}

// Splits "B-PER" into prefix and type; "O" has prefix 'O'.
void parse_tag(const std::string& tag, TagScheme scheme, int line_no,
               char* prefix, std::string* type) {
  if (tag == "O") {
    *prefix = 'O';
    type->clear();
    return;
  }
  std::string where =
      line_no > 0 ? " at line " + std::to_string(line_no) : "";
  require(tag.size() >= 3 && tag[1] == '-',
          "malformed tag '" + tag + "'" + where);
  require(legal_prefix(tag[0], scheme),
          "unknown tag prefix '" + std::string(1, tag[0]) + "' for scheme " +
              scheme_name(scheme) + where);
  *prefix = tag[0];
  *type = tag.substr(2);
}

}  // namespace

Corpus read_corpus(const std::string& path, TagScheme scheme) {
  std::ifstream in(path);
  require(in.good(), "read_corpus: cannot open " + path);
  Corpus corpus;
  corpus.scheme = scheme;
  TaggedSentence current;
  std::string line;
  int line_no = 0;

  auto flush = [&corpus, &current]() {
    if (!current.chars.empty()) {
      corpus.sentences.push_back(std::move(current));
      current = TaggedSentence{};
    }
  };

  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty()) {
      flush();
      continue;
    }
    auto fields = split_ws(t);
    require(fields.size() == 2, "read_corpus: " + path + " line " +
                                    std::to_string(line_no) +
                                    ": expected 'char tag', got " +
                                    std::to_string(fields.size()) + " fields");
    std::u32string sym;
    try {
      sym = utf8_decode(fields[0]);
    } catch (const std::exception& e) {
      fail("read_corpus: " + path + " line " + std::to_string(line_no) + ": " +
           e.what());
    }
    require(sym.size() == 1, "read_corpus: " + path + " line " +
                                 std::to_string(line_no) +
                                 ": token must be a single character");
    char prefix;
    std::string type;
    parse_tag(fields[1], scheme, line_no, &prefix, &type);
    current.chars.push_back(sym[0]);
    current.tags.push_back(fields[1]);
  }
  flush();
  return corpus;
}

void write_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_corpus: cannot write " + path);
  for (size_t s = 0; s < corpus.sentences.size(); ++s) {
    const TaggedSentence& sent = corpus.sentences[s];
    for (size_t i = 0; i < sent.chars.size(); ++i)
      out << utf8_encode(sent.chars[i]) << '\t' << sent.tags[i] << '\n';
    out << '\n';
  }
}

std::vector<Entity> tags_to_entities(const std::vector<std::string>& tags,
                                     TagScheme scheme) {
  std::vector<Entity> out;
  bool open = false;
  std::string open_type;
  int open_start = 0;

  auto close = [&](int end_inclusive) {
    if (open) {
      out.push_back(Entity{open_type, open_start, end_inclusive});
      open = false;
    }
  };

  for (int i = 0; i < static_cast<int>(tags.size()); ++i) {
    char prefix;
    std::string type;
    parse_tag(tags[i], scheme, 0, &prefix, &type);
    if (scheme == TagScheme::BIO) {
      if (prefix == 'O') {
        close(i - 1);
      } else if (prefix == 'B' || !open || type != open_type) {
        // I- after O or after a different type starts a new entity.
        close(i - 1);
        open = true;
        open_type = type;
        open_start = i;
      }
    } else {
      switch (prefix) {
        case 'O':
          close(i - 1);
          break;
        case 'B':
          close(i - 1);
          open = true;
          open_type = type;
          open_start = i;
          break;
        case 'M':
          if (!open || type != open_type) {
            close(i - 1);
            open = true;
            open_type = type;
            open_start = i;
          }
          break;
        case 'E':
          if (open && type == open_type) {
            close(i);
          } else {
            close(i - 1);
            out.push_back(Entity{type, i, i});
          }
          break;
        case 'S':
          close(i - 1);
          out.push_back(Entity{type, i, i});
          break;
      }
    }
  }
  close(static_cast<int>(tags.size()) - 1);
  return out;
}

std::vector<std::string> entities_to_tags(const std::vector<Entity>& entities,
                                          int length, TagScheme scheme) {
  std::vector<std::string> tags(length, "O");
  std::vector<Entity> sorted = entities;
  std::sort(sorted.begin(), sorted.end());
  int prev_end = -1;
  for (const Entity& e : sorted) {
    require(0 <= e.start && e.start <= e.end && e.end < length,
            "entities_to_tags: entity outside sentence");
    require(e.start > prev_end, "entities_to_tags: overlapping entities");
    prev_end = e.end;
    if (scheme == TagScheme::BIO) {
      tags[e.start] = "B-" + e.type;
      for (int i = e.start + 1; i <= e.end; ++i) tags[i] = "I-" + e.type;
    } else {
      if (e.start == e.end) {
        tags[e.start] = "S-" + e.type;
      } else {
        tags[e.start] = "B-" + e.type;
        for (int i = e.start + 1; i < e.end; ++i) tags[i] = "M-" + e.type;
        tags[e.end] = "E-" + e.type;
      }
    }
  }
  return tags;
}

Vocab::Vocab() {
  // Reserved rows; the symbols are placeholders that never match input.
  chars_ = {U'\0', U'\1'};
  char_ids_ = {{U'\0', kPad}, {U'\1', kUnk}};
  words_ = {U"<pad>", U"<unk>"};
  word_ids_ = {{U"<pad>", kPad}, {U"<unk>", kUnk}};
}

int Vocab::add_char(char32_t c) {
  auto it = char_ids_.find(c);
  if (it != char_ids_.end()) return it->second;
  int id = static_cast<int>(chars_.size());
  chars_.push_back(c);
  char_ids_.emplace(c, id);
  return id;
}

int Vocab::add_word(const std::u32string& w) {
  auto it = word_ids_.find(w);
  if (it != word_ids_.end()) return it->second;
  int id = static_cast<int>(words_.size());
  words_.push_back(w);
  word_ids_.emplace(w, id);
  return id;
}

int Vocab::add_tag(const std::string& t) {
  auto it = tag_ids_.find(t);
  if (it != tag_ids_.end()) return it->second;
  int id = static_cast<int>(tags_.size());
  tags_.push_back(t);
  tag_ids_.emplace(t, id);
  return id;
}

int Vocab::char_id(char32_t c) const {
  auto it = char_ids_.find(c);
  return it == char_ids_.end() ? kUnk : it->second;
}

int Vocab::word_id(const std::u32string& w) const {
  auto it = word_ids_.find(w);
  return it == word_ids_.end() ? kUnk : it->second;
}

bool Vocab::has_tag(const std::string& t) const {
  return tag_ids_.count(t) > 0;
}

int Vocab::tag_id(const std::string& t) const {
  auto it = tag_ids_.find(t);
  require(it != tag_ids_.end(), "unknown tag '" + t + "'");
  return it->second;
}

EmbeddingFile load_embeddings(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_embeddings: cannot open " + path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)),
          "load_embeddings: " + path + " is empty");
  auto header = split_ws(line);
  require(header.size() == 2,
          "load_embeddings: " + path + ": header must be 'count dim'");
  int declared = 0, dim = 0;
  try {
    declared = std::stoi(header[0]);
    dim = std::stoi(header[1]);
  } catch (const std::exception&) {
    fail("load_embeddings: " + path + ": header must be 'count dim'");
  }
  require(dim >= 1, "load_embeddings: " + path + ": dim must be positive");

  EmbeddingFile file;
  file.dim = dim;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_ws(line);
    require(static_cast<int>(fields.size()) == dim + 1,
            "load_embeddings: " + path + " line " + std::to_string(line_no) +
                ": expected token plus " + std::to_string(dim) +
                " values, got " + std::to_string(fields.size() - 1));
    std::u32string token = utf8_decode(fields[0]);
    std::vector<double> row(dim);
    for (int k = 0; k < dim; ++k) row[k] = std::stod(fields[k + 1]);
    if (file.rows.count(token)) {
      ++file.duplicates;
    } else {
      file.tokens.push_back(token);
    }
    file.rows[token] = std::move(row);
  }
  (void)declared;
  return file;
}

namespace {

EmbeddingApplyStats apply_rows(
    nn::Tensor table, const EmbeddingFile& file,
    const std::function<int(const std::u32string&)>& lookup) {
  require(table.rank() == 2 && table.dim(1) == file.dim,
          "apply_embeddings: table width " + std::to_string(table.dim(1)) +
              " does not match file dim " + std::to_string(file.dim));
  EmbeddingApplyStats stats;
  std::vector<double>& values = table.values();
  for (const auto& token : file.tokens) {
    int id = lookup(token);
    if (id < 0) {
      ++stats.dropped;
      continue;
    }
    const std::vector<double>& row = file.rows.at(token);
    std::copy(row.begin(), row.end(),
              values.begin() + static_cast<size_t>(id) * file.dim);
    ++stats.loaded;
  }
  return stats;
}

}  // namespace

EmbeddingApplyStats apply_char_embeddings(nn::Tensor table, const Vocab& vocab,
                                          const EmbeddingFile& file) {
  return apply_rows(table, file, [&vocab](const std::u32string& token) {
    if (token.size() != 1) return -1;
    int id = vocab.char_id(token[0]);
    return id == Vocab::kUnk ? -1 : id;
  });
}

EmbeddingApplyStats apply_word_embeddings(nn::Tensor table, const Vocab& vocab,
                                          const EmbeddingFile& file) {
  return apply_rows(table, file, [&vocab](const std::u32string& token) {
    int id = vocab.word_id(token);
    return id == Vocab::kUnk ? -1 : id;
  });
}

Pipeline build_pipeline(const Corpus& train,
                        const std::vector<std::u32string>& lexicon,
                        TagScheme scheme) {
  Pipeline p;
  p.scheme = scheme;
  for (const TaggedSentence& sent : train.sentences) {
    for (char32_t c : sent.chars) p.vocab.add_char(c);
    for (const std::string& t : sent.tags) p.vocab.add_tag(t);
  }
  for (size_t i = 0; i < lexicon.size(); ++i) {
    require(!lexicon[i].empty(),
            "lexicon entry " + std::to_string(i + 1) + " is empty");
    if (lexicon[i].size() < 2) {
      ++p.lexicon_diag.dropped_short;
      continue;
    }
    if (p.trie.contains(lexicon[i])) {
      ++p.lexicon_diag.duplicates;
      continue;
    }
    int id = p.vocab.add_word(lexicon[i]);
    p.trie.insert(lexicon[i], id);
    ++p.lexicon_diag.kept;
  }
  return p;
}

FlatLattice encode_sentence(const Pipeline& pipeline,
                            const std::u32string& chars) {
  std::vector<WordMatch> matches = match_words(chars, pipeline.trie);
  std::vector<int> char_ids(chars.size());
  for (size_t i = 0; i < chars.size(); ++i)
    char_ids[i] = pipeline.vocab.char_id(chars[i]);
  return flatten(chars, matches, char_ids);
}

EncodedCorpus encode_corpus(const Pipeline& pipeline, const Corpus& corpus) {
  EncodedCorpus out;
  for (const TaggedSentence& sent : corpus.sentences) {
    out.lattices.push_back(encode_sentence(pipeline, sent.chars));
    std::vector<int> ids;
    ids.reserve(sent.tags.size());
    for (const std::string& t : sent.tags) ids.push_back(pipeline.vocab.tag_id(t));
    out.tag_ids.push_back(std::move(ids));
    out.entities.push_back(tags_to_entities(sent.tags, corpus.scheme));
  }
  return out;
}

}  // namespace flat
