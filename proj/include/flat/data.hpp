#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "flat/common.hpp"
#include "flat/lattice.hpp"
#include "flat/tensor.hpp"

namespace flat {

enum class TagScheme { BIO, BMES };

TagScheme parse_scheme(const std::string& name);
std::string scheme_name(TagScheme scheme);

struct TaggedSentence {
  std::u32string chars;
  std::vector<std::string> tags;
};

struct Corpus {
  std::vector<TaggedSentence> sentences;
  TagScheme scheme = TagScheme::BMES;
};

// CoNLL column format: one `char<SPACE or TAB>tag` per line, blank line
// between sentences. Malformed lines are reported with their line number.
Corpus read_corpus(const std::string& path, TagScheme scheme);
void write_corpus(const Corpus& corpus, const std::string& path);

struct Entity {
  std::string type;
  int start = 0;
  int end = 0;  // inclusive

  bool operator==(const Entity& o) const {
    return type == o.type && start == o.start && end == o.end;
  }
  bool operator<(const Entity& o) const {
    if (start != o.start) return start < o.start;
    if (end != o.end) return end < o.end;
    return type < o.type;
  }
};

// Lenient decode: an illegal continuation closes the open entity and
// starts a new one, so metrics stay defined on raw model output.
std::vector<Entity> tags_to_entities(const std::vector<std::string>& tags,
                                     TagScheme scheme);
// Inverse of tags_to_entities on legal sequences. Entities must not overlap.
std::vector<std::string> entities_to_tags(const std::vector<Entity>& entities,
                                          int length, TagScheme scheme);

// Bijective symbol<->id maps with PAD=0 and UNK=1 reserved for chars and
// words. Id assignment is deterministic given insertion order.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocab();

  int add_char(char32_t c);
  int add_word(const std::u32string& w);
  int add_tag(const std::string& t);

  int char_id(char32_t c) const;            // UNK when absent
  int word_id(const std::u32string& w) const;
  bool has_tag(const std::string& t) const;
  int tag_id(const std::string& t) const;   // throws when absent

  int n_chars() const { return static_cast<int>(chars_.size()); }
  int n_words() const { return static_cast<int>(words_.size()); }
  int n_tags() const { return static_cast<int>(tags_.size()); }

  char32_t char_symbol(int id) const { return chars_.at(id); }
  const std::u32string& word_symbol(int id) const { return words_.at(id); }
  const std::string& tag_name(int id) const { return tags_.at(id); }

 private:
  std::vector<char32_t> chars_;
  std::vector<std::u32string> words_;
  std::vector<std::string> tags_;
  std::unordered_map<char32_t, int> char_ids_;
  std::unordered_map<std::u32string, int> word_ids_;
  std::unordered_map<std::string, int> tag_ids_;
};

// word2vec text format: header `count dim`, then `token v1 ... v_dim`.
struct EmbeddingFile {
  int dim = 0;
  std::vector<std::u32string> tokens;  // last occurrence wins on duplicates
  std::unordered_map<std::u32string, std::vector<double>> rows;
  int duplicates = 0;
};

EmbeddingFile load_embeddings(const std::string& path);

struct EmbeddingApplyStats {
  int loaded = 0;
  int dropped = 0;  // file tokens absent from the vocabulary
};

// Copies matching rows into a char or word table; vocabulary entries absent
// from the file keep their random initialization.
EmbeddingApplyStats apply_char_embeddings(nn::Tensor table, const Vocab& vocab,
                                          const EmbeddingFile& file);
EmbeddingApplyStats apply_word_embeddings(nn::Tensor table, const Vocab& vocab,
                                          const EmbeddingFile& file);

// Vocabulary + trie + scheme bundle used to turn sentences into lattices.
struct Pipeline {
  Vocab vocab;
  Trie trie;
  TagScheme scheme = TagScheme::BMES;
  LexiconDiagnostics lexicon_diag;
};

Pipeline build_pipeline(const Corpus& train,
                        const std::vector<std::u32string>& lexicon,
                        TagScheme scheme);

FlatLattice encode_sentence(const Pipeline& pipeline,
                            const std::u32string& chars);

struct EncodedCorpus {
  std::vector<FlatLattice> lattices;
  std::vector<std::vector<int>> tag_ids;
  std::vector<std::vector<Entity>> entities;
};

// Requires every tag in the corpus to be present in the pipeline vocab.
EncodedCorpus encode_corpus(const Pipeline& pipeline, const Corpus& corpus);

}  // namespace flat
