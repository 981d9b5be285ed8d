#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "flat/common.hpp"

namespace flat {

enum class SpanKind { Character, Word };

// A lattice token: a character or a lexicon word, anchored by the positions
// of its first and last characters in the sentence (inclusive).
struct Span {
  int token_id = 0;
  SpanKind kind = SpanKind::Character;
  int head = 0;
  int tail = 0;

  bool operator==(const Span& o) const {
    return token_id == o.token_id && kind == o.kind && head == o.head &&
           tail == o.tail;
  }
};

// Flat form of a lattice: the n character spans first (span i has
// head == tail == i), then the word spans sorted by (head, tail).
struct FlatLattice {
  std::u32string chars;
  std::vector<Span> spans;
  int n_chars = 0;

  int size() const { return static_cast<int>(spans.size()); }
};

struct WordMatch {
  int word_id = 0;
  int head = 0;
  int tail = 0;

  bool operator==(const WordMatch& o) const {
    return word_id == o.word_id && head == o.head && tail == o.tail;
  }
  bool operator<(const WordMatch& o) const {
    if (head != o.head) return head < o.head;
    if (tail != o.tail) return tail < o.tail;
    return word_id < o.word_id;
  }
};

// Prefix tree over lexicon words. Immutable once built; safe to share
// across threads.
class Trie {
 public:
  // Inserts a word under the given id. Words shorter than two characters
  // are dropped (they would duplicate character spans) and duplicates keep
  // their first id. Returns true iff the word was stored.
  bool insert(const std::u32string& word, int word_id);

  bool contains(const std::u32string& word, int* word_id = nullptr) const;

  // Appends every lexicon word starting at chars[start] as
  // (word_id, start, end_inclusive), in increasing length order.
  void matches_at(const std::u32string& chars, int start,
                  std::vector<WordMatch>& out) const;

  int terminal_count() const { return static_cast<int>(words_.size()); }
  const std::u32string& word(int word_id) const;
  const std::unordered_map<int, std::u32string>& words() const {
    return words_;
  }

 private:
  struct TrieNode {
    std::map<char32_t, int> next;
    int word_id = -1;
  };
  std::vector<TrieNode> nodes_{TrieNode{}};
  std::unordered_map<int, std::u32string> words_;
};

struct LexiconDiagnostics {
  int duplicates = 0;
  int dropped_short = 0;
  int kept = 0;
};

// Builds a trie over the distinct words of length >= 2, assigning ids
// 0..k-1 in first-occurrence order. Empty strings are rejected with a
// diagnostic naming the offending entry.
Trie build_trie(const std::vector<std::u32string>& words,
                LexiconDiagnostics* diag = nullptr);

// Lexicon file: UTF-8, one word per line, blank lines ignored, optional
// second column (frequency) ignored.
std::vector<std::u32string> load_lexicon(const std::string& path);

// Every (word_id, i, j) with chars[i..j] equal to a lexicon word, j > i,
// sorted by (head, tail). The per-start trie walk is O(n * max word length).
std::vector<WordMatch> match_words(const std::u32string& chars,
                                   const Trie& trie);

// Flattens a sentence plus its word matches into span form. Character span
// token ids come from char_ids when given, otherwise 0.
FlatLattice flatten(const std::u32string& chars,
                    const std::vector<WordMatch>& matches);
FlatLattice flatten(const std::u32string& chars,
                    const std::vector<WordMatch>& matches,
                    const std::vector<int>& char_ids);

// The recovered lattice: character chain plus one skip-path per word span,
// anchored at the word's head and tail characters.
struct LatticeGraph {
  struct Node {
    SpanKind kind = SpanKind::Character;
    int token_id = 0;
    int head = 0;
    int tail = 0;
  };
  struct Edge {
    int from = 0;
    int to = 0;
  };
  int n_chars = 0;
  std::vector<Node> nodes;  // chars 0..n-1 then word nodes
  std::vector<Edge> edges;  // chain edges then skip-path anchors
};

LatticeGraph recover(const FlatLattice& flat);

// Indices (into flat.spans) of the word spans covering the given character.
std::vector<int> self_matched(const FlatLattice& flat, int char_index);

void validate_flat_lattice(const FlatLattice& flat);

}  // namespace flat
