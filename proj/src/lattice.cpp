#include "flat/lattice.hpp"

#include <algorithm>
#include <fstream>

namespace flat {

bool Trie::insert(const std::u32string& word, int word_id) {
  require(!word.empty(), "Trie::insert: empty word");
  if (word.size() < 2) return false;
  int node = 0;
  for (char32_t c : word) {
    auto it = nodes_[node].next.find(c);
    if (it == nodes_[node].next.end()) {
      nodes_.push_back(TrieNode{});
      int added = static_cast<int>(nodes_.size()) - 1;
      nodes_[node].next.emplace(c, added);
      node = added;
    } else {
      node = it->second;
    }
  }
  if (nodes_[node].word_id >= 0) return false;
  nodes_[node].word_id = word_id;
  words_.emplace(word_id, word);
  return true;
}

bool Trie::contains(const std::u32string& word, int* word_id) const {
  int node = 0;
  for (char32_t c : word) {
    auto it = nodes_[node].next.find(c);
    if (it == nodes_[node].next.end()) return false;
    node = it->second;
  }
  if (nodes_[node].word_id < 0) return false;
  if (word_id) *word_id = nodes_[node].word_id;
  return true;
}

void Trie::matches_at(const std::u32string& chars, int start,
                      std::vector<WordMatch>& out) const {
  int node = 0;
  int n = static_cast<int>(chars.size());
  for (int j = start; j < n; ++j) {
    auto it = nodes_[node].next.find(chars[j]);
    if (it == nodes_[node].next.end()) return;
    node = it->second;
    if (nodes_[node].word_id >= 0)
      out.push_back(WordMatch{nodes_[node].word_id, start, j});
  }
}

const std::u32string& Trie::word(int word_id) const {
  auto it = words_.find(word_id);
  require(it != words_.end(),
          "Trie::word: unknown word id " + std::to_string(word_id));
  return it->second;
}

Trie build_trie(const std::vector<std::u32string>& words,
                LexiconDiagnostics* diag) {
  Trie trie;
  LexiconDiagnostics local;
  int next_id = 0;
  for (size_t i = 0; i < words.size(); ++i) {
    require(!words[i].empty(),
            "build_trie: entry " + std::to_string(i + 1) + " is empty");
    if (words[i].size() < 2) {
      ++local.dropped_short;
      continue;
    }
    if (trie.contains(words[i])) {
      ++local.duplicates;
      continue;
    }
    trie.insert(words[i], next_id++);
    ++local.kept;
  }
  if (diag) *diag = local;
  return trie;
}

std::vector<std::u32string> load_lexicon(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "load_lexicon: cannot open " + path);
  std::vector<std::u32string> words;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_ws(line);
    if (fields.empty()) continue;
    std::u32string word;
    try {
      word = utf8_decode(fields[0]);
    } catch (const std::exception& e) {
      fail("load_lexicon: " + path + " line " + std::to_string(line_no) +
           ": " + e.what());
    }
    words.push_back(word);
  }
  return words;
}

std::vector<WordMatch> match_words(const std::u32string& chars,
                                   const Trie& trie) {
  require(!chars.empty(), "match_words: empty sentence");
  std::vector<WordMatch> out;
  for (int i = 0; i < static_cast<int>(chars.size()); ++i)
    trie.matches_at(chars, i, out);
  std::sort(out.begin(), out.end());
  return out;
}

static FlatLattice flatten_impl(const std::u32string& chars,
                                const std::vector<WordMatch>& matches,
                                const std::vector<int>* char_ids) {
  int n = static_cast<int>(chars.size());
  require(n > 0, "flatten: empty sentence");
  if (char_ids)
    require(static_cast<int>(char_ids->size()) == n,
            "flatten: char_ids length does not match sentence length");

  FlatLattice flat;
  flat.chars = chars;
  flat.n_chars = n;
  flat.spans.reserve(n + matches.size());
  for (int i = 0; i < n; ++i)
    flat.spans.push_back(
        Span{char_ids ? (*char_ids)[i] : 0, SpanKind::Character, i, i});

  std::vector<WordMatch> sorted = matches;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (const WordMatch& m : sorted) {
    if (m.head < 0 || m.tail < m.head || m.tail >= n)
      fail("flatten: word span (" + std::to_string(m.head) + "," +
           std::to_string(m.tail) + ") outside sentence of length " +
           std::to_string(n));
    flat.spans.push_back(Span{m.word_id, SpanKind::Word, m.head, m.tail});
  }
  return flat;
}

FlatLattice flatten(const std::u32string& chars,
                    const std::vector<WordMatch>& matches) {
  return flatten_impl(chars, matches, nullptr);
}

FlatLattice flatten(const std::u32string& chars,
                    const std::vector<WordMatch>& matches,
                    const std::vector<int>& char_ids) {
  return flatten_impl(chars, matches, &char_ids);
}

void validate_flat_lattice(const FlatLattice& flat) {
  int n = flat.n_chars;
  require(n > 0 && static_cast<int>(flat.chars.size()) == n,
          "flat lattice: char count mismatch");
  require(flat.size() >= n, "flat lattice: fewer spans than characters");
  for (int i = 0; i < n; ++i) {
    const Span& s = flat.spans[i];
    require(s.kind == SpanKind::Character && s.head == i && s.tail == i,
            "flat lattice: span " + std::to_string(i) +
                " is not the character at position " + std::to_string(i));
  }
  for (int i = n; i < flat.size(); ++i) {
    const Span& s = flat.spans[i];
    require(s.kind == SpanKind::Word, "flat lattice: trailing non-word span");
    require(0 <= s.head && s.head <= s.tail && s.tail < n,
            "flat lattice: word span outside sentence");
  }
}

LatticeGraph recover(const FlatLattice& flat) {
  int n = flat.n_chars;
  require(n > 0, "recover: empty lattice");
  LatticeGraph g;
  g.n_chars = n;

  // Character chain first: the spans whose head and tail coincide.
  for (int i = 0; i < n; ++i) {
    const Span& s = flat.spans[i];
    require(i < flat.size() && s.kind == SpanKind::Character &&
                s.head == i && s.tail == i,
            "recover: character chain broken at position " +
                std::to_string(i));
    g.nodes.push_back(LatticeGraph::Node{SpanKind::Character, s.token_id, i, i});
    if (i + 1 < n) g.edges.push_back(LatticeGraph::Edge{i, i + 1});
  }

  // Word spans become skip-paths anchored at their head/tail characters.
  for (int k = n; k < flat.size(); ++k) {
    const Span& s = flat.spans[k];
    if (s.head < 0 || s.tail >= n || s.head >= s.tail)
      fail("recover: word span (" + std::to_string(s.head) + "," +
           std::to_string(s.tail) + ") has no matching characters");
    int node_id = static_cast<int>(g.nodes.size());
    g.nodes.push_back(
        LatticeGraph::Node{SpanKind::Word, s.token_id, s.head, s.tail});
    g.edges.push_back(LatticeGraph::Edge{s.head, node_id});
    g.edges.push_back(LatticeGraph::Edge{node_id, s.tail});
  }
  return g;
}

std::vector<int> self_matched(const FlatLattice& flat, int char_index) {
  require(char_index >= 0 && char_index < flat.n_chars,
          "self_matched: char index " + std::to_string(char_index) +
              " out of range");
  std::vector<int> out;
  for (int k = flat.n_chars; k < flat.size(); ++k) {
    const Span& s = flat.spans[k];
    if (s.kind == SpanKind::Word && s.head <= char_index &&
        char_index <= s.tail)
      out.push_back(k);
  }
  return out;
}

}  // namespace flat
