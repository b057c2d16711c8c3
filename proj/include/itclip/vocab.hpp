// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace itclip {

// Word-level vocabulary with three reserved tokens. Serialized as one word
// per line (UTF-8); line index equals id minus the reserved-token count.
class Vocabulary {
 public:
  static constexpr int kStartId = 0;
  static constexpr int kPadId = 1;
  static constexpr int kUnknownId = 2;
  static constexpr int kReserved = 3;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);

  // Deterministic induction: unique lowercased words, sorted.
  static Vocabulary induce(const std::vector<std::string>& texts);

  int id_of(const std::string& word) const;  // kUnknownId when absent
  const std::string& word_of(int id) const;  // reserved ids map to <start> etc.
  int size() const { return kReserved + static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct TokenSeq {
  std::vector<int> ids;  // start token first, padded/truncated to max_len
  int content_len = 0;   // positions >= content_len are padding
};

// Lowercase, whitespace-split, map unknowns, prepend start, pad/truncate.
TokenSeq tokenize(const std::string& text, const Vocabulary& vocab, int max_len);

}  // namespace itclip
