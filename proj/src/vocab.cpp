// SPDX-License-Identifier: Apache-2.0

#include "itclip/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace itclip {

namespace {

const std::string kStartWord = "<start>";
const std::string kPadWord = "<pad>";
const std::string kUnkWord = "<unk>";

std::string lowercased(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

}  // namespace

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  for (std::size_t i = 0; i < words_.size(); ++i)
    index_.emplace(words_[i], kReserved + static_cast<int>(i));
}

Vocabulary Vocabulary::induce(const std::vector<std::string>& texts) {
  std::set<std::string> uniq;
  for (const std::string& t : texts)
    for (const std::string& w : split_words(lowercased(t))) uniq.insert(w);
  return Vocabulary(std::vector<std::string>(uniq.begin(), uniq.end()));
}

int Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnknownId : it->second;
}

const std::string& Vocabulary::word_of(int id) const {
  switch (id) {
    case kStartId: return kStartWord;
    case kPadId: return kPadWord;
    case kUnknownId: return kUnkWord;
    default: break;
  }
  const int i = id - kReserved;
  if (i < 0 || i >= static_cast<int>(words_.size()))
    throw std::out_of_range("vocabulary: id out of range");
  return words_[static_cast<std::size_t>(i)];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("vocabulary: cannot write " + path);
  for (const std::string& w : words_) os << w << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("vocabulary: cannot read " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(std::move(words));
}

TokenSeq tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
  if (max_len < 2) throw std::invalid_argument("tokenize: max_len must be >= 2");
  TokenSeq seq;
  seq.ids.reserve(max_len);
  seq.ids.push_back(Vocabulary::kStartId);
  for (const std::string& w : split_words(lowercased(text))) {
    if (static_cast<int>(seq.ids.size()) >= max_len) break;
    seq.ids.push_back(vocab.id_of(w));
  }
  seq.content_len = static_cast<int>(seq.ids.size());
  seq.ids.resize(max_len, Vocabulary::kPadId);
  return seq;
}

}  // namespace itclip
