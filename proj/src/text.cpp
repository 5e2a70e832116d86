#include "crackgen/text.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace crackgen {

const std::vector<std::string>& crack_class_names() {
  static const std::vector<std::string> names = {"horizontal", "vertical", "diagonal", "curved",
                                                 "branched"};
  return names;
}

const std::string& crack_class_name(int class_id) {
  const auto& names = crack_class_names();
  if (class_id < 1 || class_id > static_cast<int>(names.size()))
    throw std::invalid_argument("unknown crack class id " + std::to_string(class_id));
  return names[static_cast<size_t>(class_id - 1)];
}

Vocabulary Vocabulary::standard(int embedding_dim) {
  std::vector<std::string> tokens = {"an", "image", "of", "a", "with", "and", "crack"};
  for (const auto& n : crack_class_names()) tokens.push_back(n);
  for (const char* noun : {"panel", "surface", "component"}) tokens.emplace_back(noun);
  tokens.emplace_back(kRareToken);
  tokens.emplace_back(kPadToken);
  return Vocabulary(std::move(tokens), embedding_dim);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, int embedding_dim)
    : tokens_(std::move(tokens)), embedding_dim_(embedding_dim) {
  if (embedding_dim_ < 1) throw std::invalid_argument("vocabulary: embedding_dim must be >= 1");
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocabulary: duplicate token '" + tokens_[i] + "'");
  }
  if (!contains(kRareToken)) throw std::invalid_argument("vocabulary: missing [V]");
  if (!contains(kPadToken)) throw std::invalid_argument("vocabulary: missing <pad>");
  for (const auto& n : crack_class_names())
    if (!contains(n)) throw std::invalid_argument("vocabulary: missing class name '" + n + "'");
}

int Vocabulary::index(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) throw VocabularyError("unknown token '" + token + "'", {token});
  return it->second;
}

std::string build_prompt(PromptTemplate tmpl, const std::vector<std::string>& class_names,
                         const std::string& class_noun) {
  const auto& known = crack_class_names();
  for (const auto& c : class_names)
    if (std::find(known.begin(), known.end(), c) == known.end())
      throw std::invalid_argument("unknown class name '" + c + "'");
  switch (tmpl) {
    case PromptTemplate::concept_only:
      return "an image of a [V]";
    case PromptTemplate::class_noun:
      return "a " + class_noun;
    case PromptTemplate::concept_with_crack: {
      if (class_names.empty())
        throw std::invalid_argument("build_prompt: concept_with_crack needs at least one class");
      std::string joined;
      for (size_t i = 0; i < class_names.size(); ++i) {
        if (i > 0) joined += " and ";
        joined += class_names[i];
      }
      return "an image of a [V] with a " + joined + " crack";
    }
  }
  throw std::invalid_argument("build_prompt: bad template");
}

std::vector<int> tokenize(const std::string& prompt, const Vocabulary& vocab) {
  std::istringstream in(prompt);
  std::vector<int> ids;
  std::vector<std::string> unknown;
  for (std::string word; in >> word;) {
    if (vocab.contains(word))
      ids.push_back(vocab.index(word));
    else
      unknown.push_back(word);
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& w : unknown) list += (list.empty() ? "" : ", ") + w;
    throw VocabularyError("out-of-vocabulary words: " + list, unknown);
  }
  while (ids.size() < static_cast<size_t>(kMinPromptLength)) ids.push_back(vocab.pad_index());
  return ids;
}

}  // namespace crackgen
