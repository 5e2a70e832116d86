#pragma once

#include "crackgen/params.hpp"

#include <map>
#include <string>
#include <vector>

namespace crackgen {

/// The five crack categories of the toy dataset, indexed by class id 1..5.
const std::vector<std::string>& crack_class_names();

/// Class name for a 1-based class id; throws on unknown ids.
const std::string& crack_class_name(int class_id);

inline constexpr const char* kRareToken = "[V]";
inline constexpr const char* kPadToken = "<pad>";

/// Closed whitespace vocabulary. Token indices are positions in `tokens()`.
class Vocabulary {
 public:
  /// Default vocabulary: template words, class names, class nouns, [V], <pad>.
  static Vocabulary standard(int embedding_dim = 64);

  Vocabulary(std::vector<std::string> tokens, int embedding_dim);

  const std::vector<std::string>& tokens() const { return tokens_; }
  int size() const { return static_cast<int>(tokens_.size()); }
  int embedding_dim() const { return embedding_dim_; }
  int index(const std::string& token) const;  // throws on unknown
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  int pad_index() const { return index(kPadToken); }

  bool operator==(const Vocabulary& o) const {
    return tokens_ == o.tokens_ && embedding_dim_ == o.embedding_dim_;
  }

 private:
  std::vector<std::string> tokens_;
  int embedding_dim_;
  std::map<std::string, int> index_;
};

enum class PromptTemplate { concept_only, concept_with_crack, class_noun };

inline constexpr const char* kDefaultClassNoun = "panel";

/// "an image of a [V]", "an image of a [V] with a <c1> and <c2> crack",
/// or "a <noun>".
std::string build_prompt(PromptTemplate tmpl, const std::vector<std::string>& class_names = {},
                         const std::string& class_noun = kDefaultClassNoun);

/// Out-of-vocabulary words in a prompt.
class VocabularyError : public std::invalid_argument {
 public:
  VocabularyError(const std::string& what, std::vector<std::string> words)
      : std::invalid_argument(what), words_(std::move(words)) {}
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
};

/// Tokenized and embedded prompt. `vectors` is embedding_dim x L.
struct PromptEmbedding {
  std::string source_prompt;
  std::vector<int> tokens;
  Matrix<double> vectors;

  Index length() const { return static_cast<Index>(tokens.size()); }
};

inline constexpr int kMinPromptLength = 4;

/// Whitespace tokenization; pads with <pad> to kMinPromptLength.
std::vector<int> tokenize(const std::string& prompt, const Vocabulary& vocab);

/// Deterministic table lookup. `table` is embedding_dim x vocab.size().
template <typename Scalar>
PromptEmbedding encode_prompt(const std::string& prompt, const Vocabulary& vocab,
                              const Matrix<Scalar>& table) {
  if (table.rows() != vocab.embedding_dim() || table.cols() != vocab.size())
    throw ShapeError("encode_prompt: embedding table does not match vocabulary");
  PromptEmbedding e;
  e.source_prompt = prompt;
  e.tokens = tokenize(prompt, vocab);
  e.vectors.resize(table.rows(), e.length());
  for (Index i = 0; i < e.length(); ++i)
    e.vectors.col(i) = table.col(e.tokens[static_cast<size_t>(i)]).template cast<double>();
  return e;
}

/// True when every pair of columns differs.
template <typename Scalar>
bool columns_distinct(const Matrix<Scalar>& table) {
  for (Index i = 0; i < table.cols(); ++i)
    for (Index j = i + 1; j < table.cols(); ++j)
      if (table.col(i) == table.col(j)) return false;
  return true;
}

/// Random embedding table, re-drawn until no two columns coincide.
template <typename Scalar>
Matrix<Scalar> init_embedding_table(const Vocabulary& vocab, Rng& rng) {
  for (;;) {
    Matrix<Scalar> t = normal_matrix<Scalar>(vocab.embedding_dim(), vocab.size(), rng) * Scalar(0.5);
    if (columns_distinct(t)) return t;
  }
}

}  // namespace crackgen
