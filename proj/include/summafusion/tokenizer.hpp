#pragma once

// Word-level vocabulary with a reserved special-token block:
//   0 PAD, 1 BOS, 2 EOS, 3 UNK, 4 SRC_DROP, 5 CAND_DROP,
//   6 .. 5+m_max  candidate position tokens (CAND_POS_1 .. CAND_POS_m_max).

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "summafusion/common.hpp"

namespace summafusion {

struct Example;

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSrcDrop = 4;
  static constexpr int kCandDrop = 5;
  static constexpr int kFirstCandPos = 6;

  Vocab() = default;
  Vocab(std::vector<std::string> tokens, std::size_t m_max);

  std::size_t size() const { return reserved_count() + tokens_.size(); }
  std::size_t m_max() const { return m_max_; }
  std::size_t reserved_count() const { return kFirstCandPos + m_max_; }

  // 1-based candidate index, per the diverse beam search ordering.
  int cand_pos_id(std::size_t k) const;
  bool is_reserved(int id) const {
    return id >= 0 && id < static_cast<int>(reserved_count());
  }

  // UNK for out-of-vocabulary words.
  int word_id(const std::string& word) const;
  const std::string& id_word(int id) const;  // non-reserved ids only

  const std::vector<std::string>& tokens() const { return tokens_; }

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
  std::string to_json() const;
  static Vocab from_json(const std::string& blob);

 private:
  std::vector<std::string> tokens_;  // non-reserved, id = reserved_count()+i
  std::unordered_map<std::string, int> index_;
  std::size_t m_max_ = 15;
};

// Most frequent whitespace words, ties broken lexicographically.
Vocab build_vocab(const std::vector<Example>& corpus, std::size_t max_size,
                  std::size_t m_max);

// Token ids ending with EOS, truncated so the total length (including the
// optional prepended special and EOS) never exceeds max_len.
std::vector<int> encode(const std::string& text, const Vocab& vocab,
                        std::size_t max_len,
                        std::optional<int> prepend = std::nullopt);

// Reserved tokens are omitted; words joined by single spaces.
std::string decode(const std::vector<int>& ids, const Vocab& vocab);

}  // namespace summafusion
