#include "summafusion/tokenizer.hpp"

#include <algorithm>
#include <map>

#include "json.hpp"
#include "summafusion/corpus.hpp"

namespace summafusion {

using nlohmann::json;

Vocab::Vocab(std::vector<std::string> tokens, std::size_t m_max)
    : tokens_(std::move(tokens)), m_max_(m_max) {
  if (m_max_ < 1) throw UsageError("vocab m_max must be >= 1");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(reserved_count() + i)).second)
      throw DataError("vocab contains duplicate token \"" + tokens_[i] + "\"");
  }
}

int Vocab::cand_pos_id(std::size_t k) const {
  if (k < 1 || k > m_max_)
    throw UsageError("candidate position " + std::to_string(k) +
                     " outside 1.." + std::to_string(m_max_));
  return kFirstCandPos + static_cast<int>(k) - 1;
}

int Vocab::word_id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::id_word(int id) const {
  if (id < static_cast<int>(reserved_count()) ||
      id >= static_cast<int>(size()))
    throw DataError("id " + std::to_string(id) + " out of vocab range");
  return tokens_[static_cast<std::size_t>(id) - reserved_count()];
}

std::string Vocab::to_json() const {
  json j;
  j["tokens"] = tokens_;
  j["m_max"] = m_max_;
  json reserved;
  reserved["PAD"] = kPad;
  reserved["BOS"] = kBos;
  reserved["EOS"] = kEos;
  reserved["UNK"] = kUnk;
  reserved["SRC_DROP"] = kSrcDrop;
  reserved["CAND_DROP"] = kCandDrop;
  for (std::size_t k = 1; k <= m_max_; ++k)
    reserved["CAND_POS_" + std::to_string(k)] = cand_pos_id(k);
  j["reserved"] = std::move(reserved);
  return j.dump();
}

Vocab Vocab::from_json(const std::string& blob) {
  json j;
  try {
    j = json::parse(blob);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed vocab json: ") + e.what());
  }
  return Vocab(j.at("tokens").get<std::vector<std::string>>(),
               j.at("m_max").get<std::size_t>());
}

void Vocab::save(const std::string& path) const { write_file(path, to_json()); }

Vocab Vocab::load(const std::string& path) {
  return from_json(read_file(path));
}

Vocab build_vocab(const std::vector<Example>& corpus, std::size_t max_size,
                  std::size_t m_max) {
  const std::size_t reserved = Vocab::kFirstCandPos + m_max;
  if (max_size <= reserved)
    throw UsageError("vocab max_size " + std::to_string(max_size) +
                     " must exceed the reserved block of " +
                     std::to_string(reserved));
  std::map<std::string, std::size_t> freq;
  for (const Example& ex : corpus) {
    for (const std::string& w : split_words(ex.source)) ++freq[w];
    if (ex.target)
      for (const std::string& w : split_words(*ex.target)) ++freq[w];
  }
  // Frequency descending; the map already orders ties lexicographically.
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(),
                                                         freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(items.size(), max_size - reserved);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(items[i].first);
  return Vocab(std::move(tokens), m_max);
}

std::vector<int> encode(const std::string& text, const Vocab& vocab,
                        std::size_t max_len, std::optional<int> prepend) {
  if (max_len < 1) throw UsageError("encode: max_len must be >= 1");
  std::vector<int> ids;
  if (prepend) {
    if (!vocab.is_reserved(*prepend))
      throw UsageError("encode: prepend token must be reserved");
    ids.push_back(*prepend);
  }
  for (const std::string& w : split_words(text)) ids.push_back(vocab.word_id(w));
  if (ids.size() >= max_len) {
    ids.resize(max_len - 1);
    ids.push_back(Vocab::kEos);
  } else {
    ids.push_back(Vocab::kEos);
  }
  return ids;
}

std::string decode(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= static_cast<int>(vocab.size()))
      throw DataError("decode: id " + std::to_string(id) + " out of range");
    if (vocab.is_reserved(id)) continue;
    if (!out.empty()) out += ' ';
    out += vocab.id_word(id);
  }
  return out;
}

}  // namespace summafusion
