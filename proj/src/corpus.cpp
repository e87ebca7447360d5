#include "summafusion/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "summafusion/metrics.hpp"
#include "summafusion/tokenizer.hpp"

namespace summafusion {

using nlohmann::json;

void CandidateSet::validate(std::size_t m_max) const {
  if (candidates.empty())
    throw DataError("candidate set for '" + example_id + "' is empty");
  if (m_max > 0 && candidates.size() > m_max)
    throw DataError("candidate set for '" + example_id + "' has " +
                    std::to_string(candidates.size()) +
                    " candidates, exceeds m_max=" + std::to_string(m_max));
  std::set<std::pair<int, int>> seen;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const Candidate& c = candidates[i];
    if (c.group < 0 || c.rank < 0)
      throw DataError("candidate set for '" + example_id +
                      "': negative group or rank");
    if (c.logprob > 0.0)
      throw DataError("candidate set for '" + example_id +
                      "': positive logprob " + std::to_string(c.logprob));
    if (!seen.insert({c.group, c.rank}).second)
      throw DataError("candidate set for '" + example_id +
                      "': duplicate (group, rank) = (" +
                      std::to_string(c.group) + ", " + std::to_string(c.rank) +
                      ")");
    if (i > 0) {
      const Candidate& prev = candidates[i - 1];
      if (c.group < prev.group)
        throw DataError("candidate set for '" + example_id +
                        "': groups not ascending");
      if (c.group == prev.group && c.logprob > prev.logprob)
        throw DataError("candidate set for '" + example_id +
                        "': logprob not descending within group " +
                        std::to_string(c.group));
    }
  }
}

void SyntheticSpec::validate() const {
  if (vocab_size < 8) throw UsageError("synthetic vocab_size must be >= 8");
  if (min_source_len == 0 || min_source_len > max_source_len)
    throw UsageError("synthetic source length range invalid");
  if (!(salience_density > 0.0 && salience_density < 1.0))
    throw UsageError("salience_density must be in (0,1)");
  if (!(noise_rate >= 0.0 && noise_rate < 1.0))
    throw UsageError("noise_rate must be in [0,1)");
}

std::vector<Example> load_examples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open examples file: " + path);
  std::vector<Example> out;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": malformed JSON line: " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j.contains("source"))
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": line does not match the example schema");
    Example ex;
    try {
      ex.id = j.at("id").get<std::string>();
      ex.source = j.at("source").get<std::string>();
      if (j.contains("target") && !j.at("target").is_null())
        ex.target = j.at("target").get<std::string>();
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": bad field type: " + e.what());
    }
    if (!ids.insert(ex.id).second)
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": duplicate id \"" + ex.id + "\"");
    out.push_back(std::move(ex));
  }
  return out;
}

void save_examples(const std::vector<Example>& examples,
                   const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write examples file: " + path);
  for (const Example& ex : examples) {
    json j;
    j["id"] = ex.id;
    j["source"] = ex.source;
    if (ex.target)
      j["target"] = *ex.target;
    else
      j["target"] = nullptr;
    out << j.dump() << "\n";
  }
}

std::vector<Example> generate_synthetic(const SyntheticSpec& spec,
                                        std::size_t n) {
  spec.validate();
  if (n == 0) throw UsageError("generate_synthetic: n must be >= 1");
  // Half the vocabulary is salient-class ("s" words), half filler ("f").
  const std::size_t n_salient = spec.vocab_size / 2;
  const std::size_t n_filler = spec.vocab_size - n_salient;
  Rng rng(spec.seed);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t e = 0; e < n; ++e) {
    const std::size_t len = static_cast<std::size_t>(
        rng.uniform_int(static_cast<std::int64_t>(spec.min_source_len),
                        static_cast<std::int64_t>(spec.max_source_len)));
    // Per-position Bernoulli salience, capped by the salient vocabulary.
    std::size_t k = 0;
    for (std::size_t p = 0; p < len; ++p)
      if (rng.bernoulli(spec.salience_density)) ++k;
    k = std::min(k, n_salient);
    std::vector<std::size_t> salient = rng.sample_without_replacement(n_salient, k);
    // Salient words occupy k random positions, in random order.
    std::vector<std::size_t> salient_order = salient;
    rng.shuffle(salient_order);
    std::vector<std::size_t> positions = rng.sample_without_replacement(len, k);
    std::vector<std::string> words(len);
    std::size_t si = 0;
    std::unordered_set<std::size_t> pos_set(positions.begin(), positions.end());
    std::vector<bool> is_salient_pos(len, false);
    for (std::size_t p : positions) is_salient_pos[p] = true;
    for (std::size_t p = 0; p < len; ++p) {
      if (is_salient_pos[p]) {
        words[p] = "s" + std::to_string(salient_order[si++]);
      } else {
        words[p] = "f" + std::to_string(rng.below(n_filler));
      }
    }
    // Distractors: salient-class words not in the target, inserted directly
    // after true salient tokens.
    if (spec.noise_rate > 0.0) {
      std::unordered_set<std::size_t> truth(salient.begin(), salient.end());
      std::vector<std::string> noisy;
      noisy.reserve(words.size() + k);
      for (std::size_t p = 0; p < len; ++p) {
        noisy.push_back(words[p]);
        if (is_salient_pos[p] && rng.bernoulli(spec.noise_rate)) {
          std::size_t d = rng.below(n_salient);
          std::size_t guard = 0;
          while (truth.count(d) && guard++ < 64) d = rng.below(n_salient);
          if (!truth.count(d)) noisy.push_back("s" + std::to_string(d));
        }
      }
      words = std::move(noisy);
    }
    // Target: the true salient words in vocabulary-index order.
    std::ostringstream src, tgt;
    for (std::size_t p = 0; p < words.size(); ++p) {
      if (p) src << ' ';
      src << words[p];
    }
    for (std::size_t i = 0; i < salient.size(); ++i) {
      if (i) tgt << ' ';
      tgt << 's' << salient[i];
    }
    Example ex;
    ex.id = "syn" + std::to_string(e);
    ex.source = src.str();
    ex.target = tgt.str();
    out.push_back(std::move(ex));
  }
  return out;
}

std::pair<std::vector<Example>, std::vector<Example>> split_halves(
    const std::vector<Example>& corpus, std::uint64_t seed) {
  if (corpus.size() < 2)
    throw DataError("split_halves requires at least 2 examples, got " +
                    std::to_string(corpus.size()));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t size_a = (corpus.size() + 1) / 2;
  std::vector<Example> a, b;
  a.reserve(size_a);
  b.reserve(corpus.size() - size_a);
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < size_a ? a : b).push_back(corpus[order[i]]);
  return {std::move(a), std::move(b)};
}

std::pair<std::vector<Example>, std::vector<Example>> sample_fewshot(
    const std::vector<Example>& corpus, std::size_t k, std::uint64_t seed) {
  if (k == 0) throw UsageError("sample_fewshot: k must be >= 1");
  if (corpus.size() < 2 * k)
    throw DataError("sample_fewshot requires at least " +
                    std::to_string(2 * k) + " examples, got " +
                    std::to_string(corpus.size()));
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<Example> train, val;
  train.reserve(k);
  val.reserve(k);
  for (std::size_t i = 0; i < k; ++i) train.push_back(corpus[order[i]]);
  for (std::size_t i = k; i < 2 * k; ++i) val.push_back(corpus[order[i]]);
  return {std::move(train), std::move(val)};
}

std::size_t count_sentences(const std::string& text) {
  // Split points: {. ! ?} followed by whitespace or end of text.
  std::size_t n = 0;
  bool in_sentence = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (!std::isspace(static_cast<unsigned char>(c))) in_sentence = true;
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == text.size() ||
         std::isspace(static_cast<unsigned char>(text[i + 1])))) {
      if (in_sentence) ++n;
      in_sentence = false;
    }
  }
  if (in_sentence) ++n;
  return n;
}

CorpusStats corpus_stats(const std::vector<Example>& corpus) {
  for (const Example& ex : corpus)
    if (!ex.target)
      throw DataError("corpus_stats: example \"" + ex.id + "\" has no target");
  CorpusStats stats;
  stats.n_examples = corpus.size();
  if (corpus.empty()) return stats;

  // Token counts use a vocabulary built from this corpus (word level + EOS).
  Vocab vocab = build_vocab(corpus, /*max_size=*/1 << 20, /*m_max=*/15);

  double words_doc = 0, words_sum = 0, toks_doc = 0, toks_sum = 0;
  double ratio_w = 0, ratio_s = 0;
  double novel[3] = {0, 0, 0};
  std::size_t novel_n_count[3] = {0, 0, 0};
  const std::size_t no_limit = 1 << 20;
  for (const Example& ex : corpus) {
    const double dw = static_cast<double>(split_words(ex.source).size());
    const double sw = static_cast<double>(split_words(*ex.target).size());
    words_doc += dw;
    words_sum += sw;
    toks_doc += static_cast<double>(encode(ex.source, vocab, no_limit).size());
    toks_sum += static_cast<double>(encode(*ex.target, vocab, no_limit).size());
    if (dw > 0) ratio_w += 100.0 * sw / dw;
    const double ds = static_cast<double>(count_sentences(ex.source));
    const double ss = static_cast<double>(count_sentences(*ex.target));
    if (ds > 0) ratio_s += 100.0 * ss / ds;
    for (int n = 1; n <= 3; ++n) {
      const auto toks = normalize_tokens(*ex.target);
      if (toks.size() < static_cast<std::size_t>(n)) continue;
      novel[n - 1] += novel_ngram_fraction(*ex.target, ex.source, n);
      ++novel_n_count[n - 1];
    }
  }
  const double n = static_cast<double>(corpus.size());
  stats.mean_words_doc = words_doc / n;
  stats.mean_words_summary = words_sum / n;
  stats.mean_tokens_doc = toks_doc / n;
  stats.mean_tokens_summary = toks_sum / n;
  stats.compression_ratio_words = ratio_w / n;
  stats.compression_ratio_sentences = ratio_s / n;
  stats.novel_1gram = novel_n_count[0] ? novel[0] / novel_n_count[0] : 0.0;
  stats.novel_2gram = novel_n_count[1] ? novel[1] / novel_n_count[1] : 0.0;
  stats.novel_3gram = novel_n_count[2] ? novel[2] / novel_n_count[2] : 0.0;
  return stats;
}

std::vector<CandidateSet> load_candidate_sets(const std::string& path,
                                              std::size_t m_max) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open candidates file: " + path);
  std::vector<CandidateSet> out;
  std::unordered_set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": malformed JSON line: " + e.what());
    }
    CandidateSet set;
    try {
      set.example_id = j.at("id").get<std::string>();
      for (const auto& cj : j.at("candidates")) {
        Candidate c;
        c.text = cj.at("text").get<std::string>();
        c.group = cj.at("group").get<int>();
        c.rank = cj.at("rank").get<int>();
        c.logprob = cj.at("logprob").get<double>();
        set.candidates.push_back(std::move(c));
      }
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": bad candidate record: " + e.what());
    }
    if (!ids.insert(set.example_id).second)
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": duplicate id \"" + set.example_id + "\"");
    set.validate(m_max);
    out.push_back(std::move(set));
  }
  return out;
}

void save_candidate_sets(const std::vector<CandidateSet>& sets,
                         const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write candidates file: " + path);
  for (const CandidateSet& set : sets) {
    json j;
    j["id"] = set.example_id;
    json arr = json::array();
    for (const Candidate& c : set.candidates) {
      json cj;
      cj["text"] = c.text;
      cj["group"] = c.group;
      cj["rank"] = c.rank;
      cj["logprob"] = c.logprob;
      arr.push_back(std::move(cj));
    }
    j["candidates"] = std::move(arr);
    out << j.dump() << "\n";
  }
}

std::uint64_t corpus_fingerprint(const std::vector<Example>& corpus) {
  std::vector<std::string> blobs;
  blobs.reserve(corpus.size());
  for (const Example& ex : corpus)
    blobs.push_back(ex.id + "\x1f" + ex.source + "\x1f" +
                    (ex.target ? *ex.target : std::string("\x00", 1)));
  std::sort(blobs.begin(), blobs.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string& b : blobs) h = fnv1a(b.data(), b.size(), h);
  return h;
}

std::uint64_t id_set_fingerprint(std::vector<std::string> ids) {
  std::sort(ids.begin(), ids.end());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string& id : ids) {
    h = fnv1a(id.data(), id.size(), h);
    h = fnv1a("\x1f", 1, h);
  }
  return h;
}

}  // namespace summafusion
