#pragma once

// Corpus ingestion, synthetic data generation, split protocols, and corpus
// statistics. File formats:
//   examples.jsonl   {"id": str, "source": str, "target": str|null}
//   candidates.jsonl {"id": str, "candidates": [{"text","group","rank","logprob"}]}

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "summafusion/common.hpp"

namespace summafusion {

struct Example {
  std::string id;
  std::string source;
  std::optional<std::string> target;
};

struct Candidate {
  std::string text;
  int group = 0;
  int rank = 0;
  double logprob = 0.0;
};

struct CandidateSet {
  std::string example_id;
  std::vector<Candidate> candidates;

  // group ascending, logprob descending within group, (group, rank) unique,
  // logprob <= 0.
  void validate(std::size_t m_max = 0) const;
};

struct CorpusStats {
  std::size_t n_examples = 0;
  double mean_words_doc = 0.0;
  double mean_words_summary = 0.0;
  double mean_tokens_doc = 0.0;
  double mean_tokens_summary = 0.0;
  double compression_ratio_words = 0.0;      // percent
  double compression_ratio_sentences = 0.0;  // percent
  double novel_1gram = 0.0;                  // percent
  double novel_2gram = 0.0;
  double novel_3gram = 0.0;
};

struct SyntheticSpec {
  std::size_t vocab_size = 200;
  std::size_t min_source_len = 30;
  std::size_t max_source_len = 60;
  double salience_density = 0.15;
  double noise_rate = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

std::vector<Example> load_examples(const std::string& path);
void save_examples(const std::vector<Example>& examples,
                   const std::string& path);

// Salient-token extraction task: the source interleaves salient-class and
// filler words in random order; the target is the example's true salient
// words sorted by vocabulary index. Noise inserts salient-class distractors
// (absent from the target) directly after true salient tokens.
std::vector<Example> generate_synthetic(const SyntheticSpec& spec,
                                        std::size_t n);

// Disjoint halves covering the corpus; half_A takes the extra example when
// the size is odd.
std::pair<std::vector<Example>, std::vector<Example>> split_halves(
    const std::vector<Example>& corpus, std::uint64_t seed);

// Disjoint (train, val) samples of size k each.
std::pair<std::vector<Example>, std::vector<Example>> sample_fewshot(
    const std::vector<Example>& corpus, std::size_t k, std::uint64_t seed);

CorpusStats corpus_stats(const std::vector<Example>& corpus);

std::size_t count_sentences(const std::string& text);

std::vector<CandidateSet> load_candidate_sets(const std::string& path,
                                              std::size_t m_max = 0);
void save_candidate_sets(const std::vector<CandidateSet>& sets,
                         const std::string& path);

std::uint64_t corpus_fingerprint(const std::vector<Example>& corpus);
std::uint64_t id_set_fingerprint(std::vector<std::string> ids);

}  // namespace summafusion
