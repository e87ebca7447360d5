#pragma once

// ROUGE-1/2/L and the derived quantities used for candidate selection,
// labeling, and analysis. Normalization is fixed: lowercase, punctuation
// stripped to whitespace, whitespace collapsed. Degenerate pairs (either
// side without n-grams) score 0.

#include <cstdint>
#include <string>
#include <vector>

#include "summafusion/corpus.hpp"

namespace summafusion {

struct RougeTriple {
  double r1 = 0.0;
  double r2 = 0.0;
  double rl = 0.0;
  double mean = 0.0;
};

enum class RougeObjective { kR1, kR2, kRL, kMean };

RougeObjective rouge_objective_from_string(const std::string& s);

std::vector<std::string> normalize_tokens(const std::string& text);

struct PrecisionRecallF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

PrecisionRecallF rouge_n_prf(const std::string& hyp, const std::string& ref,
                             int n);
double rouge_n(const std::string& hyp, const std::string& ref, int n);

PrecisionRecallF rouge_l_prf(const std::string& hyp, const std::string& ref);
double rouge_l(const std::string& hyp, const std::string& ref);

RougeTriple rouge_triple(const std::string& hyp, const std::string& ref);

std::size_t lcs_length(const std::vector<std::string>& a,
                       const std::vector<std::string>& b);

// Argmax candidate under the objective; ties go to the lowest index.
std::pair<std::size_t, RougeTriple> oracle_select(const CandidateSet& set,
                                                  const std::string& ref,
                                                  RougeObjective objective);

std::size_t random_select(const CandidateSet& set, std::uint64_t seed);

// Mean of 1 - ROUGE-1 over all unordered candidate pairs.
double candidate_diversity(const CandidateSet& set);

// Fraction (percent) of summary n-gram positions not found in the reference
// text / in any text of the pool.
double novel_ngram_fraction(const std::string& summary,
                            const std::string& against, int n);
double novel_ngram_fraction(const std::string& summary,
                            const std::vector<std::string>& against_pool,
                            int n);

// Mean over candidates of RougeTriple.mean against the reference.
double mean_candidate_quality(const CandidateSet& set, const std::string& ref);

}  // namespace summafusion
