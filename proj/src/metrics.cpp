#include "summafusion/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <unordered_map>
#include <unordered_set>

namespace summafusion {

RougeObjective rouge_objective_from_string(const std::string& s) {
  if (s == "r1") return RougeObjective::kR1;
  if (s == "r2") return RougeObjective::kR2;
  if (s == "rl") return RougeObjective::kRL;
  if (s == "mean") return RougeObjective::kMean;
  throw UsageError("unknown rouge objective \"" + s + "\"");
}

std::vector<std::string> normalize_tokens(const std::string& text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::ispunct(u))
      cleaned += ' ';
    else
      cleaned += static_cast<char>(std::tolower(u));
  }
  return split_words(cleaned);
}

namespace {

// Joined n-grams keyed by a \x1f-separated string; counts form a multiset.
std::unordered_map<std::string, std::size_t> ngram_counts(
    const std::vector<std::string>& toks, int n) {
  std::unordered_map<std::string, std::size_t> counts;
  if (toks.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += toks[i + j];
    }
    ++counts[key];
  }
  return counts;
}

double safe_f1(double overlap, double hyp_total, double ref_total) {
  if (hyp_total <= 0.0 || ref_total <= 0.0) return 0.0;
  const double p = overlap / hyp_total;
  const double r = overlap / ref_total;
  if (p + r <= 0.0) return 0.0;
  return 2.0 * p * r / (p + r);
}

double objective_score(const RougeTriple& t, RougeObjective obj) {
  switch (obj) {
    case RougeObjective::kR1: return t.r1;
    case RougeObjective::kR2: return t.r2;
    case RougeObjective::kRL: return t.rl;
    case RougeObjective::kMean: return t.mean;
  }
  return t.mean;
}

}  // namespace

PrecisionRecallF rouge_n_prf(const std::string& hyp, const std::string& ref,
                             int n) {
  if (n != 1 && n != 2) throw UsageError("rouge_n: n must be 1 or 2");
  const auto hyp_toks = normalize_tokens(hyp);
  const auto ref_toks = normalize_tokens(ref);
  const auto hyp_counts = ngram_counts(hyp_toks, n);
  const auto ref_counts = ngram_counts(ref_toks, n);
  std::size_t overlap = 0, hyp_total = 0, ref_total = 0;
  for (const auto& [key, c] : hyp_counts) {
    hyp_total += c;
    auto it = ref_counts.find(key);
    if (it != ref_counts.end()) overlap += std::min(c, it->second);
  }
  for (const auto& [key, c] : ref_counts) ref_total += c;
  PrecisionRecallF out;
  if (hyp_total > 0) out.precision = static_cast<double>(overlap) / hyp_total;
  if (ref_total > 0) out.recall = static_cast<double>(overlap) / ref_total;
  out.f1 = safe_f1(static_cast<double>(overlap),
                   static_cast<double>(hyp_total),
                   static_cast<double>(ref_total));
  return out;
}

double rouge_n(const std::string& hyp, const std::string& ref, int n) {
  return rouge_n_prf(hyp, ref, n).f1;
}

std::size_t lcs_length(const std::vector<std::string>& a,
                       const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  // Two-row DP over token sequences.
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

PrecisionRecallF rouge_l_prf(const std::string& hyp, const std::string& ref) {
  const auto hyp_toks = normalize_tokens(hyp);
  const auto ref_toks = normalize_tokens(ref);
  const auto lcs = static_cast<double>(lcs_length(hyp_toks, ref_toks));
  PrecisionRecallF out;
  if (!hyp_toks.empty()) out.precision = lcs / static_cast<double>(hyp_toks.size());
  if (!ref_toks.empty()) out.recall = lcs / static_cast<double>(ref_toks.size());
  out.f1 = safe_f1(lcs, static_cast<double>(hyp_toks.size()),
                   static_cast<double>(ref_toks.size()));
  return out;
}

double rouge_l(const std::string& hyp, const std::string& ref) {
  return rouge_l_prf(hyp, ref).f1;
}

RougeTriple rouge_triple(const std::string& hyp, const std::string& ref) {
  RougeTriple t;
  t.r1 = rouge_n(hyp, ref, 1);
  t.r2 = rouge_n(hyp, ref, 2);
  t.rl = rouge_l(hyp, ref);
  t.mean = (t.r1 + t.r2 + t.rl) / 3.0;
  return t;
}

std::pair<std::size_t, RougeTriple> oracle_select(const CandidateSet& set,
                                                  const std::string& ref,
                                                  RougeObjective objective) {
  if (set.candidates.empty())
    throw DataError("oracle_select: empty candidate set for '" +
                    set.example_id + "'");
  std::size_t best = 0;
  RougeTriple best_triple = rouge_triple(set.candidates[0].text, ref);
  double best_score = objective_score(best_triple, objective);
  for (std::size_t i = 1; i < set.candidates.size(); ++i) {
    RougeTriple t = rouge_triple(set.candidates[i].text, ref);
    const double s = objective_score(t, objective);
    if (s > best_score) {
      best = i;
      best_triple = t;
      best_score = s;
    }
  }
  return {best, best_triple};
}

std::size_t random_select(const CandidateSet& set, std::uint64_t seed) {
  if (set.candidates.empty())
    throw DataError("random_select: empty candidate set for '" +
                    set.example_id + "'");
  Rng rng(seed);
  return static_cast<std::size_t>(rng.below(set.candidates.size()));
}

double candidate_diversity(const CandidateSet& set) {
  const std::size_t m = set.candidates.size();
  if (m < 2)
    throw DataError("candidate_diversity needs >= 2 candidates, got " +
                    std::to_string(m));
  double acc = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = i + 1; j < m; ++j) {
      acc += 1.0 - rouge_n(set.candidates[i].text, set.candidates[j].text, 1);
      ++pairs;
    }
  }
  return acc / static_cast<double>(pairs);
}

double novel_ngram_fraction(const std::string& summary,
                            const std::string& against, int n) {
  return novel_ngram_fraction(summary, std::vector<std::string>{against}, n);
}

double novel_ngram_fraction(const std::string& summary,
                            const std::vector<std::string>& against_pool,
                            int n) {
  if (n < 1) throw UsageError("novel_ngram_fraction: n must be >= 1");
  const auto toks = normalize_tokens(summary);
  if (toks.size() < static_cast<std::size_t>(n))
    throw DataError("novel_ngram_fraction: summary has fewer than " +
                    std::to_string(n) + " tokens");
  std::unordered_set<std::string> seen;
  for (const std::string& text : against_pool) {
    const auto pool_toks = normalize_tokens(text);
    for (const auto& [key, c] : ngram_counts(pool_toks, n)) seen.insert(key);
  }
  std::size_t total = 0, novel = 0;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += toks[i + j];
    }
    ++total;
    if (!seen.count(key)) ++novel;
  }
  return 100.0 * static_cast<double>(novel) / static_cast<double>(total);
}

double mean_candidate_quality(const CandidateSet& set, const std::string& ref) {
  if (set.candidates.empty())
    throw DataError("mean_candidate_quality: empty candidate set for '" +
                    set.example_id + "'");
  double acc = 0.0;
  for (const Candidate& c : set.candidates)
    acc += rouge_triple(c.text, ref).mean;
  return acc / static_cast<double>(set.candidates.size());
}

}  // namespace summafusion
