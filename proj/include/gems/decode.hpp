#pragma once

// Teacher-forced likelihood, trie-constrained beam search over a candidate
// list, and the Hit@K / NDCG@K evaluation loop.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "gems/data.hpp"
#include "gems/error.hpp"

namespace gems {

/// Anything that can score the next token given a prefix.
template <class S>
concept NextTokenScorer = requires(const S& s, std::span<const int> prompt, typename S::DecodeState st, int token) {
  { s.start(prompt) } -> std::same_as<typename S::DecodeState>;
  { s.extend(st, token) } -> std::same_as<typename S::DecodeState>;
  { s.log_probs(st) } -> std::same_as<std::vector<double>>;
};

/// −Σ_t log P(target_t | prompt, target_<t).
template <NextTokenScorer S>
double teacher_forced_nll(const S& model, std::span<const int> prompt, std::span<const int> target) {
  auto state = model.start(prompt);
  double loss = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    loss -= model.log_probs(state)[static_cast<std::size_t>(target[t])];
    if (t + 1 < target.size()) state = model.extend(std::move(state), target[t]);
  }
  return loss;
}

struct RankedCandidate {
  std::size_t index = 0;
  double score = 0.0;
};

/// Beam search restricted to prefixes of the candidate token sequences.
/// Returns the top `k` candidates by summed log-probability, ties broken by
/// candidate index (for partial prefixes, by the smallest index they extend).
template <NextTokenScorer S>
std::vector<RankedCandidate> constrained_beam_search(const S& model, std::span<const int> prompt,
                                                     const std::vector<std::vector<int>>& candidates, std::size_t k,
                                                     std::size_t beam_width) {
  if (candidates.empty()) fail(ErrorKind::invalid_argument, "beam search: no candidates");
  if (k == 0 || k > candidates.size()) fail(ErrorKind::invalid_argument, "beam search: K must lie in [1, |candidates|]");
  if (beam_width < k) fail(ErrorKind::invalid_argument, "beam search: beam width must be >= K");
  const std::size_t len = candidates.front().size();
  for (const auto& c : candidates)
    if (c.size() != len || len == 0) fail(ErrorKind::invalid_argument, "beam search: candidates must share one length");

  struct Beam {
    double score;
    std::vector<std::size_t> members;  // candidates extending this prefix, ascending
    typename S::DecodeState state;
  };
  std::vector<std::size_t> all(candidates.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<Beam> beams;
  beams.push_back({0.0, std::move(all), model.start(prompt)});

  for (std::size_t depth = 0; depth < len; ++depth) {
    std::vector<Beam> next;
    for (auto& b : beams) {
      const auto lp = model.log_probs(b.state);
      std::map<int, std::vector<std::size_t>> children;
      for (std::size_t m : b.members) children[candidates[m][depth]].push_back(m);
      for (auto& [token, members] : children) {
        if (token < 0 || static_cast<std::size_t>(token) >= lp.size())
          fail(ErrorKind::invalid_argument, "beam search: candidate token outside the vocabulary");
        next.push_back({b.score + lp[static_cast<std::size_t>(token)], std::move(members), {}});
        next.back().state = depth + 1 < len ? model.extend(b.state, token) : typename S::DecodeState{};
      }
    }
    std::stable_sort(next.begin(), next.end(), [](const Beam& a, const Beam& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.members.front() < b.members.front();
    });
    if (next.size() > beam_width) next.resize(beam_width);
    beams = std::move(next);
  }

  std::vector<RankedCandidate> out;
  for (const auto& b : beams)
    for (std::size_t m : b.members) out.push_back({m, b.score});
  std::stable_sort(out.begin(), out.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (out.size() > k) out.resize(k);
  return out;
}

/// Every candidate's exact sequence log-probability, ranked like the beam.
template <NextTokenScorer S>
std::vector<RankedCandidate> exhaustive_ranking(const S& model, std::span<const int> prompt,
                                                const std::vector<std::vector<int>>& candidates) {
  std::vector<RankedCandidate> out;
  for (std::size_t i = 0; i < candidates.size(); ++i)
    out.push_back({i, -teacher_forced_nll(model, prompt, candidates[i])});
  std::stable_sort(out.begin(), out.end(), [](const RankedCandidate& a, const RankedCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  return out;
}

/// 1-based rank of `target` within `ranking`, or 0 when absent.
inline std::size_t rank_of(const std::vector<std::size_t>& ranking, std::size_t target) {
  const auto it = std::find(ranking.begin(), ranking.end(), target);
  return it == ranking.end() ? 0 : static_cast<std::size_t>(it - ranking.begin()) + 1;
}

inline double hit_at_k(const std::vector<std::size_t>& ranking, std::size_t target, std::size_t k) {
  const std::size_t r = rank_of(ranking, target);
  return r != 0 && r <= k ? 1.0 : 0.0;
}

inline double ndcg_at_k(const std::vector<std::size_t>& ranking, std::size_t target, std::size_t k) {
  const std::size_t r = rank_of(ranking, target);
  return r != 0 && r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

struct TaskMetrics {
  std::size_t count = 0;
  std::map<std::size_t, double> hit, ndcg;
};

struct EvalTable {
  TaskMetrics src, rec, all;
  std::vector<bool> top1_correct;  // per record, in input order
};

inline nlohmann::ordered_json to_json(const TaskMetrics& m) {
  nlohmann::ordered_json j;
  j["count"] = m.count;
  for (const auto& [k, v] : m.hit) j["hit@" + std::to_string(k)] = v;
  for (const auto& [k, v] : m.ndcg) j["ndcg@" + std::to_string(k)] = v;
  return j;
}

inline nlohmann::ordered_json to_json(const EvalTable& t) {
  nlohmann::ordered_json j;
  j["src"] = to_json(t.src);
  j["rec"] = to_json(t.rec);
  j["all"] = to_json(t.all);
  return j;
}

struct EvalOptions {
  std::vector<std::size_t> ks{5, 10};
  std::size_t beam_width = 20;
  std::size_t history_max = 6;
};

/// Ranks each record's 100-item candidate list and averages Hit@K and NDCG@K
/// per task. Records are processed in order; sums are accumulated in that
/// order so the table is reproducible bit for bit.
template <NextTokenScorer S>
EvalTable evaluate(const S& model, const std::vector<EvalRecord>& records, const Vocabulary& vocab,
                   const EvalOptions& opt) {
  if (records.empty()) fail(ErrorKind::invalid_argument, "evaluate: no records");
  if (opt.ks.empty()) fail(ErrorKind::invalid_argument, "evaluate: empty K list");
  const std::size_t kmax = *std::max_element(opt.ks.begin(), opt.ks.end());
  EvalTable t;
  for (TaskMetrics* m : {&t.src, &t.rec, &t.all})
    for (std::size_t k : opt.ks) m->hit[k] = m->ndcg[k] = 0.0;
  for (const auto& r : records) {
    std::size_t target = 0;
    const auto cands = candidate_list(r, &target);
    std::vector<std::vector<int>> cand_tokens;
    cand_tokens.reserve(cands.size());
    for (const auto& c : cands) cand_tokens.push_back(vocab.item_tokens(c));
    const auto prompt = format_prompt(r, vocab, opt.history_max);
    const auto top = constrained_beam_search(model, prompt, cand_tokens, std::min(kmax, cands.size()),
                                             std::max(opt.beam_width, kmax));
    std::vector<std::size_t> ranking;
    for (const auto& c : top) ranking.push_back(c.index);
    t.top1_correct.push_back(!ranking.empty() && ranking.front() == target);
    for (TaskMetrics* m : {r.task == Task::src ? &t.src : &t.rec, &t.all}) {
      ++m->count;
      for (std::size_t k : opt.ks) {
        m->hit[k] += hit_at_k(ranking, target, k);
        m->ndcg[k] += ndcg_at_k(ranking, target, k);
      }
    }
  }
  for (TaskMetrics* m : {&t.src, &t.rec, &t.all})
    for (std::size_t k : opt.ks)
      if (m->count) {
        m->hit[k] /= static_cast<double>(m->count);
        m->ndcg[k] /= static_cast<double>(m->count);
      }
  return t;
}

}  // namespace gems
