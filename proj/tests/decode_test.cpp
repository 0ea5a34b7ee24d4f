#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "gems/data.hpp"
#include "gems/decode.hpp"
#include "gems/model.hpp"

using namespace gems;

namespace {

struct UniformScorer {
  struct DecodeState {
    std::size_t len = 0;
  };
  std::size_t vocab;
  std::size_t support = 0;  // when nonzero, uniform over tokens [0, support)
  DecodeState start(std::span<const int> p) const { return {p.size()}; }
  DecodeState extend(DecodeState s, int) const { return {s.len + 1}; }
  std::vector<double> log_probs(const DecodeState&) const {
    if (support == 0) return std::vector<double>(vocab, -std::log(static_cast<double>(vocab)));
    std::vector<double> lp(vocab, -INFINITY);
    for (std::size_t t = 0; t < support; ++t) lp[t] = -std::log(static_cast<double>(support));
    return lp;
  }
};

// Knows the right answer for every prompt it was shown.
struct PerfectScorer {
  struct DecodeState {
    std::vector<int> answer;
    std::size_t pos = 0;
  };
  std::map<std::vector<int>, std::vector<int>> answers;
  std::size_t vocab;
  DecodeState start(std::span<const int> p) const { return {answers.at(std::vector<int>(p.begin(), p.end())), 0}; }
  DecodeState extend(DecodeState s, int) const {
    ++s.pos;
    return s;
  }
  std::vector<double> log_probs(const DecodeState& s) const {
    std::vector<double> lp(vocab, -INFINITY);
    lp[static_cast<std::size_t>(s.answer[s.pos])] = 0.0;
    return lp;
  }
};

}  // namespace

TEST(Nll, UniformOverFourSymbols) {
  UniformScorer u{10, 4};
  const std::vector<int> prompt{0}, target{1, 3};
  EXPECT_NEAR(teacher_forced_nll(u, prompt, target), 2 * std::log(4.0), 1e-15);
  EXPECT_NEAR(2 * std::log(4.0), 2.7726, 1e-4);
}

TEST(Nll, PerfectModelHasZeroLoss) {
  PerfectScorer p{{{{0, 1}, {5, 6, 7}}}, 10};
  EXPECT_EQ(teacher_forced_nll(p, std::vector<int>{0, 1}, std::vector<int>{5, 6, 7}), 0.0);
}

TEST(BeamSearch, SingleCandidateGetsExactLogProbability) {
  Rng rng(1);
  ModelConfig mc;
  mc.vocab = 65;
  mc.d_model = 16;
  mc.ffn = 16;
  TinyTransformer m(mc, rng);
  const std::vector<int> prompt{1, 2, 4};
  const std::vector<std::vector<int>> cands{{9, 30, 50}};
  const auto top = constrained_beam_search(m, prompt, cands, 1, 1);
  ASSERT_EQ(top.size(), 1u);
  EXPECT_EQ(top[0].index, 0u);
  EXPECT_NEAR(top[0].score, -m.sample_loss({prompt, cands[0], Task::rec}), 1e-10);
}

TEST(BeamSearch, UniformModelRanksByIndex) {
  UniformScorer u{65};
  std::vector<std::vector<int>> cands{{12, 30, 50}, {9, 30, 51}, {9, 31, 50}, {40, 25, 49}};
  const auto top = constrained_beam_search(u, std::vector<int>{0}, cands, 4, 4);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(top[k].index, k);
}

TEST(BeamSearch, FullWidthEqualsExhaustiveScoring) {
  const DataConfig dc;
  const auto ds = generate_dataset(2, dc);
  const Vocabulary v = Vocabulary::from(dc);
  ModelConfig mc;
  mc.vocab = v.size();
  mc.d_model = 16;
  mc.ffn = 16;
  Rng rng(3);
  TinyTransformer m(mc, rng);
  // sharpen the output distribution so that rankings are informative
  for (double& x : m.parameters()[0].value.data()) x *= 3.0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& r = ds.test[i];
    std::vector<std::vector<int>> cands;
    for (const auto& c : candidate_list(r)) cands.push_back(v.item_tokens(c));
    const auto prompt = format_prompt(r, v, dc.history_len);
    const auto beam = constrained_beam_search(m, prompt, cands, cands.size(), cands.size());
    const auto exhaustive = exhaustive_ranking(m, prompt, cands);
    ASSERT_EQ(beam.size(), exhaustive.size());
    for (std::size_t k = 0; k < beam.size(); ++k) {
      EXPECT_EQ(beam[k].index, exhaustive[k].index) << "record " << i << " rank " << k;
      EXPECT_NEAR(beam[k].score, exhaustive[k].score, 1e-9);
    }
  }
}

TEST(BeamSearch, RejectsBadArguments) {
  UniformScorer u{65};
  const std::vector<std::vector<int>> cands{{1, 2}, {3, 4}};
  EXPECT_THROW(constrained_beam_search(u, std::vector<int>{0}, {}, 1, 1), Error);
  EXPECT_THROW(constrained_beam_search(u, std::vector<int>{0}, cands, 3, 3), Error);
  EXPECT_THROW(constrained_beam_search(u, std::vector<int>{0}, cands, 2, 1), Error);
  EXPECT_THROW(constrained_beam_search(u, std::vector<int>{0}, {{1, 2}, {3}}, 1, 2), Error);
}

TEST(Metrics, Cases) {
  const std::vector<std::size_t> ranking{7, 1, 2, 3, 4, 5, 6, 8, 9, 10, 11, 12};
  EXPECT_EQ(hit_at_k(ranking, 7, 5), 1.0);
  EXPECT_EQ(ndcg_at_k(ranking, 7, 5), 1.0);
  EXPECT_NEAR(ndcg_at_k(ranking, 3, 10), 1.0 / std::log2(5.0), 1e-15);
  EXPECT_NEAR(ndcg_at_k(ranking, 3, 10), 0.4307, 1e-4);
  EXPECT_EQ(hit_at_k(ranking, 11, 10), 0.0);
  EXPECT_EQ(ndcg_at_k(ranking, 11, 10), 0.0);
  EXPECT_EQ(hit_at_k(ranking, 99, 10), 0.0);
}

TEST(Metrics, BoundsAndNdcgOneIffRankOne) {
  std::vector<std::size_t> ranking(20);
  for (std::size_t k = 0; k < 20; ++k) ranking[k] = k;
  for (std::size_t t = 0; t < 25; ++t) {
    const double h = hit_at_k(ranking, t, 10), n = ndcg_at_k(ranking, t, 10);
    EXPECT_TRUE(h == 0.0 || h == 1.0);
    EXPECT_GE(n, 0.0);
    EXPECT_LE(n, 1.0);
    EXPECT_EQ(n == 1.0, t == 0);
  }
}

TEST(Evaluate, PerfectOracleScoresOne) {
  const DataConfig dc;
  const auto ds = generate_dataset(6, dc);
  const Vocabulary v = Vocabulary::from(dc);
  PerfectScorer p{{}, v.size()};
  std::vector<EvalRecord> records(ds.probe.begin(), ds.probe.begin() + 40);
  for (const auto& r : records) p.answers[format_prompt(r, v, dc.history_len)] = v.item_tokens(r.target);
  const auto t = evaluate(p, records, v, EvalOptions{});
  for (std::size_t k : {5, 10}) {
    EXPECT_EQ(t.all.hit.at(k), 1.0);
    EXPECT_EQ(t.all.ndcg.at(k), 1.0);
  }
  EXPECT_EQ(t.all.count, 40u);
}

TEST(Evaluate, UniformModelHitAt5NearFivePercent) {
  DataConfig dc;
  dc.users = 1200;
  const auto ds = generate_dataset(8, dc);
  const Vocabulary v = Vocabulary::from(dc);
  const auto t = evaluate(UniformScorer{v.size()}, ds.test, v, EvalOptions{});
  EXPECT_GE(t.all.count, 1000u);
  EXPECT_NEAR(t.all.hit.at(5), 0.05, 0.02);
}

TEST(Evaluate, RepeatableAndRejectsEmpty) {
  const DataConfig dc;
  const auto ds = generate_dataset(6, dc);
  const Vocabulary v = Vocabulary::from(dc);
  ModelConfig mc;
  mc.vocab = v.size();
  mc.d_model = 16;
  mc.ffn = 16;
  Rng rng(2);
  TinyTransformer m(mc, rng);
  std::vector<EvalRecord> records(ds.test.begin(), ds.test.begin() + 20);
  const auto a = to_json(evaluate(m, records, v, EvalOptions{})).dump();
  const auto b = to_json(evaluate(m, records, v, EvalOptions{})).dump();
  EXPECT_EQ(a, b);
  EXPECT_THROW(evaluate(m, std::vector<EvalRecord>{}, v, EvalOptions{}), Error);
}
