#include <gtest/gtest.h>

#include "gems/data.hpp"
#include "gems/decode.hpp"
#include "gems/model.hpp"

using namespace gems;

namespace {

ModelConfig small_model(std::size_t vocab) {
  ModelConfig c;
  c.vocab = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.ffn = 24;
  c.blocks = 2;
  c.context = 40;
  return c;
}

std::vector<TinyTransformer::Sample> seeded_samples(std::size_t n) {
  const DataConfig dc;
  const auto ds = generate_dataset(17, dc);
  const Vocabulary v = Vocabulary::from(dc);
  std::vector<TinyTransformer::Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = ds.test[i * 7 + 1];
    out.push_back({format_prompt(r, v, dc.history_len), v.item_tokens(r.target), r.task});
  }
  return out;
}

}  // namespace

TEST(TinyTransformer, ParameterLayoutAndNames) {
  Rng rng(1);
  TinyTransformer m(small_model(65), rng);
  const auto& p = m.parameters();
  ASSERT_EQ(p.size(), 1 + 2 * 12 + 2u);
  EXPECT_EQ(p[0].name, "tok_emb");
  EXPECT_EQ(p[TinyTransformer::block_param(1, TinyTransformer::wq)].name, "blocks.1.attn.wq");
  EXPECT_EQ(p[TinyTransformer::block_param(0, TinyTransformer::down)].name, "blocks.0.ffn.down");
  std::size_t matrices = 0;
  for (const auto& q : p) {
    EXPECT_EQ(q.matrix_layer, q.value.rows() > 1);
    matrices += q.matrix_layer;
  }
  EXPECT_EQ(matrices, 1 + 2 * 6u);
}

TEST(TinyTransformer, DeterministicGivenSeed) {
  Rng a(3), b(3);
  TinyTransformer m1(small_model(65), a), m2(small_model(65), b);
  const auto s = seeded_samples(1)[0];
  EXPECT_EQ(m1.sample_loss(s), m2.sample_loss(s));
}

TEST(TinyTransformer, GradientsMatchFiniteDifferences) {
  const auto samples = seeded_samples(3);
  for (std::size_t si = 0; si < samples.size(); ++si) {
    Rng rng(100 + si);
    TinyTransformer model(small_model(65), rng);
    // move layer norms and biases off their trivial init
    for (auto& p : model.parameters())
      if (!p.matrix_layer)
        for (double& v : p.value.data()) v += 0.2 * rng.normal();
    const auto& s = samples[si];
    Gradients g = zeros_like(model.parameters());
    model.accumulate_gradient(s, g, 1.0);
    Rng pick(200 + si);
    for (std::size_t l = 0; l < model.parameters().size(); ++l) {
      const std::size_t n = model.parameters()[l].value.size();
      for (int e = 0; e < 5; ++e) {
        // the embedding gradient is sparse in rows; sample rows that appear
        std::size_t k = pick.below(n);
        if (l == 0) {
          const int tok = s.prompt[pick.below(s.prompt.size())];
          k = static_cast<std::size_t>(tok) * model.config().d_model + pick.below(model.config().d_model);
        }
        const double h = 1e-5;
        TinyTransformer plus = model, minus = model;
        plus.parameters()[l].value.data()[k] += h;
        minus.parameters()[l].value.data()[k] -= h;
        const double fd = (plus.sample_loss(s) - minus.sample_loss(s)) / (2 * h);
        const double an = g[l].data()[k];
        const double scale = std::max({std::abs(fd), std::abs(an), 1e-5});
        EXPECT_LE(std::abs(fd - an) / scale, 1e-4) << model.parameters()[l].name << "[" << k << "] fd=" << fd << " an=" << an;
      }
    }
  }
}

TEST(TinyTransformer, GradientWeightIsLinear) {
  Rng rng(4);
  TinyTransformer model(small_model(65), rng);
  const auto s = seeded_samples(1)[0];
  Gradients g1 = zeros_like(model.parameters()), g3 = zeros_like(model.parameters());
  const double l1 = model.accumulate_gradient(s, g1, 1.0);
  const double l3 = model.accumulate_gradient(s, g3, 0.3);
  EXPECT_EQ(l1, l3);
  EXPECT_NEAR(l1, model.sample_loss(s), 1e-12);
  for (std::size_t l = 0; l < g1.size(); ++l)
    for (std::size_t k = 0; k < g1[l].size(); ++k) EXPECT_NEAR(g3[l].data()[k], 0.3 * g1[l].data()[k], 1e-12);
}

TEST(TinyTransformer, IncrementalDecodingMatchesFullPass) {
  Rng rng(5);
  TinyTransformer model(small_model(65), rng);
  const auto s = seeded_samples(2)[1];
  const auto full = model.position_log_probs(s.prompt);
  auto st = model.start(std::span<const int>(s.prompt).first(1));
  for (std::size_t t = 0; t < s.prompt.size(); ++t) {
    if (t > 0) st = model.extend(std::move(st), s.prompt[t]);
    const auto lp = model.log_probs(st);
    for (std::size_t v = 0; v < lp.size(); ++v) ASSERT_NEAR(lp[v], full[t][v], 1e-10);
  }
  EXPECT_NEAR(teacher_forced_nll(model, s.prompt, s.target), model.sample_loss(s), 1e-10);
}

TEST(TinyTransformer, LossIsNonNegativeAndContextEnforced) {
  Rng rng(6);
  TinyTransformer model(small_model(65), rng);
  for (const auto& s : seeded_samples(3)) EXPECT_GE(model.sample_loss(s), 0.0);
  TinyTransformer::Sample longer{std::vector<int>(41, 0), {10, 20, 30}, Task::rec};
  EXPECT_THROW(model.sample_loss(longer), Error);
  TinyTransformer::Sample bad{{0, 1}, {10, 99}, Task::rec};
  EXPECT_THROW(model.sample_loss(bad), Error);
}

TEST(TinyTransformer, FinalLayerInputsCoverMatrixLayers) {
  Rng rng(7);
  TinyTransformer model(small_model(65), rng);
  const auto inputs = model.final_layer_inputs(seeded_samples(1)[0].prompt);
  ASSERT_EQ(inputs.size(), model.parameters().size());
  for (std::size_t l = 0; l < inputs.size(); ++l) {
    const auto& p = model.parameters()[l];
    if (p.matrix_layer)
      EXPECT_EQ(inputs[l].size(), p.value.cols()) << p.name;
    else
      EXPECT_TRUE(inputs[l].empty()) << p.name;
  }
}
