#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "hessdiag/dataset.hpp"
#include "hessdiag/error.hpp"
#include "hessdiag/models.hpp"
#include "hessdiag/rng.hpp"
#include "oracles.hpp"

using namespace hessdiag;

namespace {

ModelConfig small(ModelKind kind, int classes = 3, int heads = 2) {
  ModelConfig c;
  c.kind = kind;
  c.vocab_size = 12;
  c.embed_dim = 4;
  c.heads = kind == ModelKind::kHierarchical ? 1 : heads;
  c.classes = classes;
  c.seq_len = 4;
  c.sents_per_doc = 2;
  c.words_per_sent = 3;
  c.init_seed = 5;
  return c;
}

std::vector<Example> batch_for(const ModelConfig& c, int n, std::uint64_t seed) {
  return gen_dataset(data_spec_for(c, n, 1), seed).train.examples;
}

const ModelKind kKinds[] = {ModelKind::kHierarchical, ModelKind::kSelfAttention, ModelKind::kCrossAttention};

}  // namespace

TEST(Registry, GroupNamesPerKind) {
  ModelConfig c = small(ModelKind::kHierarchical);
  c.embed_dim = 16;
  EXPECT_EQ(build_model(c).registry.names(), (std::vector<std::string>{"word_attention", "sentence_attention"}));
  EXPECT_EQ(build_model(small(ModelKind::kSelfAttention)).registry.names(),
            (std::vector<std::string>{"query_proj", "key_proj", "value_proj", "output_proj"}));
  EXPECT_EQ(build_model(small(ModelKind::kCrossAttention)).registry.names(),
            (std::vector<std::string>{"stream_a_attention", "stream_b_attention", "cross_attention"}));
}

TEST(Registry, PartitionsAttentionParametersOnly) {
  for (ModelKind k : kKinds) {
    const Model m = build_model(small(k));
    std::set<std::size_t> seen;
    for (const auto& [name, idx] : m.registry.groups()) {
      for (std::size_t i : idx) EXPECT_TRUE(seen.insert(i).second) << "index " << i << " in two groups";
    }
    for (const auto& e : m.layout().entries()) {
      const bool attention = e.group != kOtherGroup;
      EXPECT_EQ(attention, e.name.rfind(e.group + ".", 0) == 0) << e.name;
      for (std::size_t i = e.offset; i < e.offset + e.size; ++i) {
        EXPECT_EQ(seen.count(i) == 1, attention) << e.name;
        EXPECT_EQ(m.registry.group_of(i), e.group);
      }
    }
    EXPECT_EQ(seen.size() + m.registry.other(m.params.size()).size(), m.params.size());
  }
}

TEST(BuildModel, DeterministicInit) {
  for (ModelKind k : kKinds) {
    const Model a = build_model(small(k)), b = build_model(small(k));
    EXPECT_EQ(a.params, b.params);
    ModelConfig other = small(k);
    other.init_seed = 6;
    EXPECT_NE(build_model(other).params, a.params);
  }
}

TEST(BuildModel, InitBoundsAndZeroBiases) {
  const Model m = build_model(small(ModelKind::kSelfAttention));
  for (const auto& e : m.layout().entries()) {
    const bool bias = e.name.ends_with(".bias");
    const double bound = 1.0 / std::sqrt(double(e.shape[0]));
    for (std::size_t i = e.offset; i < e.offset + e.size; ++i) {
      if (bias) EXPECT_EQ(m.params[i], 0.0);
      else EXPECT_LE(std::abs(m.params[i]), bound);
    }
  }
}

TEST(BuildModel, HeadsSliceEmbedding) {
  ModelConfig c = small(ModelKind::kSelfAttention);
  c.embed_dim = 16;
  c.heads = 2;
  const Model m = build_model(c);
  const auto data = batch_for(c, 3, 1);
  const auto maps = attention_maps(m, data);
  ASSERT_EQ(maps.size(), 2u);
  // per-head dim is 16 / 2: the straight-line oracle slices heads that way
  EXPECT_NEAR(loss(m, data), oracle::straight_line_loss(m, m.params, data), 1e-12);
}

TEST(BuildModel, InvalidConfigsNameTheConstraint) {
  ModelConfig c = small(ModelKind::kSelfAttention);
  c.heads = 3;
  try {
    build_model(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("heads"), std::string::npos);
  }
  c = small(ModelKind::kHierarchical);
  c.classes = 0;
  EXPECT_THROW(build_model(c), ConfigError);
  c = small(ModelKind::kCrossAttention);
  c.embed_dim = 64;
  c.vocab_size = 200;
  try {
    build_model(c);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("20000"), std::string::npos);
  }
}

TEST(Loss, ZeroedHeadIsLogC) {
  for (ModelKind k : kKinds) {
    for (int classes : {2, 4}) {
      Model m = build_model(small(k, classes));
      for (const char* n : {"classifier.weight", "classifier.bias"}) {
        const auto& e = m.layout().find(n);
        std::fill_n(m.params.begin() + static_cast<std::ptrdiff_t>(e.offset), e.size, 0.0);
      }
      EXPECT_NEAR(loss(m, batch_for(m.config, 5, 2)), std::log(double(classes)), 1e-9);
    }
  }
}

TEST(Loss, SaturatedMarginGoesToZero) {
  for (ModelKind k : kKinds) {
    Model m = build_model(small(k, 2));
    const auto w = m.layout().find("classifier.weight");
    const auto b = m.layout().find("classifier.bias");
    std::fill_n(m.params.begin() + static_cast<std::ptrdiff_t>(w.offset), w.size, 0.0);
    auto ex = batch_for(m.config, 1, 3);
    m.params[b.offset + static_cast<std::size_t>(ex[0].label)] = 50.0;
    m.params[b.offset + 1 - static_cast<std::size_t>(ex[0].label)] = 0.0;
    EXPECT_LE(loss(m, ex), 1e-20);
  }
}

TEST(Loss, MatchesStraightLineOracle) {
  for (ModelKind k : kKinds) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      ModelConfig c = small(k, 3);
      c.init_seed = seed;
      Model m = build_model(c);
      // nonzero biases too
      for (std::size_t i = 0; i < m.params.size(); ++i) m.params[i] += 0.3 * rng::normal(seed + 77, i);
      const auto data = batch_for(c, 4, seed);
      EXPECT_NEAR(loss(m, data), oracle::straight_line_loss(m, m.params, data), 1e-12) << to_string(k);
      const Tensor z = logits(m.objective, m.params, data);
      const auto ref = oracle::straight_line_logits(m, m.params, data);
      for (std::size_t i = 0; i < data.size(); ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(z.at(i, j), ref[i][j], 1e-12);
    }
  }
}

TEST(Loss, BadBatchIsRejected) {
  const Model m = build_model(small(ModelKind::kSelfAttention));
  auto data = batch_for(m.config, 2, 1);
  data[1].tokens_a.push_back(0);
  EXPECT_THROW(loss(m, data), ShapeError);
  data = batch_for(m.config, 2, 1);
  data[0].tokens_a[0] = 99;
  EXPECT_THROW(loss(m, data), ShapeError);
  data = batch_for(m.config, 2, 1);
  data[0].label = 7;
  EXPECT_THROW(loss(m, data), ShapeError);
}

TEST(Predict, ArgmaxWithLowestTieBreak) {
  EXPECT_EQ(argmax_rows(Tensor({1, 2}, {0.1, 0.9})), std::vector<int>{1});
  EXPECT_EQ(argmax_rows(Tensor({1, 2}, {0.5, 0.5})), std::vector<int>{0});
  EXPECT_EQ(argmax_rows(Tensor({2, 3}, {1, 3, 3, 2, 2, 1})), (std::vector<int>{1, 0}));
}

TEST(Attention, RowsAreStochastic) {
  for (ModelKind k : kKinds) {
    const Model m = build_model(small(k));
    for (const Tensor& a : attention_maps(m, batch_for(m.config, 3, 4))) {
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          EXPECT_GE(a.at(i, j), 0.0);
          s += a.at(i, j);
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(Attention, ExamplesDoNotInteract) {
  // Each example's loss contribution depends only on its own tokens.
  for (ModelKind k : kKinds) {
    const Model m = build_model(small(k));
    const auto data = batch_for(m.config, 4, 8);
    double sum = 0;
    for (const auto& ex : data) sum += loss(m, std::span(&ex, 1));
    EXPECT_NEAR(loss(m, data), sum / 4.0, 1e-13);
  }
}
