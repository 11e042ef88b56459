#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "patch/error.hpp"
#include "patch/toy_lm.hpp"
#include "support/reference_model.hpp"

using namespace patch;
using namespace patch::lm;
namespace ref = patch::testing;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.hidden_dim = 32;
  c.mlp_dim = 64;
  c.num_blocks = 1;
  c.context_len = 32;
  c.seed = 77;
  return c;
}

PretrainOptions short_run(long steps) {
  PretrainOptions o;
  o.steps = steps;
  o.batch_size = 8;
  return o;
}

Corpus corpus_of(const std::string& text) {
  const std::vector<std::uint8_t> bytes(text.begin(), text.end());
  return Corpus::from_bytes(bytes, 128);
}

Corpus alternating() {
  std::string s;
  for (std::size_t i = 0; i < 60000; ++i) s += "ab";
  return corpus_of(s);
}

Corpus uniform16() {
  std::mt19937_64 rng(16);
  std::uniform_int_distribution<int> d(0, 15);
  std::string s(120000, ' ');
  for (auto& c : s) c = static_cast<char>('a' + d(rng));
  return corpus_of(s);
}

Batch some_batch(const Corpus& c, std::size_t seqs, std::size_t len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_batch(c.train, seqs, len, rng);
}

MaskSet constant_masks(const MaskedLayerRegistry& reg, float v) {
  MaskSet m;
  for (const auto& l : reg.layers())
    m.emplace(l.name, mask::SoftMask{ad::Tensor::full(l.weight->value.shape(), v)});
  return m;
}

}  // namespace

TEST(Corpus, SplitsAndMapsBytes) {
  std::vector<std::uint8_t> bytes(1000);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i);
  const auto c = Corpus::from_bytes(bytes, 128);
  EXPECT_EQ(c.train.size() + c.validation.size(), 1000u);
  EXPECT_EQ(c.validation.size(), 100u);
  for (auto t : c.train) EXPECT_LT(t, 128);
  EXPECT_EQ(c.train[200], 200 % 128);
}

TEST(Pretrain, CorpusTooSmallIsADataError) {
  EXPECT_THROW(pretrain(corpus_of(std::string(5000, 'a')), small_config(), short_run(1)), DataError);
  EXPECT_THROW(Corpus::from_bytes(std::vector<std::uint8_t>(3), 128), DataError);
}

TEST(Pretrain, AlternatingCorpusIsLearned) {
  const auto c = alternating();
  const auto m = pretrain(c, small_config(), short_run(150));
  EXPECT_LT(evaluate(m, c), 0.05);
  EXPECT_EQ(m.dense_validation_loss, evaluate(m, c));
}

TEST(Pretrain, UniformSourceStaysNearLog16) {
  const auto c = uniform16();
  const auto m = pretrain(c, small_config(), short_run(300));
  EXPECT_NEAR(evaluate(m, c), std::log(16.0), 0.05 * std::log(16.0));
}

TEST(Pretrain, FixedSeedIsBitReproducible) {
  const auto c = alternating();
  const auto a = pretrain(c, small_config(), short_run(20));
  const auto b = pretrain(c, small_config(), short_run(20));
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
  auto other = small_config();
  other.seed = 78;
  EXPECT_NE(checkpoint_bytes(pretrain(c, other, short_run(20))), checkpoint_bytes(a));
}

TEST(Model, ConfigValidation) {
  auto c = small_config();
  c.vocab_size = 300;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(small_config().check_tiles(24, 16), LayoutError);
  EXPECT_NO_THROW(small_config().check_tiles(16, 16));
}

TEST(ForwardMasked, OnesMaskIsBitExactDense) {
  const Model m(small_config());
  const MaskedLayerRegistry reg(m, 16, 16);
  EXPECT_EQ(reg.size(), 8u);
  const auto b = some_batch(alternating(), 4, 32, 1);
  EXPECT_EQ(forward_masked(m, b, reg, constant_masks(reg, 1.0f)).item(), m.loss(b).item());
}

TEST(ForwardMasked, ZeroMaskGivesLogVocab) {
  const Model m(small_config());
  const MaskedLayerRegistry reg(m, 16, 16);
  const auto b = some_batch(alternating(), 4, 32, 2);
  EXPECT_NEAR(forward_masked(m, b, reg, constant_masks(reg, 0.0f)).item(), std::log(128.0), 1e-3);
}

TEST(ForwardMasked, MissingMaskIsAConfigError) {
  const Model m(small_config());
  const MaskedLayerRegistry reg(m, 16, 16);
  auto masks = constant_masks(reg, 1.0f);
  masks.erase("head");
  const auto b = some_batch(alternating(), 2, 32, 3);
  EXPECT_THROW(forward_masked(m, b, reg, masks), ConfigError);
}

TEST(ForwardMasked, TileLogitGradientMatchesFiniteDifferences) {
  auto cfg = small_config();
  cfg.num_blocks = 2;
  Model m(cfg);
  m.freeze();
  MaskedLayerRegistry reg(m, 16, 16);
  std::mt19937_64 rng(4);
  std::normal_distribution<float> nd;
  for (auto& l : reg.layers()) {
    std::vector<float> t(l.tile.logits.size()), p(l.pattern.logits.size());
    for (auto& x : t) x = nd(rng);
    for (auto& x : p) x = nd(rng);
    l.tile = mask::TileLogits(l.tile.d1, l.tile.d2, 16, 16, t, true);
    l.pattern = mask::PatternLogits(l.tile.d1, l.tile.d2, p, true);
  }
  const auto b = some_batch(uniform16(), 2, 16, 5);
  const double tau = 0.8, kappa = 1.5;
  MaskSet masks;
  for (const auto& l : reg.layers())
    masks.emplace(l.name, mask::merge_masks(mask::soft_mask_tile(l.tile, tau, kappa, nullptr, false),
                                            mask::soft_mask_2_4(l.pattern, tau, kappa, nullptr, false)));
  ad::backward(forward_masked(m, b, reg, masks));

  auto layers = ref::ref_layers(reg);
  std::vector<ref::RefNoise> noise;
  for (const auto& l : layers) noise.push_back({ref::Vec(2 * l.tile_logits.size(), 0.0),
                                                ref::Vec(l.pattern_logits.size(), 0.0)});
  auto ref_loss = [&](const std::vector<ref::RefLayer>& ls) {
    std::map<std::string, ref::Vec> eff;
    for (std::size_t i = 0; i < ls.size(); ++i) {
      auto mk = ref::ref_soft_mask(ls[i], noise[i], tau, kappa, false);
      for (std::size_t j = 0; j < mk.size(); ++j) mk[j] *= ls[i].w[j];
      eff.emplace(ls[i].name, std::move(mk));
    }
    return ref::ref_model_loss(m, b, eff);
  };
  for (std::size_t li : {std::size_t{0}, std::size_t{5}, std::size_t{8}}) {
    for (std::size_t t : {std::size_t{0}, std::size_t{1}}) {
      auto up = layers, dn = layers;
      up[li].tile_logits[t] += 1e-5;
      dn[li].tile_logits[t] -= 1e-5;
      const double fd = (ref_loss(up) - ref_loss(dn)) / 2e-5;
      const double g = reg.layers()[li].tile.logits.grad()[t];
      EXPECT_NEAR(g, fd, 1e-3 * std::max(std::fabs(fd), 1e-3)) << reg.layers()[li].name << " tile " << t;
    }
  }
  // Weights are frozen: no gradient reaches them.
  for (const auto& w : m.weights()) EXPECT_FALSE(w.value.has_grad()) << w.name;
}

TEST(Checkpoint, RoundTripAndCorruption) {
  Model m(small_config());
  m.dense_validation_loss = 1.25;
  const auto bytes = checkpoint_bytes(m);
  const auto back = checkpoint_from_bytes(bytes);
  EXPECT_EQ(back.config(), m.config());
  EXPECT_EQ(back.dense_validation_loss, 1.25);
  EXPECT_EQ(checkpoint_bytes(back), bytes);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(checkpoint_from_bytes(bad), FormatError);
  EXPECT_THROW(checkpoint_from_bytes(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 4)), FormatError);
  auto extra = bytes;
  extra.push_back(1);
  EXPECT_THROW(checkpoint_from_bytes(extra), FormatError);
  const auto path = std::filesystem::temp_directory_path() / "patch_test_model.ckpt";
  save_checkpoint(m, path);
  EXPECT_EQ(checkpoint_bytes(load_checkpoint(path)), bytes);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Calibrate, StatsPerLayerAreDeterministic) {
  const Model m(small_config());
  const auto c = alternating();
  const auto a = calibrate(m, c, 8, 3), b = calibrate(m, c, 8, 3);
  EXPECT_EQ(a.size(), 8u);
  for (const auto& [name, s] : a) {
    EXPECT_EQ(s.sq_sums(), b.at(name).sq_sums());
    EXPECT_EQ(s.features(), m.weight(name).value.dim(1));
    EXPECT_EQ(s.samples(), 8u * 32);
  }
}

TEST(Evaluate, MatchesManualWindows) {
  const Model m(small_config());
  const auto c = uniform16();
  const auto batches = evaluation_batches(c.validation, 32, 64, 16);
  double sum = 0.0;
  std::size_t tokens = 0;
  for (const auto& b : batches) {
    sum += m.loss(b).item() * static_cast<double>(b.targets.size());
    tokens += b.targets.size();
  }
  EXPECT_NEAR(evaluate(m, c), sum / static_cast<double>(tokens), 1e-9);
}
