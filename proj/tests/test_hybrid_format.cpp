#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <thread>

#include "patch/error.hpp"
#include "patch/hybrid_format.hpp"

using namespace patch;
using namespace patch::hsm;

namespace {

std::vector<float> normals(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> nd;
  std::vector<float> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

// Dense-tile fraction k gives density (1 + k) / 2.
mask::HybridMask random_mask(std::size_t d1, std::size_t d2, std::size_t b1, std::size_t b2,
                             double dense_fraction, std::mt19937_64& rng) {
  mask::HybridMask m(d1, d2, b1, b2);
  std::bernoulli_distribution coin(dense_fraction);
  std::uniform_int_distribution<int> pat(0, 5);
  for (auto& f : m.tile_dense) f = coin(rng);
  for (auto& p : m.pattern_idx) p = static_cast<std::uint8_t>(pat(rng));
  return m;
}

std::vector<float> masked(const std::vector<float>& w, const mask::HybridMask& m) {
  const auto e = mask::expand(m);
  std::vector<float> out(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] * e[i];
  return out;
}

// Float, ascending k, separate multiply and add.
std::vector<float> naive_matmul(const std::vector<float>& a, const std::vector<float>& x,
                                std::size_t d1, std::size_t d2, std::size_t n) {
  std::vector<float> y(d1 * n, 0.0f);
  for (std::size_t i = 0; i < d1; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      float s = 0.0f;
      for (std::size_t k = 0; k < d2; ++k) {
        const float p = a[i * d2 + k] * x[k * n + j];
        s = s + p;
      }
      y[i * n + j] = s;
    }
  return y;
}

double rel_error(const std::vector<float>& got, const std::vector<float>& a,
                 const std::vector<float>& x, std::size_t d1, std::size_t d2, std::size_t n) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < d1; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d2; ++k) s += double(a[i * d2 + k]) * x[k * n + j];
      num += (got[i * n + j] - s) * (got[i * n + j] - s);
      den += s * s;
    }
  return std::sqrt(num / std::max(den, 1e-300));
}

}  // namespace

TEST(Compress, RoundTripEqualsMaskedWeights) {
  std::mt19937_64 rng(1);
  const std::array<std::size_t, 3> sizes{4, 8, 16};
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t b1 = sizes[trial % 3], b2 = sizes[(trial / 3) % 3];
    const std::size_t d1 = b1 * (1 + trial % 4), d2 = b2 * (1 + (trial / 4) % 3);
    const auto w = normals(d1 * d2, rng);
    const auto m = random_mask(d1, d2, b1, b2, 0.5, rng);
    const auto a = compress(w, d1, d2, m);
    ASSERT_EQ(decompress(a), masked(w, m));
    const auto back = deserialize(serialize(a));
    ASSERT_EQ(back, a);
    ASSERT_EQ(decompress(back), masked(w, m));
    const auto rm = to_mask(a);
    ASSERT_EQ(rm.tile_dense, m.tile_dense);
    for (std::size_t g = 0; g < m.groups(); ++g)
      if (!m.tile_dense[m.tile_of_group(g)]) ASSERT_EQ(rm.pattern_idx[g], m.pattern_idx[g]);
  }
}

TEST(Compress, DenseTilesKeepRawWeights) {
  std::mt19937_64 rng(2);
  const auto w = normals(8 * 8, rng);
  mask::HybridMask m(8, 8, 4, 4);
  m.tile_dense.assign(4, 1);
  const auto a = compress(w, 8, 8, m);
  EXPECT_EQ(decompress(a), w);
  EXPECT_EQ(a.density(), 1.0);
  EXPECT_THROW(compress(w, 8, 8, mask::HybridMask(8, 16, 4, 4)), LayoutError);
  EXPECT_THROW(compress(std::vector<float>(10), 8, 8, m), DimensionError);
}

TEST(Compress, PayloadSizes) {
  std::mt19937_64 rng(3);
  const auto w = normals(64 * 64, rng);
  mask::HybridMask dense(64, 64, 16, 16), sparse(64, 64, 16, 16);
  dense.tile_dense.assign(16, 1);
  const auto ad = serialize(compress(w, 64, 64, dense));
  EXPECT_EQ(ad.size(), kHeaderBytes + 2 + 4u * 64 * 64);
  const auto as = compress(w, 64, 64, sparse);
  EXPECT_EQ(as.sparse_values().size() * 4, 2u * 64 * 64);
  EXPECT_EQ(serialize(as).size(), kHeaderBytes + 2 + 16 * (2u * 256 + 256 / 8));
  EXPECT_EQ(tile_payload_bytes(16, 16, true), 4u * 256);
  EXPECT_EQ(tile_payload_bytes(16, 16, false), 2u * 256 + 32);
  EXPECT_EQ(tile_payload_bytes(4, 4, false), 2u * 16 + 2);
}

TEST(Serialize, LayoutIsBitExact) {
  // 4x4 single sparse tile: values in group order, nibbles low-first.
  std::vector<float> w(16);
  for (std::size_t i = 0; i < 16; ++i) w[i] = static_cast<float>(i + 1);
  mask::HybridMask m(4, 4, 4, 4);
  m.pattern_idx = {0, 5, 1, 4};  // 1100, 0011, 1010, 0101
  const auto bytes = serialize(compress(w, 4, 4, m));
  ASSERT_EQ(bytes.size(), 24u + 1 + 32 + 2);
  EXPECT_EQ(std::memcmp(bytes.data(), "PTCHHSM1", 8), 0);
  std::uint32_t hdr[4];
  std::memcpy(hdr, bytes.data() + 8, 16);
  EXPECT_EQ(hdr[0], 4u);
  EXPECT_EQ(hdr[3], 4u);
  EXPECT_EQ(bytes[24], 0u);
  float vals[8];
  std::memcpy(vals, bytes.data() + 25, 32);
  const float expect[8] = {1, 2, 7, 8, 9, 11, 14, 16};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(vals[i], expect[i]);
  // group 0: offsets (0,1) -> 0b0100, group 1: (2,3) -> 0b1110
  EXPECT_EQ(bytes[57], 0xE4);
  // group 2: (0,2) -> 0b1000, group 3: (1,3) -> 0b1101
  EXPECT_EQ(bytes[58], 0xD8);
}

TEST(Deserialize, CorruptionNamesTheOffset) {
  std::mt19937_64 rng(4);
  const auto w = normals(8 * 8, rng);
  const auto m = random_mask(8, 8, 4, 4, 0.5, rng);
  const auto good = serialize(compress(w, 8, 8, m));
  auto expect_offset = [](std::vector<std::uint8_t> b, const std::string& needle) {
    try {
      deserialize(b);
      ADD_FAILURE() << "accepted corrupted input";
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  auto bad_magic = good;
  bad_magic[3] = 'X';
  expect_offset(bad_magic, "byte offset 3");
  auto bad_dims = good;
  bad_dims[20] = 3;  // b2 = 3 does not divide d2
  expect_offset(bad_dims, "byte offset 20");
  expect_offset(std::vector<std::uint8_t>(good.begin(), good.end() - 1), "offset");
  auto trailing = good;
  trailing.push_back(0);
  expect_offset(trailing, "offset " + std::to_string(good.size()));
  expect_offset(std::vector<std::uint8_t>(good.begin(), good.begin() + 5), "offset");
  // Pad bits past the last tile must be zero.
  auto pad = good;
  pad[24] |= 0x80;
  expect_offset(pad, "offset 24");
}

TEST(Deserialize, RejectsInvalidMetadataNibbles) {
  std::vector<float> w(16, 1.0f);
  auto bytes = serialize(compress(w, 4, 4, mask::HybridMask(4, 4, 4, 4)));
  bytes[57] = 0x00;  // offsets (0,0) are not a 2:4 pattern
  EXPECT_THROW(deserialize(bytes), FormatError);
}

TEST(SaveLoad, FileRoundTrip) {
  std::mt19937_64 rng(5);
  const auto w = normals(16 * 32, rng);
  const auto a = compress(w, 16, 32, random_mask(16, 32, 8, 8, 0.3, rng));
  const auto path = std::filesystem::temp_directory_path() / "patch_test_roundtrip.hsm";
  save(a, path);
  EXPECT_EQ(load(path), a);
  std::filesystem::remove(path);
  EXPECT_THROW(load(path), IoError);
}

TEST(Spmm, Examples) {
  std::mt19937_64 rng(6);
  const auto w = normals(8 * 8, rng);
  const auto m = random_mask(8, 8, 4, 4, 0.5, rng);
  const auto a = compress(w, 8, 8, m);
  std::vector<float> eye(64, 0.0f);
  for (std::size_t i = 0; i < 8; ++i) eye[i * 8 + i] = 1.0f;
  EXPECT_EQ(spmm(a, eye, 8), decompress(a));
  const auto s = compress(w, 8, 8, random_mask(8, 8, 4, 4, 0.0, rng));
  const auto y = spmm(s, std::vector<float>(8, 1.0f), 1);
  const auto d = decompress(s);
  for (std::size_t r = 0; r < 8; ++r) {
    float sum = 0.0f;
    for (std::size_t c = 0; c < 8; ++c) sum += d[r * 8 + c];
    EXPECT_FLOAT_EQ(y[r], sum);
  }
  EXPECT_THROW(spmm(a, std::vector<float>(7), 1), DimensionError);
}

TEST(Spmm, MatchesDenseOracleOverGeometryGrid) {
  std::mt19937_64 rng(7);
  const std::array<std::size_t, 4> tiles{4, 8, 64, 128};
  const std::array<double, 6> dense_fraction{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  const std::size_t n = 5;
  for (std::size_t b1 : tiles)
    for (std::size_t b2 : tiles) {
      const std::size_t d1 = std::max<std::size_t>(b1, 128), d2 = std::max<std::size_t>(b2, 128);
      const auto w = normals(d1 * d2, rng);
      const auto x = normals(d2 * n, rng);
      for (double k : dense_fraction) {
        const auto a = compress(w, d1, d2, random_mask(d1, d2, b1, b2, k, rng));
        const auto dec = decompress(a);
        const auto ref = naive_matmul(dec, x, d1, d2, n);
        for (const auto& plan : candidate_plans(a)) {
          const auto y = spmm(a, x, n, plan);
          ASSERT_EQ(y, ref) << b1 << "x" << b2 << " k=" << k << " " << plan.describe();
          ASSERT_LT(rel_error(y, dec, x, d1, d2, n), 1e-5);
        }
      }
    }
}

TEST(Spmm, Random256At45PercentSparsity) {
  std::mt19937_64 rng(8);
  const auto w = normals(256 * 256, rng);
  const auto x = normals(256 * 16, rng);
  // 26 of 256 tiles dense: density ~0.55.
  mask::HybridMask m(256, 256, 16, 16);
  for (std::size_t t = 0; t < 26; ++t) m.tile_dense[t * 9 % m.tiles()] = 1;
  const auto a = compress(w, 256, 256, m);
  EXPECT_NEAR(a.density(), 0.5 + 0.5 * 26.0 / 256.0, 1e-12);
  EXPECT_LT(rel_error(spmm(a, x, 16), decompress(a), x, 256, 256, 16), 1e-5);
}

TEST(Spmm, ThreadCountDoesNotChangeResult) {
  std::mt19937_64 rng(9);
  const auto w = normals(256 * 128, rng);
  const auto x = normals(128 * 7, rng);
  const auto a = compress(w, 256, 128, random_mask(256, 128, 16, 16, 0.4, rng));
  const auto base = spmm(a, x, 7, candidate_plans(a, 1).front());
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  for (std::size_t t : {std::size_t{2}, std::size_t{3}, hw, std::size_t{8}}) {
    for (const auto& plan : candidate_plans(a, t)) ASSERT_EQ(spmm(a, x, 7, plan), base);
  }
}

TEST(Autotune, CandidatesAndSelection) {
  std::mt19937_64 rng(10);
  const auto w = normals(256 * 256, rng);
  const auto a = compress(w, 256, 256, random_mask(256, 256, 32, 32, 0.5, rng));
  const auto plans = candidate_plans(a);
  ASSERT_FALSE(plans.empty());
  for (const auto& p : plans) {
    EXPECT_TRUE(p.tile_rows % 32 == 0 || 32 % p.tile_rows == 0);
    EXPECT_TRUE(p.tile_cols % 32 == 0 || 32 % p.tile_cols == 0);
  }
  const auto rep = autotune(a, 4, 1, 5);
  EXPECT_EQ(rep.timings.size(), plans.size());
  for (const auto& t : rep.timings) EXPECT_GE(t.seconds.size(), 5u);
  EXPECT_EQ(rep.chosen, select_plan(rep.timings));
  const auto one = std::vector<KernelPlan>{plans.back()};
  EXPECT_EQ(autotune(a, 4, one, 5).plan(), plans.back());
  std::vector<PlanTiming> fixed(3);
  fixed[0].median = 2.0;
  fixed[1].median = 1.0;
  fixed[2].median = 1.0;
  EXPECT_EQ(select_plan(fixed), 1u);
  for (const auto& t : autotune(a, 4, 1, 2).timings) EXPECT_EQ(t.seconds.size(), 5u);
}

TEST(Accounting, Formulas) {
  std::mt19937_64 rng(11);
  const auto w = normals(128 * 128, rng);
  mask::HybridMask dense(128, 128, 16, 16);
  dense.tile_dense.assign(dense.tiles(), 1);
  const auto ad = accounting(compress(w, 128, 128, dense), 8);
  EXPECT_GE(ad.bytes_ratio, 1.0);
  EXPECT_EQ(ad.flops, ad.dense_flops);
  EXPECT_EQ(ad.dense_bytes, 4u * 128 * 128);

  const auto big = normals(1024 * 1024, rng);
  const auto as = accounting(compress(big, 1024, 1024, mask::HybridMask(1024, 1024, 128, 128)));
  EXPECT_NEAR(as.bytes_ratio, 0.5 + 1.0 / 32.0, 1e-3);
  EXPECT_EQ(as.bytes, serialize(compress(big, 1024, 1024, mask::HybridMask(1024, 1024, 128, 128))).size());

  mask::HybridMask tenth(40, 16, 4, 16);
  tenth.tile_dense[0] = 1;
  const auto at = accounting(compress(normals(40 * 16, rng), 40, 16, tenth), 3);
  EXPECT_DOUBLE_EQ(at.density, 0.55);
  EXPECT_DOUBLE_EQ(at.flops_ratio, 0.55);
  EXPECT_EQ(at.flops, 2u * 3 * 352);
}
