#include "patch/hybrid_format.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <thread>

#include <json.hpp>

#include "patch/error.hpp"

namespace patch::hsm {
namespace {

constexpr std::size_t kMaxElements = std::size_t{1} << 31;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(std::span<const std::uint8_t> in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[at + i]) << (8 * i);
  return v;
}

float get_f32(std::span<const std::uint8_t> in, std::size_t at) {
  return std::bit_cast<float>(get_u32(in, at));
}

std::size_t bitmap_bytes(std::size_t tiles) { return (tiles + 7) / 8; }

std::size_t meta_bytes(std::size_t b1, std::size_t b2) { return (b1 * b2 + 7) / 8; }

}  // namespace

void HybridSparseMatrix::init_geometry(std::size_t d1, std::size_t d2, std::size_t b1,
                                       std::size_t b2) {
  d1_ = d1;
  d2_ = d2;
  b1_ = b1;
  b2_ = b2;
  tile_dense_.assign((d1 / b1) * (d2 / b2), 0);
  tile_offset_.assign(tile_dense_.size(), 0);
}

void HybridSparseMatrix::assign_offsets() {
  std::size_t dense = 0, sparse = 0;
  const std::size_t tile = b1_ * b2_;
  for (std::size_t t = 0; t < tile_dense_.size(); ++t) {
    if (tile_dense_[t]) {
      tile_offset_[t] = dense;
      dense += tile;
    } else {
      tile_offset_[t] = sparse;
      sparse += tile / 2;
    }
  }
}

std::size_t HybridSparseMatrix::dense_tiles() const {
  return static_cast<std::size_t>(std::count(tile_dense_.begin(), tile_dense_.end(), 1));
}

std::size_t HybridSparseMatrix::stored_weights() const {
  return dense_values_.size() + sparse_values_.size();
}

double HybridSparseMatrix::density() const {
  return static_cast<double>(stored_weights()) / static_cast<double>(d1_ * d2_);
}

kernels::HybridView HybridSparseMatrix::view() const {
  kernels::HybridView v;
  v.d1 = d1_;
  v.d2 = d2_;
  v.b1 = b1_;
  v.b2 = b2_;
  v.tile_dense = tile_dense_.data();
  v.tile_offset = tile_offset_.data();
  v.dense_values = dense_values_.data();
  v.sparse_values = sparse_values_.data();
  v.sparse_meta = sparse_meta_.data();
  return v;
}

bool operator==(const HybridSparseMatrix& a, const HybridSparseMatrix& b) {
  auto same_bits = [](const std::vector<float>& x, const std::vector<float>& y) {
    return x.size() == y.size() &&
           (x.empty() || std::memcmp(x.data(), y.data(), x.size() * sizeof(float)) == 0);
  };
  return a.d1_ == b.d1_ && a.d2_ == b.d2_ && a.b1_ == b.b1_ && a.b2_ == b.b2_ &&
         a.tile_dense_ == b.tile_dense_ && a.tile_offset_ == b.tile_offset_ &&
         same_bits(a.dense_values_, b.dense_values_) &&
         same_bits(a.sparse_values_, b.sparse_values_) && a.sparse_meta_ == b.sparse_meta_;
}

HybridSparseMatrix compress(std::span<const float> weights, std::size_t d1, std::size_t d2,
                            const mask::HybridMask& mask) {
  if (mask.d1 != d1 || mask.d2 != d2) {
    throw LayoutError("compress: mask covers " + std::to_string(mask.d1) + "x" +
                         std::to_string(mask.d2) + " but weights are " + std::to_string(d1) +
                         "x" + std::to_string(d2));
  }
  if (weights.size() != d1 * d2) {
    throw DimensionError("compress: expected " + std::to_string(d1 * d2) + " weights, got " +
                         std::to_string(weights.size()));
  }
  mask::check_geometry(d1, d2, mask.b1, mask.b2);
  if (mask.tile_dense.size() != mask.tiles() || mask.pattern_idx.size() != mask.groups()) {
    throw LayoutError("compress: mask arrays do not match its geometry");
  }

  HybridSparseMatrix out;
  out.init_geometry(d1, d2, mask.b1, mask.b2);
  const std::size_t b1 = mask.b1, b2 = mask.b2;
  for (std::size_t tr = 0; tr < out.grid_rows(); ++tr) {
    for (std::size_t tc = 0; tc < out.grid_cols(); ++tc) {
      const std::size_t t = tr * out.grid_cols() + tc;
      const bool dense = mask.tile_dense[t] != 0;
      out.tile_dense_[t] = dense ? 1 : 0;
      for (std::size_t r = 0; r < b1; ++r) {
        const std::size_t base = (tr * b1 + r) * d2 + tc * b2;
        if (dense) {
          out.dense_values_.insert(out.dense_values_.end(), weights.begin() + base,
                                   weights.begin() + base + b2);
          continue;
        }
        for (std::size_t c = 0; c < b2; c += 4) {
          const std::size_t g = (base + c) / 4;
          const auto& off = mask::kPatternOffsets.at(mask.pattern_idx[g]);
          out.sparse_values_.push_back(weights[base + c + off[0]]);
          out.sparse_values_.push_back(weights[base + c + off[1]]);
          out.sparse_meta_.push_back(static_cast<std::uint8_t>(off[0] | (off[1] << 2)));
        }
      }
    }
  }
  out.assign_offsets();
  return out;
}

std::vector<float> decompress(const HybridSparseMatrix& a) {
  std::vector<float> out(a.d1() * a.d2(), 0.0f);
  const std::size_t b1 = a.b1(), b2 = a.b2(), d2 = a.d2();
  std::size_t dense_pos = 0, sparse_pos = 0, meta_pos = 0;
  for (std::size_t tr = 0; tr < a.grid_rows(); ++tr) {
    for (std::size_t tc = 0; tc < a.grid_cols(); ++tc) {
      const bool dense = a.tile_is_dense(tr * a.grid_cols() + tc);
      for (std::size_t r = 0; r < b1; ++r) {
        float* row = out.data() + (tr * b1 + r) * d2 + tc * b2;
        if (dense) {
          std::copy_n(a.dense_values().begin() + static_cast<std::ptrdiff_t>(dense_pos), b2, row);
          dense_pos += b2;
          continue;
        }
        for (std::size_t c = 0; c < b2; c += 4) {
          const std::uint8_t m = a.sparse_meta()[meta_pos++];
          row[c + (m & 3u)] = a.sparse_values()[sparse_pos++];
          row[c + ((m >> 2) & 3u)] = a.sparse_values()[sparse_pos++];
        }
      }
    }
  }
  return out;
}

mask::HybridMask to_mask(const HybridSparseMatrix& a) {
  mask::HybridMask out(a.d1(), a.d2(), a.b1(), a.b2());
  std::size_t meta_pos = 0;
  for (std::size_t tr = 0; tr < a.grid_rows(); ++tr) {
    for (std::size_t tc = 0; tc < a.grid_cols(); ++tc) {
      const std::size_t t = tr * a.grid_cols() + tc;
      out.tile_dense[t] = a.tile_is_dense(t) ? 1 : 0;
      if (out.tile_dense[t]) continue;
      for (std::size_t r = 0; r < a.b1(); ++r) {
        const std::size_t base = (tr * a.b1() + r) * a.d2() + tc * a.b2();
        for (std::size_t c = 0; c < a.b2(); c += 4) {
          const std::uint8_t m = a.sparse_meta()[meta_pos++];
          out.pattern_idx[(base + c) / 4] =
              static_cast<std::uint8_t>(mask::pattern_from_offsets(m & 3u, (m >> 2) & 3u));
        }
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> serialize(const HybridSparseMatrix& a) {
  std::vector<std::uint8_t> out;
  out.reserve(accounting(a).bytes);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, static_cast<std::uint32_t>(a.d1()));
  put_u32(out, static_cast<std::uint32_t>(a.d2()));
  put_u32(out, static_cast<std::uint32_t>(a.b1()));
  put_u32(out, static_cast<std::uint32_t>(a.b2()));
  std::vector<std::uint8_t> bitmap(bitmap_bytes(a.tiles()), 0);
  for (std::size_t t = 0; t < a.tiles(); ++t)
    if (a.tile_is_dense(t)) bitmap[t / 8] |= static_cast<std::uint8_t>(1u << (t % 8));
  out.insert(out.end(), bitmap.begin(), bitmap.end());

  const std::size_t tile = a.b1() * a.b2();
  std::size_t dense_pos = 0, sparse_pos = 0, meta_pos = 0;
  for (std::size_t t = 0; t < a.tiles(); ++t) {
    if (a.tile_is_dense(t)) {
      for (std::size_t i = 0; i < tile; ++i) put_f32(out, a.dense_values()[dense_pos++]);
      continue;
    }
    for (std::size_t i = 0; i < tile / 2; ++i) put_f32(out, a.sparse_values()[sparse_pos++]);
    std::vector<std::uint8_t> packed(meta_bytes(a.b1(), a.b2()), 0);
    for (std::size_t g = 0; g < tile / 4; ++g) {
      const std::uint8_t nib = a.sparse_meta()[meta_pos++] & 0x0Fu;
      packed[g / 2] |= static_cast<std::uint8_t>(g % 2 == 0 ? nib : nib << 4);
    }
    out.insert(out.end(), packed.begin(), packed.end());
  }
  return out;
}

HybridSparseMatrix deserialize(std::span<const std::uint8_t> in) {
  if (in.size() < kHeaderBytes) throw FormatError("truncated .hsm header", in.size());
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) {
    if (in[i] != static_cast<std::uint8_t>(kMagic[i])) throw FormatError("bad .hsm magic", i);
  }
  const std::size_t d1 = get_u32(in, 8), d2 = get_u32(in, 12);
  const std::size_t b1 = get_u32(in, 16), b2 = get_u32(in, 20);
  if (d1 == 0) throw FormatError("zero row count", 8);
  if (d2 == 0 || d2 % 4 != 0) throw FormatError("column count must be a positive multiple of 4", 12);
  if (d1 * d2 > kMaxElements) throw FormatError("matrix too large", 8);
  if (b1 == 0 || d1 % b1 != 0) throw FormatError("tile rows do not divide row count", 16);
  if (b2 == 0 || b2 % 4 != 0 || d2 % b2 != 0) {
    throw FormatError("tile columns must be a multiple of 4 dividing the column count", 20);
  }

  HybridSparseMatrix out;
  out.init_geometry(d1, d2, b1, b2);
  std::size_t pos = kHeaderBytes;
  const std::size_t bm = bitmap_bytes(out.tiles());
  if (in.size() < pos + bm) throw FormatError("truncated tile bitmap", in.size());
  for (std::size_t t = 0; t < out.tiles(); ++t)
    out.tile_dense_[t] = (in[pos + t / 8] >> (t % 8)) & 1u;
  if (out.tiles() % 8 != 0 && (in[pos + bm - 1] >> (out.tiles() % 8)) != 0) {
    throw FormatError("nonzero bitmap padding bits", pos + bm - 1);
  }
  pos += bm;

  const std::size_t tile = b1 * b2;
  for (std::size_t t = 0; t < out.tiles(); ++t) {
    const std::size_t need = tile_payload_bytes(b1, b2, out.tile_dense_[t] != 0);
    if (in.size() < pos + need) throw FormatError("truncated tile payload", in.size());
    if (out.tile_dense_[t]) {
      for (std::size_t i = 0; i < tile; ++i) out.dense_values_.push_back(get_f32(in, pos + 4 * i));
      pos += need;
      continue;
    }
    for (std::size_t i = 0; i < tile / 2; ++i) out.sparse_values_.push_back(get_f32(in, pos + 4 * i));
    const std::size_t meta_at = pos + 2 * tile;
    for (std::size_t g = 0; g < tile / 4; ++g) {
      const std::uint8_t byte = in[meta_at + g / 2];
      const std::uint8_t nib = g % 2 == 0 ? (byte & 0x0Fu) : (byte >> 4);
      if ((nib & 3u) >= ((nib >> 2) & 3u)) {
        throw FormatError("invalid 2:4 metadata nibble", meta_at + g / 2);
      }
      out.sparse_meta_.push_back(nib);
    }
    if ((tile / 4) % 2 == 1 && (in[meta_at + tile / 8] >> 4) != 0) {
      throw FormatError("nonzero metadata padding", meta_at + tile / 8);
    }
    pos += need;
  }
  if (pos != in.size()) throw FormatError("trailing bytes after payload", pos);
  out.assign_offsets();
  return out;
}

void save(const HybridSparseMatrix& a, const std::filesystem::path& path) {
  const auto bytes = serialize(a);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

HybridSparseMatrix load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::string KernelPlan::describe() const {
  return std::to_string(tile_rows) + "x" + std::to_string(tile_cols) + "/" +
         (order == kernels::LoopOrder::kBandMajor ? "band-major" : "block-major") + "/t" +
         std::to_string(threads);
}

std::vector<KernelPlan> candidate_plans(const HybridSparseMatrix& a, std::size_t threads) {
  const std::pair<std::size_t, std::size_t> sizes[] = {
      {128, 128}, {128, 64}, {64, 128}, {64, 64}, {a.b1(), a.b2()}};
  auto compatible = [](std::size_t plan, std::size_t storage) {
    return plan % storage == 0 || storage % plan == 0;
  };
  std::vector<KernelPlan> out;
  for (auto [r, c] : sizes) {
    r = std::min(r, a.d1());
    c = std::min(c, a.d2());
    if (!compatible(r, a.b1()) || !compatible(c, a.b2()) || c % 4 != 0) continue;
    for (auto order : {kernels::LoopOrder::kBandMajor, kernels::LoopOrder::kBlockMajor}) {
      KernelPlan p{r, c, order, std::max<std::size_t>(1, threads)};
      if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(p);
    }
  }
  return out;
}

std::vector<float> spmm(const HybridSparseMatrix& a, std::span<const float> x, std::size_t n,
                        const KernelPlan& plan) {
  if (x.size() != a.d2() * n) {
    throw DimensionError("spmm: matrix is " + std::to_string(a.d1()) + "x" +
                         std::to_string(a.d2()) + " but right-hand side has " +
                         std::to_string(x.size()) + " values for width " + std::to_string(n));
  }
  std::vector<float> y(a.d1() * n, 0.0f);
  if (n == 0) return y;
  const auto view = a.view();
  const kernels::SpmmBlocking blocking{plan.tile_rows, plan.tile_cols, plan.order};
  const std::size_t band = std::max<std::size_t>(1, plan.tile_rows);
  const std::size_t bands = (a.d1() + band - 1) / band;
  const std::size_t workers = std::clamp<std::size_t>(plan.threads, 1, bands);
  auto run = [&](std::size_t w) {
    const std::size_t first = bands * w / workers, last = bands * (w + 1) / workers;
    kernels::spmm_rows(view, x.data(), n, y.data(), first * band, std::min(a.d1(), last * band),
                       blocking);
  };
  if (workers == 1) {
    run(0);
    return y;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run, w);
  run(0);
  return y;
}

std::uint64_t tile_payload_bytes(std::size_t b1, std::size_t b2, bool dense) {
  const std::uint64_t tile = static_cast<std::uint64_t>(b1) * b2;
  return dense ? 4 * tile : 2 * tile + meta_bytes(b1, b2);
}

Accounting accounting(const HybridSparseMatrix& a, std::size_t n) {
  Accounting acc;
  acc.bytes = kHeaderBytes + bitmap_bytes(a.tiles());
  for (std::size_t t = 0; t < a.tiles(); ++t) acc.bytes += tile_payload_bytes(a.b1(), a.b2(), a.tile_is_dense(t));
  const std::uint64_t elems = static_cast<std::uint64_t>(a.d1()) * a.d2();
  acc.dense_bytes = 4 * elems;
  acc.bytes_ratio = static_cast<double>(acc.bytes) / static_cast<double>(acc.dense_bytes);
  acc.flops = 2ull * n * a.stored_weights();
  acc.dense_flops = 2ull * n * elems;
  acc.density = a.density();
  acc.flops_ratio = static_cast<double>(a.stored_weights()) / static_cast<double>(elems);
  return acc;
}

void write_meta_json(const HybridSparseMatrix& a, std::size_t n, const std::filesystem::path& path) {
  const Accounting acc = accounting(a, n);
  nlohmann::json j{{"d1", a.d1()},
                   {"d2", a.d2()},
                   {"b1", a.b1()},
                   {"b2", a.b2()},
                   {"tiles", a.tiles()},
                   {"dense_tiles", a.dense_tiles()},
                   {"batch", n},
                   {"bytes", acc.bytes},
                   {"dense_bytes", acc.dense_bytes},
                   {"bytes_ratio", acc.bytes_ratio},
                   {"flops", acc.flops},
                   {"dense_flops", acc.dense_flops},
                   {"flops_ratio", acc.flops_ratio},
                   {"density", acc.density}};
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f << j.dump(2) << '\n';
}

}  // namespace patch::hsm
