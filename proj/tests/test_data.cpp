#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "eaa/common.hpp"
#include "eaa/data.hpp"
#include "eaa/metrics.hpp"

using namespace eaa;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* stem) {
  return fs::temp_directory_path() / (std::string("eaa_") + stem + ".eaav");
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

std::vector<std::uint8_t> slice_mask(const Volume& v, std::size_t i) {
  return {v.labels.begin() + std::ptrdiff_t(i * v.plane()),
          v.labels.begin() + std::ptrdiff_t((i + 1) * v.plane())};
}

// fg pixels with a background 4-neighbour (image border counts as background)
std::vector<std::uint8_t> edge_of(const std::vector<std::uint8_t>& m, std::size_t h,
                                  std::size_t w) {
  std::vector<std::uint8_t> e(h * w, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      const bool inner = y > 0 && y + 1 < h && x > 0 && x + 1 < w &&
                         m[(y - 1) * w + x] && m[(y + 1) * w + x] && m[y * w + x - 1] &&
                         m[y * w + x + 1];
      if (!inner) e[y * w + x] = 1;
    }
  return e;
}

}  // namespace

TEST_CASE("generator rejects degenerate requests") {
  CHECK_THROWS_AS(gen_synthetic_volume(1, 2, 32, 32), ValueError);
  CHECK_THROWS_AS(gen_synthetic_volume(1, 3, 15, 32), ValueError);
  CHECK_THROWS_AS(gen_synthetic_volume(1, 3, 32, 15), ValueError);
}

TEST_CASE("generator is deterministic in the seed") {
  Volume a = gen_synthetic_volume(42, 4, 24, 24);
  Volume b = gen_synthetic_volume(42, 4, 24, 24);
  CHECK(a.image == b.image);
  CHECK(a.labels == b.labels);
  Volume c = gen_synthetic_volume(43, 4, 24, 24);
  CHECK(a.labels != c.labels);
}

TEST_CASE("generated volumes keep their structural guarantees") {
  std::size_t checked_pairs = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::size_t S, H, W;
    switch (seed % 3) {
      case 0: S = 3; H = 16; W = 16; break;
      case 1: S = 5; H = 32; W = 32; break;
      default: S = 4; H = 24; W = 40; break;
    }
    const Volume v = gen_synthetic_volume(seed, S, H, W);
    REQUIRE(v.image.size() == S * H * W);
    REQUIRE(v.labels.size() == S * H * W);

    for (float f : v.image) {
      REQUIRE(f >= 0.0f);
      REQUIRE(f <= 1.0f);
    }
    for (auto l : v.labels) REQUIRE(l <= 1);

    for (std::size_t i = 0; i < S; ++i) {
      const auto m = slice_mask(v, i);
      std::size_t fg = 0;
      for (auto b : m) fg += b;
      REQUIRE(fg > 0);
      REQUIRE(fg < H * W);

      // the object is brighter than its surroundings
      double fg_sum = 0.0, bg_sum = 0.0;
      for (std::size_t p = 0; p < H * W; ++p)
        (m[p] ? fg_sum : bg_sum) += double(v.image[i * H * W + p]);
      CHECK(fg_sum / double(fg) > bg_sum / double(H * W - fg) + 0.15);
    }

    for (std::size_t i = 0; i + 1 < S; ++i) {
      const auto ma = slice_mask(v, i);
      const auto mb = slice_mask(v, i + 1);
      REQUIRE(ma != mb);

      std::size_t inter = 0, uni = 0;
      for (std::size_t p = 0; p < H * W; ++p) {
        inter += (ma[p] && mb[p]) ? 1 : 0;
        uni += (ma[p] || mb[p]) ? 1 : 0;
      }
      const double iou = double(inter) / double(uni);
      CHECK(iou > 0.6);
      CHECK(iou < 1.0);

      // changed pixels cluster around the outline of the later slice
      const auto edge = edge_of(mb, H, W);
      const auto sq = squared_edt(BinaryMask::plane(H, W, edge));
      std::size_t diff = 0, near = 0;
      for (std::size_t p = 0; p < H * W; ++p) {
        if (ma[p] == mb[p]) continue;
        ++diff;
        if (sq[p] <= 4.0) ++near;
      }
      REQUIRE(diff > 0);
      CHECK(double(near) / double(diff) >= 0.9);
      ++checked_pairs;
    }
  }
  // 34 seeds of 3 slices, 33 of 5, 33 of 4: 34*2 + 33*4 + 33*3 adjacent pairs
  CHECK(checked_pairs == 299);
}

TEST_CASE("volume files round-trip bit for bit") {
  SplitMix64 rng(0xf11eu);
  const fs::path path = temp_file("roundtrip");
  for (int t = 0; t < 50; ++t) {
    const std::size_t S = 3 + rng.index(3);
    const std::size_t H = 16 + rng.index(3) * 4;
    const std::size_t W = 16 + rng.index(3) * 4;
    const Volume v = gen_synthetic_volume(rng.next_u64(), S, H, W);
    save_volume(v, path.string());
    const Volume r = load_volume(path.string());
    REQUIRE(r.slices == v.slices);
    REQUIRE(r.height == v.height);
    REQUIRE(r.width == v.width);
    REQUIRE(r.image == v.image);
    REQUIRE(r.labels == v.labels);
  }
  fs::remove(path);
}

TEST_CASE("volume loader rejects damaged files") {
  const Volume v = gen_synthetic_volume(7, 3, 16, 16);
  const fs::path path = temp_file("damage");
  save_volume(v, path.string());
  const std::vector<std::uint8_t> good = read_bytes(path);

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_volume((path.string() + ".absent")), IoError);
  }
  SUBCASE("wrong magic") {
    auto bad = good;
    bad[0] = 'X';
    write_bytes(path, bad);
    CHECK_THROWS_AS(load_volume(path.string()), BadMagicError);
  }
  SUBCASE("file shorter than the magic") {
    write_bytes(path, {good.begin(), good.begin() + 3});
    CHECK_THROWS_AS(load_volume(path.string()), BadMagicError);
  }
  SUBCASE("file ends inside the header") {
    write_bytes(path, {good.begin(), good.begin() + 10});
    CHECK_THROWS_AS(load_volume(path.string()), TruncatedFileError);
  }
  SUBCASE("file ends inside the data") {
    write_bytes(path, {good.begin(), good.end() - 10});
    CHECK_THROWS_AS(load_volume(path.string()), TruncatedFileError);
  }
  SUBCASE("flipped image byte") {
    auto bad = good;
    bad[5 + 12 + 3] ^= 0x40;
    write_bytes(path, bad);
    CHECK_THROWS_AS(load_volume(path.string()), ChecksumError);
  }
  SUBCASE("flipped label byte") {
    auto bad = good;
    bad[bad.size() - 5] ^= 0x01;
    write_bytes(path, bad);
    CHECK_THROWS_AS(load_volume(path.string()), ChecksumError);
  }
  SUBCASE("trailing bytes") {
    auto bad = good;
    bad.push_back(0);
    write_bytes(path, bad);
    CHECK_THROWS_AS(load_volume(path.string()), IoError);
  }
  fs::remove(path);
}

TEST_CASE("triplets cover exactly the interior slices") {
  const Volume v5 = gen_synthetic_volume(11, 5, 16, 16);
  const auto t5 = make_triplets(v5);
  REQUIRE(t5.size() == 3);

  const Volume v3 = gen_synthetic_volume(11, 3, 16, 16);
  CHECK(make_triplets(v3).size() == 1);

  Volume flat;
  flat.slices = 2;
  flat.height = 16;
  flat.width = 16;
  flat.image.assign(2 * 256, 0.0f);
  flat.labels.assign(2 * 256, 0);
  CHECK_THROWS_AS(make_triplets(flat), ValueError);

  const std::size_t plane = v5.plane();
  for (std::size_t k = 0; k < t5.size(); ++k) {
    const std::size_t i = k + 1;  // interior slice index
    for (std::size_t p = 0; p < plane; ++p) {
      REQUIRE(t5[k].prev[p] == double(v5.image[(i - 1) * plane + p]));
      REQUIRE(t5[k].curr[p] == double(v5.image[i * plane + p]));
      REQUIRE(t5[k].next[p] == double(v5.image[(i + 1) * plane + p]));
      const double bg = t5[k].onehot[p], fg = t5[k].onehot[plane + p];
      REQUIRE(bg + fg == 1.0);
      REQUIRE(fg == (v5.labels[i * plane + p] ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("batching shuffles, slices, and keeps the stragglers") {
  const Volume v = gen_synthetic_volume(21, 12, 16, 16);  // 10 triplets
  const auto ts = make_triplets(v);
  REQUIRE(ts.size() == 10);

  CHECK_THROWS_AS(batch_iter(ts, 0, 1), ValueError);
  CHECK(batch_iter({}, 4, 1).empty());

  const auto batches = batch_iter(ts, 4, 99);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].indices.size() == 4);
  CHECK(batches[1].indices.size() == 4);
  CHECK(batches[2].indices.size() == 2);

  // the concatenated indices are a permutation of all triplets
  std::vector<bool> seen(ts.size(), false);
  for (const auto& b : batches)
    for (std::size_t idx : b.indices) {
      REQUIRE(idx < ts.size());
      REQUIRE(!seen[idx]);
      seen[idx] = true;
    }

  const Shape want_x{4, 1, 16, 16};
  CHECK(batches[0].x_prev.shape() == want_x);
  CHECK(batches[0].x_curr.shape() == want_x);
  CHECK(batches[0].x_next.shape() == want_x);
  CHECK(batches[0].label.shape() == Shape{4, 2, 16, 16});
  CHECK(batches[2].x_curr.shape() == Shape{2, 1, 16, 16});

  // batch rows carry the exact triplet data
  const std::size_t plane = 256;
  for (std::size_t k = 0; k < 4; ++k) {
    const SliceTriplet& t = ts[batches[0].indices[k]];
    for (std::size_t p = 0; p < plane; ++p) {
      REQUIRE(batches[0].x_curr.data()[k * plane + p] == t.curr[p]);
      REQUIRE(batches[0].label.data()[k * 2 * plane + p] == t.onehot[p]);
    }
  }

  const auto again = batch_iter(ts, 4, 99);
  CHECK(again[0].indices == batches[0].indices);
  const auto other = batch_iter(ts, 4, 100);
  bool same = true;
  for (std::size_t i = 0; i < 10; ++i) {
    std::size_t a = 0, b = 0;
    // compare flattened orders
    const auto& ba = i < 4 ? batches[0] : (i < 8 ? batches[1] : batches[2]);
    const auto& bo = i < 4 ? other[0] : (i < 8 ? other[1] : other[2]);
    a = ba.indices[i % 4];
    b = bo.indices[i % 4];
    if (a != b) same = false;
  }
  CHECK(!same);
}
