#include "eaa/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <zlib.h>

namespace eaa {

namespace {

constexpr unsigned char kVolumeMagic[5] = {'E', 'A', 'A', 'V', 0x01};

struct Ellipse {
  double cx, cy;  // centre, pixel units
  double a, b;    // semi-axes
  double c, s;    // unit rotation vector (cos, sin)
};

std::vector<std::uint8_t> rasterize(const Ellipse& e, std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> m(h * w, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = double(x) + 0.5 - e.cx;
      const double py = double(y) + 0.5 - e.cy;
      const double u = e.c * px + e.s * py;
      const double v = -e.s * px + e.c * py;
      if ((u / e.a) * (u / e.a) + (v / e.b) * (v / e.b) <= 1.0) m[y * w + x] = 1;
    }
  }
  return m;
}

// One step of the slice-to-slice drift. Steps are small relative to the
// clamp windows so successive outlines overlap heavily.
void advance(Ellipse& e, SplitMix64& rng, std::size_t h, std::size_t w, double edge) {
  e.cx = std::clamp(e.cx + rng.uniform(-1.0, 1.0) * 0.02 * double(w), 0.3 * double(w),
                    0.7 * double(w));
  e.cy = std::clamp(e.cy + rng.uniform(-1.0, 1.0) * 0.02 * double(h), 0.3 * double(h),
                    0.7 * double(h));
  e.a = std::clamp(e.a + rng.uniform(-1.0, 1.0) * 0.012 * edge, 0.15 * edge, 0.28 * edge);
  e.b = std::clamp(e.b + rng.uniform(-1.0, 1.0) * 0.012 * edge, 0.15 * edge, 0.28 * edge);
  e.c += rng.uniform(-1.0, 1.0) * 0.08;
  e.s += rng.uniform(-1.0, 1.0) * 0.08;
  const double n = std::sqrt(e.c * e.c + e.s * e.s);  // >= 1 - 0.08*sqrt(2), never 0
  e.c /= n;
  e.s /= n;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v & 0xff));
  out.push_back(std::uint8_t((v >> 8) & 0xff));
  out.push_back(std::uint8_t((v >> 16) & 0xff));
  out.push_back(std::uint8_t((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

void check_volume(const Volume& v, const char* who) {
  const std::size_t n = v.slices * v.height * v.width;
  if (v.image.size() != n || v.labels.size() != n)
    throw ValueError(std::string(who) + ": volume buffers do not match its dimensions");
}

}  // namespace

Volume gen_synthetic_volume(std::uint64_t seed, std::size_t slices, std::size_t height,
                            std::size_t width) {
  if (slices < 3)
    throw ValueError("gen_synthetic_volume: need at least 3 slices, got " +
                     std::to_string(slices));
  if (height < 16 || width < 16)
    throw ValueError("gen_synthetic_volume: minimum plane is 16x16, got " +
                     std::to_string(height) + "x" + std::to_string(width));

  const double edge = double(std::min(height, width));
  SplitMix64 rng(seed);

  Ellipse e;
  e.cx = double(width) * rng.uniform(0.38, 0.62);
  e.cy = double(height) * rng.uniform(0.38, 0.62);
  e.a = edge * rng.uniform(0.18, 0.26);
  e.b = edge * rng.uniform(0.18, 0.26);
  double c, s;
  do {
    c = rng.uniform(-1.0, 1.0);
    s = rng.uniform(-1.0, 1.0);
  } while (c * c + s * s < 0.01);
  const double n0 = std::sqrt(c * c + s * s);
  e.c = c / n0;
  e.s = s / n0;

  Volume v;
  v.slices = slices;
  v.height = height;
  v.width = width;
  v.seed = seed;
  const std::size_t plane = height * width;
  v.labels.resize(slices * plane);

  // Geometry pass first; the noise pass below reads the stream afterwards,
  // so label layout never depends on how many noise draws happened.
  std::vector<std::uint8_t> prev_mask;
  for (std::size_t i = 0; i < slices; ++i) {
    if (i > 0) advance(e, rng, height, width, edge);
    std::vector<std::uint8_t> mask = rasterize(e, height, width);
    if (i > 0) {
      // identical neighbours carry no edge signal; shove the centre toward
      // the roomier side until a pixel flips (no rng draws involved)
      const double dir = e.cx < 0.5 * double(width) ? 1.0 : -1.0;
      for (int tries = 0; tries < 20 && mask == prev_mask; ++tries) {
        e.cx += dir * 0.3;
        mask = rasterize(e, height, width);
      }
    }
    std::copy(mask.begin(), mask.end(), v.labels.begin() + std::ptrdiff_t(i * plane));
    prev_mask = std::move(mask);
  }

  v.image.resize(slices * plane);
  std::vector<double> raw(plane), blurred(plane);
  for (std::size_t i = 0; i < slices; ++i) {
    for (std::size_t p = 0; p < plane; ++p) {
      const double base = v.labels[i * plane + p] ? 0.7 : 0.3;
      raw[p] = std::clamp(base + 0.05 * rng.gauss(), 0.0, 1.0);
    }
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        double acc = 0.0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = long(y) + dy, xx = long(x) + dx;
            if (yy < 0 || xx < 0 || yy >= long(height) || xx >= long(width)) continue;
            acc += raw[std::size_t(yy) * width + std::size_t(xx)];
            ++cnt;
          }
        }
        blurred[y * width + x] = acc / double(cnt);
      }
    }
    for (std::size_t p = 0; p < plane; ++p) v.image[i * plane + p] = float(blurred[p]);
  }
  return v;
}

void save_volume(const Volume& v, const std::string& path) {
  check_volume(v, "save_volume");
  if (v.slices > 0xffffffffu || v.height > 0xffffffffu || v.width > 0xffffffffu)
    throw ValueError("save_volume: dimensions exceed the file format");

  std::vector<std::uint8_t> payload;
  payload.reserve(12 + v.image.size() * 5);
  put_u32(payload, std::uint32_t(v.slices));
  put_u32(payload, std::uint32_t(v.height));
  put_u32(payload, std::uint32_t(v.width));
  for (float f : v.image) put_u32(payload, std::bit_cast<std::uint32_t>(f));
  payload.insert(payload.end(), v.labels.begin(), v.labels.end());
  const std::uint32_t crc =
      std::uint32_t(crc32(0L, payload.data(), uInt(payload.size())));
  put_u32(payload, crc);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_volume: cannot open " + path);
  os.write(reinterpret_cast<const char*>(kVolumeMagic), sizeof kVolumeMagic);
  os.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
  if (!os) throw IoError("save_volume: write failed for " + path);
}

Volume load_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_volume: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof kVolumeMagic ||
      std::memcmp(bytes.data(), kVolumeMagic, sizeof kVolumeMagic) != 0)
    throw BadMagicError("load_volume: " + path + " is not a volume file");

  const std::uint8_t* p = bytes.data() + sizeof kVolumeMagic;
  const std::size_t rest = bytes.size() - sizeof kVolumeMagic;
  if (rest < 16) throw TruncatedFileError("load_volume: " + path + " ends inside the header");

  const std::uint32_t s = get_u32(p), h = get_u32(p + 4), w = get_u32(p + 8);
  const unsigned __int128 n128 =
      (unsigned __int128)(s) * (unsigned __int128)(h) * (unsigned __int128)(w);
  // 12-byte header, 4 bytes per image value, 1 per label, 4 of checksum
  if (n128 > (rest - 16) / 5)
    throw TruncatedFileError("load_volume: " + path + " is shorter than its header claims");
  const std::size_t n = std::size_t(n128);
  const std::size_t need = 16 + n * 5;
  if (rest > need) throw IoError("load_volume: " + path + " has trailing bytes");

  const std::uint32_t stored = get_u32(p + 12 + n * 5);
  const std::uint32_t actual = std::uint32_t(crc32(0L, p, uInt(12 + n * 5)));
  if (stored != actual)
    throw ChecksumError("load_volume: checksum mismatch in " + path);

  Volume v;
  v.slices = s;
  v.height = h;
  v.width = w;
  v.image.resize(n);
  v.labels.resize(n);
  const std::uint8_t* img = p + 12;
  for (std::size_t i = 0; i < n; ++i)
    v.image[i] = std::bit_cast<float>(get_u32(img + i * 4));
  std::memcpy(v.labels.data(), img + n * 4, n);
  return v;
}

std::vector<SliceTriplet> make_triplets(const Volume& v) {
  check_volume(v, "make_triplets");
  if (v.slices < 3)
    throw ValueError("make_triplets: need at least 3 slices, got " +
                     std::to_string(v.slices));
  const std::size_t plane = v.plane();
  std::vector<SliceTriplet> out;
  out.reserve(v.slices - 2);
  for (std::size_t i = 1; i + 1 < v.slices; ++i) {
    SliceTriplet t;
    t.height = v.height;
    t.width = v.width;
    t.prev.resize(plane);
    t.curr.resize(plane);
    t.next.resize(plane);
    t.onehot.resize(2 * plane);
    for (std::size_t pix = 0; pix < plane; ++pix) {
      t.prev[pix] = double(v.image[(i - 1) * plane + pix]);
      t.curr[pix] = double(v.image[i * plane + pix]);
      t.next[pix] = double(v.image[(i + 1) * plane + pix]);
      const bool fg = v.labels[i * plane + pix] != 0;
      t.onehot[pix] = fg ? 0.0 : 1.0;
      t.onehot[plane + pix] = fg ? 1.0 : 0.0;
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Batch> batch_iter(const std::vector<SliceTriplet>& triplets,
                              std::size_t batch_size, std::uint64_t shuffle_seed) {
  if (batch_size == 0) throw ValueError("batch_iter: batch size must be positive");
  if (triplets.empty()) return {};
  const std::size_t h = triplets[0].height, w = triplets[0].width;
  for (const auto& t : triplets)
    if (t.height != h || t.width != w)
      throw ShapeError("batch_iter: triplets mix plane sizes");

  std::vector<std::size_t> order(triplets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  SplitMix64 rng(shuffle_seed);
  for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.index(i + 1)]);

  const std::size_t plane = h * w;
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t b = std::min(batch_size, order.size() - start);
    std::vector<double> xp(b * plane), xc(b * plane), xn(b * plane), lab(b * 2 * plane);
    Batch batch;
    batch.indices.assign(order.begin() + std::ptrdiff_t(start),
                         order.begin() + std::ptrdiff_t(start + b));
    for (std::size_t k = 0; k < b; ++k) {
      const SliceTriplet& t = triplets[batch.indices[k]];
      std::copy(t.prev.begin(), t.prev.end(), xp.begin() + std::ptrdiff_t(k * plane));
      std::copy(t.curr.begin(), t.curr.end(), xc.begin() + std::ptrdiff_t(k * plane));
      std::copy(t.next.begin(), t.next.end(), xn.begin() + std::ptrdiff_t(k * plane));
      std::copy(t.onehot.begin(), t.onehot.end(),
                lab.begin() + std::ptrdiff_t(k * 2 * plane));
    }
    batch.x_prev = Tensor::create({b, 1, h, w}, std::move(xp));
    batch.x_curr = Tensor::create({b, 1, h, w}, std::move(xc));
    batch.x_next = Tensor::create({b, 1, h, w}, std::move(xn));
    batch.label = Tensor::create({b, 2, h, w}, std::move(lab));
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace eaa
