#include "eaa/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

namespace eaa {

namespace {

constexpr unsigned char kCheckpointMagic[5] = {'E', 'A', 'A', 'C', 0x01};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v & 0xff));
  out.push_back(std::uint8_t((v >> 8) & 0xff));
  out.push_back(std::uint8_t((v >> 16) & 0xff));
  out.push_back(std::uint8_t((v >> 24) & 0xff));
}

void put_f64(std::vector<std::uint8_t>& out, double d) {
  std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

double get_f64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

// Bounds-checked cursor over the record region (checksum excluded).
struct Reader {
  const std::uint8_t* base;
  std::size_t size;
  std::size_t off = 0;
  const std::string& path;

  void need(std::size_t k) {
    if (off + k > size)
      throw TruncatedFileError("load_records: " + path + " ends inside a record");
  }
  std::uint32_t u32() {
    need(4);
    const std::uint32_t v = get_u32(base + off);
    off += 4;
    return v;
  }
  double f64() {
    need(8);
    const double v = get_f64(base + off);
    off += 8;
    return v;
  }
  std::string str(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(base + off), len);
    off += len;
    return s;
  }
};

}  // namespace

void save_records(const std::vector<CheckpointRecord>& records, const std::string& path) {
  if (records.size() > 0xffffffffu)
    throw ValueError("save_records: too many records for the format");

  std::vector<std::uint8_t> payload;
  put_u32(payload, std::uint32_t(records.size()));
  for (const auto& r : records) {
    if (r.name.empty()) throw ValueError("save_records: record with an empty name");
    if (r.name.size() > 0xffffffffu)
      throw ValueError("save_records: record name too long: " + r.name);
    if (r.data.size() != numel(r.shape))
      throw ValueError("save_records: " + r.name + " holds " + std::to_string(r.data.size()) +
                       " values for shape " + shape_str(r.shape));
    put_u32(payload, std::uint32_t(r.name.size()));
    payload.insert(payload.end(), r.name.begin(), r.name.end());
    put_u32(payload, std::uint32_t(r.shape.size()));
    for (std::size_t e : r.shape) {
      if (e > 0xffffffffu) throw ValueError("save_records: extent too large in " + r.name);
      put_u32(payload, std::uint32_t(e));
    }
    for (double d : r.data) put_f64(payload, d);
  }
  const std::uint32_t crc = std::uint32_t(crc32(0L, payload.data(), uInt(payload.size())));
  put_u32(payload, crc);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("save_records: cannot open " + path);
  os.write(reinterpret_cast<const char*>(kCheckpointMagic), sizeof kCheckpointMagic);
  os.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
  if (!os) throw IoError("save_records: write failed for " + path);
}

std::vector<CheckpointRecord> load_records(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_records: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)),
                                  std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof kCheckpointMagic ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw BadMagicError("load_records: " + path + " is not a checkpoint file");

  const std::size_t rest = bytes.size() - sizeof kCheckpointMagic;
  if (rest < 8)
    throw TruncatedFileError("load_records: " + path + " ends inside the header");

  const std::uint8_t* p = bytes.data() + sizeof kCheckpointMagic;
  Reader rd{p, rest - 4, 0, path};

  const std::uint32_t count = rd.u32();
  std::vector<CheckpointRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = rd.str(rd.u32());
    const std::uint32_t rank = rd.u32();
    r.shape.resize(rank);
    unsigned __int128 n128 = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      r.shape[d] = rd.u32();
      n128 *= r.shape[d];
    }
    if (n128 > (rd.size - rd.off) / 8)
      throw TruncatedFileError("load_records: " + path + " ends inside a record");
    const std::size_t n = std::size_t(n128);
    r.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) r.data[k] = rd.f64();
    out.push_back(std::move(r));
  }
  if (rd.off != rd.size)
    throw IoError("load_records: " + path + " has trailing bytes");

  const std::uint32_t stored = get_u32(p + rd.size);
  const std::uint32_t actual = std::uint32_t(crc32(0L, p, uInt(rd.size)));
  if (stored != actual) throw ChecksumError("load_records: checksum mismatch in " + path);
  return out;
}

}  // namespace eaa
