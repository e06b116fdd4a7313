#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eaa/common.hpp"

namespace eaa {

// One named f64 array. Checkpoints are flat lists of these; higher layers
// assign meaning through name prefixes (config/, param/, buffer/, opt/,
// train/).
struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

// Container layout: magic "EAAC\x01", u32 LE record count, then per record
// u32 name length + name bytes + u32 rank + u32 extents + f64 LE values,
// and a trailing CRC-32 (u32 LE) over everything after the magic.
void save_records(const std::vector<CheckpointRecord>& records, const std::string& path);
std::vector<CheckpointRecord> load_records(const std::string& path);

}  // namespace eaa
