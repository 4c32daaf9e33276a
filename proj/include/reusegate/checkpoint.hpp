#pragma once

#include "reusegate/optim.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace reusegate {

// Binary layout, all integers little-endian:
//   "RGCK" | u8 version | u32 meta_len | meta (key=value\n lines)
//   | u32 record_count | records
// record: u32 name_len | name | u32 n, c, h, w | n*c*h*w float32
inline constexpr char kCheckpointMagic[4] = {'R', 'G', 'C', 'K'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointRecord> records;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename S>
Checkpoint to_checkpoint(std::span<const Parameter<S>* const> params, std::map<std::string, std::string> meta = {});

/// Copies record values into the matching parameters; every parameter must
/// be present with an identical shape.
template <typename S>
void restore_parameters(const Checkpoint& ckpt, std::span<Parameter<S>* const> params);

}  // namespace reusegate
