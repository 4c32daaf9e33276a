#include "reusegate/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace reusegate {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = char((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

std::string get_bytes(std::istream& is, std::uint32_t len) {
  std::string s(len, '\0');
  if (len > 0 && !is.read(s.data(), len)) throw std::runtime_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write(kCheckpointMagic, 4);
  os.put(char(kCheckpointVersion));
  std::string meta;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw std::invalid_argument("checkpoint: meta key/value contains a separator: " + k);
    }
    meta += k + "=" + v + "\n";
  }
  put_u32(os, std::uint32_t(meta.size()));
  os.write(meta.data(), std::streamsize(meta.size()));
  put_u32(os, std::uint32_t(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    if (Eigen::Index(r.values.size()) != r.shape.numel()) {
      throw std::invalid_argument("checkpoint: record '" + r.name + "' value count mismatch");
    }
    put_u32(os, std::uint32_t(r.name.size()));
    os.write(r.name.data(), std::streamsize(r.name.size()));
    for (int d : {r.shape.n, r.shape.c, r.shape.h, r.shape.w}) put_u32(os, std::uint32_t(d));
    os.write(reinterpret_cast<const char*>(r.values.data()), std::streamsize(r.values.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  const int version = is.get();
  if (version != kCheckpointVersion) throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  std::istringstream meta(get_bytes(is, get_u32(is)));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed meta line '" + line + "'");
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::uint32_t count = get_u32(is);
  ckpt.records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = get_bytes(is, get_u32(is));
    r.shape.n = int(get_u32(is));
    r.shape.c = int(get_u32(is));
    r.shape.h = int(get_u32(is));
    r.shape.w = int(get_u32(is));
    r.values.resize(std::size_t(r.shape.numel()));
    if (!r.values.empty() &&
        !is.read(reinterpret_cast<char*>(r.values.data()), std::streamsize(r.values.size() * sizeof(float)))) {
      throw std::runtime_error("checkpoint: truncated record '" + r.name + "'");
    }
    ckpt.records.push_back(std::move(r));
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  write_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return read_checkpoint(is);
}

template <typename S>
Checkpoint to_checkpoint(std::span<const Parameter<S>* const> params, std::map<std::string, std::string> meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  for (const Parameter<S>* p : params) {
    CheckpointRecord r{p->name, p->value.shape(), {}};
    r.values.reserve(std::size_t(p->value.numel()));
    for (Eigen::Index i = 0; i < p->value.numel(); ++i) r.values.push_back(float(p->value.data()(i)));
    ckpt.records.push_back(std::move(r));
  }
  return ckpt;
}

template <typename S>
void restore_parameters(const Checkpoint& ckpt, std::span<Parameter<S>* const> params) {
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : ckpt.records) by_name[r.name] = &r;
  for (Parameter<S>* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing parameter '" + p->name + "'");
    const CheckpointRecord& r = *it->second;
    if (!(r.shape == p->value.shape())) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + p->name + "': " + r.shape.str() + " vs " +
                               p->value.shape().str());
    }
    for (Eigen::Index i = 0; i < p->value.numel(); ++i) p->value.data()(i) = S(r.values[std::size_t(i)]);
    p->reset_optimizer_state();
  }
}

template Checkpoint to_checkpoint(std::span<const Parameter<float>* const>, std::map<std::string, std::string>);
template Checkpoint to_checkpoint(std::span<const Parameter<double>* const>, std::map<std::string, std::string>);
template void restore_parameters(const Checkpoint&, std::span<Parameter<float>* const>);
template void restore_parameters(const Checkpoint&, std::span<Parameter<double>* const>);

}  // namespace reusegate
