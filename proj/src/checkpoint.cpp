// SPDX-License-Identifier: Apache-2.0
#include "prbfpn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace prbfpn {

namespace {

constexpr char kMagic[4] = {'P', 'R', 'B', 'F'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  const std::string& str() const { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointMismatch("checkpoint truncated");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string data_;
  std::size_t pos_ = 0;
};

std::string dims_str(const std::vector<std::uint32_t>& d) {
  std::ostringstream os;
  for (std::size_t i = 0; i < d.size(); ++i) os << (i ? "x" : "") << d[i];
  return os.str();
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointEntry> entries) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw ContractError("checkpoint: parameter name too long: " + e.name);
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.u8(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.u32(d);
    for (float v : e.values) w.f32(v);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(w.str().data(), static_cast<std::streamsize>(w.str().size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointMismatch("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str());
  if (r.bytes(4) != std::string(kMagic, 4)) throw CheckpointMismatch(path.string() + " is not a PRBF checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointMismatch("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.u32();
  std::vector<CheckpointEntry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.bytes(r.u16());
    const int rank = r.u8();
    std::size_t n = 1;
    for (int d = 0; d < rank; ++d) {
      e.dims.push_back(r.u32());
      n *= e.dims.back();
    }
    e.values.resize(n);
    for (auto& v : e.values) v = r.f32();
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw CheckpointMismatch("trailing bytes in checkpoint " + path.string());
  return entries;
}

template <typename T>
std::vector<CheckpointEntry> to_entries(std::span<const Parameter<T>> params) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(params.size());
  for (const auto& p : params) {
    CheckpointEntry e{p.name, p.dims(), {}};
    e.values.reserve(p.tensor.numel());
    for (T v : p.tensor.data()) e.values.push_back(static_cast<float>(v));
    entries.push_back(std::move(e));
  }
  return entries;
}

template <typename T>
void save_parameters(const std::filesystem::path& path, std::span<const Parameter<T>> params) {
  const auto entries = to_entries(params);
  write_checkpoint(path, entries);
}

template <typename T>
void assign_entries(std::span<const CheckpointEntry> entries, std::span<Parameter<T>> params) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;
  std::vector<std::string> problems;
  std::map<std::string, bool> expected;
  for (const auto& p : params) {
    expected[p.name] = true;
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      problems.push_back("missing " + p.name);
    } else if (it->second->dims != p.dims()) {
      problems.push_back("shape " + p.name + " (" + dims_str(it->second->dims) + " in file, " +
                         dims_str(p.dims()) + " in model)");
    }
  }
  for (const auto& e : entries) {
    if (!expected.count(e.name)) problems.push_back("unexpected " + e.name);
  }
  if (entries.size() != by_name.size()) problems.push_back("duplicate names in checkpoint");
  if (!problems.empty()) {
    std::string msg = "checkpoint does not match model:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw CheckpointMismatch(msg);
  }
  for (auto& p : params) {
    const auto& src = by_name.at(p.name)->values;
    auto dst = p.tensor.mutable_data();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

template <typename T>
void load_parameters(const std::filesystem::path& path, std::span<Parameter<T>> params) {
  const auto entries = read_checkpoint(path);
  assign_entries<T>(entries, params);
}

#define PRBFPN_INSTANTIATE_CKPT(T)                                                                \
  template std::vector<CheckpointEntry> to_entries<T>(std::span<const Parameter<T>>);            \
  template void save_parameters<T>(const std::filesystem::path&, std::span<const Parameter<T>>); \
  template void load_parameters<T>(const std::filesystem::path&, std::span<Parameter<T>>);       \
  template void assign_entries<T>(std::span<const CheckpointEntry>, std::span<Parameter<T>>);

PRBFPN_INSTANTIATE_CKPT(float)
PRBFPN_INSTANTIATE_CKPT(double)

}  // namespace prbfpn
