#pragma once

// Binary checkpoint files: named, group-tagged f64 tensors plus an optional
// prototype bank. Values are stored as raw little-endian IEEE doubles, so a
// save/load round trip is exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ttacil/params.hpp"
#include "ttacil/prototypes.hpp"

namespace ttacil {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

class CheckpointFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kCheckpointMagic[8] = {'T', 'T', 'A', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointFile {
  ModelCheckpoint params;
  std::optional<PrototypeBank> bank;
};

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_tensor(const Tensor& t) {
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(d);
    put_bytes(t.data().data(), t.numel() * sizeof(double));
  }
  const std::vector<unsigned char>& bytes() const noexcept { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(std::vector<unsigned char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  Tensor get_tensor() {
    const auto rank = get<std::uint32_t>();
    if (rank == 0 || rank > 8) fail("bad tensor rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(get<std::uint64_t>());
      if (d == 0 || d > (std::size_t{1} << 32)) fail("bad tensor dimension");
      numel *= d;
    }
    if (numel > remaining() / sizeof(double)) fail("truncated tensor payload");
    std::vector<double> data(numel);
    std::memcpy(data.data(), take(numel * sizeof(double)), numel * sizeof(double));
    return Tensor(std::move(shape), std::move(data));
  }
  const unsigned char* take(std::size_t n) {
    if (n > remaining()) fail("truncated file");
    const auto* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }
  [[noreturn]] void fail(const std::string& msg) const {
    throw CheckpointFormatError("'" + path_ + "': " + msg);
  }

 private:
  std::vector<unsigned char> buf_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Writes to `<path>.tmp` and renames, so readers never see a partial file.
inline void save_checkpoint(const std::string& path, const ModelCheckpoint& ckpt,
                            const PrototypeBank* bank = nullptr) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.entries().size()));
  for (const auto& e : ckpt.entries()) {
    w.put_string(e.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(e.group));
    w.put_tensor(e.value);
  }
  w.put<std::uint8_t>(bank != nullptr ? 1 : 0);
  if (bank != nullptr) {
    w.put<std::uint64_t>(bank->dim());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(bank->size()));
    for (const auto& [k, p] : bank->prototypes()) {
      w.put<std::int32_t>(k);
      w.put<std::uint64_t>(p.count);
      w.put_tensor(p.mean);
    }
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointFile load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  detail::ByteReader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path);
  if (std::memcmp(r.take(sizeof(kCheckpointMagic)), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    r.fail("not a checkpoint file");
  }
  if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(v));
  }
  CheckpointFile out;
  const auto n = r.get<std::uint32_t>();
  std::vector<ParamEntry> entries;
  for (std::uint32_t i = 0; i < n; ++i) {
    ParamEntry e;
    e.name = r.get_string();
    const auto g = r.get<std::uint8_t>();
    if (g > static_cast<std::uint8_t>(ParamGroup::Head)) r.fail("bad parameter group");
    e.group = static_cast<ParamGroup>(g);
    e.value = r.get_tensor();
    entries.push_back(std::move(e));
  }
  out.params = ModelCheckpoint(std::move(entries));
  if (r.get<std::uint8_t>() != 0) {
    PrototypeBank bank(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const auto k = r.get<std::uint32_t>();
    std::map<ClassId, Prototype> protos;
    for (std::uint32_t i = 0; i < k; ++i) {
      const ClassId id = r.get<std::int32_t>();
      Prototype p;
      p.count = static_cast<std::size_t>(r.get<std::uint64_t>());
      p.mean = r.get_tensor();
      if (!protos.emplace(id, std::move(p)).second) r.fail("duplicate class in bank");
    }
    bank.extend(protos);
    out.bank = std::move(bank);
  }
  if (r.remaining() != 0) r.fail("trailing bytes");
  return out;
}

}  // namespace ttacil
