#include "sapool/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "sapool/errors.hpp"

namespace sapool {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

constexpr char kMagic[4] = {'S', 'A', 'P', 'L'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kF32 = 4, kF64 = 8, kMask = 1;

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string path) : b_(std::move(bytes)), path_(std::move(path)) {}

  template <typename V>
  V get(const char* what) {
    V v;
    need(sizeof(V), what);
    std::memcpy(&v, b_.data() + off_, sizeof(V));
    off_ += sizeof(V);
    return v;
  }
  const char* take(std::size_t n, const char* what) {
    need(n, what);
    const char* p = b_.data() + off_;
    off_ += n;
    return p;
  }
  std::size_t offset() const { return off_; }
  bool done() const { return off_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - off_ < n) {
      throw FormatError(path_ + ": truncated at byte offset " + std::to_string(b_.size()) +
                        " while reading " + what + " at offset " + std::to_string(off_));
    }
  }
  std::vector<char> b_;
  std::string path_;
  std::size_t off_ = 0;
};

template <typename V>
void put(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

}  // namespace

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw FormatError(path + ": cannot open checkpoint");
  std::vector<char> bytes(static_cast<std::size_t>(in.tellg()));
  in.seekg(0);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  Reader r(std::move(bytes), path);

  const char* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": bad magic at byte offset 0 (expected SAPL)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw FormatError(path + ": unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const auto count = r.get<std::uint32_t>("record count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const auto len = r.get<std::uint32_t>("name length");
    std::string name(r.take(len, "name"), len);
    CheckpointRecord rec;
    rec.kind = r.get<std::uint8_t>("record kind");
    if (rec.kind != kF32 && rec.kind != kF64 && rec.kind != kMask) {
      throw FormatError(path + ": record '" + name + "' at byte offset " + std::to_string(at) +
                        " has unknown kind " + std::to_string(rec.kind));
    }
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) {
      throw FormatError(path + ": record '" + name + "' at byte offset " + std::to_string(at) +
                        " has implausible rank " + std::to_string(rank));
    }
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      rec.shape.push_back(r.get<std::uint64_t>("dimension"));
      n *= rec.shape.back();
    }
    rec.values.resize(n);
    if (rec.kind == kF32) {
      const char* p = r.take(n * 4, "f32 payload");
      for (std::size_t k = 0; k < n; ++k) {
        float f;
        std::memcpy(&f, p + 4 * k, 4);
        rec.values[k] = f;
      }
    } else if (rec.kind == kF64) {
      std::memcpy(rec.values.data(), r.take(n * 8, "f64 payload"), n * 8);
    } else {
      const char* p = r.take(n, "mask payload");
      for (std::size_t k = 0; k < n; ++k) rec.values[k] = p[k] ? 1.0 : 0.0;
    }
    if (ck.records.count(name)) {
      throw FormatError(path + ": duplicate record '" + name + "' at byte offset " + std::to_string(at));
    }
    ck.order.push_back(name);
    ck.records.emplace(std::move(name), std::move(rec));
  }
  if (!r.done()) {
    throw FormatError(path + ": unexpected trailing data at byte offset " + std::to_string(r.offset()));
  }
  return ck;
}

void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ck.order.size()));
  for (const auto& name : ck.order) {
    const auto& rec = ck.records.at(name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, rec.kind);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(rec.shape.size()));
    for (auto d : rec.shape) put<std::uint64_t>(out, d);
    for (double v : rec.values) {
      if (rec.kind == kF32) put<float>(out, static_cast<float>(v));
      else if (rec.kind == kF64) put<double>(out, v);
      else put<std::uint8_t>(out, v != 0.0 ? 1 : 0);
    }
  }
  if (!out) throw FormatError(path + ": write failed");
}

template <typename T>
Checkpoint make_checkpoint(Backbone<T>& net, const PruneState<T>* masks) {
  Checkpoint ck;
  auto add = [&](const std::string& name, const Tensor<T>& t) {
    CheckpointRecord rec;
    rec.kind = sizeof(T) == 4 ? kF32 : kF64;
    rec.shape = t.shape();
    rec.values.assign(t.data().begin(), t.data().end());
    ck.order.push_back(name);
    ck.records.emplace(name, std::move(rec));
  };
  for (const auto& p : net.parameters()) add(p.name, p.var.value());
  for (const auto& b : net.buffers()) add(b.name, *b.tensor);
  if (masks) {
    for (const auto& l : masks->layers()) {
      CheckpointRecord rec;
      rec.kind = kMask;
      rec.shape = {l.channels};
      for (bool m : l.mask) rec.values.push_back(m ? 1.0 : 0.0);
      const std::string name = "mask:" + l.name;
      ck.order.push_back(name);
      ck.records.emplace(name, std::move(rec));
    }
  }
  return ck;
}

template <typename T>
void save_checkpoint(const std::string& path, Backbone<T>& net, const PruneState<T>* masks) {
  write_checkpoint(path, make_checkpoint(net, masks));
}

template <typename T>
void load_into(const Checkpoint& ck, Backbone<T>& net, const std::string& source) {
  std::set<std::string> used;
  auto fill = [&](const std::string& name, Tensor<T>& dst) {
    const auto it = ck.records.find(name);
    if (it == ck.records.end() || it->second.kind == kMask) {
      throw FormatError(source + ": missing record '" + name + "'");
    }
    if (it->second.shape != dst.shape()) {
      throw FormatError(source + ": record '" + name + "' has shape " + shape_str(it->second.shape) +
                        ", the network expects " + shape_str(dst.shape()));
    }
    for (std::size_t k = 0; k < dst.numel(); ++k) dst[k] = static_cast<T>(it->second.values[k]);
    used.insert(name);
  };
  for (auto& p : net.parameters()) {
    Var<T> v = p.var;
    fill(p.name, v.mutable_value());
  }
  for (auto& b : net.buffers()) fill(b.name, *b.tensor);
  for (const auto& name : ck.order) {
    if (!used.count(name) && name.rfind("mask:", 0) != 0) {
      throw FormatError(source + ": unexpected record '" + name + "' (architecture mismatch?)");
    }
  }
}

std::map<std::string, std::vector<bool>> checkpoint_masks(const Checkpoint& ck) {
  std::map<std::string, std::vector<bool>> out;
  for (const auto& [name, rec] : ck.records) {
    if (rec.kind != kMask) continue;
    std::vector<bool> m;
    for (double v : rec.values) m.push_back(v != 0.0);
    out.emplace(name.substr(5), std::move(m));
  }
  return out;
}

template Checkpoint make_checkpoint<float>(Backbone<float>&, const PruneState<float>*);
template Checkpoint make_checkpoint<double>(Backbone<double>&, const PruneState<double>*);
template void save_checkpoint<float>(const std::string&, Backbone<float>&, const PruneState<float>*);
template void save_checkpoint<double>(const std::string&, Backbone<double>&, const PruneState<double>*);
template void load_into<float>(const Checkpoint&, Backbone<float>&, const std::string&);
template void load_into<double>(const Checkpoint&, Backbone<double>&, const std::string&);

}  // namespace sapool
