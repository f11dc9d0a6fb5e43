#include "switchbert/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace switchbert {

namespace {

constexpr const char* kMomentM = "adam.m/";
constexpr const char* kMomentV = "adam.v/";

template <class U>
void put(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t k = 0; k < sizeof(U); ++k)
    out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(value) >> (8 * k)));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& data) : data_(data) {}

  template <class U>
  U get(const char* what) {
    need(sizeof(U), what);
    std::uint64_t v = 0;
    for (std::size_t k = 0; k < sizeof(U); ++k) v |= static_cast<std::uint64_t>(data_[pos_ + k]) << (8 * k);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::vector<std::uint8_t> bytes(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> out(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  data_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return out;
  }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n)
      throw CorruptionError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::vector<std::uint8_t>& data_;
  std::size_t pos_ = 0;
};

std::size_t element_size(EntryCode code) {
  switch (code) {
    case EntryCode::F32: return 4;
    case EntryCode::F64: return 8;
    case EntryCode::Bytes: return 1;
  }
  return 0;
}

std::string meta_key(const std::string& name) {
  if (name.size() > 4 && name.rfind("__", 0) == 0 && name.compare(name.size() - 2, 2, "__") == 0)
    return name.substr(2, name.size() - 4);
  return {};
}

Tensor moment_tensor(const Tensor& like, const std::vector<double>& m) {
  return Tensor::from_values(like.shape(), m, DType::F64);
}

}  // namespace

void write_checkpoint_entries(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  std::vector<std::uint8_t> buf(kCheckpointMagic, kCheckpointMagic + 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw ContractError("checkpoint entry name too long");
    if (e.dims.size() > 0xff) throw ContractError("checkpoint entry rank too large");
    std::uint64_t count = 1;
    for (auto d : e.dims) count *= d;
    if (count * element_size(e.code) != e.payload.size())
      throw ContractError("checkpoint entry '" + e.name + "' payload does not match its dims");
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(e.name.size()));
    buf.insert(buf.end(), e.name.begin(), e.name.end());
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(e.code));
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put<std::uint64_t>(buf, d);
    buf.insert(buf.end(), e.payload.begin(), e.payload.end());
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint '" + tmp + "'");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write to checkpoint '" + tmp + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path + "': " + ec.message());
}

std::vector<CheckpointEntry> read_checkpoint_entries(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  const std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                       std::istreambuf_iterator<char>());
  if (data.size() < 4) throw CorruptionError("checkpoint truncated inside the header");
  if (std::memcmp(data.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
  Reader r(data);
  r.bytes(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.get<std::uint16_t>("name length");
    const auto name = r.bytes(len, "name");
    e.name.assign(name.begin(), name.end());
    const auto code = r.get<std::uint8_t>("dtype code");
    if (code > 2) throw FormatError("checkpoint entry '" + e.name + "' has unknown dtype code " + std::to_string(code));
    e.code = static_cast<EntryCode>(code);
    const auto rank = r.get<std::uint8_t>("rank");
    std::uint64_t elems = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.get<std::uint64_t>("dims"));
      elems *= e.dims.back();
      if (elems > r.remaining())
        throw CorruptionError("checkpoint truncated inside entry '" + e.name + "'");
    }
    const std::uint64_t size = elems * element_size(e.code);
    if (size > r.remaining()) throw CorruptionError("checkpoint truncated inside entry '" + e.name + "'");
    e.payload = r.bytes(size, "payload");
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0)
    throw CorruptionError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return entries;
}

CheckpointEntry tensor_entry(const std::string& name, const Tensor& t) {
  CheckpointEntry e;
  e.name = name;
  e.code = t.dtype() == DType::F32 ? EntryCode::F32 : EntryCode::F64;
  for (auto d : t.shape()) e.dims.push_back(d);
  dispatch(t.dtype(), [&]<class T>() {
    const auto v = t.data<T>();
    e.payload.resize(v.size() * sizeof(T));
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t> u;
      std::memcpy(&u, &v[i], sizeof(T));
      for (std::size_t k = 0; k < sizeof(T); ++k)
        e.payload[i * sizeof(T) + k] = static_cast<std::uint8_t>(u >> (8 * k));
    }
  });
  return e;
}

CheckpointEntry bytes_entry(const std::string& name, const std::string& bytes) {
  CheckpointEntry e;
  e.name = name;
  e.code = EntryCode::Bytes;
  e.dims = {bytes.size()};
  e.payload.assign(bytes.begin(), bytes.end());
  return e;
}

Tensor entry_tensor(const CheckpointEntry& e) {
  if (e.code == EntryCode::Bytes) throw FormatError("entry '" + e.name + "' is not a tensor");
  if (e.dims.empty()) throw FormatError("tensor entry '" + e.name + "' has rank 0");
  Shape shape;
  for (auto d : e.dims) {
    if (d == 0) throw FormatError("tensor entry '" + e.name + "' has a zero extent");
    shape.push_back(static_cast<std::size_t>(d));
  }
  const DType dt = e.code == EntryCode::F32 ? DType::F32 : DType::F64;
  Tensor t = Tensor::zeros(shape, dt);
  dispatch(dt, [&]<class T>() {
    auto v = t.mutable_data<T>();
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t> u = 0;
      for (std::size_t k = 0; k < sizeof(T); ++k)
        u |= static_cast<decltype(u)>(e.payload[i * sizeof(T) + k]) << (8 * k);
      std::memcpy(&v[i], &u, sizeof(T));
    }
  });
  return t;
}

std::string entry_bytes(const CheckpointEntry& e) {
  if (e.code != EntryCode::Bytes) throw FormatError("entry '" + e.name + "' is not a byte blob");
  return std::string(e.payload.begin(), e.payload.end());
}

Checkpoint snapshot(const ParamStore& params, const Adam* optimizer,
                    std::map<std::string, std::string> meta) {
  Checkpoint c;
  for (const auto& e : params) c.params.push_back({e.name, e.tensor.detach()});
  if (optimizer) {
    std::size_t k = 0;
    for (const auto& e : params) {
      c.optimizer.push_back({kMomentM + e.name, moment_tensor(e.tensor, optimizer->first_moments()[k])});
      c.optimizer.push_back({kMomentV + e.name, moment_tensor(e.tensor, optimizer->second_moments()[k])});
      ++k;
    }
    meta["adam_steps"] = std::to_string(optimizer->steps());
  }
  c.meta = std::move(meta);
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  std::vector<CheckpointEntry> entries;
  for (const auto& p : checkpoint.params) entries.push_back(tensor_entry(p.name, p.tensor));
  for (const auto& p : checkpoint.optimizer) entries.push_back(tensor_entry(p.name, p.tensor));
  for (const auto& [key, value] : checkpoint.meta) entries.push_back(bytes_entry("__" + key + "__", value));
  write_checkpoint_entries(path, entries);
}

Checkpoint load_checkpoint(const std::string& path) {
  Checkpoint c;
  for (const auto& e : read_checkpoint_entries(path)) {
    if (const auto key = meta_key(e.name); !key.empty() && e.code == EntryCode::Bytes) {
      c.meta[key] = entry_bytes(e);
    } else if (e.name.rfind(kMomentM, 0) == 0 || e.name.rfind(kMomentV, 0) == 0) {
      c.optimizer.push_back({e.name, entry_tensor(e)});
    } else {
      c.params.push_back({e.name, entry_tensor(e)});
    }
  }
  return c;
}

void restore_params(ParamStore& params, const Checkpoint& checkpoint) {
  if (checkpoint.params.size() != params.size())
    throw FormatError("checkpoint holds " + std::to_string(checkpoint.params.size()) +
                      " parameters, model has " + std::to_string(params.size()));
  for (const auto& p : checkpoint.params) {
    if (!params.contains(p.name)) throw FormatError("checkpoint parameter '" + p.name + "' unknown to the model");
    const Tensor& dst = params.get(p.name);
    if (dst.shape() != p.tensor.shape() || dst.dtype() != p.tensor.dtype())
      throw FormatError("checkpoint parameter '" + p.name + "' is " + shape_str(p.tensor.shape()) +
                        " " + to_string(p.tensor.dtype()) + ", model expects " +
                        shape_str(dst.shape()) + " " + to_string(dst.dtype()));
  }
  for (const auto& p : checkpoint.params) {
    Tensor& dst = params.get(p.name);
    dispatch(dst.dtype(), [&]<class T>() {
      const auto src = p.tensor.data<T>();
      auto out = dst.mutable_data<T>();
      std::copy(src.begin(), src.end(), out.begin());
    });
  }
}

void restore_optimizer(Adam& optimizer, const ParamStore& params, const Checkpoint& checkpoint) {
  std::map<std::string, const Tensor*> lookup;
  for (const auto& t : checkpoint.optimizer) lookup[t.name] = &t.tensor;
  std::size_t k = 0;
  for (const auto& e : params) {
    const auto m = lookup.find(kMomentM + e.name);
    const auto v = lookup.find(kMomentV + e.name);
    if (m == lookup.end() || v == lookup.end())
      throw FormatError("checkpoint lacks optimizer moments for '" + e.name + "'");
    if (m->second->numel() != e.tensor.numel() || v->second->numel() != e.tensor.numel())
      throw FormatError("optimizer moments for '" + e.name + "' have the wrong size");
    optimizer.first_moments()[k] = m->second->values();
    optimizer.second_moments()[k] = v->second->values();
    ++k;
  }
  if (auto it = checkpoint.meta.find("adam_steps"); it != checkpoint.meta.end())
    optimizer.set_steps(std::stoull(it->second));
}

}  // namespace switchbert
