#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "switchbert/optim.hpp"
#include "switchbert/param_store.hpp"
#include "switchbert/tensor.hpp"

namespace switchbert {

inline constexpr char kCheckpointMagic[4] = {'S', 'W', 'B', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Entry dtype codes.
enum class EntryCode : std::uint8_t { F32 = 0, F64 = 1, Bytes = 2 };

/// One raw record of the container.
struct CheckpointEntry {
  std::string name;
  EntryCode code = EntryCode::F32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;  // little-endian
};

/// Writes "SWBT", u32 version, u32 count, then per entry: u16 name length,
/// name, u8 code, u8 rank, u64 dims, payload. The file is written to a
/// temporary and renamed into place.
void write_checkpoint_entries(const std::string& path, const std::vector<CheckpointEntry>& entries);
/// FormatError on a bad magic, version or code; CorruptionError on truncation
/// or trailing bytes. Nothing is returned unless the whole file parses.
std::vector<CheckpointEntry> read_checkpoint_entries(const std::string& path);

CheckpointEntry tensor_entry(const std::string& name, const Tensor& t);
CheckpointEntry bytes_entry(const std::string& name, const std::string& bytes);
/// Leaf tensor from an F32/F64 entry.
Tensor entry_tensor(const CheckpointEntry& entry);
std::string entry_bytes(const CheckpointEntry& entry);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Parameters, optimizer moments ("adam.m/<name>", "adam.v/<name>") and
/// string metadata stored as "__<key>__" byte entries.
struct Checkpoint {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> optimizer;
  std::map<std::string, std::string> meta;
};

Checkpoint snapshot(const ParamStore& params, const Adam* optimizer,
                    std::map<std::string, std::string> meta);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Copies checkpoint values into a store with identical names and shapes;
/// FormatError on any mismatch, before anything is written.
void restore_params(ParamStore& params, const Checkpoint& checkpoint);
void restore_optimizer(Adam& optimizer, const ParamStore& params, const Checkpoint& checkpoint);

}  // namespace switchbert
