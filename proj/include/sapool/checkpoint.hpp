#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sapool/backbone.hpp"
#include "sapool/pruning.hpp"

namespace sapool {

// Binary layout (little-endian):
//   "SAPL" | u32 version=1 | u32 record count | records...
// record: u32 name length | name | u8 kind | u32 rank | u64 dims[rank] | payload
// kind 4 = f32 tensor, 8 = f64 tensor, 1 = channel mask (one byte per entry).
// Mask records are named "mask:<weight name>".
struct CheckpointRecord {
  std::uint8_t kind = 8;
  Shape shape;
  std::vector<double> values;  // tensor payload widened to f64, or mask bytes as 0/1
};

struct Checkpoint {
  std::map<std::string, CheckpointRecord> records;
  std::vector<std::string> order;  // file order, for byte-stable rewrites
};

Checkpoint read_checkpoint(const std::string& path);
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);

// Parameters and buffers of `net`, plus masks if given. Tensors keep the
// precision of T.
template <typename T>
Checkpoint make_checkpoint(Backbone<T>& net, const PruneState<T>* masks = nullptr);
template <typename T>
void save_checkpoint(const std::string& path, Backbone<T>& net, const PruneState<T>* masks = nullptr);

// Copies every parameter and buffer into `net`, converting precision if
// needed. Missing names, unexpected names and shape mismatches are format
// errors naming the record.
template <typename T>
void load_into(const Checkpoint& ckpt, Backbone<T>& net, const std::string& source);

// Mask records present in the checkpoint, by weight name.
std::map<std::string, std::vector<bool>> checkpoint_masks(const Checkpoint& ckpt);

}  // namespace sapool
