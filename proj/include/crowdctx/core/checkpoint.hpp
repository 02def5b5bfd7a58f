#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crowdctx/core/adam.hpp"
#include "crowdctx/core/parameters.hpp"

namespace crowdctx {

// Binary layout, all integers little-endian u32:
//   "CFCK" | version | record count | records... | config length | config bytes
// record: name length | name | rank | dims... | f32 payload (little-endian)
// Optimizer buffers use the reserved prefix "opt." ("opt.step", "opt.m.<name>",
// "opt.v.<name>"). The trailing block holds the run configuration text.
inline constexpr char kCheckpointMagic[4] = {'C', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::vector<CheckpointRecord> records;
    std::string config_text;

    const CheckpointRecord* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const ParameterStore& params, const AdamState* optimizer,
                           std::string config_text);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
// Throws ParseError (with byte offset) on malformed input.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Atomic write (temp file + rename). Throws IoError.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Copies parameter records into the store. Throws ContractError naming the
// first missing or mis-shaped tensor.
void restore_parameters(const Checkpoint& ckpt, ParameterStore& params);
// Restores optimizer moments and step if present; returns false otherwise.
bool restore_optimizer(const Checkpoint& ckpt, const ParameterStore& params, AdamState& state);

}  // namespace crowdctx
