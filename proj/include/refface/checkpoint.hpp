#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "refface/tensor.hpp"

namespace refface {

// Versioned binary container for model parameters. Layout (little-endian):
//   magic "RFFCKPT1" | u32 kind | u64 seed | payload | u64 fnv1a64(payload)
// payload:
//   u32 n_meta    { u32 key_len, key, i64 value } ...
//   u32 n_tensors { u32 name_len, name, u32 ndim, i64 dims[], f64 data[] } ...
// The hash is verified on load.
struct Checkpoint {
    static constexpr uint32_t kIdentityEncoder = 1;
    static constexpr uint32_t kGeneralEncoder = 2;
    static constexpr uint32_t kEvalEncoder = 3;
    static constexpr uint32_t kDenoiser = 4;

    uint32_t kind = 0;
    uint64_t seed = 0;
    std::map<std::string, int64_t> meta;
    std::map<std::string, Tensor> tensors;

    int64_t meta_at(const std::string& key) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path, uint32_t expected_kind = 0);

// Whole-file hash, used for config-pinned integrity checks.
uint64_t file_fnv1a(const std::string& path);

}  // namespace refface
