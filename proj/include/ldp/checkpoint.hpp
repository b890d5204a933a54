#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ldp/tensor.hpp"

namespace ldp {

// Binary container: magic "LDPCKPT" + format byte, u64 little-endian JSON
// header length, JSON header (kind, meta, tensor directory), then each
// tensor's doubles as raw little-endian bytes in directory order. Raw f64
// bytes round-trip bitwise, which text serialization cannot promise.
struct Checkpoint {
    std::string kind;      // "base" | "adapter"
    nlohmann::json meta;   // configs, counters; no tensor data
    std::vector<std::pair<std::string, ad::Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a over a file's bytes; manifests use it to fingerprint inputs/outputs
// (integrity bookkeeping, not cryptographic).
uint64_t fnv1a64_file(const std::string& path);
uint64_t fnv1a64_bytes(const void* data, size_t n);

}  // namespace ldp
