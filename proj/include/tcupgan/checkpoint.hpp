#pragma once

// Single-file container: magic line, little-endian u64 header length, JSON
// header (metadata + tensor index), then raw float32 payloads in index order.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "tcupgan/model.hpp"
#include "tcupgan/tensor.hpp"

namespace tcupgan {

inline constexpr const char* kCheckpointMagic = "TCUPGAN-CKPT-v1";

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Stores parameters under "generator/" or "discriminator/" with their config
/// in the metadata.
void store_generator(Checkpoint& ckpt, const GeneratorParams& params);
void store_discriminator(Checkpoint& ckpt, const DiscriminatorParams& params);

/// Throws ValidationError on missing entries or an architecture mismatch.
GeneratorParams load_generator(const Checkpoint& ckpt);
DiscriminatorParams load_discriminator(const Checkpoint& ckpt);

}  // namespace tcupgan
