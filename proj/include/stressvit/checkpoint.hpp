#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "stressvit/vit.hpp"

namespace stressvit {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Binary container: "SVITCKPT", u32 version, u32-length config JSON, u32 entry
// count, then per entry a u32-length UTF-8 name, u8 trainable flag, u32 rank,
// u64 dims and little-endian IEEE-754 doubles. All integers little-endian.
std::string encode_checkpoint(const ViTModel& model);
ViTModel decode_checkpoint(const std::string& bytes, const ViTConfig& config);
ViTConfig decode_checkpoint_config(const std::string& bytes);

void checkpoint_save(const ViTModel& model, const std::filesystem::path& path);
// Throws CheckpointError naming every missing, unexpected or mis-shaped entry.
ViTModel checkpoint_load(const std::filesystem::path& path, const ViTConfig& config);
// The architecture stored in the file.
ViTConfig checkpoint_config(const std::filesystem::path& path);
ViTModel checkpoint_load(const std::filesystem::path& path);

std::string vit_config_json(const ViTConfig& config);
ViTConfig vit_config_from_json(const std::string& text);

}  // namespace stressvit
