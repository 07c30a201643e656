#pragma once

// Adapter and head checkpoints: <name>.json (configuration, tensor table,
// payload digest) next to <name>.bin (float32 little-endian tensors in
// table order).

#include "anon/adapter.hpp"
#include "anon/heads.hpp"

#include <filesystem>
#include <string>

namespace anon {

void save_adapter(const std::filesystem::path& dir, const Adapter<float>& adapter, const std::string& name = "adapter");
Adapter<float> load_adapter(const std::filesystem::path& dir, const std::string& name = "adapter");

void save_head(const std::filesystem::path& dir, const Head<float>& head, const std::string& name);
Head<float> load_head(const std::filesystem::path& dir, const std::string& name);

bool checkpoint_exists(const std::filesystem::path& dir, const std::string& name);

// FNV-1a hex digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

}  // namespace anon
