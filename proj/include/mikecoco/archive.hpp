#pragma once

// Binary container for named double tensors plus a JSON metadata block.
//
// Layout (little-endian):
//   magic "MKCOARCH" | u32 version | u64 meta_len | meta (UTF-8 JSON)
//   u64 tensor_count | per tensor: u32 name_len | name | u64 rows | u64 cols | rows*cols f64 (row-major)
//
// Readers accept any version <= kArchiveVersion and ignore unknown meta keys.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "json.hpp"
#include "mikecoco/autograd.hpp"

namespace mikecoco {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ag::Matrix> tensors;
};

// Writes to a temporary sibling and renames it into place.
void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace mikecoco
