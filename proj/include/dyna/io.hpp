#pragma once

#include "dyna/core.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace dyna::io {

using Json = nlohmann::json;

/// Flat little-endian float64 file, no header.
void write_float64_blob(const std::filesystem::path& path, const Vector& values);
Vector read_float64_blob(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& blob);

void write_json(const std::filesystem::path& path, const Json& value);
Json read_json(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, std::string_view text);
std::string read_text(const std::filesystem::path& path);

/// SHA-1 of "blob <size>\0<content>", hex encoded (same as `git hash-object`).
std::string git_blob_hash(std::string_view content);

}  // namespace dyna::io
