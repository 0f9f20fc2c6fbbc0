#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "lde/common.hpp"

namespace lde {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);
std::string file_digest(const std::filesystem::path& path);
/// Digest of the raw double payload plus shape.
std::string matrix_digest(const Matrix& m);

}  // namespace lde
