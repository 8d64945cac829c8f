#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace calm {

/// 17 significant digits; round-trips every double.
std::string format_exact(double value);

/// 10 significant digits; used for report tables.
std::string format_real(double value);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`, creating
/// parent directories as needed.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Pretty-printed JSON with a trailing newline.
std::string dump_json(const nlohmann::json& value);

}  // namespace calm
