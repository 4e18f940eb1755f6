#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace autorubric {

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);

/// Replaces each {name} with its value; unknown placeholders stay as written.
std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& values);

std::string read_file(const std::filesystem::path& path);

/// Writes through a sibling temp file and renames, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

/// One JSON value per non-blank line. Throws invalid-argument naming the line on parse errors.
std::vector<nlohmann::json> read_ndjson(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);

} // namespace autorubric
