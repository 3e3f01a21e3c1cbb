#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace chowflow::io {

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written file. Throws IoError.
void write_text_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_text(const std::filesystem::path& path);

/// 17 significant digits; parses back to the identical double.
std::string format_double(double v);

/// Strict double parse of the whole token; throws ParseError.
double parse_double(std::string_view token);

std::string trim(std::string_view s);

}  // namespace chowflow::io
