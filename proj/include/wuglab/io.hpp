#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace wuglab::io {

std::string read_file(const std::filesystem::path& path);

// Writes via a temporary sibling and rename, so readers never observe a
// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string md5_hex(std::string_view bytes);
std::string md5_file(const std::filesystem::path& path);

// Minimal CSV field quoting (RFC 4180).
std::string csv_field(std::string_view s);
std::string csv_row(const std::vector<std::string>& fields);
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

// Shortest round-trippable decimal representation.
std::string fmt_double(double v);

}  // namespace wuglab::io
