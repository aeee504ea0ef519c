#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace msda::io {

void write_f64_le(std::ostream& out, std::span<const double> values);
void read_f64_le(std::istream& in, std::span<double> values);

/// 64-bit FNV-1a, used for manifest checksums.
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t file_checksum(const std::string& path);
std::string hex64(std::uint64_t value);

std::string read_file(const std::string& path);

/// Reads lines up to and including a line equal to `terminator`.
std::vector<std::string> read_header_lines(std::istream& in,
                                           std::string_view terminator);

}  // namespace msda::io
