#pragma once
#include <cstdint>
#include <string>
#include <string_view>

namespace cprf {

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partial file.
void write_file_atomic(const std::string& path, std::string_view content);

std::string read_file(const std::string& path);

/// FNV-1a 64-bit, chainable through `basis`.
std::uint64_t fnv1a(const void* data, std::size_t len,
                    std::uint64_t basis = 0xcbf29ce484222325ULL) noexcept;

std::string hex64(std::uint64_t v);

/// Shortest round-trip decimal form of a double.
std::string format_double(double v);

} // namespace cprf
