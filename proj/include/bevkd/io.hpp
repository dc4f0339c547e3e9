#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace bevkd::io {

using Json = nlohmann::json;

// Raw little-endian float64 arrays, no header.
void write_f64(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count);

void write_json(const std::filesystem::path& path, const Json& doc);
Json read_json(const std::filesystem::path& path);

// Field accessors that raise FormatError naming the file and field.
const Json& field(const Json& obj, const std::string& key, const std::filesystem::path& source);
double number(const Json& obj, const std::string& key, const std::filesystem::path& source);
std::vector<double> numbers(const Json& obj, const std::string& key, std::size_t expected,
                            const std::filesystem::path& source);

/// Non-negative integer, including values above INT64_MAX.
inline bool is_count(const Json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
}

/// Bytes of a file, for byte-identity comparisons.
std::string read_bytes(const std::filesystem::path& path);

}  // namespace bevkd::io

namespace bevkd {

/// SplitMix64 step; used to derive independent child seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

}  // namespace bevkd
