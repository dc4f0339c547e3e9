#include "bevkd/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "bevkd/errors.hpp"

namespace bevkd::io {
namespace {

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return out;
  }
}

}  // namespace

void write_f64(const std::filesystem::path& path, std::span<const double> values) {
  std::vector<std::uint64_t> words(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) words[i] = to_little(std::bit_cast<std::uint64_t>(values[i]));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 8));
  if (!out) throw FormatError("failed writing " + path.string());
}

std::vector<double> read_f64(const std::filesystem::path& path, std::size_t expected_count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("missing array file " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes != expected_count * 8) {
    throw FormatError((bytes < expected_count * 8 ? "truncated array file " : "oversized array file ") +
                      path.string() + ": expected " + std::to_string(expected_count * 8) + " bytes, found " +
                      std::to_string(bytes));
  }
  std::vector<std::uint64_t> words(expected_count);
  in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  std::vector<double> out(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) out[i] = std::bit_cast<double>(to_little(words[i]));
  return out;
}

void write_json(const std::filesystem::path& path, const Json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out << doc.dump(1) << '\n';
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("missing file " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  }
}

const Json& field(const Json& obj, const std::string& key, const std::filesystem::path& source) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw FormatError("malformed manifest " + source.string() + ": missing field '" + key + "'");
  }
  return obj.at(key);
}

double number(const Json& obj, const std::string& key, const std::filesystem::path& source) {
  const Json& v = field(obj, key, source);
  if (!v.is_number()) throw FormatError("malformed manifest " + source.string() + ": field '" + key + "' is not a number");
  return v.get<double>();
}

std::vector<double> numbers(const Json& obj, const std::string& key, std::size_t expected,
                            const std::filesystem::path& source) {
  const Json& v = field(obj, key, source);
  if (!v.is_array() || v.size() != expected) {
    throw FormatError("malformed manifest " + source.string() + ": field '" + key + "' must be an array of " +
                      std::to_string(expected) + " numbers");
  }
  std::vector<double> out;
  for (const Json& x : v) {
    if (!x.is_number()) throw FormatError("malformed manifest " + source.string() + ": non-numeric entry in '" + key + "'");
    out.push_back(x.get<double>());
  }
  return out;
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace bevkd::io
