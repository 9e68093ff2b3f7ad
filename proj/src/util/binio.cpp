/* Copyright 2026 The gvbsm Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "gvbsm/util/binio.hpp"

#include <bit>
#include <fstream>
#include <iterator>

#include "gvbsm/error.hpp"

namespace gvbsm::util {

FloatWidth parse_float_width(const std::string& s) {
  if (s == "f64") return FloatWidth::kF64;
  if (s == "f32") return FloatWidth::kF32;
  throw FormatError("unknown float storage '" + s + "' (expected f64 or f32)");
}

std::string float_width_name(FloatWidth w) { return w == FloatWidth::kF64 ? "f64" : "f32"; }

void put_u8(std::vector<unsigned char>& out, std::uint8_t v) { out.push_back(v); }

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f64(std::vector<unsigned char>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

void put_f32(std::vector<unsigned char>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

double get_f64(const unsigned char* p) { return std::bit_cast<double>(get_u64(p)); }

float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kInvalidArgument, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::kInvalidArgument, "write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const unsigned char*>(text.data()), text.size()});
}

void save_blob(const std::filesystem::path& path, std::span<const double> values, FloatWidth width) {
  std::vector<unsigned char> bytes;
  bytes.reserve(values.size() * static_cast<std::size_t>(width));
  for (double v : values) {
    if (width == FloatWidth::kF64) {
      put_f64(bytes, v);
    } else {
      put_f32(bytes, static_cast<float>(v));
    }
  }
  write_file(path, bytes);
}

std::vector<double> load_blob(const std::filesystem::path& path, std::size_t count, FloatWidth width) {
  const auto bytes = read_file(path);
  const std::size_t w = static_cast<std::size_t>(width);
  if (bytes.size() != count * w) {
    throw FormatError(path.string() + ": expected " + std::to_string(count * w) + " bytes, found " +
                      std::to_string(bytes.size()) + (bytes.size() < count * w ? " (truncated)" : ""));
  }
  std::vector<double> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = width == FloatWidth::kF64 ? get_f64(bytes.data() + i * w)
                                       : static_cast<double>(get_f32(bytes.data() + i * w));
  }
  return out;
}

}  // namespace gvbsm::util
