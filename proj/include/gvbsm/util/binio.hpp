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
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gvbsm::util {

// Storage width of persisted floats: 8 (lossless) or 4 bytes.
enum class FloatWidth : int { kF64 = 8, kF32 = 4 };

FloatWidth parse_float_width(const std::string& s);
std::string float_width_name(FloatWidth w);

/// Raw little-endian float blob. load_blob rejects missing files and size
/// mismatches, naming the file in the error.
void save_blob(const std::filesystem::path& path, std::span<const double> values, FloatWidth width);
std::vector<double> load_blob(const std::filesystem::path& path, std::size_t count, FloatWidth width);

// Little-endian primitives for fixed layouts.
void put_u8(std::vector<unsigned char>& out, std::uint8_t v);
void put_u32(std::vector<unsigned char>& out, std::uint32_t v);
void put_u64(std::vector<unsigned char>& out, std::uint64_t v);
void put_f64(std::vector<unsigned char>& out, double v);
void put_f32(std::vector<unsigned char>& out, float v);

std::uint32_t get_u32(const unsigned char* p);
std::uint64_t get_u64(const unsigned char* p);
double get_f64(const unsigned char* p);
float get_f32(const unsigned char* p);

std::vector<unsigned char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const unsigned char> bytes);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace gvbsm::util
