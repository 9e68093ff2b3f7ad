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
#include <span>
#include <string_view>

namespace gvbsm::util {

/// FNV-1a over raw bytes. Used for content fingerprints of artifacts.
std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_doubles(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_ints(std::span<const int> values, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_string(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ULL);

/// splitmix64 finaliser.
std::uint64_t mix64(std::uint64_t x);

/// Stable sub-seed for a named stage or component.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag);
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b);

}  // namespace gvbsm::util
