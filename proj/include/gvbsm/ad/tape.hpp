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

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "gvbsm/ad/array.hpp"

namespace gvbsm::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// owning tape is alive.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const noexcept { return id_; }

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Called during the reverse sweep with the gradient of the node's output.
using BackwardFn = std::function<void(Tape&, const Array& grad_out)>;

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so node ids form a topological
/// order and the reverse sweep simply walks ids downwards. A tape is
/// single-threaded; distinct tapes share no state.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Array value, bool requires_grad = false);
  Var constant(Array value) { return leaf(std::move(value), false); }

  /// Records an operation output. The node requires a gradient iff any input
  /// does; otherwise `backward` is dropped.
  Var record(std::string_view op, Array value, std::initializer_list<Var> inputs,
             BackwardFn backward);
  Var record(std::string_view op, Array value, const std::vector<Var>& inputs,
             BackwardFn backward);

  const Array& value(Var v) const { return nodes_[v.id()].value; }
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }
  std::string_view op_name(Var v) const { return nodes_[v.id()].op; }

  /// Gradient accumulator for `v`, zero-filled on first access.
  Array& grad_buffer(Var v);

  /// Gradient reached at `v` by the last backward(); zeros if none.
  Array grad(Var v) const;

  /// Reverse accumulation from a one-element output.
  void backward(Var output);

  std::size_t size() const noexcept { return nodes_.size(); }

  // Raised by eigvals_sym when a spectral gap below threshold is seen during
  // the reverse sweep.
  bool degenerate_spectrum() const noexcept { return degenerate_spectrum_; }
  void flag_degenerate_spectrum() noexcept { degenerate_spectrum_ = true; }

 private:
  struct Node {
    Array value;
    Array grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    std::string_view op;
  };

  std::vector<Node> nodes_;
  bool degenerate_spectrum_ = false;
};

}  // namespace gvbsm::ad
