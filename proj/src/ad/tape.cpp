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
#include "gvbsm/ad/tape.hpp"

#include <string>

#include "gvbsm/error.hpp"

namespace gvbsm::ad {

Tape& Var::tape() const {
  if (!tape_) throw ShapeError("use of an unbound Var");
  return *tape_;
}

const Array& Var::value() const { return tape().value(*this); }

bool Var::requires_grad() const { return tape().requires_grad(*this); }

Var Tape::leaf(Array value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.op = "leaf";
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Array value, std::initializer_list<Var> inputs,
                 BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.valid() && nodes_[v.id()].requires_grad) needs = true;
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs;
  node.op = op;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(std::string_view op, Array value, const std::vector<Var>& inputs,
                 BackwardFn backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.valid() && nodes_[v.id()].requires_grad) needs = true;
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs;
  node.op = op;
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Array& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = Array(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

Array Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (n.has_grad) return n.grad;
  return Array(n.value.shape(), 0.0);
}

void Tape::backward(Var output) {
  if (value(output).size() != 1) {
    throw ShapeError("backward: output of shape " + shape_str(value(output).shape()) +
                     " is not a single value");
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Array();
  }
  if (!nodes_[output.id()].requires_grad) return;
  grad_buffer(output)[0] = 1.0;
  for (std::size_t i = output.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

}  // namespace gvbsm::ad
