// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over tensor-level primitives. A Tape records
// ops in execution order (which is already topological); backward() walks
// the record once in reverse. Tapes are single-threaded and rebuilt per
// forward/backward pass; Tensor values move freely between threads.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "itclip/tensor.hpp"

namespace itclip {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Per-head token visibility for attention (true = visible). Every head row
// must keep at least one visible token; samplers enforce this.
struct MaskGrid {
  int heads = 0;
  int tokens = 0;
  std::vector<std::uint8_t> visible;  // heads * tokens, row-major

  bool at(int h, int t) const {
    return visible[static_cast<std::size_t>(h) * tokens + t] != 0;
  }
  static MaskGrid all_visible(int heads, int tokens) {
    MaskGrid g;
    g.heads = heads;
    g.tokens = tokens;
    g.visible.assign(static_cast<std::size_t>(heads) * tokens, 1);
    return g;
  }
  // Same token visibility replicated across heads (e.g. padding masks).
  static MaskGrid from_tokens(int heads, const std::vector<std::uint8_t>& tok_visible) {
    MaskGrid g;
    g.heads = heads;
    g.tokens = static_cast<int>(tok_visible.size());
    g.visible.reserve(static_cast<std::size_t>(heads) * g.tokens);
    for (int h = 0; h < heads; ++h)
      g.visible.insert(g.visible.end(), tok_visible.begin(), tok_visible.end());
    return g;
  }
};

// Stable masked softmax over one logit vector. Invisible entries get weight
// exactly 0; visible weights sum to 1. Throws std::domain_error when no
// entry is visible.
std::vector<double> masked_softmax(const std::vector<double>& logits,
                                   const std::vector<std::uint8_t>& visible);

// log(1 / (1 + e^-x)) via the overflow-safe branch min(x,0) - log1p(e^-|x|).
double log_sigmoid_value(double x);
// d/dx log_sigmoid(x) = sigmoid(-x), computed stably.
double sigmoid_neg(double x);

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool needs_grad);

  const Tensor& val(Var v) const { return nodes_[v.id].value; }
  // Gradient of the backward root w.r.t. v; zeros if v was never reached.
  const Tensor& grad(Var v) const;
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  // Seeds d(root)/d(root) = 1 and propagates. root must be scalar.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise / shape ----
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var add_row_broadcast(Var x, Var v);  // x: n x d, v: d
  Var concat_rows(const std::vector<Var>& parts);
  Var row(Var x, int r);
  Var gather_rows(Var x, std::vector<int> rows);
  Var embedding_rows(Var table, std::vector<int> ids);

  // ---- linear algebra ----
  Var matmul(Var a, Var b);     // (r x k)(k x n)
  Var matmul_nt(Var a, Var b);  // (r x k)(n x k)^T

  // ---- nonlinearities ----
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
  Var gelu(Var x);
  Var masked_softmax_vec(Var logits, std::vector<std::uint8_t> visible);
  Var log_sigmoid(Var x);   // scalar
  Var exp_scalar(Var x);    // scalar

  // ---- reductions / scalars ----
  Var cosine_similarity(Var a, Var b);  // vectors; throws on zero norm
  Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& ws);

  // ---- attention ----
  // Head-major repack: (n x d) -> (h, n, d/h) stored contiguously per head.
  Var to_heads(Var x, int heads);
  // Inverse: (h, n, d/h) -> (n x d).
  Var from_heads(Var xh);
  // Multi-head scaled dot-product attention in head-major layout.
  // qh: (h, nq, dh), kh/vh: (h, m, dh). visible: per-head token mask
  // (nullptr = all visible). Returns (h, nq, dh). Post-softmax weights
  // (h, nq, m) are kept on the node; fetch with attention_weights().
  Var attend(Var qh, Var kh, Var vh, const MaskGrid* visible);
  const Tensor& attention_weights(Var attend_node) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Tensor aux;   // op scratch saved for backward / inspection
    Tensor aux2;
    std::function<void()> back;
    bool needs_grad = false;
  };

  Var push(Tensor value, bool needs_grad) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, needs_grad});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }
  Tensor& grad_buf(int id);
  bool has_grad(int id) const { return nodes_[id].grad.numel() != 0; }
  const Tensor& v(Var x) const { return nodes_[x.id].value; }

  std::vector<Node> nodes_;
};

}  // namespace itclip
