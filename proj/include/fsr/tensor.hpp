#pragma once

// Reverse-mode automatic differentiation over Eigen matrices.
//
// A Tape owns a growing list of nodes; every op appends one node whose value
// is computed eagerly and whose backward closure scatters gradients to its
// inputs. Node creation order is a topological order, so backward() is a
// single reverse sweep. A tape constructed with grad_enabled=false computes
// values only (used for the teacher pipeline and for plain module wrappers).

#include "fsr/common.hpp"

#include <functional>
#include <vector>

namespace fsr {

struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Token pair for the affinity loss: cosine(z_i, z_j) pulled toward target.
struct AffinityPair {
  int i = 0;
  int j = 0;
  double target = 0.0;
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t size() const { return nodes_.size(); }

  Var leaf(const MatrixXd& value, bool requires_grad = true);
  Var constant(const MatrixXd& value) { return leaf(value, false); }

  const MatrixXd& val(Var v) const { return node(v).value; }
  // Gradient of the last backward() root w.r.t. v (zeros if v untouched).
  MatrixXd grad(Var v) const;

  void backward(Var root);

  // --- elementwise / linear algebra ---
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var cmul(Var a, Var b);
  Var cdiv(Var a, Var b);
  Var scale(Var a, double s);
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var transpose(Var a);
  Var linear(Var x, Var w, Var b);  // x * w^T + row-broadcast b; w: out×in, b: 1×out
  Var relu(Var a);
  Var gelu(Var a);
  Var scale_rows(Var a, Var v);                       // v: n×1, differentiable
  Var scale_rows_const(Var a, const VectorXd& v);     // v constant
  Var rows_l2norm(Var a);                             // n×1 of row norms
  Var softmax_rows(Var a);
  // Softmax over the non-excluded columns of every row; excluded columns are
  // exactly zero in the output. excluded_col.size() must equal cols.
  Var softmax_rows_excluding(Var a, const std::vector<uint8_t>& excluded_col);
  Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-6);
  Var concat_rows(Var a, Var b);
  Var slice_rows(Var a, int row0, int nrows);
  Var gather_rows(Var a, const std::vector<int>& idx);
  Var sum_rows(Var a);   // 1×m, sums over rows
  Var mean_all(Var a);   // 1×1
  Var sum_all(Var a);    // 1×1
  Var colwise_max_subset(Var a, const std::vector<int>& rows);  // 1×m over chosen rows

  // Multi-head self-attention core: softmax(q_h k_h^T / sqrt(dh)) v_h per
  // head, heads concatenated along columns. Optionally copies the per-head
  // attention maps (heads × N × N) into *attn_out.
  Var mhsa(Var q, Var k, Var v, int heads, std::vector<MatrixXd>* attn_out = nullptr);

  // 3×3 dilated convolution on a token grid. x: (H*W)×Cin row-major by
  // position, w: Cout×(Cin*9) with tap-minor layout, b: 1×Cout. Zero padding,
  // stride 1; output (H*W)×Cout.
  Var conv3x3_grid(Var x, Var w, Var b, int H, int W, int dilation);

  // --- scalar losses (all return 1×1) ---
  Var bce_multilabel(Var logits, const VectorXd& targets);  // logits 1×C
  Var ce_indexed(Var logits, const std::vector<int>& labels, int ignore_index);
  // -sum_i w_i sum_k T[i,k] log probs[i,k]; T rows are constant distributions.
  Var ce_soft_rows(Var probs, const MatrixXd& targets, const VectorXd& row_weights);
  Var cosine_pair_loss(Var tokens, const std::vector<AffinityPair>& pairs);

 private:
  struct Node {
    MatrixXd value;
    MatrixXd grad;  // empty until touched
    std::function<void(Tape&)> backward;
    bool requires_grad = false;
  };

  const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.id)); }
  Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.id)); }

  Var emit(MatrixXd value, bool requires_grad, std::function<void(Tape&)> backward);
  bool wants_grad(Var a) const { return grad_enabled_ && node(a).requires_grad; }
  void accum(Var v, const MatrixXd& g);
  const MatrixXd* grad_of(Var v) const;  // nullptr when untouched

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace fsr
