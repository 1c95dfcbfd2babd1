#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "icptraj/error.hpp"

namespace icptraj::ad {

/// Named parameter matrices with matching gradient accumulators. Iteration
/// order is the lexicographic name order, which keeps every consumer
/// (initialization, Adam, checkpoints, gradient checks) deterministic.
struct ParamStore {
  std::map<std::string, Eigen::MatrixXd> values;
  std::map<std::string, Eigen::MatrixXd> grads;

  /// Registers a zero matrix (and its gradient slot). Throws on duplicates.
  Eigen::MatrixXd& add(const std::string& name, int rows, int cols);
  Eigen::MatrixXd& value(const std::string& name);
  const Eigen::MatrixXd& value(const std::string& name) const;
  Eigen::MatrixXd& grad(const std::string& name);

  void zero_grads();
  double grad_norm() const;  ///< global L2 norm over every gradient entry
  void scale_grads(double s);
  std::size_t parameter_count() const;  ///< total scalar entries
};

struct TensorRef {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over dense matrices (rows = locations, cols =
/// channels; scalars are 1x1). Build a fresh tape per forward pass, call
/// backward(root) once, and read parameter gradients from the ParamStore.
///
/// Every non-smooth choice made during the forward pass (max routing and
/// relu activity inside the fused ops) is folded into decision_hash(); two
/// passes with equal hashes took identical subgradient branches, which is
/// what makes finite-difference comparisons meaningful near ties.
class Tape {
 public:
  explicit Tape(ParamStore* params);

  TensorRef constant(const Eigen::MatrixXd& v);
  /// Leaf bound to a ParamStore entry; backward accumulates into its grad.
  TensorRef param(const std::string& name);

  /// y = [x_1 | ... | x_k] * W^T (+ bias); W is (out x sum of part widths)
  /// and is consumed in column blocks, so the concatenation never
  /// materializes. `bias` may be empty for a bias-free map. Bias parameters
  /// are stored as 1 x out rows.
  TensorRef linear(const std::vector<TensorRef>& parts, const std::string& w,
                   const std::string& bias);

  TensorRef add(TensorRef a, TensorRef b);
  TensorRef sigmoid(TensorRef x);
  TensorRef softmax_rows(TensorRef x);

  /// Broadcasts per-node rows onto the dense edge layout:
  ///   edge_from_source: out(i*n+j, c) = x(i, c)
  ///   edge_from_target: out(i*n+j, c) = x(j, c)
  TensorRef edge_from_source(TensorRef x, int n);
  TensorRef edge_from_target(TensorRef x, int n);

  /// Fused message aggregation over a dense n-node graph:
  ///   out(i,c) = max_j relu(p(i,c) + q(j,c) + r(i*n+j,c) + s(0,c)).
  /// p,q are n x H (receiver/sender terms), r is n^2 x H, s is 1 x H.
  /// Gradients route to the first maximal sender; inactive relu kills them.
  TensorRef message_max(TensorRef p, TensorRef q, TensorRef r, TensorRef s,
                        int n);

  /// Fused triplet reduction:
  ///   out(i*n+j,c) = max_k [ n1(i,c) + n2(j,c) + n3(k,c)
  ///                          + e1(i*n+j,c) + e2(i*n+k,c) + e3(k*n+j,c)
  ///                          + g(0,c) ].
  /// n1..n3 are n x C, e1..e3 are n^2 x C, g is 1 x C.
  TensorRef triplet_max(TensorRef n1, TensorRef n2, TensorRef n3, TensorRef e1,
                        TensorRef e2, TensorRef e3, TensorRef g, int n);

  /// Per-row layer normalization with learned gain/bias (1 x H each).
  TensorRef layer_norm(TensorRef x, const std::string& gain,
                       const std::string& bias);

  TensorRef mean_rows(TensorRef x);  ///< m x H -> 1 x H column means
  TensorRef max_rows(TensorRef x);   ///< m x H -> 1 x H column maxima

  /// Sum of squared differences against a constant target (1x1 output).
  TensorRef sse(TensorRef pred, const Eigen::MatrixXd& target);
  /// Mean positive-weighted binary cross-entropy with logits (1x1).
  TensorRef bce_logits(TensorRef logits, const Eigen::MatrixXd& targets,
                       double w_pos);
  /// Mean categorical cross-entropy with logits; one class id per row (1x1).
  TensorRef ce_logits(TensorRef logits, const std::vector<int>& classes);
  TensorRef weighted_sum(const std::vector<TensorRef>& scalars,
                         const std::vector<double>& weights);

  const Eigen::MatrixXd& value(TensorRef t) const;
  /// Seeds d(root)=1 and sweeps the tape in reverse. `root` must be 1x1.
  void backward(TensorRef root);

  std::uint64_t decision_hash() const { return decision_hash_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Eigen::MatrixXd value;
    Eigen::MatrixXd grad;  ///< empty until touched by backward
    std::function<void()> back;
  };

  Node& node(TensorRef t);
  const Node& node(TensorRef t) const;
  Eigen::MatrixXd& grad_of(TensorRef t);
  TensorRef push(Eigen::MatrixXd value);
  void hash_decision(std::uint64_t v);

  ParamStore* params_;
  std::deque<Node> nodes_;
  std::uint64_t decision_hash_;
};

}  // namespace icptraj::ad
