#pragma once

#include <Eigen/Core>
#include <functional>
#include <vector>

#include "icptraj/geometry.hpp"

namespace icptraj::icp {

enum class Variant { PointToPoint, PointToPlane, Generalized };

struct IcpConfig {
  Variant variant = Variant::PointToPoint;
  int max_iterations = 50;
  double tolerance = 1e-6;
  int k_neighbors = 5;  ///< neighborhood size for surface statistics
};

struct IcpResult {
  geom::RigidTransform transform;  ///< total transform, original src -> final
  geom::PointCloud final_src;      ///< transform applied to the input src
  geom::CorrespondenceSet final_correspondences;
  /// errors[k] is the error after the (k+1)-th transform estimate; length is
  /// iterations+1 when converged, iterations when the cap was hit.
  std::vector<double> errors;
  int iterations = 0;
  bool converged = false;
  bool rank_deficient = false;  ///< some step used the pseudo-inverse
};

/// Sum of squared distances over matched pairs; src is already transformed.
double p2p_error(const geom::PointCloud& src, const geom::PointCloud& tgt,
                 const geom::CorrespondenceSet& corr);

/// Sum of squared point-to-plane residuals (n_j . (p_i - q_j))^2.
double p2l_error(const geom::PointCloud& src, const geom::PointCloud& tgt,
                 const geom::CorrespondenceSet& corr,
                 const geom::SurfaceStats& tgt_stats);

/// M_ij = (cov_tgt + R cov_src R^T)^-1.
Eigen::Matrix3d gicp_inverse_covariance(const Eigen::Matrix3d& cov_src,
                                        const Eigen::Matrix3d& cov_tgt,
                                        const Eigen::Matrix3d& rotation);

/// Sum of Mahalanobis residuals d^T M d with d = p_i - q_j. `stats_src`
/// belongs to the pre-rotation source; `rotation` carries it forward in M.
double gicp_error(const geom::PointCloud& src, const geom::PointCloud& tgt,
                  const geom::CorrespondenceSet& corr,
                  const geom::SurfaceStats& stats_src,
                  const geom::SurfaceStats& stats_tgt,
                  const Eigen::Matrix3d& rotation);

/// One point-to-plane least-squares step: small-angle linearization over
/// (alpha, beta, gamma, tx, ty, tz), solved by SVD with a relative rank
/// threshold; rank-deficient systems take the minimum-norm solution and set
/// *rank_deficient. The rotation is re-orthonormalized onto SO(3).
/// Throws DegenerateGeometryError on fewer than 6 matched pairs.
geom::RigidTransform p2l_step(const geom::PointCloud& src,
                              const geom::PointCloud& tgt,
                              const geom::CorrespondenceSet& corr,
                              const geom::SurfaceStats& tgt_stats,
                              bool* rank_deficient = nullptr);

/// One Gauss-Newton step of the Mahalanobis objective with M_ij frozen at
/// the current rotation (identity in the incremental frame). Error handling
/// matches p2l_step.
geom::RigidTransform gicp_step(const geom::PointCloud& src,
                               const geom::PointCloud& tgt,
                               const geom::CorrespondenceSet& corr,
                               const geom::SurfaceStats& stats_src,
                               const geom::SurfaceStats& stats_tgt,
                               bool* rank_deficient = nullptr);

/// Everything the trajectory recorder needs to see about one loop pass.
struct IterationView {
  const geom::PointCloud& cur_src;        ///< cloud entering the pass
  const geom::CorrespondenceSet& corr;    ///< matches for the pass
  const geom::RigidTransform& step;       ///< transform estimated this pass
  const geom::PointCloud& next_src;       ///< step applied to cur_src
  double error;                           ///< GetError(step(cur_src), tgt)
  int iter_before;                        ///< iteration counter before the pass
  bool converged;                         ///< error <= tolerance
};
using IterationCallback = std::function<void(const IterationView&)>;

/// The two-phase instrumented loop: match, estimate, measure, advance while
/// the error stays above tolerance and the iteration cap is not reached.
/// Surface statistics are computed once on the original clouds (target
/// normals for P2L, covariances for G-ICP) and the source statistics are
/// rotated forward with the accumulated transform.
IcpResult run_icp(const geom::PointCloud& src, const geom::PointCloud& tgt,
                  const IcpConfig& cfg);

/// As above with caller-provided statistics (no recomputation). Pass nullptr
/// to compute a side internally. The callback, when set, fires once per pass.
IcpResult run_icp(const geom::PointCloud& src, const geom::PointCloud& tgt,
                  const IcpConfig& cfg, const geom::SurfaceStats* stats_src,
                  const geom::SurfaceStats* stats_tgt,
                  const IterationCallback& callback = nullptr);

}  // namespace icptraj::icp
