#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "icptraj/error.hpp"

namespace icptraj::geom {

/// A pointcloud with optional per-point feature channels and a validity mask.
///
/// `mask[i] == 0` marks a padding point introduced by node-count fitting;
/// padded points are excluded from matching and from surface statistics.
/// An empty mask means every point is valid.
struct PointCloud {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::VectorXd> features;  ///< empty, or one vector per point
  std::vector<std::uint8_t> mask;         ///< empty, or one flag per point

  std::size_t size() const { return points.size(); }
  bool is_valid(std::size_t i) const { return mask.empty() || mask[i] != 0; }
  std::size_t valid_count() const;
  int feature_dim() const;  ///< 0 when there are no features

  /// Throws SchemaError when parallel arrays disagree in length or the
  /// feature vectors disagree in dimension.
  void check() const;
};

/// Rigid transform x -> rotation * x + translation.
struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Vector3d operator()(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }
  RigidTransform inverse() const;
  /// True when rotation^T rotation = I and det = +1 within `tol`.
  bool is_rigid(double tol = 1e-9) const;
};

/// Composition: (a * b)(x) = a(b(x)).
RigidTransform operator*(const RigidTransform& a, const RigidTransform& b);

/// Binary correspondence matrix: row i selects the match of source point i.
/// Unmasked source rows sum to exactly 1; padded rows are all zero.
/// `distances` carries the Euclidean distance at each match, 0 elsewhere.
struct CorrespondenceSet {
  Eigen::MatrixXd matrix;
  Eigen::MatrixXd distances;

  /// Column of the single 1 in row i, or -1 for an unmatched (padded) row.
  int match_of(int src_index) const;
};

/// Per-point surface statistics. Entries for padded points hold placeholder
/// values (+z normal, floor covariance) and must not be consumed.
struct SurfaceStats {
  std::vector<Eigen::Vector3d> normals;
  std::vector<Eigen::Matrix3d> covariances;  ///< regularized, empty when k < 3
};

/// Applies `t` to every point; features and mask are copied unchanged.
PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t);

/// Matches every unmasked source point to its nearest unmasked target point
/// (brute force, squared distances, lowest target index on ties).
/// Throws EmptyInputError when either cloud has no unmasked point.
CorrespondenceSet nearest_correspondences(const PointCloud& src,
                                          const PointCloud& tgt);

/// Least-squares rigid transform from matched source points onto their
/// targets (SVD on the cross-covariance, determinant-corrected to SO(3)).
/// Throws DegenerateGeometryError on fewer than 3 matches or a collinear
/// configuration (cross-covariance rank < 2).
RigidTransform kabsch(const PointCloud& src, const PointCloud& tgt,
                      const CorrespondenceSet& corr);

/// Normals and regularized covariances from k-nearest-neighbor scatter.
///
/// The neighborhood of a point is itself plus its k nearest unmasked
/// neighbors. Normals are the smallest-eigenvalue eigenvector, oriented into
/// the +z hemisphere (ties broken by +y, then +x). Covariances are the
/// neighborhood covariance plus eps*I with eps = max(1e-6 * trace/3, 1e-9);
/// they are computed only when k >= 3.
/// Throws InvalidInputError when k < 2 or fewer than k+1 unmasked points
/// exist, DegenerateGeometryError when a neighborhood has zero scatter.
SurfaceStats surface_stats(const PointCloud& cloud, int k_neighbors);

/// Stats carried through a rotation: n -> R n, Sigma -> R Sigma R^T.
SurfaceStats rotate_stats(const SurfaceStats& stats, const Eigen::Matrix3d& r);

/// Largest distance between two unmasked points (0 for fewer than 2 points).
double cloud_diameter(const PointCloud& cloud);

}  // namespace icptraj::geom
