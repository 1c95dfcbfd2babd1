#include "icptraj/icp.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <optional>

namespace icptraj::icp {

using geom::CorrespondenceSet;
using geom::PointCloud;
using geom::RigidTransform;
using geom::SurfaceStats;

namespace {

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

/// I + skew(omega), re-orthonormalized onto SO(3) by polar decomposition.
Eigen::Matrix3d small_angle_rotation(const Eigen::Vector3d& omega) {
  const Eigen::Matrix3d m = Eigen::Matrix3d::Identity() + skew(omega);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double d =
      (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0
                                                                    : 1.0;
  return svd.matrixU() * Eigen::Vector3d(1, 1, d).asDiagonal() *
         svd.matrixV().transpose();
}

/// Solves the 6x6 normal equations; rank deficiency (relative threshold
/// 1e-12) falls back to the minimum-norm solution and sets the flag.
RigidTransform solve_six(const Eigen::Matrix<double, 6, 6>& a,
                         const Eigen::Matrix<double, 6, 1>& rhs,
                         bool* rank_deficient) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(
      a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(1e-12);
  if (svd.rank() < 6 && rank_deficient != nullptr) *rank_deficient = true;
  const Eigen::Matrix<double, 6, 1> x = svd.solve(rhs);
  RigidTransform t;
  t.rotation = small_angle_rotation(x.head<3>());
  t.translation = x.tail<3>();
  return t;
}

int require_pairs(const PointCloud& src, const CorrespondenceSet& corr,
                  int minimum, const char* who) {
  int pairs = 0;
  for (std::size_t i = 0; i < src.size(); ++i)
    pairs += (corr.match_of(static_cast<int>(i)) >= 0);
  if (pairs < minimum)
    throw DegenerateGeometryError(std::string(who) + ": needs at least " +
                                  std::to_string(minimum) +
                                  " matched pairs, got " +
                                  std::to_string(pairs));
  return pairs;
}

}  // namespace

double p2p_error(const PointCloud& src, const PointCloud& tgt,
                 const CorrespondenceSet& corr) {
  double e = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int j = corr.match_of(static_cast<int>(i));
    if (j < 0) continue;
    e += (src.points[i] - tgt.points[j]).squaredNorm();
  }
  return e;
}

double p2l_error(const PointCloud& src, const PointCloud& tgt,
                 const CorrespondenceSet& corr,
                 const SurfaceStats& tgt_stats) {
  double e = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int j = corr.match_of(static_cast<int>(i));
    if (j < 0) continue;
    const double r = tgt_stats.normals[j].dot(src.points[i] - tgt.points[j]);
    e += r * r;
  }
  return e;
}

Eigen::Matrix3d gicp_inverse_covariance(const Eigen::Matrix3d& cov_src,
                                        const Eigen::Matrix3d& cov_tgt,
                                        const Eigen::Matrix3d& rotation) {
  const Eigen::Matrix3d combined =
      cov_tgt + rotation * cov_src * rotation.transpose();
  return combined.inverse();
}

double gicp_error(const PointCloud& src, const PointCloud& tgt,
                  const CorrespondenceSet& corr, const SurfaceStats& stats_src,
                  const SurfaceStats& stats_tgt,
                  const Eigen::Matrix3d& rotation) {
  double e = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int j = corr.match_of(static_cast<int>(i));
    if (j < 0) continue;
    const Eigen::Vector3d d = src.points[i] - tgt.points[j];
    const Eigen::Matrix3d m = gicp_inverse_covariance(
        stats_src.covariances[i], stats_tgt.covariances[j], rotation);
    e += d.dot(m * d);
  }
  return e;
}

RigidTransform p2l_step(const PointCloud& src, const PointCloud& tgt,
                        const CorrespondenceSet& corr,
                        const SurfaceStats& tgt_stats, bool* rank_deficient) {
  require_pairs(src, corr, 6, "p2l_step");
  Eigen::Matrix<double, 6, 6> a = Eigen::Matrix<double, 6, 6>::Zero();
  Eigen::Matrix<double, 6, 1> rhs = Eigen::Matrix<double, 6, 1>::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int j = corr.match_of(static_cast<int>(i));
    if (j < 0) continue;
    const Eigen::Vector3d& n = tgt_stats.normals[j];
    Eigen::Matrix<double, 6, 1> row;
    row.head<3>() = src.points[i].cross(n);
    row.tail<3>() = n;
    a += row * row.transpose();
    rhs += row * n.dot(tgt.points[j] - src.points[i]);
  }
  return solve_six(a, rhs, rank_deficient);
}

RigidTransform gicp_step(const PointCloud& src, const PointCloud& tgt,
                         const CorrespondenceSet& corr,
                         const SurfaceStats& stats_src,
                         const SurfaceStats& stats_tgt,
                         bool* rank_deficient) {
  require_pairs(src, corr, 6, "gicp_step");
  if (stats_src.covariances.size() != src.size() ||
      stats_tgt.covariances.size() != tgt.size())
    throw InvalidInputError("gicp_step: covariances missing (k_neighbors<3?)");
  Eigen::Matrix<double, 6, 6> a = Eigen::Matrix<double, 6, 6>::Zero();
  Eigen::Matrix<double, 6, 1> rhs = Eigen::Matrix<double, 6, 1>::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const int j = corr.match_of(static_cast<int>(i));
    if (j < 0) continue;
    // Incremental frame: M frozen at rotation = I for this outer pass.
    const Eigen::Matrix3d m =
        (stats_tgt.covariances[j] + stats_src.covariances[i]).inverse();
    Eigen::Matrix<double, 3, 6> jac;
    jac.leftCols<3>() = -skew(src.points[i]);
    jac.rightCols<3>() = Eigen::Matrix3d::Identity();
    const Eigen::Vector3d r0 = src.points[i] - tgt.points[j];
    a += jac.transpose() * m * jac;
    rhs -= jac.transpose() * m * r0;
  }
  return solve_six(a, rhs, rank_deficient);
}

IcpResult run_icp(const PointCloud& src, const PointCloud& tgt,
                  const IcpConfig& cfg) {
  return run_icp(src, tgt, cfg, nullptr, nullptr, nullptr);
}

IcpResult run_icp(const PointCloud& src, const PointCloud& tgt,
                  const IcpConfig& cfg, const SurfaceStats* stats_src,
                  const SurfaceStats* stats_tgt,
                  const IterationCallback& callback) {
  src.check();
  tgt.check();
  if (src.valid_count() == 0 || tgt.valid_count() == 0)
    throw EmptyInputError("run_icp: empty source or target");
  if (cfg.max_iterations < 0)
    throw InvalidInputError("run_icp: max_iterations must be >= 0");
  if (!(cfg.tolerance >= 0))
    throw InvalidInputError("run_icp: tolerance must be >= 0");

  const bool need_normals = cfg.variant == Variant::PointToPlane;
  const bool need_covs = cfg.variant == Variant::Generalized;
  if (need_normals && cfg.k_neighbors < 2)
    throw InvalidInputError("run_icp: P2L needs k_neighbors >= 2");
  if (need_covs && cfg.k_neighbors < 3)
    throw InvalidInputError("run_icp: G-ICP needs k_neighbors >= 3");

  // Statistics come from the original clouds; the source side is rotated
  // forward with the accumulated transform instead of being recomputed.
  SurfaceStats own_src, own_tgt;
  if ((need_normals || need_covs) && stats_tgt == nullptr) {
    own_tgt = geom::surface_stats(tgt, cfg.k_neighbors);
    stats_tgt = &own_tgt;
  }
  if (need_covs && stats_src == nullptr) {
    own_src = geom::surface_stats(src, cfg.k_neighbors);
    stats_src = &own_src;
  }
  SurfaceStats cur_stats;
  if (need_covs) cur_stats = *stats_src;

  IcpResult result;
  PointCloud cur = src;
  double error = std::numeric_limits<double>::infinity();
  int iter = 0;
  std::optional<CorrespondenceSet> last_corr;

  while (error > cfg.tolerance && iter < cfg.max_iterations) {
    CorrespondenceSet corr = geom::nearest_correspondences(cur, tgt);
    RigidTransform step;
    switch (cfg.variant) {
      case Variant::PointToPoint:
        step = geom::kabsch(cur, tgt, corr);
        break;
      case Variant::PointToPlane:
        step = p2l_step(cur, tgt, corr, *stats_tgt, &result.rank_deficient);
        break;
      case Variant::Generalized:
        step = gicp_step(cur, tgt, corr, cur_stats, *stats_tgt,
                         &result.rank_deficient);
        break;
    }
    PointCloud next = geom::apply_transform(cur, step);
    double err = 0;
    switch (cfg.variant) {
      case Variant::PointToPoint:
        err = p2p_error(next, tgt, corr);
        break;
      case Variant::PointToPlane:
        err = p2l_error(next, tgt, corr, *stats_tgt);
        break;
      case Variant::Generalized:
        err = gicp_error(next, tgt, corr, cur_stats, *stats_tgt,
                         step.rotation);
        break;
    }
    result.transform = step * result.transform;
    result.errors.push_back(err);
    const bool converged = err <= cfg.tolerance;
    if (callback)
      callback(IterationView{cur, corr, step, next, err, iter, converged});
    last_corr = std::move(corr);
    if (converged) {
      result.converged = true;
      break;
    }
    cur = std::move(next);
    if (need_covs) cur_stats = geom::rotate_stats(cur_stats, step.rotation);
    error = err;
    ++iter;
  }

  result.iterations = iter;
  result.final_src = geom::apply_transform(src, result.transform);
  result.final_correspondences =
      last_corr ? std::move(*last_corr)
                : geom::nearest_correspondences(src, tgt);
  return result;
}

}  // namespace icptraj::icp
