#include "icptraj/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

namespace icptraj::geom {

std::size_t PointCloud::valid_count() const {
  if (mask.empty()) return points.size();
  std::size_t n = 0;
  for (std::uint8_t m : mask) n += (m != 0);
  return n;
}

int PointCloud::feature_dim() const {
  return features.empty() ? 0 : static_cast<int>(features.front().size());
}

void PointCloud::check() const {
  if (!mask.empty() && mask.size() != points.size())
    throw SchemaError("pointcloud mask length does not match point count");
  if (!features.empty()) {
    if (features.size() != points.size())
      throw SchemaError("pointcloud feature count does not match point count");
    const Eigen::Index d = features.front().size();
    for (const auto& f : features)
      if (f.size() != d)
        throw SchemaError("pointcloud feature dimensions are not uniform");
  }
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

bool RigidTransform::is_rigid(double tol) const {
  const Eigen::Matrix3d gram = rotation.transpose() * rotation;
  return (gram - Eigen::Matrix3d::Identity()).norm() <= tol &&
         std::abs(rotation.determinant() - 1.0) <= tol;
}

RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform out;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

int CorrespondenceSet::match_of(int src_index) const {
  for (Eigen::Index j = 0; j < matrix.cols(); ++j)
    if (matrix(src_index, j) != 0.0) return static_cast<int>(j);
  return -1;
}

PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
  PointCloud out = cloud;
  for (auto& p : out.points) p = t.rotation * p + t.translation;
  return out;
}

CorrespondenceSet nearest_correspondences(const PointCloud& src,
                                          const PointCloud& tgt) {
  if (src.valid_count() == 0)
    throw EmptyInputError("nearest_correspondences: source has no points");
  if (tgt.valid_count() == 0)
    throw EmptyInputError("nearest_correspondences: target has no points");

  const int ns = static_cast<int>(src.size());
  const int nt = static_cast<int>(tgt.size());
  CorrespondenceSet corr;
  corr.matrix = Eigen::MatrixXd::Zero(ns, nt);
  corr.distances = Eigen::MatrixXd::Zero(ns, nt);
  for (int i = 0; i < ns; ++i) {
    if (!src.is_valid(i)) continue;
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int j = 0; j < nt; ++j) {
      if (!tgt.is_valid(j)) continue;
      const double d2 = (src.points[i] - tgt.points[j]).squaredNorm();
      if (d2 < best_d2) {  // strict: ties keep the lowest index
        best_d2 = d2;
        best = j;
      }
    }
    corr.matrix(i, best) = 1.0;
    corr.distances(i, best) = std::sqrt(best_d2);
  }
  return corr;
}

RigidTransform kabsch(const PointCloud& src, const PointCloud& tgt,
                      const CorrespondenceSet& corr) {
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), ct = Eigen::Vector3d::Zero();
  int pairs = 0;
  const int ns = static_cast<int>(src.size());
  for (int i = 0; i < ns; ++i) {
    const int j = corr.match_of(i);
    if (j < 0) continue;
    cs += src.points[i];
    ct += tgt.points[j];
    ++pairs;
  }
  if (pairs < 3)
    throw DegenerateGeometryError(
        "kabsch: fewer than 3 matched pairs (" + std::to_string(pairs) + ")");
  cs /= pairs;
  ct /= pairs;

  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (int i = 0; i < ns; ++i) {
    const int j = corr.match_of(i);
    if (j < 0) continue;
    h += (src.points[i] - cs) * (tgt.points[j] - ct).transpose();
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sigma = svd.singularValues();
  // Rank < 2 (collinear or coincident points) leaves the rotation about the
  // dominant axis unconstrained; rank 2 (planar) is still well-posed.
  if (!(sigma(0) > 0.0) || sigma(1) <= 1e-12 * sigma(0))
    throw DegenerateGeometryError(
        "kabsch: rank-deficient cross-covariance (collinear geometry)");

  const double d =
      (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0
                                                                    : 1.0;
  RigidTransform t;
  t.rotation = svd.matrixV() * Eigen::Vector3d(1, 1, d).asDiagonal() *
               svd.matrixU().transpose();
  t.translation = ct - t.rotation * cs;
  return t;
}

SurfaceStats surface_stats(const PointCloud& cloud, int k_neighbors) {
  if (k_neighbors < 2)
    throw InvalidInputError("surface_stats: k_neighbors must be >= 2");
  const int n = static_cast<int>(cloud.size());
  if (cloud.valid_count() < static_cast<std::size_t>(k_neighbors) + 1)
    throw InvalidInputError(
        "surface_stats: need at least k+1 unmasked points");

  const bool with_cov = k_neighbors >= 3;
  SurfaceStats st;
  st.normals.assign(n, Eigen::Vector3d::UnitZ());
  if (with_cov)
    st.covariances.assign(n, 1e-9 * Eigen::Matrix3d::Identity());

  std::vector<std::pair<double, int>> dist;
  dist.reserve(n);
  for (int i = 0; i < n; ++i) {
    if (!cloud.is_valid(i)) continue;  // placeholder entries stay
    dist.clear();
    for (int j = 0; j < n; ++j) {
      if (j == i || !cloud.is_valid(j)) continue;
      dist.emplace_back((cloud.points[i] - cloud.points[j]).squaredNorm(), j);
    }
    std::sort(dist.begin(), dist.end());  // (d2, index): lowest index on ties

    Eigen::Vector3d mu = cloud.points[i];
    for (int k = 0; k < k_neighbors; ++k) mu += cloud.points[dist[k].second];
    mu /= static_cast<double>(k_neighbors + 1);

    Eigen::Matrix3d scatter =
        (cloud.points[i] - mu) * (cloud.points[i] - mu).transpose();
    for (int k = 0; k < k_neighbors; ++k) {
      const Eigen::Vector3d d = cloud.points[dist[k].second] - mu;
      scatter += d * d.transpose();
    }
    scatter /= static_cast<double>(k_neighbors + 1);
    if (!(scatter.trace() > 0.0))
      throw DegenerateGeometryError(
          "surface_stats: zero scatter at point " + std::to_string(i));

    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(scatter);
    Eigen::Vector3d nrm = es.eigenvectors().col(0).normalized();
    if (nrm.z() < 0 || (nrm.z() == 0 && (nrm.y() < 0 ||
                                         (nrm.y() == 0 && nrm.x() < 0))))
      nrm = -nrm;
    st.normals[i] = nrm;

    if (with_cov) {
      const double eps = std::max(1e-6 * scatter.trace() / 3.0, 1e-9);
      st.covariances[i] = scatter + eps * Eigen::Matrix3d::Identity();
    }
  }
  return st;
}

SurfaceStats rotate_stats(const SurfaceStats& stats, const Eigen::Matrix3d& r) {
  SurfaceStats out;
  out.normals.reserve(stats.normals.size());
  for (const auto& n : stats.normals) out.normals.push_back(r * n);
  out.covariances.reserve(stats.covariances.size());
  for (const auto& c : stats.covariances)
    out.covariances.push_back(r * c * r.transpose());
  return out;
}

double cloud_diameter(const PointCloud& cloud) {
  const int n = static_cast<int>(cloud.size());
  double best = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!cloud.is_valid(i)) continue;
    for (int j = i + 1; j < n; ++j) {
      if (!cloud.is_valid(j)) continue;
      best = std::max(best, (cloud.points[i] - cloud.points[j]).norm());
    }
  }
  return best;
}

}  // namespace icptraj::geom
