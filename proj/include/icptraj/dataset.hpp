#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "icptraj/geometry.hpp"

namespace icptraj::data {

/// One registration problem. Synthetic targets satisfy
/// tgt = gt_transform(src) bit for bit; real pairs carry the pose gap
/// between two scans of the same site.
struct RegistrationSample {
  geom::PointCloud src;
  geom::PointCloud tgt;
  geom::RigidTransform gt_transform;
  std::string tag;
};

/// Uniform cloud in [-coord_range, coord_range]^3 moved by a random rigid
/// transform: gaussian-normalized axis, angle uniform in [0, max_rot_deg]
/// degrees, translation components uniform in [-max_trans, max_trans].
/// Deterministic in `seed`. Throws InvalidInputError for n < 4 or
/// nonpositive/negative ranges.
RegistrationSample gen_synthetic_pair(int n, double coord_range,
                                      double max_rot_deg, double max_trans,
                                      std::uint64_t seed);

struct CentroidLoadOptions {
  /// Keep only scan pairs whose recording positions are this far apart
  /// (within pair_tolerance). Negative keeps every pair.
  double pair_distance = -1.0;
  double pair_tolerance = 1.0;
};

/// Parses a centroid-scan file and returns one sample per ordered scan pair
/// (i, j), i < j in file order, with gt_transform = pose_j^-1 * pose_i.
///
/// The format is line-oriented text. `#scan <id> pose r11 r12 r13 tx r21
/// r22 r23 ty r31 r32 r33 tz` opens a scan; the rows that follow are
/// centroids, either `x y z label` when a `#classes <k>` directive precedes
/// the data (labels become one-hot features of width k) or `x y z e1 e2
/// ...` with a raw embedding. Other `#` lines are comments. Malformed rows
/// throw ParseError naming the line; a scan without a pose, an
/// out-of-range label, or inconsistent feature widths throw SchemaError.
std::vector<RegistrationSample> load_centroid_scans(
    const std::filesystem::path& path,
    const CentroidLoadOptions& options = {});

struct DatasetSplit {
  std::vector<RegistrationSample> train;
  std::vector<RegistrationSample> eval;
  std::vector<RegistrationSample> test;
};

/// Shuffles with derive_stream(seed, "split") and deals the requested
/// counts out in order (train, then eval, then test); leftover samples are
/// dropped. Throws InvalidInputError when the counts exceed the input.
DatasetSplit split_dataset(const std::vector<RegistrationSample>& samples,
                           int train_count, int eval_count, int test_count,
                           std::uint64_t seed);

/// Ratio form; ratios must be nonnegative and sum to 1. Train and eval
/// sizes are floored and test takes the remainder, so every sample lands
/// in exactly one split.
DatasetSplit split_dataset(const std::vector<RegistrationSample>& samples,
                           double train_ratio, double eval_ratio,
                           double test_ratio, std::uint64_t seed);

}  // namespace icptraj::data
