#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "icptraj/icp.hpp"

namespace icptraj::probe {

enum class Stage { Input, Hint, Output };
enum class Location { Node, Edge, Graph };
enum class Kind { Scalar, Mask, Categorical };

/// Which algorithm phases the recorder turns into hint steps.
///  P2   - phase-2 results only (one step per loop pass)
///  P12  - both phases (two steps per pass)
///  P1I  - phase-1 correspondence rows revealed one source point at a time
///  P1I2 - P1I reveals plus the phase-2 step
enum class HintMode { P2, P12, P1I, P1I2 };

struct ProbeSpec {
  std::string name;
  Stage stage = Stage::Hint;
  Location location = Location::Node;
  Kind kind = Kind::Scalar;
  int dim = 1;         ///< channels per node/edge/graph element
  int categories = 0;  ///< class count, categorical probes only
};

struct TrajectorySchema {
  std::vector<ProbeSpec> probes;

  const ProbeSpec* find(std::string_view name) const;
  std::vector<const ProbeSpec*> stage_probes(Stage stage) const;
  /// Flat value count of a probe at node count n (row-major layouts:
  /// node = n x dim, edge = n x n x dim, graph = dim).
  static std::size_t flat_size(const ProbeSpec& spec, int n);
};

/// The fixed probe set; `feature_dim` is the per-cloud semantic channel
/// count appended to the `pointclouds` input probe (coordinates first).
TrajectorySchema make_schema(int feature_dim);

/// One step of probe values; keys are probe names, arrays are row-major.
struct TrajectoryStep {
  std::map<std::string, Eigen::ArrayXd> values;

  const Eigen::ArrayXd& at(std::string_view name) const;
  Eigen::ArrayXd& at(std::string_view name);
  bool has(std::string_view name) const;
};

struct ScaleParams {
  double min = 0.0;
  double max = 1.0;
  int scaled_channels = 0;  ///< leading channels min-max scaled; rest pass
};

struct NormalizationParams {
  double squash_c = 5.0;
  std::map<std::string, ScaleParams> scales;  ///< per scalar probe (not error)
};

/// f(e) = 1/(1 + exp(-log(e) + c)); inputs <= 0 clamp to 1e-300, +inf maps
/// to exactly 1. Natural log.
double squash_error(double e, double c = 5.0);
/// Inverse on (0,1); f >= 1 gives +inf, f <= 0 gives 0.
double unsquash_error(double f, double c = 5.0);

struct Trajectory {
  TrajectorySchema schema;
  int node_count = 0;
  icp::Variant variant = icp::Variant::PointToPoint;
  HintMode hint_mode = HintMode::P12;
  int t_max = 50;          ///< iteration cap used; iterations normalizer
  double tolerance = 1e-6;
  bool gt_optimisation = false;
  bool normalized = false;
  std::vector<std::uint8_t> src_mask;  ///< validity of source node slots
  std::vector<std::uint8_t> tgt_mask;  ///< validity of target node slots
  TrajectoryStep input;
  std::vector<TrajectoryStep> hints;
  TrajectoryStep output;
  NormalizationParams norm;  ///< meaningful once normalized
  std::optional<geom::RigidTransform> gt_transform;

  /// Shape and domain invariants (schema sizes, mask/phase/stop in {0,1},
  /// exactly one stop = 1 on the last hint). Throws SchemaError.
  void check() const;
};

struct RecorderConfig {
  HintMode mode = HintMode::P12;
  bool gt_optimisation = false;  ///< requires a ground-truth transform
};

/// Executes the instrumented ICP loop and records the probe table.
/// Clouds must have equal size (fit_node_count first), n >= 2, equal
/// feature dims, and cfg.max_iterations >= 1.
Trajectory record_trajectory(const geom::PointCloud& src,
                             const geom::PointCloud& tgt,
                             const icp::IcpConfig& icp_cfg,
                             const RecorderConfig& rec_cfg,
                             std::optional<geom::RigidTransform> gt = {});

struct GtTargets {
  geom::PointCloud final_src;
  geom::PointCloud final_tgt;
  geom::CorrespondenceSet correspondences;
};

/// Training targets under gt-optimization: the ground-truth transform
/// applied to the initial source, the target unchanged, and the nearest
/// correspondences between them.
GtTargets ground_truth_targets(const geom::PointCloud& src,
                               const geom::PointCloud& tgt,
                               const geom::RigidTransform& gt);

/// Pads (random repeats, masked) or subsamples (uniform subset, original
/// order) the cloud to exactly n points. Deterministic in `seed`.
geom::PointCloud fit_node_count(const geom::PointCloud& cloud, int n,
                                std::uint64_t seed);

/// Min-max scales every scalar probe except `error` to [0,1] with
/// per-trajectory statistics (constant probes map to 0.5), squashes the
/// error probe, and leaves masks/categoricals untouched. Feature channels
/// of `pointclouds` pass through unchanged.
Trajectory normalize(const Trajectory& traj, double squash_c = 5.0);
/// Exact inverse of normalize given the stored parameters.
Trajectory denormalize(const Trajectory& traj);

/// Forward/inverse value transform for one probe under the stored
/// parameters; used on predicted arrays outside a full Trajectory.
Eigen::ArrayXd apply_probe_scale(const ProbeSpec& spec,
                                 const NormalizationParams& norm,
                                 const Eigen::ArrayXd& raw);
Eigen::ArrayXd invert_probe_scale(const ProbeSpec& spec,
                                  const NormalizationParams& norm,
                                  const Eigen::ArrayXd& scaled);

}  // namespace icptraj::probe
