#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "icptraj/dataset.hpp"
#include "icptraj/model.hpp"
#include "icptraj/probe.hpp"

namespace icptraj::eval {

/// Translation error ||t - t_hat|| and rotation error
/// arccos((Tr(R_hat^T R) - 1) / 2), the argument clamped to [-1, 1]. Both
/// inputs must be proper rotations; the result RRE lies in [0, pi].
std::pair<double, double> rte_rre(const geom::RigidTransform& pred,
                                  const geom::RigidTransform& gt);

/// Motion recovered by kabsch between the original and the predicted
/// transformed source, matched index to index over the valid points.
/// Throws DegenerateGeometryError for collinear geometry and
/// InvalidInputError on size or mask disagreement.
geom::RigidTransform extract_transform(const geom::PointCloud& src_original,
                                       const geom::PointCloud& pred_transformed);

struct ClassificationMetrics {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double balanced_accuracy = 0.0;
};

/// Entrywise binary comparison of the two n x n match matrices. Empty
/// denominators resolve to 1 when the class is absent altogether (no
/// positives anywhere -> perfect precision/recall), else 0.
ClassificationMetrics classification_metrics(const geom::CorrespondenceSet& pred,
                                             const geom::CorrespondenceSet& truth);

/// Mean squared error per coordinate axis over the valid points. Clouds
/// must agree in size and mask.
Eigen::Vector3d per_axis_mse(const geom::PointCloud& pred,
                             const geom::PointCloud& truth);

/// One executed registration run in dataset units: the transformed source
/// at every step, the final clouds, and the final correspondences.
struct PredictedRun {
  std::vector<geom::PointCloud> step_src;
  geom::PointCloud final_src;
  geom::PointCloud final_tgt;
  geom::CorrespondenceSet correspondences;
  int steps = 0;
  double runtime = 0.0;  ///< wall-clock seconds, informational only
  bool terminated = true;
};

/// Reads a recorded (unnormalized) trajectory back as a run, which makes
/// the recorder itself usable as a prediction oracle.
PredictedRun run_from_trajectory(const probe::Trajectory& traj);

/// Records the classical algorithm on the sample and wraps the trajectory.
PredictedRun run_classical(const data::RegistrationSample& sample,
                           const icp::IcpConfig& icp_cfg,
                           const probe::RecorderConfig& rec_cfg);

/// Runs model inference on the sample (clouds must already share the model
/// node count).
PredictedRun run_nar(const data::RegistrationSample& sample, nar::Model& model,
                     int t_max);

enum class Reference {
  Algorithm,    ///< the *T family: against the recorded algorithm run
  GroundTruth,  ///< the *GT family: against the dataset transform
};

struct RegistrationScore {
  std::string tag;
  double rte = 0.0;
  double rre = 0.0;
  Eigen::Vector3d mse_xyz = Eigen::Vector3d::Zero();
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double balanced_accuracy = 0.0;
  int steps = 0;
  double runtime = 0.0;
};

/// Scores one prediction. The algorithm run supplies the *T targets; the
/// ground-truth family compares against gt_transform(src) and the nearest
/// correspondences it induces.
RegistrationScore score_run(const data::RegistrationSample& sample,
                            const PredictedRun& pred,
                            const PredictedRun& algorithm, Reference ref);

/// MSE^t sequence: pooled squared error between predicted and algorithm
/// step clouds, one value per step, up to the shorter run.
std::vector<double> per_step_mse(const PredictedRun& pred,
                                 const PredictedRun& algorithm);

struct Aggregate {
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  int outliers = 0;  ///< values beyond 1.5 x IQR outside [q1, q3]
};

/// Median and interquartile range with linearly interpolated quantiles.
Aggregate aggregate_values(std::vector<double> values);

struct EvalReport {
  Reference reference = Reference::GroundTruth;
  std::vector<RegistrationScore> scores;  ///< one per sample
  std::vector<double> step_mse;           ///< pooled over samples and steps
  int step_count_mismatches = 0;  ///< runs shorter/longer than the algorithm
  std::map<std::string, Aggregate> summary;  ///< keyed by metric name
};

/// Classical algorithm scored against the chosen reference (the Algorithm
/// family is an identity check by construction).
EvalReport evaluate_classical(const std::vector<data::RegistrationSample>& samples,
                              const icp::IcpConfig& icp_cfg,
                              const probe::RecorderConfig& rec_cfg,
                              Reference ref);

/// Model inference scored against the chosen reference; the algorithm run
/// is recorded per sample for the *T targets and the MSE^t distribution.
EvalReport evaluate_nar(const std::vector<data::RegistrationSample>& samples,
                        nar::Model& model, const icp::IcpConfig& icp_cfg,
                        const probe::RecorderConfig& rec_cfg, Reference ref);

/// CSV: a header line, then one row per sample per labeled family.
void write_scores_csv(
    const std::filesystem::path& path,
    const std::vector<std::pair<std::string, EvalReport>>& families);

/// JSON: {"<benchmark>": {"<family>": {"<metric>": {median, q1, q3, iqr,
/// outliers}, ...}, ...}} plus sample/mismatch counts.
void write_summary_json(
    const std::filesystem::path& path, const std::string& benchmark,
    const std::vector<std::pair<std::string, EvalReport>>& families);

}  // namespace icptraj::eval
