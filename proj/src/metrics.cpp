#include "icptraj/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <numeric>
#include <tuple>

#include "icptraj/icp.hpp"
#include "icptraj/trajectory_io.hpp"

namespace icptraj::eval {

namespace {

void check_cloud_pair(const geom::PointCloud& a, const geom::PointCloud& b,
                      const char* who) {
  if (a.size() != b.size())
    throw InvalidInputError(std::string(who) + ": clouds disagree in size");
  for (int i = 0; i < a.size(); ++i)
    if (a.is_valid(i) != b.is_valid(i))
      throw InvalidInputError(std::string(who) +
                              ": clouds disagree in validity mask");
}

geom::PointCloud cloud_from_flat(const Eigen::ArrayXd& flat,
                                 const std::vector<std::uint8_t>& mask,
                                 int n) {
  geom::PointCloud cloud;
  cloud.points.reserve(n);
  for (int i = 0; i < n; ++i) {
    cloud.points.emplace_back(flat[i * 3], flat[i * 3 + 1], flat[i * 3 + 2]);
    cloud.mask.push_back(mask[i]);
  }
  return cloud;
}

double seconds_since(
    const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::pair<double, double> rte_rre(const geom::RigidTransform& pred,
                                  const geom::RigidTransform& gt) {
  double rte = (gt.translation - pred.translation).norm();
  // Geodesic angle acos((tr(Rp^T Rg) - 1) / 2) computed through the chord
  // length |Rp - Rg|_F = 2 sqrt(2) sin(angle / 2): identical rotations give
  // exactly zero instead of acos(1 - eps) noise.
  double chord = (pred.rotation - gt.rotation).norm() / (2.0 * std::sqrt(2.0));
  double rre = 2.0 * std::asin(std::min(chord, 1.0));
  return {rte, rre};
}

geom::RigidTransform extract_transform(
    const geom::PointCloud& src_original,
    const geom::PointCloud& pred_transformed) {
  check_cloud_pair(src_original, pred_transformed, "extract_transform");
  const int n = src_original.size();
  geom::CorrespondenceSet corr;
  corr.matrix = Eigen::MatrixXd::Zero(n, n);
  corr.distances = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    if (src_original.is_valid(i)) corr.matrix(i, i) = 1.0;
  return geom::kabsch(src_original, pred_transformed, corr);
}

ClassificationMetrics classification_metrics(
    const geom::CorrespondenceSet& pred, const geom::CorrespondenceSet& truth) {
  if (pred.matrix.rows() != truth.matrix.rows() ||
      pred.matrix.cols() != truth.matrix.cols())
    throw InvalidInputError(
        "classification_metrics: correspondence shapes disagree");

  double tp = 0, fp = 0, fn = 0, tn = 0;
  for (Eigen::Index i = 0; i < pred.matrix.rows(); ++i)
    for (Eigen::Index j = 0; j < pred.matrix.cols(); ++j) {
      bool p = pred.matrix(i, j) != 0.0;
      bool t = truth.matrix(i, j) != 0.0;
      (p ? (t ? tp : fp) : (t ? fn : tn)) += 1.0;
    }

  // A denominator of zero means the class never occurs; score it perfect
  // when the prediction agrees (no positives anywhere), else zero.
  auto safe = [](double num, double den, double fallback) {
    return den > 0.0 ? num / den : fallback;
  };
  ClassificationMetrics m;
  m.precision = safe(tp, tp + fp, fn == 0.0 ? 1.0 : 0.0);
  m.recall = safe(tp, tp + fn, fp == 0.0 ? 1.0 : 0.0);
  m.f1 = safe(2.0 * m.precision * m.recall, m.precision + m.recall, 0.0);
  double tpr = safe(tp, tp + fn, 1.0);
  double tnr = safe(tn, tn + fp, 1.0);
  m.balanced_accuracy = (tpr + tnr) / 2.0;
  return m;
}

Eigen::Vector3d per_axis_mse(const geom::PointCloud& pred,
                             const geom::PointCloud& truth) {
  check_cloud_pair(pred, truth, "per_axis_mse");
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  int count = 0;
  for (int k = 0; k < pred.size(); ++k) {
    if (!pred.is_valid(k)) continue;
    Eigen::Vector3d d = pred.points[k] - truth.points[k];
    sum += d.cwiseProduct(d);
    ++count;
  }
  if (count == 0)
    throw EmptyInputError("per_axis_mse: no valid points to compare");
  return sum / count;
}

PredictedRun run_from_trajectory(const probe::Trajectory& traj) {
  if (traj.normalized)
    throw InvalidInputError(
        "run_from_trajectory: needs raw (unnormalized) dataset units");
  const int n = traj.node_count;

  PredictedRun run;
  for (const auto& hint : traj.hints)
    run.step_src.push_back(
        cloud_from_flat(hint.at("transformed_src"), traj.src_mask, n));
  run.final_src = cloud_from_flat(traj.output.at("final_src"), traj.src_mask,
                                  n);
  run.final_tgt = cloud_from_flat(traj.output.at("final_tgt"), traj.tgt_mask,
                                  n);

  const Eigen::ArrayXd& flat = traj.output.at("final_correspondences");
  run.correspondences.matrix = Eigen::MatrixXd::Zero(n, n);
  run.correspondences.distances = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (flat[i * n + j] != 0.0) {
        run.correspondences.matrix(i, j) = 1.0;
        run.correspondences.distances(i, j) =
            (run.final_src.points[i] - run.final_tgt.points[j]).norm();
      }
  run.steps = static_cast<int>(traj.hints.size());
  return run;
}

PredictedRun run_classical(const data::RegistrationSample& sample,
                           const icp::IcpConfig& icp_cfg,
                           const probe::RecorderConfig& rec_cfg) {
  auto start = std::chrono::steady_clock::now();
  probe::Trajectory traj = probe::record_trajectory(
      sample.src, sample.tgt, icp_cfg, rec_cfg, sample.gt_transform);
  PredictedRun run = run_from_trajectory(traj);
  run.runtime = seconds_since(start);
  return run;
}

PredictedRun run_nar(const data::RegistrationSample& sample, nar::Model& model,
                     int t_max) {
  auto start = std::chrono::steady_clock::now();
  nar::InferResult res = nar::infer(sample.src, sample.tgt, model, t_max);
  PredictedRun run;
  run.step_src = res.step_src;
  run.final_src = res.final_src;
  run.final_tgt = res.final_tgt;
  run.correspondences = res.correspondences;
  run.steps = res.stop_step;
  run.terminated = res.terminated;
  run.runtime = seconds_since(start);
  return run;
}

RegistrationScore score_run(const data::RegistrationSample& sample,
                            const PredictedRun& pred,
                            const PredictedRun& algorithm, Reference ref) {
  RegistrationScore s;
  s.tag = sample.tag;
  s.steps = pred.steps;
  s.runtime = pred.runtime;

  geom::RigidTransform pred_t = extract_transform(sample.src, pred.final_src);
  ClassificationMetrics cm;
  if (ref == Reference::Algorithm) {
    geom::RigidTransform algo_t =
        extract_transform(sample.src, algorithm.final_src);
    std::tie(s.rte, s.rre) = rte_rre(pred_t, algo_t);
    s.mse_xyz = per_axis_mse(pred.final_src, algorithm.final_src);
    cm = classification_metrics(pred.correspondences,
                                algorithm.correspondences);
  } else {
    std::tie(s.rte, s.rre) = rte_rre(pred_t, sample.gt_transform);
    geom::PointCloud gt_src =
        geom::apply_transform(sample.src, sample.gt_transform);
    s.mse_xyz = per_axis_mse(pred.final_src, gt_src);
    cm = classification_metrics(
        pred.correspondences,
        geom::nearest_correspondences(gt_src, sample.tgt));
  }
  s.f1 = cm.f1;
  s.precision = cm.precision;
  s.recall = cm.recall;
  s.balanced_accuracy = cm.balanced_accuracy;
  return s;
}

std::vector<double> per_step_mse(const PredictedRun& pred,
                                 const PredictedRun& algorithm) {
  std::size_t steps = std::min(pred.step_src.size(),
                               algorithm.step_src.size());
  std::vector<double> out;
  out.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t)
    out.push_back(per_axis_mse(pred.step_src[t], algorithm.step_src[t]).mean());
  return out;
}

Aggregate aggregate_values(std::vector<double> values) {
  Aggregate agg;
  if (values.empty()) return agg;
  std::sort(values.begin(), values.end());
  auto quantile = [&](double p) {
    double idx = p * (values.size() - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(idx));
    std::size_t hi = static_cast<std::size_t>(std::ceil(idx));
    double frac = idx - lo;
    return values[lo] * (1.0 - frac) + values[hi] * frac;
  };
  agg.median = quantile(0.5);
  agg.q1 = quantile(0.25);
  agg.q3 = quantile(0.75);
  agg.iqr = agg.q3 - agg.q1;
  double lo = agg.q1 - 1.5 * agg.iqr;
  double hi = agg.q3 + 1.5 * agg.iqr;
  for (double v : values)
    if (v < lo || v > hi) ++agg.outliers;
  return agg;
}

namespace {

EvalReport assemble_report(
    const std::vector<data::RegistrationSample>& samples,
    const std::function<PredictedRun(const data::RegistrationSample&,
                                     const PredictedRun&)>& predict,
    const icp::IcpConfig& icp_cfg, const probe::RecorderConfig& rec_cfg,
    Reference ref) {
  EvalReport rep;
  rep.reference = ref;
  std::vector<double> rte, rre, mx, my, mz, f1, pr, rc, ba, steps, runtime;
  for (const auto& sample : samples) {
    PredictedRun algo = run_classical(sample, icp_cfg, rec_cfg);
    PredictedRun pred = predict(sample, algo);
    RegistrationScore s = score_run(sample, pred, algo, ref);
    for (double v : per_step_mse(pred, algo)) rep.step_mse.push_back(v);
    if (pred.steps != algo.steps) ++rep.step_count_mismatches;
    rte.push_back(s.rte);
    rre.push_back(s.rre);
    mx.push_back(s.mse_xyz(0));
    my.push_back(s.mse_xyz(1));
    mz.push_back(s.mse_xyz(2));
    f1.push_back(s.f1);
    pr.push_back(s.precision);
    rc.push_back(s.recall);
    ba.push_back(s.balanced_accuracy);
    steps.push_back(s.steps);
    runtime.push_back(s.runtime);
    rep.scores.push_back(std::move(s));
  }
  rep.summary["rte"] = aggregate_values(rte);
  rep.summary["rre"] = aggregate_values(rre);
  rep.summary["mse_x"] = aggregate_values(mx);
  rep.summary["mse_y"] = aggregate_values(my);
  rep.summary["mse_z"] = aggregate_values(mz);
  rep.summary["f1"] = aggregate_values(f1);
  rep.summary["precision"] = aggregate_values(pr);
  rep.summary["recall"] = aggregate_values(rc);
  rep.summary["balanced_accuracy"] = aggregate_values(ba);
  rep.summary["steps"] = aggregate_values(steps);
  rep.summary["runtime"] = aggregate_values(runtime);
  rep.summary["step_mse"] = aggregate_values(rep.step_mse);
  return rep;
}

}  // namespace

EvalReport evaluate_classical(
    const std::vector<data::RegistrationSample>& samples,
    const icp::IcpConfig& icp_cfg, const probe::RecorderConfig& rec_cfg,
    Reference ref) {
  return assemble_report(
      samples,
      [](const data::RegistrationSample&, const PredictedRun& algo) {
        return algo;
      },
      icp_cfg, rec_cfg, ref);
}

EvalReport evaluate_nar(const std::vector<data::RegistrationSample>& samples,
                        nar::Model& model, const icp::IcpConfig& icp_cfg,
                        const probe::RecorderConfig& rec_cfg, Reference ref) {
  return assemble_report(
      samples,
      [&](const data::RegistrationSample& sample, const PredictedRun&) {
        return run_nar(sample, model, icp_cfg.max_iterations);
      },
      icp_cfg, rec_cfg, ref);
}

void write_scores_csv(
    const std::filesystem::path& path,
    const std::vector<std::pair<std::string, EvalReport>>& families) {
  std::string out =
      "family,tag,rte,rre,mse_x,mse_y,mse_z,f1,precision,recall,"
      "balanced_accuracy,steps,runtime\n";
  for (const auto& [label, rep] : families)
    for (const auto& s : rep.scores) {
      out += label + ',' + s.tag + ',' + traj_io::format_g17(s.rte) + ',' +
             traj_io::format_g17(s.rre) + ',' +
             traj_io::format_g17(s.mse_xyz(0)) + ',' +
             traj_io::format_g17(s.mse_xyz(1)) + ',' +
             traj_io::format_g17(s.mse_xyz(2)) + ',' +
             traj_io::format_g17(s.f1) + ',' +
             traj_io::format_g17(s.precision) + ',' +
             traj_io::format_g17(s.recall) + ',' +
             traj_io::format_g17(s.balanced_accuracy) + ',' +
             std::to_string(s.steps) + ',' + traj_io::format_g17(s.runtime) +
             '\n';
    }
  write_text(path, out);
}

void write_summary_json(
    const std::filesystem::path& path, const std::string& benchmark,
    const std::vector<std::pair<std::string, EvalReport>>& families) {
  nlohmann::json root;
  for (const auto& [label, rep] : families) {
    nlohmann::json fam;
    fam["samples"] = rep.scores.size();
    fam["step_count_mismatches"] = rep.step_count_mismatches;
    for (const auto& [metric, agg] : rep.summary)
      fam["metrics"][metric] = {{"median", agg.median},
                                {"q1", agg.q1},
                                {"q3", agg.q3},
                                {"iqr", agg.iqr},
                                {"outliers", agg.outliers}};
    root[benchmark][label] = std::move(fam);
  }
  write_text(path, root.dump(2) + "\n");
}

}  // namespace icptraj::eval
