#include "icptraj/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "icptraj/error.hpp"
#include "icptraj/rng.hpp"

namespace icptraj::probe {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Eigen::ArrayXd flatten_rows(const Eigen::MatrixXd& m) {
  Eigen::ArrayXd out(m.rows() * m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r * m.cols() + c] = m(r, c);
  return out;
}

Eigen::ArrayXd pack_positions(const geom::PointCloud& cloud) {
  Eigen::ArrayXd out(3 * static_cast<Eigen::Index>(cloud.size()));
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int c = 0; c < 3; ++c) out[3 * i + c] = cloud.points[i][c];
  return out;
}

Eigen::ArrayXd graph_value(double v) { return Eigen::ArrayXd::Constant(1, v); }

std::vector<std::uint8_t> materialize_mask(const geom::PointCloud& cloud) {
  if (!cloud.mask.empty()) return cloud.mask;
  return std::vector<std::uint8_t>(cloud.size(), 1);
}

/// Euclidean distances at the matched entries of `corr` for the given
/// source positions (0 elsewhere), used after a phase-2 update moved the
/// source while the matches stayed fixed.
Eigen::MatrixXd matched_distances(const geom::PointCloud& src,
                                  const geom::PointCloud& tgt,
                                  const geom::CorrespondenceSet& corr) {
  const int n = static_cast<int>(src.size());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    int j = corr.match_of(i);
    if (j >= 0) out(i, j) = (src.points[i] - tgt.points[j]).norm();
  }
  return out;
}

bool is_binary(double v) { return v == 0.0 || v == 1.0; }

}  // namespace

const ProbeSpec* TrajectorySchema::find(std::string_view name) const {
  for (const auto& p : probes)
    if (p.name == name) return &p;
  return nullptr;
}

std::vector<const ProbeSpec*> TrajectorySchema::stage_probes(
    Stage stage) const {
  std::vector<const ProbeSpec*> out;
  for (const auto& p : probes)
    if (p.stage == stage) out.push_back(&p);
  return out;
}

std::size_t TrajectorySchema::flat_size(const ProbeSpec& spec, int n) {
  const std::size_t nn = static_cast<std::size_t>(n);
  switch (spec.location) {
    case Location::Node:
      return nn * spec.dim;
    case Location::Edge:
      return nn * nn * spec.dim;
    case Location::Graph:
      return static_cast<std::size_t>(spec.dim);
  }
  return 0;
}

TrajectorySchema make_schema(int feature_dim) {
  if (feature_dim < 0)
    throw InvalidInputError("make_schema: negative feature dimension");
  TrajectorySchema s;
  s.probes = {
      {"pointclouds", Stage::Input, Location::Node, Kind::Scalar,
       6 + 2 * feature_dim, 0},
      {"node_positions", Stage::Input, Location::Node, Kind::Scalar, 1, 0},
      {"transformed_src", Stage::Hint, Location::Node, Kind::Scalar, 3, 0},
      {"transformed_tgt", Stage::Hint, Location::Node, Kind::Scalar, 3, 0},
      {"correspondences", Stage::Hint, Location::Edge, Kind::Mask, 1, 0},
      {"distances", Stage::Hint, Location::Edge, Kind::Scalar, 1, 0},
      {"error", Stage::Hint, Location::Graph, Kind::Scalar, 1, 0},
      {"iterations", Stage::Hint, Location::Graph, Kind::Scalar, 1, 0},
      {"phase", Stage::Hint, Location::Graph, Kind::Categorical, 1, 2},
      {"stop", Stage::Hint, Location::Graph, Kind::Categorical, 1, 2},
      {"final_src", Stage::Output, Location::Node, Kind::Scalar, 3, 0},
      {"final_tgt", Stage::Output, Location::Node, Kind::Scalar, 3, 0},
      {"final_correspondences", Stage::Output, Location::Edge, Kind::Mask, 1,
       0},
  };
  return s;
}

const Eigen::ArrayXd& TrajectoryStep::at(std::string_view name) const {
  auto it = values.find(std::string(name));
  if (it == values.end())
    throw SchemaError("trajectory step has no probe '" + std::string(name) +
                      "'");
  return it->second;
}

Eigen::ArrayXd& TrajectoryStep::at(std::string_view name) {
  auto it = values.find(std::string(name));
  if (it == values.end())
    throw SchemaError("trajectory step has no probe '" + std::string(name) +
                      "'");
  return it->second;
}

bool TrajectoryStep::has(std::string_view name) const {
  return values.count(std::string(name)) != 0;
}

double squash_error(double e, double c) {
  if (std::isinf(e) && e > 0.0) return 1.0;
  if (!(e > 0.0)) e = 1e-300;
  return 1.0 / (1.0 + std::exp(-std::log(e) + c));
}

double unsquash_error(double f, double c) {
  if (f >= 1.0) return kInf;
  if (f <= 0.0) return 0.0;
  return std::exp(c + std::log(f / (1.0 - f)));
}

void Trajectory::check() const {
  if (node_count < 2) throw SchemaError("trajectory needs node_count >= 2");
  if (t_max < 1) throw SchemaError("trajectory needs t_max >= 1");
  if (hints.empty()) throw SchemaError("trajectory has no hint steps");
  if (src_mask.size() != static_cast<std::size_t>(node_count) ||
      tgt_mask.size() != static_cast<std::size_t>(node_count))
    throw SchemaError("trajectory masks must have node_count entries");

  auto check_step = [&](const TrajectoryStep& step, Stage stage,
                        const char* label) {
    auto specs = schema.stage_probes(stage);
    if (step.values.size() != specs.size())
      throw SchemaError(std::string("trajectory ") + label +
                        " step carries an unexpected probe set");
    for (const ProbeSpec* spec : specs) {
      if (!step.has(spec->name))
        throw SchemaError("trajectory " + std::string(label) +
                          " step is missing probe '" + spec->name + "'");
      const Eigen::ArrayXd& arr = step.at(spec->name);
      if (static_cast<std::size_t>(arr.size()) !=
          TrajectorySchema::flat_size(*spec, node_count))
        throw SchemaError("probe '" + spec->name + "' has " +
                          std::to_string(arr.size()) + " values, expected " +
                          std::to_string(
                              TrajectorySchema::flat_size(*spec, node_count)));
      if (spec->kind == Kind::Mask) {
        for (Eigen::Index k = 0; k < arr.size(); ++k)
          if (!is_binary(arr[k]))
            throw SchemaError("mask probe '" + spec->name +
                              "' holds a value outside {0,1}");
        if (spec->location == Location::Edge) {
          for (int i = 0; i < node_count; ++i) {
            double row = 0.0;
            for (int j = 0; j < node_count; ++j)
              row += arr[static_cast<Eigen::Index>(i) * node_count + j];
            if (row > 1.0)
              throw SchemaError("mask probe '" + spec->name +
                                "' has a row with multiple matches");
          }
        }
      }
      if (spec->kind == Kind::Categorical) {
        for (Eigen::Index k = 0; k < arr.size(); ++k) {
          double v = arr[k];
          if (v != std::floor(v) || v < 0.0 || v >= spec->categories)
            throw SchemaError("categorical probe '" + spec->name +
                              "' holds an out-of-range class");
        }
      }
    }
  };

  check_step(input, Stage::Input, "input");
  for (const auto& h : hints) check_step(h, Stage::Hint, "hint");
  check_step(output, Stage::Output, "output");

  double stop_sum = 0.0;
  for (const auto& h : hints) stop_sum += h.at("stop")[0];
  if (stop_sum != 1.0 || hints.back().at("stop")[0] != 1.0)
    throw SchemaError(
        "trajectory must raise the stop flag exactly once, on the last hint");
}

geom::PointCloud fit_node_count(const geom::PointCloud& cloud, int n,
                                std::uint64_t seed) {
  cloud.check();
  if (n < 1) throw InvalidInputError("fit_node_count: n must be >= 1");
  const std::size_t size = cloud.size();
  if (size == 0) throw EmptyInputError("fit_node_count: empty cloud");
  if (static_cast<std::size_t>(n) == size) return cloud;

  Rng rng(seed);
  geom::PointCloud out;
  if (static_cast<std::size_t>(n) > size) {
    out = cloud;
    if (out.mask.empty()) out.mask.assign(size, 1);
    for (std::size_t k = size; k < static_cast<std::size_t>(n); ++k) {
      std::size_t pick = rng.next_index(size);
      out.points.push_back(cloud.points[pick]);
      if (!cloud.features.empty()) out.features.push_back(cloud.features[pick]);
      out.mask.push_back(0);
    }
    return out;
  }

  // Order-preserving uniform subsample (selection sampling).
  std::size_t need = static_cast<std::size_t>(n);
  for (std::size_t i = 0; i < size && need > 0; ++i) {
    std::size_t remaining = size - i;
    if (rng.next_index(remaining) < need) {
      out.points.push_back(cloud.points[i]);
      if (!cloud.features.empty()) out.features.push_back(cloud.features[i]);
      if (!cloud.mask.empty()) out.mask.push_back(cloud.mask[i]);
      --need;
    }
  }
  return out;
}

GtTargets ground_truth_targets(const geom::PointCloud& src,
                               const geom::PointCloud& tgt,
                               const geom::RigidTransform& gt) {
  src.check();
  tgt.check();
  if (src.size() != tgt.size())
    throw InvalidInputError(
        "ground_truth_targets: clouds must share a node count");
  GtTargets out;
  out.final_src = apply_transform(src, gt);
  out.final_tgt = tgt;
  out.correspondences = nearest_correspondences(out.final_src, tgt);
  return out;
}

Trajectory record_trajectory(const geom::PointCloud& src,
                             const geom::PointCloud& tgt,
                             const icp::IcpConfig& icp_cfg,
                             const RecorderConfig& rec_cfg,
                             std::optional<geom::RigidTransform> gt) {
  src.check();
  tgt.check();
  if (src.size() != tgt.size())
    throw InvalidInputError(
        "record_trajectory: clouds must share a node count (fit_node_count "
        "first)");
  const int n = static_cast<int>(src.size());
  if (n < 2)
    throw InvalidInputError("record_trajectory: need at least 2 nodes");
  if (src.feature_dim() != tgt.feature_dim())
    throw InvalidInputError(
        "record_trajectory: clouds disagree in feature dimension");
  if (icp_cfg.max_iterations < 1)
    throw InvalidInputError("record_trajectory: max_iterations must be >= 1");
  if (rec_cfg.gt_optimisation && !gt.has_value())
    throw InvalidInputError(
        "record_trajectory: gt optimisation needs a ground-truth transform");

  Trajectory traj;
  traj.schema = make_schema(src.feature_dim());
  traj.node_count = n;
  traj.variant = icp_cfg.variant;
  traj.hint_mode = rec_cfg.mode;
  traj.t_max = icp_cfg.max_iterations;
  traj.tolerance = icp_cfg.tolerance;
  traj.gt_optimisation = rec_cfg.gt_optimisation;
  traj.src_mask = materialize_mask(src);
  traj.tgt_mask = materialize_mask(tgt);
  traj.gt_transform = gt;

  const int fdim = src.feature_dim();
  const int pc_dim = 6 + 2 * fdim;
  Eigen::ArrayXd pc(static_cast<Eigen::Index>(n) * pc_dim);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      pc[i * pc_dim + c] = src.points[i][c];
      pc[i * pc_dim + 3 + c] = tgt.points[i][c];
    }
    for (int f = 0; f < fdim; ++f) {
      pc[i * pc_dim + 6 + f] = src.features[i][f];
      pc[i * pc_dim + 6 + fdim + f] = tgt.features[i][f];
    }
  }
  traj.input.values["pointclouds"] = pc;
  Eigen::ArrayXd pos(n);
  for (int i = 0; i < n; ++i) pos[i] = double(i) / double(n - 1);
  traj.input.values["node_positions"] = pos;

  const Eigen::ArrayXd tgt_flat = pack_positions(tgt);
  const double t_max = icp_cfg.max_iterations;
  const HintMode mode = rec_cfg.mode;
  double prev_error = kInf;

  auto push_hint = [&](const Eigen::ArrayXd& src_flat,
                       const Eigen::MatrixXd& adj, const Eigen::MatrixXd& dist,
                       double error, double iter_norm, double phase) {
    TrajectoryStep step;
    step.values["transformed_src"] = src_flat;
    step.values["transformed_tgt"] = tgt_flat;
    step.values["correspondences"] = flatten_rows(adj);
    step.values["distances"] = flatten_rows(dist);
    step.values["error"] = graph_value(error);
    step.values["iterations"] = graph_value(iter_norm);
    step.values["phase"] = graph_value(phase);
    step.values["stop"] = graph_value(0.0);
    traj.hints.push_back(std::move(step));
  };

  icp::IterationCallback callback = [&](const icp::IterationView& view) {
    const Eigen::ArrayXd cur_flat = pack_positions(view.cur_src);
    const double iter_in = view.iter_before / t_max;

    if (mode == HintMode::P12) {
      push_hint(cur_flat, view.corr.matrix, view.corr.distances, prev_error,
                iter_in, 0.0);
    } else if (mode == HintMode::P1I || mode == HintMode::P1I2) {
      Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(n, n);
      Eigen::MatrixXd dist = Eigen::MatrixXd::Zero(n, n);
      for (int i = 0; i < n; ++i) {
        if (!src.is_valid(i)) continue;
        adj.row(i) = view.corr.matrix.row(i);
        dist.row(i) = view.corr.distances.row(i);
        push_hint(cur_flat, adj, dist, prev_error, iter_in, 0.0);
      }
    }

    if (mode != HintMode::P1I) {
      if (view.converged) {
        push_hint(cur_flat, view.corr.matrix, view.corr.distances, view.error,
                  iter_in, 1.0);
      } else {
        push_hint(pack_positions(view.next_src), view.corr.matrix,
                  matched_distances(view.next_src, tgt, view.corr), view.error,
                  (view.iter_before + 1) / t_max, 1.0);
      }
    }
    prev_error = view.error;
  };

  icp::IcpResult result =
      icp::run_icp(src, tgt, icp_cfg, nullptr, nullptr, callback);
  traj.hints.back().at("stop")[0] = 1.0;

  if (rec_cfg.gt_optimisation) {
    GtTargets targets = ground_truth_targets(src, tgt, *gt);
    traj.output.values["final_src"] = pack_positions(targets.final_src);
    traj.output.values["final_tgt"] = tgt_flat;
    traj.output.values["final_correspondences"] =
        flatten_rows(targets.correspondences.matrix);
  } else {
    traj.output.values["final_src"] = pack_positions(result.final_src);
    traj.output.values["final_tgt"] = tgt_flat;
    traj.output.values["final_correspondences"] =
        flatten_rows(result.final_correspondences.matrix);
  }
  return traj;
}

Eigen::ArrayXd apply_probe_scale(const ProbeSpec& spec,
                                 const NormalizationParams& norm,
                                 const Eigen::ArrayXd& raw) {
  if (spec.kind != Kind::Scalar) return raw;
  if (spec.name == "error") {
    Eigen::ArrayXd out = raw;
    for (Eigen::Index k = 0; k < out.size(); ++k)
      out[k] = squash_error(out[k], norm.squash_c);
    return out;
  }
  auto it = norm.scales.find(spec.name);
  if (it == norm.scales.end())
    throw SchemaError("no scale parameters for probe '" + spec.name + "'");
  const ScaleParams& p = it->second;
  Eigen::ArrayXd out = raw;
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    if (static_cast<int>(k % spec.dim) >= p.scaled_channels) continue;
    out[k] = (p.max == p.min) ? 0.5 : (out[k] - p.min) / (p.max - p.min);
  }
  return out;
}

Eigen::ArrayXd invert_probe_scale(const ProbeSpec& spec,
                                  const NormalizationParams& norm,
                                  const Eigen::ArrayXd& scaled) {
  if (spec.kind != Kind::Scalar) return scaled;
  if (spec.name == "error") {
    Eigen::ArrayXd out = scaled;
    for (Eigen::Index k = 0; k < out.size(); ++k)
      out[k] = unsquash_error(out[k], norm.squash_c);
    return out;
  }
  auto it = norm.scales.find(spec.name);
  if (it == norm.scales.end())
    throw SchemaError("no scale parameters for probe '" + spec.name + "'");
  const ScaleParams& p = it->second;
  Eigen::ArrayXd out = scaled;
  for (Eigen::Index k = 0; k < out.size(); ++k) {
    if (static_cast<int>(k % spec.dim) >= p.scaled_channels) continue;
    out[k] = (p.max == p.min) ? p.min : out[k] * (p.max - p.min) + p.min;
  }
  return out;
}

namespace {

/// Applies fn to every occurrence of every probe, stage by stage.
template <typename Fn>
void for_each_probe(Trajectory& traj, Fn&& fn) {
  for (const auto& spec : traj.schema.probes) {
    switch (spec.stage) {
      case Stage::Input:
        fn(spec, traj.input.at(spec.name));
        break;
      case Stage::Hint:
        for (auto& h : traj.hints) fn(spec, h.at(spec.name));
        break;
      case Stage::Output:
        fn(spec, traj.output.at(spec.name));
        break;
    }
  }
}

}  // namespace

Trajectory normalize(const Trajectory& traj, double squash_c) {
  if (traj.normalized)
    throw InvalidInputError("normalize: trajectory is already normalized");
  Trajectory out = traj;
  out.norm.squash_c = squash_c;
  out.norm.scales.clear();

  // Per-probe min/max over every occurrence, coordinate channels only for
  // the pointclouds probe (semantic features pass through untouched).
  for_each_probe(out, [&](const ProbeSpec& spec, Eigen::ArrayXd& arr) {
    if (spec.kind != Kind::Scalar || spec.name == "error") return;
    auto [it, fresh] = out.norm.scales.try_emplace(spec.name);
    ScaleParams& p = it->second;
    if (fresh) {
      p.min = kInf;
      p.max = -kInf;
      p.scaled_channels = spec.name == "pointclouds" ? 6 : spec.dim;
    }
    for (Eigen::Index k = 0; k < arr.size(); ++k) {
      if (static_cast<int>(k % spec.dim) >= p.scaled_channels) continue;
      p.min = std::min(p.min, arr[k]);
      p.max = std::max(p.max, arr[k]);
    }
  });

  for_each_probe(out, [&](const ProbeSpec& spec, Eigen::ArrayXd& arr) {
    arr = apply_probe_scale(spec, out.norm, arr);
  });
  out.normalized = true;
  return out;
}

Trajectory denormalize(const Trajectory& traj) {
  if (!traj.normalized)
    throw InvalidInputError("denormalize: trajectory is not normalized");
  Trajectory out = traj;
  for_each_probe(out, [&](const ProbeSpec& spec, Eigen::ArrayXd& arr) {
    arr = invert_probe_scale(spec, out.norm, arr);
  });
  out.normalized = false;
  return out;
}

}  // namespace icptraj::probe
