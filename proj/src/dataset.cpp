#include "icptraj/dataset.hpp"

#include <Eigen/Geometry>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <string_view>

#include "icptraj/error.hpp"
#include "icptraj/rng.hpp"

namespace icptraj::data {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t k = 0;
  while (k < line.size()) {
    while (k < line.size() && (line[k] == ' ' || line[k] == '\t')) ++k;
    std::size_t start = k;
    while (k < line.size() && line[k] != ' ' && line[k] != '\t') ++k;
    if (k > start) out.push_back(line.substr(start, k - start));
  }
  return out;
}

double parse_double(std::string_view token, int line_no) {
  std::string buf(token);
  char* end = nullptr;
  double value = std::strtod(buf.c_str(), &end);
  if (buf.empty() || end != buf.c_str() + buf.size())
    throw ParseError("centroid file line " + std::to_string(line_no) +
                     ": bad number '" + buf + "'");
  return value;
}

struct Scan {
  std::string id;
  geom::RigidTransform pose;
  geom::PointCloud cloud;
  int header_line = 0;
};

}  // namespace

RegistrationSample gen_synthetic_pair(int n, double coord_range,
                                      double max_rot_deg, double max_trans,
                                      std::uint64_t seed) {
  if (n < 4)
    throw InvalidInputError("gen_synthetic_pair: need at least 4 points");
  if (coord_range <= 0.0)
    throw InvalidInputError("gen_synthetic_pair: coord_range must be > 0");
  if (max_rot_deg < 0.0 || max_trans < 0.0)
    throw InvalidInputError(
        "gen_synthetic_pair: rotation and translation bounds must be >= 0");

  Rng rng = derive_stream(seed, "synthetic");
  RegistrationSample out;
  out.src.points.reserve(n);
  for (int k = 0; k < n; ++k) {
    Eigen::Vector3d p;
    for (int c = 0; c < 3; ++c)
      p(c) = rng.next_uniform(-coord_range, coord_range);
    out.src.points.push_back(p);
    out.src.mask.push_back(1);
  }

  Eigen::Vector3d axis;
  do {
    for (int c = 0; c < 3; ++c) axis(c) = rng.next_gaussian();
  } while (axis.norm() < 1e-9);
  axis.normalize();
  double angle = rng.next_uniform(0.0, max_rot_deg) * M_PI / 180.0;
  out.gt_transform.rotation = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  for (int c = 0; c < 3; ++c)
    out.gt_transform.translation(c) = rng.next_uniform(-max_trans, max_trans);

  out.tgt = geom::apply_transform(out.src, out.gt_transform);
  out.tag = "synth-" + std::to_string(seed);
  return out;
}

std::vector<RegistrationSample> load_centroid_scans(
    const std::filesystem::path& path, const CentroidLoadOptions& options) {
  std::ifstream in(path);
  if (!in)
    throw ParseError("cannot open centroid file '" + path.string() + "'");

  std::vector<Scan> scans;
  int classes = 0;
  int feature_dim = -1;  // fixed by the first centroid row
  bool saw_data = false;

  auto close_scan = [&]() {
    if (!scans.empty() && scans.back().cloud.size() == 0)
      throw SchemaError("centroid file: scan '" + scans.back().id +
                        "' (line " + std::to_string(scans.back().header_line) +
                        ") has no centroids");
  };

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto tokens = split_ws(line);
    if (tokens.empty()) continue;

    if (tokens[0] == "#scan") {
      if (tokens.size() < 2)
        throw ParseError("centroid file line " + std::to_string(line_no) +
                         ": #scan needs an id");
      close_scan();
      Scan scan;
      scan.id = std::string(tokens[1]);
      scan.header_line = line_no;
      if (tokens.size() < 3 || tokens[2] != "pose")
        throw SchemaError("centroid file: scan '" + scan.id +
                          "' is missing its pose");
      if (tokens.size() != 15)
        throw ParseError("centroid file line " + std::to_string(line_no) +
                         ": pose needs 12 values (3x4 row-major)");
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c)
          scan.pose.rotation(r, c) = parse_double(tokens[3 + r * 4 + c],
                                                  line_no);
        scan.pose.translation(r) = parse_double(tokens[3 + r * 4 + 3],
                                                line_no);
      }
      scans.push_back(std::move(scan));
      continue;
    }
    if (tokens[0] == "#classes") {
      if (saw_data)
        throw ParseError("centroid file line " + std::to_string(line_no) +
                         ": #classes must precede the first centroid row");
      if (tokens.size() != 2)
        throw ParseError("centroid file line " + std::to_string(line_no) +
                         ": #classes needs a count");
      classes = static_cast<int>(parse_double(tokens[1], line_no));
      if (classes < 1)
        throw ParseError("centroid file line " + std::to_string(line_no) +
                         ": class count must be positive");
      continue;
    }
    if (tokens[0][0] == '#') continue;

    if (scans.empty())
      throw ParseError("centroid file line " + std::to_string(line_no) +
                       ": centroid row before any #scan header");
    if (tokens.size() < 3)
      throw ParseError("centroid file line " + std::to_string(line_no) +
                       ": centroid rows start with x y z");
    saw_data = true;

    Eigen::Vector3d p;
    for (int c = 0; c < 3; ++c) p(c) = parse_double(tokens[c], line_no);
    geom::PointCloud& cloud = scans.back().cloud;
    cloud.points.push_back(p);
    cloud.mask.push_back(1);

    if (classes > 0) {
      if (tokens.size() != 4)
        throw ParseError("centroid file line " + std::to_string(line_no) +
                         ": labeled rows are 'x y z label'");
      double raw = parse_double(tokens[3], line_no);
      if (raw != std::floor(raw) || raw < 0 || raw >= classes)
        throw SchemaError("centroid file line " + std::to_string(line_no) +
                          ": label " + std::string(tokens[3]) +
                          " outside the declared " + std::to_string(classes) +
                          " classes");
      Eigen::VectorXd onehot = Eigen::VectorXd::Zero(classes);
      onehot(static_cast<int>(raw)) = 1.0;
      cloud.features.push_back(onehot);
    } else {
      int dim = static_cast<int>(tokens.size()) - 3;
      if (feature_dim < 0) feature_dim = dim;
      if (dim != feature_dim)
        throw SchemaError("centroid file line " + std::to_string(line_no) +
                          ": feature width " + std::to_string(dim) +
                          " disagrees with earlier rows (" +
                          std::to_string(feature_dim) + ")");
      if (dim > 0) {
        Eigen::VectorXd emb(dim);
        for (int c = 0; c < dim; ++c)
          emb(c) = parse_double(tokens[3 + c], line_no);
        cloud.features.push_back(emb);
      }
    }
  }
  close_scan();

  std::vector<RegistrationSample> samples;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    for (std::size_t j = i + 1; j < scans.size(); ++j) {
      double dist =
          (scans[i].pose.translation - scans[j].pose.translation).norm();
      if (options.pair_distance >= 0.0 &&
          std::abs(dist - options.pair_distance) > options.pair_tolerance)
        continue;
      RegistrationSample s;
      s.src = scans[i].cloud;
      s.tgt = scans[j].cloud;
      s.gt_transform = scans[j].pose.inverse() * scans[i].pose;
      s.tag = scans[i].id + "->" + scans[j].id;
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

DatasetSplit split_dataset(const std::vector<RegistrationSample>& samples,
                           int train_count, int eval_count, int test_count,
                           std::uint64_t seed) {
  if (train_count < 0 || eval_count < 0 || test_count < 0)
    throw InvalidInputError("split_dataset: counts must be nonnegative");
  std::size_t want = static_cast<std::size_t>(train_count) + eval_count +
                     test_count;
  if (want > samples.size())
    throw InvalidInputError("split_dataset: requested " +
                            std::to_string(want) + " samples but only " +
                            std::to_string(samples.size()) + " available");

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = derive_stream(seed, "split");
  for (std::size_t k = 0; k + 1 < order.size(); ++k) {
    std::size_t j = k + rng.next_index(order.size() - k);
    std::swap(order[k], order[j]);
  }

  DatasetSplit split;
  std::size_t at = 0;
  for (int k = 0; k < train_count; ++k)
    split.train.push_back(samples[order[at++]]);
  for (int k = 0; k < eval_count; ++k)
    split.eval.push_back(samples[order[at++]]);
  for (int k = 0; k < test_count; ++k)
    split.test.push_back(samples[order[at++]]);
  return split;
}

DatasetSplit split_dataset(const std::vector<RegistrationSample>& samples,
                           double train_ratio, double eval_ratio,
                           double test_ratio, std::uint64_t seed) {
  if (train_ratio < 0 || eval_ratio < 0 || test_ratio < 0 ||
      std::abs(train_ratio + eval_ratio + test_ratio - 1.0) > 1e-9)
    throw InvalidInputError(
        "split_dataset: ratios must be nonnegative and sum to 1");
  int n = static_cast<int>(samples.size());
  int train_count = static_cast<int>(std::floor(n * train_ratio));
  int eval_count = static_cast<int>(std::floor(n * eval_ratio));
  return split_dataset(samples, train_count, eval_count,
                       n - train_count - eval_count, seed);
}

}  // namespace icptraj::data
