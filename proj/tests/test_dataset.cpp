#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "icptraj/dataset.hpp"

using namespace icptraj;
using data::CentroidLoadOptions;
using data::DatasetSplit;
using data::RegistrationSample;

namespace {

constexpr const char* kIdentityPose = "pose 1 0 0 0 0 1 0 0 0 0 1 0";

std::filesystem::path fixture(const std::string& name,
                              const std::string& text) {
  auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream out(path, std::ios::trunc);
  REQUIRE(bool(out));
  out << text;
  return path;
}

std::vector<std::string> tags(const std::vector<RegistrationSample>& v) {
  std::vector<std::string> out;
  for (const auto& s : v) out.push_back(s.tag);
  return out;
}

std::vector<RegistrationSample> dummy_samples(int count) {
  std::vector<RegistrationSample> out(count);
  for (int k = 0; k < count; ++k) out[k].tag = "s" + std::to_string(k);
  return out;
}

}  // namespace

TEST_CASE("synthetic pairs stay inside the declared ranges") {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto s = data::gen_synthetic_pair(200, 40.0, 45.0, 20.0, seed);
    REQUIRE(s.src.size() == 200);
    REQUIRE(s.tgt.size() == 200);
    CHECK(s.src.valid_count() == 200);
    CHECK(s.src.feature_dim() == 0);
    for (const auto& p : s.src.points) {
      CHECK(p.cwiseAbs().maxCoeff() <= 40.0);
    }
    CHECK(s.gt_transform.is_rigid());
    double cos_angle =
        std::clamp((s.gt_transform.rotation.trace() - 1.0) / 2.0, -1.0, 1.0);
    CHECK(std::acos(cos_angle) <= 45.0 * M_PI / 180.0 + 1e-12);
    CHECK(s.gt_transform.translation.cwiseAbs().maxCoeff() <= 20.0);
  }
}

TEST_CASE("synthetic target is the transformed source, exactly") {
  auto s = data::gen_synthetic_pair(16, 40.0, 45.0, 20.0, 3);
  geom::PointCloud expected = geom::apply_transform(s.src, s.gt_transform);
  for (int k = 0; k < 16; ++k)
    CHECK((s.tgt.points[k] - expected.points[k]).norm() == 0.0);

  // Recovering the motion from identity correspondences reproduces the
  // ground truth to numerical precision.
  geom::CorrespondenceSet corr;
  corr.matrix = Eigen::MatrixXd::Identity(16, 16);
  corr.distances = Eigen::MatrixXd::Zero(16, 16);
  geom::RigidTransform recovered = geom::kabsch(s.src, s.tgt, corr);
  CHECK((recovered.translation - s.gt_transform.translation).norm() < 1e-9);
  CHECK((recovered.rotation - s.gt_transform.rotation).norm() < 1e-9);
}

TEST_CASE("synthetic generation is seed-deterministic") {
  auto a = data::gen_synthetic_pair(8, 40.0, 45.0, 20.0, 7);
  auto b = data::gen_synthetic_pair(8, 40.0, 45.0, 20.0, 7);
  auto c = data::gen_synthetic_pair(8, 40.0, 45.0, 20.0, 8);
  CHECK(a.tag == "synth-7");
  for (int k = 0; k < 8; ++k)
    CHECK((a.src.points[k] - b.src.points[k]).norm() == 0.0);
  CHECK((a.gt_transform.rotation - b.gt_transform.rotation).norm() == 0.0);
  bool differs = (a.gt_transform.rotation - c.gt_transform.rotation).norm() >
                 0.0;
  for (int k = 0; k < 8 && !differs; ++k)
    differs = (a.src.points[k] - c.src.points[k]).norm() > 0.0;
  CHECK(differs);

  CHECK_THROWS_AS(data::gen_synthetic_pair(3, 40.0, 45.0, 20.0, 1),
                  InvalidInputError);
  CHECK_THROWS_AS(data::gen_synthetic_pair(8, 0.0, 45.0, 20.0, 1),
                  InvalidInputError);
  CHECK_THROWS_AS(data::gen_synthetic_pair(8, 40.0, -1.0, 20.0, 1),
                  InvalidInputError);
}

TEST_CASE("two identical scans with identity poses make one identity pair") {
  auto path = fixture("icptraj_centroids_basic.txt",
                      std::string("# toy export\n") +
                          "#scan a " + kIdentityPose + "\n" +
                          "0 0 0\n1 0 0\n0 1 0\n" +
                          "#scan b " + kIdentityPose + "\n" +
                          "0 0 0\n1 0 0\n0 1 0\n");
  auto samples = data::load_centroid_scans(path);
  REQUIRE(samples.size() == 1);
  CHECK(samples[0].tag == "a->b");
  CHECK(samples[0].src.size() == 3);
  CHECK(samples[0].tgt.size() == 3);
  CHECK(samples[0].src.feature_dim() == 0);
  CHECK(samples[0].src.valid_count() == 3);
  CHECK((samples[0].gt_transform.rotation - Eigen::Matrix3d::Identity())
            .norm() == 0.0);
  CHECK(samples[0].gt_transform.translation.norm() == 0.0);
  CHECK((samples[0].src.points[1] - Eigen::Vector3d(1, 0, 0)).norm() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("declared classes turn labels into one-hot features") {
  auto path = fixture("icptraj_centroids_labels.txt",
                      std::string("#classes 4\n") +
                          "#scan a " + kIdentityPose + "\n" +
                          "0 0 0 2\n1 1 1 0\n" +
                          "#scan b " + kIdentityPose + "\n" +
                          "0 0 0 3\n1 1 1 1\n");
  auto samples = data::load_centroid_scans(path);
  REQUIRE(samples.size() == 1);
  REQUIRE(samples[0].src.feature_dim() == 4);
  Eigen::VectorXd want(4);
  want << 0, 0, 1, 0;
  CHECK((samples[0].src.features[0] - want).norm() == 0.0);
  want << 0, 1, 0, 0;
  CHECK((samples[0].tgt.features[1] - want).norm() == 0.0);
  std::filesystem::remove(path);
}

TEST_CASE("extra row columns without classes become embeddings") {
  auto path = fixture("icptraj_centroids_embed.txt",
                      std::string("#scan a ") + kIdentityPose + "\n" +
                          "0 0 0 0.5 -1.25\n1 0 0 2 3\n" +
                          "#scan b " + kIdentityPose + "\n" +
                          "0 0 0 1 1\n1 0 0 0 0\n");
  auto samples = data::load_centroid_scans(path);
  REQUIRE(samples.size() == 1);
  REQUIRE(samples[0].src.feature_dim() == 2);
  CHECK(samples[0].src.features[0](0) == 0.5);
  CHECK(samples[0].src.features[0](1) == -1.25);
  std::filesystem::remove(path);
}

TEST_CASE("relative pose is pose_tgt^-1 * pose_src") {
  // Scan a sits at a 90 degree z-rotation and (1, 2, 3); scan b is a pure
  // translation. Row-major 3x4 pose blocks.
  auto path = fixture("icptraj_centroids_pose.txt",
                      std::string("#scan a pose 0 -1 0 1 1 0 0 2 0 0 1 3\n") +
                          "0 0 0\n1 0 0\n0 0 1\n" +
                          "#scan b pose 1 0 0 5 0 1 0 0 0 0 1 0\n" +
                          "0 0 0\n1 0 0\n0 0 1\n");
  auto samples = data::load_centroid_scans(path);
  REQUIRE(samples.size() == 1);

  geom::RigidTransform pa, pb;
  pa.rotation << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  pa.translation << 1, 2, 3;
  pb.translation << 5, 0, 0;
  geom::RigidTransform want = pb.inverse() * pa;
  CHECK((samples[0].gt_transform.rotation - want.rotation).norm() < 1e-12);
  CHECK((samples[0].gt_transform.translation - want.translation).norm() <
        1e-12);
  std::filesystem::remove(path);
}

TEST_CASE("pair distance filter keeps only qualifying scan pairs") {
  auto path = fixture("icptraj_centroids_dist.txt",
                      std::string("#scan a pose 1 0 0 0 0 1 0 0 0 0 1 0\n") +
                          "0 0 0\n" +
                          "#scan b pose 1 0 0 3 0 1 0 4 0 0 1 0\n" +
                          "0 0 0\n" +
                          "#scan c pose 1 0 0 11.3 0 1 0 0 0 0 1 0\n" +
                          "0 0 0\n");
  auto all = data::load_centroid_scans(path);
  REQUIRE(all.size() == 3);  // a->b at 5, a->c at 11.3, b->c at ~9.21

  CentroidLoadOptions opt;
  opt.pair_distance = 11.3;
  opt.pair_tolerance = 0.5;
  auto filtered = data::load_centroid_scans(path, opt);
  REQUIRE(filtered.size() == 1);
  CHECK(filtered[0].tag == "a->c");
  std::filesystem::remove(path);
}

TEST_CASE("centroid loader rejects malformed and contradictory files") {
  auto check_throw = [&](const std::string& name, const std::string& text,
                         bool parse, const std::string& fragment = "") {
    auto path = fixture(name, text);
    bool threw = false;
    try {
      data::load_centroid_scans(path);
    } catch (const ParseError& e) {
      threw = true;
      CHECK(parse);
      if (!fragment.empty())
        CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    } catch (const SchemaError& e) {
      threw = true;
      CHECK_FALSE(parse);
      if (!fragment.empty())
        CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
    CHECK(threw);
    std::filesystem::remove(path);
  };

  std::string scan_a = std::string("#scan a ") + kIdentityPose + "\n";
  std::string scan_b = std::string("#scan b ") + kIdentityPose + "\n";

  check_throw("icptraj_bad_number.txt",
              "# c\n" + scan_a + "0 0 0\n0 0 zz\n" + scan_b + "0 0 0\n",
              true, "line 4");
  check_throw("icptraj_bad_pose_arity.txt",
              "#scan a pose 1 0 0 0 0 1 0 0 0 0 1\n0 0 0\n", true, "line 1");
  check_throw("icptraj_missing_pose.txt",
              "#scan a 1 0 0 0 0 1 0 0 0 0 1 0\n0 0 0\n", false, "pose");
  check_throw("icptraj_row_before_scan.txt", "# c\n0 0 0\n" + scan_a, true,
              "line 2");
  check_throw("icptraj_label_range.txt",
              "#classes 4\n" + scan_a + "0 0 0 7\n" + scan_b + "0 0 0 1\n",
              false, "label");
  check_throw("icptraj_label_fraction.txt",
              "#classes 4\n" + scan_a + "0 0 0 1.5\n" + scan_b + "0 0 0 1\n",
              false, "label");
  check_throw("icptraj_feature_width.txt",
              scan_a + "0 0 0 1 2\n1 0 0 1 2 3\n" + scan_b + "0 0 0 1 2\n",
              false, "feature");
  check_throw("icptraj_late_classes.txt",
              scan_a + "0 0 0\n#classes 4\n" + scan_b + "0 0 0 1\n", true,
              "#classes");
  check_throw("icptraj_empty_scan.txt", scan_a + scan_b + "0 0 0\n", false,
              "centroids");

  CHECK_THROWS_AS(
      data::load_centroid_scans(std::filesystem::temp_directory_path() /
                                "icptraj_no_such_scans.txt"),
      ParseError);
}

TEST_CASE("ratio split floors train and eval and gives test the rest") {
  auto ten = dummy_samples(10);
  DatasetSplit split = data::split_dataset(ten, 0.6, 0.2, 0.2, 42);
  CHECK(split.train.size() == 6);
  CHECK(split.eval.size() == 2);
  CHECK(split.test.size() == 2);

  std::set<std::string> seen;
  for (const auto* part : {&split.train, &split.eval, &split.test})
    for (const auto& s : *part) CHECK(seen.insert(s.tag).second);
  CHECK(seen.size() == 10);

  auto eleven = dummy_samples(11);
  DatasetSplit uneven = data::split_dataset(eleven, 0.6, 0.2, 0.2, 42);
  CHECK(uneven.train.size() == 6);
  CHECK(uneven.eval.size() == 2);
  CHECK(uneven.test.size() == 3);

  CHECK_THROWS_AS(data::split_dataset(ten, 0.5, 0.2, 0.2, 1),
                  InvalidInputError);
  CHECK_THROWS_AS(data::split_dataset(ten, 0.8, 0.4, -0.2, 1),
                  InvalidInputError);
}

TEST_CASE("count split is deterministic and drops leftovers") {
  auto ten = dummy_samples(10);
  DatasetSplit a = data::split_dataset(ten, 3, 1, 1, 9);
  DatasetSplit b = data::split_dataset(ten, 3, 1, 1, 9);
  CHECK(a.train.size() == 3);
  CHECK(a.eval.size() == 1);
  CHECK(a.test.size() == 1);
  CHECK(tags(a.train) == tags(b.train));
  CHECK(tags(a.eval) == tags(b.eval));
  CHECK(tags(a.test) == tags(b.test));

  // The ratio form at the same seed deals the same shuffled order.
  DatasetSplit c = data::split_dataset(ten, 6, 2, 2, 42);
  DatasetSplit d = data::split_dataset(ten, 0.6, 0.2, 0.2, 42);
  CHECK(tags(c.train) == tags(d.train));
  CHECK(tags(c.test) == tags(d.test));

  DatasetSplit e = data::split_dataset(ten, 3, 1, 1, 10);
  CHECK(tags(a.train) != tags(e.train));

  CHECK_THROWS_AS(data::split_dataset(ten, 8, 2, 1, 1), InvalidInputError);
  CHECK_THROWS_AS(data::split_dataset(ten, -1, 2, 1, 1), InvalidInputError);
}
