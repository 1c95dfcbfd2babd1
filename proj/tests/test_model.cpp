#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "icptraj/model.hpp"
#include "icptraj/probe.hpp"
#include "oracles.hpp"

using namespace icptraj;
using nar::DecodedStep;
using nar::Model;
using nar::ModelConfig;
using nar::ProcessorKind;
using nar::StateTensors;
using nar::StepTensors;

namespace {

ModelConfig small_config(int hidden, std::uint64_t seed,
                         ProcessorKind proc = ProcessorKind::TripletMPNN) {
  ModelConfig cfg;
  cfg.hidden_dim = hidden;
  cfg.processor = proc;
  cfg.seed = seed;
  return cfg;
}

/// Records a short point-to-point run on a random pair and normalizes it.
probe::Trajectory small_traj(std::uint64_t seed, int n, int max_iter,
                             probe::HintMode mode = probe::HintMode::P12,
                             double angle = 1.0, double trans = 15.0) {
  Rng rng(seed);
  geom::PointCloud src = oracle::random_cloud(rng, n);
  geom::RigidTransform gt = oracle::random_transform(rng, angle, trans);
  geom::PointCloud tgt = geom::apply_transform(src, gt);
  icp::IcpConfig ic;
  ic.variant = icp::Variant::PointToPoint;
  ic.max_iterations = max_iter;
  probe::RecorderConfig rc;
  rc.mode = mode;
  return probe::normalize(probe::record_trajectory(src, tgt, ic, rc, gt));
}

void zero_params(Model& m) {
  for (auto& [name, v] : m.params().values) v.setZero();
}

/// Random probe matrices for every encodable probe (shape-correct only).
std::map<std::string, Eigen::MatrixXd> random_probe_matrices(
    const probe::TrajectorySchema& schema, int n, Rng& rng) {
  std::map<std::string, Eigen::MatrixXd> out;
  for (const auto& spec : schema.probes) {
    if (spec.stage == probe::Stage::Output) continue;
    int rows = spec.location == probe::Location::Node   ? n
               : spec.location == probe::Location::Edge ? n * n
                                                        : 1;
    int cols = spec.kind == probe::Kind::Categorical ? spec.categories
                                                     : spec.dim;
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) m(r, c) = rng.next_uniform(-1.0, 1.0);
    out[spec.name] = m;
  }
  return out;
}

std::map<std::string, ad::TensorRef> as_constants(
    ad::Tape& tape, const std::map<std::string, Eigen::MatrixXd>& mats) {
  std::map<std::string, ad::TensorRef> out;
  for (const auto& [name, m] : mats) out[name] = tape.constant(m);
  return out;
}

Eigen::MatrixXd permute_node(const Eigen::MatrixXd& m,
                             const std::vector<int>& pi) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (int i = 0; i < m.rows(); ++i) out.row(pi[i]) = m.row(i);
  return out;
}

Eigen::MatrixXd permute_edge(const Eigen::MatrixXd& m,
                             const std::vector<int>& pi, int n) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      out.row(pi[i] * n + pi[j]) = m.row(i * n + j);
  return out;
}

}  // namespace

TEST_CASE("ModelConfig validation") {
  ModelConfig cfg;
  CHECK_NOTHROW(cfg.validate());

  auto expect_invalid = [](ModelConfig c) {
    CHECK_THROWS_AS(c.validate(), InvalidInputError);
  };
  ModelConfig c = cfg;
  c.hidden_dim = 0;
  expect_invalid(c);
  c = cfg;
  c.teacher_prob = -0.1;
  expect_invalid(c);
  c = cfg;
  c.teacher_prob = 1.1;
  expect_invalid(c);
  c = cfg;
  c.learn_rate = 0.0;
  expect_invalid(c);
  c = cfg;
  c.batch_size = 0;
  expect_invalid(c);
  c = cfg;
  c.train_steps = -1;
  expect_invalid(c);
  c = cfg;
  c.grad_clip = 0.0;
  expect_invalid(c);
  c = cfg;
  c.scalar_loss_scale = -1.0;
  expect_invalid(c);

  c = cfg;
  c.teacher_prob = 0.0;
  CHECK_NOTHROW(c.validate());
  c.teacher_prob = 1.0;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("probe_matrix lays out node, edge, graph and one-hot values") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  const int n = 3;

  const probe::ProbeSpec& node3 = *schema.find("transformed_src");
  Eigen::ArrayXd flat(n * 3);
  for (int k = 0; k < n * 3; ++k) flat[k] = k;
  Eigen::MatrixXd m = Model::probe_matrix(node3, flat, n);
  REQUIRE(m.rows() == n);
  REQUIRE(m.cols() == 3);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) CHECK(m(i, c) == i * 3 + c);

  const probe::ProbeSpec& edge = *schema.find("correspondences");
  Eigen::ArrayXd eflat = Eigen::ArrayXd::Zero(n * n);
  eflat[1 * n + 2] = 1.0;
  Eigen::MatrixXd em = Model::probe_matrix(edge, eflat, n);
  REQUIRE(em.rows() == n * n);
  REQUIRE(em.cols() == 1);
  CHECK(em(1 * n + 2, 0) == 1.0);
  CHECK(em.sum() == 1.0);

  const probe::ProbeSpec& err = *schema.find("error");
  Eigen::ArrayXd gflat(1);
  gflat[0] = 0.25;
  Eigen::MatrixXd gm = Model::probe_matrix(err, gflat, n);
  REQUIRE(gm.rows() == 1);
  REQUIRE(gm.cols() == 1);
  CHECK(gm(0, 0) == 0.25);

  const probe::ProbeSpec& phase = *schema.find("phase");
  Eigen::ArrayXd pflat(1);
  pflat[0] = 1.0;
  Eigen::MatrixXd pm = Model::probe_matrix(phase, pflat, n);
  REQUIRE(pm.rows() == 1);
  REQUIRE(pm.cols() == 2);
  CHECK(pm(0, 0) == 0.0);
  CHECK(pm(0, 1) == 1.0);
  pflat[0] = 0.0;
  CHECK(Model::probe_matrix(phase, pflat, n)(0, 0) == 1.0);

  CHECK_THROWS_AS(Model::probe_matrix(node3, Eigen::ArrayXd::Zero(5), n),
                  SchemaError);
  Eigen::ArrayXd bad_class = Eigen::ArrayXd::Constant(1, 2.0);
  CHECK_THROWS_AS(Model::probe_matrix(phase, bad_class, n), SchemaError);
}

TEST_CASE("parameter registry: layout, Xavier bounds, determinism") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  Model triplet(schema, small_config(8, 7));
  Model plain(schema, small_config(8, 7, ProcessorKind::MPNN));

  // Hand-counted from the architecture at hidden = 8, no features:
  // encoders 248, message 392, readout 200, node LN 16, triplets 840,
  // triplet readout 72, edge LN 16, decoders 453, termination 17.
  CHECK(triplet.params().parameter_count() == 2254);
  CHECK(plain.params().parameter_count() == 1326);

  CHECK(triplet.params().values.count("enc.pointclouds.w") == 1);
  CHECK(triplet.params().values.count("enc.stop.w") == 1);
  CHECK(triplet.params().values.count("proc.msg.wi") == 1);
  CHECK(triplet.params().values.count("proc.tri.n1") == 1);
  CHECK(triplet.params().values.count("dec.final_correspondences.w") == 1);
  CHECK(triplet.params().values.count("term.w") == 1);
  CHECK(plain.params().values.count("proc.tri.n1") == 0);
  CHECK(plain.params().values.count("proc.edge_ln.gain") == 0);

  // Shapes of a few representative parameters.
  CHECK(triplet.params().value("enc.pointclouds.w").rows() == 8);
  CHECK(triplet.params().value("enc.pointclouds.w").cols() == 6);
  CHECK(triplet.params().value("enc.phase.w").cols() == 2);
  CHECK(triplet.params().value("proc.msg.wi").cols() == 16);
  CHECK(triplet.params().value("proc.readout.w").cols() == 24);
  CHECK(triplet.params().value("dec.transformed_src.w").rows() == 3);
  CHECK(triplet.params().value("dec.transformed_src.w").cols() == 16);
  CHECK(triplet.params().value("dec.correspondences.w").cols() == 32);
  CHECK(triplet.params().value("dec.phase.w").rows() == 2);
  CHECK(triplet.params().value("dec.phase.w").cols() == 24);
  CHECK(triplet.params().value("term.w").cols() == 16);

  // Xavier-uniform bounds on weights; zero biases; unit layer-norm gains.
  for (const auto& [name, v] : triplet.params().values) {
    if (name.ends_with(".gain")) {
      CHECK((v.array() == 1.0).all());
    } else if (name.ends_with(".b") || name.ends_with(".bias")) {
      CHECK((v.array() == 0.0).all());
    } else {
      double limit = std::sqrt(6.0 / double(v.rows() + v.cols()));
      CHECK(v.array().abs().maxCoeff() <= limit);
      CHECK(v.array().abs().maxCoeff() > 0.0);
    }
  }

  Model again(schema, small_config(8, 7));
  for (const auto& [name, v] : triplet.params().values)
    CHECK((v - again.params().value(name)).norm() == 0.0);

  Model other(schema, small_config(8, 8));
  double diff = 0.0;
  for (const auto& [name, v] : other.params().values)
    diff += (v - triplet.params().value(name)).norm();
  CHECK(diff > 0.0);
}

TEST_CASE("encode_step: shapes, zero weights, probe summation, linearity") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  const int n = 4;
  Model model(schema, small_config(8, 3));
  Rng rng(21);
  auto mats = random_probe_matrices(schema, n, rng);

  ad::Tape tape(&model.params());
  StepTensors z = model.encode_step(tape, as_constants(tape, mats), n);
  CHECK(tape.value(z.node).rows() == 4);
  CHECK(tape.value(z.node).cols() == 8);
  CHECK(tape.value(z.edge).rows() == 16);
  CHECK(tape.value(z.edge).cols() == 8);
  CHECK(tape.value(z.graph).rows() == 1);
  CHECK(tape.value(z.graph).cols() == 8);
  CHECK(tape.value(z.node).array().abs().sum() > 0.0);

  // Zero weights map anything to zero embeddings.
  Model zeroed(schema, small_config(8, 3));
  zero_params(zeroed);
  ad::Tape zt(&zeroed.params());
  StepTensors zz = zeroed.encode_step(zt, as_constants(zt, mats), n);
  CHECK(zt.value(zz.node).array().abs().maxCoeff() == 0.0);
  CHECK(zt.value(zz.edge).array().abs().maxCoeff() == 0.0);
  CHECK(zt.value(zz.graph).array().abs().maxCoeff() == 0.0);

  // Probes at one location sum their embeddings: encoding the two edge
  // probes together equals the sum of encoding them separately.
  std::map<std::string, Eigen::MatrixXd> only_corr{
      {"correspondences", mats.at("correspondences")}};
  std::map<std::string, Eigen::MatrixXd> only_dist{
      {"distances", mats.at("distances")}};
  std::map<std::string, Eigen::MatrixXd> both = only_corr;
  both["distances"] = only_dist["distances"];
  ad::Tape st(&model.params());
  Eigen::MatrixXd e_corr =
      st.value(model.encode_step(st, as_constants(st, only_corr), n).edge);
  Eigen::MatrixXd e_dist =
      st.value(model.encode_step(st, as_constants(st, only_dist), n).edge);
  Eigen::MatrixXd e_both =
      st.value(model.encode_step(st, as_constants(st, both), n).edge);
  CHECK((e_both - e_corr - e_dist).array().abs().maxCoeff() < 1e-12);

  // Bias-free linearity: doubling a probe's values doubles its embedding.
  std::map<std::string, Eigen::MatrixXd> doubled{
      {"distances", 2.0 * mats.at("distances")}};
  ad::Tape lt(&model.params());
  Eigen::MatrixXd e1 =
      lt.value(model.encode_step(lt, as_constants(lt, only_dist), n).edge);
  Eigen::MatrixXd e2 =
      lt.value(model.encode_step(lt, as_constants(lt, doubled), n).edge);
  CHECK((e2 - 2.0 * e1).array().abs().maxCoeff() < 1e-12);

  // Unknown or non-encodable probe names are schema errors.
  std::map<std::string, Eigen::MatrixXd> bad{{"final_src", mats.at("transformed_src")}};
  ad::Tape bt(&model.params());
  CHECK_THROWS_AS(model.encode_step(bt, as_constants(bt, bad), n), SchemaError);
}

TEST_CASE("process_step: shapes, zero state, layer norm, MPNN edge freeze") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  const int n = 5;
  Rng rng(31);

  for (ProcessorKind kind : {ProcessorKind::TripletMPNN, ProcessorKind::MPNN}) {
    Model model(schema, small_config(8, 11, kind));
    auto mats = random_probe_matrices(schema, n, rng);
    ad::Tape tape(&model.params());
    StateTensors h0 = model.zero_state(tape, n);
    CHECK(tape.value(h0.node).rows() == n);
    CHECK(tape.value(h0.node).cols() == 8);
    CHECK(tape.value(h0.edge).rows() == n * n);
    CHECK(tape.value(h0.node).array().abs().maxCoeff() == 0.0);
    CHECK(tape.value(h0.edge).array().abs().maxCoeff() == 0.0);

    StepTensors z = model.encode_step(tape, as_constants(tape, mats), n);
    StateTensors h1 = model.process_step(tape, z, h0, n);
    const Eigen::MatrixXd& hn = tape.value(h1.node);
    REQUIRE(hn.rows() == n);
    REQUIRE(hn.cols() == 8);
    CHECK(hn.allFinite());
    for (int i = 0; i < n; ++i) {
      CHECK(std::abs(hn.row(i).mean()) < 1e-12);
      double var = hn.row(i).array().square().mean();
      CHECK(std::abs(var - 1.0) < 1e-3);
    }

    const Eigen::MatrixXd& he = tape.value(h1.edge);
    REQUIRE(he.rows() == n * n);
    if (kind == ProcessorKind::MPNN) {
      CHECK(he.array().abs().maxCoeff() == 0.0);
    } else {
      CHECK(he.array().abs().maxCoeff() > 0.0);
      for (int r = 0; r < n * n; ++r)
        CHECK(std::abs(he.row(r).mean()) < 1e-12);
    }
  }
}

TEST_CASE("single-node graph reduces over the self pair") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  Model model(schema, small_config(8, 13));
  Rng rng(41);
  auto mats = random_probe_matrices(schema, 1, rng);
  ad::Tape tape(&model.params());
  StepTensors z = model.encode_step(tape, as_constants(tape, mats), 1);
  StateTensors h = model.process_step(tape, z, model.zero_state(tape, 1), 1);
  DecodedStep dec = model.decode_step(tape, z, h, 1);
  CHECK(tape.value(h.node).allFinite());
  CHECK(tape.value(h.edge).allFinite());
  CHECK(tape.value(dec.termination).allFinite());
  CHECK(tape.value(dec.hints.at("transformed_src")).rows() == 1);
  CHECK(tape.value(dec.hints.at("correspondences")).rows() == 1);
}

TEST_CASE("decode_step mirrors the hint schema and zero weights give 0.5 masks") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  const int n = 4;
  Model model(schema, small_config(8, 17));
  Rng rng(51);
  auto mats = random_probe_matrices(schema, n, rng);

  ad::Tape tape(&model.params());
  StepTensors z = model.encode_step(tape, as_constants(tape, mats), n);
  StateTensors h = model.process_step(tape, z, model.zero_state(tape, n), n);
  DecodedStep dec = model.decode_step(tape, z, h, n);

  REQUIRE(dec.hints.size() == 8);
  REQUIRE(dec.outputs.size() == 3);
  CHECK(tape.value(dec.hints.at("transformed_src")).rows() == n);
  CHECK(tape.value(dec.hints.at("transformed_src")).cols() == 3);
  CHECK(tape.value(dec.hints.at("transformed_tgt")).cols() == 3);
  CHECK(tape.value(dec.hints.at("correspondences")).rows() == n * n);
  CHECK(tape.value(dec.hints.at("correspondences")).cols() == 1);
  CHECK(tape.value(dec.hints.at("distances")).rows() == n * n);
  CHECK(tape.value(dec.hints.at("error")).rows() == 1);
  CHECK(tape.value(dec.hints.at("iterations")).rows() == 1);
  CHECK(tape.value(dec.hints.at("phase")).cols() == 2);
  CHECK(tape.value(dec.hints.at("stop")).cols() == 2);
  CHECK(tape.value(dec.outputs.at("final_src")).rows() == n);
  CHECK(tape.value(dec.outputs.at("final_correspondences")).rows() == n * n);
  CHECK(tape.value(dec.termination).rows() == 1);
  CHECK(tape.value(dec.termination).cols() == 1);

  // Termination probability strictly inside (0,1) for finite logits.
  auto acts = model.activate_hints(tape, dec);
  double tp = 1.0 / (1.0 + std::exp(-tape.value(dec.termination)(0, 0)));
  CHECK(tp > 0.0);
  CHECK(tp < 1.0);
  // Softmax rows of categorical heads sum to one.
  CHECK(tape.value(acts.at("phase")).row(0).sum() == doctest::Approx(1.0));
  CHECK(tape.value(acts.at("stop")).row(0).sum() == doctest::Approx(1.0));

  // Zero weights: zero logits everywhere, mask probabilities 0.5.
  Model zeroed(schema, small_config(8, 17));
  zero_params(zeroed);
  ad::Tape zt(&zeroed.params());
  StepTensors zz = zeroed.encode_step(zt, as_constants(zt, mats), n);
  StateTensors zh = zeroed.process_step(zt, zz, zeroed.zero_state(zt, n), n);
  DecodedStep zdec = zeroed.decode_step(zt, zz, zh, n);
  CHECK(zt.value(zdec.hints.at("correspondences")).array().abs().maxCoeff() ==
        0.0);
  CHECK(zt.value(zdec.termination)(0, 0) == 0.0);
  auto zacts = zeroed.activate_hints(zt, zdec);
  CHECK((zt.value(zacts.at("correspondences")).array() == 0.5).all());
  CHECK(zt.value(zacts.at("phase"))(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("permutation equivariance of the full encode-process-decode stack") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  const int n = 5;
  std::vector<int> pi = {2, 0, 4, 1, 3};

  for (ProcessorKind kind : {ProcessorKind::TripletMPNN, ProcessorKind::MPNN}) {
    Model model(schema, small_config(8, 23, kind));
    Rng rng(61);
    auto mats = random_probe_matrices(schema, n, rng);
    std::map<std::string, Eigen::MatrixXd> perm;
    for (const auto& [name, m] : mats) {
      const probe::ProbeSpec& spec = *schema.find(name);
      if (spec.location == probe::Location::Node)
        perm[name] = permute_node(m, pi);
      else if (spec.location == probe::Location::Edge)
        perm[name] = permute_edge(m, pi, n);
      else
        perm[name] = m;
    }

    auto run = [&](const std::map<std::string, Eigen::MatrixXd>& probes) {
      ad::Tape tape(&model.params());
      StepTensors z = model.encode_step(tape, as_constants(tape, probes), n);
      StateTensors h = model.process_step(tape, z, model.zero_state(tape, n), n);
      DecodedStep dec = model.decode_step(tape, z, h, n);
      std::map<std::string, Eigen::MatrixXd> out;
      for (const auto& [name, ref] : dec.hints) out[name] = tape.value(ref);
      out["__term"] = tape.value(dec.termination);
      out["__final_src"] = tape.value(dec.outputs.at("final_src"));
      out["__final_corr"] = tape.value(dec.outputs.at("final_correspondences"));
      return out;
    };

    auto base = run(mats);
    auto permuted = run(perm);
    auto max_dev = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
      return (a - b).array().abs().maxCoeff();
    };

    CHECK(max_dev(permute_node(base.at("transformed_src"), pi),
                  permuted.at("transformed_src")) < 1e-5);
    CHECK(max_dev(permute_node(base.at("__final_src"), pi),
                  permuted.at("__final_src")) < 1e-5);
    CHECK(max_dev(permute_edge(base.at("correspondences"), pi, n),
                  permuted.at("correspondences")) < 1e-5);
    CHECK(max_dev(permute_edge(base.at("distances"), pi, n),
                  permuted.at("distances")) < 1e-5);
    CHECK(max_dev(permute_edge(base.at("__final_corr"), pi, n),
                  permuted.at("__final_corr")) < 1e-5);
    CHECK(max_dev(base.at("error"), permuted.at("error")) < 1e-5);
    CHECK(max_dev(base.at("phase"), permuted.at("phase")) < 1e-5);
    CHECK(max_dev(base.at("__term"), permuted.at("__term")) < 1e-5);
  }
}

TEST_CASE("step_loss: spec examples with hand-computed values") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  const int n = 3;

  // A handcrafted target hint step with known content.
  probe::TrajectoryStep target;
  target.values["transformed_src"] = Eigen::ArrayXd::Zero(n * 3);
  target.values["transformed_tgt"] = Eigen::ArrayXd::Zero(n * 3);
  Eigen::ArrayXd corr = Eigen::ArrayXd::Zero(n * n);
  corr[0] = 1.0;
  corr[1 * n + 1] = 1.0;
  corr[2 * n + 2] = 1.0;
  target.values["correspondences"] = corr;
  target.values["distances"] = Eigen::ArrayXd::Zero(n * n);
  target.values["error"] = Eigen::ArrayXd::Constant(1, 0.25);
  target.values["iterations"] = Eigen::ArrayXd::Constant(1, 0.5);
  target.values["phase"] = Eigen::ArrayXd::Constant(1, 1.0);
  target.values["stop"] = Eigen::ArrayXd::Zero(1);

  auto saturated_decode = [&](Model& m, ad::Tape& tape, double scalar_offset) {
    DecodedStep dec;
    for (const auto& spec : schema.probes) {
      if (spec.stage != probe::Stage::Hint) continue;
      Eigen::MatrixXd t = Model::probe_matrix(spec, target.values.at(spec.name), n);
      Eigen::MatrixXd pred;
      if (spec.kind == probe::Kind::Scalar) {
        pred = t.array() + scalar_offset;
      } else if (spec.kind == probe::Kind::Mask) {
        pred = (2.0 * t.array() - 1.0) * 40.0;  // +-40 logits
      } else {
        pred = (t.array() * 2.0 - 1.0) * 40.0;  // one-hot to +-40 logits
      }
      dec.hints[spec.name] = tape.constant(pred);
    }
    dec.termination = tape.constant(Eigen::MatrixXd::Zero(1, 1));
    return dec;
  };

  Model model(schema, small_config(4, 1));

  // Saturated perfect prediction: loss below 1e-6.
  {
    ad::Tape tape(&model.params());
    DecodedStep dec = saturated_decode(model, tape, 0.0);
    ad::TensorRef loss = model.step_loss(tape, dec, target, n);
    CHECK(tape.value(loss)(0, 0) >= 0.0);
    CHECK(tape.value(loss)(0, 0) < 1e-6);
  }

  // Every scalar off by 0.1 with alpha = 1: scalar term is exactly 0.01.
  {
    ad::Tape tape(&model.params());
    DecodedStep dec = saturated_decode(model, tape, 0.1);
    double loss = tape.value(model.step_loss(tape, dec, target, n))(0, 0);
    CHECK(std::abs(loss - 0.01) < 2e-6);
  }

  // Alpha scales only the scalar term.
  {
    ModelConfig cfg = small_config(4, 1);
    cfg.scalar_loss_scale = 2.5;
    Model scaled(schema, cfg);
    ad::Tape tape(&scaled.params());
    DecodedStep dec = saturated_decode(scaled, tape, 0.1);
    double loss = tape.value(scaled.step_loss(tape, dec, target, n))(0, 0);
    CHECK(std::abs(loss - 0.025) < 2e-6);
  }

  // Mask weighting: 2x2 graph, target one positive and three zeros, zero
  // logits; the scalar and categorical parts are saturated to ~0.
  {
    const int m2 = 2;
    probe::TrajectoryStep t2;
    t2.values["transformed_src"] = Eigen::ArrayXd::Zero(m2 * 3);
    t2.values["transformed_tgt"] = Eigen::ArrayXd::Zero(m2 * 3);
    Eigen::ArrayXd c2 = Eigen::ArrayXd::Zero(m2 * m2);
    c2[0] = 1.0;
    t2.values["correspondences"] = c2;
    t2.values["distances"] = Eigen::ArrayXd::Zero(m2 * m2);
    t2.values["error"] = Eigen::ArrayXd::Zero(1);
    t2.values["iterations"] = Eigen::ArrayXd::Zero(1);
    t2.values["phase"] = Eigen::ArrayXd::Zero(1);
    t2.values["stop"] = Eigen::ArrayXd::Zero(1);

    ad::Tape tape(&model.params());
    DecodedStep dec;
    for (const auto& spec : schema.probes) {
      if (spec.stage != probe::Stage::Hint) continue;
      Eigen::MatrixXd t = Model::probe_matrix(spec, t2.values.at(spec.name), m2);
      Eigen::MatrixXd pred;
      if (spec.kind == probe::Kind::Scalar)
        pred = t;
      else if (spec.kind == probe::Kind::Mask)
        pred = Eigen::MatrixXd::Zero(t.rows(), t.cols());
      else
        pred = (t.array() * 2.0 - 1.0) * 40.0;
      dec.hints[spec.name] = tape.constant(pred);
    }
    dec.termination = tape.constant(Eigen::MatrixXd::Zero(1, 1));
    double loss = tape.value(model.step_loss(tape, dec, t2, m2))(0, 0);
    const double w_pos = 3.0 / (1.0 + 1e-8);
    const double expected = (w_pos + 3.0) * std::log(2.0) / 4.0;
    CHECK(std::abs(loss - expected) < 1e-9 + 1e-6);
  }
}

TEST_CASE("final_loss reuses the step composition on output probes") {
  probe::Trajectory traj = small_traj(77, 4, 4);
  const int n = traj.node_count;
  probe::TrajectorySchema schema = traj.schema;
  Model model(schema, small_config(4, 2));

  auto build = [&](ad::Tape& tape, double offset) {
    DecodedStep dec;
    for (const auto& spec : schema.probes) {
      if (spec.stage != probe::Stage::Output) continue;
      Eigen::MatrixXd t =
          Model::probe_matrix(spec, traj.output.values.at(spec.name), n);
      Eigen::MatrixXd pred;
      if (spec.kind == probe::Kind::Mask)
        pred = (2.0 * t.array() - 1.0) * 40.0;
      else
        pred = t.array() + offset;
      dec.outputs[spec.name] = tape.constant(pred);
    }
    dec.termination = tape.constant(Eigen::MatrixXd::Zero(1, 1));
    return dec;
  };

  ad::Tape perfect(&model.params());
  double l0 = perfect.value(
      model.final_loss(perfect, build(perfect, 0.0), traj.output, n))(0, 0);
  CHECK(l0 >= 0.0);
  CHECK(l0 < 1e-6);

  ad::Tape off(&model.params());
  double l1 = off.value(
      model.final_loss(off, build(off, 0.1), traj.output, n))(0, 0);
  CHECK(std::abs(l1 - 0.01) < 2e-6);
}

TEST_CASE("draw_coins honors teacher_prob and forces ground truth at step 0") {
  probe::TrajectorySchema schema = probe::make_schema(0);
  ModelConfig cfg = small_config(4, 5);
  cfg.teacher_prob = 1.0;
  Model always(schema, cfg);
  Rng r1(9);
  auto coins = always.draw_coins(10, r1);
  REQUIRE(coins.size() == 10);
  for (auto c : coins) CHECK(c == 1);

  cfg.teacher_prob = 0.0;
  Model never(schema, cfg);
  Rng r2(9);
  coins = never.draw_coins(10, r2);
  CHECK(coins[0] == 1);
  for (std::size_t t = 1; t < coins.size(); ++t) CHECK(coins[t] == 0);

  cfg.teacher_prob = 0.5;
  Model mixed(schema, cfg);
  Rng r3(9);
  auto a = mixed.draw_coins(64, r3);
  Rng r4(9);
  auto b = mixed.draw_coins(64, r4);
  CHECK(a == b);
  CHECK(std::accumulate(a.begin(), a.end(), 0) > 8);
  CHECK(std::accumulate(a.begin(), a.end(), 0) < 56);
}

TEST_CASE("teacher-forced rollout equals a manual replay of the public ops") {
  probe::Trajectory traj = small_traj(101, 4, 3);
  const std::size_t K = traj.hints.size();
  REQUIRE(K >= 2);
  Model model(traj.schema, small_config(8, 19));
  const int n = traj.node_count;

  std::vector<std::uint8_t> coins(K, 1);
  ad::Tape tape(&model.params());
  nar::TrainRollout ro = model.rollout_train(tape, traj, coins);

  // Replay the same computation through the public per-step ops.
  ad::Tape manual(&model.params());
  StateTensors h = model.zero_state(manual, n);
  std::vector<ad::TensorRef> scalars;
  std::vector<double> weights;
  std::vector<ad::TensorRef> steps, terms;
  ad::TensorRef final_ref;
  for (std::size_t t = 0; t < K; ++t) {
    auto consts = model.step_constants(manual, traj.input, traj.hints[t], n);
    StepTensors z = model.encode_step(manual, consts, n);
    h = model.process_step(manual, z, h, n);
    DecodedStep dec = model.decode_step(manual, z, h, n);
    if (t + 1 < K)
      steps.push_back(model.step_loss(manual, dec, traj.hints[t + 1], n));
    else
      final_ref = model.final_loss(manual, dec, traj.output, n);
    Eigen::MatrixXd tgt(1, 1);
    tgt(0, 0) = (t + 1 == K) ? 1.0 : 0.0;
    terms.push_back(manual.bce_logits(dec.termination, tgt, 1.0));
  }
  for (auto s : steps) {
    scalars.push_back(s);
    weights.push_back(1.0 / double(K - 1));
  }
  scalars.push_back(final_ref);
  weights.push_back(1.0);
  for (auto s : terms) {
    scalars.push_back(s);
    weights.push_back(1.0 / double(K));
  }
  double expected =
      manual.value(manual.weighted_sum(scalars, weights))(0, 0);

  CHECK(ro.loss_value == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::isfinite(ro.loss_value));
  CHECK(ro.loss_value > 0.0);

  // Diagnostics name every probe and step.
  CHECK(ro.terms.size() > K);
  bool saw_distances = false, saw_term = false, saw_final = false;
  for (const auto& term : ro.terms) {
    CHECK(std::isfinite(term.value));
    if (term.name.find("distances") != std::string::npos) saw_distances = true;
    if (term.name.find("termination") != std::string::npos) saw_term = true;
    if (term.name.find("final") != std::string::npos) saw_final = true;
  }
  CHECK(saw_distances);
  CHECK(saw_term);
  CHECK(saw_final);
}

TEST_CASE("feedback rollout differs from teacher forcing and backprops") {
  probe::Trajectory traj = small_traj(103, 4, 3);
  const std::size_t K = traj.hints.size();
  REQUIRE(K >= 2);
  Model model(traj.schema, small_config(8, 29));

  std::vector<std::uint8_t> forced(K, 1);
  std::vector<std::uint8_t> fed(K, 0);
  fed[0] = 1;

  ad::Tape t1(&model.params());
  double l_forced = model.rollout_train(t1, traj, forced).loss_value;
  ad::Tape t2(&model.params());
  nar::TrainRollout ro = model.rollout_train(t2, traj, fed);
  CHECK(std::isfinite(ro.loss_value));
  CHECK(ro.loss_value != l_forced);

  // Gradients flow back through the fed-back path to the encoders.
  model.params().zero_grads();
  t2.backward(ro.loss);
  CHECK(model.params().grad_norm() > 0.0);
  CHECK(model.params().grad("enc.transformed_src.w").norm() > 0.0);

  // With zero parameters the fed-back input encodes to zero exactly like
  // the ground-truth input, so the two rollouts coincide.
  Model zeroed(traj.schema, small_config(8, 29));
  zero_params(zeroed);
  ad::Tape z1(&zeroed.params());
  ad::Tape z2(&zeroed.params());
  double a = zeroed.rollout_train(z1, traj, forced).loss_value;
  double b = zeroed.rollout_train(z2, traj, fed).loss_value;
  CHECK(a == doctest::Approx(b).epsilon(1e-14));

  // Unnormalized trajectories and wrong coin counts are invalid inputs.
  probe::Trajectory raw = probe::denormalize(traj);
  ad::Tape t3(&model.params());
  CHECK_THROWS_AS(model.rollout_train(t3, raw, forced), InvalidInputError);
  ad::Tape t4(&model.params());
  std::vector<std::uint8_t> short_coins(K - 1, 1);
  CHECK_THROWS_AS(model.rollout_train(t4, traj, short_coins),
                  InvalidInputError);
}

TEST_CASE("zero-parameter rollout loss matches a hand-computed oracle") {
  probe::Trajectory traj = small_traj(107, 3, 2);
  const std::size_t K = traj.hints.size();
  Model model(traj.schema, small_config(8, 31));
  zero_params(model);

  // All logits and scalar decodes are zero. Per target step:
  //   scalars: alpha * sum(v^2) / count over every scalar probe value
  //   maskheads at logit 0: mean of (w_pos for ones, 1 for zeros) * ln 2
  //   categoricals at logits (0,0): ln 2 per probe
  // Termination at logit 0: ln 2 every step.
  const double ln2 = std::log(2.0);
  auto step_oracle = [&](const probe::TrajectoryStep& step,
                         probe::Stage stage) {
    double sq = 0.0;
    double count = 0.0;
    double mask_loss = 0.0;
    double cat_loss = 0.0;
    for (const auto& spec : traj.schema.probes) {
      if (spec.stage != stage) continue;
      const Eigen::ArrayXd& v = step.values.at(spec.name);
      if (spec.kind == probe::Kind::Scalar) {
        sq += v.square().sum();
        count += double(v.size());
      } else if (spec.kind == probe::Kind::Mask) {
        double ones = v.sum();
        double zeros = double(v.size()) - ones;
        double w_pos = zeros / (ones + 1e-8);
        mask_loss += (w_pos * ones + zeros) * ln2 / double(v.size());
      } else {
        cat_loss += ln2;
      }
    }
    return sq / count + mask_loss + cat_loss;
  };

  double expected = 0.0;
  for (std::size_t t = 0; t + 1 < K; ++t)
    expected += step_oracle(traj.hints[t + 1], probe::Stage::Hint);
  expected /= double(K - 1);
  expected += step_oracle(traj.output, probe::Stage::Output);
  expected += ln2;  // mean termination BCE: ln 2 at every step

  std::vector<std::uint8_t> coins(K, 1);
  ad::Tape tape(&model.params());
  nar::TrainRollout ro = model.rollout_train(tape, traj, coins);
  CHECK(ro.loss_value == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("inference rollout: cap, forced stop, post-activation outputs") {
  probe::Trajectory traj = small_traj(109, 4, 3);
  const int n = traj.node_count;

  Model model(traj.schema, small_config(8, 37));
  zero_params(model);

  // Zero parameters never fire the stop head (probability 0.5).
  nar::InferenceRollout ro = model.rollout_inference(traj);
  const int cap = 2 * traj.t_max * 2;
  CHECK(int(ro.steps.size()) == cap);
  CHECK(ro.stop_step == cap);
  CHECK_FALSE(ro.terminated);
  for (const auto& step : ro.steps)
    CHECK(step.termination_prob == doctest::Approx(0.5));

  // Post-activation hints: masks are probabilities, categoricals sum to 1.
  const nar::InferenceStep& s0 = ro.steps.front();
  CHECK(s0.hints.at("correspondences").rows() == n * n);
  CHECK((s0.hints.at("correspondences").array() == 0.5).all());
  CHECK(s0.hints.at("phase").row(0).sum() == doctest::Approx(1.0));
  CHECK(ro.outputs.at("final_src").rows() == n);
  CHECK((ro.outputs.at("final_correspondences").array() == 0.5).all());

  // Explicit cap override.
  CHECK(model.rollout_inference(traj, 5).steps.size() == 5);

  // A strongly positive termination bias stops after the first step.
  model.params().value("term.b")(0, 0) = 10.0;
  nar::InferenceRollout stopped = model.rollout_inference(traj);
  CHECK(stopped.steps.size() == 1);
  CHECK(stopped.stop_step == 1);
  CHECK(stopped.terminated);
  CHECK(stopped.steps.back().termination_prob > 0.5);

  probe::Trajectory raw = probe::denormalize(traj);
  CHECK_THROWS_AS(model.rollout_inference(raw), InvalidInputError);
}

TEST_CASE("rollout gradients agree with finite differences") {
  probe::Trajectory traj = small_traj(113, 4, 2);
  const std::size_t K = traj.hints.size();
  Model model(traj.schema, small_config(8, 41));

  std::vector<std::uint8_t> coins(K, 1);
  if (K >= 3) coins[2] = 0;  // exercise the fed-back path too

  auto eval = [&](std::uint64_t* hash) {
    ad::Tape tape(&model.params());
    nar::TrainRollout ro = model.rollout_train(tape, traj, coins);
    if (hash) *hash = tape.decision_hash();
    return ro;
  };

  std::uint64_t base_hash = 0;
  {
    ad::Tape tape(&model.params());
    nar::TrainRollout ro = model.rollout_train(tape, traj, coins);
    base_hash = tape.decision_hash();
    model.params().zero_grads();
    tape.backward(ro.loss);
  }

  const double h = 1e-5;
  std::vector<std::pair<std::string, std::pair<int, int>>> picks = {
      {"enc.pointclouds.w", {0, 0}},  {"enc.error.w", {3, 0}},
      {"proc.msg.wi", {2, 5}},        {"proc.msg.b", {0, 1}},
      {"proc.tri.e1", {1, 3}},        {"proc.readout.w", {4, 10}},
      {"proc.node_ln.gain", {0, 2}},  {"dec.correspondences.w", {0, 7}},
      {"dec.phase.w", {1, 4}},        {"term.w", {0, 3}},
  };
  int checked = 0;
  for (const auto& [name, rc] : picks) {
    double& slot = model.params().value(name)(rc.first, rc.second);
    const double saved = slot;
    const double analytic = model.params().grad(name)(rc.first, rc.second);

    std::uint64_t hp = 0, hm = 0;
    slot = saved + h;
    double fp = eval(&hp).loss_value;
    slot = saved - h;
    double fm = eval(&hm).loss_value;
    slot = saved;
    if (hp != base_hash || hm != base_hash) continue;  // crossed a tie

    double fd = (fp - fm) / (2.0 * h);
    double denom = std::max({std::abs(analytic), std::abs(fd), 1e-6});
    CHECK(std::abs(analytic - fd) / denom < 1e-4);
    ++checked;
  }
  CHECK(checked >= 6);
}

TEST_CASE("infer builds the bootstrap hint and respects masks and caps") {
  Rng rng(211);
  geom::PointCloud src = oracle::random_cloud(rng, 5);
  geom::RigidTransform gt = oracle::random_transform(rng, 0.2, 1.0);
  geom::PointCloud tgt = geom::apply_transform(src, gt);

  Model model(probe::make_schema(0), small_config(8, 43));
  zero_params(model);

  nar::InferResult res = nar::infer(src, tgt, model, 2);
  const int cap = 2 * 2 * 2;
  CHECK(res.stop_step == cap);
  CHECK_FALSE(res.terminated);
  CHECK(int(res.phase_labels.size()) == cap);
  CHECK(res.final_src.size() == 5);
  CHECK(res.final_tgt.size() == 5);
  for (const auto& p : res.final_src.points) CHECK(p.allFinite());
  CHECK(res.correspondences.matrix.rows() == 5);
  for (int i = 0; i < 5; ++i)
    CHECK(res.correspondences.matrix.row(i).sum() == doctest::Approx(1.0));
  CHECK(res.final_src.valid_count() == 5);

  // Deterministic: a second call reproduces the result bit for bit.
  nar::InferResult again = nar::infer(src, tgt, model, 2);
  for (std::size_t i = 0; i < res.final_src.size(); ++i)
    CHECK((res.final_src.points[i] - again.final_src.points[i]).norm() == 0.0);
  CHECK((res.correspondences.matrix - again.correspondences.matrix).norm() ==
        0.0);
  CHECK(res.stop_step == again.stop_step);

  // Termination bias fires immediately: one executed step.
  model.params().value("term.b")(0, 0) = 10.0;
  nar::InferResult one = nar::infer(src, tgt, model, 2);
  CHECK(one.stop_step == 1);
  CHECK(one.terminated);
  CHECK(one.phase_labels.size() == 1);

  // Padded rows stay masked out in the returned clouds.
  geom::PointCloud padded_src = probe::fit_node_count(src, 7, 5);
  geom::PointCloud padded_tgt = probe::fit_node_count(tgt, 7, 6);
  nar::InferResult pad = nar::infer(padded_src, padded_tgt, model, 2);
  CHECK(pad.final_src.size() == 7);
  CHECK(pad.final_src.valid_count() == padded_src.valid_count());

  // Size and feature mismatches are rejected.
  geom::PointCloud small = probe::fit_node_count(src, 4, 7);
  CHECK_THROWS_AS(nar::infer(small, tgt, model, 2), InvalidInputError);
  geom::PointCloud with_feats = src;
  with_feats.features.assign(5, Eigen::Vector2d::Ones());
  geom::PointCloud tgt_feats = tgt;
  tgt_feats.features.assign(5, Eigen::Vector2d::Ones());
  CHECK_THROWS_AS(nar::infer(with_feats, tgt_feats, model, 2), SchemaError);
  CHECK_THROWS_AS(nar::infer(with_feats, tgt, model, 2), InvalidInputError);
}
