#include "icptraj/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "icptraj/geometry.hpp"
#include "icptraj/icp.hpp"

namespace icptraj::nar {

namespace {

constexpr int kTripletChannels = 8;

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

const probe::ProbeSpec& find_spec(const probe::TrajectorySchema& schema,
                                  const std::string& name) {
  const probe::ProbeSpec* spec = schema.find(name);
  if (!spec) throw SchemaError("unknown probe '" + name + "'");
  return *spec;
}

int location_rows(const probe::ProbeSpec& spec, int n) {
  switch (spec.location) {
    case probe::Location::Node:
      return n;
    case probe::Location::Edge:
      return n * n;
    case probe::Location::Graph:
      return 1;
  }
  return 1;
}

int channel_count(const probe::ProbeSpec& spec) {
  return spec.kind == probe::Kind::Categorical ? spec.categories : spec.dim;
}

Eigen::ArrayXd flatten_matrix(const Eigen::MatrixXd& m) {
  Eigen::ArrayXd flat(m.rows() * m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat[r * m.cols() + c] = m(r, c);
  return flat;
}

Eigen::ArrayXd pack_points(const geom::PointCloud& cloud) {
  Eigen::ArrayXd flat(static_cast<Eigen::Index>(cloud.size()) * 3);
  for (std::size_t i = 0; i < cloud.size(); ++i)
    for (int c = 0; c < 3; ++c) flat[i * 3 + c] = cloud.points[i][c];
  return flat;
}

}  // namespace

void ModelConfig::validate() const {
  if (hidden_dim < 1)
    throw InvalidInputError("ModelConfig: hidden_dim must be >= 1");
  if (!(teacher_prob >= 0.0 && teacher_prob <= 1.0))
    throw InvalidInputError("ModelConfig: teacher_prob must lie in [0, 1]");
  if (!(learn_rate > 0.0))
    throw InvalidInputError("ModelConfig: learn_rate must be positive");
  if (batch_size < 1)
    throw InvalidInputError("ModelConfig: batch_size must be >= 1");
  if (train_steps < 0)
    throw InvalidInputError("ModelConfig: train_steps must be >= 0");
  if (!(grad_clip > 0.0))
    throw InvalidInputError("ModelConfig: grad_clip must be positive");
  if (!(scalar_loss_scale >= 0.0))
    throw InvalidInputError(
        "ModelConfig: scalar_loss_scale must be nonnegative");
}

Model::Model(probe::TrajectorySchema schema, ModelConfig cfg)
    : schema_(std::move(schema)), cfg_(cfg) {
  cfg_.validate();
  register_params();
  init_params();
}

void Model::register_params() {
  const int h = cfg_.hidden_dim;
  for (const auto& spec : schema_.probes) {
    if (spec.stage == probe::Stage::Input || spec.stage == probe::Stage::Hint) {
      params_.add("enc." + spec.name + ".w", h, channel_count(spec));
      params_.add("enc." + spec.name + ".b", 1, h);
    }
    if (spec.stage == probe::Stage::Hint || spec.stage == probe::Stage::Output) {
      int in = spec.location == probe::Location::Node   ? 2 * h
               : spec.location == probe::Location::Edge ? 4 * h
                                                        : 3 * h;
      params_.add("dec." + spec.name + ".w", channel_count(spec), in);
      params_.add("dec." + spec.name + ".b", 1, channel_count(spec));
    }
  }

  params_.add("proc.msg.wi", h, 2 * h);
  params_.add("proc.msg.wj", h, 2 * h);
  params_.add("proc.msg.we", h, h);
  params_.add("proc.msg.wg", h, h);
  params_.add("proc.msg.b", 1, h);
  params_.add("proc.readout.w", h, 3 * h);
  params_.add("proc.readout.b", 1, h);
  params_.add("proc.node_ln.gain", 1, h);
  params_.add("proc.node_ln.bias", 1, h);
  if (cfg_.processor == ProcessorKind::TripletMPNN) {
    params_.add("proc.tri.n1", kTripletChannels, 2 * h);
    params_.add("proc.tri.n2", kTripletChannels, 2 * h);
    params_.add("proc.tri.n3", kTripletChannels, 2 * h);
    params_.add("proc.tri.e1", kTripletChannels, 2 * h);
    params_.add("proc.tri.e2", kTripletChannels, 2 * h);
    params_.add("proc.tri.e3", kTripletChannels, 2 * h);
    params_.add("proc.tri.g", kTripletChannels, h);
    params_.add("proc.tri.b", 1, kTripletChannels);
    params_.add("proc.tri.readout.w", h, kTripletChannels);
    params_.add("proc.tri.readout.b", 1, h);
    params_.add("proc.edge_ln.gain", 1, h);
    params_.add("proc.edge_ln.bias", 1, h);
  }
  params_.add("term.w", 1, 2 * h);
  params_.add("term.b", 1, 1);
}

void Model::init_params() {
  Rng rng = derive_stream(cfg_.seed, "init");
  for (auto& [name, v] : params_.values) {
    if (name.ends_with(".gain")) {
      v.setOnes();
      continue;
    }
    if (name.ends_with(".b") || name.ends_with(".bias")) continue;  // zero
    const double limit = std::sqrt(6.0 / double(v.rows() + v.cols()));
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c)
        v(r, c) = rng.next_uniform(-limit, limit);
  }
}

Eigen::MatrixXd Model::probe_matrix(const probe::ProbeSpec& spec,
                                    const Eigen::ArrayXd& flat, int n) {
  const int rows = location_rows(spec, n);
  if (spec.kind == probe::Kind::Categorical) {
    if (flat.size() != rows)
      throw SchemaError("probe_matrix: '" + spec.name +
                        "' has wrong value count");
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(rows, spec.categories);
    for (int r = 0; r < rows; ++r) {
      const double v = flat[r];
      const int cls = static_cast<int>(v);
      if (v != double(cls) || cls < 0 || cls >= spec.categories)
        throw SchemaError("probe_matrix: '" + spec.name +
                          "' holds a value outside its categories");
      m(r, cls) = 1.0;
    }
    return m;
  }
  if (flat.size() != Eigen::Index(rows) * spec.dim)
    throw SchemaError("probe_matrix: '" + spec.name +
                      "' has wrong value count");
  Eigen::MatrixXd m(rows, spec.dim);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < spec.dim; ++c) m(r, c) = flat[r * spec.dim + c];
  return m;
}

std::map<std::string, ad::TensorRef> Model::step_constants(
    ad::Tape& tape, const probe::TrajectoryStep& input,
    const probe::TrajectoryStep& hint, int n) const {
  std::map<std::string, ad::TensorRef> out;
  for (const auto& spec : schema_.probes) {
    if (spec.stage == probe::Stage::Output) continue;
    const probe::TrajectoryStep& step =
        spec.stage == probe::Stage::Input ? input : hint;
    out[spec.name] = tape.constant(probe_matrix(spec, step.at(spec.name), n));
  }
  return out;
}

StateTensors Model::zero_state(ad::Tape& tape, int n) const {
  const int h = cfg_.hidden_dim;
  return {tape.constant(Eigen::MatrixXd::Zero(n, h)),
          tape.constant(Eigen::MatrixXd::Zero(Eigen::Index(n) * n, h))};
}

StepTensors Model::encode_step(
    ad::Tape& tape, const std::map<std::string, ad::TensorRef>& probes,
    int n) const {
  StepTensors z;
  for (const auto& [name, ref] : probes) {
    const probe::ProbeSpec& spec = find_spec(schema_, name);
    if (spec.stage == probe::Stage::Output)
      throw SchemaError("encode_step: probe '" + name + "' is not encodable");
    if (tape.value(ref).rows() != location_rows(spec, n))
      throw SchemaError("encode_step: probe '" + name + "' has wrong rows");
    ad::TensorRef enc =
        tape.linear({ref}, "enc." + name + ".w", "enc." + name + ".b");
    ad::TensorRef* slot = spec.location == probe::Location::Node   ? &z.node
                          : spec.location == probe::Location::Edge ? &z.edge
                                                                   : &z.graph;
    *slot = slot->valid() ? tape.add(*slot, enc) : enc;
  }
  const int h = cfg_.hidden_dim;
  if (!z.node.valid()) z.node = tape.constant(Eigen::MatrixXd::Zero(n, h));
  if (!z.edge.valid())
    z.edge = tape.constant(Eigen::MatrixXd::Zero(Eigen::Index(n) * n, h));
  if (!z.graph.valid()) z.graph = tape.constant(Eigen::MatrixXd::Zero(1, h));
  return z;
}

StateTensors Model::process_step(ad::Tape& tape, const StepTensors& z,
                                 const StateTensors& prev, int n) const {
  ad::TensorRef p = tape.linear({z.node, prev.node}, "proc.msg.wi", "");
  ad::TensorRef q = tape.linear({z.node, prev.node}, "proc.msg.wj", "");
  ad::TensorRef r = tape.linear({z.edge}, "proc.msg.we", "");
  ad::TensorRef s = tape.linear({z.graph}, "proc.msg.wg", "proc.msg.b");
  ad::TensorRef m = tape.message_max(p, q, r, s, n);
  ad::TensorRef node = tape.layer_norm(
      tape.linear({z.node, prev.node, m}, "proc.readout.w", "proc.readout.b"),
      "proc.node_ln.gain", "proc.node_ln.bias");

  if (cfg_.processor == ProcessorKind::MPNN) return {node, prev.edge};

  ad::TensorRef n1 = tape.linear({z.node, prev.node}, "proc.tri.n1", "");
  ad::TensorRef n2 = tape.linear({z.node, prev.node}, "proc.tri.n2", "");
  ad::TensorRef n3 = tape.linear({z.node, prev.node}, "proc.tri.n3", "");
  ad::TensorRef e1 = tape.linear({z.edge, prev.edge}, "proc.tri.e1", "");
  ad::TensorRef e2 = tape.linear({z.edge, prev.edge}, "proc.tri.e2", "");
  ad::TensorRef e3 = tape.linear({z.edge, prev.edge}, "proc.tri.e3", "");
  ad::TensorRef g = tape.linear({z.graph}, "proc.tri.g", "proc.tri.b");
  ad::TensorRef tri = tape.triplet_max(n1, n2, n3, e1, e2, e3, g, n);
  ad::TensorRef edge = tape.layer_norm(
      tape.linear({tri}, "proc.tri.readout.w", "proc.tri.readout.b"),
      "proc.edge_ln.gain", "proc.edge_ln.bias");
  return {node, edge};
}

DecodedStep Model::decode_step(ad::Tape& tape, const StepTensors& z,
                               const StateTensors& state, int n) const {
  ad::TensorRef h_src = tape.edge_from_source(state.node, n);
  ad::TensorRef h_tgt = tape.edge_from_target(state.node, n);
  ad::TensorRef h_mean = tape.mean_rows(state.node);
  ad::TensorRef h_max = tape.max_rows(state.node);

  DecodedStep dec;
  for (const auto& spec : schema_.probes) {
    if (spec.stage == probe::Stage::Input) continue;
    const std::string w = "dec." + spec.name + ".w";
    const std::string b = "dec." + spec.name + ".b";
    ad::TensorRef head;
    switch (spec.location) {
      case probe::Location::Node:
        head = tape.linear({z.node, state.node}, w, b);
        break;
      case probe::Location::Edge:
        head = tape.linear({h_src, h_tgt, z.edge, state.edge}, w, b);
        break;
      case probe::Location::Graph:
        head = tape.linear({z.graph, h_mean, h_max}, w, b);
        break;
    }
    (spec.stage == probe::Stage::Hint ? dec.hints : dec.outputs)[spec.name] =
        head;
  }
  dec.termination = tape.linear({h_mean, h_max}, "term.w", "term.b");
  return dec;
}

std::map<std::string, ad::TensorRef> Model::activate_hints(
    ad::Tape& tape, const DecodedStep& decoded) const {
  std::map<std::string, ad::TensorRef> out;
  for (const auto& [name, ref] : decoded.hints) {
    switch (find_spec(schema_, name).kind) {
      case probe::Kind::Scalar:
        out[name] = ref;
        break;
      case probe::Kind::Mask:
        out[name] = tape.sigmoid(ref);
        break;
      case probe::Kind::Categorical:
        out[name] = tape.softmax_rows(ref);
        break;
    }
  }
  return out;
}

namespace {

/// Shared scalar/mask/categorical composition for step_loss and final_loss.
ad::TensorRef staged_loss(ad::Tape& tape, const probe::TrajectorySchema& schema,
                          const std::map<std::string, ad::TensorRef>& heads,
                          const probe::TrajectoryStep& target,
                          probe::Stage stage, int n, double alpha,
                          std::vector<LossTerm>* terms,
                          const std::string& label,
                          const std::vector<std::string>* only) {
  std::vector<ad::TensorRef> scalar_sse;
  std::vector<std::string> scalar_names;
  std::vector<ad::TensorRef> other;
  std::vector<std::string> other_names;
  double scalar_count = 0.0;

  for (const auto& spec : schema.probes) {
    if (spec.stage != stage) continue;
    if (only && std::find(only->begin(), only->end(), spec.name) ==
                    only->end())
      continue;
    auto it = heads.find(spec.name);
    if (it == heads.end())
      throw SchemaError("loss: missing decoded probe '" + spec.name + "'");
    const Eigen::ArrayXd& flat = target.at(spec.name);
    Eigen::MatrixXd tmat = Model::probe_matrix(spec, flat, n);
    if (spec.kind == probe::Kind::Scalar) {
      scalar_sse.push_back(tape.sse(it->second, tmat));
      scalar_names.push_back(spec.name);
      scalar_count += double(tmat.size());
    } else if (spec.kind == probe::Kind::Mask) {
      const double ones = tmat.sum();
      const double zeros = double(tmat.size()) - ones;
      const double w_pos = zeros / (ones + 1e-8);
      other.push_back(tape.bce_logits(it->second, tmat, w_pos));
      other_names.push_back(spec.name);
    } else {
      std::vector<int> classes(flat.size());
      for (Eigen::Index r = 0; r < flat.size(); ++r)
        classes[r] = static_cast<int>(flat[r]);
      other.push_back(tape.ce_logits(it->second, classes));
      other_names.push_back(spec.name);
    }
  }

  std::vector<ad::TensorRef> parts;
  std::vector<double> weights;
  for (std::size_t k = 0; k < scalar_sse.size(); ++k) {
    parts.push_back(scalar_sse[k]);
    weights.push_back(alpha / scalar_count);
    if (terms)
      terms->push_back({label + " " + scalar_names[k],
                        alpha * tape.value(scalar_sse[k])(0, 0) / scalar_count});
  }
  for (std::size_t k = 0; k < other.size(); ++k) {
    parts.push_back(other[k]);
    weights.push_back(1.0);
    if (terms)
      terms->push_back(
          {label + " " + other_names[k], tape.value(other[k])(0, 0)});
  }
  if (parts.empty()) return tape.constant(Eigen::MatrixXd::Zero(1, 1));
  return tape.weighted_sum(parts, weights);
}

}  // namespace

ad::TensorRef Model::step_loss(ad::Tape& tape, const DecodedStep& decoded,
                               const probe::TrajectoryStep& target, int n,
                               std::vector<LossTerm>* terms,
                               const std::string& label,
                               const std::vector<std::string>* only) const {
  return staged_loss(tape, schema_, decoded.hints, target, probe::Stage::Hint,
                     n, cfg_.scalar_loss_scale, terms,
                     label.empty() ? "step" : label, only);
}

ad::TensorRef Model::final_loss(ad::Tape& tape, const DecodedStep& decoded,
                                const probe::TrajectoryStep& output, int n,
                                std::vector<LossTerm>* terms,
                                const std::vector<std::string>* only) const {
  return staged_loss(tape, schema_, decoded.outputs, output,
                     probe::Stage::Output, n, cfg_.scalar_loss_scale, terms,
                     "final", only);
}

std::vector<std::uint8_t> Model::draw_coins(std::size_t steps,
                                            Rng& rng) const {
  std::vector<std::uint8_t> coins(steps, 1);
  for (std::size_t t = 1; t < steps; ++t)
    coins[t] = rng.next_bernoulli(cfg_.teacher_prob) ? 1 : 0;
  return coins;
}

TrainRollout Model::rollout_train(ad::Tape& tape,
                                  const probe::Trajectory& traj,
                                  const std::vector<std::uint8_t>& coins,
                                  const std::vector<std::string>* only) {
  if (!traj.normalized)
    throw InvalidInputError("rollout_train: trajectory must be normalized");
  const std::size_t steps = traj.hints.size();
  if (steps == 0)
    throw InvalidInputError("rollout_train: trajectory has no hints");
  if (coins.size() != steps)
    throw InvalidInputError("rollout_train: need one teacher coin per hint");
  const int n = traj.node_count;

  std::map<std::string, ad::TensorRef> inputs;
  for (const auto& spec : schema_.probes)
    if (spec.stage == probe::Stage::Input)
      inputs[spec.name] =
          tape.constant(probe_matrix(spec, traj.input.at(spec.name), n));

  TrainRollout out;
  StateTensors h = zero_state(tape, n);
  std::map<std::string, ad::TensorRef> fed;
  std::vector<ad::TensorRef> step_losses;
  std::vector<ad::TensorRef> term_losses;
  ad::TensorRef final_ref;

  for (std::size_t t = 0; t < steps; ++t) {
    std::map<std::string, ad::TensorRef> probes = inputs;
    if (t == 0 || coins[t]) {
      for (const auto& spec : schema_.probes)
        if (spec.stage == probe::Stage::Hint)
          probes[spec.name] = tape.constant(
              probe_matrix(spec, traj.hints[t].at(spec.name), n));
    } else {
      probes.insert(fed.begin(), fed.end());
    }

    StepTensors z = encode_step(tape, probes, n);
    h = process_step(tape, z, h, n);
    DecodedStep dec = decode_step(tape, z, h, n);
    fed = activate_hints(tape, dec);

    const std::string label = "step " + std::to_string(t);
    if (t + 1 < steps)
      step_losses.push_back(step_loss(tape, dec, traj.hints[t + 1], n,
                                      &out.terms, label, only));
    else
      final_ref = final_loss(tape, dec, traj.output, n, &out.terms, only);

    Eigen::MatrixXd target(1, 1);
    target(0, 0) = (t + 1 == steps) ? 1.0 : 0.0;
    ad::TensorRef term = tape.bce_logits(dec.termination, target, 1.0);
    term_losses.push_back(term);
    out.terms.push_back(
        {"termination " + label, tape.value(term)(0, 0)});
  }

  std::vector<ad::TensorRef> parts;
  std::vector<double> weights;
  for (ad::TensorRef s : step_losses) {
    parts.push_back(s);
    weights.push_back(1.0 / double(steps - 1));
  }
  parts.push_back(final_ref);
  weights.push_back(1.0);
  for (ad::TensorRef s : term_losses) {
    parts.push_back(s);
    weights.push_back(1.0 / double(steps));
  }
  out.loss = tape.weighted_sum(parts, weights);
  out.loss_value = tape.value(out.loss)(0, 0);
  return out;
}

InferenceRollout Model::rollout_inference(const probe::Trajectory& traj,
                                          int cap) {
  if (!traj.normalized)
    throw InvalidInputError(
        "rollout_inference: trajectory must be normalized");
  if (traj.hints.empty())
    throw InvalidInputError("rollout_inference: trajectory has no hints");
  if (cap < 0) cap = 2 * traj.t_max * 2;
  const int n = traj.node_count;
  const int h = cfg_.hidden_dim;

  std::map<std::string, Eigen::MatrixXd> input_mats;
  std::map<std::string, Eigen::MatrixXd> fed;
  for (const auto& spec : schema_.probes) {
    if (spec.stage == probe::Stage::Input)
      input_mats[spec.name] = probe_matrix(spec, traj.input.at(spec.name), n);
    else if (spec.stage == probe::Stage::Hint)
      fed[spec.name] = probe_matrix(spec, traj.hints[0].at(spec.name), n);
  }

  InferenceRollout out;
  Eigen::MatrixXd state_node = Eigen::MatrixXd::Zero(n, h);
  Eigen::MatrixXd state_edge = Eigen::MatrixXd::Zero(Eigen::Index(n) * n, h);

  for (int step = 0; step < cap; ++step) {
    ad::Tape tape(&params_);
    std::map<std::string, ad::TensorRef> probes;
    for (const auto& [name, m] : input_mats) probes[name] = tape.constant(m);
    for (const auto& [name, m] : fed) probes[name] = tape.constant(m);
    StateTensors prev{tape.constant(state_node), tape.constant(state_edge)};

    StepTensors z = encode_step(tape, probes, n);
    StateTensors next = process_step(tape, z, prev, n);
    DecodedStep dec = decode_step(tape, z, next, n);
    auto acts = activate_hints(tape, dec);

    InferenceStep rec;
    for (const auto& [name, ref] : acts) rec.hints[name] = tape.value(ref);
    rec.termination_prob = sigmoid(tape.value(dec.termination)(0, 0));

    out.outputs.clear();
    for (const auto& [name, ref] : dec.outputs) {
      if (find_spec(schema_, name).kind == probe::Kind::Mask)
        out.outputs[name] = tape.value(tape.sigmoid(ref));
      else
        out.outputs[name] = tape.value(ref);
    }

    state_node = tape.value(next.node);
    state_edge = tape.value(next.edge);
    fed = rec.hints;
    out.steps.push_back(std::move(rec));
    if (out.steps.back().termination_prob > 0.5) {
      out.terminated = true;
      break;
    }
  }
  out.stop_step = static_cast<int>(out.steps.size());
  return out;
}

InferResult infer(const geom::PointCloud& src, const geom::PointCloud& tgt,
                  Model& model, int t_max,
                  const probe::NormalizationParams* norm_override) {
  src.check();
  tgt.check();
  if (src.size() != tgt.size())
    throw InvalidInputError(
        "infer: clouds must share a node count (fit_node_count first)");
  const int n = static_cast<int>(src.size());
  if (n < 2) throw InvalidInputError("infer: need at least 2 nodes");
  if (src.feature_dim() != tgt.feature_dim())
    throw InvalidInputError("infer: clouds disagree in feature dimension");
  if (t_max < 1) throw InvalidInputError("infer: t_max must be >= 1");
  const probe::TrajectorySchema& schema = model.schema();
  const int pc_dim = find_spec(schema, "pointclouds").dim;
  if (pc_dim != 6 + 2 * src.feature_dim())
    throw SchemaError("infer: cloud feature dimension does not match the "
                      "model schema");

  probe::Trajectory traj;
  traj.schema = schema;
  traj.node_count = n;
  traj.t_max = t_max;
  traj.src_mask.assign(n, 1);
  traj.tgt_mask.assign(n, 1);
  for (int i = 0; i < n; ++i) {
    if (!src.is_valid(i)) traj.src_mask[i] = 0;
    if (!tgt.is_valid(i)) traj.tgt_mask[i] = 0;
  }

  const int fdim = src.feature_dim();
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

  geom::CorrespondenceSet corr0 = geom::nearest_correspondences(src, tgt);
  probe::TrajectoryStep hint;
  hint.values["transformed_src"] = pack_points(src);
  hint.values["transformed_tgt"] = pack_points(tgt);
  hint.values["correspondences"] = flatten_matrix(corr0.matrix);
  hint.values["distances"] = flatten_matrix(corr0.distances);
  hint.values["error"] =
      Eigen::ArrayXd::Constant(1, std::numeric_limits<double>::infinity());
  hint.values["iterations"] = Eigen::ArrayXd::Zero(1);
  hint.values["phase"] = Eigen::ArrayXd::Zero(1);
  hint.values["stop"] = Eigen::ArrayXd::Zero(1);
  traj.hints.push_back(std::move(hint));

  // Normalization scales must come from quantities observable at step 0
  // (unless the caller knows better ones): every coordinate probe shares the
  // input coordinate range, distances use the initial matches, and the
  // unit-interval probes map identically.
  probe::NormalizationParams& norm = traj.norm;
  if (norm_override != nullptr) {
    norm = *norm_override;
  } else {
    double cmin = std::numeric_limits<double>::infinity();
    double cmax = -cmin;
    for (Eigen::Index i = 0; i < Eigen::Index(n); ++i) {
      for (int c = 0; c < 6; ++c) {
        cmin = std::min(cmin, pc[i * pc_dim + c]);
        cmax = std::max(cmax, pc[i * pc_dim + c]);
      }
    }
    const Eigen::ArrayXd& dists = traj.hints[0].at("distances");
    norm.scales["pointclouds"] = {cmin, cmax, 6};
    for (const char* name :
         {"transformed_src", "transformed_tgt", "final_src", "final_tgt"})
      norm.scales[name] = {cmin, cmax, 3};
    norm.scales["distances"] = {dists.minCoeff(), dists.maxCoeff(), 1};
    norm.scales["node_positions"] = {0.0, 1.0, 1};
    norm.scales["iterations"] = {0.0, 1.0, 1};
  }

  for (auto& [name, arr] : traj.input.values)
    arr = probe::apply_probe_scale(find_spec(schema, name), norm, arr);
  for (auto& [name, arr] : traj.hints[0].values)
    arr = probe::apply_probe_scale(find_spec(schema, name), norm, arr);
  traj.normalized = true;

  InferenceRollout ro = model.rollout_inference(traj, 2 * t_max * 2);

  InferResult res;
  res.stop_step = ro.stop_step;
  res.terminated = ro.terminated;
  for (const auto& step : ro.steps) {
    const Eigen::MatrixXd& phase = step.hints.at("phase");
    int label = 0;
    phase.row(0).maxCoeff(&label);
    res.phase_labels.push_back(label);
  }

  auto unpack_cloud = [&](const char* probe_name, const Eigen::MatrixXd& mat,
                          const geom::PointCloud& like) {
    Eigen::ArrayXd flat = flatten_matrix(mat);
    flat = probe::invert_probe_scale(find_spec(schema, probe_name), norm, flat);
    geom::PointCloud cloud = like;
    for (int i = 0; i < n; ++i)
      cloud.points[i] = Eigen::Vector3d(flat[i * 3], flat[i * 3 + 1],
                                        flat[i * 3 + 2]);
    return cloud;
  };
  for (const auto& step : ro.steps)
    res.step_src.push_back(
        unpack_cloud("transformed_src", step.hints.at("transformed_src"), src));
  res.final_src = unpack_cloud("final_src", ro.outputs.at("final_src"), src);
  res.final_tgt = unpack_cloud("final_tgt", ro.outputs.at("final_tgt"), tgt);

  const Eigen::MatrixXd& probs = ro.outputs.at("final_correspondences");
  res.correspondences.matrix = Eigen::MatrixXd::Zero(n, n);
  res.correspondences.distances = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    if (!src.is_valid(i)) continue;
    int best = -1;
    double best_p = -1.0;
    for (int j = 0; j < n; ++j) {
      if (!tgt.is_valid(j)) continue;
      const double p = probs(i * n + j, 0);
      if (p > best_p) {
        best_p = p;
        best = j;
      }
    }
    res.correspondences.matrix(i, best) = 1.0;
    res.correspondences.distances(i, best) =
        (res.final_src.points[i] - res.final_tgt.points[best]).norm();
  }
  return res;
}

}  // namespace icptraj::nar
