#include "icptraj/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <string_view>
#include <tuple>

#include "icptraj/trajectory_io.hpp"

namespace icptraj::nar {

using traj_io::format_g17;
using traj_io::format_probe_row;
using traj_io::parse_probe_row;

namespace {

long parse_long(std::string_view token, const char* what) {
  long value = 0;
  auto [ptr, ec] = std::from_chars(token.begin(), token.end(), value);
  if (ec != std::errc() || ptr != token.end())
    throw ParseError("checkpoint: bad integer for " + std::string(what) +
                     ": '" + std::string(token) + "'");
  return value;
}

double parse_double(std::string_view token, const char* what) {
  // std::from_chars<double> is missing from older libstdc++; strtod needs a
  // terminated copy.
  std::string buf(token);
  char* end = nullptr;
  double value = std::strtod(buf.c_str(), &end);
  if (end != buf.c_str() + buf.size() || buf.empty())
    throw ParseError("checkpoint: bad number for " + std::string(what) +
                     ": '" + buf + "'");
  return value;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t k = 0;
  while (k < line.size()) {
    while (k < line.size() && line[k] == ' ') ++k;
    std::size_t start = k;
    while (k < line.size() && line[k] != ' ') ++k;
    if (k > start) out.push_back(line.substr(start, k - start));
  }
  return out;
}

const char* processor_word(ProcessorKind kind) {
  return kind == ProcessorKind::TripletMPNN ? "triplet_mpnn" : "mpnn";
}

/// Line cursor over a loaded checkpoint; running past the end is the
/// truncation signal.
struct Lines {
  std::string_view text;
  std::size_t pos = 0;

  std::string_view next() {
    if (pos >= text.size())
      throw ParseError("checkpoint: unexpected end of file");
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  }
  void expect(std::string_view want) {
    std::string_view got = next();
    if (got != want)
      throw ParseError("checkpoint: expected '" + std::string(want) +
                       "', got '" + std::string(got) + "'");
  }
};

}  // namespace

void Adam::step(ad::ParamStore& params) {
  ++t;
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  for (auto& [name, value] : params.values) {
    const Eigen::MatrixXd& g = params.grad(name);
    auto mi = m.find(name);
    if (mi == m.end()) {
      mi = m.emplace(name, Eigen::MatrixXd::Zero(g.rows(), g.cols())).first;
      v.emplace(name, Eigen::MatrixXd::Zero(g.rows(), g.cols()));
    }
    Eigen::MatrixXd& m1 = mi->second;
    Eigen::MatrixXd& v1 = v.at(name);
    m1 = beta1 * m1 + (1.0 - beta1) * g;
    v1 = beta2 * v1 + (1.0 - beta2) * g.cwiseProduct(g);
    value.array() -=
        learn_rate * (m1.array() / bc1) / ((v1.array() / bc2).sqrt() + epsilon);
  }
}

TrainResult train(Model& model, const std::vector<probe::Trajectory>& dataset,
                  const TrainObserver& observer) {
  if (dataset.empty()) throw EmptyInputError("train: dataset is empty");
  const auto& probes = model.schema().probes;
  for (const auto& traj : dataset) {
    if (traj.schema.probes.size() != probes.size())
      throw SchemaError("train: trajectory schema does not match the model");
    for (std::size_t k = 0; k < probes.size(); ++k)
      if (format_probe_row(traj.schema.probes[k]) != format_probe_row(probes[k]))
        throw SchemaError("train: trajectory schema does not match the model");
    if (!traj.normalized)
      throw InvalidInputError("train: trajectories must be normalized");
  }

  const ModelConfig& cfg = model.config();
  ad::ParamStore& params = model.params();
  Adam opt;
  opt.learn_rate = cfg.learn_rate;

  TrainResult result;
  result.loss_history.reserve(cfg.train_steps);
  for (int step = 0; step < cfg.train_steps; ++step) {
    params.zero_grads();
    Rng batch_rng = derive_stream(cfg.seed, "batch", step);
    double batch_loss = 0.0;
    for (int slot = 0; slot < cfg.batch_size; ++slot) {
      const probe::Trajectory& sample =
          dataset[batch_rng.next_index(dataset.size())];
      Rng coin_rng = derive_stream(
          cfg.seed, "coins",
          static_cast<std::uint64_t>(step) * cfg.batch_size + slot);
      auto coins = model.draw_coins(sample.hints.size(), coin_rng);

      ad::Tape tape(&params);
      auto rollout = model.rollout_train(tape, sample, coins);
      if (!std::isfinite(rollout.loss_value)) {
        std::string term = "total";
        for (const auto& lt : rollout.terms)
          if (!std::isfinite(lt.value)) {
            term = lt.name;
            break;
          }
        throw DivergenceError("training diverged at optimizer step " +
                              std::to_string(step) + ": loss term '" + term +
                              "' is non-finite");
      }
      batch_loss += rollout.loss_value;
      tape.backward(rollout.loss);
    }
    batch_loss /= cfg.batch_size;
    params.scale_grads(1.0 / cfg.batch_size);
    const double norm = params.grad_norm();
    double clipped = norm;
    if (norm > cfg.grad_clip) {
      params.scale_grads(cfg.grad_clip / norm);
      clipped = cfg.grad_clip;
    }
    opt.step(params);
    result.loss_history.push_back(batch_loss);
    if (observer) observer({step, batch_loss, norm, clipped});
  }
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const ModelConfig& cfg = model.config();
  std::string out = "icptraj.checkpoint v1\n";
  out += "begin config\n";
  out += "hidden_dim " + std::to_string(cfg.hidden_dim) + '\n';
  out += std::string("processor ") + processor_word(cfg.processor) + '\n';
  out += "teacher_prob " + format_g17(cfg.teacher_prob) + '\n';
  out += "learn_rate " + format_g17(cfg.learn_rate) + '\n';
  out += "batch_size " + std::to_string(cfg.batch_size) + '\n';
  out += "train_steps " + std::to_string(cfg.train_steps) + '\n';
  out += "grad_clip " + format_g17(cfg.grad_clip) + '\n';
  out += "scalar_loss_scale " + format_g17(cfg.scalar_loss_scale) + '\n';
  out += "seed " + std::to_string(cfg.seed) + '\n';
  out += "end config\n";

  out += "begin schema\n";
  out += "probes " + std::to_string(model.schema().probes.size()) + '\n';
  for (const auto& spec : model.schema().probes)
    out += format_probe_row(spec) + '\n';
  out += "end schema\n";

  out += "begin params\n";
  out += "params " + std::to_string(model.params().values.size()) + '\n';
  for (const auto& [name, value] : model.params().values) {
    out += "param " + name + ' ' + std::to_string(value.rows()) + ' ' +
           std::to_string(value.cols()) + '\n';
    for (Eigen::Index r = 0; r < value.rows(); ++r) {
      for (Eigen::Index c = 0; c < value.cols(); ++c) {
        if (c) out += ' ';
        out += format_g17(value(r, c));
      }
      out += '\n';
    }
  }
  out += "end params\n";
  out += "end checkpoint\n";

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream file(tmp, std::ios::binary | std::ios::trunc);
    if (!file) throw Error("cannot open '" + tmp.string() + "' for writing");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw Error("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ParseError("cannot open checkpoint file '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  Lines lines{text};
  if (lines.next() != "icptraj.checkpoint v1")
    throw ParseError("not an icptraj checkpoint (bad magic line)");

  lines.expect("begin config");
  std::map<std::string, std::string> kv;
  for (;;) {
    std::string_view line = lines.next();
    if (line == "end config") break;
    std::size_t sp = line.find(' ');
    if (sp == std::string_view::npos)
      throw ParseError("checkpoint: config lines are 'key value', got '" +
                       std::string(line) + "'");
    kv[std::string(line.substr(0, sp))] = std::string(line.substr(sp + 1));
  }
  const char* keys[] = {"hidden_dim", "processor",  "teacher_prob",
                        "learn_rate", "batch_size", "train_steps",
                        "grad_clip",  "scalar_loss_scale", "seed"};
  for (const char* key : keys)
    if (!kv.count(key))
      throw ParseError(std::string("checkpoint: config is missing '") + key +
                       "'");
  for (const auto& [key, unused] : kv)
    if (std::find_if(std::begin(keys), std::end(keys), [&](const char* k) {
          return key == k;
        }) == std::end(keys))
      throw ParseError("checkpoint: unknown config key '" + key + "'");

  ModelConfig cfg;
  cfg.hidden_dim = static_cast<int>(parse_long(kv["hidden_dim"], "hidden_dim"));
  if (kv["processor"] == "triplet_mpnn")
    cfg.processor = ProcessorKind::TripletMPNN;
  else if (kv["processor"] == "mpnn")
    cfg.processor = ProcessorKind::MPNN;
  else
    throw ParseError("checkpoint: unknown processor '" + kv["processor"] +
                     "'");
  cfg.teacher_prob = parse_double(kv["teacher_prob"], "teacher_prob");
  cfg.learn_rate = parse_double(kv["learn_rate"], "learn_rate");
  cfg.batch_size = static_cast<int>(parse_long(kv["batch_size"], "batch_size"));
  cfg.train_steps =
      static_cast<int>(parse_long(kv["train_steps"], "train_steps"));
  cfg.grad_clip = parse_double(kv["grad_clip"], "grad_clip");
  cfg.scalar_loss_scale =
      parse_double(kv["scalar_loss_scale"], "scalar_loss_scale");
  cfg.seed = static_cast<std::uint64_t>(parse_long(kv["seed"], "seed"));
  cfg.validate();

  lines.expect("begin schema");
  auto head = split_ws(lines.next());
  if (head.size() != 2 || head[0] != "probes")
    throw ParseError("checkpoint: expected the probe count");
  long probe_count = parse_long(head[1], "probes");
  std::vector<probe::ProbeSpec> parsed;
  for (long k = 0; k < probe_count; ++k)
    parsed.push_back(parse_probe_row(std::string(lines.next())));
  lines.expect("end schema");

  const probe::ProbeSpec* clouds = nullptr;
  for (const auto& spec : parsed)
    if (spec.name == "pointclouds") clouds = &spec;
  if (!clouds || clouds->dim < 6 || (clouds->dim - 6) % 2 != 0)
    throw SchemaError(
        "checkpoint: schema lacks a pointclouds probe of dim 6 + 2F");
  probe::TrajectorySchema schema = probe::make_schema((clouds->dim - 6) / 2);
  if (parsed.size() != schema.probes.size())
    throw SchemaError("checkpoint: probe table has the wrong size");
  for (std::size_t k = 0; k < parsed.size(); ++k)
    if (format_probe_row(parsed[k]) != format_probe_row(schema.probes[k]))
      throw SchemaError("checkpoint: probe table row '" +
                        format_probe_row(parsed[k]) +
                        "' does not match the schema");

  Model model(schema, cfg);

  lines.expect("begin params");
  head = split_ws(lines.next());
  if (head.size() != 2 || head[0] != "params")
    throw ParseError("checkpoint: expected the parameter count");
  long param_count = parse_long(head[1], "params");
  std::set<std::string> seen;
  for (long k = 0; k < param_count; ++k) {
    auto tokens = split_ws(lines.next());
    if (tokens.size() != 4 || tokens[0] != "param")
      throw ParseError("checkpoint: parameter headers are 'param name r c'");
    std::string name(tokens[1]);
    auto it = model.params().values.find(name);
    if (it == model.params().values.end())
      throw SchemaError("checkpoint: unknown parameter '" + name + "'");
    if (!seen.insert(name).second)
      throw SchemaError("checkpoint: duplicate parameter '" + name + "'");
    long rows = parse_long(tokens[2], "param rows");
    long cols = parse_long(tokens[3], "param cols");
    Eigen::MatrixXd& value = it->second;
    if (rows != value.rows() || cols != value.cols())
      throw SchemaError("checkpoint: parameter '" + name + "' is " +
                        std::to_string(rows) + "x" + std::to_string(cols) +
                        " but the config implies " +
                        std::to_string(value.rows()) + "x" +
                        std::to_string(value.cols()));
    for (long r = 0; r < rows; ++r) {
      auto row = split_ws(lines.next());
      if (static_cast<long>(row.size()) != cols)
        throw ParseError("checkpoint: parameter '" + name + "' row " +
                         std::to_string(r) + " has " +
                         std::to_string(row.size()) + " values, wants " +
                         std::to_string(cols));
      for (long c = 0; c < cols; ++c)
        value(r, c) = parse_double(row[c], name.c_str());
    }
  }
  if (seen.size() != model.params().values.size())
    for (const auto& [name, unused] : model.params().values)
      if (!seen.count(name))
        throw SchemaError("checkpoint: missing parameter '" + name + "'");
  lines.expect("end params");
  lines.expect("end checkpoint");
  return model;
}

GradCheckReport grad_check(Model& model, const probe::Trajectory& traj,
                           const GradCheckOptions& opt) {
  if (opt.fd_step <= 0.0)
    throw InvalidInputError("grad_check: fd_step must be positive");
  const std::vector<std::string>* only = opt.probes.empty() ? nullptr
                                                            : &opt.probes;
  for (const auto& name : opt.probes)
    if (!model.schema().find(name))
      throw SchemaError("grad_check: unknown probe '" + name + "'");

  // Alternating coins past step 0 exercise both the teacher-forced and the
  // fed-back step transitions.
  std::vector<std::uint8_t> coins(traj.hints.size(), 1);
  for (std::size_t t = 1; t < coins.size(); ++t) coins[t] = t % 2;

  const int n = traj.node_count;
  auto eval = [&](bool with_grad) {
    ad::Tape tape(&model.params());
    ad::TensorRef loss;
    double value = 0.0;
    if (opt.encoder_decoder_only) {
      auto consts = model.step_constants(tape, traj.input, traj.hints[0], n);
      auto z = model.encode_step(tape, consts, n);
      auto state = model.zero_state(tape, n);
      auto decoded = model.decode_step(tape, z, state, n);
      const bool last = traj.hints.size() == 1;
      ad::TensorRef part =
          last ? model.final_loss(tape, decoded, traj.output, n, nullptr, only)
               : model.step_loss(tape, decoded, traj.hints[1], n, nullptr,
                                 "step 0", only);
      Eigen::MatrixXd target(1, 1);
      target(0, 0) = last ? 1.0 : 0.0;
      ad::TensorRef term = tape.bce_logits(decoded.termination, target, 1.0);
      loss = tape.weighted_sum({part, term}, {1.0, 1.0});
      value = tape.value(loss)(0, 0);
    } else {
      auto rollout = model.rollout_train(tape, traj, coins, only);
      loss = rollout.loss;
      value = rollout.loss_value;
    }
    if (with_grad) tape.backward(loss);
    return std::pair<double, std::uint64_t>(value, tape.decision_hash());
  };

  std::vector<std::tuple<std::string, int, int>> entries;
  for (const auto& [name, value] : model.params().values) {
    if (!opt.param_filter.empty() &&
        name.find(opt.param_filter) == std::string::npos)
      continue;
    for (int r = 0; r < value.rows(); ++r)
      for (int c = 0; c < value.cols(); ++c) entries.emplace_back(name, r, c);
  }
  Rng rng = derive_stream(opt.seed, "grad_check");
  std::size_t take = std::min<std::size_t>(
      opt.sample_params < 0 ? 0 : opt.sample_params, entries.size());
  for (std::size_t k = 0; k < take; ++k) {
    std::size_t j = k + rng.next_index(entries.size() - k);
    std::swap(entries[k], entries[j]);
  }

  model.params().zero_grads();
  auto [base, hash0] = eval(true);
  (void)base;

  GradCheckReport report;
  for (std::size_t k = 0; k < take; ++k) {
    const auto& [name, r, c] = entries[k];
    double analytic = model.params().grad(name)(r, c);
    double& slot = model.params().value(name)(r, c);
    const double saved = slot;
    slot = saved + opt.fd_step;
    auto [up, hash_up] = eval(false);
    slot = saved - opt.fd_step;
    auto [down, hash_down] = eval(false);
    slot = saved;
    if (hash_up != hash0 || hash_down != hash0) {
      ++report.skipped;
      continue;
    }
    double fd = (up - down) / (2.0 * opt.fd_step);
    double rel = std::abs(analytic - fd) /
                 std::max({std::abs(analytic), std::abs(fd), 1.0});
    report.max_rel_error = std::max(report.max_rel_error, rel);
    ++report.checked;
  }
  return report;
}

}  // namespace icptraj::nar
