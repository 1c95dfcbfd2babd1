// icptraj: command-line front end wiring datasets -> trajectories ->
// training -> evaluation. Every command is reproducible from (args, seed);
// all artifacts are written atomically (temp + rename).

#include <CLI11.hpp>

#include <charconv>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icptraj/dataset.hpp"
#include "icptraj/error.hpp"
#include "icptraj/icp.hpp"
#include "icptraj/metrics.hpp"
#include "icptraj/model.hpp"
#include "icptraj/probe.hpp"
#include "icptraj/rng.hpp"
#include "icptraj/train.hpp"
#include "icptraj/trajectory_io.hpp"

namespace fs = std::filesystem;

namespace {

using icptraj::Error;
using icptraj::InvalidInputError;
using icptraj::ParseError;
using icptraj::traj_io::format_g17;

// ---------------------------------------------------------------------------
// file plumbing

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "' for reading");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) throw ParseError("failed reading '" + path.string() + "'");
  return text;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("failed writing '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

struct Timer {
  std::chrono::steady_clock::time_point start =
      std::chrono::steady_clock::now();
  double secs() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start)
        .count();
  }
};

void report_timing(bool enabled, const char* command, const Timer& timer) {
  if (enabled)
    std::cerr << "timings: " << command << " total " << timer.secs() << "s\n";
}

// ---------------------------------------------------------------------------
// line-oriented parsing shared by the sample/manifest/prediction formats

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

struct LineCursor {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  std::string origin;

  LineCursor(const std::string& text, std::string origin_)
      : origin(std::move(origin_)) {
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t nl = text.find('\n', start);
      if (nl == std::string::npos) {
        if (start < text.size()) lines.push_back(text.substr(start));
        break;
      }
      lines.push_back(text.substr(start, nl - start));
      start = nl + 1;
    }
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(origin + ": " + what);
  }

  const std::string& next() {
    if (pos >= lines.size()) fail("unexpected end of file");
    return lines[pos++];
  }

  void expect(const std::string& want) {
    const std::string& got = next();
    if (got != want)
      fail("expected '" + want + "', got '" + got + "'");
  }
};

double parse_double(const std::string& token, const LineCursor& cur) {
  const char* begin = token.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end != begin + token.size() || token.empty())
    cur.fail("bad number '" + token + "'");
  return v;
}

long parse_long(const std::string& token, const LineCursor& cur) {
  long v = 0;
  auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc() || p != token.data() + token.size())
    cur.fail("bad integer '" + token + "'");
  return v;
}

// ---------------------------------------------------------------------------
// sample files

std::string format_cloud_rows(const icptraj::geom::PointCloud& cloud) {
  std::string out;
  for (int i = 0; i < cloud.size(); ++i) {
    out += format_g17(cloud.points[i].x()) + ' ' +
           format_g17(cloud.points[i].y()) + ' ' +
           format_g17(cloud.points[i].z()) + ' ' +
           (cloud.is_valid(i) ? '1' : '0');
    if (!cloud.features.empty())
      for (Eigen::Index c = 0; c < cloud.features[i].size(); ++c)
        out += ' ' + format_g17(cloud.features[i](c));
    out += '\n';
  }
  return out;
}

icptraj::geom::PointCloud parse_cloud_rows(LineCursor& cur, int n, int f) {
  icptraj::geom::PointCloud cloud;
  for (int i = 0; i < n; ++i) {
    std::vector<std::string> tok = split_ws(cur.next());
    if (static_cast<int>(tok.size()) != 4 + f)
      cur.fail("cloud row has " + std::to_string(tok.size()) +
               " fields, want " + std::to_string(4 + f));
    cloud.points.emplace_back(parse_double(tok[0], cur),
                              parse_double(tok[1], cur),
                              parse_double(tok[2], cur));
    long m = parse_long(tok[3], cur);
    if (m != 0 && m != 1) cur.fail("mask flag must be 0 or 1");
    cloud.mask.push_back(static_cast<std::uint8_t>(m));
    if (f > 0) {
      Eigen::VectorXd feat(f);
      for (int c = 0; c < f; ++c) feat(c) = parse_double(tok[4 + c], cur);
      cloud.features.push_back(std::move(feat));
    }
  }
  return cloud;
}

std::string serialize_sample(const icptraj::data::RegistrationSample& s) {
  std::string out = "icptraj.sample v1\n";
  out += "tag " + s.tag + '\n';
  out += "points " + std::to_string(s.src.size()) + '\n';
  out += "features " + std::to_string(s.src.feature_dim()) + '\n';
  out += "gt";
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c)
      out += ' ' + format_g17(s.gt_transform.rotation(r, c));
    out += ' ' + format_g17(s.gt_transform.translation(r));
  }
  out += "\nsrc\n" + format_cloud_rows(s.src);
  out += "tgt\n" + format_cloud_rows(s.tgt);
  out += "end sample\n";
  return out;
}

icptraj::data::RegistrationSample parse_sample(const fs::path& path) {
  LineCursor cur(read_text_file(path), path.string());
  cur.expect("icptraj.sample v1");

  icptraj::data::RegistrationSample s;
  std::vector<std::string> tag_tok = split_ws(cur.next());
  if (tag_tok.size() != 2 || tag_tok[0] != "tag") cur.fail("expected tag line");
  s.tag = tag_tok[1];

  auto keyed_int = [&](const char* key) {
    std::vector<std::string> tok = split_ws(cur.next());
    if (tok.size() != 2 || tok[0] != key)
      cur.fail(std::string("expected '") + key + " <count>' line");
    long v = parse_long(tok[1], cur);
    if (v < 0) cur.fail(std::string("negative ") + key + " count");
    return static_cast<int>(v);
  };
  int n = keyed_int("points");
  int f = keyed_int("features");

  std::vector<std::string> gt_tok = split_ws(cur.next());
  if (gt_tok.size() != 13 || gt_tok[0] != "gt")
    cur.fail("expected 'gt' line with 12 values");
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c)
      s.gt_transform.rotation(r, c) = parse_double(gt_tok[1 + r * 4 + c], cur);
    s.gt_transform.translation(r) = parse_double(gt_tok[1 + r * 4 + 3], cur);
  }

  cur.expect("src");
  s.src = parse_cloud_rows(cur, n, f);
  cur.expect("tgt");
  s.tgt = parse_cloud_rows(cur, n, f);
  cur.expect("end sample");
  return s;
}

// ---------------------------------------------------------------------------
// manifests

struct ManifestEntry {
  std::string split;
  std::string file;
};

std::string serialize_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out = "icptraj.manifest v1\n";
  out += "entries " + std::to_string(entries.size()) + '\n';
  for (const auto& e : entries) out += e.split + ' ' + e.file + '\n';
  out += "end manifest\n";
  return out;
}

std::vector<ManifestEntry> parse_manifest(const fs::path& path) {
  LineCursor cur(read_text_file(path), path.string());
  cur.expect("icptraj.manifest v1");
  std::vector<std::string> head = split_ws(cur.next());
  if (head.size() != 2 || head[0] != "entries")
    cur.fail("expected 'entries <count>' line");
  long n = parse_long(head[1], cur);
  if (n < 0) cur.fail("negative entry count");
  std::vector<ManifestEntry> entries;
  for (long i = 0; i < n; ++i) {
    std::vector<std::string> tok = split_ws(cur.next());
    if (tok.size() != 2) cur.fail("manifest entry needs '<split> <file>'");
    entries.push_back({tok[0], tok[1]});
  }
  cur.expect("end manifest");
  return entries;
}

std::vector<ManifestEntry> entries_for_split(const fs::path& dir,
                                             const std::string& split) {
  std::vector<ManifestEntry> all = parse_manifest(dir / "manifest.txt");
  if (split == "all") return all;
  std::vector<ManifestEntry> out;
  for (auto& e : all)
    if (e.split == split) out.push_back(std::move(e));
  if (out.empty())
    throw InvalidInputError("no '" + split + "' entries in " +
                            (dir / "manifest.txt").string());
  return out;
}

std::string stem_of(const std::string& file) {
  return fs::path(file).stem().string();
}

// ---------------------------------------------------------------------------
// enum words

icptraj::icp::Variant variant_from_word(const std::string& word) {
  if (word == "p2p") return icptraj::icp::Variant::PointToPoint;
  if (word == "p2l") return icptraj::icp::Variant::PointToPlane;
  if (word == "gicp") return icptraj::icp::Variant::Generalized;
  throw InvalidInputError("unknown variant '" + word + "'");
}

icptraj::probe::HintMode hints_from_word(const std::string& word) {
  using icptraj::probe::HintMode;
  if (word == "p2") return HintMode::P2;
  if (word == "p12") return HintMode::P12;
  if (word == "p1i") return HintMode::P1I;
  if (word == "p1i2") return HintMode::P1I2;
  throw InvalidInputError("unknown hint mode '" + word + "'");
}

icptraj::nar::ProcessorKind processor_from_word(const std::string& word) {
  if (word == "triplet_mpnn") return icptraj::nar::ProcessorKind::TripletMPNN;
  if (word == "mpnn") return icptraj::nar::ProcessorKind::MPNN;
  throw InvalidInputError("unknown processor '" + word + "'");
}

// ---------------------------------------------------------------------------
// commands

struct GenDataArgs {
  std::string out;
  std::uint64_t seed = 1;
  int n_points = 32;
  double coord_range = 40.0;
  double max_rot_deg = 10.0;
  double max_trans = 5.0;
  int train = 8;
  int eval = 2;
  int test = 2;
  std::string centroid_file;
  double pair_distance = -1.0;
  double pair_tolerance = 1.0;
  int fit_nodes = 0;
};

int cmd_gen_data(const GenDataArgs& a, bool timings) {
  Timer timer;
  fs::create_directories(a.out);

  std::vector<icptraj::data::RegistrationSample> samples;
  if (!a.centroid_file.empty()) {
    icptraj::data::CentroidLoadOptions opt;
    opt.pair_distance = a.pair_distance;
    opt.pair_tolerance = a.pair_tolerance;
    samples = icptraj::data::load_centroid_scans(a.centroid_file, opt);
    if (a.fit_nodes > 0) {
      icptraj::Rng fit_rng = icptraj::derive_stream(a.seed, "fit");
      for (auto& s : samples) {
        s.src = icptraj::probe::fit_node_count(s.src, a.fit_nodes,
                                               fit_rng.next_u64());
        s.tgt = icptraj::probe::fit_node_count(s.tgt, a.fit_nodes,
                                               fit_rng.next_u64());
      }
    }
  } else {
    int total = a.train + a.eval + a.test;
    icptraj::Rng gen_rng = icptraj::derive_stream(a.seed, "gen-data");
    for (int i = 0; i < total; ++i)
      samples.push_back(icptraj::data::gen_synthetic_pair(
          a.n_points, a.coord_range, a.max_rot_deg, a.max_trans,
          gen_rng.next_u64()));
  }

  std::map<std::string, std::string> file_of_tag;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu.txt", i);
    if (!file_of_tag.emplace(samples[i].tag, name).second)
      throw InvalidInputError("duplicate sample tag '" + samples[i].tag + "'");
    write_text_atomic(fs::path(a.out) / name, serialize_sample(samples[i]));
  }

  icptraj::data::DatasetSplit split =
      icptraj::data::split_dataset(samples, a.train, a.eval, a.test, a.seed);
  std::vector<ManifestEntry> entries;
  auto add = [&](const char* split_name, const auto& part) {
    for (const auto& s : part)
      entries.push_back({split_name, file_of_tag.at(s.tag)});
  };
  add("train", split.train);
  add("eval", split.eval);
  add("test", split.test);
  write_text_atomic(fs::path(a.out) / "manifest.txt",
                    serialize_manifest(entries));

  std::cerr << "gen-data: wrote " << samples.size() << " samples + manifest to "
            << a.out << '\n';
  report_timing(timings, "gen-data", timer);
  return 0;
}

struct TraceArgs {
  std::string data;
  std::string out;
  std::string split = "train";
  std::string variant = "p2p";
  std::string hints = "p12";
  bool gt_optimisation = false;
  int max_iter = 50;
  double tolerance = 1e-6;
  int k_neighbors = 5;
};

int cmd_trace(const TraceArgs& a, bool timings) {
  Timer timer;
  fs::create_directories(a.out);

  icptraj::icp::IcpConfig icp_cfg;
  icp_cfg.variant = variant_from_word(a.variant);
  icp_cfg.max_iterations = a.max_iter;
  icp_cfg.tolerance = a.tolerance;
  icp_cfg.k_neighbors = a.k_neighbors;
  icptraj::probe::RecorderConfig rec_cfg;
  rec_cfg.mode = hints_from_word(a.hints);
  rec_cfg.gt_optimisation = a.gt_optimisation;

  std::vector<ManifestEntry> out_entries;
  for (const ManifestEntry& e : entries_for_split(a.data, a.split)) {
    icptraj::data::RegistrationSample sample =
        parse_sample(fs::path(a.data) / e.file);
    icptraj::probe::Trajectory traj = icptraj::probe::record_trajectory(
        sample.src, sample.tgt, icp_cfg, rec_cfg, sample.gt_transform);
    std::string name = stem_of(e.file) + ".traj";
    write_text_atomic(fs::path(a.out) / name,
                      icptraj::traj_io::serialize_trajectory(traj));
    out_entries.push_back({e.split, name});
  }
  write_text_atomic(fs::path(a.out) / "manifest.txt",
                    serialize_manifest(out_entries));

  std::cerr << "trace: wrote " << out_entries.size() << " trajectories to "
            << a.out << '\n';
  report_timing(timings, "trace", timer);
  return 0;
}

struct TrainArgs {
  std::string traces;
  std::string out;
  int hidden = 256;
  std::string processor = "triplet_mpnn";
  double teacher_prob = 0.1;
  double learn_rate = 1e-3;
  int batch_size = 8;
  int steps = 10000;
  double grad_clip = 1.0;
  double scalar_loss_scale = 1.0;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a, bool timings) {
  Timer timer;
  fs::create_directories(a.out);

  std::vector<icptraj::probe::Trajectory> trajs;
  for (const ManifestEntry& e : entries_for_split(a.traces, "all"))
    trajs.push_back(icptraj::probe::normalize(
        icptraj::traj_io::deserialize_trajectory(
            read_text_file(fs::path(a.traces) / e.file))));
  if (trajs.empty())
    throw InvalidInputError("train: no trajectories in " + a.traces);

  icptraj::nar::ModelConfig cfg;
  cfg.hidden_dim = a.hidden;
  cfg.processor = processor_from_word(a.processor);
  cfg.teacher_prob = a.teacher_prob;
  cfg.learn_rate = a.learn_rate;
  cfg.batch_size = a.batch_size;
  cfg.train_steps = a.steps;
  cfg.grad_clip = a.grad_clip;
  cfg.scalar_loss_scale = a.scalar_loss_scale;
  cfg.seed = a.seed;

  icptraj::nar::Model model(trajs.front().schema, cfg);
  std::string history = "step,loss,grad_norm,clipped_norm\n";
  icptraj::nar::train(
      model, trajs, [&](const icptraj::nar::TrainObservation& obs) {
        history += std::to_string(obs.step) + ',' + format_g17(obs.loss) +
                   ',' + format_g17(obs.grad_norm) + ',' +
                   format_g17(obs.clipped_norm) + '\n';
      });

  icptraj::nar::save_checkpoint(fs::path(a.out) / "checkpoint.txt", model);
  write_text_atomic(fs::path(a.out) / "history.csv", history);

  std::cerr << "train: " << a.steps << " steps on " << trajs.size()
            << " trajectories, checkpoint + history in " << a.out << '\n';
  report_timing(timings, "train", timer);
  return 0;
}

struct EvalArgs {
  std::string data;
  std::string out;
  std::string split = "eval";
  std::string mode = "classical";
  std::string checkpoint;
  std::string benchmark = "synthetic";
  std::string reference = "both";
  std::string variant = "p2p";
  int max_iter = 50;
  double tolerance = 1e-6;
  int k_neighbors = 5;
};

int cmd_eval(const EvalArgs& a, bool timings) {
  Timer timer;
  fs::create_directories(a.out);

  std::vector<icptraj::data::RegistrationSample> samples;
  for (const ManifestEntry& e : entries_for_split(a.data, a.split))
    samples.push_back(parse_sample(fs::path(a.data) / e.file));

  icptraj::icp::IcpConfig icp_cfg;
  icp_cfg.variant = variant_from_word(a.variant);
  icp_cfg.max_iterations = a.max_iter;
  icp_cfg.tolerance = a.tolerance;
  icp_cfg.k_neighbors = a.k_neighbors;
  icptraj::probe::RecorderConfig rec_cfg;

  std::optional<icptraj::nar::Model> model;
  if (a.mode == "nar") {
    if (a.checkpoint.empty())
      throw InvalidInputError("eval: --checkpoint is required for nar mode");
    model.emplace(icptraj::nar::load_checkpoint(a.checkpoint));
  } else if (a.mode != "classical") {
    throw InvalidInputError("unknown eval mode '" + a.mode + "'");
  }

  auto evaluate = [&](icptraj::eval::Reference ref) {
    icptraj::eval::EvalReport rep =
        model ? icptraj::eval::evaluate_nar(samples, *model, icp_cfg, rec_cfg,
                                            ref)
              : icptraj::eval::evaluate_classical(samples, icp_cfg, rec_cfg,
                                                  ref);
    if (!timings) {
      // Wall-clock runtimes are machine noise; zero them so reruns are
      // byte-identical unless --timings opts in.
      for (auto& s : rep.scores) s.runtime = 0.0;
      rep.summary["runtime"] = icptraj::eval::Aggregate{};
    }
    return rep;
  };

  std::vector<std::pair<std::string, icptraj::eval::EvalReport>> families;
  if (a.reference == "algorithm" || a.reference == "both")
    families.emplace_back("algorithm",
                          evaluate(icptraj::eval::Reference::Algorithm));
  if (a.reference == "gt" || a.reference == "both")
    families.emplace_back("ground_truth",
                          evaluate(icptraj::eval::Reference::GroundTruth));
  if (families.empty())
    throw InvalidInputError("unknown reference '" + a.reference + "'");

  icptraj::eval::write_scores_csv(fs::path(a.out) / "scores.csv", families);
  icptraj::eval::write_summary_json(fs::path(a.out) / "summary.json",
                                    a.benchmark, families);

  std::cerr << "eval: " << samples.size() << " samples, " << families.size()
            << " metric families, reports in " << a.out << '\n';
  report_timing(timings, "eval", timer);
  return 0;
}

struct InferArgs {
  std::string data;
  std::string out;
  std::string split = "test";
  std::string tag;
  std::string checkpoint;
  int max_iter = 50;
};

std::string serialize_prediction(const icptraj::data::RegistrationSample& s,
                                 const icptraj::eval::PredictedRun& run) {
  std::string out = "icptraj.prediction v1\n";
  out += "tag " + s.tag + '\n';
  out += "steps " + std::to_string(run.steps) + '\n';
  out += "terminated " + std::string(run.terminated ? "1" : "0") + '\n';
  out += "final_src " + std::to_string(run.final_src.size()) + '\n';
  out += format_cloud_rows(run.final_src);
  out += "final_tgt " + std::to_string(run.final_tgt.size()) + '\n';
  out += format_cloud_rows(run.final_tgt);

  std::string rows;
  int count = 0;
  const Eigen::MatrixXd& m = run.correspondences.matrix;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      if (m(i, j) != 0.0) {
        rows += std::to_string(i) + ' ' + std::to_string(j) + ' ' +
                format_g17(run.correspondences.distances(i, j)) + '\n';
        ++count;
      }
  out += "correspondences " + std::to_string(count) + '\n' + rows;
  out += "end prediction\n";
  return out;
}

int cmd_infer(const InferArgs& a, bool timings) {
  Timer timer;
  fs::create_directories(a.out);

  icptraj::nar::Model model = icptraj::nar::load_checkpoint(a.checkpoint);
  int written = 0;
  for (const ManifestEntry& e : entries_for_split(a.data, a.split)) {
    icptraj::data::RegistrationSample sample =
        parse_sample(fs::path(a.data) / e.file);
    if (!a.tag.empty() && sample.tag != a.tag) continue;
    icptraj::eval::PredictedRun run =
        icptraj::eval::run_nar(sample, model, a.max_iter);
    write_text_atomic(fs::path(a.out) / (stem_of(e.file) + ".pred"),
                      serialize_prediction(sample, run));
    ++written;
  }
  if (written == 0)
    throw InvalidInputError("infer: no samples matched tag '" + a.tag + "'");

  std::cerr << "infer: wrote " << written << " predictions to " << a.out
            << '\n';
  report_timing(timings, "infer", timer);
  return 0;
}

struct ReportArgs {
  std::vector<std::string> summaries;
  std::string out;
};

int cmd_report(const ReportArgs& a, bool timings) {
  Timer timer;
  std::string text = "icptraj report\n";
  for (const std::string& file : a.summaries) {
    nlohmann::json root;
    try {
      root = nlohmann::json::parse(read_text_file(file));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(file + ": " + e.what());
    }
    for (const auto& [bench, fams] : root.items()) {
      text += "benchmark " + bench + '\n';
      for (const auto& [family, body] : fams.items()) {
        text += "  family " + family + " samples " +
                body.at("samples").dump() + " step_count_mismatches " +
                body.at("step_count_mismatches").dump() + '\n';
        for (const auto& [metric, agg] : body.at("metrics").items())
          text += "    " + metric + " median " +
                  format_g17(agg.at("median").get<double>()) + " q1 " +
                  format_g17(agg.at("q1").get<double>()) + " q3 " +
                  format_g17(agg.at("q3").get<double>()) + " iqr " +
                  format_g17(agg.at("iqr").get<double>()) + " outliers " +
                  agg.at("outliers").dump() + '\n';
      }
    }
  }
  write_text_atomic(a.out, text);
  std::cerr << "report: merged " << a.summaries.size() << " summaries into "
            << a.out << '\n';
  report_timing(timings, "report", timer);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"icptraj: ICP trajectory recording and neural execution"};
  app.require_subcommand(1);
  bool timings = false;
  app.add_flag("--timings", timings,
               "print wall-clock timings to stderr (eval: keep per-sample "
               "runtimes in reports)");
  // Config parsing happens on the root app: pass --config before the
  // command; keys live in [command] sections. Command-line flags win.
  app.set_config("--config", "",
                 "INI config file with [command] sections; command-line "
                 "flags take precedence");
  app.allow_config_extras(false);

  auto configure = [](CLI::App* sub) { return sub; };

  GenDataArgs gd;
  CLI::App* gen = configure(app.add_subcommand(
      "gen-data", "generate synthetic pairs (or import centroid scans) and "
                  "split manifests"));
  gen->add_option("--out", gd.out, "output directory")->required();
  gen->add_option("--seed", gd.seed, "master seed");
  gen->add_option("--n-points", gd.n_points, "points per synthetic cloud");
  gen->add_option("--coord-range", gd.coord_range, "coordinate box half-width");
  gen->add_option("--max-rot-deg", gd.max_rot_deg, "rotation bound (degrees)");
  gen->add_option("--max-trans", gd.max_trans, "translation bound per axis");
  gen->add_option("--train", gd.train, "train split count");
  gen->add_option("--eval", gd.eval, "eval split count");
  gen->add_option("--test", gd.test, "test split count");
  gen->add_option("--centroid-file", gd.centroid_file,
                  "import pairs from a centroid scan file instead");
  gen->add_option("--pair-distance", gd.pair_distance,
                  "keep centroid pairs near this scan distance (<0: all)");
  gen->add_option("--pair-tolerance", gd.pair_tolerance,
                  "tolerance around --pair-distance");
  gen->add_option("--fit-nodes", gd.fit_nodes,
                  "pad/subsample centroid clouds to this node count");

  TraceArgs tr;
  CLI::App* trace = configure(
      app.add_subcommand("trace", "record ICP trajectories for a split"));
  trace->add_option("--data", tr.data, "dataset directory")->required();
  trace->add_option("--out", tr.out, "output directory")->required();
  trace->add_option("--split", tr.split, "train|eval|test|all");
  trace->add_option("--variant", tr.variant, "p2p|p2l|gicp");
  trace->add_option("--hints", tr.hints, "p2|p12|p1i|p1i2");
  trace->add_flag("--gt-optimisation", tr.gt_optimisation,
                  "supervise outputs with ground-truth targets");
  trace->add_option("--max-iter", tr.max_iter, "iteration cap");
  trace->add_option("--tolerance", tr.tolerance, "convergence tolerance");
  trace->add_option("--k-neighbors", tr.k_neighbors,
                    "neighborhood size for surface statistics");

  TrainArgs tn;
  CLI::App* train = configure(
      app.add_subcommand("train", "train the neural executor on trajectories"));
  train->add_option("--traces", tn.traces, "trace directory")->required();
  train->add_option("--out", tn.out, "output directory")->required();
  train->add_option("--hidden", tn.hidden, "hidden dimension");
  train->add_option("--processor", tn.processor, "triplet_mpnn|mpnn");
  train->add_option("--teacher-prob", tn.teacher_prob,
                    "ground-truth hint probability after step 0");
  train->add_option("--lr", tn.learn_rate, "Adam learning rate");
  train->add_option("--batch-size", tn.batch_size, "batch size");
  train->add_option("--steps", tn.steps, "optimizer steps");
  train->add_option("--grad-clip", tn.grad_clip, "global gradient norm clip");
  train->add_option("--scalar-loss-scale", tn.scalar_loss_scale,
                    "alpha on the scalar loss term");
  train->add_option("--seed", tn.seed, "training seed");

  EvalArgs ev;
  CLI::App* eval = configure(
      app.add_subcommand("eval", "score classical or neural runs on a split"));
  eval->add_option("--data", ev.data, "dataset directory")->required();
  eval->add_option("--out", ev.out, "output directory")->required();
  eval->add_option("--split", ev.split, "train|eval|test|all");
  eval->add_option("--mode", ev.mode, "classical|nar");
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint for nar mode");
  eval->add_option("--benchmark", ev.benchmark, "benchmark key in the JSON");
  eval->add_option("--reference", ev.reference, "algorithm|gt|both");
  eval->add_option("--variant", ev.variant, "p2p|p2l|gicp");
  eval->add_option("--max-iter", ev.max_iter, "iteration cap");
  eval->add_option("--tolerance", ev.tolerance, "convergence tolerance");
  eval->add_option("--k-neighbors", ev.k_neighbors,
                   "neighborhood size for surface statistics");

  InferArgs in;
  CLI::App* infer = configure(app.add_subcommand(
      "infer", "write predicted clouds and correspondences for pairs"));
  infer->add_option("--data", in.data, "dataset directory")->required();
  infer->add_option("--out", in.out, "output directory")->required();
  infer->add_option("--split", in.split, "train|eval|test|all");
  infer->add_option("--tag", in.tag, "only the sample with this tag");
  infer->add_option("--checkpoint", in.checkpoint, "model checkpoint")
      ->required();
  infer->add_option("--max-iter", in.max_iter,
                    "termination budget (cap is 4x this)");

  ReportArgs rp;
  CLI::App* report = configure(app.add_subcommand(
      "report", "merge eval summary JSONs into a text table"));
  report->add_option("--summaries", rp.summaries, "summary.json files")
      ->required()
      ->expected(-1);
  report->add_option("--out", rp.out, "output text file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gd, timings);
    if (trace->parsed()) return cmd_trace(tr, timings);
    if (train->parsed()) return cmd_train(tn, timings);
    if (eval->parsed()) return cmd_eval(ev, timings);
    if (infer->parsed()) return cmd_infer(in, timings);
    if (report->parsed()) return cmd_report(rp, timings);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
