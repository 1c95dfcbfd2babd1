#include "icptraj/trajectory_io.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <string_view>
#include <system_error>
#include <vector>

#include "icptraj/error.hpp"

namespace icptraj::traj_io {

using probe::Kind;
using probe::Location;
using probe::ProbeSpec;
using probe::Stage;
using probe::Trajectory;
using probe::TrajectorySchema;
using probe::TrajectoryStep;

namespace {

constexpr std::string_view kMagic = "icptraj.trajectory v1";

const char* variant_name(icp::Variant v) {
  switch (v) {
    case icp::Variant::PointToPoint:
      return "point_to_point";
    case icp::Variant::PointToPlane:
      return "point_to_plane";
    case icp::Variant::Generalized:
      return "generalized";
  }
  return "point_to_point";
}

icp::Variant parse_variant(std::string_view s) {
  if (s == "point_to_point") return icp::Variant::PointToPoint;
  if (s == "point_to_plane") return icp::Variant::PointToPlane;
  if (s == "generalized") return icp::Variant::Generalized;
  throw ParseError("unknown ICP variant '" + std::string(s) + "'");
}

const char* mode_name(probe::HintMode m) {
  switch (m) {
    case probe::HintMode::P2:
      return "p2";
    case probe::HintMode::P12:
      return "p12";
    case probe::HintMode::P1I:
      return "p1i";
    case probe::HintMode::P1I2:
      return "p1i2";
  }
  return "p12";
}

probe::HintMode parse_mode(std::string_view s) {
  if (s == "p2") return probe::HintMode::P2;
  if (s == "p12") return probe::HintMode::P12;
  if (s == "p1i") return probe::HintMode::P1I;
  if (s == "p1i2") return probe::HintMode::P1I2;
  throw ParseError("unknown hint mode '" + std::string(s) + "'");
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::Input:
      return "input";
    case Stage::Hint:
      return "hint";
    case Stage::Output:
      return "output";
  }
  return "hint";
}

const char* location_name(Location l) {
  switch (l) {
    case Location::Node:
      return "node";
    case Location::Edge:
      return "edge";
    case Location::Graph:
      return "graph";
  }
  return "node";
}

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::Scalar:
      return "scalar";
    case Kind::Mask:
      return "mask";
    case Kind::Categorical:
      return "categorical";
  }
  return "scalar";
}

/// Whitespace-separated tokens of one line.
std::vector<std::string_view> split_tokens(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && line[i] == ' ') ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

double parse_double_token(std::string_view tok, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
    throw ParseError("malformed number '" + std::string(tok) + "' in " +
                     where);
  return v;
}

long parse_int_token(std::string_view tok, const std::string& where) {
  long v = 0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size())
    throw ParseError("malformed integer '" + std::string(tok) + "' in " +
                     where);
  return v;
}

class LineReader {
 public:
  explicit LineReader(const std::string& text) : text_(text) {}

  /// Next line, or throws ParseError naming `expected`.
  std::string_view require_line(const std::string& expected) {
    std::string_view line;
    while (pos_ < text_.size()) {
      std::size_t nl = text_.find('\n', pos_);
      if (nl == std::string::npos) nl = text_.size();
      line = std::string_view(text_).substr(pos_, nl - pos_);
      pos_ = nl + 1;
      if (!line.empty()) return line;
    }
    throw ParseError("unexpected end of file: missing " + expected);
  }

  /// Consumes one line and checks it equals `literal` verbatim.
  void expect_literal(const std::string& literal) {
    std::string_view line = require_line("'" + literal + "'");
    if (line != literal)
      throw ParseError("expected '" + literal + "', found '" +
                       std::string(line) + "'");
  }

  /// Consumes a `key v0 v1 ...` line and returns the value tokens.
  std::vector<std::string_view> expect_keyed(const std::string& key) {
    std::string_view line = require_line("'" + key + "'");
    auto tokens = split_tokens(line);
    if (tokens.empty() || tokens[0] != key)
      throw ParseError("expected '" + key + "', found '" + std::string(line) +
                       "'");
    tokens.erase(tokens.begin());
    return tokens;
  }

  bool at_end() {
    while (pos_ < text_.size()) {
      std::size_t nl = text_.find('\n', pos_);
      if (nl == std::string::npos) nl = text_.size();
      if (nl > pos_) return false;
      pos_ = nl + 1;
    }
    return true;
  }

 private:
  const std::string& text_;
  std::size_t pos_ = 0;
};

void append_g17(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void append_values_block(std::string& out, const std::string& name,
                         const Eigen::ArrayXd& arr) {
  out += name;
  out += ' ';
  out += std::to_string(arr.size());
  out += '\n';
  for (Eigen::Index k = 0; k < arr.size(); ++k) {
    if (k > 0) out += ' ';
    append_g17(out, arr[k]);
  }
  out += '\n';
}

void append_step(std::string& out, const TrajectorySchema& schema, Stage stage,
                 const TrajectoryStep& step) {
  for (const ProbeSpec* spec : schema.stage_probes(stage))
    append_values_block(out, spec->name, step.at(spec->name));
}

Eigen::ArrayXd read_values_block(LineReader& reader, const ProbeSpec& spec,
                                 int node_count, const std::string& section) {
  auto header = reader.expect_keyed(spec.name);
  if (header.size() != 1)
    throw ParseError("probe '" + spec.name + "' in section '" + section +
                     "' needs a single count");
  long count = parse_int_token(header[0], "probe '" + spec.name + "'");
  const std::size_t expected = TrajectorySchema::flat_size(spec, node_count);
  if (count < 0 || static_cast<std::size_t>(count) != expected)
    throw ParseError("probe '" + spec.name + "' declares " +
                     std::to_string(count) + " values, expected " +
                     std::to_string(expected));
  std::string_view line = reader.require_line("values of probe '" + spec.name +
                                              "' in section '" + section +
                                              "'");
  auto tokens = split_tokens(line);
  if (tokens.size() != expected)
    throw ParseError("probe '" + spec.name + "' carries " +
                     std::to_string(tokens.size()) + " values, expected " +
                     std::to_string(expected));
  Eigen::ArrayXd out(static_cast<Eigen::Index>(expected));
  for (std::size_t k = 0; k < expected; ++k)
    out[k] = parse_double_token(tokens[k], "probe '" + spec.name + "'");
  return out;
}

TrajectoryStep read_step(LineReader& reader, const TrajectorySchema& schema,
                         Stage stage, int node_count,
                         const std::string& section) {
  TrajectoryStep step;
  for (const ProbeSpec* spec : schema.stage_probes(stage))
    step.values[spec->name] = read_values_block(reader, *spec, node_count,
                                                section);
  return step;
}

std::vector<std::uint8_t> parse_mask_tokens(
    const std::vector<std::string_view>& tokens, int node_count,
    const std::string& name) {
  if (tokens.size() != static_cast<std::size_t>(node_count))
    throw ParseError(name + " needs exactly node_count entries");
  std::vector<std::uint8_t> out;
  out.reserve(tokens.size());
  for (auto tok : tokens) {
    long v = parse_int_token(tok, name);
    if (v != 0 && v != 1) throw ParseError(name + " entries must be 0 or 1");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

ProbeSpec parse_probe_tokens(const std::vector<std::string_view>& tokens) {
  if (tokens.size() != 6)
    throw ParseError("probe table rows need 6 fields");
  ProbeSpec spec;
  spec.name = std::string(tokens[0]);
  std::string_view stage = tokens[1], loc = tokens[2], kind = tokens[3];
  if (stage == "input")
    spec.stage = Stage::Input;
  else if (stage == "hint")
    spec.stage = Stage::Hint;
  else if (stage == "output")
    spec.stage = Stage::Output;
  else
    throw ParseError("unknown probe stage '" + std::string(stage) + "'");
  if (loc == "node")
    spec.location = Location::Node;
  else if (loc == "edge")
    spec.location = Location::Edge;
  else if (loc == "graph")
    spec.location = Location::Graph;
  else
    throw ParseError("unknown probe location '" + std::string(loc) + "'");
  if (kind == "scalar")
    spec.kind = Kind::Scalar;
  else if (kind == "mask")
    spec.kind = Kind::Mask;
  else if (kind == "categorical")
    spec.kind = Kind::Categorical;
  else
    throw ParseError("unknown probe kind '" + std::string(kind) + "'");
  spec.dim = static_cast<int>(parse_int_token(tokens[4], "probe dim"));
  spec.categories =
      static_cast<int>(parse_int_token(tokens[5], "probe categories"));
  return spec;
}

}  // namespace

std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_probe_row(const ProbeSpec& spec) {
  return "probe " + spec.name + ' ' + stage_name(spec.stage) + ' ' +
         location_name(spec.location) + ' ' + kind_name(spec.kind) + ' ' +
         std::to_string(spec.dim) + ' ' + std::to_string(spec.categories);
}

ProbeSpec parse_probe_row(const std::string& line) {
  auto tokens = split_tokens(line);
  if (tokens.empty() || tokens[0] != "probe")
    throw ParseError("expected a probe table row, got '" + line + "'");
  tokens.erase(tokens.begin());
  return parse_probe_tokens(tokens);
}

std::string serialize_trajectory(const Trajectory& traj) {
  traj.check();
  std::string out;
  out.reserve(1 << 16);
  out += kMagic;
  out += '\n';

  out += "begin schema\n";
  out += "node_count " + std::to_string(traj.node_count) + '\n';
  out += std::string("variant ") + variant_name(traj.variant) + '\n';
  out += std::string("hint_mode ") + mode_name(traj.hint_mode) + '\n';
  out += "t_max " + std::to_string(traj.t_max) + '\n';
  out += "tolerance ";
  append_g17(out, traj.tolerance);
  out += '\n';
  out += "gt_optimisation " + std::to_string(traj.gt_optimisation ? 1 : 0) +
         '\n';
  out += "normalized " + std::to_string(traj.normalized ? 1 : 0) + '\n';
  out += "src_mask";
  for (auto m : traj.src_mask) out += m ? " 1" : " 0";
  out += '\n';
  out += "tgt_mask";
  for (auto m : traj.tgt_mask) out += m ? " 1" : " 0";
  out += '\n';
  out += "probes " + std::to_string(traj.schema.probes.size()) + '\n';
  for (const auto& spec : traj.schema.probes) out += format_probe_row(spec) + '\n';
  out += "end schema\n";

  out += "begin input\n";
  append_step(out, traj.schema, Stage::Input, traj.input);
  out += "end input\n";

  out += "begin hints " + std::to_string(traj.hints.size()) + '\n';
  for (std::size_t k = 0; k < traj.hints.size(); ++k) {
    out += "begin hint " + std::to_string(k) + '\n';
    append_step(out, traj.schema, Stage::Hint, traj.hints[k]);
    out += "end hint " + std::to_string(k) + '\n';
  }
  out += "end hints\n";

  out += "begin output\n";
  append_step(out, traj.schema, Stage::Output, traj.output);
  out += "end output\n";

  out += "begin normalization\n";
  out += "squash_c ";
  append_g17(out, traj.norm.squash_c);
  out += '\n';
  out += "scales " + std::to_string(traj.norm.scales.size()) + '\n';
  for (const auto& [name, p] : traj.norm.scales) {
    out += "scale " + name + ' ';
    append_g17(out, p.min);
    out += ' ';
    append_g17(out, p.max);
    out += ' ' + std::to_string(p.scaled_channels) + '\n';
  }
  out += "end normalization\n";

  if (traj.gt_transform) {
    out += "begin gt_transform\n";
    out += "rotation";
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        out += ' ';
        append_g17(out, traj.gt_transform->rotation(r, c));
      }
    out += '\n';
    out += "translation";
    for (int c = 0; c < 3; ++c) {
      out += ' ';
      append_g17(out, traj.gt_transform->translation[c]);
    }
    out += '\n';
    out += "end gt_transform\n";
  }

  out += "end trajectory\n";
  return out;
}

Trajectory deserialize_trajectory(const std::string& text) {
  LineReader reader(text);
  if (reader.require_line("magic line '" + std::string(kMagic) + "'") != kMagic)
    throw ParseError("not a trajectory document (bad magic line)");

  Trajectory traj;
  reader.expect_literal("begin schema");
  auto one = [&](const std::string& key) {
    auto tokens = reader.expect_keyed(key);
    if (tokens.size() != 1)
      throw ParseError("'" + key + "' needs exactly one value");
    return tokens[0];
  };
  traj.node_count =
      static_cast<int>(parse_int_token(one("node_count"), "node_count"));
  traj.variant = parse_variant(one("variant"));
  traj.hint_mode = parse_mode(one("hint_mode"));
  traj.t_max = static_cast<int>(parse_int_token(one("t_max"), "t_max"));
  traj.tolerance = parse_double_token(one("tolerance"), "tolerance");
  traj.gt_optimisation =
      parse_int_token(one("gt_optimisation"), "gt_optimisation") != 0;
  traj.normalized = parse_int_token(one("normalized"), "normalized") != 0;
  traj.src_mask = parse_mask_tokens(reader.expect_keyed("src_mask"),
                                    traj.node_count, "src_mask");
  traj.tgt_mask = parse_mask_tokens(reader.expect_keyed("tgt_mask"),
                                    traj.node_count, "tgt_mask");

  long probe_count = parse_int_token(one("probes"), "probes");
  std::vector<ProbeSpec> parsed;
  for (long k = 0; k < probe_count; ++k)
    parsed.push_back(parse_probe_tokens(reader.expect_keyed("probe")));
  reader.expect_literal("end schema");

  // Validate the embedded table against the canonical probe set; the
  // pointclouds row fixes the feature dimension.
  const ProbeSpec* pc = nullptr;
  for (const auto& spec : parsed)
    if (spec.name == "pointclouds") pc = &spec;
  if (pc == nullptr)
    throw SchemaError("probe table is missing 'pointclouds'");
  if (pc->dim < 6 || (pc->dim - 6) % 2 != 0)
    throw SchemaError("pointclouds probe has an invalid dimension " +
                      std::to_string(pc->dim));
  traj.schema = probe::make_schema((pc->dim - 6) / 2);
  if (parsed.size() != traj.schema.probes.size())
    throw SchemaError("probe table carries " + std::to_string(parsed.size()) +
                      " probes, expected " +
                      std::to_string(traj.schema.probes.size()));
  for (std::size_t k = 0; k < parsed.size(); ++k) {
    const ProbeSpec& got = parsed[k];
    const ProbeSpec* want = traj.schema.find(got.name);
    if (want == nullptr)
      throw SchemaError("unknown probe '" + got.name + "' in schema");
    if (got.stage != want->stage || got.location != want->location ||
        got.kind != want->kind || got.dim != want->dim ||
        got.categories != want->categories)
      throw SchemaError("probe '" + got.name +
                        "' does not match the known schema");
  }

  reader.expect_literal("begin input");
  traj.input = read_step(reader, traj.schema, Stage::Input, traj.node_count,
                         "input");
  reader.expect_literal("end input");

  auto hint_header = reader.expect_keyed("begin");
  if (hint_header.size() != 2 || hint_header[0] != "hints")
    throw ParseError("expected 'begin hints <count>'");
  long hint_count = parse_int_token(hint_header[1], "hints count");
  for (long k = 0; k < hint_count; ++k) {
    reader.expect_literal("begin hint " + std::to_string(k));
    traj.hints.push_back(read_step(reader, traj.schema, Stage::Hint,
                                   traj.node_count,
                                   "hint " + std::to_string(k)));
    reader.expect_literal("end hint " + std::to_string(k));
  }
  reader.expect_literal("end hints");

  reader.expect_literal("begin output");
  traj.output = read_step(reader, traj.schema, Stage::Output, traj.node_count,
                          "output");
  reader.expect_literal("end output");

  reader.expect_literal("begin normalization");
  traj.norm.squash_c = parse_double_token(one("squash_c"), "squash_c");
  long scale_count = parse_int_token(one("scales"), "scales");
  for (long k = 0; k < scale_count; ++k) {
    auto tokens = reader.expect_keyed("scale");
    if (tokens.size() != 4)
      throw ParseError("scale rows need 4 fields");
    std::string name(tokens[0]);
    const ProbeSpec* spec = traj.schema.find(name);
    if (spec == nullptr)
      throw SchemaError("scale parameters for unknown probe '" + name + "'");
    probe::ScaleParams p;
    p.min = parse_double_token(tokens[1], "scale " + name);
    p.max = parse_double_token(tokens[2], "scale " + name);
    p.scaled_channels =
        static_cast<int>(parse_int_token(tokens[3], "scale " + name));
    traj.norm.scales[name] = p;
  }
  reader.expect_literal("end normalization");

  std::string_view line =
      reader.require_line("section 'gt_transform' or 'end trajectory'");
  if (line == "begin gt_transform") {
    geom::RigidTransform gt;
    auto rot = reader.expect_keyed("rotation");
    if (rot.size() != 9) throw ParseError("rotation needs 9 values");
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c)
        gt.rotation(r, c) = parse_double_token(rot[r * 3 + c], "rotation");
    auto tr = reader.expect_keyed("translation");
    if (tr.size() != 3) throw ParseError("translation needs 3 values");
    for (int c = 0; c < 3; ++c)
      gt.translation[c] = parse_double_token(tr[c], "translation");
    traj.gt_transform = gt;
    reader.expect_literal("end gt_transform");
    reader.expect_literal("end trajectory");
  } else if (line != "end trajectory") {
    throw ParseError("expected 'end trajectory', found '" + std::string(line) +
                     "'");
  }
  if (!reader.at_end())
    throw ParseError("unexpected content after 'end trajectory'");

  traj.check();
  return traj;
}

void save_trajectory(const std::filesystem::path& path,
                     const Trajectory& traj) {
  std::string text = serialize_trajectory(traj);
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

Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw ParseError("cannot open trajectory file '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return deserialize_trajectory(text);
}

}  // namespace icptraj::traj_io
