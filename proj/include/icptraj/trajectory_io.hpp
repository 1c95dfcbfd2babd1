#pragma once

#include <filesystem>
#include <string>

#include "icptraj/probe.hpp"

namespace icptraj::traj_io {

/// One double as decimal text with 17 significant digits (round-trip exact).
std::string format_g17(double v);

/// One schema table row:
///   probe <name> <stage> <location> <kind> <dim> <categories>
/// Shared between trajectory files and model checkpoints.
std::string format_probe_row(const probe::ProbeSpec& spec);
/// Inverse of format_probe_row. Throws ParseError on malformed rows.
probe::ProbeSpec parse_probe_row(const std::string& line);

/// Sectioned text document, one trajectory per document. Sections appear in
/// the order schema, input, hints, output, normalization, gt_transform (the
/// last one only when the trajectory carries a ground-truth transform), and
/// the document closes with an explicit end-of-trajectory sentinel so any
/// truncation is detectable. Arrays are row-major, one probe per block.
/// Throws SchemaError when the trajectory fails its own check().
std::string serialize_trajectory(const probe::Trajectory& traj);

/// Inverse of serialize_trajectory. Throws ParseError on malformed or
/// truncated input (the message names the offending section or probe) and
/// SchemaError when the embedded probe table does not match the known
/// schema.
probe::Trajectory deserialize_trajectory(const std::string& text);

/// File wrappers around the string forms. Saving writes to a sibling
/// temporary and renames it into place.
void save_trajectory(const std::filesystem::path& path,
                     const probe::Trajectory& traj);
probe::Trajectory load_trajectory(const std::filesystem::path& path);

}  // namespace icptraj::traj_io
