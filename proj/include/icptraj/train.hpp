#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "icptraj/model.hpp"

namespace icptraj::nar {

/// Adam with bias correction; state lives here, not in the checkpoint.
struct Adam {
  double learn_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  /// Applies one update from the accumulated gradients in `params`.
  void step(ad::ParamStore& params);

  int t = 0;
  std::map<std::string, Eigen::MatrixXd> m;
  std::map<std::string, Eigen::MatrixXd> v;
};

struct TrainObservation {
  int step = 0;             ///< optimizer step index
  double loss = 0.0;        ///< batch mean loss
  double grad_norm = 0.0;   ///< global gradient norm before clipping
  double clipped_norm = 0.0;
};
using TrainObserver = std::function<void(const TrainObservation&)>;

struct TrainResult {
  std::vector<double> loss_history;  ///< one batch mean per optimizer step
};

/// Runs cfg.train_steps Adam updates on `model` over `dataset`. Batch
/// indices come from derive_stream(seed, "batch", step) and teacher coins
/// from derive_stream(seed, "coins", step * batch_size + slot), so a rerun
/// with the same seed and dataset order reproduces the loss history exactly.
/// Gradients are averaged over the batch and clipped to cfg.grad_clip by
/// global norm. A non-finite sample loss aborts with DivergenceError naming
/// the optimizer step and the first offending loss term.
TrainResult train(Model& model, const std::vector<probe::Trajectory>& dataset,
                  const TrainObserver& observer = nullptr);

/// Writes config, probe schema, and every parameter array as decimal text
/// (17 significant digits) to a sibling temporary, then renames into place.
void save_checkpoint(const std::filesystem::path& path, const Model& model);

/// Rebuilds the model from a checkpoint. Malformed or truncated files throw
/// ParseError; a parameter set that contradicts the declared config/schema
/// throws SchemaError.
Model load_checkpoint(const std::filesystem::path& path);

struct GradCheckOptions {
  int sample_params = 120;  ///< entries to probe (>= 100 per the contract)
  double fd_step = 1e-5;
  std::uint64_t seed = 1;
  /// Skip the processor: encode, decode from a zero state, one step loss.
  bool encoder_decoder_only = false;
  std::vector<std::string> probes;  ///< restrict the loss; empty = all
  std::string param_filter;         ///< substring filter on parameter names
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  ///< entries whose perturbation crossed a max/relu tie
};

/// Central finite differences against the analytic gradient on randomly
/// sampled parameter entries. Errors are relative to max(|analytic|, |fd|,
/// 1), so sub-unit gradients are compared absolutely. Entries whose
/// perturbed forward passes took a different max/relu branch (detected via
/// the tape decision hash) are excluded as tie crossings.
GradCheckReport grad_check(Model& model, const probe::Trajectory& traj,
                           const GradCheckOptions& opt = {});

}  // namespace icptraj::nar
