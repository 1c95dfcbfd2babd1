#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "icptraj/probe.hpp"
#include "icptraj/rng.hpp"
#include "icptraj/tensor.hpp"

namespace icptraj::nar {

enum class ProcessorKind { TripletMPNN, MPNN };

struct ModelConfig {
  int hidden_dim = 256;
  ProcessorKind processor = ProcessorKind::TripletMPNN;
  double teacher_prob = 0.1;
  double learn_rate = 1e-3;
  int batch_size = 8;
  int train_steps = 10000;
  double grad_clip = 1.0;
  double scalar_loss_scale = 1.0;  ///< alpha on the scalar loss term
  std::uint64_t seed = 0;

  /// Throws InvalidInputError on out-of-range fields.
  void validate() const;
};

/// Per-step encoder outputs: summed per location class.
struct StepTensors {
  ad::TensorRef node;   ///< n x hidden
  ad::TensorRef edge;   ///< n^2 x hidden
  ad::TensorRef graph;  ///< 1 x hidden
};

/// Processor latents carried across steps.
struct StateTensors {
  ad::TensorRef node;  ///< n x hidden
  ad::TensorRef edge;  ///< n^2 x hidden
};

/// Raw decoder heads for one step. Scalar probes decode to raw reals, mask
/// probes to logits, categoricals to per-class logits; `termination` is a
/// single logit.
struct DecodedStep {
  std::map<std::string, ad::TensorRef> hints;
  std::map<std::string, ad::TensorRef> outputs;
  ad::TensorRef termination;
};

/// One named loss component with its evaluated value, used for divergence
/// diagnostics ("which probe went non-finite at which step").
struct LossTerm {
  std::string name;
  double value = 0.0;
};

struct TrainRollout {
  ad::TensorRef loss;
  double loss_value = 0.0;
  std::vector<LossTerm> terms;
};

struct InferenceStep {
  /// Post-activation predictions in the normalized domain: scalars raw,
  /// masks as sigmoid probabilities, categoricals as softmax rows.
  std::map<std::string, Eigen::MatrixXd> hints;
  double termination_prob = 0.0;
};

struct InferenceRollout {
  std::vector<InferenceStep> steps;
  std::map<std::string, Eigen::MatrixXd> outputs;  ///< post-activation
  int stop_step = 0;        ///< number of executed steps
  bool terminated = false;  ///< stop head fired before the hard cap
};

/// The executor: linear per-probe encoders, a (Triplet-)MPNN processor with
/// layer-normalized latents, per-probe decoders, and a termination head.
/// Parameters are Xavier-uniform initialized from cfg.seed at construction.
class Model {
 public:
  Model(probe::TrajectorySchema schema, ModelConfig cfg);

  const probe::TrajectorySchema& schema() const { return schema_; }
  const ModelConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  /// Flat probe values to the matrix layout the encoders consume
  /// (locations x channels; categorical class ids expand to one-hot rows).
  static Eigen::MatrixXd probe_matrix(const probe::ProbeSpec& spec,
                                      const Eigen::ArrayXd& flat, int n);

  /// All probes of one step as tape constants (input + hint stages).
  std::map<std::string, ad::TensorRef> step_constants(
      ad::Tape& tape, const probe::TrajectoryStep& input,
      const probe::TrajectoryStep& hint, int n) const;

  StateTensors zero_state(ad::Tape& tape, int n) const;
  StepTensors encode_step(ad::Tape& tape,
                          const std::map<std::string, ad::TensorRef>& probes,
                          int n) const;
  StateTensors process_step(ad::Tape& tape, const StepTensors& z,
                            const StateTensors& prev, int n) const;
  DecodedStep decode_step(ad::Tape& tape, const StepTensors& z,
                          const StateTensors& state, int n) const;

  /// Post-activation views of decoded hints (for feedback and inference).
  std::map<std::string, ad::TensorRef> activate_hints(
      ad::Tape& tape, const DecodedStep& decoded) const;

  /// Pooled-scalar + weighted-mask + categorical loss against a hint step.
  /// A non-null `only` restricts the loss to the named probes.
  ad::TensorRef step_loss(ad::Tape& tape, const DecodedStep& decoded,
                          const probe::TrajectoryStep& target, int n,
                          std::vector<LossTerm>* terms = nullptr,
                          const std::string& label = "",
                          const std::vector<std::string>* only = nullptr) const;
  /// Same composition over the output probes.
  ad::TensorRef final_loss(ad::Tape& tape, const DecodedStep& decoded,
                           const probe::TrajectoryStep& output, int n,
                           std::vector<LossTerm>* terms = nullptr,
                           const std::vector<std::string>* only = nullptr) const;

  /// Draws one teacher coin per hint step; index 0 is always ground truth.
  std::vector<std::uint8_t> draw_coins(std::size_t steps, Rng& rng) const;

  /// Teacher-forced rollout over a normalized trajectory: builds the total
  /// loss (mean step loss + final loss + mean termination BCE) on `tape`.
  /// coins[t] == 1 feeds the ground-truth hint at step t, else the previous
  /// step's post-activation predictions (gradients flow through them).
  /// A non-null `only` restricts the probe losses (termination stays).
  TrainRollout rollout_train(ad::Tape& tape, const probe::Trajectory& traj,
                             const std::vector<std::uint8_t>& coins,
                             const std::vector<std::string>* only = nullptr);

  /// Self-fed rollout from the trajectory's first hint, halting at the
  /// first termination probability > 0.5 or at `cap` steps (default
  /// 2 * t_max * 2). Only input probes and hints[0] of `traj` are read.
  InferenceRollout rollout_inference(const probe::Trajectory& traj,
                                     int cap = -1);

 private:
  void register_params();
  void init_params();

  probe::TrajectorySchema schema_;
  ModelConfig cfg_;
  ad::ParamStore params_;
};

struct InferResult {
  geom::PointCloud final_src;
  geom::PointCloud final_tgt;
  geom::CorrespondenceSet correspondences;
  /// Denormalized transformed-source prediction at every executed step.
  std::vector<geom::PointCloud> step_src;
  std::vector<int> phase_labels;  ///< argmax of the phase head per step
  int stop_step = 0;
  bool terminated = false;
};

/// Deployment entry point: builds the input and bootstrap hint from the raw
/// clouds (nearest-neighbor pass, error = +inf, iteration 0, phase 0),
/// normalizes with scales observable at step 0, rolls out self-fed, and
/// denormalizes. The mask head is reduced to one match per source row.
/// `norm` substitutes known normalization parameters (e.g. from a recorded
/// trajectory of the same pair) for the observable step-0 scales, keeping
/// evaluation on training pairs in the exact domain the model was fit in.
InferResult infer(const geom::PointCloud& src, const geom::PointCloud& tgt,
                  Model& model, int t_max = 50,
                  const probe::NormalizationParams* norm = nullptr);

}  // namespace icptraj::nar
