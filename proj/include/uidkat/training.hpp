#pragma once

// Alternating generator / discriminator optimisation, the learning-rate
// schedule, run configuration and training-state checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

#include "json.hpp"
#include "uidkat/adam.hpp"
#include "uidkat/data.hpp"
#include "uidkat/losses.hpp"

namespace uidkat {

struct TrainConfig {
  char variant = 'T';
  std::size_t epochs = 100;
  std::size_t decay_start_epoch = 50;
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  std::size_t batch_size = 1;
  std::size_t image_size = 256;
  LossWeights weights;
  double tau = kDefaultTau;
  std::size_t nce_locations = kDefaultNceLocations;
  bool detach_keys = true;
  std::uint64_t seed = 0;
  std::string hazy_dir, clean_dir;
  std::string out_dir = "runs/uidkat";
  std::size_t checkpoint_every = 1;  // epochs; 0 disables
  std::size_t max_steps = 0;         // 0: run every epoch to the end
  bool flip = false;

  // Architecture axes.
  std::string token_mixer = "grkan";
  std::string channel_mixer = "grkan";
  std::size_t grkan_stack = 2;
  std::size_t patch_size = 4;
  std::string encoder_activation = "silu";
  std::string skip_mode = "add";

  /// Throws ShapeError on inconsistent settings.
  void validate() const;
  GeneratorConfig generator_config() const;
  PatchNCEOptions nce_options() const;
  /// Assigns one documented key from its text form; throws ShapeError on an
  /// unknown key or unparsable value.
  void set(std::string_view key, std::string_view value);
};

/// Flat "key = value" lines; '#' starts a comment, blank lines are ignored.
void apply_config_text(TrainConfig& cfg, std::string_view text);
TrainConfig load_config_file(const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// lr for epoch < decay_start, then lr (epochs - epoch) / (epochs - decay_start).
/// Defined for 0 <= epoch <= epochs; throws ShapeError otherwise.
double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct StepLog {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  double adv_g = 0, ide = 0, pc = 0, total_g = 0, adv_d = 0;
};

inline constexpr std::string_view kTrainLogHeader = "step,epoch,lr,adv_g,ide,pc,total_g,adv_d";
std::string format_log_row(const StepLog& log);

struct TrainState {
  TrainConfig cfg;
  Model<float> model;
  AdamState<float> opt_g;  // generator and projection heads
  AdamState<float> opt_d;
  std::uint64_t step = 0;  // completed steps
  std::size_t epoch = 0;   // completed epochs
  Rng rng;                 // root; consumers derive labelled streams
};

/// Builds the model from rng.stream("init") of Rng(cfg.seed).
TrainState init_train_state(const TrainConfig& cfg);

/// One generator update then one discriminator update on a (B, 3, S, S)
/// hazy batch x and clean batch y in [-1, 1]. Contrastive locations come from
/// rng.stream("patch", step). A non-finite loss writes nan_dump_step<k>.json
/// into cfg.out_dir (when set) and throws NumericError.
StepLog train_step(TrainState& state, const Tensor<float>& x, const Tensor<float>& y);

/// Generator checkpoint at `dir` plus dir/train_state (discriminator, heads,
/// Adam moments, state.json with counters, RNG and config).
void save_train_state(TrainState& state, const std::filesystem::path& dir);
TrainState load_train_state(const std::filesystem::path& dir);

using StepCallback = std::function<void(const StepLog&)>;

/// Runs the remaining epochs, appending to out_dir/train_log.csv and saving
/// out_dir/checkpoint every checkpoint_every epochs and at the end.
void train(TrainState& state, UnpairedDataset& data, const StepCallback& on_step = {});

}  // namespace uidkat
