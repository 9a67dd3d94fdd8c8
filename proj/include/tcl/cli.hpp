#pragma once

#include <cstdint>
#include <exception>
#include <iosfwd>
#include <optional>
#include <string>

#include "json.hpp"
#include "tcl/datapipe.hpp"
#include "tcl/netarch.hpp"
#include "tcl/trainer.hpp"

namespace tcl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitDiverged = 4;

// Everything one command needs. Built from defaults, then the --config file,
// then command-line flags, in that order of precedence.
struct RunConfig {
  std::string command;
  std::string out_dir;
  int threads = 1;

  // Root seed; each subsystem draws from derive_seed(seed, name) unless its
  // own seed is given.
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> data_seed, init_seed, train_seed;

  std::string arch_preset = "desk";  // desk | full
  ArchConfig arch = ArchConfig::desk();
  TrainConfig train;

  std::string manifest;
  std::optional<double> filter_threshold;  // empty: 8000 scaled to the frame size; 0 keeps every frame

  int synth_videos = 20;
  SynthConfig synth;

  std::string resume;          // checkpoint to continue from
  int checkpoint_every = 100;  // epochs between checkpoint writes

  std::string net = "tempconet";  // naive | tempconet
  std::string pretrained;         // order-net checkpoint to transfer
  double transfer_multiplier = 0.1;

  std::string predictions;  // evaluate: stored predictions CSV
  std::string checkpoint;   // evaluate: phase-net checkpoint
  int phases = 0;           // evaluate: label count, 0 = from the data

  std::string inject_fault;  // gradcheck: op whose backward gets a sign flip

  std::uint64_t resolved_data_seed() const;
  std::uint64_t resolved_init_seed() const;
  std::uint64_t resolved_train_seed() const;

  nlohmann::json to_json() const;
  // Defaults for `command`, overlaid with `j`. Unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j, const std::string& command);
};

// Maps an exception to the documented exit code.
int exit_code_for(const std::exception& e);

// Entry point shared by the tool and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tcl::cli
