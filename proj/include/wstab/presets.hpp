#pragma once

// Named configurations: "tiny" (gradient checks and smoke runs), "desk"
// (single-CPU training on synthetic tables), "paper" (full-size settings,
// kept for reference; far too large for a CPU run).

#include <string_view>

#include "wstab/network.hpp"
#include "wstab/synth.hpp"
#include "wstab/training.hpp"

namespace wstab {

struct Preset {
  NetConfig net;
  TrainConfig train;
  GenConfig gen;
};

/// Throws InvalidConfig for an unknown name.
Preset preset(std::string_view name);

/// Gradient check of the full model under the joint loss on one fixed
/// table with a spanning cell and a random image; dropout off.
ad::GradCheckReport model_grad_check(const NetConfig& net, double lambda, std::uint64_t seed, double h = 1e-5,
                                     double tol = 1e-4);

}  // namespace wstab
