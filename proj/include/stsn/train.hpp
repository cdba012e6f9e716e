#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include "stsn/model.hpp"
#include "stsn/synthvid.hpp"

namespace stsn {

// Raised when training produces a non-finite loss.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int iterations = 3000;
  real lr = 1e-2;
  int lr_decay_at = 2000;       // step decay boundary
  real lr_decay_factor = 0.1;
  int k_train = 1;              // supporting frames each side during training (T = 2k+1)
  int support_radius = 2;       // supports drawn within this many frames of the reference
  std::uint64_t seed = 1;
  real lambda_cls = 1.0;
  real lambda_box = 0.5;
  real momentum = 0.9;
  bool static_baseline = false;  // SSN: the reference frame serves as its own supports
  int log_every = 50;
  void validate() const;
};

// lambda_cls * BCE(objectness, cell-membership target), negatives and
// positives averaged separately so sparse positives keep gradient mass,
//   + lambda_box * mean-per-positive-cell L1 on (dx, dy, log_w, log_h).
// A cell is positive iff a gt box center falls in it; with no positives the
// classification term is the plain per-cell mean.
Tensor detection_loss(const HeadOutput& head, const std::vector<GtBox>& gt,
                      const ModelConfig& config, real lambda_cls, real lambda_box);

struct TrainResult {
  std::vector<real> losses;                   // one entry per iteration
  std::vector<std::pair<int, real>> logged;   // every log_every iterations
};

// Momentum SGD. Each iteration draws a clip, takes its designated (degraded)
// center frame as the reference, and draws one supporting frame before and
// one after it. Deterministic for a fixed seed. Throws NumericError on a
// non-finite loss or diverged parameters.
TrainResult train(ModelParams& params, const std::vector<Clip>& clips, const ModelConfig& config,
                  const TrainConfig& tc);

void write_loss_csv(const std::filesystem::path& path, const TrainResult& result);

}  // namespace stsn
