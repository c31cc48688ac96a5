#pragma once

#include <cstdint>
#include <functional>

#include "uniso/substrate/param_store.hpp"
#include "uniso/substrate/tape.hpp"

namespace uniso::ad {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.01;
  double eps = 1e-8;
};

/// Decoupled-weight-decay Adam with bias correction. Only entries present
/// in `grads` move; each one's step count is incremented.
void adamw_step(ParamStore& params, const GradMap& grads, const AdamWConfig& cfg);

/// theta <- theta - lr * g for every entry present in `grads`.
void sgd_step(ParamStore& params, const GradMap& grads, double lr);

/// Linear warmup from 0 to `base`, then cosine decay to exactly 0 at `total`.
/// `step` is clamped into [0, total].
double cosine_lr(std::int64_t step, std::int64_t warmup, std::int64_t total, double base);

/// Builds the scalar loss on a fresh tape, binding parameters from the
/// store it is handed.
using LossBuilder = std::function<Var(Tape&, const ParamStore&)>;

/// Maximum over trainable parameter elements of
/// |analytic - central difference| / max(1, |analytic|). With max_coords > 0
/// only that many elements, drawn without replacement from `seed`, are probed.
double grad_check(const LossBuilder& loss, ParamStore& point, double eps, std::size_t max_coords = 0,
                  std::uint64_t seed = 0);

}  // namespace uniso::ad
