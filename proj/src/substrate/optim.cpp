#include "uniso/substrate/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "uniso/error.hpp"

namespace uniso::ad {

void adamw_step(ParamStore& params, const GradMap& grads, const AdamWConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw DomainError("adamw: learning rate must be positive");
  for (const auto& [name, g] : grads) {
    ParamEntry& e = params.entry(name);
    if (!e.value.same_shape(g)) {
      throw ShapeError("adamw: gradient " + shape_string(g.shape()) + " for '" + name + "' of shape " +
                       shape_string(e.value.shape()));
    }
    if (!e.trainable) continue;
    e.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
    for (std::size_t i = 0; i < g.size(); ++i) {
      double& m = e.first_moment[i];
      double& v = e.second_moment[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[i];
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      double& theta = e.value[i];
      theta -= cfg.lr * cfg.weight_decay * theta;
      theta -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void sgd_step(ParamStore& params, const GradMap& grads, double lr) {
  if (!(lr > 0.0)) throw DomainError("sgd: learning rate must be positive");
  for (const auto& [name, g] : grads) {
    ParamEntry& e = params.entry(name);
    if (!e.value.same_shape(g)) {
      throw ShapeError("sgd: gradient " + shape_string(g.shape()) + " for '" + name + "' of shape " +
                       shape_string(e.value.shape()));
    }
    if (!e.trainable) continue;
    for (std::size_t i = 0; i < g.size(); ++i) e.value[i] -= lr * g[i];
    e.step += 1;
  }
}

double cosine_lr(std::int64_t step, std::int64_t warmup, std::int64_t total, double base) {
  step = std::clamp<std::int64_t>(step, 0, total);
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step) / static_cast<double>(warmup);
  const std::int64_t span = total - warmup;
  if (span <= 0) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * progress));
}

double grad_check(const LossBuilder& loss, ParamStore& point, double eps, std::size_t max_coords, std::uint64_t seed) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw DomainError("grad_check: eps must lie in [1e-6, 1e-3]");
  GradMap analytic;
  {
    Tape tape(true);
    Var l = loss(tape, point);
    if (tape.value(l).size() != 1) throw ShapeError("grad_check: loss is not a scalar");
    tape.backward(l);
    analytic = tape.param_grads();
  }
  auto eval = [&] {
    Tape tape(false);
    return tape.value(loss(tape, point)).item();
  };
  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& name : point.names()) {
    const ParamEntry& e = point.entry(name);
    if (!e.trainable) continue;
    for (std::size_t i = 0; i < e.value.size(); ++i) coords.emplace_back(name, i);
  }
  if (max_coords > 0 && coords.size() > max_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  double worst = 0.0;
  for (const auto& [name, i] : coords) {
    ParamEntry& e = point.entry(name);
    auto it = analytic.find(name);
    const double orig = e.value[i];
    e.value[i] = orig + eps;
    const double up = eval();
    e.value[i] = orig - eps;
    const double down = eval();
    e.value[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = it == analytic.end() ? 0.0 : it->second[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace uniso::ad
