#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "convtran/autodiff.hpp"

namespace convtran {

template <typename Scalar>
struct AdamOptions {
  Scalar lr = Scalar(1e-3);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar eps = Scalar(1e-8);
};

/// Moment estimates for a fixed list of parameters.
template <typename Scalar>
struct AdamState {
  AdamOptions<Scalar> options;
  std::vector<Matrix<Scalar>> first_moment;
  std::vector<Matrix<Scalar>> second_moment;
  long step = 0;

  AdamState() = default;
  AdamState(const std::vector<ad::Tensor<Scalar>>& params, AdamOptions<Scalar> opts = {}) : options(opts) {
    first_moment.reserve(params.size());
    second_moment.reserve(params.size());
    for (const auto& p : params) {
      first_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      second_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
  }
};

/// One bias-corrected Adam update; gradients are cleared afterwards.
/// Throws if any parameter has no gradient.
template <typename Scalar>
void adam_step(std::vector<ad::Tensor<Scalar>>& params, AdamState<Scalar>& state) {
  if (params.size() != state.first_moment.size())
    throw std::invalid_argument("adam_step: parameter list does not match optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i].has_grad()) throw std::logic_error("adam_step: parameter " + std::to_string(i) + " has no gradient");

  ++state.step;
  const auto& o = state.options;
  const Scalar c1 = Scalar(1) - std::pow(o.beta1, static_cast<Scalar>(state.step));
  const Scalar c2 = Scalar(1) - std::pow(o.beta2, static_cast<Scalar>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = o.beta1 * m + (Scalar(1) - o.beta1) * g;
    v = o.beta2 * v + (Scalar(1) - o.beta2) * g.cwiseAbs2();
    params[i].value().array() -= o.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + o.eps);
    params[i].zero_grad();
  }
}

enum class StopDecision { Continue, Stop, Diverged };

/// Tracks the best validation loss and the snapshot taken at that epoch.
template <typename Checkpoint>
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) throw std::invalid_argument("EarlyStopper: patience must be positive");
  }

  StopDecision update(double val_loss, const Checkpoint& checkpoint) {
    ++epoch_;
    if (!std::isfinite(val_loss)) return StopDecision::Diverged;
    if (val_loss < best_loss_) {
      best_loss_ = val_loss;
      best_epoch_ = epoch_;
      since_best_ = 0;
      best_ = checkpoint;
      return StopDecision::Continue;
    }
    return ++since_best_ >= patience_ ? StopDecision::Stop : StopDecision::Continue;
  }

  int patience() const { return patience_; }
  int epochs_seen() const { return epoch_; }
  int epochs_since_best() const { return since_best_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  const std::optional<Checkpoint>& best_checkpoint() const { return best_; }

 private:
  int patience_;
  int epoch_ = 0;
  int since_best_ = 0;
  int best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::optional<Checkpoint> best_;
};

}  // namespace convtran
