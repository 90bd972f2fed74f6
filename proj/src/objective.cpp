#include "maskdiff/objective.hpp"

#include <cmath>

namespace maskdiff {

namespace {

// Sum of squared errors over the selected rows plus the element count, so the
// caller can form a mean over exactly the included elements.
struct MaskedSq {
  double sum = 0.0;
  int64_t count = 0;
};

MaskedSq masked_squared_error(const Matrix& pred, const Matrix& target, const MaskSpec& spec,
                              bool over_masked) {
  MaskedSq out;
  for (int i = 0; i < spec.n(); ++i) {
    if (spec.hidden(i) != over_masked) continue;
    out.sum += (pred.row(i) - target.row(i)).squaredNorm();
    out.count += target.cols();
  }
  return out;
}

void check_shapes(const Matrix& a, const Matrix& b, const MaskSpec& spec) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "token shape mismatch");
  require(a.rows() == spec.n(), "mask sized for a different token count");
}

}  // namespace

void ObjectiveConfig::validate() const {
  require(r_t0 >= 0.0 && r_t0 <= 1.0, "r_t0 must be in [0, 1]");
  require(m_t0 >= 0.0 && m_t0 < 1.0, "m_t0 must be in [0, 1)");
  require(m_tge1 >= 0.0 && m_tge1 < 1.0, "m_tge1 must be in [0, 1)");
}

LossBreakdown noised_step_loss(const DualPrediction& pred, const Matrix& x0_tokens,
                               const Matrix& eps_tokens, const MaskSpec& spec) {
  check_shapes(x0_tokens, eps_tokens, spec);
  LossBreakdown out;
  out.branch = Branch::noised;
  if (pred.has_x0()) {
    check_shapes(pred.x0_pred, x0_tokens, spec);
    const MaskedSq sq = masked_squared_error(pred.x0_pred, x0_tokens, spec, /*over_masked=*/true);
    if (sq.count > 0) out.x0_term = sq.sum / static_cast<double>(sq.count);
  }
  if (pred.has_eps()) {
    check_shapes(pred.eps_pred, eps_tokens, spec);
    const MaskedSq sq = masked_squared_error(pred.eps_pred, eps_tokens, spec, /*over_masked=*/false);
    if (sq.count > 0) out.eps_term = sq.sum / static_cast<double>(sq.count);
  }
  out.total = out.x0_term + out.eps_term;
  return out;
}

LossBreakdown recon_step_loss(const DualPrediction& pred, const Matrix& x0_tokens,
                            const MaskSpec& spec) {
  const Matrix& recon = pred.recon();
  check_shapes(recon, x0_tokens, spec);
  LossBreakdown out;
  out.branch = Branch::t0;
  const MaskedSq sq = masked_squared_error(recon, x0_tokens, spec, /*over_masked=*/true);
  if (sq.count > 0) out.recon_term = sq.sum / static_cast<double>(sq.count);
  out.total = out.recon_term;
  return out;
}

Branch draw_loss_branch(Rng& rng, const ObjectiveConfig& cfg) {
  return rng.uniform() < cfg.r_t0 ? Branch::t0 : Branch::noised;
}

Branch branch_for_index(int index, int batch, const ObjectiveConfig& cfg) {
  require(index >= 0 && index < batch, "index outside batch");
  const int n_t0 = static_cast<int>(std::llround(cfg.r_t0 * batch));
  return index < n_t0 ? Branch::t0 : Branch::noised;
}

LossGrads noised_step_loss_grad(const DualPrediction& pred, const Matrix& x0_tokens,
                                const Matrix& eps_tokens, const MaskSpec& spec) {
  LossGrads g;
  if (pred.has_x0()) {
    int64_t count = 0;
    for (int i = 0; i < spec.n(); ++i)
      if (spec.hidden(i)) count += x0_tokens.cols();
    g.dx0 = Matrix::Zero(x0_tokens.rows(), x0_tokens.cols());
    if (count > 0) {
      const double scale = 2.0 / static_cast<double>(count);
      for (int i = 0; i < spec.n(); ++i)
        if (spec.hidden(i)) g.dx0.row(i) = scale * (pred.x0_pred.row(i) - x0_tokens.row(i));
    }
  }
  if (pred.has_eps()) {
    int64_t count = static_cast<int64_t>(spec.n_visible()) * eps_tokens.cols();
    g.deps = Matrix::Zero(eps_tokens.rows(), eps_tokens.cols());
    if (count > 0) {
      const double scale = 2.0 / static_cast<double>(count);
      for (int i : spec.keep_indices)
        g.deps.row(i) = scale * (pred.eps_pred.row(i) - eps_tokens.row(i));
    }
  }
  return g;
}

LossGrads recon_step_loss_grad(const DualPrediction& pred, const Matrix& x0_tokens,
                             const MaskSpec& spec) {
  const Matrix& recon = pred.recon();
  int64_t count = 0;
  for (int i = 0; i < spec.n(); ++i)
    if (spec.hidden(i)) count += x0_tokens.cols();
  Matrix d = Matrix::Zero(x0_tokens.rows(), x0_tokens.cols());
  if (count > 0) {
    const double scale = 2.0 / static_cast<double>(count);
    for (int i = 0; i < spec.n(); ++i)
      if (spec.hidden(i)) d.row(i) = scale * (recon.row(i) - x0_tokens.row(i));
  }
  LossGrads g;
  if (pred.has_x0())
    g.dx0 = std::move(d);
  else
    g.deps = std::move(d);
  return g;
}

}  // namespace maskdiff
