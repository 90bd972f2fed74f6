#pragma once

#include "maskdiff/model.hpp"
#include "maskdiff/patch_mask.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

struct ObjectiveConfig {
  double r_t0 = 0.5;     // probability an example takes the no-noise branch
  double m_t0 = 0.75;    // mask ratio on the no-noise branch
  double m_tge1 = 0.375; // mask ratio on noised branches
  HeadMode head_mode = HeadMode::dual;
  bool deterministic_split = false;  // allocate branches by index instead of Bernoulli

  void validate() const;
};

enum class Branch { t0, noised };

struct LossBreakdown {
  double total = 0.0;
  double x0_term = 0.0;
  double eps_term = 0.0;
  double recon_term = 0.0;
  Branch branch = Branch::noised;
};

// Noised-step loss: x0 head scored on masked tokens, eps head on visible
// tokens, each term a mean over the elements actually included.  A head the
// model does not expose contributes zero, as does a degenerate (empty) side
// of the mask.
LossBreakdown noised_step_loss(const DualPrediction& pred, const Matrix& x0_tokens,
                               const Matrix& eps_tokens, const MaskSpec& spec);

// No-noise (t = 0) reconstruction: mean squared error of the reconstruction
// head over masked tokens only.
LossBreakdown recon_step_loss(const DualPrediction& pred, const Matrix& x0_tokens,
                            const MaskSpec& spec);

// Branch choice for one example: t0 with probability r_t0, else noised.
Branch draw_loss_branch(Rng& rng, const ObjectiveConfig& cfg);

// Deterministic variant: the first round(r_t0 * batch) examples of a batch
// take the t0 branch.
Branch branch_for_index(int index, int batch, const ObjectiveConfig& cfg);

// Gradients of the losses above with respect to the head outputs; shapes
// match the corresponding prediction (empty when that head is absent).
struct LossGrads {
  Matrix dx0;
  Matrix deps;
};

LossGrads noised_step_loss_grad(const DualPrediction& pred, const Matrix& x0_tokens,
                                const Matrix& eps_tokens, const MaskSpec& spec);

LossGrads recon_step_loss_grad(const DualPrediction& pred, const Matrix& x0_tokens,
                             const MaskSpec& spec);

}  // namespace maskdiff
