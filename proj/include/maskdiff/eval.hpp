#pragma once

#include "maskdiff/dataset.hpp"
#include "maskdiff/model.hpp"
#include "maskdiff/schedules.hpp"

#include <vector>

namespace maskdiff {

struct ProbeResult {
  double accuracy = 0.0;  // held-out, disjoint from the fit set
  int n_shots = 0;
  int n_classes = 0;
  double ridge_lambda = 0.0;
};

// Closed-form ridge regression onto one-hot targets with a bias column.
// Returns [d+1 x n_classes]; prediction = argmax of the affine map.  The
// effective penalty is ridge_lambda * trace(X'X)/d (trace-normalized).
Matrix fit_linear_probe(const Matrix& features, const std::vector<int>& labels, int n_classes,
                        double ridge_lambda);

double probe_accuracy(const Matrix& weights, const Matrix& features,
                      const std::vector<int>& labels);

// CLS features for a batch of images.  repr_t = 0 encodes clean images;
// repr_t > 0 noises each image to that timestep first (the pure-diffusion
// probing protocol), with noise drawn per image from `seed`.
Matrix model_features(const Network& net, const BetaSchedule& schedule,
                      const std::vector<const Image*>& images, int repr_t, uint64_t seed);

// k-shot probe: k examples per class are drawn (seeded) as the fit set and
// the rest of the dataset is the held-out eval set.
ProbeResult probe_model(const Network& net, const BetaSchedule& schedule, const Dataset& data,
                        int k_shots, double ridge_lambda, uint64_t seed, int repr_t);

// Ridge classifier on raw pixels, used as the sample-fidelity oracle.
struct OracleClassifier {
  Matrix weights;  // [n_pixels+1 x n_classes]
  double heldout_accuracy = 0.0;
  int n_classes = 0;
};

OracleClassifier train_pixel_oracle(const Dataset& data, double ridge_lambda, uint64_t seed);

// Fraction of samples the oracle assigns to their conditioning label.
// Refuses (config error) when the oracle is below the accuracy floor on real
// data, since the metric would be meaningless.
double conditional_fidelity_check(const std::vector<Image>& samples,
                                  const std::vector<int>& labels,
                                  const OracleClassifier& oracle,
                                  double accuracy_floor = 0.95);

}  // namespace maskdiff
