#include "maskdiff/eval.hpp"

#include "maskdiff/rng.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace maskdiff {

namespace {

Matrix with_bias_column(const Matrix& features) {
  Matrix X(features.rows(), features.cols() + 1);
  X.leftCols(features.cols()) = features;
  X.col(features.cols()).setOnes();
  return X;
}

Matrix pixel_features(const Dataset& data, const std::vector<int>& indices) {
  require(!indices.empty(), "no examples to featurize");
  const Image& first = data.items[indices[0]].image;
  Matrix X(static_cast<int>(indices.size()), first.size());
  for (size_t r = 0; r < indices.size(); ++r) {
    const Image& img = data.items[indices[r]].image;
    require(img.same_shape(first), "oracle images must share one shape");
    X.row(static_cast<int>(r)) = img.v.matrix().transpose();
  }
  return X;
}

}  // namespace

Matrix fit_linear_probe(const Matrix& features, const std::vector<int>& labels, int n_classes,
                        double ridge_lambda) {
  const int n = static_cast<int>(features.rows());
  const int d = static_cast<int>(features.cols());
  require(n > 0 && d > 0, "probe fit set is empty");
  require(static_cast<int>(labels.size()) == n, "feature/label count mismatch");
  require(n_classes >= 2, "probe needs at least two classes");
  require(ridge_lambda > 0.0, "ridge_lambda must be positive");

  const Matrix X = with_bias_column(features);
  Matrix Y = Matrix::Zero(n, n_classes);
  for (int i = 0; i < n; ++i) {
    require(labels[i] >= 0 && labels[i] < n_classes, "probe label out of range");
    Y(i, labels[i]) = 1.0;
  }

  Matrix gram = X.transpose() * X;
  const double lam = ridge_lambda * gram.trace() / static_cast<double>(gram.rows());
  gram.diagonal().array() += lam;
  Matrix weights = gram.ldlt().solve(X.transpose() * Y);
  if (!all_finite(weights)) throw NumericError("probe solve produced non-finite weights");
  return weights;
}

double probe_accuracy(const Matrix& weights, const Matrix& features,
                      const std::vector<int>& labels) {
  const int n = static_cast<int>(features.rows());
  require(n > 0, "probe eval set is empty");
  require(static_cast<int>(labels.size()) == n, "feature/label count mismatch");
  require(weights.rows() == features.cols() + 1, "probe weights do not match the features");

  const Matrix scores = with_bias_column(features) * weights;
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    scores.row(i).maxCoeff(&best);
    if (best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / n;
}

Matrix model_features(const Network& net, const BetaSchedule& schedule,
                      const std::vector<const Image*>& images, int repr_t, uint64_t seed) {
  require(!images.empty(), "no images to featurize");
  require(repr_t >= 0, "representation timestep must be >= 0");
  Matrix X(static_cast<int>(images.size()), net.config().width);
  for (size_t i = 0; i < images.size(); ++i) {
    Representation rep;
    if (repr_t == 0) {
      rep = net.extract_representation(*images[i]);
    } else {
      Rng rng(seed, {stream::eval, static_cast<uint64_t>(repr_t), static_cast<uint64_t>(i)});
      rep = net.extract_representation_noised(*images[i], schedule, repr_t, rng);
    }
    X.row(static_cast<int>(i)) = rep.cls_features.transpose();
  }
  return X;
}

ProbeResult probe_model(const Network& net, const BetaSchedule& schedule, const Dataset& data,
                        int k_shots, double ridge_lambda, uint64_t seed, int repr_t) {
  require(k_shots > 0, "k_shots must be positive");
  require(data.n_classes >= 2, "probe needs a labeled dataset with >= 2 classes");

  std::vector<std::vector<int>> by_class(data.n_classes);
  for (int i = 0; i < data.size(); ++i) {
    const int label = data.items[i].label;
    require(label >= 0 && label < data.n_classes, "probe dataset has an unlabeled example");
    by_class[label].push_back(i);
  }

  std::vector<int> fit_idx;
  std::vector<int> eval_idx;
  for (int c = 0; c < data.n_classes; ++c) {
    require(static_cast<int>(by_class[c].size()) >= k_shots,
            "class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                " examples, fewer than k_shots = " + std::to_string(k_shots));
    Rng rng(seed, {stream::eval, 0x5e1ec7u, static_cast<uint64_t>(c)});
    std::vector<int> pool = by_class[c];
    rng.shuffle(pool);
    fit_idx.insert(fit_idx.end(), pool.begin(), pool.begin() + k_shots);
    eval_idx.insert(eval_idx.end(), pool.begin() + k_shots, pool.end());
  }
  require(!eval_idx.empty(), "k_shots consumes the whole dataset; nothing left to evaluate");
  std::sort(fit_idx.begin(), fit_idx.end());
  std::sort(eval_idx.begin(), eval_idx.end());

  auto images_of = [&](const std::vector<int>& idx) {
    std::vector<const Image*> ptrs;
    ptrs.reserve(idx.size());
    for (int i : idx) ptrs.push_back(&data.items[i].image);
    return ptrs;
  };
  auto labels_of = [&](const std::vector<int>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(data.items[i].label);
    return out;
  };

  const Matrix fit_X = model_features(net, schedule, images_of(fit_idx), repr_t, seed);
  const Matrix eval_X = model_features(net, schedule, images_of(eval_idx), repr_t, seed + 1);
  const Matrix weights = fit_linear_probe(fit_X, labels_of(fit_idx), data.n_classes, ridge_lambda);

  ProbeResult res;
  res.accuracy = probe_accuracy(weights, eval_X, labels_of(eval_idx));
  res.n_shots = k_shots;
  res.n_classes = data.n_classes;
  res.ridge_lambda = ridge_lambda;
  return res;
}

OracleClassifier train_pixel_oracle(const Dataset& data, double ridge_lambda, uint64_t seed) {
  require(data.n_classes >= 2, "oracle needs a labeled dataset with >= 2 classes");
  require(data.size() >= 2 * data.n_classes, "oracle dataset is too small");
  for (const LabeledImage& ex : data.items) {
    require(ex.label >= 0 && ex.label < data.n_classes, "oracle dataset has an unlabeled example");
  }

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, {stream::eval, 0x0eac1eu});
  rng.shuffle(order);
  const int n_heldout = std::max(data.n_classes, data.size() / 5);
  require(n_heldout < data.size(), "oracle dataset is too small to hold out");
  const std::vector<int> heldout(order.begin(), order.begin() + n_heldout);
  const std::vector<int> train(order.begin() + n_heldout, order.end());

  auto labels_of = [&](const std::vector<int>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(data.items[i].label);
    return out;
  };

  OracleClassifier oracle;
  oracle.n_classes = data.n_classes;
  oracle.weights =
      fit_linear_probe(pixel_features(data, train), labels_of(train), data.n_classes, ridge_lambda);
  oracle.heldout_accuracy =
      probe_accuracy(oracle.weights, pixel_features(data, heldout), labels_of(heldout));
  return oracle;
}

double conditional_fidelity_check(const std::vector<Image>& samples,
                                  const std::vector<int>& labels,
                                  const OracleClassifier& oracle, double accuracy_floor) {
  require(!samples.empty(), "no samples to score");
  require(samples.size() == labels.size(), "sample/label count mismatch");
  require(oracle.heldout_accuracy >= accuracy_floor,
          "oracle held-out accuracy " + std::to_string(oracle.heldout_accuracy) +
              " is below the floor " + std::to_string(accuracy_floor) +
              "; the fidelity score would be meaningless");

  int matched = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < oracle.n_classes, "sample label out of range");
    const Image& img = samples[i];
    require(img.size() + 1 == static_cast<int>(oracle.weights.rows()),
            "sample shape does not match the oracle");
    Vector x(img.size() + 1);
    x.head(img.size()) = img.v.matrix();
    x[img.size()] = 1.0;
    const Vector scores = oracle.weights.transpose() * x;
    int best = 0;
    scores.maxCoeff(&best);
    if (best == labels[i]) ++matched;
  }
  return static_cast<double>(matched) / static_cast<double>(samples.size());
}

}  // namespace maskdiff
