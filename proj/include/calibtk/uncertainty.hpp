#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "calibtk/mlp.hpp"
#include "calibtk/predictions.hpp"
#include "calibtk/rng.hpp"

namespace calibtk {

// Sampled-logit classifier with an aleatoric head: the network outputs
// per-class mean logits and log-variances, training marginalizes Gaussian
// logit noise, and prediction additionally averages over dropout masks.
struct BayesConfig {
  int train_noise_samples = 10;
  int predict_dropout_samples = 20;
  int predict_noise_samples = 10;
  double dropout_rate = 0.2;         // second-to-last layer only
  double log_variance_init = -5.0;   // output-bias init for the variance head
  void validate() const;
};

// Adds the aleatoric head and last-hidden-layer dropout to a base topology.
MlpConfig bayes_config(const MlpConfig& base, const BayesConfig& bayes);

// Mean over rows of -ln( mean_s softmax(mu + sigma .* eps_s)[label] ), with
// eps drawn row-major (row, sample, class) from `noise`. `out` packs
// [mu | log sigma^2] per row. Optionally fills d(loss)/d(out).
double bayes_loss(const Eigen::MatrixXd& out, std::span<const int> labels,
                  int noise_samples, Rng& noise, Eigen::MatrixXd* dout = nullptr);

// Trains the aleatoric-head net with the sampled-logit loss; validation
// plateau monitoring uses the clipped NLL of the mean logits.
TrainResult train_bayes(const MlpConfig& base, const Dataset& train_set,
                        const Dataset& val_set, const TrainConfig& train_cfg,
                        const BayesConfig& bayes_cfg);

// Prediction-time average over dropout masks and logit noise:
//   mean_{d,s} softmax(mu_d / T + sigma_d .* eps_s)
// with batchnorm running statistics throughout. `temperature` rescales only
// the mean logits. ids/labels/groups follow predict()'s conventions.
ProbabilitySet bayes_predict(const MlpModel& model,
                             const Eigen::MatrixXd& inputs,
                             const BayesConfig& bayes_cfg, std::uint64_t seed,
                             double temperature = 1.0, GroupTag tag = GroupTag::familiar_test,
                             std::span<const std::string> ids = {},
                             std::span<const int> labels = {},
                             std::span<const GroupTag> groups = {},
                             const std::string& id_prefix = "r");

}  // namespace calibtk
