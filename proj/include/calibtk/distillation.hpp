#pragma once

#include <Eigen/Core>
#include <span>

#include "calibtk/mlp.hpp"

namespace calibtk {

// Training a single student against an ensemble's averaged probabilities.
struct DistillConfig {
  double temperature = 2.0;  // softening for teacher and student
  double lambda_cls = 0.5;   // weight of the hard-label term
  double unsup_ratio = 0.25;  // unsupervised rows per epoch / labeled rows
  void validate() const;
};

// Row-wise p^(1/T), renormalized. T=1 returns the input.
Eigen::MatrixXd soften(const Eigen::MatrixXd& probs, double temperature);

// Mean over rows of
//   CE(target_row, softmax(z/T)) + lambda_cls * [labeled] * CE(label, softmax(z))
// where targets are already-softened teacher probabilities and rows with
// label kUnlabeled contribute only the first term. Optionally fills
// d(loss)/d(logits).
double distill_loss(const Eigen::MatrixXd& logits,
                    const Eigen::MatrixXd& targets, std::span<const int> labels,
                    double temperature, double lambda_cls,
                    Eigen::MatrixXd* dlogits = nullptr);

// Student trained on the labeled set only. `teacher` holds the ensemble's
// averaged probabilities aligned row-for-row with train_set.
TrainResult train_distilled(const MlpConfig& base, const Dataset& train_set,
                            const Eigen::MatrixXd& teacher,
                            const Dataset& val_set,
                            const TrainConfig& train_cfg,
                            const DistillConfig& distill_cfg);

// Student additionally distilled on an unsupervised pool: each epoch uses
// every labeled row plus a fresh subsample of the pool sized
// round(unsup_ratio * |train_set|). Pool rows carry no hard-label term.
TrainResult train_g_distilled(const MlpConfig& base, const Dataset& train_set,
                              const Eigen::MatrixXd& teacher,
                              const Dataset& unsup_set,
                              const Eigen::MatrixXd& unsup_teacher,
                              const Dataset& val_set,
                              const TrainConfig& train_cfg,
                              const DistillConfig& distill_cfg);

}  // namespace calibtk
