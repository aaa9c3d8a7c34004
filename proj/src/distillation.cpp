#include "calibtk/distillation.hpp"

#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

#include "calibtk/errors.hpp"

namespace calibtk {

namespace {

// Guards ln(q) terms; teacher probabilities may contain exact zeros.
constexpr double kTinyProb = 1e-300;

void check_teacher(const Eigen::MatrixXd& teacher, const Dataset& data,
                   int class_count, const char* what) {
  if (teacher.rows() != data.inputs.rows() || teacher.cols() != class_count) {
    throw InputError(std::string("distill: ") + what +
                     " teacher shape does not match data");
  }
}

Eigen::ArrayXd softmax_array(const Eigen::ArrayXd& z) {
  const Eigen::ArrayXd shifted = z - z.maxCoeff();
  const Eigen::ArrayXd exps = shifted.exp();
  return exps / exps.sum();
}

BatchLossFn distill_batch_loss(const Dataset& data,
                               const Eigen::MatrixXd& targets,
                               const DistillConfig& cfg) {
  return [&data, &targets, cfg](const Eigen::MatrixXd& out,
                                std::span<const int> rows,
                                Eigen::MatrixXd& dout) {
    Eigen::MatrixXd batch_targets(static_cast<Eigen::Index>(rows.size()),
                                  targets.cols());
    std::vector<int> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      batch_targets.row(static_cast<Eigen::Index>(i)) = targets.row(rows[i]);
      labels[i] = data.labels[static_cast<std::size_t>(rows[i])];
    }
    return distill_loss(out, batch_targets, labels, cfg.temperature,
                        cfg.lambda_cls, &dout);
  };
}

}  // namespace

void DistillConfig::validate() const {
  if (temperature <= 0.0) {
    throw InputError("distill config: temperature must be positive");
  }
  if (lambda_cls < 0.0) {
    throw InputError("distill config: lambda_cls must be >= 0");
  }
  if (unsup_ratio <= 0.0) {
    throw InputError("distill config: unsup_ratio must be positive");
  }
}

Eigen::MatrixXd soften(const Eigen::MatrixXd& probs, double temperature) {
  if (temperature <= 0.0) {
    throw InputError("soften: temperature must be positive");
  }
  Eigen::MatrixXd out(probs.rows(), probs.cols());
  const double inv_t = 1.0 / temperature;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::ArrayXd row = probs.row(r).transpose().array().pow(inv_t);
    const double sum = row.sum();
    if (!(sum > 0.0)) {
      throw InputError("soften: probability row " + std::to_string(r) +
                       " sums to zero after softening");
    }
    out.row(r) = (row / sum).transpose();
  }
  return out;
}

double distill_loss(const Eigen::MatrixXd& logits,
                    const Eigen::MatrixXd& targets, std::span<const int> labels,
                    double temperature, double lambda_cls,
                    Eigen::MatrixXd* dlogits) {
  const Eigen::Index n = logits.rows();
  const Eigen::Index classes = logits.cols();
  if (n == 0) throw InputError("distill loss: empty batch");
  if (targets.rows() != n || targets.cols() != classes) {
    throw InputError("distill loss: target shape does not match logits");
  }
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw InputError("distill loss: label count does not match rows");
  }
  if (temperature <= 0.0) {
    throw InputError("distill loss: temperature must be positive");
  }
  if (dlogits != nullptr) dlogits->resize(n, classes);
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::ArrayXd z = logits.row(r).transpose().array();
    const Eigen::ArrayXd q = targets.row(r).transpose().array();
    const Eigen::ArrayXd s = softmax_array(z / temperature);
    double row_loss =
        -(q * (s + kTinyProb).log()).sum();
    Eigen::ArrayXd dz = (s - q) / temperature;
    const int label = labels[static_cast<std::size_t>(r)];
    if (label != kUnlabeled) {
      if (label < 0 || label >= classes) {
        throw InputError("distill loss: label out of range");
      }
      const Eigen::ArrayXd p = softmax_array(z);
      row_loss -= lambda_cls * std::log(p(label) + kTinyProb);
      Eigen::ArrayXd dcls = p;
      dcls(label) -= 1.0;
      dz += lambda_cls * dcls;
    }
    total += row_loss;
    if (dlogits != nullptr) {
      dlogits->row(r) = (dz * inv_n).transpose();
    }
  }
  return total * inv_n;
}

TrainResult train_distilled(const MlpConfig& base, const Dataset& train_set,
                            const Eigen::MatrixXd& teacher,
                            const Dataset& val_set,
                            const TrainConfig& train_cfg,
                            const DistillConfig& distill_cfg) {
  distill_cfg.validate();
  check_teacher(teacher, train_set, base.class_count, "train");
  MlpModel model = MlpModel::init(base, train_cfg.seed);
  const Eigen::MatrixXd targets = soften(teacher, distill_cfg.temperature);
  TrainHooks hooks;
  hooks.loss = distill_batch_loss(train_set, targets, distill_cfg);
  hooks.val_metric = [&val_set](const MlpModel& m) {
    return validation_nll(m, val_set);
  };
  return train_custom(std::move(model), train_set, train_cfg, hooks);
}

TrainResult train_g_distilled(const MlpConfig& base, const Dataset& train_set,
                              const Eigen::MatrixXd& teacher,
                              const Dataset& unsup_set,
                              const Eigen::MatrixXd& unsup_teacher,
                              const Dataset& val_set,
                              const TrainConfig& train_cfg,
                              const DistillConfig& distill_cfg) {
  distill_cfg.validate();
  check_teacher(teacher, train_set, base.class_count, "train");
  check_teacher(unsup_teacher, unsup_set, base.class_count, "pool");
  if (unsup_set.size() == 0) {
    throw InputError("g-distill: empty unsupervised pool");
  }
  const int n_labeled = train_set.size();
  const int n_pool = unsup_set.size();
  const int per_epoch = std::max(
      1, static_cast<int>(std::lround(distill_cfg.unsup_ratio * n_labeled)));
  if (per_epoch > n_pool) {
    throw InputError("g-distill: pool smaller than the per-epoch sample");
  }

  Dataset combined;
  combined.inputs.resize(n_labeled + n_pool, train_set.inputs.cols());
  combined.inputs.topRows(n_labeled) = train_set.inputs;
  combined.inputs.bottomRows(n_pool) = unsup_set.inputs;
  combined.labels = train_set.labels;
  combined.labels.insert(combined.labels.end(),
                         static_cast<std::size_t>(n_pool), kUnlabeled);

  Eigen::MatrixXd stacked(n_labeled + n_pool, teacher.cols());
  stacked.topRows(n_labeled) = teacher;
  stacked.bottomRows(n_pool) = unsup_teacher;
  const Eigen::MatrixXd targets = soften(stacked, distill_cfg.temperature);

  MlpModel model = MlpModel::init(base, train_cfg.seed);
  TrainHooks hooks;
  hooks.loss = distill_batch_loss(combined, targets, distill_cfg);
  hooks.val_metric = [&val_set](const MlpModel& m) {
    return validation_nll(m, val_set);
  };
  hooks.epoch_rows = [n_labeled, n_pool, per_epoch](int, Rng& rng) {
    std::vector<int> rows(static_cast<std::size_t>(n_labeled));
    std::iota(rows.begin(), rows.end(), 0);
    std::vector<int> pool(static_cast<std::size_t>(n_pool));
    std::iota(pool.begin(), pool.end(), n_labeled);
    rng.shuffle(pool);
    rows.insert(rows.end(), pool.begin(), pool.begin() + per_epoch);
    return rows;
  };
  return train_custom(std::move(model), combined, train_cfg, hooks);
}

}  // namespace calibtk
