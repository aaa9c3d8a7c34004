#include "calibtk/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <utility>

#include "calibtk/errors.hpp"

namespace calibtk {

void BayesConfig::validate() const {
  if (train_noise_samples < 1 || predict_noise_samples < 1 ||
      predict_dropout_samples < 1) {
    throw InputError("bayes config: sample counts must be >= 1");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw InputError("bayes config: dropout_rate must be in [0, 1)");
  }
}

MlpConfig bayes_config(const MlpConfig& base, const BayesConfig& bayes) {
  bayes.validate();
  MlpConfig config = base;
  config.aleatoric_head = true;
  config.dropout_rate = bayes.dropout_rate;
  config.dropout_last_hidden_only = true;
  config.validate();
  return config;
}

double bayes_loss(const Eigen::MatrixXd& out, std::span<const int> labels,
                  int noise_samples, Rng& noise, Eigen::MatrixXd* dout) {
  const Eigen::Index n = out.rows();
  if (n == 0) throw InputError("bayes loss: empty batch");
  if (out.cols() % 2 != 0) {
    throw InputError("bayes loss: output width must be 2 * class_count");
  }
  const Eigen::Index classes = out.cols() / 2;
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw InputError("bayes loss: label count does not match rows");
  }
  if (noise_samples < 1) throw InputError("bayes loss: need >= 1 noise sample");
  if (dout != nullptr) {
    dout->resize(n, out.cols());
    dout->setZero();
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  Eigen::MatrixXd eps(noise_samples, classes);
  Eigen::MatrixXd probs(noise_samples, classes);
  Eigen::VectorXd log_p(noise_samples);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= classes) {
      throw InputError("bayes loss: label out of range");
    }
    const Eigen::ArrayXd mu = out.row(r).head(classes).transpose();
    const Eigen::ArrayXd sigma =
        (0.5 * out.row(r).tail(classes).transpose().array()).exp();
    for (int s = 0; s < noise_samples; ++s) {
      for (Eigen::Index k = 0; k < classes; ++k) {
        eps(s, k) = noise.normal();
      }
      const Eigen::ArrayXd z = mu + sigma * eps.row(s).transpose().array();
      const double peak = z.maxCoeff();
      const Eigen::ArrayXd exps = (z - peak).exp();
      const double denom = exps.sum();
      probs.row(s) = (exps / denom).transpose();
      log_p(s) = z(label) - peak - std::log(denom);
    }
    // log mean_s p_s, via logsumexp over the per-sample log-probabilities.
    const double m = log_p.maxCoeff();
    const Eigen::ArrayXd shifted = (log_p.array() - m).exp();
    const double shifted_sum = shifted.sum();
    total -= m + std::log(shifted_sum) -
             std::log(static_cast<double>(noise_samples));
    if (dout != nullptr) {
      // Weight for sample s: p_s / sum_s' p_s'.
      const Eigen::ArrayXd w = shifted / shifted_sum;
      for (int s = 0; s < noise_samples; ++s) {
        Eigen::ArrayXd dz = probs.row(s).transpose().array();
        dz(label) -= 1.0;
        dz *= inv_n * w(s);  // d(-log P)/dz = w * (softmax - onehot)
        for (Eigen::Index k = 0; k < classes; ++k) {
          (*dout)(r, k) += dz(k);
          (*dout)(r, classes + k) += dz(k) * 0.5 * sigma(k) * eps(s, k);
        }
      }
    }
  }
  return total * inv_n;
}

TrainResult train_bayes(const MlpConfig& base, const Dataset& train_set,
                        const Dataset& val_set, const TrainConfig& train_cfg,
                        const BayesConfig& bayes_cfg) {
  const MlpConfig config = bayes_config(base, bayes_cfg);
  MlpModel model = MlpModel::init(config, train_cfg.seed);
  const int classes = config.class_count;
  Eigen::VectorXd& out_bias = model.layers().back().bias;
  out_bias.tail(classes).setConstant(bayes_cfg.log_variance_init);

  auto noise = std::make_shared<Rng>(derive_seed(train_cfg.seed, 0x6e6f6973ULL));
  TrainHooks hooks;
  hooks.loss = [&train_set, noise, samples = bayes_cfg.train_noise_samples](
                   const Eigen::MatrixXd& out, std::span<const int> rows,
                   Eigen::MatrixXd& dout) {
    std::vector<int> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int label = train_set.labels[static_cast<std::size_t>(rows[i])];
      if (label < 0) {
        throw InputError("bayes train: unlabeled row in training set");
      }
      labels[i] = label;
    }
    return bayes_loss(out, labels, samples, *noise, &dout);
  };
  hooks.val_metric = [&val_set](const MlpModel& m) {
    return validation_nll(m, val_set);
  };
  return train_custom(std::move(model), train_set, train_cfg, hooks);
}

ProbabilitySet bayes_predict(const MlpModel& model,
                             const Eigen::MatrixXd& inputs,
                             const BayesConfig& bayes_cfg, std::uint64_t seed,
                             double temperature, GroupTag tag,
                             std::span<const std::string> ids,
                             std::span<const int> labels,
                             std::span<const GroupTag> groups,
                             const std::string& id_prefix) {
  bayes_cfg.validate();
  if (!model.config().aleatoric_head) {
    throw InputError("bayes predict: model lacks an aleatoric head");
  }
  if (temperature <= 0.0) {
    throw InputError("bayes predict: temperature must be positive");
  }
  const Eigen::Index n = inputs.rows();
  const int classes = model.config().class_count;
  auto check_len = [n](std::size_t got, const char* what) {
    if (got != 0 && static_cast<Eigen::Index>(got) != n) {
      throw InputError(std::string("bayes predict: ") + what +
                       " count does not match rows");
    }
  };
  check_len(ids.size(), "id");
  check_len(labels.size(), "label");
  check_len(groups.size(), "group");

  Rng rng(seed);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(n, classes);
  const int draws =
      bayes_cfg.predict_dropout_samples * bayes_cfg.predict_noise_samples;
  for (int d = 0; d < bayes_cfg.predict_dropout_samples; ++d) {
    const Eigen::MatrixXd out = forward_mc(model, inputs, rng);
    for (Eigen::Index r = 0; r < n; ++r) {
      const Eigen::ArrayXd mu =
          out.row(r).head(classes).transpose().array() / temperature;
      const Eigen::ArrayXd sigma =
          (0.5 * out.row(r).tail(classes).transpose().array()).exp();
      for (int s = 0; s < bayes_cfg.predict_noise_samples; ++s) {
        Eigen::VectorXd z(classes);
        for (int k = 0; k < classes; ++k) {
          z(k) = mu(k) + sigma(k) * rng.normal();
        }
        acc.row(r) += softmax_row(z).transpose();
      }
    }
  }
  acc /= static_cast<double>(draws);
  // Remove accumulated round-off so rows sum to 1 exactly enough to validate.
  for (Eigen::Index r = 0; r < n; ++r) {
    acc.row(r) /= acc.row(r).sum();
  }

  std::vector<std::string> out_ids;
  std::vector<int> out_labels;
  std::vector<GroupTag> out_groups;
  out_ids.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    out_ids.push_back(ids.empty() ? id_prefix + std::to_string(r)
                                  : ids[static_cast<std::size_t>(r)]);
    out_labels.push_back(labels.empty() ? kUnlabeled
                                        : labels[static_cast<std::size_t>(r)]);
    out_groups.push_back(groups.empty() ? tag
                                        : groups[static_cast<std::size_t>(r)]);
  }
  return ProbabilitySet(std::move(acc), std::move(out_ids),
                        std::move(out_labels), std::move(out_groups));
}

}  // namespace calibtk
