#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "calibtk/predictions.hpp"
#include "calibtk/rng.hpp"
#include "json.hpp"

namespace calibtk {

struct MlpConfig {
  int input_dim = 2;
  std::vector<int> hidden_widths;
  int class_count = 2;
  double dropout_rate = 0.0;  // in [0, 1)
  bool use_batchnorm = true;
  bool aleatoric_head = false;  // adds class_count log-variance outputs
  // When set, dropout touches only the last hidden layer (the layer feeding
  // the output affine).
  bool dropout_last_hidden_only = false;

  int output_dim() const { return aleatoric_head ? 2 * class_count : class_count; }
  void validate() const;
};

struct BatchNormParams {
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
  Eigen::VectorXd running_mean;
  Eigen::VectorXd running_var;
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // fan_in x fan_out
  Eigen::VectorXd bias;
  std::optional<BatchNormParams> batchnorm;  // hidden layers only
};

enum class Mode { train, eval };

// Dense feed-forward net: per hidden layer affine -> ReLU -> batchnorm ->
// dropout, then an output affine producing logits (2C with the aleatoric
// head). Single-writer while training; eval-mode forward is pure.
class MlpModel {
 public:
  // Glorot-uniform weights, zero biases, identity batchnorm.
  static MlpModel init(const MlpConfig& config, std::uint64_t seed);

  const MlpConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }
  std::uint64_t seed() const { return seed_; }

  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::size_t hidden_count() const { return layers_.size() - 1; }

  nlohmann::json to_json() const;
  static MlpModel from_json(const nlohmann::json& j);

 private:
  MlpConfig config_;
  std::vector<DenseLayer> layers_;
  Mode mode_ = Mode::train;
  std::uint64_t seed_ = 0;
};

struct LayerCache {
  Eigen::MatrixXd input;
  Eigen::MatrixXd pre_act;     // affine output
  Eigen::MatrixXd post_act;    // after ReLU (hidden layers)
  Eigen::MatrixXd normalized;  // batchnorm x-hat
  Eigen::VectorXd batch_mean;
  Eigen::VectorXd batch_var;
  Eigen::MatrixXd dropout_mask;  // scaled inverted-dropout mask, empty if unused
};

struct ForwardCache {
  std::vector<LayerCache> layers;
};

// Train-mode forward: batch statistics (updated into running stats) and
// active dropout (requires rng when the rate is positive). Errors on a
// single-row batch when batchnorm is enabled.
Eigen::MatrixXd forward(MlpModel& model, const Eigen::MatrixXd& batch,
                        Mode mode, ForwardCache* cache = nullptr,
                        Rng* rng = nullptr);

// Eval-mode forward on a const model: running statistics, no dropout.
Eigen::MatrixXd forward_eval(const MlpModel& model,
                             const Eigen::MatrixXd& batch);

// MC-dropout forward: running statistics with dropout left active.
Eigen::MatrixXd forward_mc(const MlpModel& model, const Eigen::MatrixXd& batch,
                           Rng& rng);

struct LayerGrads {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
  Eigen::VectorXd gamma;
  Eigen::VectorXd beta;
};

struct Gradients {
  std::vector<LayerGrads> layers;
  static Gradients zeros_like(const MlpModel& model);
};

// Backpropagates d(loss)/d(net output) through a cached train-mode forward.
Gradients backward(const MlpModel& model, const ForwardCache& cache,
                   const Eigen::MatrixXd& dout);

// Mean softmax cross-entropy; optionally fills d(loss)/d(logits).
double softmax_cross_entropy(const Eigen::MatrixXd& logits,
                             std::span<const int> labels,
                             Eigen::MatrixXd* dlogits = nullptr);

// Train-mode forward + cross-entropy + full backward pass.
std::pair<double, Gradients> loss_and_backward(MlpModel& model,
                                               const Eigen::MatrixXd& batch,
                                               std::span<const int> labels,
                                               Rng* rng = nullptr);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<LayerGrads> m;
  std::vector<LayerGrads> v;
  long long step = 0;
  static AdamState zeros_like(const MlpModel& model);
};

// Standard bias-corrected Adam update, applied in place.
void adam_step(MlpModel& model, const Gradients& grads, AdamState& state,
               double lr, const AdamConfig& config = {});

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 128;
  int max_epochs = 30;
  int plateau_patience = 5;
  double lr_drop_factor = 10.0;
  double extension_ratio = 1.0 / 3.0;
  double plateau_min_delta = 1e-4;
  int max_lr_drops = 2;
  AdamConfig adam;
  std::uint64_t seed = 0;
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_nll = 0.0;
  double lr = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  int lr_drops = 0;
};

struct Dataset {
  Eigen::MatrixXd inputs;  // N x input_dim
  std::vector<int> labels;  // kUnlabeled allowed
  std::vector<std::string> ids;  // optional; empty or size N

  int size() const { return static_cast<int>(inputs.rows()); }
  void validate(int class_count) const;
};

// Custom per-batch loss: given raw network outputs for the rows `rows` of
// the training data, fill d(loss)/d(out) and return the loss.
using BatchLossFn = std::function<double(
    const Eigen::MatrixXd& net_out, std::span<const int> rows,
    Eigen::MatrixXd& dout)>;

// Optional per-epoch row selection (defaults to every row once).
using EpochRowsFn = std::function<std::vector<int>(int epoch, Rng& rng)>;

struct TrainHooks {
  BatchLossFn loss;
  EpochRowsFn epoch_rows;
  std::function<double(const MlpModel&)> val_metric;  // lower is better
};

struct TrainResult {
  MlpModel model;  // eval mode
  TrainLog log;
};

// Epoch loop with seeded shuffling and the validation-plateau schedule:
// when the best val metric fails to improve by plateau_min_delta for
// plateau_patience epochs, lr is divided by lr_drop_factor and the epoch
// budget extends by ceil(completed * extension_ratio); at most max_lr_drops
// drops, after which the next plateau stops training.
TrainResult train(MlpModel model, const Dataset& train_set,
                  const Dataset& val_set, const TrainConfig& config);

TrainResult train_custom(MlpModel model, const Dataset& data,
                         const TrainConfig& config, const TrainHooks& hooks);

// Fixed learning-rate schedule recorded from a previous run: (epochs, lr)
// segments replayed without plateau monitoring. Used to retrain on
// train+val with the tuned epoch counts.
struct LrSchedule {
  std::vector<std::pair<int, double>> segments;
};

LrSchedule schedule_from_log(const TrainLog& log);

MlpModel train_fixed_schedule(MlpModel model, const Dataset& data,
                              const TrainConfig& config,
                              const LrSchedule& schedule);

// Clipped NLL of eval-mode predictions against val labels (mean logits when
// the model carries an aleatoric head).
double validation_nll(const MlpModel& model, const Dataset& val_set);

// Eval-mode logits wrapped as prediction records. ids default to
// "<prefix><row>"; labels may be empty only for the unsup group.
PredictionSet predict(const MlpModel& model, const Eigen::MatrixXd& inputs,
                      GroupTag tag, std::span<const std::string> ids = {},
                      std::span<const int> labels = {},
                      const std::string& id_prefix = "r");

}  // namespace calibtk
