#include "calibtk/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "calibtk/errors.hpp"
#include "calibtk/metrics.hpp"

namespace calibtk {

namespace {

constexpr double kBnEpsilon = 1e-5;
constexpr double kBnMomentum = 0.9;  // running = m*running + (1-m)*batch

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, Eigen::Index rows,
                                 Eigen::Index cols, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw InputError("model json: " + what + " has wrong row count");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw InputError("model json: " + what + " has wrong column count");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
  }
  return m;
}

nlohmann::json vector_to_json(const Eigen::VectorXd& v) {
  nlohmann::json out = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j, Eigen::Index size,
                                 const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != size) {
    throw InputError("model json: " + what + " has wrong length");
  }
  Eigen::VectorXd v(size);
  for (Eigen::Index i = 0; i < size; ++i) {
    v(i) = j[static_cast<std::size_t>(i)].get<double>();
  }
  return v;
}

bool dropout_applies(const MlpConfig& config, std::size_t hidden_index,
                     std::size_t hidden_count) {
  if (config.dropout_rate <= 0.0) return false;
  if (config.dropout_last_hidden_only) return hidden_index + 1 == hidden_count;
  return true;
}

// Shared forward walk. `update_running` points at the model's layers when
// train-mode batch statistics should refresh the running averages.
Eigen::MatrixXd run_forward(const MlpConfig& config,
                            const std::vector<DenseLayer>& layers,
                            const Eigen::MatrixXd& batch, bool batch_stats,
                            bool dropout_active,
                            std::vector<DenseLayer>* update_running,
                            ForwardCache* cache, Rng* rng) {
  if (batch.cols() != config.input_dim) {
    throw InputError("forward: batch has " + std::to_string(batch.cols()) +
                     " columns, expected " + std::to_string(config.input_dim));
  }
  if (cache != nullptr) {
    cache->layers.assign(layers.size(), LayerCache{});
  }
  const std::size_t hidden_count = layers.size() - 1;
  Eigen::MatrixXd x = batch;
  for (std::size_t i = 0; i < hidden_count; ++i) {
    const DenseLayer& layer = layers[i];
    LayerCache* lc = cache != nullptr ? &cache->layers[i] : nullptr;
    if (lc != nullptr) lc->input = x;
    Eigen::MatrixXd pre =
        (x * layer.weight).rowwise() + layer.bias.transpose();
    Eigen::MatrixXd h = pre.cwiseMax(0.0);
    if (lc != nullptr) {
      lc->pre_act = pre;
      lc->post_act = h;
    }
    if (layer.batchnorm.has_value()) {
      const BatchNormParams& bn = *layer.batchnorm;
      Eigen::VectorXd mean;
      Eigen::VectorXd var;
      if (batch_stats) {
        if (h.rows() < 2) {
          throw InputError(
              "forward: batchnorm needs at least 2 rows in train mode");
        }
        mean = h.colwise().mean();
        var = (h.rowwise() - mean.transpose())
                  .array()
                  .square()
                  .colwise()
                  .mean();
        if (update_running != nullptr) {
          BatchNormParams& live = *(*update_running)[i].batchnorm;
          live.running_mean =
              kBnMomentum * live.running_mean + (1.0 - kBnMomentum) * mean;
          live.running_var =
              kBnMomentum * live.running_var + (1.0 - kBnMomentum) * var;
        }
      } else {
        mean = bn.running_mean;
        var = bn.running_var;
      }
      const Eigen::ArrayXd inv_std =
          (var.array() + kBnEpsilon).sqrt().inverse();
      Eigen::MatrixXd normalized =
          ((h.rowwise() - mean.transpose()).array().rowwise() *
           inv_std.transpose())
              .matrix();
      if (lc != nullptr) {
        lc->normalized = normalized;
        lc->batch_mean = mean;
        lc->batch_var = var;
      }
      h = ((normalized.array().rowwise() * bn.gamma.transpose().array())
               .rowwise() +
           bn.beta.transpose().array())
              .matrix();
    }
    if (dropout_active && dropout_applies(config, i, hidden_count)) {
      if (rng == nullptr) {
        throw InputError("forward: dropout requires a random stream");
      }
      const double keep = 1.0 - config.dropout_rate;
      Eigen::MatrixXd mask(h.rows(), h.cols());
      for (Eigen::Index r = 0; r < h.rows(); ++r) {
        for (Eigen::Index c = 0; c < h.cols(); ++c) {
          mask(r, c) = rng->uniform() < keep ? 1.0 / keep : 0.0;
        }
      }
      h = h.cwiseProduct(mask);
      if (lc != nullptr) lc->dropout_mask = std::move(mask);
    }
    x = std::move(h);
  }
  const DenseLayer& out_layer = layers.back();
  if (cache != nullptr) cache->layers.back().input = x;
  Eigen::MatrixXd out =
      (x * out_layer.weight).rowwise() + out_layer.bias.transpose();
  if (cache != nullptr) cache->layers.back().pre_act = out;
  return out;
}

std::vector<LayerGrads> zero_grads(const MlpModel& model) {
  std::vector<LayerGrads> out;
  out.reserve(model.layers().size());
  for (const DenseLayer& layer : model.layers()) {
    LayerGrads g;
    g.weight = Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols());
    g.bias = Eigen::VectorXd::Zero(layer.bias.size());
    if (layer.batchnorm.has_value()) {
      g.gamma = Eigen::VectorXd::Zero(layer.batchnorm->gamma.size());
      g.beta = Eigen::VectorXd::Zero(layer.batchnorm->beta.size());
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <typename Dense>
void adam_update(Dense& param, const Dense& grad, Dense& m, Dense& v,
                 double lr, const AdamConfig& cfg, double bias1,
                 double bias2) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = (cfg.beta2 * v.array() + (1.0 - cfg.beta2) * grad.array().square())
          .matrix();
  param.array() -=
      lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + cfg.epsilon);
}

std::vector<int> default_rows(int n) {
  std::vector<int> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  return rows;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& inputs,
                            std::span<const int> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = inputs.row(rows[i]);
  }
  return out;
}

// One pass over `rows` in shuffled order. A trailing single row folds into
// the previous batch so train-mode batchnorm always sees >= 2 rows.
double run_epoch(MlpModel& model, const Dataset& data, std::vector<int> rows,
                 const BatchLossFn& loss, AdamState& adam, double lr,
                 const TrainConfig& config, Rng& rng) {
  rng.shuffle(rows);
  model.set_mode(Mode::train);
  const std::size_t n = rows.size();
  const std::size_t batch_size = static_cast<std::size_t>(config.batch_size);
  double total = 0.0;
  std::size_t seen = 0;
  std::size_t start = 0;
  while (start < n) {
    std::size_t end = std::min(start + batch_size, n);
    if (model.config().use_batchnorm && n - end == 1) end = n;
    const std::span<const int> batch_rows(rows.data() + start, end - start);
    const Eigen::MatrixXd inputs = gather_rows(data.inputs, batch_rows);
    ForwardCache cache;
    const Eigen::MatrixXd out =
        forward(model, inputs, Mode::train, &cache, &rng);
    Eigen::MatrixXd dout = Eigen::MatrixXd::Zero(out.rows(), out.cols());
    const double batch_loss = loss(out, batch_rows, dout);
    const Gradients grads = backward(model, cache, dout);
    adam_step(model, grads, adam, lr, config.adam);
    total += batch_loss * static_cast<double>(batch_rows.size());
    seen += batch_rows.size();
    start = end;
  }
  return seen > 0 ? total / static_cast<double>(seen) : 0.0;
}

BatchLossFn cross_entropy_on(const Dataset& data) {
  return [&data](const Eigen::MatrixXd& out, std::span<const int> rows,
                 Eigen::MatrixXd& dout) {
    std::vector<int> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int label = data.labels[static_cast<std::size_t>(rows[i])];
      if (label < 0) {
        throw InputError("train: unlabeled row in a supervised batch");
      }
      labels[i] = label;
    }
    return softmax_cross_entropy(out, labels, &dout);
  };
}

}  // namespace

void MlpConfig::validate() const {
  if (input_dim < 1) throw InputError("mlp config: input_dim must be >= 1");
  if (class_count < 2) {
    throw InputError("mlp config: class_count must be >= 2");
  }
  if (hidden_widths.empty()) {
    throw InputError("mlp config: at least one hidden layer required");
  }
  for (const int w : hidden_widths) {
    if (w < 1) throw InputError("mlp config: hidden width must be >= 1");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw InputError("mlp config: dropout_rate must be in [0, 1)");
  }
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw InputError("train config: learning_rate must be positive");
  if (batch_size < 1) throw InputError("train config: batch_size must be >= 1");
  if (max_epochs < 1) throw InputError("train config: max_epochs must be >= 1");
  if (plateau_patience < 1) {
    throw InputError("train config: plateau_patience must be >= 1");
  }
  if (lr_drop_factor <= 1.0) {
    throw InputError("train config: lr_drop_factor must be > 1");
  }
  if (max_lr_drops < 0) throw InputError("train config: max_lr_drops must be >= 0");
}

void Dataset::validate(int class_count) const {
  if (static_cast<int>(labels.size()) != size()) {
    throw InputError("dataset: label count does not match input rows");
  }
  if (!ids.empty() && static_cast<int>(ids.size()) != size()) {
    throw InputError("dataset: id count does not match input rows");
  }
  for (const int label : labels) {
    if (label < kUnlabeled || label >= class_count) {
      throw InputError("dataset: label " + std::to_string(label) +
                       " out of range");
    }
  }
}

MlpModel MlpModel::init(const MlpConfig& config, std::uint64_t seed) {
  config.validate();
  MlpModel model;
  model.config_ = config;
  model.seed_ = seed;
  Rng rng(seed);
  std::vector<int> dims;
  dims.push_back(config.input_dim);
  dims.insert(dims.end(), config.hidden_widths.begin(),
              config.hidden_widths.end());
  dims.push_back(config.output_dim());
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const int fan_in = dims[i];
    const int fan_out = dims[i + 1];
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    DenseLayer layer;
    layer.weight.resize(fan_in, fan_out);
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) {
        layer.weight(r, c) = rng.uniform(-bound, bound);
      }
    }
    layer.bias = Eigen::VectorXd::Zero(fan_out);
    const bool is_hidden = i + 2 < dims.size();
    if (is_hidden && config.use_batchnorm) {
      BatchNormParams bn;
      bn.gamma = Eigen::VectorXd::Ones(fan_out);
      bn.beta = Eigen::VectorXd::Zero(fan_out);
      bn.running_mean = Eigen::VectorXd::Zero(fan_out);
      bn.running_var = Eigen::VectorXd::Ones(fan_out);
      layer.batchnorm = std::move(bn);
    }
    model.layers_.push_back(std::move(layer));
  }
  return model;
}

nlohmann::json MlpModel::to_json() const {
  nlohmann::json j;
  j["config"] = {{"input_dim", config_.input_dim},
                 {"hidden_widths", config_.hidden_widths},
                 {"class_count", config_.class_count},
                 {"dropout_rate", config_.dropout_rate},
                 {"use_batchnorm", config_.use_batchnorm},
                 {"aleatoric_head", config_.aleatoric_head},
                 {"dropout_last_hidden_only", config_.dropout_last_hidden_only}};
  j["seed"] = seed_;
  nlohmann::json layers = nlohmann::json::array();
  for (const DenseLayer& layer : layers_) {
    nlohmann::json lj;
    lj["weight"] = matrix_to_json(layer.weight);
    lj["bias"] = vector_to_json(layer.bias);
    if (layer.batchnorm.has_value()) {
      lj["batchnorm"] = {{"gamma", vector_to_json(layer.batchnorm->gamma)},
                         {"beta", vector_to_json(layer.batchnorm->beta)},
                         {"running_mean",
                          vector_to_json(layer.batchnorm->running_mean)},
                         {"running_var",
                          vector_to_json(layer.batchnorm->running_var)}};
    } else {
      lj["batchnorm"] = nullptr;
    }
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  return j;
}

MlpModel MlpModel::from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("config") || !j.contains("layers")) {
    throw InputError("model json: expected config and layers");
  }
  const nlohmann::json& cj = j.at("config");
  MlpConfig config;
  try {
    config.input_dim = cj.at("input_dim").get<int>();
    config.hidden_widths = cj.at("hidden_widths").get<std::vector<int>>();
    config.class_count = cj.at("class_count").get<int>();
    config.dropout_rate = cj.at("dropout_rate").get<double>();
    config.use_batchnorm = cj.at("use_batchnorm").get<bool>();
    config.aleatoric_head = cj.at("aleatoric_head").get<bool>();
    config.dropout_last_hidden_only =
        cj.at("dropout_last_hidden_only").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model json: bad config: ") + e.what());
  }
  config.validate();
  MlpModel model;
  model.config_ = config;
  model.seed_ = j.value("seed", std::uint64_t{0});
  std::vector<int> dims;
  dims.push_back(config.input_dim);
  dims.insert(dims.end(), config.hidden_widths.begin(),
              config.hidden_widths.end());
  dims.push_back(config.output_dim());
  const nlohmann::json& layers = j.at("layers");
  if (!layers.is_array() || layers.size() + 1 != dims.size()) {
    throw InputError("model json: wrong layer count");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const nlohmann::json& lj = layers[i];
    const Eigen::Index fan_in = dims[i];
    const Eigen::Index fan_out = dims[i + 1];
    DenseLayer layer;
    layer.weight = matrix_from_json(lj.at("weight"), fan_in, fan_out,
                                    "layer " + std::to_string(i) + " weight");
    layer.bias = vector_from_json(lj.at("bias"), fan_out,
                                  "layer " + std::to_string(i) + " bias");
    const bool is_hidden = i + 1 < layers.size();
    const bool has_bn =
        lj.contains("batchnorm") && !lj.at("batchnorm").is_null();
    if (has_bn != (is_hidden && config.use_batchnorm)) {
      throw InputError("model json: batchnorm present on wrong layer");
    }
    if (has_bn) {
      const nlohmann::json& bj = lj.at("batchnorm");
      BatchNormParams bn;
      bn.gamma = vector_from_json(bj.at("gamma"), fan_out, "gamma");
      bn.beta = vector_from_json(bj.at("beta"), fan_out, "beta");
      bn.running_mean =
          vector_from_json(bj.at("running_mean"), fan_out, "running_mean");
      bn.running_var =
          vector_from_json(bj.at("running_var"), fan_out, "running_var");
      layer.batchnorm = std::move(bn);
    }
    model.layers_.push_back(std::move(layer));
  }
  model.set_mode(Mode::eval);
  return model;
}

Eigen::MatrixXd forward(MlpModel& model, const Eigen::MatrixXd& batch,
                        Mode mode, ForwardCache* cache, Rng* rng) {
  const bool train = mode == Mode::train;
  if (train && model.config().dropout_rate > 0.0 && rng == nullptr) {
    throw InputError("forward: train mode with dropout requires a random stream");
  }
  return run_forward(model.config(), model.layers(), batch, train, train,
                     train ? &model.layers() : nullptr, cache, rng);
}

Eigen::MatrixXd forward_eval(const MlpModel& model,
                             const Eigen::MatrixXd& batch) {
  return run_forward(model.config(), model.layers(), batch, false, false,
                     nullptr, nullptr, nullptr);
}

Eigen::MatrixXd forward_mc(const MlpModel& model, const Eigen::MatrixXd& batch,
                           Rng& rng) {
  return run_forward(model.config(), model.layers(), batch, false, true,
                     nullptr, nullptr, &rng);
}

Gradients Gradients::zeros_like(const MlpModel& model) {
  Gradients g;
  g.layers = zero_grads(model);
  return g;
}

AdamState AdamState::zeros_like(const MlpModel& model) {
  AdamState s;
  s.m = zero_grads(model);
  s.v = zero_grads(model);
  return s;
}

Gradients backward(const MlpModel& model, const ForwardCache& cache,
                   const Eigen::MatrixXd& dout) {
  const std::vector<DenseLayer>& layers = model.layers();
  if (cache.layers.size() != layers.size()) {
    throw InputError("backward: cache does not match model");
  }
  Gradients grads = Gradients::zeros_like(model);
  const std::size_t last = layers.size() - 1;
  Eigen::MatrixXd d = dout;
  grads.layers[last].weight = cache.layers[last].input.transpose() * d;
  grads.layers[last].bias = d.colwise().sum();
  d = d * layers[last].weight.transpose();
  for (std::size_t idx = last; idx-- > 0;) {
    const DenseLayer& layer = layers[idx];
    const LayerCache& lc = cache.layers[idx];
    if (lc.dropout_mask.size() > 0) {
      d = d.cwiseProduct(lc.dropout_mask);
    }
    if (layer.batchnorm.has_value()) {
      const BatchNormParams& bn = *layer.batchnorm;
      grads.layers[idx].gamma =
          (d.cwiseProduct(lc.normalized)).colwise().sum();
      grads.layers[idx].beta = d.colwise().sum();
      const double n = static_cast<double>(d.rows());
      const Eigen::ArrayXd inv_std =
          (lc.batch_var.array() + kBnEpsilon).sqrt().inverse();
      const Eigen::MatrixXd dxhat =
          (d.array().rowwise() * bn.gamma.transpose().array()).matrix();
      const Eigen::RowVectorXd sum_dxhat = dxhat.colwise().sum();
      const Eigen::RowVectorXd sum_dxhat_xhat =
          dxhat.cwiseProduct(lc.normalized).colwise().sum();
      Eigen::MatrixXd dh =
          n * dxhat.array() -
          (Eigen::MatrixXd::Ones(d.rows(), 1) * sum_dxhat).array() -
          lc.normalized.array() *
              (Eigen::MatrixXd::Ones(d.rows(), 1) * sum_dxhat_xhat).array();
      d = ((dh.array().rowwise() * inv_std.transpose()) / n).matrix();
    }
    d = d.cwiseProduct(
        (lc.pre_act.array() > 0.0).cast<double>().matrix());
    grads.layers[idx].weight = lc.input.transpose() * d;
    grads.layers[idx].bias = d.colwise().sum();
    d = d * layer.weight.transpose();
  }
  return grads;
}

double softmax_cross_entropy(const Eigen::MatrixXd& logits,
                             std::span<const int> labels,
                             Eigen::MatrixXd* dlogits) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw InputError("cross entropy: label count does not match rows");
  }
  if (n == 0) throw InputError("cross entropy: empty batch");
  if (dlogits != nullptr) dlogits->resize(n, logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= logits.cols()) {
      throw InputError("cross entropy: label out of range");
    }
    const double peak = logits.row(r).maxCoeff();
    const Eigen::ArrayXd shifted = logits.row(r).transpose().array() - peak;
    const Eigen::ArrayXd exps = shifted.exp();
    const double denom = exps.sum();
    total -= shifted(label) - std::log(denom);
    if (dlogits != nullptr) {
      Eigen::ArrayXd probs = exps / denom;
      probs(label) -= 1.0;
      dlogits->row(r) = (probs / static_cast<double>(n)).transpose();
    }
  }
  return total / static_cast<double>(n);
}

std::pair<double, Gradients> loss_and_backward(MlpModel& model,
                                               const Eigen::MatrixXd& batch,
                                               std::span<const int> labels,
                                               Rng* rng) {
  ForwardCache cache;
  const Eigen::MatrixXd out = forward(model, batch, Mode::train, &cache, rng);
  Eigen::MatrixXd dout;
  const double loss = softmax_cross_entropy(out, labels, &dout);
  return {loss, backward(model, cache, dout)};
}

void adam_step(MlpModel& model, const Gradients& grads, AdamState& state,
               double lr, const AdamConfig& config) {
  if (grads.layers.size() != model.layers().size() ||
      state.m.size() != model.layers().size()) {
    throw InputError("adam: state does not match model");
  }
  ++state.step;
  const double bias1 = 1.0 - std::pow(config.beta1, state.step);
  const double bias2 = 1.0 - std::pow(config.beta2, state.step);
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    DenseLayer& layer = model.layers()[i];
    adam_update(layer.weight, grads.layers[i].weight, state.m[i].weight,
                state.v[i].weight, lr, config, bias1, bias2);
    adam_update(layer.bias, grads.layers[i].bias, state.m[i].bias,
                state.v[i].bias, lr, config, bias1, bias2);
    if (layer.batchnorm.has_value()) {
      adam_update(layer.batchnorm->gamma, grads.layers[i].gamma,
                  state.m[i].gamma, state.v[i].gamma, lr, config, bias1,
                  bias2);
      adam_update(layer.batchnorm->beta, grads.layers[i].beta,
                  state.m[i].beta, state.v[i].beta, lr, config, bias1, bias2);
    }
  }
}

double validation_nll(const MlpModel& model, const Dataset& val_set) {
  const int classes = model.config().class_count;
  val_set.validate(classes);
  const Eigen::MatrixXd out = forward_eval(model, val_set.inputs);
  double total = 0.0;
  int counted = 0;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const int label = val_set.labels[static_cast<std::size_t>(r)];
    if (label < 0) continue;
    const Eigen::VectorXd probs =
        softmax_row(out.row(r).head(classes).transpose());
    const double p = std::clamp(probs(label), kNllClipLo, kNllClipHi);
    total -= std::log(p);
    ++counted;
  }
  if (counted == 0) throw InputError("validation: no labeled rows");
  return total / counted;
}

TrainResult train_custom(MlpModel model, const Dataset& data,
                         const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  data.validate(model.config().class_count);
  if (!hooks.loss) throw InputError("train: loss hook required");
  if (!hooks.val_metric) throw InputError("train: validation metric required");
  if (data.size() == 0) throw InputError("train: empty training set");
  Rng rng(config.seed);
  AdamState adam = AdamState::zeros_like(model);
  TrainLog log;
  double lr = config.learning_rate;
  int budget = config.max_epochs;
  int drops = 0;
  int stale = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= budget; ++epoch) {
    std::vector<int> rows = hooks.epoch_rows ? hooks.epoch_rows(epoch, rng)
                                             : default_rows(data.size());
    if (rows.empty()) throw InputError("train: epoch produced no rows");
    const double train_loss =
        run_epoch(model, data, std::move(rows), hooks.loss, adam, lr, config,
                  rng);
    model.set_mode(Mode::eval);
    const double val = hooks.val_metric(model);
    log.epochs.push_back({epoch, train_loss, val, lr});
    if (val < best - config.plateau_min_delta) {
      best = val;
      stale = 0;
    } else if (++stale >= config.plateau_patience) {
      if (drops >= config.max_lr_drops) break;
      lr /= config.lr_drop_factor;
      ++drops;
      stale = 0;
      const int extension = static_cast<int>(
          std::ceil(static_cast<double>(epoch) * config.extension_ratio));
      budget = std::max(budget, epoch + extension);
    }
  }
  log.lr_drops = drops;
  model.set_mode(Mode::eval);
  return {std::move(model), std::move(log)};
}

TrainResult train(MlpModel model, const Dataset& train_set,
                  const Dataset& val_set, const TrainConfig& config) {
  TrainHooks hooks;
  hooks.loss = cross_entropy_on(train_set);
  hooks.val_metric = [&val_set](const MlpModel& m) {
    return validation_nll(m, val_set);
  };
  return train_custom(std::move(model), train_set, config, hooks);
}

LrSchedule schedule_from_log(const TrainLog& log) {
  LrSchedule schedule;
  for (const EpochStats& stats : log.epochs) {
    if (!schedule.segments.empty() &&
        schedule.segments.back().second == stats.lr) {
      ++schedule.segments.back().first;
    } else {
      schedule.segments.push_back({1, stats.lr});
    }
  }
  return schedule;
}

MlpModel train_fixed_schedule(MlpModel model, const Dataset& data,
                              const TrainConfig& config,
                              const LrSchedule& schedule) {
  config.validate();
  data.validate(model.config().class_count);
  if (data.size() == 0) throw InputError("train: empty training set");
  Rng rng(config.seed);
  AdamState adam = AdamState::zeros_like(model);
  const BatchLossFn loss = cross_entropy_on(data);
  for (const auto& [epochs, lr] : schedule.segments) {
    for (int e = 0; e < epochs; ++e) {
      run_epoch(model, data, default_rows(data.size()), loss, adam, lr,
                config, rng);
    }
  }
  model.set_mode(Mode::eval);
  return model;
}

PredictionSet predict(const MlpModel& model, const Eigen::MatrixXd& inputs,
                      GroupTag tag, std::span<const std::string> ids,
                      std::span<const int> labels,
                      const std::string& id_prefix) {
  const int classes = model.config().class_count;
  if (!ids.empty() &&
      static_cast<Eigen::Index>(ids.size()) != inputs.rows()) {
    throw InputError("predict: id count does not match rows");
  }
  if (!labels.empty() &&
      static_cast<Eigen::Index>(labels.size()) != inputs.rows()) {
    throw InputError("predict: label count does not match rows");
  }
  const Eigen::MatrixXd out = forward_eval(model, inputs);
  std::vector<PredictionRecord> records;
  records.reserve(static_cast<std::size_t>(inputs.rows()));
  for (Eigen::Index r = 0; r < inputs.rows(); ++r) {
    PredictionRecord record;
    record.id = ids.empty() ? id_prefix + std::to_string(r)
                            : ids[static_cast<std::size_t>(r)];
    record.logits.resize(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) {
      record.logits[static_cast<std::size_t>(c)] = out(r, c);
    }
    record.label =
        labels.empty() ? kUnlabeled : labels[static_cast<std::size_t>(r)];
    record.group = tag;
    records.push_back(std::move(record));
  }
  return PredictionSet(std::move(records), classes);
}

}  // namespace calibtk
