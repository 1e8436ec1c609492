#include "mlfn/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace mlfn::train {

std::string_view optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::adam ? "adam" : "sgd_nesterov";
}

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::adam;
  if (name == "sgd_nesterov" || name == "sgd") return OptimizerKind::sgd_nesterov;
  throw ContractError("unknown optimizer '" + std::string(name) + "'");
}

double Schedule::rate(double base, std::size_t iter) const {
  if (kind == Kind::constant || period == 0) return base;
  double lr = base;
  for (std::size_t drops = iter / period; drops > 0; --drops) lr *= factor;
  return lr;
}

// ---- optimizer --------------------------------------------------------------

template <Real T>
Optimizer<T>::Optimizer(OptimizerConfig config, std::vector<model::NamedVar<T>> params)
    : config_(config), params_(std::move(params)) {
  if (!(config_.lr >= 0.0)) throw ContractError("learning rate must be non-negative");
  if (config_.schedule.kind == Schedule::Kind::step_decay && config_.schedule.period == 0)
    throw ContractError("step-decay schedule needs a positive period");
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    if (config_.kind == OptimizerKind::adam) v_.emplace_back(p.var.shape());
  }
}

template <Real T>
void Optimizer<T>::step() {
  const double lr = current_lr();
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto var = params_[k].var;
    const Tensor<T>& grad = var.grad();
    Tensor<T>& value = var.mutable_value();
    require_same_shape(grad, value, "optimizer step");
    Tensor<T>& m = m_[k];
    if (config_.kind == OptimizerKind::adam) {
      Tensor<T>& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) + config_.weight_decay * value[i];
        const double mi = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
        const double vi = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = lr * (mi / c1) / (std::sqrt(vi / c2) + config_.eps);
        value[i] = static_cast<T>(value[i] - update);
      }
    } else {
      // buf = mu buf + g;  p -= lr (g + mu buf)
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]) + config_.weight_decay * value[i];
        const double b = config_.momentum * m[i] + g;
        m[i] = static_cast<T>(b);
        value[i] = static_cast<T>(value[i] - lr * (g + config_.momentum * b));
      }
    }
  }
}

template <Real T>
void Optimizer<T>::save(checkpoint::Checkpoint& ckpt) const {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    ckpt.records.push_back({"opt.m." + params_[k].name, m_[k].template cast<float>()});
    if (config_.kind == OptimizerKind::adam)
      ckpt.records.push_back({"opt.v." + params_[k].name, v_[k].template cast<float>()});
  }
  if (steps_ >= (std::size_t{1} << 24))
    throw ContractError("optimizer step count too large for the checkpoint format");
  ckpt.records.push_back({"opt.step", Tensor<float>::scalar(static_cast<float>(steps_))});
}

template <Real T>
void Optimizer<T>::load(const checkpoint::Checkpoint& ckpt) {
  auto fetch = [&](const std::string& name, const Shape& shape) {
    const auto* r = ckpt.find(name);
    if (!r) throw ContractError("checkpoint lacks optimizer state '" + name + "'");
    if (r->tensor.shape() != shape)
      throw ContractError("optimizer state '" + name + "' has shape " + shape_str(r->tensor.shape()));
    return r->tensor.template cast<T>();
  };
  for (std::size_t k = 0; k < params_.size(); ++k) {
    m_[k] = fetch("opt.m." + params_[k].name, params_[k].var.shape());
    if (config_.kind == OptimizerKind::adam)
      v_[k] = fetch("opt.v." + params_[k].name, params_[k].var.shape());
  }
  steps_ = static_cast<std::size_t>(fetch("opt.step", Shape{}).item());
}

// ---- augmentation -----------------------------------------------------------

template <Real T>
void augment_flip(Tensor<T>& batch, Rng& rng, double p) {
  if (batch.rank() != 4) throw ShapeError("augment_flip expects NCHW, got " + shape_str(batch.shape()));
  const std::size_t n = batch.dim(0), rows = batch.dim(1) * batch.dim(2), w = batch.dim(3);
  for (std::size_t i = 0; i < n; ++i) {
    if (!rng.bernoulli(p)) continue;
    T* img = batch.data() + i * rows * w;
    for (std::size_t r = 0; r < rows; ++r) std::reverse(img + r * w, img + (r + 1) * w);
  }
}

// ---- steps ------------------------------------------------------------------

template <Real T>
StepResult train_step(model::MlfnModel<T>& model, const Tensor<T>& images,
                      std::span<const int> labels, Optimizer<T>& opt) {
  if (!model.training()) throw ContractError("train_step: model is in eval mode");
  StepResult out;
  try {
    ad::Tape<T> tape;
    const auto fwd = model.forward(tape, images);
    const auto loss = ad::softmax_cross_entropy(tape, fwd.logits, labels);
    out.loss = loss.value().item();
    if (!std::isfinite(out.loss)) {
      model.zero_grad();
      throw DivergenceError("loss is " + std::to_string(out.loss));
    }
    const Tensor<T>& logits = fwd.logits.value();
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const T* row = logits.data() + i * classes;
      if (std::max_element(row, row + classes) - row == labels[i]) ++out.correct;
    }
    ad::backward(tape, loss);
  } catch (const NumericError& e) {
    model.zero_grad();
    throw DivergenceError(e.what());
  }
  opt.step();
  model.zero_grad();
  return out;
}

void TrainConfig::validate() const {
  if (batch_size < 2) throw ContractError("batch size must be at least 2 for batch-norm training");
  if (log_every == 0) throw ContractError("log_every must be positive");
  if (!(divergence_ratio > 1.0)) throw ContractError("divergence ratio must exceed 1");
}

std::size_t iterations_per_epoch(std::size_t dataset_size, std::size_t batch_size) {
  if (batch_size == 0 || dataset_size < batch_size)
    throw ContractError("batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                        std::to_string(dataset_size));
  return dataset_size / batch_size;
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size,
                                       std::uint64_t seed, std::size_t iter) {
  const std::size_t per_epoch = iterations_per_epoch(dataset_size, batch_size);
  const std::size_t epoch = iter / per_epoch, slot = iter % per_epoch;
  std::vector<std::size_t> perm(dataset_size);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {0x6261746368ULL, epoch}));
  rng.shuffle(perm);
  return {perm.begin() + static_cast<long>(slot * batch_size),
          perm.begin() + static_cast<long>((slot + 1) * batch_size)};
}

namespace {

template <Real T>
Tensor<T> gather_images(const Tensor<float>& images, std::span<const std::size_t> idx) {
  Shape shape = images.shape();
  const std::size_t per = images.size() / shape[0];
  shape[0] = idx.size();
  std::vector<T> out(idx.size() * per);
  for (std::size_t k = 0; k < idx.size(); ++k)
    std::copy_n(images.data() + idx[k] * per, per, out.data() + k * per);
  return Tensor<T>(std::move(shape), std::move(out));
}

std::string format_row(const LogRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.6f", r.iteration, r.loss, r.lr, r.train_acc);
  return buf;
}

constexpr const char* kLogHeader = "iteration,loss,lr,train_acc";

// Keeps the rows of an earlier run's log up to `upto` so a resumed run
// extends it without duplicates.
void truncate_log(const std::filesystem::path& path, std::size_t upto) {
  std::vector<std::string> keep{kLogHeader};
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= upto) keep.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : keep) out << l << '\n';
}

}  // namespace

void write_loss_csv(const std::filesystem::path& path, std::span<const LogRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << kLogHeader << '\n';
  for (const auto& r : rows) out << format_row(r) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

template <Real T>
void save_training_state(const model::MlfnModel<T>& model, const Optimizer<T>& opt,
                         std::size_t iteration, const std::filesystem::path& path) {
  auto ckpt = checkpoint::capture(model);
  opt.save(ckpt);
  ckpt.records.push_back({"train.iteration", Tensor<float>::scalar(static_cast<float>(iteration))});
  checkpoint::write(path, ckpt);
}

template <Real T>
std::size_t load_training_state(model::MlfnModel<T>& model, Optimizer<T>& opt,
                                const std::filesystem::path& path) {
  const auto ckpt = checkpoint::read(path);
  checkpoint::restore(model, ckpt);
  opt.load(ckpt);
  const auto* it = ckpt.find("train.iteration");
  if (!it) throw ContractError(path.string() + " is a model checkpoint without training state");
  return static_cast<std::size_t>(it->tensor.item());
}

template <Real T>
TrainResult run_training(const TrainConfig& config, const LabeledImages& data,
                         model::MlfnModel<T>& model, const RunOptions& run) {
  config.validate();
  const std::size_t n = data.labels.size();
  if (data.images.rank() != 4 || data.images.dim(0) != n)
    throw ShapeError("training images " + shape_str(data.images.shape()) + " vs " +
                     std::to_string(n) + " labels");
  if (data.classes > model.config().num_classes)
    throw ContractError("dataset has more classes than the classifier");
  iterations_per_epoch(n, config.batch_size);

  Optimizer<T> opt(config.optimizer, model.parameters());
  std::size_t start = 0;
  if (run.resume_from) start = load_training_state(model, opt, *run.resume_from);

  std::filesystem::path log_path;
  if (run.out_dir) {
    std::filesystem::create_directories(*run.out_dir);
    log_path = *run.out_dir / "loss.csv";
    truncate_log(log_path, start);
  }
  std::ofstream log_out;
  if (!log_path.empty()) log_out.open(log_path, std::ios::app);

  model.set_training(true);
  const std::size_t end = std::min(config.iterations, run.stop_after.value_or(config.iterations));
  TrainResult result;
  double first_loss = std::numeric_limits<double>::quiet_NaN();
  std::size_t above = 0;
  std::vector<double> recent;
  for (std::size_t iter = start; iter < end; ++iter) {
    const auto idx = batch_indices(n, config.batch_size, config.seed, iter);
    Tensor<T> batch = gather_images<T>(data.images, idx);
    std::vector<int> labels(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) labels[k] = data.labels[idx[k]];
    if (config.flip) {
      Rng rng(derive_seed(config.seed, {0x666c6970ULL, iter}));
      augment_flip(batch, rng);
    }
    const double lr = opt.current_lr();
    StepResult step;
    try {
      step = train_step(model, batch, labels, opt);
    } catch (const DivergenceError& e) {
      std::ostringstream msg;
      msg << "training diverged at iteration " << iter + 1 << ": " << e.what() << "; lr " << lr
          << "; last losses";
      for (double l : recent) msg << ' ' << l;
      if (run.out_dir) std::ofstream(*run.out_dir / "divergence.txt") << msg.str() << '\n';
      throw DivergenceError(msg.str());
    }
    if (iter == start) first_loss = step.loss;
    above = step.loss > config.divergence_ratio * first_loss ? above + 1 : 0;
    recent.push_back(step.loss);
    if (recent.size() > 10) recent.erase(recent.begin());
    if (above >= config.divergence_patience) {
      std::ostringstream msg;
      msg << "training diverged at iteration " << iter + 1 << ": loss above "
          << config.divergence_ratio << "x the initial " << first_loss << " for " << above
          << " steps";
      if (run.out_dir) std::ofstream(*run.out_dir / "divergence.txt") << msg.str() << '\n';
      throw DivergenceError(msg.str());
    }

    const std::size_t done = iter + 1;
    result.final_loss = step.loss;
    if (done % config.log_every == 0 || done == end) {
      const LogRow row{done, step.loss, lr,
                       static_cast<double>(step.correct) / static_cast<double>(labels.size())};
      result.log.push_back(row);
      if (log_out) log_out << format_row(row) << '\n' << std::flush;
      if (run.on_log) run.on_log(row);
    }
    if (run.out_dir && config.checkpoint_every != 0 && done % config.checkpoint_every == 0)
      save_training_state(model, opt, done, *run.out_dir / "checkpoint.bin");
  }
  result.iterations = std::max(start, end);
  if (run.out_dir && end > start) save_training_state(model, opt, end, *run.out_dir / "checkpoint.bin");
  return result;
}

template <Real T>
double classification_accuracy(model::MlfnModel<T>& model, const LabeledImages& data,
                               std::size_t batch) {
  const bool was_training = model.training();
  model.set_training(false);
  const std::size_t n = data.labels.size();
  std::size_t correct = 0;
  for (std::size_t lo = 0; lo < n; lo += batch) {
    std::vector<std::size_t> idx(std::min(batch, n - lo));
    std::iota(idx.begin(), idx.end(), lo);
    ad::Tape<T> tape(false);
    const auto logits = model.forward(tape, gather_images<T>(data.images, idx)).logits.value();
    const std::size_t classes = logits.dim(1);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const T* row = logits.data() + k * classes;
      if (std::max_element(row, row + classes) - row == data.labels[lo + k]) ++correct;
    }
  }
  model.set_training(was_training);
  return n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
}

#define MLFN_INSTANTIATE(T)                                                                      \
  template class Optimizer<T>;                                                                   \
  template void augment_flip<T>(Tensor<T>&, Rng&, double);                                      \
  template StepResult train_step<T>(model::MlfnModel<T>&, const Tensor<T>&, std::span<const int>, \
                                    Optimizer<T>&);                                              \
  template TrainResult run_training<T>(const TrainConfig&, const LabeledImages&,                 \
                                       model::MlfnModel<T>&, const RunOptions&);                 \
  template void save_training_state<T>(const model::MlfnModel<T>&, const Optimizer<T>&,          \
                                       std::size_t, const std::filesystem::path&);               \
  template std::size_t load_training_state<T>(model::MlfnModel<T>&, Optimizer<T>&,               \
                                              const std::filesystem::path&);                     \
  template double classification_accuracy<T>(model::MlfnModel<T>&, const LabeledImages&,         \
                                             std::size_t);
MLFN_INSTANTIATE(float)
MLFN_INSTANTIATE(double)
#undef MLFN_INSTANTIATE

}  // namespace mlfn::train
